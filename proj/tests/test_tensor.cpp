#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fd_check.hpp"
#include "mmcnn/tensor.hpp"

using namespace mmcnn;
using testutil::fd_max_rel_err;
using testutil::random_tensor;
using testutil::random_weights;
using testutil::weighted_sum;

TEST_CASE("conv2d identity kernel") {
  auto x = Tensor<double>::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto k = Tensor<double>::from({1, 1, 1, 1}, {1});
  auto y = conv2d(x, k, 1, 0, (Tape<double>*)nullptr);
  REQUIRE(y.shape == std::vector<int>{1, 1, 3, 3});
  for (int i = 0; i < 9; ++i) CHECK(y[std::size_t(i)] == x[std::size_t(i)]);
}

TEST_CASE("conv2d constant input, all-ones kernel") {
  Tensor<double> x({1, 1, 4, 4}, 5.0);
  Tensor<double> k({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, k, 1, 0, (Tape<double>*)nullptr);
  REQUIRE(y.shape == std::vector<int>{1, 1, 2, 2});
  for (int i = 0; i < 4; ++i) CHECK(y[std::size_t(i)] == Catch::Approx(45.0));
}

TEST_CASE("conv2d shape and config errors") {
  Tensor<double> x({1, 2, 8, 8});
  CHECK_THROWS_AS(conv2d(x, Tensor<double>({1, 3, 3, 3}), 1, 1,
                         (Tape<double>*)nullptr),
                  DimensionError);
  CHECK_THROWS_AS(conv2d(x, Tensor<double>({1, 2, 2, 2}), 1, 0,
                         (Tape<double>*)nullptr),
                  ConfigError);
  // (8 - 3) is not divisible by 2
  CHECK_THROWS_AS(conv2d(x, Tensor<double>({1, 2, 3, 3}), 2, 0,
                         (Tape<double>*)nullptr),
                  ConfigError);
}

TEST_CASE("conv2d gradient matches finite differences") {
  // 9 + 2*1 - 3 = 8 divides stride 2 exactly -> 5x5 output
  auto x = random_tensor({2, 3, 9, 9}, 11);
  auto k = random_tensor({4, 3, 3, 3}, 12);
  auto w = random_weights(std::size_t(2) * 4 * 5 * 5, 13);

  Tape<double> tape;
  auto y = conv2d(x, k, 2, 1, &tape);
  REQUIRE(y.shape == std::vector<int>{2, 4, 5, 5});
  auto loss = weighted_sum(y, w, &tape);
  tape.backward(loss);

  auto forward = [&]() {
    auto y2 = conv2d(x, k, 2, 1, (Tape<double>*)nullptr);
    double s = 0;
    for (std::size_t i = 0; i < y2.data().size(); ++i) s += y2[i] * w[i];
    return s;
  };
  CHECK(fd_max_rel_err({&x, &k}, forward) < 1e-6);
}

TEST_CASE("conv2d linearity") {
  auto x = random_tensor({1, 2, 6, 6}, 21);
  auto k = random_tensor({3, 2, 3, 3}, 22);
  auto y1 = conv2d(x, k, 1, 1, (Tape<double>*)nullptr);
  auto xs = x.clone();
  for (auto& v : xs.data()) v *= 2.5;
  auto y2 = conv2d(xs, k, 1, 1, (Tape<double>*)nullptr);
  for (std::size_t i = 0; i < y1.data().size(); ++i)
    CHECK(y2[i] == Catch::Approx(2.5 * y1[i]).margin(1e-12));
}

TEST_CASE("avg_pool2d forward and shape rules") {
  Tensor<double> x = Tensor<double>::from({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  auto y = avg_pool2d(x, 2, (Tape<double>*)nullptr);
  REQUIRE(y.shape == std::vector<int>{1, 1, 1, 1});
  CHECK(y[0] == Catch::Approx(2.5));
  Tensor<double> odd({1, 1, 5, 5});
  CHECK_THROWS_AS(avg_pool2d(odd, 2, (Tape<double>*)nullptr), ConfigError);
}

TEST_CASE("avg_pool2d gradient matches finite differences") {
  auto x = random_tensor({2, 3, 6, 6}, 31);
  auto w = random_weights(std::size_t(2) * 3 * 3 * 3, 32);
  Tape<double> tape;
  auto y = avg_pool2d(x, 2, &tape);
  REQUIRE(y.shape == std::vector<int>{2, 3, 3, 3});
  auto loss = weighted_sum(y, w, &tape);
  tape.backward(loss);
  auto forward = [&]() {
    auto y2 = avg_pool2d(x, 2, (Tape<double>*)nullptr);
    double s = 0;
    for (std::size_t i = 0; i < y2.data().size(); ++i) s += y2[i] * w[i];
    return s;
  };
  CHECK(fd_max_rel_err({&x}, forward) < 1e-6);
}

TEST_CASE("batch_norm identity on standardized data") {
  // zero-mean unit-variance channel, gamma=1, beta=0
  Tensor<double> x({1, 1, 2, 2});
  x.data() = {-1.0, 1.0, -1.0, 1.0};
  Tensor<double> gamma({1}, 1.0), beta({1}, 0.0);
  BatchNormState<double> st(1);
  auto y = batch_norm(x, gamma, beta, st, true, (Tape<double>*)nullptr);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(y[i] == Catch::Approx(x[i]).margin(1e-3));
}

TEST_CASE("batch_norm constant channel goes to beta") {
  Tensor<double> x({2, 1, 2, 2}, 7.0);
  Tensor<double> gamma({1}, 1.5), beta({1}, 0.25);
  BatchNormState<double> st(1);
  auto y = batch_norm(x, gamma, beta, st, true, (Tape<double>*)nullptr);
  for (std::size_t i = 0; i < y.data().size(); ++i)
    CHECK(y[i] == Catch::Approx(0.25).margin(1e-3));
}

TEST_CASE("batch_norm rejects singleton statistics pool") {
  Tensor<double> x({1, 2, 1, 1});
  Tensor<double> gamma({2}, 1.0), beta({2}, 0.0);
  BatchNormState<double> st(2);
  CHECK_THROWS_AS(batch_norm(x, gamma, beta, st, true, (Tape<double>*)nullptr),
                  ConfigError);
  // eval mode is fine with a single value
  CHECK_NOTHROW(batch_norm(x, gamma, beta, st, false, (Tape<double>*)nullptr));
}

TEST_CASE("batch_norm gradient matches finite differences") {
  auto x = random_tensor({4, 2, 3, 3}, 31);
  auto gamma = random_tensor({2}, 32, 0.3);
  for (auto& v : gamma.data()) v += 1.0;
  auto beta = random_tensor({2}, 33, 0.3);
  auto w = random_weights(x.data().size(), 34);

  Tape<double> tape;
  BatchNormState<double> st(2);
  auto y = batch_norm(x, gamma, beta, st, true, &tape);
  auto loss = weighted_sum(y, w, &tape);
  tape.backward(loss);

  auto forward = [&]() {
    BatchNormState<double> st2(2);
    auto y2 = batch_norm(x, gamma, beta, st2, true, (Tape<double>*)nullptr);
    double s = 0;
    for (std::size_t i = 0; i < y2.data().size(); ++i) s += y2[i] * w[i];
    return s;
  };
  CHECK(fd_max_rel_err({&x, &gamma, &beta}, forward) < 1e-5);
}

TEST_CASE("relu example") {
  auto x = Tensor<double>::from({3}, {-1, 0, 2});
  auto y = relu(x, (Tape<double>*)nullptr);
  CHECK(y[0] == 0);
  CHECK(y[1] == 0);
  CHECK(y[2] == 2);
}

TEST_CASE("concat forward and backward split") {
  auto a = Tensor<double>::from({1, 2}, {1, 2});
  auto b = Tensor<double>::from({1, 1}, {3});
  Tape<double> tape;
  auto y = concat(a, b, &tape);
  REQUIRE(y.data() == std::vector<double>{1, 2, 3});
  auto loss = sum(y, &tape);
  tape.backward(loss);
  CHECK(a.grad() == std::vector<double>{1, 1});
  CHECK(b.grad() == std::vector<double>{1});
}

TEST_CASE("add gradient is the identity") {
  auto a = random_tensor({2, 3}, 41);
  auto b = random_tensor({2, 3}, 42);
  auto w = random_weights(6, 43);
  Tape<double> tape;
  auto y = add(a, b, &tape);
  auto loss = weighted_sum(y, w, &tape);
  tape.backward(loss);
  auto forward = [&]() {
    auto y2 = add(a, b, (Tape<double>*)nullptr);
    double s = 0;
    for (std::size_t i = 0; i < 6; ++i) s += y2[i] * w[i];
    return s;
  };
  CHECK(fd_max_rel_err({&a, &b}, forward) < 1e-6);
  CHECK_THROWS_AS(add(a, Tensor<double>({3, 2}), (Tape<double>*)nullptr),
                  DimensionError);
}

TEST_CASE("global_avg_pool values and backward") {
  SECTION("constant map") {
    Tensor<double> x({1, 1, 3, 3}, 4.25);
    auto y = global_avg_pool(x, (Tape<double>*)nullptr);
    CHECK(y[0] == Catch::Approx(4.25));
  }
  SECTION("2x2 arithmetic and gradient") {
    auto x = Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4});
    Tape<double> tape;
    auto y = global_avg_pool(x, &tape);
    CHECK(y[0] == Catch::Approx(2.5));
    auto loss = sum(y, &tape);
    tape.backward(loss);
    for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == Catch::Approx(0.25));
  }
}

TEST_CASE("linear examples and gradient") {
  SECTION("identity weight") {
    auto x = Tensor<double>::from({1, 2}, {3, 4});
    auto w = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    auto y = linear(x, w, nullptr, (Tape<double>*)nullptr);
    CHECK(y[0] == 3);
    CHECK(y[1] == 4);
  }
  SECTION("hand arithmetic") {
    auto x = Tensor<double>::from({1, 2}, {1, 2});
    auto w = Tensor<double>::from({1, 2}, {3, 4});
    auto y = linear(x, w, nullptr, (Tape<double>*)nullptr);
    CHECK(y[0] == Catch::Approx(11.0));
  }
  SECTION("gradient vs finite differences, with bias") {
    auto x = random_tensor({3, 4}, 51);
    auto w = random_tensor({2, 4}, 52);
    auto b = random_tensor({2}, 53);
    auto pw = random_weights(6, 54);
    Tape<double> tape;
    auto y = linear(x, w, &b, &tape);
    auto loss = weighted_sum(y, pw, &tape);
    tape.backward(loss);
    auto forward = [&]() {
      auto y2 = linear(x, w, &b, (Tape<double>*)nullptr);
      double s = 0;
      for (std::size_t i = 0; i < y2.data().size(); ++i) s += y2[i] * pw[i];
      return s;
    };
    CHECK(fd_max_rel_err({&x, &w, &b}, forward) < 1e-6);
  }
}

TEST_CASE("softmax cross entropy") {
  SECTION("uniform logits give ln K") {
    Tensor<double> logits({1, 3}, 0.7);
    auto loss = softmax_cross_entropy(logits, {1}, (Tape<double>*)nullptr);
    CHECK(loss[0] == Catch::Approx(std::log(3.0)).epsilon(1e-9));
  }
  SECTION("huge margin on the correct class gives ~0 loss") {
    auto logits = Tensor<double>::from({1, 3}, {1000.0, 0.0, 0.0});
    auto loss = softmax_cross_entropy(logits, {0}, (Tape<double>*)nullptr);
    CHECK(loss[0] == Catch::Approx(0.0).margin(1e-9));
  }
  SECTION("out-of-range label rejected") {
    Tensor<double> logits({1, 3});
    CHECK_THROWS_AS(softmax_cross_entropy(logits, {3}, (Tape<double>*)nullptr),
                    ConfigError);
  }
  SECTION("gradient equals softmax minus one-hot, over N") {
    auto logits = random_tensor({2, 3}, 61);
    std::vector<int> labels = {2, 0};
    Tape<double> tape;
    auto loss = softmax_cross_entropy(logits, labels, &tape);
    tape.backward(loss);
    for (int n = 0; n < 2; ++n) {
      double mx = std::max({logits[std::size_t(n) * 3], logits[std::size_t(n) * 3 + 1],
                            logits[std::size_t(n) * 3 + 2]});
      double z = 0;
      for (int j = 0; j < 3; ++j) z += std::exp(logits[std::size_t(n) * 3 + j] - mx);
      for (int j = 0; j < 3; ++j) {
        double p = std::exp(logits[std::size_t(n) * 3 + j] - mx) / z;
        double expect = (p - (labels[std::size_t(n)] == j ? 1.0 : 0.0)) / 2.0;
        CHECK(logits.grad()[std::size_t(n) * 3 + j] ==
              Catch::Approx(expect).margin(1e-12));
      }
    }
    auto forward = [&]() {
      return softmax_cross_entropy(logits, labels, (Tape<double>*)nullptr)[0];
    };
    CHECK(fd_max_rel_err({&logits}, forward) < 1e-6);
  }
}

TEST_CASE("backward basics") {
  SECTION("loss = sum(w) gives all-ones gradient") {
    auto w = random_tensor({2, 3, 2}, 71);
    Tape<double> tape;
    auto loss = sum(w, &tape);
    tape.backward(loss);
    for (double g : w.grad()) CHECK(g == 1.0);
  }
  SECTION("loss = 0 * w gives zero gradient") {
    auto w = random_tensor({5}, 72);
    Tape<double> tape;
    auto loss = sum(scale(w, 0.0, &tape), &tape);
    tape.backward(loss);
    for (double g : w.grad()) CHECK(g == 0.0);
  }
  SECTION("non-scalar loss rejected") {
    Tensor<double> w({2});
    Tape<double> tape;
    CHECK_THROWS_AS(tape.backward(w), DimensionError);
  }
  SECTION("repeated backward accumulates") {
    auto w = random_tensor({3}, 73);
    Tape<double> tape;
    auto loss = sum(w, &tape);
    tape.backward(loss);
    tape.backward(loss);
    for (double g : w.grad()) CHECK(g == 2.0);
  }
  SECTION("parameter not reachable from the loss keeps zero gradient") {
    auto w = random_tensor({3}, 74);
    auto unused = random_tensor({3}, 75);
    unused.grad();  // allocate
    Tape<double> tape;
    auto loss = sum(w, &tape);
    tape.backward(loss);
    for (double g : unused.grad()) CHECK(g == 0.0);
  }
}

TEST_CASE("composite conv-bn-relu-gap-linear-ce matches finite differences") {
  auto x = random_tensor({2, 2, 6, 6}, 81);
  auto k = random_tensor({3, 2, 3, 3}, 82, 0.5);
  auto gamma = Tensor<double>({3}, 1.0);
  auto beta = random_tensor({3}, 83, 0.1);
  auto w = random_tensor({3, 3}, 84, 0.7);
  std::vector<int> labels = {0, 2};

  // keep pre-relu values away from the kink so finite differences stay valid
  {
    BatchNormState<double> st(3);
    auto c = conv2d(x, k, 1, 1, (Tape<double>*)nullptr);
    auto b = batch_norm(c, gamma, beta, st, true, (Tape<double>*)nullptr);
    double closest = 1e9;
    for (double v : b.data()) closest = std::min(closest, std::abs(v));
    REQUIRE(closest > 1e-3);
  }

  Tape<double> tape;
  BatchNormState<double> st(3);
  auto c = conv2d(x, k, 1, 1, &tape);
  auto b = batch_norm(c, gamma, beta, st, true, &tape);
  auto r = relu(b, &tape);
  auto p = global_avg_pool(r, &tape);
  auto logits = linear(p, w, nullptr, &tape);
  auto loss = softmax_cross_entropy(logits, labels, &tape);
  tape.backward(loss);

  auto forward = [&]() {
    BatchNormState<double> st2(3);
    auto c2 = conv2d(x, k, 1, 1, (Tape<double>*)nullptr);
    auto b2 = batch_norm(c2, gamma, beta, st2, true, (Tape<double>*)nullptr);
    auto r2 = relu(b2, (Tape<double>*)nullptr);
    auto p2 = global_avg_pool(r2, (Tape<double>*)nullptr);
    auto l2 = linear(p2, w, nullptr, (Tape<double>*)nullptr);
    return softmax_cross_entropy(l2, labels, (Tape<double>*)nullptr)[0];
  };
  CHECK(fd_max_rel_err({&x, &k, &gamma, &beta, &w}, forward) < 1e-4);
}

TEST_CASE("concat-then-linear equals the sum of split linears") {
  auto a = random_tensor({2, 3}, 91);
  auto b = random_tensor({2, 4}, 92);
  auto w = random_tensor({2, 7}, 93);
  auto y = linear(concat(a, b, (Tape<double>*)nullptr), w, nullptr,
                  (Tape<double>*)nullptr);
  // split weights at Da
  Tensor<double> wa({2, 3}), wb({2, 4});
  for (int o = 0; o < 2; ++o) {
    for (int j = 0; j < 3; ++j) wa[std::size_t(o) * 3 + j] = w[std::size_t(o) * 7 + j];
    for (int j = 0; j < 4; ++j) wb[std::size_t(o) * 4 + j] = w[std::size_t(o) * 7 + 3 + j];
  }
  auto ya = linear(a, wa, nullptr, (Tape<double>*)nullptr);
  auto yb = linear(b, wb, nullptr, (Tape<double>*)nullptr);
  for (std::size_t i = 0; i < y.data().size(); ++i)
    CHECK(y[i] == Catch::Approx(ya[i] + yb[i]).margin(1e-12));
}

TEST_CASE("ops are deterministic for identical inputs") {
  auto x = random_tensor({2, 3, 8, 8}, 101);
  auto k = random_tensor({4, 3, 3, 3}, 102);
  auto y1 = conv2d(x, k, 1, 1, (Tape<double>*)nullptr);
  auto y2 = conv2d(x, k, 1, 1, (Tape<double>*)nullptr);
  CHECK(y1.data() == y2.data());
}

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "mmcnn/metrics.hpp"

using namespace mmcnn;

TEST_CASE("perfect diagonal gives all ones") {
  auto cm = ConfusionMatrix::from(3, {20, 0, 0, 0, 20, 0, 0, 0, 20});
  auto pc = per_class(cm);
  for (const auto& m : pc) {
    CHECK(m.sensitivity == 1.0);
    CHECK(m.specificity == 1.0);
    CHECK(m.precision == 1.0);
    CHECK(m.f1_pr == 1.0);
    CHECK(m.f1_hm == 1.0);
    CHECK(!m.degenerate);
  }
  auto ov = overall(pc, cm);
  CHECK(ov.overall_f1 == 1.0);
  CHECK(ov.accuracy == 1.0);
}

TEST_CASE("fundus baseline confusion matrix reproduces the reported numbers") {
  // 20 eyes per class; reconstructed from the published per-class metrics
  auto cm = ConfusionMatrix::from(3, {20, 0, 0,    // normal
                                      1, 14, 5,    // dryAMD
                                      0, 1, 19});  // wetAMD
  auto pc = per_class(cm);

  // wetAMD one-vs-rest: TP=19 FN=1 FP=5 TN=35
  CHECK(pc[2].tp == 19);
  CHECK(pc[2].fn == 1);
  CHECK(pc[2].fp == 5);
  CHECK(pc[2].tn == 35);
  CHECK(pc[2].sensitivity == Catch::Approx(0.950).margin(1e-3));
  CHECK(pc[2].specificity == Catch::Approx(0.875).margin(1e-3));
  CHECK(pc[2].f1_pr == Catch::Approx(0.863).margin(1e-3));
  // the sensitivity/specificity harmonic mean does NOT give the printed 0.863
  CHECK(pc[2].f1_hm == Catch::Approx(0.911).margin(1e-3));
  CHECK(std::abs(pc[2].f1_hm - 0.863) > 0.01);

  // dryAMD F1 is exactly 0.8 (= 28/35)
  CHECK(pc[1].f1_pr == Catch::Approx(0.800).margin(1e-9));

  auto ov = overall(pc, cm);
  CHECK(ov.overall_f1 == Catch::Approx(0.879).margin(1e-3));
  CHECK(ov.accuracy == Catch::Approx(53.0 / 60.0));
  CHECK(ov.accuracy == Catch::Approx(0.883).margin(1e-3));
}

TEST_CASE("feature-classifier baseline on the 104 test pairs") {
  // normal one-vs-rest reconstructs to TP=20 FN=0 FP=2 TN=82
  auto cm = ConfusionMatrix::from(3, {20, 0, 0,    // normal (20)
                                      1, 37, 0,    // dryAMD (38)
                                      1, 0, 45});  // wetAMD (46)
  REQUIRE(cm.total() == 104);
  auto pc = per_class(cm);
  CHECK(pc[0].tp == 20);
  CHECK(pc[0].fp == 2);
  CHECK(pc[0].tn == 82);
  CHECK(pc[0].sensitivity == Catch::Approx(1.000).margin(1e-3));
  CHECK(pc[0].specificity == Catch::Approx(0.976).margin(1e-3));
  CHECK(pc[0].f1_pr == Catch::Approx(0.952).margin(1e-3));
}

TEST_CASE("101 of 104 correct prints as 0.971") {
  CHECK(round3(101.0 / 104.0) == Catch::Approx(0.971));
  CHECK(format3(101.0 / 104.0) == "0.971");
}

TEST_CASE("constant predictor on a balanced set") {
  auto cm = ConfusionMatrix::from(3, {20, 0, 0, 20, 0, 0, 20, 0, 0});
  auto pc = per_class(cm);
  auto ov = overall(pc, cm);
  CHECK(ov.accuracy == Catch::Approx(1.0 / 3.0));
  // classes never predicted have 0/0 precision -> 0 with the flag set
  CHECK(pc[1].precision == 0.0);
  CHECK(pc[1].degenerate);
  CHECK(pc[2].degenerate);
  CHECK(!pc[0].degenerate);
}

TEST_CASE("permuting classes permutes per-class metrics, not the summary") {
  auto cm = ConfusionMatrix::from(3, {18, 1, 1, 2, 15, 3, 0, 4, 16});
  // swap classes 0 and 2 everywhere
  ConfusionMatrix swapped(3);
  auto map = [](int c) { return c == 0 ? 2 : c == 2 ? 0 : 1; };
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) swapped.at(map(i), map(j)) = cm.at(i, j);

  auto pc = per_class(cm), ps = per_class(swapped);
  for (int c = 0; c < 3; ++c) {
    CHECK(pc[std::size_t(c)].f1_pr == ps[std::size_t(map(c))].f1_pr);
    CHECK(pc[std::size_t(c)].sensitivity == ps[std::size_t(map(c))].sensitivity);
  }
  auto o1 = overall(pc, cm), o2 = overall(ps, swapped);
  CHECK(o1.overall_f1 == Catch::Approx(o2.overall_f1));
  CHECK(o1.accuracy == Catch::Approx(o2.accuracy));
}

TEST_CASE("metrics invariant under duplicating every instance") {
  auto cm = ConfusionMatrix::from(3, {18, 1, 1, 2, 15, 3, 0, 4, 16});
  ConfusionMatrix doubled(3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) doubled.at(i, j) = 2 * cm.at(i, j);
  auto a = per_class(cm), b = per_class(doubled);
  for (int c = 0; c < 3; ++c) {
    CHECK(a[std::size_t(c)].sensitivity == Catch::Approx(b[std::size_t(c)].sensitivity));
    CHECK(a[std::size_t(c)].specificity == Catch::Approx(b[std::size_t(c)].specificity));
    CHECK(a[std::size_t(c)].f1_pr == Catch::Approx(b[std::size_t(c)].f1_pr));
  }
}

TEST_CASE("f1 variants coincide when no false positives exist") {
  // class 0 has FP=0 and TN+FP=TN, so precision = specificity = 1
  auto cm = ConfusionMatrix::from(3, {15, 3, 2, 0, 20, 0, 0, 1, 19});
  auto pc = per_class(cm);
  REQUIRE(pc[0].fp == 0);
  CHECK(pc[0].precision == 1.0);
  CHECK(pc[0].specificity == 1.0);
  CHECK(pc[0].f1_pr == Catch::Approx(pc[0].f1_hm));
}

TEST_CASE("rounding is half-up to three decimals") {
  CHECK(round3(0.8636) == Catch::Approx(0.864));
  CHECK(round3(0.8795) == Catch::Approx(0.880));
  CHECK(round3(0.8634999) == Catch::Approx(0.863));
  CHECK(format3(0.5) == "0.500");
}

TEST_CASE("empty matrix is rejected") {
  ConfusionMatrix cm(3);
  CHECK_THROWS_AS(per_class(cm), ConfigError);
}

TEST_CASE("table and json outputs carry the rounded values") {
  auto cm = ConfusionMatrix::from(3, {20, 0, 0, 1, 14, 5, 0, 1, 19});
  auto pc = per_class(cm);
  auto ov = overall(pc, cm);
  std::vector<std::string> names = {"normal", "dryAMD", "wetAMD"};

  std::string table = metrics_table(names, pc, ov);
  CHECK(table.find("wetAMD") != std::string::npos);
  CHECK(table.find("0.950") != std::string::npos);   // wetAMD sensitivity
  CHECK(table.find("0.875") != std::string::npos);   // wetAMD specificity
  CHECK(table.find("Accuracy=0.883") != std::string::npos);

  auto j = metrics_json(names, cm, pc, ov);
  CHECK(j["per_class"]["wetAMD"]["f1_pr"].get<double>() == Catch::Approx(0.864));
  CHECK(j["per_class"]["dryAMD"]["f1_pr"].get<double>() == Catch::Approx(0.800));
  CHECK(j["accuracy"].get<double>() == Catch::Approx(0.883));
  CHECK(j["confusion_matrix"][1][2].get<long long>() == 5);
}

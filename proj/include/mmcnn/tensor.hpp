#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <type_traits>
#include <vector>

#include <cblas.h>

#include "mmcnn/errors.hpp"

namespace mmcnn {

// Dense n-dimensional tensor with a lazily allocated gradient buffer.
// Copies share the underlying storage (shallow value semantics), which lets
// tape closures hold cheap handles to the tensors they touch.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<T>> data_;
  // Always-present shared cell: every copy of a Tensor sees the same
  // gradient buffer, even when it is allocated after the copy was taken.
  std::shared_ptr<std::vector<T>> grad_ = std::make_shared<std::vector<T>>();

  Tensor() = default;

  explicit Tensor(std::vector<int> shp, T fill = T(0)) : shape(std::move(shp)) {
    data_ = std::make_shared<std::vector<T>>(std::size_t(numel()), fill);
  }

  static Tensor from(std::vector<int> shp, std::vector<T> vals) {
    Tensor t;
    t.shape = std::move(shp);
    if (std::size_t(t.numel()) != vals.size())
      throw DimensionError("Tensor::from: value count does not match shape");
    t.data_ = std::make_shared<std::vector<T>>(std::move(vals));
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  long long numel() const {
    long long n = 1;
    for (int d : shape) {
      if (d <= 0) throw DimensionError("Tensor: non-positive dimension");
      n *= d;
    }
    return n;
  }

  int dim(std::size_t i) const { return shape.at(i); }

  std::vector<T>& data() { return *data_; }
  const std::vector<T>& data() const { return *data_; }

  bool has_grad() const { return !grad_->empty(); }

  std::vector<T>& grad() {
    if (grad_->empty()) grad_->assign(data_->size(), T(0));
    return *grad_;
  }

  void zero_grad() { std::fill(grad_->begin(), grad_->end(), T(0)); }

  T& operator[](std::size_t i) { return (*data_)[i]; }
  const T& operator[](std::size_t i) const { return (*data_)[i]; }

  // Deep copy (storage and gradient not shared with the original).
  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    t.grad_ = std::make_shared<std::vector<T>>(*grad_);
    return t;
  }
};

// Row-major GEMM on raw buffers, dispatched to OpenBLAS.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta,
                 float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
              ldb, beta, c, ldc);
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
              ldb, beta, c, ldc);
}

// Records backward closures in forward order; backward() replays them in
// reverse. Each op registers its output tensor so that backward() can reset
// intermediate gradients before replaying; gradients of leaf tensors
// (parameters and inputs) therefore accumulate by exactly one contribution
// per backward call.
template <typename T>
class Tape {
 public:
  template <typename F>
  void record(Tensor<T>& out, F&& f) {
    outs_.push_back(out.grad_);
    ops_.emplace_back(std::forward<F>(f));
  }

  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw DimensionError("backward: loss must be a scalar");
    for (auto& g : outs_) std::fill(g->begin(), g->end(), T(0));
    loss.grad()[0] = T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  void clear() {
    ops_.clear();
    outs_.clear();
  }
  std::size_t size() const { return ops_.size(); }

 private:
  std::vector<std::function<void()>> ops_;
  std::vector<std::shared_ptr<std::vector<T>>> outs_;
};

namespace detail {

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
#ifndef NDEBUG
  for (T v : t.data())
    if (!std::isfinite(double(v)))
      throw std::runtime_error(std::string("non-finite value produced by ") + op);
#else
  (void)t;
  (void)op;
#endif
}

template <typename T>
inline void im2col(const T* img, int channels, int h, int w, int kh, int kw,
                   int stride, int pad, int out_h, int out_w, T* col) {
  // col layout: [channels*kh*kw, out_h*out_w], row-major
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* row = col + (std::size_t(c) * kh * kw + ki * kw + kj) *
                           (std::size_t(out_h) * out_w);
        for (int oy = 0; oy < out_h; ++oy) {
          int iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) {
            std::fill(row + std::size_t(oy) * out_w,
                      row + std::size_t(oy + 1) * out_w, T(0));
            continue;
          }
          const T* src = img + (std::size_t(c) * h + iy) * w;
          for (int ox = 0; ox < out_w; ++ox) {
            int ix = ox * stride + kj - pad;
            row[std::size_t(oy) * out_w + ox] =
                (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
inline void col2im_accumulate(const T* col, int channels, int h, int w, int kh,
                              int kw, int stride, int pad, int out_h, int out_w,
                              T* img) {
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* row = col + (std::size_t(c) * kh * kw + ki * kw + kj) *
                                 (std::size_t(out_h) * out_w);
        for (int oy = 0; oy < out_h; ++oy) {
          int iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) continue;
          T* dst = img + (std::size_t(c) * h + iy) * w;
          for (int ox = 0; ox < out_w; ++ox) {
            int ix = ox * stride + kj - pad;
            if (ix >= 0 && ix < w) dst[ix] += row[std::size_t(oy) * out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2D cross-correlation. input [N,C,H,W], kernel [K,C,kh,kw]; the output
// spatial size must divide exactly.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, int stride,
                 int pad, Tape<T>* tape) {
  if (input.shape.size() != 4 || kernel.shape.size() != 4)
    throw DimensionError("conv2d: expected 4-d input and kernel");
  int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  int k = kernel.dim(0), kc = kernel.dim(1), kh = kernel.dim(2),
      kw = kernel.dim(3);
  if (kc != c) throw DimensionError("conv2d: channel mismatch");
  if (kh % 2 == 0 || kw % 2 == 0)
    throw ConfigError("conv2d: kernel dims must be odd");
  if (stride < 1 || pad < 0) throw ConfigError("conv2d: bad stride/pad");
  if ((h + 2 * pad - kh) % stride != 0 || (w + 2 * pad - kw) % stride != 0)
    throw ConfigError("conv2d: output size is not integral");
  int out_h = (h + 2 * pad - kh) / stride + 1;
  int out_w = (w + 2 * pad - kw) / stride + 1;
  if (out_h <= 0 || out_w <= 0) throw ConfigError("conv2d: empty output");

  int ckk = c * kh * kw;
  std::size_t plane = std::size_t(out_h) * out_w;
  Tensor<T> out({n, k, out_h, out_w});
  std::vector<T> col(std::size_t(ckk) * plane);
  for (int i = 0; i < n; ++i) {
    detail::im2col(input.data().data() + std::size_t(i) * c * h * w, c, h, w,
                   kh, kw, stride, pad, out_h, out_w, col.data());
    gemm(false, false, k, int(plane), ckk, T(1), kernel.data().data(), ckk,
         col.data(), int(plane), T(0),
         out.data().data() + std::size_t(i) * k * plane, int(plane));
  }
  detail::check_finite(out, "conv2d");

  if (tape) {
    Tensor<T> in_c = input, ker_c = kernel, out_c = out;
    tape->record(out_c, [in_c, ker_c, out_c, stride, pad, n, c, h, w, k, kh, kw,
                  out_h, out_w, ckk, plane]() mutable {
      const auto& gout = out_c.grad();
      auto& gin = in_c.grad();
      auto& gker = ker_c.grad();
      std::vector<T> col(std::size_t(ckk) * plane);
      std::vector<T> gcol(std::size_t(ckk) * plane);
      for (int i = 0; i < n; ++i) {
        const T* go = gout.data() + std::size_t(i) * k * plane;
        detail::im2col(in_c.data().data() + std::size_t(i) * c * h * w, c, h,
                       w, kh, kw, stride, pad, out_h, out_w, col.data());
        // dW += gout . col^T
        gemm(false, true, k, ckk, int(plane), T(1), go, int(plane), col.data(),
             int(plane), T(1), gker.data(), ckk);
        // dcol = W^T . gout
        gemm(true, false, ckk, int(plane), k, T(1), ker_c.data().data(), ckk,
             go, int(plane), T(0), gcol.data(), int(plane));
        detail::col2im_accumulate(gcol.data(), c, h, w, kh, kw, stride, pad,
                                  out_h, out_w,
                                  gin.data() + std::size_t(i) * c * h * w);
      }
    });
  }
  return out;
}

// Per-channel batch normalization state (running statistics).
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  explicit BatchNormState(int channels = 0) {
    if (channels > 0) {
      running_mean = Tensor<T>({channels}, T(0));
      running_var = Tensor<T>({channels}, T(1));
    }
  }
};

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma,
                     const Tensor<T>& beta, BatchNormState<T>& state,
                     bool training, Tape<T>* tape, T eps = T(1e-5),
                     T momentum = T(0.1)) {
  if (input.shape.size() != 4) throw DimensionError("batch_norm: 4-d input expected");
  int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (gamma.numel() != c || beta.numel() != c)
    throw DimensionError("batch_norm: gamma/beta size mismatch");
  long long pool = (long long)n * h * w;
  if (training && pool < 2)
    throw ConfigError("batch_norm: training mode needs at least 2 values per channel");

  Tensor<T> out({n, c, h, w});
  std::vector<T> mean(c), invstd(c);
  if (training) {
    for (int ch = 0; ch < c; ++ch) {
      T m = 0;
      for (int i = 0; i < n; ++i) {
        const T* p = input.data().data() + ((std::size_t(i) * c + ch) * h) * w;
        for (long long j = 0; j < (long long)h * w; ++j) m += p[j];
      }
      m /= T(pool);
      T v = 0;
      for (int i = 0; i < n; ++i) {
        const T* p = input.data().data() + ((std::size_t(i) * c + ch) * h) * w;
        for (long long j = 0; j < (long long)h * w; ++j) {
          T d = p[j] - m;
          v += d * d;
        }
      }
      v /= T(pool);
      mean[ch] = m;
      invstd[ch] = T(1) / std::sqrt(v + eps);
      // running stats keep the unbiased variance estimate
      T v_unbiased = v * T(pool) / T(pool - 1);
      state.running_mean[ch] = (T(1) - momentum) * state.running_mean[ch] + momentum * m;
      state.running_var[ch] = (T(1) - momentum) * state.running_var[ch] + momentum * v_unbiased;
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mean[ch] = state.running_mean[ch];
      invstd[ch] = T(1) / std::sqrt(state.running_var[ch] + eps);
    }
  }
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const T* p = input.data().data() + ((std::size_t(i) * c + ch) * h) * w;
      T* q = out.data().data() + ((std::size_t(i) * c + ch) * h) * w;
      T g = gamma[ch], b = beta[ch], m = mean[ch], is = invstd[ch];
      for (long long j = 0; j < (long long)h * w; ++j) q[j] = g * (p[j] - m) * is + b;
    }
  }
  detail::check_finite(out, "batch_norm");

  if (tape) {
    Tensor<T> in_c = input, g_c = gamma, b_c = beta, out_c = out;
    tape->record(out_c, [in_c, g_c, b_c, out_c, mean, invstd, training, n, c, h,
                  w, pool]() mutable {
      const auto& gout = out_c.grad();
      auto& gin = in_c.grad();
      auto& ggamma = g_c.grad();
      auto& gbeta = b_c.grad();
      long long hw = (long long)h * w;
      for (int ch = 0; ch < c; ++ch) {
        T m = mean[ch], is = invstd[ch], g = g_c[ch];
        T sum_g = 0, sum_gx = 0;  // sums of gout and gout*xhat
        for (int i = 0; i < n; ++i) {
          std::size_t base = (std::size_t(i) * c + ch) * hw;
          for (long long j = 0; j < hw; ++j) {
            T go = gout[base + j];
            sum_g += go;
            sum_gx += go * (in_c[base + j] - m) * is;
          }
        }
        ggamma[ch] += sum_gx;
        gbeta[ch] += sum_g;
        if (training) {
          T inv_pool = T(1) / T(pool);
          for (int i = 0; i < n; ++i) {
            std::size_t base = (std::size_t(i) * c + ch) * hw;
            for (long long j = 0; j < hw; ++j) {
              T xhat = (in_c[base + j] - m) * is;
              gin[base + j] += g * is *
                  (gout[base + j] - inv_pool * (sum_g + xhat * sum_gx));
            }
          }
        } else {
          for (int i = 0; i < n; ++i) {
            std::size_t base = (std::size_t(i) * c + ch) * hw;
            for (long long j = 0; j < hw; ++j)
              gin[base + j] += g * is * gout[base + j];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input, Tape<T>* tape) {
  Tensor<T> out;
  out.shape = input.shape;
  out.data_ = std::make_shared<std::vector<T>>(input.data());
  for (T& v : out.data())
    if (v < T(0)) v = T(0);
  if (tape) {
    Tensor<T> in_c = input, out_c = out;
    tape->record(out_c, [in_c, out_c]() mutable {
      const auto& gout = out_c.grad();
      auto& gin = in_c.grad();
      for (std::size_t i = 0; i < gin.size(); ++i)
        if (in_c[i] > T(0)) gin[i] += gout[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
  if (a.shape != b.shape) throw DimensionError("add: shape mismatch");
  Tensor<T> out;
  out.shape = a.shape;
  out.data_ = std::make_shared<std::vector<T>>(a.data());
  for (std::size_t i = 0; i < out.data().size(); ++i) out[i] += b[i];
  if (tape) {
    Tensor<T> a_c = a, b_c = b, out_c = out;
    tape->record(out_c, [a_c, b_c, out_c]() mutable {
      const auto& gout = out_c.grad();
      auto& ga = a_c.grad();
      auto& gb = b_c.grad();
      for (std::size_t i = 0; i < gout.size(); ++i) {
        ga[i] += gout[i];
        gb[i] += gout[i];
      }
    });
  }
  return out;
}

// Concatenate along the feature axis: [N,Da] ++ [N,Db] -> [N,Da+Db].
template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
  if (a.shape.size() != 2 || b.shape.size() != 2)
    throw DimensionError("concat: 2-d inputs expected");
  if (a.dim(0) != b.dim(0)) throw DimensionError("concat: batch mismatch");
  int n = a.dim(0), da = a.dim(1), db = b.dim(1);
  Tensor<T> out({n, da + db});
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + std::size_t(i) * da, da,
                out.data().data() + std::size_t(i) * (da + db));
    std::copy_n(b.data().data() + std::size_t(i) * db, db,
                out.data().data() + std::size_t(i) * (da + db) + da);
  }
  if (tape) {
    Tensor<T> a_c = a, b_c = b, out_c = out;
    tape->record(out_c, [a_c, b_c, out_c, n, da, db]() mutable {
      const auto& gout = out_c.grad();
      auto& ga = a_c.grad();
      auto& gb = b_c.grad();
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < da; ++j)
          ga[std::size_t(i) * da + j] += gout[std::size_t(i) * (da + db) + j];
        for (int j = 0; j < db; ++j)
          gb[std::size_t(i) * db + j] +=
              gout[std::size_t(i) * (da + db) + da + j];
      }
    });
  }
  return out;
}

// [N,C,H,W] -> [N,C], spatial mean per feature map.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input, Tape<T>* tape) {
  if (input.shape.size() != 4)
    throw DimensionError("global_avg_pool: 4-d input expected");
  int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  long long hw = (long long)h * w;
  Tensor<T> out({n, c});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const T* p = input.data().data() + (std::size_t(i) * c + ch) * hw;
      T s = 0;
      for (long long j = 0; j < hw; ++j) s += p[j];
      out[std::size_t(i) * c + ch] = s / T(hw);
    }
  if (tape) {
    Tensor<T> in_c = input, out_c = out;
    tape->record(out_c, [in_c, out_c, n, c, hw]() mutable {
      const auto& gout = out_c.grad();
      auto& gin = in_c.grad();
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
          T g = gout[std::size_t(i) * c + ch] / T(hw);
          T* p = gin.data() + (std::size_t(i) * c + ch) * hw;
          for (long long j = 0; j < hw; ++j) p[j] += g;
        }
    });
  }
  return out;
}

// Non-overlapping k×k average pooling, [N,C,H,W] -> [N,C,H/k,W/k]. Used for
// spatial downsampling between stages, where a strided odd-kernel conv cannot
// satisfy the exact-division output rule on even inputs.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& input, int k, Tape<T>* tape) {
  if (input.shape.size() != 4)
    throw DimensionError("avg_pool2d: 4-d input expected");
  if (k < 1) throw ConfigError("avg_pool2d: window must be >= 1");
  int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % k != 0 || w % k != 0)
    throw ConfigError("avg_pool2d: spatial size not divisible by window");
  int oh = h / k, ow = w / k;
  T inv = T(1) / T(k * k);
  Tensor<T> out({n, c, oh, ow});
  for (long long p = 0; p < (long long)n * c; ++p) {
    const T* src = input.data().data() + std::size_t(p) * h * w;
    T* dst = out.data().data() + std::size_t(p) * oh * ow;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        T s = 0;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx)
            s += src[std::size_t(oy * k + dy) * w + ox * k + dx];
        dst[std::size_t(oy) * ow + ox] = s * inv;
      }
  }
  if (tape) {
    Tensor<T> in_c = input, out_c = out;
    tape->record(out_c, [in_c, out_c, n, c, h, w, k, oh, ow, inv]() mutable {
      const auto& gout = out_c.grad();
      auto& gin = in_c.grad();
      for (long long p = 0; p < (long long)n * c; ++p) {
        const T* go = gout.data() + std::size_t(p) * oh * ow;
        T* gi = gin.data() + std::size_t(p) * h * w;
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            T g = go[std::size_t(oy) * ow + ox] * inv;
            for (int dy = 0; dy < k; ++dy)
              for (int dx = 0; dx < k; ++dx)
                gi[std::size_t(oy * k + dy) * w + ox * k + dx] += g;
          }
      }
    });
  }
  return out;
}

// out = input . weight^T (+ bias). weight [O,D].
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<std::type_identity_t<T>>* bias, Tape<T>* tape) {
  if (input.shape.size() != 2 || weight.shape.size() != 2)
    throw DimensionError("linear: 2-d input and weight expected");
  int n = input.dim(0), d = input.dim(1), o = weight.dim(0);
  if (weight.dim(1) != d) throw DimensionError("linear: feature size mismatch");
  if (bias && bias->numel() != o)
    throw DimensionError("linear: bias size mismatch");
  Tensor<T> out({n, o});
  gemm(false, true, n, o, d, T(1), input.data().data(), d,
       weight.data().data(), d, T(0), out.data().data(), o);
  if (bias)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < o; ++j) out[std::size_t(i) * o + j] += (*bias)[j];
  detail::check_finite(out, "linear");
  if (tape) {
    Tensor<T> in_c = input, w_c = weight, out_c = out;
    Tensor<T> b_c;
    bool has_bias = bias != nullptr;
    if (has_bias) b_c = *bias;
    tape->record(out_c, [in_c, w_c, b_c, out_c, has_bias, n, d, o]() mutable {
      const auto& gout = out_c.grad();
      // dX += gout . W
      gemm(false, false, n, d, o, T(1), gout.data(), o, w_c.data().data(), d,
           T(1), in_c.grad().data(), d);
      // dW += gout^T . X
      gemm(true, false, o, d, n, T(1), gout.data(), o, in_c.data().data(), d,
           T(1), w_c.grad().data(), d);
      if (has_bias) {
        auto& gb = b_c.grad();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < o; ++j) gb[j] += gout[std::size_t(i) * o + j];
      }
    });
  }
  return out;
}

// Mean over the batch of -log softmax(logits)[label]; max-subtracted for
// stability. Returns a scalar tensor.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits,
                                const std::vector<int>& labels, Tape<T>* tape) {
  if (logits.shape.size() != 2)
    throw DimensionError("softmax_cross_entropy: 2-d logits expected");
  int n = logits.dim(0), k = logits.dim(1);
  if (int(labels.size()) != n)
    throw DimensionError("softmax_cross_entropy: label count mismatch");
  for (int l : labels)
    if (l < 0 || l >= k)
      throw ConfigError("softmax_cross_entropy: label out of range");

  std::vector<T> probs(std::size_t(n) * k);
  T loss = 0;
  for (int i = 0; i < n; ++i) {
    const T* row = logits.data().data() + std::size_t(i) * k;
    T mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (int j = 0; j < k; ++j) {
      T e = std::exp(row[j] - mx);
      probs[std::size_t(i) * k + j] = e;
      sum += e;
    }
    for (int j = 0; j < k; ++j) probs[std::size_t(i) * k + j] /= sum;
    loss -= std::log(probs[std::size_t(i) * k + labels[i]]);
  }
  Tensor<T> out = Tensor<T>::scalar(loss / T(n));
  detail::check_finite(out, "softmax_cross_entropy");
  if (tape) {
    Tensor<T> in_c = logits, out_c = out;
    tape->record(out_c, [in_c, out_c, probs, labels, n, k]() mutable {
      T g = out_c.grad()[0];
      auto& gin = in_c.grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) {
          T p = probs[std::size_t(i) * k + j];
          T onehot = (j == labels[i]) ? T(1) : T(0);
          gin[std::size_t(i) * k + j] += g * (p - onehot) / T(n);
        }
    });
  }
  return out;
}

// Sum of all elements; handy for loss construction in tests.
template <typename T>
Tensor<T> sum(const Tensor<T>& input, Tape<T>* tape) {
  T s = 0;
  for (T v : input.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (tape) {
    Tensor<T> in_c = input, out_c = out;
    tape->record(out_c, [in_c, out_c]() mutable {
      T g = out_c.grad()[0];
      for (auto& gv : in_c.grad()) gv += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T alpha, Tape<T>* tape) {
  Tensor<T> out;
  out.shape = input.shape;
  out.data_ = std::make_shared<std::vector<T>>(input.data());
  for (T& v : out.data()) v *= alpha;
  if (tape) {
    Tensor<T> in_c = input, out_c = out;
    tape->record(out_c, [in_c, out_c, alpha]() mutable {
      const auto& gout = out_c.grad();
      auto& gin = in_c.grad();
      for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += alpha * gout[i];
    });
  }
  return out;
}

}  // namespace mmcnn

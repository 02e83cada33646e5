#include "tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace rd {

namespace {

std::atomic<std::uint64_t> g_next_tensor_id{1};

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

}  // namespace

Tensor::Storage::Storage(std::size_t n)
    : values(n, 0.0), id(g_next_tensor_id.fetch_add(1)) {}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  for (int e : shape_) {
    if (e <= 0) fail("tensor extents must be positive, got " + shape_str(shape_));
  }
  storage_ = std::make_shared<Storage>(shape_numel(shape_));
}

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.storage_->values.begin(), t.storage_->values.end(), value);
  return t;
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    fail("value count " + std::to_string(values.size()) +
         " does not match shape " + shape_str(shape));
  }
  Tensor t(std::move(shape));
  t.storage_->values = std::move(values);
  return t;
}

double* Tensor::data() {
  if (!storage_) fail("tensor is empty");
  return storage_->values.data();
}

const double* Tensor::data() const {
  if (!storage_) fail("tensor is empty");
  return storage_->values.data();
}

double Tensor::value() const {
  if (size() != 1) fail("value() requires a scalar tensor, shape is " + shape_str(shape_));
  return storage_->values[0];
}

Tensor Tensor::clone() const {
  if (!storage_) return Tensor();
  Tensor t(shape_);
  t.storage_->values = storage_->values;
  return t;
}

bool Tensor::all_finite() const {
  if (!storage_) return true;
  for (double v : storage_->values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int e : shape) n *= static_cast<std::size_t>(e);
  return n;
}

void check_finite(const Tensor& t, const std::string& what) {
  if (!t.all_finite()) {
    throw std::runtime_error("non-finite values produced by " + what);
  }
}

// --- Graph ----------------------------------------------------------------

void Graph::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    fail("backward requires a scalar loss, shape is " + shape_str(loss.shape()));
  }
  grad_buffer(loss).data()[0] = 1.0;
  for (std::size_t i = nodes_.size(); i > 0; --i) {
    nodes_[i - 1](*this);
  }
}

Tensor& Graph::grad_buffer(const Tensor& t) {
  auto it = grads_.find(t.id());
  if (it == grads_.end()) {
    it = grads_.emplace(t.id(), Tensor::zeros(t.shape())).first;
  }
  return it->second;
}

const Tensor* Graph::find_grad(const Tensor& t) const {
  auto it = grads_.find(t.id());
  return it == grads_.end() ? nullptr : &it->second;
}

Tensor Graph::grad_or_zero(const Tensor& t) const {
  const Tensor* g = find_grad(t);
  return g ? g->clone() : Tensor::zeros(t.shape());
}

void Graph::clear() {
  nodes_.clear();
  grads_.clear();
}

// --- conv2d ----------------------------------------------------------------

namespace {

struct ConvDims {
  int n, c, h, w;       // input
  int o, kh, kw;        // kernel
  int oh, ow;           // output
  int stride, padding;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, int stride,
                   int padding) {
  if (input.rank() != 4) fail("conv2d input must be [N,C,H,W], got " + shape_str(input.shape()));
  if (kernel.rank() != 4) fail("conv2d kernel must be [O,C,kH,kW], got " + shape_str(kernel.shape()));
  if (stride < 1) fail("conv2d stride must be positive");
  if (padding < 0) fail("conv2d padding must be non-negative");
  ConvDims d{};
  d.n = input.dim(0); d.c = input.dim(1); d.h = input.dim(2); d.w = input.dim(3);
  d.o = kernel.dim(0); d.kh = kernel.dim(2); d.kw = kernel.dim(3);
  d.stride = stride; d.padding = padding;
  if (kernel.dim(1) != d.c) {
    fail("conv2d channel mismatch: input has " + std::to_string(d.c) +
         " channels, kernel expects " + std::to_string(kernel.dim(1)));
  }
  if (d.h + 2 * padding < d.kh || d.w + 2 * padding < d.kw) {
    fail("conv2d spatial extent " + std::to_string(d.h) + "x" + std::to_string(d.w) +
         " with padding " + std::to_string(padding) + " is smaller than kernel " +
         std::to_string(d.kh) + "x" + std::to_string(d.kw));
  }
  d.oh = (d.h + 2 * padding - d.kh) / stride + 1;
  d.ow = (d.w + 2 * padding - d.kw) / stride + 1;
  return d;
}

// Valid output index range [lo, hi) for which in-index = out*stride - pad + k
// lands inside [0, extent).
inline void valid_range(int out_extent, int in_extent, int stride, int padding,
                        int k, int& lo, int& hi) {
  // out*stride >= padding - k  and  out*stride <= in_extent - 1 + padding - k
  int num = padding - k;
  lo = num <= 0 ? 0 : (num + stride - 1) / stride;
  int top = in_extent - 1 + padding - k;
  hi = top < 0 ? 0 : top / stride + 1;
  lo = std::max(lo, 0);
  hi = std::min(hi, out_extent);
  if (hi < lo) hi = lo;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int padding, Graph* tape) {
  ConvDims d = conv_dims(input, kernel, stride, padding);
  if (bias.rank() != 1 || bias.dim(0) != d.o) {
    fail("conv2d bias must be [" + std::to_string(d.o) + "], got " + shape_str(bias.shape()));
  }
  Tensor out({d.n, d.o, d.oh, d.ow});
  const double* in = input.data();
  const double* w = kernel.data();
  const double* b = bias.data();
  double* y = out.data();

  const std::size_t in_plane = static_cast<std::size_t>(d.h) * d.w;
  const std::size_t out_plane = static_cast<std::size_t>(d.oh) * d.ow;

  for (int n = 0; n < d.n; ++n) {
    for (int o = 0; o < d.o; ++o) {
      double* yp = y + (static_cast<std::size_t>(n) * d.o + o) * out_plane;
      std::fill(yp, yp + out_plane, b[o]);
      for (int c = 0; c < d.c; ++c) {
        const double* xp = in + (static_cast<std::size_t>(n) * d.c + c) * in_plane;
        const double* wp = w + (static_cast<std::size_t>(o) * d.c + c) * d.kh * d.kw;
        for (int ky = 0; ky < d.kh; ++ky) {
          int oy_lo, oy_hi;
          valid_range(d.oh, d.h, d.stride, d.padding, ky, oy_lo, oy_hi);
          for (int kx = 0; kx < d.kw; ++kx) {
            int ox_lo, ox_hi;
            valid_range(d.ow, d.w, d.stride, d.padding, kx, ox_lo, ox_hi);
            const double wv = wp[ky * d.kw + kx];
            const int shift = kx - d.padding;
            for (int oy = oy_lo; oy < oy_hi; ++oy) {
              const int iy = oy * d.stride - d.padding + ky;
              const double* xrow = xp + static_cast<std::size_t>(iy) * d.w;
              double* yrow = yp + static_cast<std::size_t>(oy) * d.ow;
              for (int ox = ox_lo; ox < ox_hi; ++ox) {
                yrow[ox] += wv * xrow[ox * d.stride + shift];
              }
            }
          }
        }
      }
    }
  }

  if (tape) {
    tape->record([input, kernel, bias, out, d](Graph& g) {
      const Tensor* gout = g.find_grad(out);
      if (!gout) return;
      const double* gy = gout->data();
      const double* in = input.data();
      const double* w = kernel.data();
      double* gx = g.grad_buffer(input).data();
      double* gw = g.grad_buffer(kernel).data();
      double* gb = g.grad_buffer(bias).data();
      const std::size_t in_plane = static_cast<std::size_t>(d.h) * d.w;
      const std::size_t out_plane = static_cast<std::size_t>(d.oh) * d.ow;

      for (int n = 0; n < d.n; ++n) {
        for (int o = 0; o < d.o; ++o) {
          const double* gyp = gy + (static_cast<std::size_t>(n) * d.o + o) * out_plane;
          double acc = 0.0;
          for (std::size_t i = 0; i < out_plane; ++i) acc += gyp[i];
          gb[o] += acc;
          for (int c = 0; c < d.c; ++c) {
            const double* xp = in + (static_cast<std::size_t>(n) * d.c + c) * in_plane;
            double* gxp = gx + (static_cast<std::size_t>(n) * d.c + c) * in_plane;
            const double* wp = w + (static_cast<std::size_t>(o) * d.c + c) * d.kh * d.kw;
            double* gwp = gw + (static_cast<std::size_t>(o) * d.c + c) * d.kh * d.kw;
            for (int ky = 0; ky < d.kh; ++ky) {
              int oy_lo, oy_hi;
              valid_range(d.oh, d.h, d.stride, d.padding, ky, oy_lo, oy_hi);
              for (int kx = 0; kx < d.kw; ++kx) {
                int ox_lo, ox_hi;
                valid_range(d.ow, d.w, d.stride, d.padding, kx, ox_lo, ox_hi);
                const double wv = wp[ky * d.kw + kx];
                const int shift = kx - d.padding;
                double wacc = 0.0;
                for (int oy = oy_lo; oy < oy_hi; ++oy) {
                  const int iy = oy * d.stride - d.padding + ky;
                  const double* xrow = xp + static_cast<std::size_t>(iy) * d.w;
                  double* gxrow = gxp + static_cast<std::size_t>(iy) * d.w;
                  const double* gyrow = gyp + static_cast<std::size_t>(oy) * d.ow;
                  for (int ox = ox_lo; ox < ox_hi; ++ox) {
                    const double gv = gyrow[ox];
                    wacc += gv * xrow[ox * d.stride + shift];
                    gxrow[ox * d.stride + shift] += gv * wv;
                  }
                }
                gwp[ky * d.kw + kx] += wacc;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// --- relu -------------------------------------------------------------------

Tensor relu(const Tensor& input, Graph* tape) {
  Tensor out(input.shape());
  const double* x = input.data();
  double* y = out.data();
  const std::size_t n = input.size();
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (tape) {
    tape->record([input, out](Graph& g) {
      const Tensor* gout = g.find_grad(out);
      if (!gout) return;
      const double* gy = gout->data();
      const double* x = input.data();
      double* gx = g.grad_buffer(input).data();
      const std::size_t n = input.size();
      for (std::size_t i = 0; i < n; ++i) {
        if (x[i] > 0.0) gx[i] += gy[i];  // subgradient at 0 is 0
      }
    });
  }
  return out;
}

// --- batch_norm2d -----------------------------------------------------------

Tensor batch_norm2d(const Tensor& input, const Tensor& scale,
                    const Tensor& shift, Tensor& running_mean,
                    Tensor& running_var, Mode mode, double momentum,
                    double epsilon, Graph* tape) {
  if (input.rank() != 4) fail("batch_norm2d input must be [N,C,H,W], got " + shape_str(input.shape()));
  if (epsilon <= 0.0) fail("batch_norm2d epsilon must be positive");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  auto check_c = [&](const Tensor& t, const char* name) {
    if (t.rank() != 1 || t.dim(0) != c) {
      fail(std::string("batch_norm2d ") + name + " must be [" + std::to_string(c) +
           "], got " + shape_str(t.shape()));
    }
  };
  check_c(scale, "scale");
  check_c(shift, "shift");
  check_c(running_mean, "running_mean");
  check_c(running_var, "running_var");

  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t m = static_cast<std::size_t>(n) * plane;  // elements per channel
  if (mode == Mode::kTrain && m <= 1) {
    fail("batch_norm2d in train mode needs more than one value per channel "
         "(N*H*W = 1); increase the batch size");
  }
  if (mode == Mode::kEval) {
    const double* rv = running_var.data();
    for (int j = 0; j < c; ++j) {
      if (rv[j] < 0.0) fail("batch_norm2d running_var must be non-negative in eval mode");
    }
  }

  Tensor out(input.shape());
  const double* x = input.data();
  double* y = out.data();
  const double* gma = scale.data();
  const double* bta = shift.data();

  std::vector<double> mean(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));
  if (mode == Mode::kTrain) {
    double* rm = running_mean.data();
    double* rv = running_var.data();
    for (int j = 0; j < c; ++j) {
      double s = 0.0;
      for (int b = 0; b < n; ++b) {
        const double* xp = x + (static_cast<std::size_t>(b) * c + j) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += xp[i];
      }
      const double mu = s / static_cast<double>(m);
      double q = 0.0;
      for (int b = 0; b < n; ++b) {
        const double* xp = x + (static_cast<std::size_t>(b) * c + j) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double dlt = xp[i] - mu;
          q += dlt * dlt;
        }
      }
      const double var = q / static_cast<double>(m);
      mean[static_cast<std::size_t>(j)] = mu;
      inv_std[static_cast<std::size_t>(j)] = 1.0 / std::sqrt(var + epsilon);
      rm[j] = momentum * rm[j] + (1.0 - momentum) * mu;
      rv[j] = momentum * rv[j] + (1.0 - momentum) * var;
    }
  } else {
    const double* rm = running_mean.data();
    const double* rv = running_var.data();
    for (int j = 0; j < c; ++j) {
      mean[static_cast<std::size_t>(j)] = rm[j];
      inv_std[static_cast<std::size_t>(j)] = 1.0 / std::sqrt(rv[j] + epsilon);
    }
  }

  for (int b = 0; b < n; ++b) {
    for (int j = 0; j < c; ++j) {
      const double* xp = x + (static_cast<std::size_t>(b) * c + j) * plane;
      double* yp = y + (static_cast<std::size_t>(b) * c + j) * plane;
      const double mu = mean[static_cast<std::size_t>(j)];
      const double is = inv_std[static_cast<std::size_t>(j)];
      const double a = gma[j] * is;
      const double o = bta[j] - a * mu;
      for (std::size_t i = 0; i < plane; ++i) yp[i] = a * xp[i] + o;
    }
  }

  if (tape) {
    tape->record([input, scale, out, mode, mean, inv_std, n, c, plane, m](Graph& g) {
      const Tensor* gout = g.find_grad(out);
      if (!gout) return;
      const double* gy = gout->data();
      const double* x = input.data();
      const double* gma = scale.data();
      double* gx = g.grad_buffer(input).data();
      double* gs = g.grad_buffer(scale).data();
      for (int j = 0; j < c; ++j) {
        const double mu = mean[static_cast<std::size_t>(j)];
        const double is = inv_std[static_cast<std::size_t>(j)];
        double sum_g = 0.0, sum_gxhat = 0.0;
        for (int b = 0; b < n; ++b) {
          const std::size_t off = (static_cast<std::size_t>(b) * c + j) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            const double xhat = (x[off + i] - mu) * is;
            sum_g += gy[off + i];
            sum_gxhat += gy[off + i] * xhat;
          }
        }
        gs[j] += sum_gxhat;
        if (mode == Mode::kTrain) {
          const double inv_m = 1.0 / static_cast<double>(m);
          const double mean_g = sum_g * inv_m;
          const double mean_gxhat = sum_gxhat * inv_m;
          const double a = gma[j] * is;
          for (int b = 0; b < n; ++b) {
            const std::size_t off = (static_cast<std::size_t>(b) * c + j) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              const double xhat = (x[off + i] - mu) * is;
              gx[off + i] += a * (gy[off + i] - mean_g - xhat * mean_gxhat);
            }
          }
        } else {
          const double a = gma[j] * is;
          for (int b = 0; b < n; ++b) {
            const std::size_t off = (static_cast<std::size_t>(b) * c + j) * plane;
            for (std::size_t i = 0; i < plane; ++i) gx[off + i] += a * gy[off + i];
          }
        }
      }
    });
    // Shift gradient is the per-channel sum of output grads; separate node
    // to keep the main closure readable.
    tape->record([shift, out, n, c, plane](Graph& g) {
      const Tensor* gout = g.find_grad(out);
      if (!gout) return;
      const double* gy = gout->data();
      double* gb = g.grad_buffer(shift).data();
      for (int j = 0; j < c; ++j) {
        double s = 0.0;
        for (int b = 0; b < n; ++b) {
          const std::size_t off = (static_cast<std::size_t>(b) * c + j) * plane;
          for (std::size_t i = 0; i < plane; ++i) s += gy[off + i];
        }
        gb[j] += s;
      }
    });
  }
  return out;
}

// --- global_avg_pool ---------------------------------------------------------

Tensor global_avg_pool(const Tensor& input, Graph* tape) {
  if (input.rank() != 4) fail("global_avg_pool input must be [N,C,H,W], got " + shape_str(input.shape()));
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor out({n, c});
  const double* x = input.data();
  double* y = out.data();
  const double inv = 1.0 / static_cast<double>(plane);
  for (int b = 0; b < n; ++b) {
    for (int j = 0; j < c; ++j) {
      const double* xp = x + (static_cast<std::size_t>(b) * c + j) * plane;
      double s = 0.0;
      for (std::size_t i = 0; i < plane; ++i) s += xp[i];
      y[static_cast<std::size_t>(b) * c + j] = s * inv;
    }
  }
  if (tape) {
    tape->record([input, out, n, c, plane, inv](Graph& g) {
      const Tensor* gout = g.find_grad(out);
      if (!gout) return;
      const double* gy = gout->data();
      double* gx = g.grad_buffer(input).data();
      for (int b = 0; b < n; ++b) {
        for (int j = 0; j < c; ++j) {
          const double gv = gy[static_cast<std::size_t>(b) * c + j] * inv;
          double* gxp = gx + (static_cast<std::size_t>(b) * c + j) * plane;
          for (std::size_t i = 0; i < plane; ++i) gxp[i] += gv;
        }
      }
    });
  }
  return out;
}

// --- linear ------------------------------------------------------------------

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor* bias,
              Graph* tape) {
  if (input.rank() != 2) fail("linear input must be [N,D], got " + shape_str(input.shape()));
  if (weight.rank() != 2) fail("linear weight must be [K,D], got " + shape_str(weight.shape()));
  const int n = input.dim(0), d = input.dim(1), k = weight.dim(0);
  if (weight.dim(1) != d) {
    fail("linear inner dimensions disagree: input is [N," + std::to_string(d) +
         "], weight is [K," + std::to_string(weight.dim(1)) + "]");
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != k)) {
    fail("linear bias must be [" + std::to_string(k) + "], got " + shape_str(bias->shape()));
  }
  Tensor out({n, k});
  const double* x = input.data();
  const double* w = weight.data();
  double* y = out.data();
  for (int i = 0; i < n; ++i) {
    const double* xr = x + static_cast<std::size_t>(i) * d;
    double* yr = y + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < k; ++j) {
      const double* wr = w + static_cast<std::size_t>(j) * d;
      double s = bias ? bias->data()[j] : 0.0;
      for (int t = 0; t < d; ++t) s += xr[t] * wr[t];
      yr[j] = s;
    }
  }
  if (tape) {
    const bool has_bias = bias != nullptr;
    Tensor bias_t = has_bias ? *bias : Tensor();
    tape->record([input, weight, bias_t, has_bias, out, n, d, k](Graph& g) {
      const Tensor* gout = g.find_grad(out);
      if (!gout) return;
      const double* gy = gout->data();
      const double* x = input.data();
      const double* w = weight.data();
      double* gx = g.grad_buffer(input).data();
      double* gw = g.grad_buffer(weight).data();
      for (int i = 0; i < n; ++i) {
        const double* gyr = gy + static_cast<std::size_t>(i) * k;
        const double* xr = x + static_cast<std::size_t>(i) * d;
        double* gxr = gx + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < k; ++j) {
          const double gv = gyr[j];
          if (gv == 0.0) continue;
          const double* wr = w + static_cast<std::size_t>(j) * d;
          double* gwr = gw + static_cast<std::size_t>(j) * d;
          for (int t = 0; t < d; ++t) {
            gxr[t] += gv * wr[t];
            gwr[t] += gv * xr[t];
          }
        }
      }
      if (has_bias) {
        double* gb = g.grad_buffer(bias_t).data();
        for (int i = 0; i < n; ++i) {
          const double* gyr = gy + static_cast<std::size_t>(i) * k;
          for (int j = 0; j < k; ++j) gb[j] += gyr[j];
        }
      }
    });
  }
  return out;
}

// --- l2_normalize -------------------------------------------------------------

Tensor l2_normalize(const Tensor& input, double epsilon, Graph* tape) {
  if (input.rank() != 2) fail("l2_normalize input must be [N,D], got " + shape_str(input.shape()));
  if (epsilon <= 0.0) fail("l2_normalize epsilon must be positive");
  const int n = input.dim(0), d = input.dim(1);
  Tensor out({n, d});
  std::vector<double> denom(static_cast<std::size_t>(n));
  const double* x = input.data();
  double* y = out.data();
  for (int i = 0; i < n; ++i) {
    const double* xr = x + static_cast<std::size_t>(i) * d;
    double s = 0.0;
    for (int t = 0; t < d; ++t) s += xr[t] * xr[t];
    const double nrm = std::sqrt(s);
    const double dn = nrm > epsilon ? nrm : epsilon;
    denom[static_cast<std::size_t>(i)] = dn;
    double* yr = y + static_cast<std::size_t>(i) * d;
    for (int t = 0; t < d; ++t) yr[t] = xr[t] / dn;
  }
  if (tape) {
    tape->record([input, out, denom, n, d, epsilon](Graph& g) {
      const Tensor* gout = g.find_grad(out);
      if (!gout) return;
      const double* gy = gout->data();
      const double* x = input.data();
      const double* y = out.data();
      double* gx = g.grad_buffer(input).data();
      for (int i = 0; i < n; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * d;
        const double dn = denom[static_cast<std::size_t>(i)];
        // Below epsilon the map is x/epsilon, a plain scaling.
        double xnorm = 0.0;
        for (int t = 0; t < d; ++t) xnorm += x[off + t] * x[off + t];
        xnorm = std::sqrt(xnorm);
        if (xnorm > epsilon) {
          double gdoty = 0.0;
          for (int t = 0; t < d; ++t) gdoty += gy[off + t] * y[off + t];
          for (int t = 0; t < d; ++t) {
            gx[off + t] += (gy[off + t] - y[off + t] * gdoty) / dn;
          }
        } else {
          for (int t = 0; t < d; ++t) gx[off + t] += gy[off + t] / dn;
        }
      }
    });
  }
  return out;
}

// --- squared_distance_mean ------------------------------------------------------

Tensor squared_distance_mean(const Tensor& a, const Tensor& b, Graph* tape) {
  if (a.shape() != b.shape()) {
    fail("squared_distance_mean shapes disagree: " + shape_str(a.shape()) +
         " vs " + shape_str(b.shape()));
  }
  if (a.rank() != 2) fail("squared_distance_mean expects [N,D], got " + shape_str(a.shape()));
  const int n = a.dim(0), d = a.dim(1);
  const double* pa = a.data();
  const double* pb = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double dlt = pa[i] - pb[i];
    s += dlt * dlt;
  }
  Tensor out = Tensor::scalar(s / static_cast<double>(n));
  if (tape) {
    tape->record([a, b, out, n, d](Graph& g) {
      const Tensor* gout = g.find_grad(out);
      if (!gout) return;
      const double gv = gout->data()[0] * 2.0 / static_cast<double>(n);
      const double* pa = a.data();
      const double* pb = b.data();
      double* ga = g.grad_buffer(a).data();
      double* gb = g.grad_buffer(b).data();
      const std::size_t total = static_cast<std::size_t>(n) * d;
      for (std::size_t i = 0; i < total; ++i) {
        const double dlt = (pa[i] - pb[i]) * gv;
        ga[i] += dlt;
        gb[i] -= dlt;
      }
    });
  }
  return out;
}

// --- elementwise helpers -----------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b, Graph* tape) {
  return add_scaled(a, b, 1.0, tape);
}

Tensor add_scaled(const Tensor& a, const Tensor& b, double factor, Graph* tape) {
  if (a.shape() != b.shape()) {
    fail("add shapes disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* y = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = pa[i] + factor * pb[i];
  if (tape) {
    tape->record([a, b, out, factor](Graph& g) {
      const Tensor* gout = g.find_grad(out);
      if (!gout) return;
      const double* gy = gout->data();
      double* ga = g.grad_buffer(a).data();
      double* gb = g.grad_buffer(b).data();
      for (std::size_t i = 0; i < a.size(); ++i) {
        ga[i] += gy[i];
        gb[i] += factor * gy[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double factor, Graph* tape) {
  Tensor out(a.shape());
  const double* pa = a.data();
  double* y = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = factor * pa[i];
  if (tape) {
    tape->record([a, out, factor](Graph& g) {
      const Tensor* gout = g.find_grad(out);
      if (!gout) return;
      const double* gy = gout->data();
      double* ga = g.grad_buffer(a).data();
      for (std::size_t i = 0; i < a.size(); ++i) ga[i] += factor * gy[i];
    });
  }
  return out;
}

Tensor sum(const Tensor& a, Graph* tape) {
  const double* pa = a.data();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += pa[i];
  Tensor out = Tensor::scalar(s);
  if (tape) {
    tape->record([a, out](Graph& g) {
      const Tensor* gout = g.find_grad(out);
      if (!gout) return;
      const double gv = gout->data()[0];
      double* ga = g.grad_buffer(a).data();
      for (std::size_t i = 0; i < a.size(); ++i) ga[i] += gv;
    });
  }
  return out;
}

Tensor dot(const Tensor& a, const Tensor& b, Graph* tape) {
  if (a.shape() != b.shape()) {
    fail("dot shapes disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const double* pa = a.data();
  const double* pb = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += pa[i] * pb[i];
  Tensor out = Tensor::scalar(s);
  if (tape) {
    tape->record([a, b, out](Graph& g) {
      const Tensor* gout = g.find_grad(out);
      if (!gout) return;
      const double gv = gout->data()[0];
      const double* pa = a.data();
      const double* pb = b.data();
      double* ga = g.grad_buffer(a).data();
      double* gb = g.grad_buffer(b).data();
      for (std::size_t i = 0; i < a.size(); ++i) {
        ga[i] += gv * pb[i];
        gb[i] += gv * pa[i];
      }
    });
  }
  return out;
}

// --- grad_check ----------------------------------------------------------------

GradCheckReport grad_check(const TensorProgram& program,
                           const std::vector<Tensor>& point,
                           const std::vector<std::string>& names, double step,
                           std::size_t min_coords, std::uint64_t seed) {
  if (step <= 0.0) fail("grad_check step must be positive");
  if (!names.empty() && names.size() != point.size()) {
    fail("grad_check names must match parameter count");
  }

  Graph tape;
  Tensor loss = program(point, &tape);
  if (!loss.all_finite()) {
    throw std::runtime_error("grad_check: non-finite loss at the given point");
  }
  tape.backward(loss);

  GradCheckReport report;
  Rng rng(seed);
  for (std::size_t p = 0; p < point.size(); ++p) {
    const Tensor& param = point[p];
    const std::string name = names.empty() ? "param" + std::to_string(p) : names[p];
    Tensor analytic = tape.grad_or_zero(param);
    if (!analytic.all_finite()) {
      throw std::runtime_error("grad_check: non-finite analytic gradient for tensor " + name);
    }

    const std::size_t n = param.size();
    std::vector<std::size_t> coords;
    if (n <= min_coords) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      coords.reserve(min_coords);
      for (std::size_t i = 0; i < min_coords; ++i) {
        coords.push_back(static_cast<std::size_t>(rng.below(n)));
      }
    }

    // point tensors share storage with whatever the program closes over, so
    // in-place perturbation re-evaluates the program at the shifted point.
    double* values = const_cast<Tensor&>(param).data();
    for (std::size_t idx : coords) {
      const double saved = values[idx];
      values[idx] = saved + step;
      const double up = program(point, nullptr).value();
      values[idx] = saved - step;
      const double down = program(point, nullptr).value();
      values[idx] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw std::runtime_error("grad_check: non-finite loss while perturbing tensor " + name);
      }
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic.data()[idx];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(a - numeric) / denom;
      ++report.coords_checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_tensor = name;
      }
    }
  }
  return report;
}

// --- Rng -------------------------------------------------------------------

std::uint64_t Rng::next_u64() {
  // SplitMix64.
  state_ += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 6.283185307179586476925286766559 * u2;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return r * std::cos(theta);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) fail("Rng::below(0)");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = ~0ull - (~0ull % n);
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return v % n;
}

std::uint64_t Rng::derive(std::uint64_t seed, std::uint64_t stream) {
  Rng r(seed ^ (0x517cc1b727220a95ull * (stream + 1)));
  return r.next_u64();
}

}  // namespace rd

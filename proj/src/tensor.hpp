#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace rd {

// Execution mode for ops whose behaviour differs between training and
// inference (batch norm).
enum class Mode { kTrain, kEval };

// Dense row-major tensor of 64-bit reals. Copies share storage; use clone()
// for a deep copy. Each allocation gets a unique id, which is what the
// gradient tape keys on.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor scalar(double value);
  static Tensor from(std::vector<int> shape, std::vector<double> values);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return storage_ ? storage_->values.size() : 0; }
  bool empty() const { return !storage_; }

  double* data();
  const double* data() const;

  // Value of a rank-0/size-1 tensor.
  double value() const;

  Tensor clone() const;

  // Identity of the underlying allocation; stable across shared copies.
  std::uint64_t id() const { return storage_ ? storage_->id : 0; }

  bool all_finite() const;

 private:
  struct Storage {
    explicit Storage(std::size_t n);
    std::vector<double> values;
    std::uint64_t id;
  };
  std::shared_ptr<Storage> storage_;
  std::vector<int> shape_;
};

std::string shape_str(const std::vector<int>& shape);
std::size_t shape_numel(const std::vector<int>& shape);

// Throws if any value of t is NaN/Inf; `what` names the producing op.
void check_finite(const Tensor& t, const std::string& what);

// Reverse-mode tape. Ops append one node per recorded operation; backward
// replays the nodes in reverse order exactly once. Gradients accumulate per
// tensor id and always match the primal's shape.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&)>;

  void record(BackwardFn fn) { nodes_.push_back(std::move(fn)); }
  std::size_t node_count() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and runs all recorded nodes in reverse.
  // `loss` must be scalar (size 1).
  void backward(const Tensor& loss);

  // Gradient buffer for t, created zero-filled on first use.
  Tensor& grad_buffer(const Tensor& t);
  // Recorded gradient, or nullptr if nothing reached t.
  const Tensor* find_grad(const Tensor& t) const;
  // Gradient of t, or zeros of t's shape if nothing reached it.
  Tensor grad_or_zero(const Tensor& t) const;

  void clear();

 private:
  std::vector<BackwardFn> nodes_;
  std::unordered_map<std::uint64_t, Tensor> grads_;
};

// --- Primitive ops -------------------------------------------------------
//
// Every op validates shapes, computes the forward value, and, when `tape`
// is non-null, records its backward node. Passing tape == nullptr runs the
// op without any graph allocation.

// Cross-correlation of input [N,C,H,W] with kernel [O,C,kH,kW] plus bias [O].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int padding, Graph* tape);

Tensor relu(const Tensor& input, Graph* tape);

// Per-channel batch normalization of [N,C,H,W]. Train mode normalizes by
// batch statistics over N*H*W and updates running stats in place as
// running <- momentum * running + (1 - momentum) * batch. Eval mode uses
// the running stats and leaves them untouched.
Tensor batch_norm2d(const Tensor& input, const Tensor& scale,
                    const Tensor& shift, Tensor& running_mean,
                    Tensor& running_var, Mode mode, double momentum,
                    double epsilon, Graph* tape);

// [N,C,H,W] -> [N,C], mean over the spatial dimensions.
Tensor global_avg_pool(const Tensor& input, Graph* tape);

// input [N,D] * weight [K,D]^T (+ bias [K]) -> [N,K].
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor* bias,
              Graph* tape);

// Rows divided by max(||row||, epsilon).
Tensor l2_normalize(const Tensor& input, double epsilon, Graph* tape);

// (1/N) * sum over rows of ||a_row - b_row||^2; gradients reach both a and b.
Tensor squared_distance_mean(const Tensor& a, const Tensor& b, Graph* tape);

// Elementwise helpers (used by losses and tests).
Tensor add(const Tensor& a, const Tensor& b, Graph* tape);
Tensor add_scaled(const Tensor& a, const Tensor& b, double factor, Graph* tape);
Tensor scale(const Tensor& a, double factor, Graph* tape);
Tensor sum(const Tensor& a, Graph* tape);
Tensor dot(const Tensor& a, const Tensor& b, Graph* tape);

// --- Gradient verification harness ---------------------------------------

// A differentiable program over a named set of parameter tensors.
using TensorProgram =
    std::function<Tensor(const std::vector<Tensor>& params, Graph* tape)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t coords_checked = 0;
};

// Central-difference check of `program` against its recorded gradients at
// `point`. Samples at least `min_coords` coordinates per parameter tensor
// (all of them when the tensor is smaller). Relative error uses
// max(|analytic|, |numeric|, 1e-8) as denominator. Throws on non-finite
// values, naming the offending tensor.
GradCheckReport grad_check(const TensorProgram& program,
                           const std::vector<Tensor>& point,
                           const std::vector<std::string>& names, double step,
                           std::size_t min_coords = 200,
                           std::uint64_t seed = 0x9e3779b97f4a7c15ull);

// Deterministic, platform-independent RNG used everywhere randomness is
// needed (init, shuffles, synthetic data). Box-Muller on top of SplitMix64
// keeps bit-exact reproducibility out of libstdc++'s hands.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  // Standard normal via Box-Muller.
  double normal();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  // Fisher-Yates shuffle, deterministic in the rng state.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derives an independent stream; used to give ladder cells their own
  // deterministic seeds regardless of execution order.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace rd

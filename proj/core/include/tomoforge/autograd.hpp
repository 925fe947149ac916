#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "tomoforge/radon.hpp"
#include "tomoforge/random.hpp"
#include "tomoforge/tensor.hpp"

namespace tomoforge {

/// Persistent tensor owned by a model. Non-trainable parameters hold state
/// such as spectral-normalization vectors; they are checkpointed but never
/// receive gradients.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    else grad.fill(T(0));
  }
};

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records operations in creation order; backward() walks them in reverse.
/// Gradients accumulate additively at fan-out. A tape supports one reverse
/// pass; clear() it (or use a new tape) for the next forward pass.
template <typename T>
class Tape {
 public:
  /// Receives the gradient of the node's output and the output value.
  using Backward = std::function<void(Tape&, const Tensor<T>& grad_out, const Tensor<T>& out)>;

  explicit Tape(bool checked = false) : checked_(checked) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  /// Leaf that receives a gradient readable through grad() after backward.
  Var<T> variable(Tensor<T> value);
  /// Leaf bound to a parameter; backward() adds into p.grad when trainable.
  Var<T> parameter(Parameter<T>& p);

  Var<T> record(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                Backward fn);
  Var<T> record(std::string_view op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                Backward fn);

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(const Var<T>& v) const { return nodes_[v.id()].requires_grad; }
  /// Gradient accumulator of an input during backward, or nullptr when the
  /// input does not require a gradient.
  Tensor<T>* grad_slot(const Var<T>& v);
  /// Gradient after backward(); nullptr if none flowed to v.
  const Tensor<T>* grad(const Var<T>& v) const;

  void backward(const Var<T>& loss);
  void clear();

  bool checked() const { return checked_; }
  void set_checked(bool on) { checked_ = on; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    Backward backward;
  };

  Var<T> push(Node node, std::string_view op);

  std::vector<Node> nodes_;
  bool checked_ = false;
  bool consumed_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

// ---- elementwise -------------------------------------------------------
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> div(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T c);
template <typename T> Var<T> add_scalar(Var<T> a, T c);
template <typename T> Var<T> square(Var<T> a);
template <typename T> Var<T> abs(Var<T> a);
/// max(a, c) elementwise; gradient is zero where the floor is active.
template <typename T> Var<T> clamp_min(Var<T> a, T c);
template <typename T> Var<T> exp(Var<T> a);
template <typename T> Var<T> log(Var<T> a);
template <typename T> Var<T> sigmoid(Var<T> a);
/// Per-channel slope on axis 1 (rank >= 2); slope has shape [C].
template <typename T> Var<T> prelu(Var<T> x, Var<T> slope);

template <typename T> Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T> Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T> Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }
template <typename T> Var<T> operator/(Var<T> a, Var<T> b) { return div(a, b); }

// ---- reductions and shape ------------------------------------------------
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
template <typename T> Var<T> reshape(Var<T> a, Shape s);
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
template <typename T> Var<T> slice(Var<T> a, std::size_t axis, std::size_t start, std::size_t length);
template <typename T>
std::vector<Var<T>> split(Var<T> a, const std::vector<std::size_t>& sizes, std::size_t axis);

// ---- network layers ------------------------------------------------------
/// Optional input that does not take part in template deduction, so a bare
/// std::nullopt is accepted.
template <typename T>
using OptionalVar = std::optional<std::type_identity_t<Var<T>>>;

/// x [N,C,H,W], w [O,C,K,K], bias [O] -> [N,O,Ho,Wo].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, OptionalVar<T> bias, int stride, int padding);
/// Integer-factor bilinear upsampling of [N,C,H,W]; output sample f*i sits on
/// input sample i, intermediate samples interpolate linearly, the border repeats.
template <typename T> Var<T> upsample_bilinear(Var<T> x, int factor = 2);
/// [N,C,H,W] -> [N,C]
template <typename T> Var<T> global_avg_pool(Var<T> x);
/// x [N,I], w [O,I], bias [O] -> [N,O]
template <typename T> Var<T> linear(Var<T> x, Var<T> w, OptionalVar<T> bias);
/// x [N,C,H,W] scaled by gates [N,C].
template <typename T> Var<T> channel_scale(Var<T> x, Var<T> gates);

// ---- Radon bridge --------------------------------------------------------
/// [B,C,n_angles,n_detectors] -> [B,C,N,N]; forward A^T, reverse A.
template <typename T> Var<T> radon_backproject(Var<T> sino, const ScanGeometry& g);
/// [B,C,N,N] -> [B,C,n_angles,n_detectors]; forward A, reverse A^T.
template <typename T> Var<T> radon_forward(Var<T> image, const ScanGeometry& g);

// ---- spectral normalization ------------------------------------------------
/// Persistent power-iteration vectors for one weight, stored as [u | v] in a
/// non-trainable parameter so checkpoints capture them.
template <typename T>
struct SpectralState {
  Parameter<T>* uv = nullptr;
};

/// w / sigma_max(w) with w viewed as [dim0, rest]. When `update` is set,
/// `power_iters` iterations refresh (u, v) first; sigma = u^T W v is then
/// differentiated with u and v held constant.
template <typename T>
Var<T> spectral_normalize(Var<T> w, SpectralState<T> state, int power_iters = 5, bool update = true);

/// Fresh state for weight w: random start vectors refined by power iteration
/// until the singular-value estimate stops changing (relative 1e-10, at most
/// 5000 rounds). Later calls only need a few iterations to track w.
template <typename T>
Parameter<T> make_spectral_state(const Tensor<T>& w, RandomStream& rng, std::string name);

/// Largest-singular-value estimate for the current state without recording.
template <typename T>
T spectral_sigma(const Tensor<T>& w, const SpectralState<T>& state);

}  // namespace tomoforge

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace unidistill {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes are incompatible; the message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised on misuse of the differentiation tape (non-scalar loss, double backward).
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;     // empty until something accumulates into it
  bool requires_grad = false;   // user-visible leaf flag
  bool tracked = false;         // output of an op recorded on a tape
};

}  // namespace detail

/// Dense row-major double tensor. Copies share storage; values are treated as
/// immutable once an op has consumed them, except through mutable_data() on
/// leaves (optimizer updates, finite-difference probes).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t c, std::size_t h, std::size_t w) const;

  bool requires_grad() const;
  bool is_leaf() const;
  void set_requires_grad(bool flag);

  bool has_grad() const;
  /// Accumulated gradient; zeros of the same shape when nothing reached this tensor.
  Tensor grad() const;
  std::span<const double> grad_data() const;
  void zero_grad();

  /// Deep copy of the values with no gradient tracking.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const noexcept { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  friend class Tape;
  friend Tensor make_result(Shape shape, std::vector<double> data);
  friend std::span<double> grad_buffer(const Tensor& t);
  friend std::span<const double> adjoint(const Tensor& t);

  std::shared_ptr<detail::TensorNode> node_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Ordered record of differentiable operations executed while the tape is
/// active on the current thread. Each thread has at most one active tape.
class Tape {
 public:
  using Adjoint = std::function<void()>;

  Tape() = default;
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// RAII activation of a tape on the calling thread; restores the previous one.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  /// Suspends recording on the calling thread for its lifetime.
  class NoGrad {
   public:
    NoGrad();
    ~NoGrad();
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* current() noexcept;

  /// True when an op over these inputs must be recorded on the active tape.
  static bool should_record(std::initializer_list<const Tensor*> inputs);

  void record(Tensor output, Adjoint adjoint);

  /// Seeds d(loss)/d(loss) = 1 and replays adjoints in reverse order.
  void backward(const Tensor& loss);
  void reset();

  std::size_t size() const noexcept { return entries_.size(); }
  bool consumed() const noexcept { return consumed_; }

 private:
  struct Entry {
    Tensor output;
    Adjoint adjoint;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

// --- op-authoring helpers -------------------------------------------------

/// Fresh tensor marked as produced by an op (tracked only if the caller records it).
Tensor make_result(Shape shape, std::vector<double> data);
/// Gradient buffer of t, allocated as zeros on first use.
std::span<double> grad_buffer(const Tensor& t);
/// Adjoint flowing into an op output; empty span when nothing reached it.
std::span<const double> adjoint(const Tensor& t);

// --- elementwise / reductions ---------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor sum(const Tensor& a);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

/// Same-padded, stride-1 cross-correlation.
/// input [C_in,H,W], kernel [C_out,C_in,k,k] (k odd), bias [C_out].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias);

/// Per-position maximum over the channel axis of a [C,H,W] tensor; the
/// gradient goes to the first maximal channel.
Tensor max_over_channel(const Tensor& x);

/// Concatenates [C_i,H,W] (or [H,W], treated as one channel) along channels.
Tensor concat_channels(const std::vector<Tensor>& parts);

/// Channels [begin, end) of a [C,H,W] tensor.
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end);

/// Rows of a [C,H,W] map at integer cells, as an [N,C] tensor.
Tensor gather_cells(const Tensor& map, std::span<const std::size_t> flat_cells);

/// Sum of w * |a - b|. For rank-3 inputs the weight has the trailing [H,W]
/// shape and broadcasts over channels; otherwise it matches a's shape.
/// Subgradient at a == b is zero.
Tensor l1_sum(const Tensor& a, const Tensor& b, const std::optional<Tensor>& weight = std::nullopt);

/// Pairwise cosine similarity between the rows of an [N,C] tensor, as an
/// [N,N] tensor. Rows with norm below 1e-12 have similarity 0 with everything.
Tensor cosine_matrix(const Tensor& rows);

}  // namespace unidistill

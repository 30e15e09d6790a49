#include "unidistill/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

namespace unidistill {

namespace {

thread_local Tape* g_active_tape = nullptr;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// --- Tensor ------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("from_data: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " + std::to_string(data.size()));
  }
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from_data({}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("Tensor: use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  shape();
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  shape();
  if (node_->tracked) throw TapeError("mutable_data: tensor is the output of a recorded op");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
  return node_->data[0];
}

double Tensor::at(std::size_t c, std::size_t h, std::size_t w) const {
  const auto& s = shape();
  if (s.size() != 3) throw ShapeError("at(c,h,w): tensor " + shape_str(s) + " is not rank 3");
  return node_->data[(c * s[1] + h) * s[2] + w];
}

bool Tensor::requires_grad() const {
  shape();
  return node_->requires_grad || node_->tracked;
}

bool Tensor::is_leaf() const {
  shape();
  return !node_->tracked;
}

void Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw TapeError("set_requires_grad: only leaves carry the flag");
  node_->requires_grad = flag;
}

bool Tensor::has_grad() const {
  shape();
  return !node_->grad.empty();
}

Tensor Tensor::grad() const {
  if (!has_grad()) return zeros(shape());
  return from_data(shape(), node_->grad);
}

std::span<const double> Tensor::grad_data() const {
  shape();
  return node_->grad;
}

void Tensor::zero_grad() {
  shape();
  node_->grad.clear();
}

Tensor Tensor::detach() const { return from_data(shape(), node_->data); }

// --- Tape ----------------------------------------------------------------------

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape::Scope::Scope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
Tape::Scope::~Scope() { g_active_tape = previous_; }

Tape::NoGrad::NoGrad() : previous_(g_active_tape) { g_active_tape = nullptr; }
Tape::NoGrad::~NoGrad() { g_active_tape = previous_; }

Tape* Tape::current() noexcept { return g_active_tape; }

bool Tape::should_record(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t != nullptr && t->defined() && t->requires_grad(); });
}

void Tape::record(Tensor output, Adjoint adjoint) {
  if (consumed_) throw TapeError("record: tape already ran backward; call reset() first");
  output.node_->tracked = true;
  entries_.push_back(Entry{std::move(output), std::move(adjoint)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw TapeError("backward: tape already consumed; call reset() before another backward");
  if (loss.numel() != 1) throw TapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  consumed_ = true;
  if (!loss.requires_grad()) return;
  grad_buffer(loss)[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output.node_->grad.empty()) continue;
    it->adjoint();
  }
}

void Tape::reset() {
  entries_.clear();
  consumed_ = false;
}

// --- helpers -------------------------------------------------------------------

Tensor make_result(Shape shape, std::vector<double> data) {
  return Tensor::from_data(std::move(shape), std::move(data));
}

std::span<double> grad_buffer(const Tensor& t) {
  auto& g = t.node_->grad;
  if (g.empty()) g.assign(t.node_->data.size(), 0.0);
  return g;
}

std::span<const double> adjoint(const Tensor& t) { return t.node_->grad; }

// --- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  Tensor r = make_result(a.shape(), std::move(out));
  if (Tape::should_record({&a, &b})) {
    Tape::current()->record(r, [a, b, r] {
      auto g = adjoint(r);
      if (a.requires_grad()) {
        auto ga = grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = grad_buffer(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return r;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  Tensor r = make_result(a.shape(), std::move(out));
  if (Tape::should_record({&a, &b})) {
    Tape::current()->record(r, [a, b, r] {
      auto g = adjoint(r);
      if (a.requires_grad()) {
        auto ga = grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = grad_buffer(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return r;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  Tensor r = make_result(a.shape(), std::move(out));
  if (Tape::should_record({&a, &b})) {
    Tape::current()->record(r, [a, b, r] {
      auto g = adjoint(r);
      auto x = a.data(), y = b.data();
      if (a.requires_grad()) {
        auto ga = grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
      }
      if (b.requires_grad()) {
        auto gb = grad_buffer(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
      }
    });
  }
  return r;
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  Tensor r = make_result(a.shape(), std::move(out));
  if (Tape::should_record({&a})) {
    Tape::current()->record(r, [a, r, s] {
      auto g = adjoint(r);
      auto ga = grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return r;
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + s;
  Tensor r = make_result(a.shape(), std::move(out));
  if (Tape::should_record({&a})) {
    Tape::current()->record(r, [a, r] {
      auto g = adjoint(r);
      auto ga = grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return r;
}

Tensor sum(const Tensor& a) {
  auto x = a.data();
  double acc = 0.0;
  for (double v : x) acc += v;
  Tensor r = make_result({}, {acc});
  if (Tape::should_record({&a})) {
    Tape::current()->record(r, [a, r] {
      const double g = adjoint(r)[0];
      auto ga = grad_buffer(a);
      for (double& v : ga) v += g;
    });
  }
  return r;
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] < 0.0 ? 0.0 : v[i];  // NaN propagates
  Tensor r = make_result(x.shape(), std::move(out));
  if (Tape::should_record({&x})) {
    Tape::current()->record(r, [x, r] {
      auto g = adjoint(r);
      auto v = x.data();
      auto gx = grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (v[i] > 0.0) gx[i] += g[i];
      }
    });
  }
  return r;
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-v[i]));
  Tensor r = make_result(x.shape(), std::move(out));
  if (Tape::should_record({&x})) {
    Tape::current()->record(r, [x, r] {
      auto g = adjoint(r);
      auto y = r.data();
      auto gx = grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
    });
  }
  return r;
}

// --- conv2d --------------------------------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t c_in, c_out, h, w, k;
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

// Calls fn(dy, dx, y0, y1, x0, x1) for each kernel tap, where output rows
// [y0,y1) and columns [x0,x1) read input row y+dy and column x+dx in bounds.
template <typename Fn>
void for_each_tap(const ConvGeometry& g, Fn&& fn) {
  const long pad = static_cast<long>(g.k / 2);
  const long H = static_cast<long>(g.h), W = static_cast<long>(g.w);
  for (std::size_t ky = 0; ky < g.k; ++ky) {
    const long dy = static_cast<long>(ky) - pad;
    const long y0 = std::max(0L, -dy), y1 = std::min(H, H - dy);
    for (std::size_t kx = 0; kx < g.k; ++kx) {
      const long dx = static_cast<long>(kx) - pad;
      const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
      if (y0 >= y1 || x0 >= x1) continue;
      fn(ky, kx, dy, dx, y0, y1, x0, x1);
    }
  }
}

// Patch matrix [c_in*k*k, h*w]: row (ci, ky, kx) holds the input shifted by that tap, zero padded.
std::vector<double> im2col(std::span<const double> in, const ConvGeometry& g) {
  const std::size_t plane = g.h * g.w, taps = g.k * g.k;
  const long W = static_cast<long>(g.w);
  std::vector<double> cols(g.c_in * taps * plane, 0.0);
  for (std::size_t ci = 0; ci < g.c_in; ++ci) {
    const double* src = in.data() + ci * plane;
    for_each_tap(g, [&](std::size_t ky, std::size_t kx, long dy, long dx, long y0, long y1, long x0, long x1) {
      double* row = cols.data() + ((ci * taps) + ky * g.k + kx) * plane;
      for (long y = y0; y < y1; ++y) {
        std::copy(src + (y + dy) * W + dx + x0, src + (y + dy) * W + dx + x1, row + y * W + x0);
      }
    });
  }
  return cols;
}

void col2im_add(std::span<const double> cols, std::span<double> out, const ConvGeometry& g) {
  const std::size_t plane = g.h * g.w, taps = g.k * g.k;
  const long W = static_cast<long>(g.w);
  for (std::size_t ci = 0; ci < g.c_in; ++ci) {
    double* dst = out.data() + ci * plane;
    for_each_tap(g, [&](std::size_t ky, std::size_t kx, long dy, long dx, long y0, long y1, long x0, long x1) {
      const double* row = cols.data() + ((ci * taps) + ky * g.k + kx) * plane;
      for (long y = y0; y < y1; ++y) {
        double* d = dst + (y + dy) * W + dx;
        const double* r = row + y * W;
        for (long x = x0; x < x1; ++x) d[x] += r[x];
      }
    });
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
  require_rank(input, 3, "conv2d(input)");
  require_rank(kernel, 4, "conv2d(kernel)");
  require_rank(bias, 1, "conv2d(bias)");
  const ConvGeometry g{input.dim(0), kernel.dim(0), input.dim(1), input.dim(2), kernel.dim(2)};
  if (kernel.dim(1) != g.c_in) {
    throw ShapeError("conv2d: channel mismatch, input " + shape_str(input.shape()) + " vs kernel " +
                     shape_str(kernel.shape()));
  }
  if (kernel.dim(3) != g.k || g.k % 2 == 0) {
    throw ShapeError("conv2d: kernel must be square with odd size, got " + shape_str(kernel.shape()));
  }
  if (bias.dim(0) != g.c_out) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match kernel " +
                     shape_str(kernel.shape()));
  }
  const auto plane = static_cast<Eigen::Index>(g.h * g.w);
  const auto patch = static_cast<Eigen::Index>(g.c_in * g.k * g.k);
  const auto c_out = static_cast<Eigen::Index>(g.c_out);
  std::vector<double> out(g.c_out * g.h * g.w);
  {
    std::vector<double> cols;
    const double* cols_ptr = input.data().data();
    if (g.k > 1) {
      cols = im2col(input.data(), g);
      cols_ptr = cols.data();
    }
    MutMap o(out.data(), c_out, plane);
    o.noalias() = ConstMap(kernel.data().data(), c_out, patch) * ConstMap(cols_ptr, patch, plane);
    const auto b = bias.data();
    for (Eigen::Index co = 0; co < c_out; ++co) o.row(co).array() += b[static_cast<std::size_t>(co)];
  }
  Tensor r = make_result({g.c_out, g.h, g.w}, std::move(out));
  if (Tape::should_record({&input, &kernel, &bias})) {
    Tape::current()->record(r, [input, kernel, bias, r, g, plane, patch, c_out] {
      auto go = adjoint(r);
      const ConstMap gout(go.data(), c_out, plane);
      if (bias.requires_grad()) {
        auto gb = grad_buffer(bias);
        // Sequential sums: Eigen's vectorized reductions depend on buffer alignment.
        for (std::size_t co = 0; co < g.c_out; ++co) {
          const double* row = go.data() + co * static_cast<std::size_t>(plane);
          gb[co] += std::accumulate(row, row + plane, 0.0);
        }
      }
      if (kernel.requires_grad()) {
        std::vector<double> cols;
        const double* cols_ptr = input.data().data();
        if (g.k > 1) {
          cols = im2col(input.data(), g);
          cols_ptr = cols.data();
        }
        MutMap gk(grad_buffer(kernel).data(), c_out, patch);
        gk.noalias() += gout * ConstMap(cols_ptr, patch, plane).transpose();
      }
      if (input.requires_grad()) {
        const ConstMap ker(kernel.data().data(), c_out, patch);
        auto gi = grad_buffer(input);
        if (g.k == 1) {
          MutMap(gi.data(), patch, plane).noalias() += ker.transpose() * gout;
        } else {
          RowMatrix gcols = ker.transpose() * gout;
          col2im_add(std::span<const double>(gcols.data(), static_cast<std::size_t>(gcols.size())), gi, g);
        }
      }
    });
  }
  return r;
}

// --- channel ops ---------------------------------------------------------------

Tensor max_over_channel(const Tensor& x) {
  require_rank(x, 3, "max_over_channel");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), plane = H * W;
  if (C == 0) throw ShapeError("max_over_channel: empty channel dimension in " + shape_str(x.shape()));
  auto v = x.data();
  std::vector<double> out(plane);
  std::vector<std::size_t> arg(plane, 0);
  for (std::size_t i = 0; i < plane; ++i) out[i] = v[i];
  for (std::size_t c = 1; c < C; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double cand = v[c * plane + i];
      if (cand > out[i]) {
        out[i] = cand;
        arg[i] = c;
      }
    }
  }
  Tensor r = make_result({H, W}, std::move(out));
  if (Tape::should_record({&x})) {
    Tape::current()->record(r, [x, r, arg = std::move(arg), plane] {
      auto g = adjoint(r);
      auto gx = grad_buffer(x);
      for (std::size_t i = 0; i < plane; ++i) gx[arg[i] * plane + i] += g[i];
    });
  }
  return r;
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  auto spatial = [](const Tensor& t) -> std::pair<std::size_t, std::size_t> {
    if (t.rank() == 3) return {t.dim(1), t.dim(2)};
    if (t.rank() == 2) return {t.dim(0), t.dim(1)};
    throw ShapeError("concat_channels: expected rank 2 or 3, got " + shape_str(t.shape()));
  };
  const auto [H, W] = spatial(parts.front());
  std::size_t channels = 0;
  for (const auto& p : parts) {
    if (spatial(p) != std::pair{H, W}) {
      throw ShapeError("concat_channels: spatial mismatch " + shape_str(parts.front().shape()) + " vs " +
                       shape_str(p.shape()));
    }
    channels += p.numel() / (H * W);
  }
  std::vector<double> out;
  out.reserve(channels * H * W);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor r = make_result({channels, H, W}, std::move(out));
  bool any = false;
  for (const auto& p : parts) any = any || Tape::should_record({&p});
  if (any) {
    Tape::current()->record(r, [parts, r] {
      auto g = adjoint(r);
      std::size_t offset = 0;
      for (const auto& p : parts) {
        const std::size_t n = p.numel();
        if (p.requires_grad()) {
          auto gp = grad_buffer(p);
          for (std::size_t i = 0; i < n; ++i) gp[i] += g[offset + i];
        }
        offset += n;
      }
    });
  }
  return r;
}

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 3, "slice_channels");
  if (begin >= end || end > x.dim(0)) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t plane = x.dim(1) * x.dim(2);
  auto v = x.data();
  std::vector<double> out(v.begin() + static_cast<long>(begin * plane), v.begin() + static_cast<long>(end * plane));
  Tensor r = make_result({end - begin, x.dim(1), x.dim(2)}, std::move(out));
  if (Tape::should_record({&x})) {
    Tape::current()->record(r, [x, r, offset = begin * plane] {
      auto g = adjoint(r);
      auto gx = grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[offset + i] += g[i];
    });
  }
  return r;
}

Tensor gather_cells(const Tensor& map, std::span<const std::size_t> flat_cells) {
  require_rank(map, 3, "gather_cells");
  const std::size_t C = map.dim(0), plane = map.dim(1) * map.dim(2), N = flat_cells.size();
  auto v = map.data();
  std::vector<double> out(N * C);
  std::vector<std::size_t> cells(flat_cells.begin(), flat_cells.end());
  for (std::size_t n = 0; n < N; ++n) {
    if (cells[n] >= plane) throw ShapeError("gather_cells: cell index out of range for " + shape_str(map.shape()));
    for (std::size_t c = 0; c < C; ++c) out[n * C + c] = v[c * plane + cells[n]];
  }
  Tensor r = make_result({N, C}, std::move(out));
  if (Tape::should_record({&map})) {
    Tape::current()->record(r, [map, r, cells = std::move(cells), C, plane] {
      auto g = adjoint(r);
      auto gm = grad_buffer(map);
      for (std::size_t n = 0; n < cells.size(); ++n) {
        for (std::size_t c = 0; c < C; ++c) gm[c * plane + cells[n]] += g[n * C + c];
      }
    });
  }
  return r;
}

// --- losses --------------------------------------------------------------------

Tensor l1_sum(const Tensor& a, const Tensor& b, const std::optional<Tensor>& weight) {
  require_same_shape(a, b, "l1_sum");
  const std::size_t n = a.numel();
  std::size_t wsize = n;
  if (weight) {
    const bool spatial = a.rank() == 3;
    const Shape expect = spatial ? Shape{a.dim(1), a.dim(2)} : a.shape();
    if (weight->shape() != expect) {
      throw ShapeError("l1_sum: weight " + shape_str(weight->shape()) + " does not fit operands " +
                       shape_str(a.shape()));
    }
    wsize = weight->numel();
  }
  auto x = a.data(), y = b.data();
  std::span<const double> w = weight ? weight->data() : std::span<const double>{};
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = std::abs(x[i] - y[i]);
    acc += weight ? w[i % wsize] * d : d;
  }
  Tensor r = make_result({}, {acc});
  if (Tape::should_record({&a, &b})) {
    Tape::current()->record(r, [a, b, r, weight, wsize] {
      const double g = adjoint(r)[0];
      auto x = a.data(), y = b.data();
      std::span<const double> w = weight ? weight->data() : std::span<const double>{};
      const std::size_t n = x.size();
      std::span<double> ga = a.requires_grad() ? grad_buffer(a) : std::span<double>{};
      std::span<double> gb = b.requires_grad() ? grad_buffer(b) : std::span<double>{};
      for (std::size_t i = 0; i < n; ++i) {
        const double diff = x[i] - y[i];
        if (diff == 0.0) continue;
        double s = diff > 0.0 ? g : -g;
        if (weight) s *= w[i % wsize];
        if (!ga.empty()) ga[i] += s;
        if (!gb.empty()) gb[i] -= s;
      }
    });
  }
  return r;
}

Tensor cosine_matrix(const Tensor& rows) {
  require_rank(rows, 2, "cosine_matrix");
  const std::size_t N = rows.dim(0), C = rows.dim(1);
  auto u = rows.data();
  std::vector<double> norms(N);
  for (std::size_t i = 0; i < N; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += u[i * C + c] * u[i * C + c];
    norms[i] = std::sqrt(s);
  }
  constexpr double kTiny = 1e-12;
  std::vector<double> out(N * N, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    if (norms[i] < kTiny) continue;
    for (std::size_t j = i; j < N; ++j) {
      if (norms[j] < kTiny) continue;
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += u[i * C + c] * u[j * C + c];
      const double s = i == j ? 1.0 : dot / (norms[i] * norms[j]);
      out[i * N + j] = s;
      out[j * N + i] = s;
    }
  }
  Tensor r = make_result({N, N}, std::move(out));
  if (Tape::should_record({&rows})) {
    Tape::current()->record(r, [rows, r, norms = std::move(norms), N, C] {
      auto g = adjoint(r);
      auto s = r.data();
      auto u = rows.data();
      auto gu = grad_buffer(rows);
      // d s_ij / d u_i = u_j / (n_i n_j) - s_ij u_i / n_i^2; the diagonal is constant.
      for (std::size_t i = 0; i < N; ++i) {
        if (norms[i] < kTiny) continue;
        const double inv_i = 1.0 / norms[i];
        for (std::size_t j = 0; j < N; ++j) {
          if (j == i || norms[j] < kTiny) continue;
          const double coef = g[i * N + j] + g[j * N + i];
          if (coef == 0.0) continue;
          const double a = coef * inv_i / norms[j];
          const double b = coef * s[i * N + j] * inv_i * inv_i;
          for (std::size_t c = 0; c < C; ++c) gu[i * C + c] += a * u[j * C + c] - b * u[i * C + c];
        }
      }
    });
  }
  return r;
}

}  // namespace unidistill

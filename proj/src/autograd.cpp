#include "toxitrace/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>

#include "toxitrace/error.hpp"

namespace toxitrace::ag {

namespace {

thread_local bool g_recording = true;

void require(bool cond, const char* what) {
  if (!cond) throw ContractViolation(what);
}

Var make(Op op, Tensor value, std::vector<Var> parents) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  bool needs = false;
  if (g_recording) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
  }
  return Var(std::move(n));
}

Node& node_of(const Var& v) {
  require(v.defined(), "use of an undefined Var");
  return *v.get();
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.rows, a.cols);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i]);
  return out;
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.rows, a.cols);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
  return out;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw ContractViolation(std::string("shape mismatch in ") + op);
  }
}

}  // namespace

Tensor::Tensor(std::size_t r, std::size_t c, std::vector<double> values)
    : rows(r), cols(c), data(std::move(values)) {
  require(data.size() == r * c, "tensor data does not match shape");
}

Tensor Tensor::row(std::vector<double> values) {
  const auto n = values.size();
  return Tensor(1, n, std::move(values));
}

Tensor Tensor::column(std::vector<double> values) {
  const auto n = values.size();
  return Tensor(n, 1, std::move(values));
}

std::string_view op_name(Op op) noexcept {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConstant: return "constant";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kGather: return "gather";
    case Op::kScatterAdd: return "scatter_add";
    case Op::kTanh: return "tanh";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSoftmax: return "softmax";
    case Op::kHinge: return "hinge";
    case Op::kMaxScalar: return "max_scalar";
    case Op::kMinScalar: return "min_scalar";
    case Op::kSum: return "sum";
    case Op::kSumRows: return "sum_rows";
    case Op::kSumCols: return "sum_cols";
    case Op::kBroadcastScalar: return "broadcast_scalar";
    case Op::kBroadcastRows: return "broadcast_rows";
    case Op::kBroadcastCols: return "broadcast_cols";
    case Op::kDot: return "dot";
    case Op::kRowNorm: return "row_norm";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kConcatRows: return "concat_rows";
    case Op::kReciprocal: return "reciprocal";
    case Op::kSafeReciprocal: return "safe_reciprocal";
    case Op::kMask: return "mask";
  }
  return "unknown";
}

const Tensor& Var::value() const { return node_of(*this).value; }

double Var::item() const {
  const auto& v = value();
  require(v.rows == 1 && v.cols == 1, "item() on a non-scalar Var");
  return v.data[0];
}

Op Var::op() const { return node_of(*this).op; }
bool Var::requires_grad() const { return node_ && node_->requires_grad; }

NoGradGuard::NoGradGuard() : previous_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = previous_; }
bool recording() noexcept { return g_recording; }

Var leaf(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = Op::kLeaf;
  n->requires_grad = true;
  return Var(std::move(n));
}

Var constant(Tensor value) { return make(Op::kConstant, std::move(value), {}); }

Var zeros_like(const Var& v) { return constant(Tensor(v.rows(), v.cols())); }

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make(Op::kAdd, zip(a.value(), b.value(), std::plus<>()), {a, b});
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make(Op::kSub, zip(a.value(), b.value(), std::minus<>()), {a, b});
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return make(Op::kMul, zip(a.value(), b.value(), std::multiplies<>()), {a, b});
}

Var matmul(const Var& a, const Var& b) {
  const auto& x = a.value();
  const auto& y = b.value();
  require(x.cols == y.rows, "matmul inner dimensions differ");
  Tensor out(x.rows, y.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double* orow = out.data.data() + i * y.cols;
    for (std::size_t k = 0; k < x.cols; ++k) {
      const double xik = x.data[i * x.cols + k];
      const double* yrow = y.data.data() + k * y.cols;
      for (std::size_t j = 0; j < y.cols; ++j) orow[j] += xik * yrow[j];
    }
  }
  return make(Op::kMatMul, std::move(out), {a, b});
}

Var transpose(const Var& a) {
  const auto& x = a.value();
  Tensor out(x.cols, x.rows);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) out(j, i) = x(i, j);
  return make(Op::kTranspose, std::move(out), {a});
}

Var gather(const Var& table, std::vector<std::size_t> index) {
  const auto& t = table.value();
  Tensor out(index.size(), t.cols);
  for (std::size_t k = 0; k < index.size(); ++k) {
    require(index[k] < t.rows, "gather index out of range");
    std::copy_n(t.data.begin() + static_cast<std::ptrdiff_t>(index[k] * t.cols), t.cols,
                out.data.begin() + static_cast<std::ptrdiff_t>(k * t.cols));
  }
  auto v = make(Op::kGather, std::move(out), {table});
  v.get()->index = std::move(index);
  v.get()->extent = t.rows;
  return v;
}

Var scatter_add(const Var& src, std::vector<std::size_t> index, std::size_t extent) {
  const auto& s = src.value();
  require(index.size() == s.rows, "scatter_add index count differs from source rows");
  Tensor out(extent, s.cols);
  for (std::size_t k = 0; k < index.size(); ++k) {
    require(index[k] < extent, "scatter_add index out of range");
    double* orow = out.data.data() + index[k] * s.cols;
    const double* srow = s.data.data() + k * s.cols;
    for (std::size_t j = 0; j < s.cols; ++j) orow[j] += srow[j];
  }
  auto v = make(Op::kScatterAdd, std::move(out), {src});
  v.get()->index = std::move(index);
  v.get()->extent = extent;
  return v;
}

Var tanh(const Var& a) {
  return make(Op::kTanh, map(a.value(), [](double x) { return std::tanh(x); }), {a});
}

Var exp(const Var& a) {
  return make(Op::kExp, map(a.value(), [](double x) { return std::exp(x); }), {a});
}

Var log(const Var& a) {
  return make(Op::kLog, map(a.value(), [](double x) { return std::log(x); }), {a});
}

Var softmax(const Var& a) {
  const auto& x = a.value();
  Tensor out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const double* xr = x.data.data() + i * x.cols;
    double* orow = out.data.data() + i * x.cols;
    const double mx = *std::max_element(xr, xr + x.cols);
    double z = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) z += (orow[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < x.cols; ++j) orow[j] /= z;
  }
  return make(Op::kSoftmax, std::move(out), {a});
}

Var log_softmax(const Var& a) {
  // x - max is a constant shift; it cancels exactly in the result.
  const auto& x = a.value();
  Tensor shift(x.rows, 1);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const double* xr = x.data.data() + i * x.cols;
    shift.data[i] = *std::max_element(xr, xr + x.cols);
  }
  auto z = sub(a, broadcast_cols(constant(std::move(shift)), x.cols));
  auto lse = log(sum_cols(exp(z)));
  return sub(z, broadcast_cols(lse, x.cols));
}

namespace {

Tensor step_mask(const Tensor& x, double c, bool above) {
  return map(x, [c, above](double v) { return (above ? v > c : v < c) ? 1.0 : 0.0; });
}

}  // namespace

Var hinge(const Var& a) {
  auto v = make(Op::kHinge, map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }), {a});
  return v;
}

Var max_scalar(const Var& a, double c) {
  auto v = make(Op::kMaxScalar, map(a.value(), [c](double x) { return x > c ? x : c; }), {a});
  v.get()->scalar = c;
  return v;
}

Var min_scalar(const Var& a, double c) {
  auto v = make(Op::kMinScalar, map(a.value(), [c](double x) { return x < c ? x : c; }), {a});
  v.get()->scalar = c;
  return v;
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a.value().data) s += x;
  return make(Op::kSum, Tensor::scalar(s), {a});
}

Var mean(const Var& a) {
  require(a.value().size() > 0, "mean of an empty Var");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var sum_rows(const Var& a) {
  const auto& x = a.value();
  Tensor out(1, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) out.data[j] += x(i, j);
  return make(Op::kSumRows, std::move(out), {a});
}

Var sum_cols(const Var& a) {
  const auto& x = a.value();
  Tensor out(x.rows, 1);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) s += x(i, j);
    out.data[i] = s;
  }
  return make(Op::kSumCols, std::move(out), {a});
}

Var broadcast_scalar(const Var& a, std::size_t rows, std::size_t cols) {
  return make(Op::kBroadcastScalar, Tensor(rows, cols, a.item()), {a});
}

Var broadcast_rows(const Var& a, std::size_t rows) {
  const auto& x = a.value();
  require(x.rows == 1, "broadcast_rows expects a single row");
  Tensor out(rows, x.cols);
  for (std::size_t i = 0; i < rows; ++i)
    std::copy(x.data.begin(), x.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * x.cols));
  return make(Op::kBroadcastRows, std::move(out), {a});
}

Var broadcast_cols(const Var& a, std::size_t cols) {
  const auto& x = a.value();
  require(x.cols == 1, "broadcast_cols expects a single column");
  Tensor out(x.rows, cols);
  for (std::size_t i = 0; i < x.rows; ++i)
    std::fill_n(out.data.begin() + static_cast<std::ptrdiff_t>(i * cols), cols, x.data[i]);
  return make(Op::kBroadcastCols, std::move(out), {a});
}

Var dot(const Var& a, const Var& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  const auto& x = a.value().data;
  const auto& y = b.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return make(Op::kDot, Tensor::scalar(s), {a, b});
}

Var row_norm(const Var& a) {
  const auto& x = a.value();
  Tensor out(x.rows, 1);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) s += x(i, j) * x(i, j);
    out.data[i] = std::sqrt(s);
  }
  return make(Op::kRowNorm, std::move(out), {a});
}

Var scale(const Var& a, double c) {
  auto v = make(Op::kScale, map(a.value(), [c](double x) { return x * c; }), {a});
  v.get()->scalar = c;
  return v;
}

Var add_scalar(const Var& a, double c) {
  auto v = make(Op::kAddScalar, map(a.value(), [c](double x) { return x + c; }), {a});
  v.get()->scalar = c;
  return v;
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows of nothing");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows column mismatch");
    rows += p.rows();
  }
  Tensor out(rows, cols);
  auto it = out.data.begin();
  for (const auto& p : parts) it = std::copy(p.value().data.begin(), p.value().data.end(), it);
  return make(Op::kConcatRows, std::move(out), std::vector<Var>(parts.begin(), parts.end()));
}

Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

Var reciprocal(const Var& a) {
  return make(Op::kReciprocal, map(a.value(), [](double x) { return 1.0 / x; }), {a});
}

Var safe_reciprocal(const Var& a) {
  return make(Op::kSafeReciprocal,
              map(a.value(), [](double x) { return x == 0.0 ? 0.0 : 1.0 / x; }), {a});
}

Var masked(const Var& a, Tensor mask) {
  require(mask.same_shape(a.value()), "mask shape mismatch");
  auto out = zip(a.value(), mask, std::multiplies<>());
  auto v = make(Op::kMask, std::move(out), {a});
  v.get()->mask = std::move(mask);
  return v;
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var element(const Var& a, std::size_t r, std::size_t c) {
  require(r < a.rows() && c < a.cols(), "element index out of range");
  auto row = a.rows() == 1 ? a : gather(a, {r});
  if (row.cols() == 1) return row;
  return gather(transpose(row), {c});
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  require(begin <= end && end <= a.rows(), "slice_rows range out of bounds");
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
  return gather(a, std::move(idx));
}

Var detach(const Var& a) { return constant(a.value()); }

namespace {

// Per-parent adjoints of `self` given the incoming gradient `g`.
// Entries for parents that do not require grad are left undefined.
std::vector<Var> adjoints(const Var& self, const Var& g, const std::vector<char>& wanted) {
  const Node& n = *self.get();
  const auto& ps = n.parents;
  std::vector<Var> out(ps.size());
  auto want = [&](std::size_t i) { return wanted[i] != 0; };
  if (std::none_of(wanted.begin(), wanted.end(), [](char c) { return c != 0; })) return out;

  switch (n.op) {
    case Op::kLeaf:
    case Op::kConstant:
      break;
    case Op::kAdd:
      if (want(0)) out[0] = g;
      if (want(1)) out[1] = g;
      break;
    case Op::kSub:
      if (want(0)) out[0] = g;
      if (want(1)) out[1] = neg(g);
      break;
    case Op::kMul:
      if (want(0)) out[0] = mul(g, ps[1]);
      if (want(1)) out[1] = mul(g, ps[0]);
      break;
    case Op::kMatMul:
      if (want(0)) out[0] = matmul(g, transpose(ps[1]));
      if (want(1)) out[1] = matmul(transpose(ps[0]), g);
      break;
    case Op::kTranspose:
      out[0] = transpose(g);
      break;
    case Op::kGather:
      out[0] = scatter_add(g, n.index, n.extent);
      break;
    case Op::kScatterAdd:
      out[0] = gather(g, n.index);
      break;
    case Op::kTanh:
      out[0] = sub(g, mul(g, mul(self, self)));
      break;
    case Op::kExp:
      out[0] = mul(g, self);
      break;
    case Op::kLog:
      out[0] = mul(g, reciprocal(ps[0]));
      break;
    case Op::kSoftmax: {
      auto gy = mul(g, self);
      out[0] = sub(gy, mul(self, broadcast_cols(sum_cols(gy), self.cols())));
      break;
    }
    case Op::kHinge:
      out[0] = masked(g, step_mask(ps[0].value(), 0.0, true));
      break;
    case Op::kMaxScalar:
      out[0] = masked(g, step_mask(ps[0].value(), n.scalar, true));
      break;
    case Op::kMinScalar:
      out[0] = masked(g, step_mask(ps[0].value(), n.scalar, false));
      break;
    case Op::kSum:
      out[0] = broadcast_scalar(g, ps[0].rows(), ps[0].cols());
      break;
    case Op::kSumRows:
      out[0] = broadcast_rows(g, ps[0].rows());
      break;
    case Op::kSumCols:
      out[0] = broadcast_cols(g, ps[0].cols());
      break;
    case Op::kBroadcastScalar:
      out[0] = sum(g);
      break;
    case Op::kBroadcastRows:
      out[0] = sum_rows(g);
      break;
    case Op::kBroadcastCols:
      out[0] = sum_cols(g);
      break;
    case Op::kDot: {
      const auto r = ps[0].rows();
      const auto c = ps[0].cols();
      auto gb = broadcast_scalar(g, r, c);
      if (want(0)) out[0] = mul(gb, ps[1]);
      if (want(1)) out[1] = mul(gb, ps[0]);
      break;
    }
    case Op::kRowNorm: {
      // d|x|/dx = x/|x|; zero rows take subgradient 0.
      auto coeff = mul(g, safe_reciprocal(self));
      out[0] = mul(broadcast_cols(coeff, ps[0].cols()), ps[0]);
      break;
    }
    case Op::kScale:
      out[0] = scale(g, n.scalar);
      break;
    case Op::kAddScalar:
      out[0] = g;
      break;
    case Op::kConcatRows: {
      std::size_t offset = 0;
      for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto r = ps[i].rows();
        if (want(i)) out[i] = slice_rows(g, offset, offset + r);
        offset += r;
      }
      break;
    }
    case Op::kReciprocal:
    case Op::kSafeReciprocal:
      out[0] = neg(mul(g, mul(self, self)));
      break;
    case Op::kMask:
      out[0] = masked(g, n.mask);
      break;
  }
  return out;
}

bool has_nan(const Tensor& t) {
  return std::any_of(t.data.begin(), t.data.end(), [](double x) { return std::isnan(x); });
}

}  // namespace

std::vector<Var> gradient(const Var& output, std::span<const Var> inputs, bool record_backward) {
  require(output.defined(), "gradient of an undefined Var");
  require(output.rows() == 1 && output.cols() == 1, "gradient requires a scalar output");

  std::unordered_set<Node*> wanted;
  for (const auto& in : inputs) wanted.insert(in.get());

  // Post-order over the grad-requiring subgraph; `leads` marks nodes with a
  // path to one of the inputs. Only those take part in propagation.
  std::vector<Var> order;
  std::unordered_map<Node*, bool> leads;
  if (output.requires_grad()) {
    std::vector<std::pair<Var, std::size_t>> stack;
    stack.emplace_back(output, 0);
    leads[output.get()] = false;
    while (!stack.empty()) {
      auto& top = stack.back();
      Node* n = top.first.get();
      if (top.second < n->parents.size()) {
        const Var& p = n->parents[top.second++];
        if (p.requires_grad() && !leads.contains(p.get())) {
          leads[p.get()] = false;
          stack.emplace_back(p, 0);
        }
      } else {
        bool l = wanted.contains(n);
        for (const auto& p : n->parents) l = l || (p.requires_grad() && leads[p.get()]);
        leads[n] = l;
        if (l) order.push_back(top.first);
        stack.pop_back();
      }
    }
  }

  std::unordered_map<Node*, Var> grads;
  std::optional<NoGradGuard> guard;
  if (!record_backward) guard.emplace();

  if (!order.empty()) {
    grads[output.get()] = constant(Tensor::scalar(1.0));
    std::vector<char> mask;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = it->get();
      auto found = grads.find(n);
      if (found == grads.end() || n->parents.empty()) continue;
      mask.assign(n->parents.size(), 0);
      for (std::size_t i = 0; i < mask.size(); ++i) {
        const Var& p = n->parents[i];
        mask[i] = p.requires_grad() && leads[p.get()] ? 1 : 0;
      }
      auto parts = adjoints(*it, found->second, mask);
      for (std::size_t i = 0; i < parts.size(); ++i) {
        if (!parts[i].defined()) continue;
        if (has_nan(parts[i].value())) {
          throw NumericFault(std::string(op_name(n->op)), "NaN in adjoint");
        }
        Node* p = n->parents[i].get();
        auto [slot, inserted] = grads.try_emplace(p, parts[i]);
        if (!inserted) slot->second = add(slot->second, parts[i]);
      }
      // Interior gradients are no longer needed once propagated.
      if (n != output.get() && !wanted.contains(n)) grads.erase(n);
    }
  }

  std::vector<Var> result;
  result.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto found = grads.find(in.get());
    if (found != grads.end()) {
      result.push_back(found->second);
    } else {
      result.push_back(constant(Tensor(in.rows(), in.cols())));
    }
  }
  return result;
}

std::vector<Var> gradient(const Var& output, std::initializer_list<Var> inputs,
                          bool record_backward) {
  return gradient(output, std::span<const Var>(inputs.begin(), inputs.size()), record_backward);
}

double finite_difference_check(const std::function<double(std::span<const double>)>& f,
                               std::span<const double> point, std::span<const double> analytic,
                               double step, double floor) {
  require(step > 0.0, "finite difference step must be positive");
  require(point.size() == analytic.size(), "analytic gradient size differs from point");
  std::vector<double> x(point.begin(), point.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = f(x);
    x[i] = orig - step;
    const double down = f(x);
    x[i] = orig;
    const double fd = (up - down) / (2.0 * step);
    const double err = std::abs(analytic[i] - fd) / (std::abs(fd) + floor);
    if (std::isnan(err)) throw NumericFault("finite_difference_check", "NaN difference");
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace toxitrace::ag

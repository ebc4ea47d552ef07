#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// Every adjoint is itself expressed with the ops in this header, so the
// gradients returned by gradient(..., record_backward = true) are ordinary
// differentiable Vars. That is all the machinery needed to optimise losses
// defined on gradient norms.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

namespace toxitrace::ag {

struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Tensor(std::size_t r, std::size_t c, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(1, 1, v); }
  static Tensor row(std::vector<double> values);
  static Tensor column(std::vector<double> values);

  std::size_t size() const noexcept { return data.size(); }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  bool same_shape(const Tensor& o) const noexcept { return rows == o.rows && cols == o.cols; }

  bool operator==(const Tensor& o) const = default;
};

enum class Op : std::uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kMatMul,
  kTranspose,
  kGather,
  kScatterAdd,
  kTanh,
  kExp,
  kLog,
  kSoftmax,
  kHinge,
  kMaxScalar,
  kMinScalar,
  kSum,
  kSumRows,
  kSumCols,
  kBroadcastScalar,
  kBroadcastRows,
  kBroadcastCols,
  kDot,
  kRowNorm,
  kScale,
  kAddScalar,
  kConcatRows,
  kReciprocal,
  kSafeReciprocal,
  kMask,
};

std::string_view op_name(Op op) noexcept;

struct Node;

// Shared handle to a graph node. Cheap to copy.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  const Tensor& value() const;
  double item() const;  // value of a 1x1 Var
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
  Op op() const;
  bool requires_grad() const;
  bool defined() const noexcept { return node_ != nullptr; }
  Node* get() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

struct Node {
  Tensor value;
  Op op = Op::kConstant;
  bool requires_grad = false;
  std::vector<Var> parents;
  // Op-specific attributes.
  double scalar = 0.0;
  std::vector<std::size_t> index;
  std::size_t extent = 0;
  Tensor mask;
};

// Disables graph recording on this thread while alive. Ops then return
// constants without parents.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool recording() noexcept;

Var leaf(Tensor value);      // requires_grad = true
Var constant(Tensor value);  // requires_grad = false
Var zeros_like(const Var& v);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
// Rows of `table` selected by `index`, in order.
Var gather(const Var& table, std::vector<std::size_t> index);
// Adjoint of gather: an (extent x cols) matrix where row index[k] accumulates src row k.
Var scatter_add(const Var& src, std::vector<std::size_t> index, std::size_t extent);
Var tanh(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var softmax(const Var& a);  // over the last axis (per row)
Var log_softmax(const Var& a);
Var hinge(const Var& a);  // max(0, a), subgradient 0 at 0
Var max_scalar(const Var& a, double c);
Var min_scalar(const Var& a, double c);
Var sum(const Var& a);       // -> 1x1
Var mean(const Var& a);      // -> 1x1
Var sum_rows(const Var& a);  // r x c -> 1 x c
Var sum_cols(const Var& a);  // r x c -> r x 1
Var broadcast_scalar(const Var& a, std::size_t rows, std::size_t cols);
Var broadcast_rows(const Var& a, std::size_t rows);  // 1 x c -> rows x c
Var broadcast_cols(const Var& a, std::size_t cols);  // r x 1 -> r x cols
Var dot(const Var& a, const Var& b);                 // same shape -> 1x1
Var row_norm(const Var& a);                          // r x c -> r x 1, L2
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var concat_rows(std::span<const Var> parts);
Var concat_rows(std::initializer_list<Var> parts);
Var reciprocal(const Var& a);
// 1/a where a != 0, else 0.
Var safe_reciprocal(const Var& a);
// Elementwise product with a constant 0/1 mask (no gradient through the mask).
Var masked(const Var& a, Tensor mask);
Var neg(const Var& a);
Var element(const Var& a, std::size_t r, std::size_t c);  // -> 1x1
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
Var detach(const Var& a);

// d output / d inputs. `output` must be 1x1. Inputs not reachable from the
// output receive zero gradients. With record_backward the returned Vars are
// part of a differentiable graph.
std::vector<Var> gradient(const Var& output, std::span<const Var> inputs, bool record_backward);
std::vector<Var> gradient(const Var& output, std::initializer_list<Var> inputs,
                          bool record_backward);

// Max over coordinates of |analytic - fd| / (|fd| + floor), fd being the
// central difference.
double finite_difference_check(const std::function<double(std::span<const double>)>& f,
                               std::span<const double> point, std::span<const double> analytic,
                               double step, double floor = 1e-12);

}  // namespace toxitrace::ag

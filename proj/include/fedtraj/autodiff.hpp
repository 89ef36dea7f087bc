#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "fedtraj/common.hpp"

namespace fedtraj::ad {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;  // row-major

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d);

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double value);
  static Tensor scalar(double value);
  static Tensor row(std::vector<double> values);                        // [n]
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  std::size_t size() const { return data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  bool is_scalar() const { return data.size() == 1; }
  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;
};

// Eager reverse-mode tape. Building an op computes its value immediately
// and records the node; backward() walks the tape once in reverse.
// Non-finite results are trapped on every op.
class Graph {
 public:
  using Id = std::int32_t;

  Id leaf(Tensor value, bool requires_grad);
  Id constant(Tensor value) { return leaf(std::move(value), false); }

  Id matmul(Id a, Id b);
  Id add(Id a, Id b);
  Id add_rowvec(Id m, Id v);  // broadcast v over the rows of m
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);
  Id scale(Id a, double c);
  Id gelu(Id a);
  // softmax over the given axis; only the last axis is supported
  Id softmax(Id a, int axis = -1);
  Id log(Id a);
  Id sum(Id a);
  Id mean(Id a);
  // stop-gradient view: value passes through, backward does not
  Id detach(Id a);
  // KL(p || q) = sum p log(p / q), q clamped at 1e-12 before the log;
  // 1-D inputs give plain KL, 2-D inputs the mean of row KLs.
  // Validates both arguments as probability vectors.
  Id kl_div(Id p, Id q);

  const Tensor& value(Id id) const;
  const Tensor& grad(Id id) const;

  void backward(Id loss);  // NonScalarLoss unless value(loss) is scalar

  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  enum class Op : std::uint8_t {
    leaf, matmul, add, add_rowvec, sub, mul, scale, gelu, softmax, log, sum, mean, detach, kl
  };

  struct Node {
    Op op;
    Id a = -1, b = -1;
    double c = 0.0;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
  };

  Id push(Node node);
  Node& node(Id id);
  const Node& node(Id id) const;
  void check_finite(Id id) const;

  std::vector<Node> nodes_;
};

inline constexpr double kKlClamp = 1e-12;

// plain (non-graph) helpers shared with eval paths
void softmax_rows_inplace(Tensor& t);
double kl_value(std::span<const double> p, std::span<const double> q);

struct GradcheckReport {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  bool pass = false;
};

// compares an analytic gradient against central finite differences,
// componentwise; rel err uses max(1, |analytic|, |numeric|) as scale
GradcheckReport gradcheck(const std::function<double(std::span<const double>)>& f,
                          const std::function<std::vector<double>(std::span<const double>)>& grad_f,
                          std::span<const double> point, double h = 1e-5, double tol = 1e-4);

// Adam with per-key state; step order is the caller's responsibility and
// must be deterministic for reproducible runs
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::string& key, std::span<double> w, std::span<const double> g);
  double lr() const { return lr_; }

 private:
  struct State {
    std::vector<double> m, v;
    std::int64_t t = 0;
  };
  double lr_, beta1_, beta2_, eps_;
  std::unordered_map<std::string, State> state_;
};

}  // namespace fedtraj::ad

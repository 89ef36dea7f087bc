#include "fedtraj/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "fedtraj/kernels.hpp"

namespace fedtraj::ad {

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  std::size_t expect = 1;
  for (std::size_t dim : shape) expect *= dim;
  if (expect != data.size()) fail(Err::ShapeMismatch, "tensor data does not match shape");
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  std::size_t n = 1;
  for (std::size_t dim : shape) n *= dim;
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  std::size_t n = 1;
  for (std::size_t dim : shape) n *= dim;
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::row(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

std::size_t Tensor::rows() const { return shape.size() == 2 ? shape[0] : 1; }

std::size_t Tensor::cols() const {
  if (shape.empty()) return 1;
  return shape.size() == 2 ? shape[1] : shape[0];
}

double& Tensor::at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
double Tensor::at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

Graph::Id Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  const Id id = static_cast<Id>(nodes_.size() - 1);
  check_finite(id);
  return id;
}

Graph::Node& Graph::node(Id id) { return nodes_.at(static_cast<std::size_t>(id)); }
const Graph::Node& Graph::node(Id id) const { return nodes_.at(static_cast<std::size_t>(id)); }

void Graph::check_finite(Id id) const {
  const Tensor& v = node(id).value;
  if (!kernels::all_finite(v.data.data(), v.data.size()))
    fail(Err::NonFiniteValue, "non-finite value produced by node " + std::to_string(id));
}

const Tensor& Graph::value(Id id) const { return node(id).value; }
const Tensor& Graph::grad(Id id) const { return node(id).grad; }

Graph::Id Graph::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = Op::leaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

Graph::Id Graph::matmul(Id a, Id b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.shape.size() != 2 || tb.shape.size() != 2 || ta.shape[1] != tb.shape[0])
    fail(Err::ShapeMismatch, "matmul shape mismatch");
  Node n;
  n.op = Op::matmul;
  n.a = a;
  n.b = b;
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  n.value = Tensor::zeros({ta.shape[0], tb.shape[1]});
  kernels::matmul_nn(ta.data.data(), tb.data.data(), n.value.data.data(), ta.shape[0], ta.shape[1],
                     tb.shape[1]);
  return push(std::move(n));
}

Graph::Id Graph::add(Id a, Id b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (!ta.same_shape(tb)) fail(Err::ShapeMismatch, "add shape mismatch");
  Node n;
  n.op = Op::add;
  n.a = a;
  n.b = b;
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  n.value = Tensor::zeros(ta.shape);
  kernels::add(ta.data.data(), tb.data.data(), n.value.data.data(), ta.size());
  return push(std::move(n));
}

Graph::Id Graph::add_rowvec(Id m, Id v) {
  const Tensor& tm = value(m);
  const Tensor& tv = value(v);
  if (tm.shape.size() != 2 || tv.shape.size() != 1 || tm.shape[1] != tv.shape[0])
    fail(Err::ShapeMismatch, "add_rowvec shape mismatch");
  Node n;
  n.op = Op::add_rowvec;
  n.a = m;
  n.b = v;
  n.requires_grad = node(m).requires_grad || node(v).requires_grad;
  n.value = tm;
  for (std::size_t r = 0; r < tm.shape[0]; ++r)
    kernels::add(tm.data.data() + r * tm.shape[1], tv.data.data(), n.value.data.data() + r * tm.shape[1],
                 tm.shape[1]);
  return push(std::move(n));
}

Graph::Id Graph::sub(Id a, Id b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (!ta.same_shape(tb)) fail(Err::ShapeMismatch, "sub shape mismatch");
  Node n;
  n.op = Op::sub;
  n.a = a;
  n.b = b;
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  n.value = Tensor::zeros(ta.shape);
  kernels::sub(ta.data.data(), tb.data.data(), n.value.data.data(), ta.size());
  return push(std::move(n));
}

Graph::Id Graph::mul(Id a, Id b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (!ta.same_shape(tb)) fail(Err::ShapeMismatch, "mul shape mismatch");
  Node n;
  n.op = Op::mul;
  n.a = a;
  n.b = b;
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  n.value = Tensor::zeros(ta.shape);
  kernels::mul(ta.data.data(), tb.data.data(), n.value.data.data(), ta.size());
  return push(std::move(n));
}

Graph::Id Graph::scale(Id a, double c) {
  const Tensor& ta = value(a);
  Node n;
  n.op = Op::scale;
  n.a = a;
  n.c = c;
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor::zeros(ta.shape);
  kernels::scale(ta.data.data(), c, n.value.data.data(), ta.size());
  return push(std::move(n));
}

Graph::Id Graph::gelu(Id a) {
  const Tensor& ta = value(a);
  Node n;
  n.op = Op::gelu;
  n.a = a;
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor::zeros(ta.shape);
  kernels::gelu(ta.data.data(), n.value.data.data(), ta.size());
  return push(std::move(n));
}

void softmax_rows_inplace(Tensor& t) {
  const std::size_t cols = t.cols();
  const std::size_t rows = t.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = t.data.data() + r * cols;
    double hi = row[0];
    for (std::size_t j = 1; j < cols; ++j) hi = std::max(hi, row[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - hi);
      total += row[j];
    }
    for (std::size_t j = 0; j < cols; ++j) row[j] /= total;
  }
}

Graph::Id Graph::softmax(Id a, int axis) {
  const Tensor& ta = value(a);
  const int last = static_cast<int>(ta.shape.size()) - 1;
  if (axis != -1 && axis != last) fail(Err::ShapeMismatch, "softmax only supports the last axis");
  Node n;
  n.op = Op::softmax;
  n.a = a;
  n.requires_grad = node(a).requires_grad;
  n.value = ta;
  softmax_rows_inplace(n.value);
  return push(std::move(n));
}

Graph::Id Graph::log(Id a) {
  const Tensor& ta = value(a);
  Node n;
  n.op = Op::log;
  n.a = a;
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor::zeros(ta.shape);
  for (std::size_t i = 0; i < ta.size(); ++i) n.value.data[i] = std::log(ta.data[i]);
  return push(std::move(n));
}

Graph::Id Graph::sum(Id a) {
  const Tensor& ta = value(a);
  Node n;
  n.op = Op::sum;
  n.a = a;
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor::scalar(kernels::sum(ta.data.data(), ta.size()));
  return push(std::move(n));
}

Graph::Id Graph::mean(Id a) {
  const Tensor& ta = value(a);
  Node n;
  n.op = Op::mean;
  n.a = a;
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor::scalar(kernels::sum(ta.data.data(), ta.size()) / static_cast<double>(ta.size()));
  return push(std::move(n));
}

Graph::Id Graph::detach(Id a) {
  Node n;
  n.op = Op::detach;
  n.a = a;
  n.requires_grad = false;
  n.value = value(a);
  return push(std::move(n));
}

double kl_value(std::span<const double> p, std::span<const double> q) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;  // 0 log 0 = 0
    acc += p[i] * std::log(p[i] / std::max(q[i], kKlClamp));
  }
  return acc;
}

namespace {

void validate_distribution(const Tensor& t, const char* which) {
  const std::size_t cols = t.cols();
  const std::size_t rows = t.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double v = t.data[r * cols + j];
      if (v < 0.0) fail(Err::NotNormalized, std::string(which) + " has a negative entry");
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-9)
      fail(Err::NotNormalized, std::string(which) + " does not sum to 1");
  }
}

}  // namespace

Graph::Id Graph::kl_div(Id p, Id q) {
  const Tensor& tp = value(p);
  const Tensor& tq = value(q);
  if (!tp.same_shape(tq)) fail(Err::LengthMismatch, "kl_div shape mismatch");
  validate_distribution(tp, "kl_div p");
  validate_distribution(tq, "kl_div q");
  const std::size_t cols = tp.cols();
  const std::size_t rows = tp.size() / cols;
  double acc = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    acc += kl_value({tp.data.data() + r * cols, cols}, {tq.data.data() + r * cols, cols});
  }
  Node n;
  n.op = Op::kl;
  n.a = p;
  n.b = q;
  n.requires_grad = node(p).requires_grad || node(q).requires_grad;
  n.value = Tensor::scalar(acc / static_cast<double>(rows));
  return push(std::move(n));
}

void Graph::backward(Id loss) {
  if (!value(loss).is_scalar()) fail(Err::NonScalarLoss, "backward needs a scalar loss");
  for (Node& n : nodes_) n.grad = Tensor();  // reset
  node(loss).grad = Tensor::scalar(1.0);

  auto ensure_grad = [&](Id id) -> Tensor& {
    Node& n = node(id);
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
  };

  for (Id id = loss; id >= 0; --id) {
    Node& n = node(id);
    if (n.grad.data.empty() || !n.requires_grad) continue;
    const Tensor& g = n.grad;
    switch (n.op) {
      case Op::leaf:
      case Op::detach:
        break;
      case Op::matmul: {
        const Tensor& ta = value(n.a);
        const Tensor& tb = value(n.b);
        const std::size_t m = ta.shape[0], k = ta.shape[1], c = tb.shape[1];
        if (node(n.a).requires_grad) {
          Tensor ga = Tensor::zeros(ta.shape);  // dA = dC * B^T
          kernels::matmul_nt(g.data.data(), tb.data.data(), ga.data.data(), m, c, k);
          Tensor& acc = ensure_grad(n.a);
          kernels::add(acc.data.data(), ga.data.data(), acc.data.data(), ga.size());
        }
        if (node(n.b).requires_grad) {
          Tensor gb = Tensor::zeros(tb.shape);  // dB = A^T * dC
          kernels::matmul_tn(ta.data.data(), g.data.data(), gb.data.data(), k, m, c);
          Tensor& acc = ensure_grad(n.b);
          kernels::add(acc.data.data(), gb.data.data(), acc.data.data(), gb.size());
        }
        break;
      }
      case Op::add: {
        if (node(n.a).requires_grad) {
          Tensor& acc = ensure_grad(n.a);
          kernels::add(acc.data.data(), g.data.data(), acc.data.data(), g.size());
        }
        if (node(n.b).requires_grad) {
          Tensor& acc = ensure_grad(n.b);
          kernels::add(acc.data.data(), g.data.data(), acc.data.data(), g.size());
        }
        break;
      }
      case Op::add_rowvec: {
        if (node(n.a).requires_grad) {
          Tensor& acc = ensure_grad(n.a);
          kernels::add(acc.data.data(), g.data.data(), acc.data.data(), g.size());
        }
        if (node(n.b).requires_grad) {
          Tensor& gv = ensure_grad(n.b);
          const std::size_t cols = value(n.b).shape[0];
          const std::size_t rows = g.size() / cols;
          for (std::size_t r = 0; r < rows; ++r)
            kernels::add(gv.data.data(), g.data.data() + r * cols, gv.data.data(), cols);
        }
        break;
      }
      case Op::sub: {
        if (node(n.a).requires_grad) {
          Tensor& acc = ensure_grad(n.a);
          kernels::add(acc.data.data(), g.data.data(), acc.data.data(), g.size());
        }
        if (node(n.b).requires_grad) {
          Tensor& gb = ensure_grad(n.b);
          kernels::axpy(-1.0, g.data.data(), gb.data.data(), g.size());
        }
        break;
      }
      case Op::mul: {
        if (node(n.a).requires_grad) {
          Tensor tmp = Tensor::zeros(g.shape);
          kernels::mul(g.data.data(), value(n.b).data.data(), tmp.data.data(), g.size());
          Tensor& acc = ensure_grad(n.a);
          kernels::add(acc.data.data(), tmp.data.data(), acc.data.data(), g.size());
        }
        if (node(n.b).requires_grad) {
          Tensor tmp = Tensor::zeros(g.shape);
          kernels::mul(g.data.data(), value(n.a).data.data(), tmp.data.data(), g.size());
          Tensor& acc = ensure_grad(n.b);
          kernels::add(acc.data.data(), tmp.data.data(), acc.data.data(), g.size());
        }
        break;
      }
      case Op::scale: {
        if (node(n.a).requires_grad) {
          Tensor& ga = ensure_grad(n.a);
          kernels::axpy(n.c, g.data.data(), ga.data.data(), g.size());
        }
        break;
      }
      case Op::gelu: {
        if (node(n.a).requires_grad) {
          Tensor& ga = ensure_grad(n.a);
          kernels::gelu_grad(value(n.a).data.data(), g.data.data(), ga.data.data(), g.size());
        }
        break;
      }
      case Op::softmax: {
        if (node(n.a).requires_grad) {
          Tensor& ga = ensure_grad(n.a);
          const Tensor& y = n.value;
          const std::size_t cols = y.cols();
          const std::size_t rows = y.size() / cols;
          for (std::size_t r = 0; r < rows; ++r) {
            const double* yr = y.data.data() + r * cols;
            const double* gr = g.data.data() + r * cols;
            const double inner = kernels::dot(yr, gr, cols);
            double* out = ga.data.data() + r * cols;
            for (std::size_t j = 0; j < cols; ++j) out[j] += yr[j] * (gr[j] - inner);
          }
        }
        break;
      }
      case Op::log: {
        if (node(n.a).requires_grad) {
          Tensor& ga = ensure_grad(n.a);
          const Tensor& x = value(n.a);
          for (std::size_t i = 0; i < x.size(); ++i) ga.data[i] += g.data[i] / x.data[i];
        }
        break;
      }
      case Op::sum: {
        if (node(n.a).requires_grad) {
          Tensor& ga = ensure_grad(n.a);
          const double gv = g.data[0];
          for (double& v : ga.data) v += gv;
        }
        break;
      }
      case Op::mean: {
        if (node(n.a).requires_grad) {
          Tensor& ga = ensure_grad(n.a);
          const double gv = g.data[0] / static_cast<double>(ga.size());
          for (double& v : ga.data) v += gv;
        }
        break;
      }
      case Op::kl: {
        const Tensor& tp = value(n.a);
        const Tensor& tq = value(n.b);
        const std::size_t cols = tp.cols();
        const std::size_t rows = tp.size() / cols;
        const double gv = g.data[0] / static_cast<double>(rows);
        if (node(n.a).requires_grad) {
          Tensor& gp = ensure_grad(n.a);
          for (std::size_t i = 0; i < tp.size(); ++i) {
            if (tp.data[i] == 0.0) continue;
            gp.data[i] += gv * (std::log(tp.data[i] / std::max(tq.data[i], kKlClamp)) + 1.0);
          }
        }
        if (node(n.b).requires_grad) {
          Tensor& gq = ensure_grad(n.b);
          for (std::size_t i = 0; i < tq.size(); ++i) {
            if (tq.data[i] <= kKlClamp) continue;  // clamped region has zero slope
            gq.data[i] += gv * (-tp.data[i] / tq.data[i]);
          }
        }
        break;
      }
    }
  }
}

GradcheckReport gradcheck(const std::function<double(std::span<const double>)>& f,
                          const std::function<std::vector<double>(std::span<const double>)>& grad_f,
                          std::span<const double> point, double h, double tol) {
  std::vector<double> x(point.begin(), point.end());
  const std::vector<double> analytic = grad_f(x);
  GradcheckReport report;
  report.checked = x.size();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f(x);
    x[i] = keep - h;
    const double fm = f(x);
    x[i] = keep;
    const double numeric = (fp - fm) / (2.0 * h);
    const double scale = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    report.max_rel_err = std::max(report.max_rel_err, std::abs(analytic[i] - numeric) / scale);
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

void Adam::step(const std::string& key, std::span<double> w, std::span<const double> g) {
  if (w.size() != g.size()) fail(Err::LengthMismatch, "adam: weight/grad size mismatch");
  State& s = state_[key];
  if (s.m.empty()) {
    s.m.assign(w.size(), 0.0);
    s.v.assign(w.size(), 0.0);
  }
  if (s.m.size() != w.size()) fail(Err::LengthMismatch, "adam: state size changed for " + key);
  ++s.t;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(s.t));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(s.t));
  for (std::size_t i = 0; i < w.size(); ++i) {
    s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
    s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
    const double mh = s.m[i] / bc1;
    const double vh = s.v[i] / bc2;
    w[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
  }
}

}  // namespace fedtraj::ad

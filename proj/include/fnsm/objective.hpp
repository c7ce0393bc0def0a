#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <variant>
#include <vector>

#include "fnsm/data.hpp"
#include "fnsm/errors.hpp"
#include "fnsm/param_vector.hpp"
#include "fnsm/rng.hpp"

namespace fnsm {

// 0.5 (theta - c)^T A (theta - c); independent of the batch.
struct Quadratic {
  Matrix A;
  ParamVector c;
};

// Multinomial logistic regression. Layout: W (classes x dim, row-major), b (classes).
struct SoftmaxLinear {
  int classes = 2;
  std::size_t dim = 1;
};

// dim -> tanh(hidden) -> classes. Layout: W1 (hidden x dim), b1 (hidden),
// W2 (classes x hidden), b2 (classes).
struct Mlp1 {
  std::size_t dim = 1;
  std::size_t hidden = 1;
  int classes = 2;
};

using ModelSpec = std::variant<Quadratic, SoftmaxLinear, Mlp1>;

inline std::size_t param_dim(const ModelSpec& spec) {
  struct {
    std::size_t operator()(const Quadratic& q) const { return q.c.dim(); }
    std::size_t operator()(const SoftmaxLinear& s) const {
      return static_cast<std::size_t>(s.classes) * (s.dim + 1);
    }
    std::size_t operator()(const Mlp1& m) const {
      const auto k = static_cast<std::size_t>(m.classes);
      return m.hidden * (m.dim + 1) + k * (m.hidden + 1);
    }
  } visitor;
  return std::visit(visitor, spec);
}

// Sizes of the per-layer parameter blocks, in layout order. A quadratic or a
// linear model is one block; the MLP has one block per layer (weights + bias).
inline std::vector<std::size_t> parameter_blocks(const ModelSpec& spec) {
  if (const auto* m = std::get_if<Mlp1>(&spec))
    return {m->hidden * (m->dim + 1), static_cast<std::size_t>(m->classes) * (m->hidden + 1)};
  return {param_dim(spec)};
}

// Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer, biases too.
// Quadratics start at the origin.
inline ParamVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  ParamVector theta(param_dim(spec));
  Rng rng(seed, tag::kInit);
  auto fill = [&](std::size_t from, std::size_t count, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = from; i < from + count; ++i) theta[i] = rng.uniform(-bound, bound);
  };
  if (const auto* s = std::get_if<SoftmaxLinear>(&spec)) {
    fill(0, theta.dim(), s->dim);
  } else if (const auto* m = std::get_if<Mlp1>(&spec)) {
    const std::size_t first = m->hidden * (m->dim + 1);
    fill(0, first, m->dim);
    fill(first, theta.dim() - first, m->hidden);
  }
  return theta;
}

// Row indices into the objective's dataset.
struct Batch {
  std::vector<std::size_t> indices;
};

// A client's differentiable loss over its shard of a dataset.
class Objective {
 public:
  Objective(Quadratic q) : spec_(std::move(q)), shard_{0} {
    require(std::get<Quadratic>(spec_).A.rows() == std::get<Quadratic>(spec_).c.dim() &&
                std::get<Quadratic>(spec_).A.cols() == std::get<Quadratic>(spec_).c.dim(),
            "Quadratic: A must be d x d with d = dim(c)");
  }

  Objective(ModelSpec spec, std::shared_ptr<const Dataset> data, std::vector<std::size_t> shard)
      : spec_(std::move(spec)), data_(std::move(data)), shard_(std::move(shard)) {
    if (std::holds_alternative<Quadratic>(spec_)) {
      if (shard_.empty()) shard_ = {0};
      return;
    }
    require(data_ != nullptr, "classification objective requires a dataset");
    const auto [dim, classes] = feature_shape();
    require(data_->dim == dim, "model input dimension does not match dataset");
    require(data_->classes <= classes, "dataset has more classes than the model");
    for (std::size_t i : shard_) require(i < data_->size(), "shard index out of range");
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  const Dataset* data() const noexcept { return data_.get(); }
  std::span<const std::size_t> shard() const noexcept { return shard_; }
  std::size_t dim() const { return param_dim(spec_); }
  bool is_quadratic() const noexcept { return std::holds_alternative<Quadratic>(spec_); }

  Batch full_batch() const { return Batch{shard_}; }

  // Loss and, if `grad` is non-null, its gradient (overwritten).
  double evaluate(const ParamVector& theta, const Batch& batch, ParamVector* grad) const {
    require(theta.dim() == dim(), "parameter dimension does not match objective");
    require(!batch.indices.empty(), "empty batch");
    if (grad) *grad = ParamVector(theta.dim());
    return std::visit(
        [&](const auto& m) -> double { return eval(m, theta, batch, grad); }, spec_);
  }

 private:
  std::pair<std::size_t, int> feature_shape() const {
    if (const auto* s = std::get_if<SoftmaxLinear>(&spec_)) return {s->dim, s->classes};
    const auto& m = std::get<Mlp1>(spec_);
    return {m.dim, m.classes};
  }

  void check_rows(const Batch& batch) const {
    for (std::size_t i : batch.indices) require(i < data_->size(), "batch index out of range");
  }

  double eval(const Quadratic& q, const ParamVector& theta, const Batch&, ParamVector* grad) const {
    const ParamVector r = theta - q.c;
    ParamVector ar = q.A * r;
    const double loss = 0.5 * r.dot(ar);
    if (grad) *grad = std::move(ar);
    return loss;
  }

  // Stable cross-entropy: returns -log softmax(z)[y] and overwrites z with p - onehot(y).
  static double cross_entropy(std::span<double> z, int y) {
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double& v : z) {
      v = std::exp(v - mx);
      sum += v;
    }
    const double zy = z[static_cast<std::size_t>(y)];
    const double loss = std::log(sum) - std::log(zy);
    for (double& v : z) v /= sum;
    z[static_cast<std::size_t>(y)] -= 1.0;
    return loss;
  }

  double eval(const SoftmaxLinear& s, const ParamVector& theta, const Batch& batch,
              ParamVector* grad) const {
    check_rows(batch);
    const auto k = static_cast<std::size_t>(s.classes);
    const std::size_t d = s.dim;
    const double* w = theta.values().data();
    const double* b = w + k * d;
    std::vector<double> z(k);
    double total = 0.0;
    for (std::size_t idx : batch.indices) {
      const auto x = data_->row(idx);
      for (std::size_t c = 0; c < k; ++c) {
        double a = b[c];
        for (std::size_t j = 0; j < d; ++j) a += w[c * d + j] * x[j];
        z[c] = a;
      }
      total += cross_entropy(z, data_->labels[idx]);
      if (grad) {
        double* g = grad->values().data();
        for (std::size_t c = 0; c < k; ++c) {
          for (std::size_t j = 0; j < d; ++j) g[c * d + j] += z[c] * x[j];
          g[k * d + c] += z[c];
        }
      }
    }
    const double inv = 1.0 / static_cast<double>(batch.indices.size());
    if (grad) *grad *= inv;
    return total * inv;
  }

  double eval(const Mlp1& m, const ParamVector& theta, const Batch& batch, ParamVector* grad) const {
    check_rows(batch);
    const std::size_t d = m.dim, h = m.hidden, k = static_cast<std::size_t>(m.classes);
    const double* w1 = theta.values().data();
    const double* b1 = w1 + h * d;
    const double* w2 = b1 + h;
    const double* b2 = w2 + k * h;
    std::vector<double> act(h), z(k), dact(h);
    double total = 0.0;
    for (std::size_t idx : batch.indices) {
      const auto x = data_->row(idx);
      for (std::size_t u = 0; u < h; ++u) {
        double a = b1[u];
        for (std::size_t j = 0; j < d; ++j) a += w1[u * d + j] * x[j];
        act[u] = std::tanh(a);
      }
      for (std::size_t c = 0; c < k; ++c) {
        double a = b2[c];
        for (std::size_t u = 0; u < h; ++u) a += w2[c * h + u] * act[u];
        z[c] = a;
      }
      total += cross_entropy(z, data_->labels[idx]);
      if (!grad) continue;
      double* gw1 = grad->values().data();
      double* gb1 = gw1 + h * d;
      double* gw2 = gb1 + h;
      double* gb2 = gw2 + k * h;
      std::fill(dact.begin(), dact.end(), 0.0);
      for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t u = 0; u < h; ++u) {
          gw2[c * h + u] += z[c] * act[u];
          dact[u] += w2[c * h + u] * z[c];
        }
        gb2[c] += z[c];
      }
      for (std::size_t u = 0; u < h; ++u) {
        const double da = dact[u] * (1.0 - act[u] * act[u]);
        for (std::size_t j = 0; j < d; ++j) gw1[u * d + j] += da * x[j];
        gb1[u] += da;
      }
    }
    const double inv = 1.0 / static_cast<double>(batch.indices.size());
    if (grad) *grad *= inv;
    return total * inv;
  }

  ModelSpec spec_;
  std::shared_ptr<const Dataset> data_;
  std::vector<std::size_t> shard_;
};

inline double eval_loss(const Objective& obj, const ParamVector& theta, const Batch& batch) {
  return obj.evaluate(theta, batch, nullptr);
}

inline ParamVector eval_grad(const Objective& obj, const ParamVector& theta, const Batch& batch) {
  ParamVector g;
  obj.evaluate(theta, batch, &g);
  return g;
}

// Max over coordinates of |analytic - central difference| / max(|analytic|, 1e-8).
inline double grad_check(const Objective& obj, const ParamVector& theta, const Batch& batch, double h) {
  require(h > 0.0, "grad_check: step must be positive");
  const ParamVector analytic = eval_grad(obj, theta, batch);
  double worst = 0.0;
  ParamVector probe = theta;
  for (std::size_t j = 0; j < theta.dim(); ++j) {
    probe[j] = theta[j] + h;
    const double fp = eval_loss(obj, probe, batch);
    probe[j] = theta[j] - h;
    const double fm = eval_loss(obj, probe, batch);
    probe[j] = theta[j];
    const double fd = (fp - fm) / (2.0 * h);
    const double rel = std::abs(analytic[j] - fd) / std::max(std::abs(analytic[j]), 1e-8);
    worst = std::max(worst, rel);
  }
  return worst;
}

// Minimizer of the average of quadratics: (sum A_i)^-1 (sum A_i c_i).
inline ParamVector quadratic_ensemble_minimizer(std::span<const Quadratic> ensemble) {
  require(!ensemble.empty(), "quadratic_ensemble_minimizer: empty ensemble");
  const std::size_t d = ensemble.front().c.dim();
  Matrix sum_a(d, d);
  ParamVector sum_ac(d);
  for (const auto& q : ensemble) {
    require(q.c.dim() == d && q.A.rows() == d && q.A.cols() == d,
            "quadratic_ensemble_minimizer: dimension mismatch");
    cholesky(q.A);  // SPD check
    sum_a += q.A;
    sum_ac += q.A * q.c;
  }
  return cholesky_solve(cholesky(sum_a), sum_ac);
}

// Random SPD quadratics: A_i = Q diag(eig) Q^T with eigenvalues uniform in
// [min_eig, max_eig] and a random orthogonal Q; c_i ~ center_scale * N(0, I).
inline std::vector<Quadratic> random_quadratic_ensemble(int clients, std::size_t d, double min_eig,
                                                        double max_eig, double center_scale,
                                                        std::uint64_t seed) {
  require(clients >= 1 && d >= 1, "random_quadratic_ensemble: bad shape");
  require(min_eig > 0.0 && max_eig >= min_eig, "random_quadratic_ensemble: bad spectrum");
  std::vector<Quadratic> out;
  for (int i = 0; i < clients; ++i) {
    Rng rng(seed, tag::kQuadratic, static_cast<std::uint64_t>(i));
    // Gram-Schmidt on a Gaussian matrix.
    std::vector<ParamVector> q;
    while (q.size() < d) {
      ParamVector v(d);
      for (double& x : v) x = rng.normal();
      for (const auto& u : q) v.axpy(-v.dot(u), u);
      const double n = v.norm();
      if (n < 1e-8) continue;
      q.push_back((1.0 / n) * v);
    }
    std::vector<double> eig(d);
    for (double& e : eig) e = rng.uniform(min_eig, max_eig);
    Matrix a(d, d);
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = r; c < d; ++c) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += q[k][r] * eig[k] * q[k][c];
        a(r, c) = s;
        a(c, r) = s;
      }
    ParamVector center(d);
    for (double& x : center) x = center_scale * rng.normal();
    out.push_back({std::move(a), std::move(center)});
  }
  return out;
}

// Fraction of rows of `ds` whose argmax logit equals the label.
inline double accuracy(const ModelSpec& spec, const ParamVector& theta, const Dataset& ds) {
  if (std::holds_alternative<Quadratic>(spec) || ds.size() == 0) return 0.0;
  std::size_t correct = 0;
  std::vector<double> z;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto x = ds.row(i);
    if (const auto* s = std::get_if<SoftmaxLinear>(&spec)) {
      const auto k = static_cast<std::size_t>(s->classes);
      z.assign(k, 0.0);
      for (std::size_t c = 0; c < k; ++c) {
        double a = theta[k * s->dim + c];
        for (std::size_t j = 0; j < s->dim; ++j) a += theta[c * s->dim + j] * x[j];
        z[c] = a;
      }
    } else {
      const auto& m = std::get<Mlp1>(spec);
      const std::size_t d = m.dim, h = m.hidden, k = static_cast<std::size_t>(m.classes);
      const double* w1 = theta.values().data();
      const double* b1 = w1 + h * d;
      const double* w2 = b1 + h;
      const double* b2 = w2 + k * h;
      std::vector<double> act(h);
      for (std::size_t u = 0; u < h; ++u) {
        double a = b1[u];
        for (std::size_t j = 0; j < d; ++j) a += w1[u * d + j] * x[j];
        act[u] = std::tanh(a);
      }
      z.assign(k, 0.0);
      for (std::size_t c = 0; c < k; ++c) {
        double a = b2[c];
        for (std::size_t u = 0; u < h; ++u) a += w2[c * h + u] * act[u];
        z[c] = a;
      }
    }
    const auto pred = std::max_element(z.begin(), z.end()) - z.begin();
    if (pred == ds.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

}  // namespace fnsm

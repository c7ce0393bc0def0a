#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "fnsm/data.hpp"
#include "fnsm/errors.hpp"
#include "fnsm/objective.hpp"
#include "fnsm/param_vector.hpp"
#include "fnsm/rng.hpp"

namespace fnsm {

// Mean of squared distances from each local model to the aggregated model.
inline double flatness_distance(std::span<const ParamVector> locals, const ParamVector& global) {
  require(!locals.empty(), "flatness_distance: no local models");
  double sum = 0.0;
  for (const auto& l : locals) {
    require(l.dim() == global.dim(), "flatness_distance: dimension mismatch");
    double s = 0.0;
    for (std::size_t j = 0; j < l.dim(); ++j) {
      const double d = l[j] - global[j];
      s += d * d;
    }
    sum += s;
  }
  return sum / static_cast<double>(locals.size());
}

// Global objective F = mean of the client objectives' full-shard losses.
// Clients without data do not contribute. Writes grad F when `grad` is set.
inline double global_loss(std::span<const Objective> objectives, const ParamVector& theta,
                          ParamVector* grad = nullptr) {
  double total = 0.0;
  int counted = 0;
  if (grad) *grad = ParamVector(theta.dim());
  ParamVector g;
  for (const auto& obj : objectives) {
    if (obj.shard().empty()) continue;
    total += obj.evaluate(theta, obj.full_batch(), grad ? &g : nullptr);
    if (grad) *grad += g;
    ++counted;
  }
  require(counted > 0, "global_loss: no client has data");
  const double inv = 1.0 / counted;
  if (grad) *grad *= inv;
  return total * inv;
}

// One-ascent-step proxy of the worst-case loss increase within radius rho:
// F(theta + rho * gradF / |gradF|) - F(theta).
inline double global_sharpness(std::span<const Objective> objectives, const ParamVector& theta,
                               double rho) {
  require(rho > 0.0, "global_sharpness: rho must be > 0");
  ParamVector g;
  const double base = global_loss(objectives, theta, &g);
  const double n = g.norm();
  if (n < 1e-12) return 0.0;
  ParamVector probe = theta;
  probe.axpy(rho / n, g);
  return global_loss(objectives, probe) - base;
}

// |grad F(theta + lambda * m)|.
inline double extrapolated_grad_norm(std::span<const Objective> objectives, const ParamVector& theta,
                                     const ParamVector& m, double lambda) {
  require(theta.dim() == m.dim(), "extrapolated_grad_norm: dimension mismatch");
  ParamVector point = theta;
  if (lambda != 0.0) point.axpy(lambda, m);
  ParamVector g;
  global_loss(objectives, point, &g);
  return g.norm();
}

// --- Loss surface ------------------------------------------------------------

struct SurfaceGrid {
  ParamVector center;
  ParamVector u;
  ParamVector v;
  double range = 1.0;
  int res = 3;
  std::vector<double> values;  // row-major res x res; row a follows u, column b follows v

  double at(int a, int b) const {
    return values[static_cast<std::size_t>(a) * static_cast<std::size_t>(res) + static_cast<std::size_t>(b)];
  }
  double coord(int i) const { return -range + 2.0 * range * static_cast<double>(i) / (res - 1); }
};

// Rescales each block of `dir` to the norm of the matching block of `theta`.
// Blocks where theta (or the direction) has norm below 1e-12 are left alone.
inline void filter_normalize(ParamVector& dir, const ParamVector& theta, std::span<const std::size_t> blocks) {
  std::size_t from = 0;
  for (std::size_t len : blocks) {
    double tn = 0.0, dn = 0.0;
    for (std::size_t j = from; j < from + len; ++j) {
      tn += theta[j] * theta[j];
      dn += dir[j] * dir[j];
    }
    tn = std::sqrt(tn);
    dn = std::sqrt(dn);
    if (tn >= 1e-12 && dn >= 1e-12)
      for (std::size_t j = from; j < from + len; ++j) dir[j] *= tn / dn;
    from += len;
  }
}

// Evaluates F on theta + x u + y v over a res x res grid in [-range, range]^2,
// with the given directions used as-is.
inline SurfaceGrid loss_surface_with_directions(std::span<const Objective> objectives,
                                                const ParamVector& theta, ParamVector u, ParamVector v,
                                                double range, int res, int threads = 1) {
  require(res >= 3 && res % 2 == 1, "surface resolution must be odd and >= 3");
  require(range > 0.0, "surface range must be > 0");
  require(u.dim() == theta.dim() && v.dim() == theta.dim(), "surface direction dimension mismatch");
  SurfaceGrid grid;
  grid.center = theta;
  grid.u = std::move(u);
  grid.v = std::move(v);
  grid.range = range;
  grid.res = res;
  grid.values.assign(static_cast<std::size_t>(res) * static_cast<std::size_t>(res), 0.0);

  const std::size_t cells = grid.values.size();
  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t cell = first; cell < cells; cell += stride) {
      const int a = static_cast<int>(cell / static_cast<std::size_t>(res));
      const int b = static_cast<int>(cell % static_cast<std::size_t>(res));
      const double x = grid.coord(a), y = grid.coord(b);
      ParamVector p = theta;
      if (x != 0.0) p.axpy(x, grid.u);
      if (y != 0.0) p.axpy(y, grid.v);
      grid.values[cell] = global_loss(objectives, p);
    }
  };
  const auto n = static_cast<std::size_t>(std::max(1, threads));
  if (n == 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(work, t, n);
  }
  return grid;
}

// Random 2-D slice: u, v ~ N(0, I) from the seed, v orthogonalized against u,
// then both filter-normalized per parameter block.
inline SurfaceGrid loss_surface_slice(std::span<const Objective> objectives, const ParamVector& theta,
                                      std::uint64_t seed, double range, int res, int threads = 1) {
  require(!objectives.empty(), "loss_surface_slice: no objectives");
  require(res >= 3 && res % 2 == 1, "surface resolution must be odd and >= 3");
  Rng rng(seed, tag::kSurface);
  ParamVector u(theta.dim()), v(theta.dim());
  for (double& x : u) x = rng.normal();
  for (double& x : v) x = rng.normal();
  const double uu = u.squared_norm();
  if (uu > 0.0) v.axpy(-v.dot(u) / uu, u);
  const auto blocks = parameter_blocks(objectives.front().spec());
  filter_normalize(u, theta, blocks);
  filter_normalize(v, theta, blocks);
  return loss_surface_with_directions(objectives, theta, std::move(u), std::move(v), range, res, threads);
}

// Text format: "# fnsm-surface v1 res=<g> range=<r>[ extra tokens]" then g
// lines of g space-separated values.
inline void write_surface(std::ostream& os, const SurfaceGrid& grid, const std::string& extra = {}) {
  os << "# fnsm-surface v1 res=" << grid.res << " range=" << format_double(grid.range);
  if (!extra.empty()) os << ' ' << extra;
  os << '\n';
  for (int a = 0; a < grid.res; ++a) {
    for (int b = 0; b < grid.res; ++b) {
      if (b) os << ' ';
      os << format_double(grid.at(a, b));
    }
    os << '\n';
  }
}

// Parses a surface file; only range, res and values are recovered.
inline SurfaceGrid read_surface(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("empty surface file", 1);
  std::istringstream head(line);
  std::string hash, magic, version, tok;
  head >> hash >> magic >> version;
  if (hash != "#" || magic != "fnsm-surface" || version != "v1")
    throw ParseError("not an fnsm-surface v1 file", 1);
  SurfaceGrid grid;
  grid.res = 0;
  bool have_range = false;
  while (head >> tok) {
    try {
      if (tok.rfind("res=", 0) == 0) grid.res = std::stoi(tok.substr(4));
      else if (tok.rfind("range=", 0) == 0) {
        grid.range = std::stod(tok.substr(6));
        have_range = true;
      }
    } catch (const std::exception&) {
      throw ParseError("bad header token '" + tok + "'", 1);
    }
  }
  if (grid.res < 1 || !have_range) throw ParseError("header missing res or range", 1);
  for (int a = 0; a < grid.res; ++a) {
    if (!std::getline(is, line)) throw ParseError("missing grid row", static_cast<std::size_t>(a) + 2);
    std::istringstream row(line);
    int count = 0;
    while (row >> tok) {
      double v = 0.0;
      const auto r = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (r.ec != std::errc{} || r.ptr != tok.data() + tok.size())
        throw ParseError("non-numeric value '" + tok + "'", static_cast<std::size_t>(a) + 2);
      grid.values.push_back(v);
      ++count;
    }
    if (count != grid.res)
      throw ParseError("expected " + std::to_string(grid.res) + " values", static_cast<std::size_t>(a) + 2);
  }
  return grid;
}

}  // namespace fnsm

#pragma once

#include <cstdint>
#include <optional>
#include <variant>
#include <vector>

#include "fnsm/errors.hpp"
#include "fnsm/objective.hpp"
#include "fnsm/param_vector.hpp"
#include "fnsm/rng.hpp"

namespace fnsm {

inline constexpr double kZeroNorm = 1e-12;

namespace rule {
struct Sgd {};
struct Sam {
  double rho = 0.1;
};
// Momentum-directed SAM with optional look-ahead at theta + lambda * m.
struct Nsam {
  double rho = 0.1;
  double lambda = 0.85;
  bool extrapolate = true;
};
// SAM gradient blended with the server pseudo-gradient (heavy ball).
struct MoSam {
  double rho = 0.1;
  double lambda = 0.85;
};
// SAM whose ascent direction is the drift of the global model since the
// client last participated.
struct Lesam {
  double rho = 0.1;
};
}  // namespace rule

using LocalRule = std::variant<rule::Sgd, rule::Sam, rule::Nsam, rule::MoSam, rule::Lesam>;

inline void validate(const LocalRule& r) {
  std::visit(
      [](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (!std::is_same_v<T, rule::Sgd>) require(v.rho >= 0.0, "rho must be >= 0");
        if constexpr (std::is_same_v<T, rule::Nsam> || std::is_same_v<T, rule::MoSam>)
          require(v.lambda >= 0.0 && v.lambda < 1.0, "lambda must be in [0, 1)");
      },
      r);
}

// What the server sends each sampled client at the start of a round.
struct BroadcastState {
  ParamVector theta;       // global model before this round
  ParamVector momentum;    // global momentum before this round
  ParamVector last_delta;  // previous round's aggregated delta
  double eta = 0.1;
  int local_steps = 1;
  int round = 1;
};

struct ClientState {
  int id = 0;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::optional<ParamVector> old_global;  // last global model received (LESAM only)
};

struct LocalResult {
  ParamVector delta;
  ParamVector final_theta;
  int steps_taken = 0;
};

// rho * g / |g|, or zero when |g| < 1e-12.
inline ParamVector sam_perturbation(const ParamVector& g, double rho) {
  require(rho >= 0.0, "sam_perturbation: rho must be >= 0");
  const double n = g.norm();
  if (n < kZeroNorm) return ParamVector(g.dim());
  return (rho / n) * g;
}

// rho * (-m) / |m|, or zero when |m| < 1e-12.
inline ParamVector nsam_perturbation(const ParamVector& m, double rho) {
  require(rho >= 0.0, "nsam_perturbation: rho must be >= 0");
  const double n = m.norm();
  if (n < kZeroNorm) return ParamVector(m.dim());
  return (-rho / n) * m;
}

// Minibatches drawn without replacement; reshuffled at each epoch boundary.
// The final short batch of an epoch is kept.
class BatchStream {
 public:
  BatchStream(std::span<const std::size_t> shard, std::size_t batch_size, std::uint64_t seed,
              int client, int round)
      : rows_(shard.begin(), shard.end()),
        batch_size_(batch_size),
        rng_(seed, tag::kBatch, static_cast<std::uint64_t>(client), static_cast<std::uint64_t>(round)) {
    require(batch_size >= 1, "batch size must be >= 1");
    pos_ = rows_.size();
  }

  Batch next() {
    if (pos_ >= rows_.size()) {
      rng_.shuffle(std::span<std::size_t>(rows_));
      pos_ = 0;
    }
    const std::size_t end = std::min(rows_.size(), pos_ + batch_size_);
    Batch b{{rows_.begin() + static_cast<std::ptrdiff_t>(pos_), rows_.begin() + static_cast<std::ptrdiff_t>(end)}};
    pos_ = end;
    return b;
  }

 private:
  std::vector<std::size_t> rows_;
  std::size_t batch_size_;
  std::size_t pos_;
  Rng rng_;
};

namespace detail {

// probe = theta + offset, skipping the add when there is no offset so that
// zero-radius rules reproduce plain SGD bit for bit.
inline const ParamVector& probe_point(const ParamVector& theta, const std::optional<ParamVector>& offset,
                                      ParamVector& scratch) {
  if (!offset) return theta;
  scratch = theta;
  scratch += *offset;
  return scratch;
}

}  // namespace detail

// Runs K local steps from bs.theta on the client's shard. Returns nullopt when
// the shard is empty (the client is skipped this round). Throws DivergenceError
// if the iterate becomes non-finite.
inline std::optional<LocalResult> local_round(const LocalRule& rule, const BroadcastState& bs,
                                              ClientState& client, const Objective& obj) {
  validate(rule);
  require(bs.theta.dim() == obj.dim() && bs.momentum.dim() == obj.dim(),
          "broadcast dimension does not match objective");
  require(bs.local_steps >= 1 && bs.eta > 0.0, "local_round: need K >= 1 and eta > 0");
  if (obj.shard().empty()) return std::nullopt;

  BatchStream stream(obj.shard(), client.batch_size, client.seed, client.id, bs.round);
  ParamVector theta = bs.theta;
  ParamVector scratch;

  // Round-constant probe offset for rules that do not depend on the local gradient.
  std::optional<ParamVector> fixed_offset;
  std::optional<ParamVector> pseudo_grad;
  double blend = 1.0;
  double rho = 0.0;

  if (const auto* r = std::get_if<rule::Nsam>(&rule)) {
    if (r->extrapolate && r->lambda != 0.0) fixed_offset = r->lambda * bs.momentum;
    if (r->rho != 0.0) {
      const ParamVector delta = nsam_perturbation(bs.momentum, r->rho);
      if (fixed_offset) *fixed_offset += delta;
      else fixed_offset = delta;
    }
  } else if (const auto* r = std::get_if<rule::Lesam>(&rule)) {
    if (r->rho != 0.0 && client.old_global) {
      require(client.old_global->dim() == bs.theta.dim(), "stale global dimension mismatch");
      fixed_offset = sam_perturbation(*client.old_global - bs.theta, r->rho);
    }
  } else if (const auto* r = std::get_if<rule::Sam>(&rule)) {
    rho = r->rho;
  } else if (const auto* r = std::get_if<rule::MoSam>(&rule)) {
    rho = r->rho;
    blend = r->lambda;
    require(bs.last_delta.dim() == obj.dim(), "broadcast last_delta dimension mismatch");
    pseudo_grad = (-1.0 / (bs.eta * bs.local_steps)) * bs.last_delta;
  }

  for (int step = 0; step < bs.local_steps; ++step) {
    const Batch batch = stream.next();
    ParamVector g;
    if (rho != 0.0) {
      const ParamVector ascent = sam_perturbation(eval_grad(obj, theta, batch), rho);
      g = eval_grad(obj, theta + ascent, batch);
    } else {
      g = eval_grad(obj, detail::probe_point(theta, fixed_offset, scratch), batch);
    }
    if (pseudo_grad) {
      g *= blend;
      g.axpy(1.0 - blend, *pseudo_grad);
    }
    theta.axpy(-bs.eta, g);
    if (!theta.all_finite()) throw DivergenceError(bs.round, client.id, step);
  }

  if (std::holds_alternative<rule::Lesam>(rule)) client.old_global = bs.theta;

  LocalResult out;
  // final_theta is rebuilt from the delta, exactly as the server will see it.
  out.delta = theta - bs.theta;
  out.final_theta = bs.theta + out.delta;
  out.steps_taken = bs.local_steps;
  return out;
}

}  // namespace fnsm

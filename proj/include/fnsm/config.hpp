#pragma once

// Experiment files: flat `key = value` lines, `#` starts a comment, keys are
// dotted (`fed.rho = 0.1`). Unknown keys are rejected.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fnsm/errors.hpp"
#include "fnsm/federation.hpp"

namespace fnsm {

inline constexpr std::string_view kToolVersion = "1.0.0";

enum class DataKind { Synthetic, Csv, Quadratic };
enum class ModelKind { Mlp, Softmax, Quadratic };

struct DataSpec {
  DataKind kind = DataKind::Synthetic;
  int classes = 10;
  std::size_t dim = 10;
  std::size_t n = 2000;
  double spread = 1.0;
  std::string path;
  double test_fraction = 0.2;
  double alpha = 0.6;
  std::optional<std::uint64_t> seed;  // defaults to the run seed
  double min_eig = 0.02;
  double max_eig = 1.0;
  double center_scale = 1.0;
};

struct ExperimentFile {
  FedConfig fed;
  DataSpec data;
  ModelKind model = ModelKind::Mlp;
  std::size_t hidden = 16;
  std::vector<std::uint64_t> seeds{1};
  std::string out = "out";
  int checkpoint_every = 0;
  std::map<std::string, std::string> resolved;  // every key with its effective value
};

namespace detail {

struct RawValue {
  std::string value;
  std::size_t line = 0;  // 0 for command-line overrides
};

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

class Reader {
 public:
  explicit Reader(std::map<std::string, RawValue> raw) : raw_(std::move(raw)) {}

  template <typename T>
  void get(const std::string& key, T& out) {
    auto it = raw_.find(key);
    if (it != raw_.end()) {
      if (!parse(it->second.value, out)) fail(key, it->second, "invalid value '" + it->second.value + "'");
      used_.push_back(key);
    }
    resolved_[key] = render(out);
  }

  void get_seed_opt(const std::string& key, std::optional<std::uint64_t>& out) {
    auto it = raw_.find(key);
    if (it != raw_.end()) {
      std::uint64_t v = 0;
      if (!parse(it->second.value, v)) fail(key, it->second, "invalid value '" + it->second.value + "'");
      out = v;
      used_.push_back(key);
    }
    resolved_[key] = out ? std::to_string(*out) : "";
  }

  template <typename Enum>
  void get_enum(const std::string& key, Enum& out, std::initializer_list<std::pair<std::string_view, Enum>> names) {
    auto it = raw_.find(key);
    if (it != raw_.end()) {
      bool ok = false;
      for (const auto& [n, e] : names)
        if (n == it->second.value) {
          out = e;
          ok = true;
        }
      if (!ok) fail(key, it->second, "unknown value '" + it->second.value + "'");
      used_.push_back(key);
    }
    for (const auto& [n, e] : names)
      if (e == out) resolved_[key] = std::string(n);
  }

  void reject_unknown() const {
    for (const auto& [k, v] : raw_)
      if (std::find(used_.begin(), used_.end(), k) == used_.end()) fail(k, v, "unknown key");
  }

  // Line of a key for diagnostics, 0 when absent or overridden.
  std::size_t line_of(const std::string& key) const {
    auto it = raw_.find(key);
    return it == raw_.end() ? 0 : it->second.line;
  }

  std::map<std::string, std::string> take_resolved() { return std::move(resolved_); }

 private:
  [[noreturn]] static void fail(const std::string& key, const RawValue& v, const std::string& msg) {
    throw ParseError(key + ": " + msg, v.line);
  }

  static bool parse(const std::string& s, std::string& out) {
    out = s;
    return true;
  }
  static bool parse(const std::string& s, bool& out) {
    if (s == "true" || s == "1" || s == "yes") out = true;
    else if (s == "false" || s == "0" || s == "no") out = false;
    else return false;
    return true;
  }
  template <typename T>
    requires std::is_arithmetic_v<T>
  static bool parse(const std::string& s, T& out) {
    T v{};
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) return false;
    out = v;
    return true;
  }
  static bool parse(const std::string& s, std::vector<std::uint64_t>& out) {
    std::vector<std::uint64_t> v;
    std::string_view rest(s);
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      const std::string cell = trim(rest.substr(0, comma));
      std::uint64_t x = 0;
      if (!parse(cell, x)) return false;
      v.push_back(x);
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (v.empty()) return false;
    out = std::move(v);
    return true;
  }

  static std::string render(const std::string& s) { return s; }
  static std::string render(bool b) { return b ? "true" : "false"; }
  static std::string render(double x) { return format_double(x); }
  template <typename T>
    requires std::is_integral_v<T>
  static std::string render(T x) { return std::to_string(x); }
  static std::string render(const std::vector<std::uint64_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  }

  std::map<std::string, RawValue> raw_;
  std::vector<std::string> used_;
  std::map<std::string, std::string> resolved_;
};

}  // namespace detail

// Splits "key=value"; used for both file lines and --set overrides.
inline std::pair<std::string, std::string> split_assignment(std::string_view text, std::size_t line) {
  const auto eq = text.find('=');
  if (eq == std::string_view::npos) throw ParseError("expected 'key = value'", line);
  std::string key = detail::trim(text.substr(0, eq));
  std::string value = detail::trim(text.substr(eq + 1));
  if (key.empty()) throw ParseError("empty key", line);
  return {std::move(key), std::move(value)};
}

// Parses, applies overrides, fills defaults and validates. Syntax problems
// throw ParseError with the line; constraint violations throw ParseError
// naming the key.
inline ExperimentFile parse_experiment(std::istream& is, const std::vector<std::string>& overrides = {}) {
  std::map<std::string, detail::RawValue> raw;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (detail::trim(line).empty()) continue;
    auto [k, v] = split_assignment(line, lineno);
    if (raw.contains(k)) throw ParseError(k + ": duplicate key", lineno);
    raw[k] = {v, lineno};
  }
  for (const auto& o : overrides) {
    auto [k, v] = split_assignment(o, 0);
    raw[k] = {v, 0};
  }

  ExperimentFile e;
  detail::Reader r(std::move(raw));
  r.get_enum("fed.algorithm", e.fed.algorithm,
             {{"fedavg", Algorithm::FedAvg},
              {"fedavgm", Algorithm::FedAvgM},
              {"fedsam", Algorithm::FedSam},
              {"mofedsam", Algorithm::MoFedSam},
              {"fedlesam", Algorithm::FedLesam},
              {"fednsam", Algorithm::FedNsam}});
  r.get("fed.clients", e.fed.n_clients);
  r.get("fed.participation", e.fed.participation);
  r.get("fed.rounds", e.fed.rounds);
  r.get("fed.local_steps", e.fed.local_steps);
  r.get("fed.batch", e.fed.batch);
  r.get("fed.eta0", e.fed.eta0);
  r.get("fed.eta_decay", e.fed.eta_decay);
  r.get("fed.rho", e.fed.rho);
  r.get("fed.lambda", e.fed.lambda);
  r.get("fed.extrapolate", e.fed.extrapolate);
  r.get("fed.eval_every", e.fed.eval_every);
  r.get("fed.weighted_aggregation", e.fed.weighted_aggregation);
  r.get("metrics.full_flatness", e.fed.full_flatness);
  r.get("metrics.sharpness_rho", e.fed.sharpness_rho);
  r.get("metrics.timing", e.fed.timing);

  r.get_enum("data.kind", e.data.kind,
             {{"synthetic", DataKind::Synthetic}, {"csv", DataKind::Csv}, {"quadratic", DataKind::Quadratic}});
  r.get("data.classes", e.data.classes);
  r.get("data.dim", e.data.dim);
  r.get("data.n", e.data.n);
  r.get("data.spread", e.data.spread);
  r.get("data.path", e.data.path);
  r.get("data.test_fraction", e.data.test_fraction);
  r.get("data.alpha", e.data.alpha);
  r.get_seed_opt("data.seed", e.data.seed);
  r.get("data.min_eig", e.data.min_eig);
  r.get("data.max_eig", e.data.max_eig);
  r.get("data.center_scale", e.data.center_scale);

  r.get_enum("model.kind", e.model,
             {{"mlp", ModelKind::Mlp}, {"softmax", ModelKind::Softmax}, {"quadratic", ModelKind::Quadratic}});
  r.get("model.hidden", e.hidden);

  r.get("run.seeds", e.seeds);
  r.get("run.out", e.out);
  r.get("run.checkpoint_every", e.checkpoint_every);
  r.get("run.threads", e.fed.threads);
  r.reject_unknown();

  auto check = [&](bool ok, const std::string& key, const std::string& what) {
    if (!ok) throw ParseError(key + ": " + what, r.line_of(key));
  };
  check(e.fed.n_clients >= 1, "fed.clients", "must be >= 1");
  check(e.fed.participation >= 1 && e.fed.participation <= e.fed.n_clients, "fed.participation",
        "violates 1 <= S <= N (S = " + std::to_string(e.fed.participation) +
            ", N = " + std::to_string(e.fed.n_clients) + ")");
  check(e.fed.rounds >= 1, "fed.rounds", "must be >= 1");
  check(e.fed.local_steps >= 1, "fed.local_steps", "must be >= 1");
  check(e.fed.batch >= 1, "fed.batch", "must be >= 1");
  check(e.fed.eta0 > 0.0, "fed.eta0", "must be > 0");
  check(e.fed.eta_decay > 0.0 && e.fed.eta_decay <= 1.0, "fed.eta_decay", "must be in (0, 1]");
  check(e.fed.rho >= 0.0, "fed.rho", "must be >= 0");
  check(e.fed.lambda >= 0.0 && e.fed.lambda < 1.0, "fed.lambda", "must be in [0, 1)");
  check(e.fed.eval_every >= 1, "fed.eval_every", "must be >= 1");
  check(e.fed.sharpness_rho > 0.0, "metrics.sharpness_rho", "must be > 0");
  check(e.fed.threads >= 1, "run.threads", "must be >= 1");
  check(e.data.alpha > 0.0, "data.alpha", "must be > 0");
  check(e.data.test_fraction >= 0.0 && e.data.test_fraction < 1.0, "data.test_fraction", "must be in [0, 1)");
  check(e.data.kind != DataKind::Csv || !e.data.path.empty(), "data.path", "required for data.kind = csv");
  check(e.data.dim >= 1, "data.dim", "must be >= 1");
  check(e.data.kind != DataKind::Synthetic || e.data.classes >= 2, "data.classes", "must be >= 2");
  check(e.data.kind != DataKind::Synthetic || e.data.n >= static_cast<std::size_t>(e.data.classes),
        "data.n", "must be >= data.classes");
  check(e.data.spread > 0.0, "data.spread", "must be > 0");
  check(e.data.min_eig > 0.0 && e.data.max_eig >= e.data.min_eig, "data.min_eig",
        "need 0 < data.min_eig <= data.max_eig");
  check(e.hidden >= 1, "model.hidden", "must be >= 1");
  check((e.data.kind == DataKind::Quadratic) == (e.model == ModelKind::Quadratic), "model.kind",
        "quadratic model goes with data.kind = quadratic and vice versa");
  check(e.checkpoint_every >= 0, "run.checkpoint_every", "must be >= 0");

  e.resolved = r.take_resolved();
  return e;
}

inline ExperimentFile load_experiment(const std::string& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open config " + path);
  return parse_experiment(is, overrides);
}

// FNV-1a over the canonical "key=value\n" listing (keys sorted) plus the seed.
inline std::string config_hash(const ExperimentFile& e, std::uint64_t seed) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto feed = [&](std::string_view s) {
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& [k, v] : e.resolved) {
    if (k == "run.threads" || k == "run.seeds" || k == "run.out") continue;  // do not affect results
    feed(k);
    feed("=");
    feed(v);
    feed("\n");
  }
  feed("seed=" + std::to_string(seed) + "\n");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace fnsm

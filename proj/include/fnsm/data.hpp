#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fnsm/errors.hpp"
#include "fnsm/rng.hpp"

namespace fnsm {

// Row-major feature matrix plus integer labels.
struct Dataset {
  std::size_t dim = 0;
  int classes = 0;
  std::vector<double> features;  // n * dim
  std::vector<int> labels;       // n

  std::size_t size() const noexcept { return labels.size(); }
  std::span<const double> row(std::size_t i) const noexcept {
    return {features.data() + i * dim, dim};
  }

  bool operator==(const Dataset&) const = default;
};

struct ClientShard {
  int owner_client = 0;
  std::vector<std::size_t> indices;  // ascending row indices into the dataset

  std::size_t size() const noexcept { return indices.size(); }
};

struct DirichletSpec {
  double alpha = 0.6;
  int n_clients = 1;
  std::uint64_t seed = 0;
};

// Isotropic Gaussian blobs, one per class. Class means are drawn from N(0, I);
// each point is mean + spread * N(0, I). Row i carries label i % classes.
inline Dataset synth_gaussian_mixture(int classes, std::size_t dim, std::size_t n, double spread,
                                      std::uint64_t seed) {
  require(classes >= 2, "synth_gaussian_mixture: classes must be >= 2");
  require(dim >= 1, "synth_gaussian_mixture: dim must be >= 1");
  require(n >= static_cast<std::size_t>(classes), "synth_gaussian_mixture: n must be >= classes");
  require(spread > 0.0 && std::isfinite(spread), "synth_gaussian_mixture: spread must be > 0");

  Rng rng(seed, tag::kSynth);
  std::vector<double> means(static_cast<std::size_t>(classes) * dim);
  for (double& m : means) m = rng.normal();

  Dataset ds;
  ds.dim = dim;
  ds.classes = classes;
  ds.features.resize(n * dim);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(classes));
    ds.labels[i] = label;
    for (std::size_t j = 0; j < dim; ++j)
      ds.features[i * dim + j] = means[static_cast<std::size_t>(label) * dim + j] + spread * rng.normal();
  }
  return ds;
}

inline Dataset subset(const Dataset& ds, std::span<const std::size_t> rows) {
  Dataset out;
  out.dim = ds.dim;
  out.classes = ds.classes;
  out.features.reserve(rows.size() * ds.dim);
  out.labels.reserve(rows.size());
  for (std::size_t r : rows) {
    auto row = ds.row(r);
    out.features.insert(out.features.end(), row.begin(), row.end());
    out.labels.push_back(ds.labels[r]);
  }
  return out;
}

// Seeded shuffle, then the first round(test_fraction * n) rows become the test set.
// Both halves keep their original relative order.
inline std::pair<Dataset, Dataset> train_test_split(const Dataset& ds, double test_fraction,
                                                    std::uint64_t seed) {
  require(test_fraction >= 0.0 && test_fraction < 1.0, "test_fraction must be in [0, 1)");
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed, tag::kSplit);
  rng.shuffle(std::span<std::size_t>(order));
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(ds.size())));
  std::vector<std::size_t> test(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  return {subset(ds, train), subset(ds, test)};
}

// Splits `total` items by proportions `p` (summing to ~1): floor of each quota,
// then the leftover units go to the largest fractional parts, ties to the
// lower index.
inline std::vector<std::size_t> largest_remainder(std::span<const double> p, std::size_t total) {
  const std::size_t k = p.size();
  std::vector<std::size_t> counts(k);
  std::vector<double> frac(k);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double q = p[i] * static_cast<double>(total);
    const double f = std::floor(q);
    counts[i] = static_cast<std::size_t>(f);
    frac[i] = q - f;
    assigned += counts[i];
  }
  // Rounding in the proportions can overshoot by a unit; trim smallest fractions.
  std::vector<std::size_t> order(k);
  for (std::size_t i = 0; i < k; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t j = 0; assigned < total; j = (j + 1) % k) {
    ++counts[order[j]];
    ++assigned;
  }
  for (std::size_t j = k; assigned > total;) {
    j = (j == 0 ? k : j) - 1;
    if (counts[order[j]] > 0) {
      --counts[order[j]];
      --assigned;
    }
  }
  return counts;
}

// Samples p ~ Dirichlet(alpha * 1_n) via normalized Gamma variates in log space.
inline std::vector<double> dirichlet_sample(Rng& rng, double alpha, int n) {
  std::vector<double> logs(static_cast<std::size_t>(n));
  for (double& l : logs) l = rng.log_gamma_variate(alpha);
  const double mx = *std::max_element(logs.begin(), logs.end());
  double sum = 0.0;
  std::vector<double> p(logs.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logs[i] - mx);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return p;
}

// Label-skewed split: for each class, proportions over clients are drawn from
// Dirichlet(alpha) and the class's (shuffled) rows are dealt out in those
// proportions using largest-remainder rounding.
inline std::vector<ClientShard> dirichlet_partition(const Dataset& ds, const DirichletSpec& spec) {
  require(spec.alpha > 0.0 && std::isfinite(spec.alpha), "dirichlet_partition: alpha must be > 0");
  require(spec.n_clients >= 1, "dirichlet_partition: n_clients must be >= 1");
  require(static_cast<std::size_t>(spec.n_clients) <= ds.size(),
          "dirichlet_partition: more clients than samples");

  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.classes));
  for (std::size_t i = 0; i < ds.size(); ++i)
    by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  std::vector<ClientShard> shards(static_cast<std::size_t>(spec.n_clients));
  for (int c = 0; c < spec.n_clients; ++c) shards[static_cast<std::size_t>(c)].owner_client = c;

  Rng rng(spec.seed, tag::kPartition);
  for (auto& rows : by_class) {
    const auto p = dirichlet_sample(rng, spec.alpha, spec.n_clients);
    rng.shuffle(std::span<std::size_t>(rows));
    const auto counts = largest_remainder(p, rows.size());
    std::size_t pos = 0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
      auto& dst = shards[c].indices;
      dst.insert(dst.end(), rows.begin() + static_cast<std::ptrdiff_t>(pos),
                 rows.begin() + static_cast<std::ptrdiff_t>(pos + counts[c]));
      pos += counts[c];
    }
  }
  for (auto& s : shards) std::sort(s.indices.begin(), s.indices.end());
  return shards;
}

// Per-client label counts: result[client][class].
inline std::vector<std::vector<std::size_t>> class_histograms(const Dataset& ds,
                                                              std::span<const ClientShard> shards) {
  std::vector<std::vector<std::size_t>> h(shards.size(),
                                          std::vector<std::size_t>(static_cast<std::size_t>(ds.classes)));
  for (std::size_t c = 0; c < shards.size(); ++c)
    for (std::size_t i : shards[c].indices) ++h[c][static_cast<std::size_t>(ds.labels[i])];
  return h;
}

// Mean over nonempty clients of the largest single-class fraction of the
// client's samples. 1/classes for IID shards, 1 for single-class shards.
inline double mean_max_class_share(const Dataset& ds, std::span<const ClientShard> shards) {
  const auto h = class_histograms(ds, shards);
  double sum = 0.0;
  int counted = 0;
  for (std::size_t c = 0; c < h.size(); ++c) {
    if (shards[c].size() == 0) continue;
    const auto mx = *std::max_element(h[c].begin(), h[c].end());
    sum += static_cast<double>(mx) / static_cast<double>(shards[c].size());
    ++counted;
  }
  return counted ? sum / counted : 0.0;
}

// --- CSV ---------------------------------------------------------------------

inline std::string format_double(double x) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

inline void write_csv(std::ostream& os, const Dataset& ds) {
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double f : ds.row(i)) os << format_double(f) << ',';
    os << ds.labels[i] << '\n';
  }
}

inline void write_csv(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("cannot open for writing: " + path);
  write_csv(os, ds);
}

// Parses `f1,...,fdim,label` lines. When `declared_classes` is given, labels
// at or above it are rejected; otherwise classes = 1 + max label.
inline Dataset parse_csv(std::istream& is, std::optional<int> declared_classes = std::nullopt) {
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  int max_label = -1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;

    std::vector<std::string_view> cells;
    std::string_view rest(line);
    for (;;) {
      const auto comma = rest.find(',');
      cells.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (cells.size() < 2) throw ParseError("expected at least one feature and a label", lineno);
    const std::size_t dim = cells.size() - 1;
    if (ds.size() == 0) {
      ds.dim = dim;
    } else if (dim != ds.dim) {
      throw ParseError("ragged row: expected " + std::to_string(ds.dim + 1) + " cells, got " +
                           std::to_string(cells.size()),
                       lineno);
    }
    for (std::size_t j = 0; j < dim; ++j) {
      double v = 0.0;
      const auto cell = cells[j];
      const auto r = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (r.ec != std::errc{} || r.ptr != cell.data() + cell.size() || !std::isfinite(v))
        throw ParseError("non-numeric feature '" + std::string(cell) + "'", lineno);
      ds.features.push_back(v);
    }
    int label = 0;
    const auto cell = cells.back();
    const auto r = std::from_chars(cell.data(), cell.data() + cell.size(), label);
    if (r.ec != std::errc{} || r.ptr != cell.data() + cell.size() || label < 0)
      throw ParseError("invalid label '" + std::string(cell) + "'", lineno);
    if (declared_classes && label >= *declared_classes)
      throw ParseError("label " + std::to_string(label) + " >= declared classes " +
                           std::to_string(*declared_classes),
                       lineno);
    ds.labels.push_back(label);
    max_label = std::max(max_label, label);
  }
  if (ds.size() == 0) throw ParseError("empty dataset");
  ds.classes = declared_classes ? *declared_classes : max_label + 1;
  return ds;
}

inline Dataset load_csv(const std::string& path, std::optional<int> declared_classes = std::nullopt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open " + path);
  return parse_csv(is, declared_classes);
}

}  // namespace fnsm

#include "vitsig/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace vitsig {

namespace {

void check_finite(const std::vector<double>& values, const char* op) {
  if (values.empty()) throw std::invalid_argument(std::string(op) + ": empty value set");
  for (double v : values) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(op) + ": non-finite value");
  }
}

}  // namespace

std::vector<double> shared_edges(const std::vector<double>& a, const std::vector<double>& b,
                                 int bins) {
  check_finite(a, "shared_edges");
  check_finite(b, "shared_edges");
  if (bins < 1) throw std::invalid_argument("shared_edges: bins < 1");
  double lo = a[0], hi = a[0];
  for (double v : a) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (double v : b) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (lo == hi) return {lo, hi + 1.0};  // degenerate: one bin holds everything
  std::vector<double> edges(static_cast<std::size_t>(bins) + 1);
  const double w = (hi - lo) / bins;
  for (int i = 0; i <= bins; ++i) edges[static_cast<std::size_t>(i)] = lo + w * i;
  edges.back() = hi;  // guard against rounding past the max
  return edges;
}

Histogram histogram(const std::vector<double>& values, const std::vector<double>& edges) {
  check_finite(values, "histogram");
  if (edges.size() < 2) throw std::invalid_argument("histogram: need at least two edges");
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (!(edges[i] > edges[i - 1])) {
      throw std::invalid_argument("histogram: edges not strictly increasing");
    }
  }
  Histogram h;
  h.edges = edges;
  h.degenerate = edges.size() == 2;
  const std::size_t bins = edges.size() - 1;
  std::vector<double> counts(bins, 0.0);
  const double lo = edges.front(), hi = edges.back();
  const double w = (hi - lo) / static_cast<double>(bins);
  for (double v : values) {
    if (v < lo || v > hi) {
      throw std::invalid_argument("histogram: value " + std::to_string(v) + " outside edge range");
    }
    std::size_t bin;
    if (v >= hi) {
      bin = bins - 1;  // the last bin is closed
    } else {
      bin = static_cast<std::size_t>((v - lo) / w);
      if (bin >= bins) bin = bins - 1;
      // An interior-edge value belongs to the bin starting at that edge
      // (the right bin); nudge when flooring put it one short.
      if (bin + 1 < bins && v >= edges[bin + 1]) ++bin;
      if (v < edges[bin]) --bin;
    }
    counts[bin] += 1.0;
  }
  const double n = static_cast<double>(values.size());
  h.density.resize(bins);
  for (std::size_t i = 0; i < bins; ++i) h.density[i] = counts[i] / n;
  return h;
}

double bhattacharyya(const Histogram& h, const Histogram& hp) {
  if (h.edges != hp.edges) throw std::invalid_argument("bhattacharyya: histogram edges differ");
  double bc = 0.0;
  for (std::size_t i = 0; i < h.density.size(); ++i) bc += std::sqrt(h.density[i] * hp.density[i]);
  return bc;
}

double bc_of_sets(const std::vector<double>& clean, const std::vector<double>& attacked, int bins) {
  const auto edges = shared_edges(clean, attacked, bins);
  return bhattacharyya(histogram(clean, edges), histogram(attacked, edges));
}

SeparabilityReport refine_best_unit(const std::string& signature, const std::string& attack_tag,
                                    double summary_bc, const std::vector<UnitValues>& units,
                                    const std::string& mode, int bins) {
  if (units.size() < 2) throw std::invalid_argument("refine_best_unit: need at least 2 units");
  if (mode != "full" && mode != "heldout") {
    throw std::invalid_argument("refine_best_unit: unknown mode " + mode);
  }

  SeparabilityReport report;
  report.signature = signature;
  report.attack_tag = attack_tag;
  report.mode = mode;
  report.summary_bc = summary_bc;

  auto first_half = [](const std::vector<double>& v) {
    return std::vector<double>(v.begin(), v.begin() + static_cast<long>(v.size() / 2));
  };
  auto second_half = [](const std::vector<double>& v) {
    return std::vector<double>(v.begin() + static_cast<long>(v.size() / 2), v.end());
  };

  double best = std::numeric_limits<double>::infinity();
  std::size_t best_ix = 0;
  for (std::size_t u = 0; u < units.size(); ++u) {
    const UnitValues& unit = units[u];
    double bc;
    if (mode == "heldout") {
      if (unit.clean.size() < 4 || unit.attacked.size() < 4) {
        throw std::invalid_argument("refine_best_unit: too few samples for a heldout split");
      }
      bc = bc_of_sets(first_half(unit.clean), first_half(unit.attacked), bins);
    } else {
      bc = bc_of_sets(unit.clean, unit.attacked, bins);
    }
    report.unit_bcs.emplace_back(unit.name, bc);
    if (bc < best) {
      best = bc;
      best_ix = u;
    }
  }

  if (mode == "heldout") {
    // Score the selected unit on the half it was not selected on.
    const UnitValues& unit = units[best_ix];
    report.refined_bc = bc_of_sets(second_half(unit.clean), second_half(unit.attacked), bins);
    report.best_unit = unit.name;
  } else if (best <= summary_bc) {
    report.refined_bc = best;
    report.best_unit = units[best_ix].name;
  } else {
    // No unit separates better than the summary; the summary itself stays
    // the reported candidate.
    report.refined_bc = summary_bc;
    report.best_unit = "none";
  }
  report.improvement = report.summary_bc - report.refined_bc;
  return report;
}

}  // namespace vitsig

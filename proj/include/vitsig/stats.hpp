#pragma once

#include <string>
#include <utility>
#include <vector>

namespace vitsig {

/// Normalized empirical distribution. Values landing exactly on an interior
/// edge count toward the right bin; the last bin is closed on both sides.
struct Histogram {
  std::vector<double> edges;    // bins+1, strictly increasing
  std::vector<double> density;  // normalized counts, sums to 1
  bool degenerate = false;      // all pooled values identical -> single bin
};

/// Shared bin edges covering the pooled min/max of both value sets.
std::vector<double> shared_edges(const std::vector<double>& a, const std::vector<double>& b,
                                 int bins = 100);

Histogram histogram(const std::vector<double>& values, const std::vector<double>& edges);

/// Discrete Bhattacharyya coefficient, sum_i sqrt(h_i * h'_i); requires
/// identical edges.
double bhattacharyya(const Histogram& h, const Histogram& hp);

/// BC of two value sets over shared 100-bin edges.
double bc_of_sets(const std::vector<double>& clean, const std::vector<double>& attacked,
                  int bins = 100);

struct UnitValues {
  std::string name;
  std::vector<double> clean;
  std::vector<double> attacked;
};

struct SeparabilityReport {
  std::string signature;
  std::string attack_tag;
  std::string mode;       // "full" or "heldout"
  double summary_bc = 1.0;
  double refined_bc = 1.0;
  double improvement = 0.0;       // summary_bc - refined_bc
  std::string best_unit;          // "none" when no unit beats the summary
  std::vector<std::pair<std::string, double>> unit_bcs;
};

/// Scans per-unit clean/attacked distributions for the unit with the lowest
/// BC. The summary distribution itself is kept as the baseline candidate, so
/// the refined BC can never exceed the summary BC. In "heldout" mode the
/// unit is selected on one half of the samples and its reported BC is
/// recomputed on the other half ("full" scores on everything, the way the
/// cherry-picked tables do).
SeparabilityReport refine_best_unit(const std::string& signature, const std::string& attack_tag,
                                    double summary_bc, const std::vector<UnitValues>& units,
                                    const std::string& mode = "full", int bins = 100);

}  // namespace vitsig

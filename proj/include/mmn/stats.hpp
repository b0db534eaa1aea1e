#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <vector>

#include "mmn/attribution.hpp"

namespace mmn {

struct KsResult {
  double d = 0.0;
  double p = 1.0;
  std::size_t n_a = 0;
  std::size_t n_b = 0;
};

// Asymptotic Kolmogorov survival function Q(lambda) = 2 sum (-1)^(k-1) exp(-2 k^2 lambda^2).
double kolmogorov_q(double lambda);
// The same series truncated at `terms` terms, clamped to [0, 1].
double kolmogorov_series(double lambda, int terms);

// Two-sample KS test; p from the asymptotic distribution with effective size
// n_a n_b / (n_a + n_b).
KsResult ks_two_sample(std::span<const double> a, std::span<const double> b);

// Pearson correlation of ranks; ties receive average ranks.
double spearman_rank(std::span<const double> a, std::span<const double> b);
// 1-based ranks, ties averaged.
std::vector<double> average_ranks(std::span<const double> v);

struct LayerCount {
  std::uint32_t layer = 0;
  std::size_t unique_units = 0;
  std::size_t interpretable_units = 0;
};

// For each image: take its top_n records, dedupe units, count per layer; sums
// across images. `interpretable` (optional) selects the second series.
std::vector<LayerCount> layer_histogram(const std::vector<std::vector<AttributionRecord>>& records_by_image,
                                        std::size_t top_n, std::uint32_t n_layers,
                                        const std::function<bool(UnitRef)>& interpretable = {});

void write_layer_histogram_csv(std::ostream& out, const std::vector<LayerCount>& counts);

}  // namespace mmn

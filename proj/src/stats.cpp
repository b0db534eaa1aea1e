#include "mmn/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include "mmn/error.hpp"

namespace mmn {

double kolmogorov_series(double lambda, int terms) {
  if (lambda <= 0.0) return 1.0;
  double sum = 0.0;
  for (int k = 1; k <= terms; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += (k % 2 == 1) ? term : -term;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

double kolmogorov_q(double lambda) {
  if (lambda <= 0.0) return 1.0;
  if (lambda < 1.18) {
    // Jacobi theta form of the same function; converges fast for small lambda.
    const double pi2 = std::numbers::pi * std::numbers::pi;
    double sum = 0.0;
    for (int k = 1; k <= 100; ++k) {
      const double m = 2.0 * k - 1.0;
      const double term = std::exp(-m * m * pi2 / (8.0 * lambda * lambda));
      sum += term;
      if (term < 1e-300) break;
    }
    return std::clamp(1.0 - std::sqrt(2.0 * std::numbers::pi) / lambda * sum, 0.0, 1.0);
  }
  return kolmogorov_series(lambda, 100);
}

KsResult ks_two_sample(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw ValidationError("KS test needs two non-empty samples");
  if (!all_finite(a) || !all_finite(b)) throw NumericError("non-finite KS sample");
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  const double na = static_cast<double>(sa.size()), nb = static_cast<double>(sb.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  // Right-continuous CDFs evaluated at every pooled point.
  while (i < sa.size() || j < sb.size()) {
    double x;
    if (j >= sb.size() || (i < sa.size() && sa[i] <= sb[j]))
      x = sa[i];
    else
      x = sb[j];
    while (i < sa.size() && sa[i] <= x) ++i;
    while (j < sb.size() && sb[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  KsResult r;
  r.d = d;
  r.n_a = sa.size();
  r.n_b = sb.size();
  r.p = d == 0.0 ? 1.0 : kolmogorov_q(d * std::sqrt(na * nb / (na + nb)));
  return r;
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman_rank(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("spearman: length mismatch");
  if (a.size() < 2) throw ValidationError("spearman: need at least two pairs");
  if (!all_finite(a) || !all_finite(b)) throw NumericError("spearman: non-finite input");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw ValidationError("spearman: constant input, correlation undefined");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::vector<LayerCount> layer_histogram(const std::vector<std::vector<AttributionRecord>>& records_by_image,
                                        std::size_t top_n, std::uint32_t n_layers,
                                        const std::function<bool(UnitRef)>& interpretable) {
  std::vector<LayerCount> counts(n_layers);
  for (std::uint32_t l = 0; l < n_layers; ++l) counts[l].layer = l;
  for (const auto& records : records_by_image) {
    std::set<UnitRef> units;
    // Records are ranked by score; sort a copy so the input order is irrelevant.
    std::vector<AttributionRecord> sorted = records;
    std::sort(sorted.begin(), sorted.end(), [](const AttributionRecord& a, const AttributionRecord& b) {
      if (a.score != b.score) return a.score > b.score;
      return std::tie(a.layer, a.unit, a.patch) < std::tie(b.layer, b.unit, b.patch);
    });
    for (std::size_t i = 0; i < std::min(top_n, sorted.size()); ++i) units.insert(sorted[i].unit_ref());
    for (const UnitRef& u : units) {
      if (u.layer >= n_layers) throw ValidationError("record layer out of range");
      ++counts[u.layer].unique_units;
      if (interpretable && interpretable(u)) ++counts[u.layer].interpretable_units;
    }
  }
  return counts;
}

void write_layer_histogram_csv(std::ostream& out, const std::vector<LayerCount>& counts) {
  out << "layer,unique_units,interpretable_units\n";
  for (const auto& c : counts) out << c.layer << ',' << c.unique_units << ',' << c.interpretable_units << '\n';
}

}  // namespace mmn

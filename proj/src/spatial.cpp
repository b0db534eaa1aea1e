#include "mmn/spatial.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "mmn/error.hpp"

namespace mmn {

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

Heatmap activation_heatmap(const ForwardTrace& trace, const ModelConfig& config, std::uint32_t layer,
                           std::uint32_t unit, std::size_t first_patch_position) {
  if (layer >= trace.layers.size() || unit >= config.d_mlp)
    throw ValidationError("heatmap unit out of range: layer " + std::to_string(layer) + " unit " +
                          std::to_string(unit));
  const std::size_t g = config.patch_grid;
  if (first_patch_position + config.n_patches() > trace.length())
    throw ValidationError("trace does not cover the image patches");
  Heatmap h{layer, unit, Matrix(g, g)};
  const Matrix& act = trace.layers[layer].act;
  for (std::size_t p = 0; p < g * g; ++p) h.values.data()[p] = act(first_patch_position + p, unit);
  if (!all_finite(std::span<const double>(h.values.data())))
    throw NumericError("non-finite activation in heatmap");
  return h;
}

Matrix bilinear_upsample(const Matrix& grid, std::size_t size) {
  const std::size_t g = grid.rows();
  if (g == 0 || grid.cols() != g) throw ShapeError("heatmap must be square and non-empty");
  if (size < g) throw ValidationError("upsample size smaller than the grid");
  Matrix out(size, size);
  const double step = size > 1 ? static_cast<double>(g - 1) / static_cast<double>(size - 1) : 0.0;
  auto locate = [&](std::size_t i, std::size_t& i0, double& t) {
    const double x = static_cast<double>(i) * step;
    i0 = std::min(static_cast<std::size_t>(std::floor(x)), g - 1);
    t = x - static_cast<double>(i0);
    if (i0 == g - 1) t = 0.0;
  };
  for (std::size_t r = 0; r < size; ++r) {
    std::size_t r0;
    double tr;
    locate(r, r0, tr);
    const std::size_t r1 = std::min(r0 + 1, g - 1);
    for (std::size_t c = 0; c < size; ++c) {
      std::size_t c0;
      double tc;
      locate(c, c0, tc);
      const std::size_t c1 = std::min(c0 + 1, g - 1);
      const double top = grid(r0, c0) + tc * (grid(r0, c1) - grid(r0, c0));
      const double bot = grid(r1, c0) + tc * (grid(r1, c1) - grid(r1, c0));
      double v = top + tr * (bot - top);
      // Guard against rounding drift outside the four neighbours.
      const double lo = std::min({grid(r0, c0), grid(r0, c1), grid(r1, c0), grid(r1, c1)});
      const double hi = std::max({grid(r0, c0), grid(r0, c1), grid(r1, c0), grid(r1, c1)});
      out(r, c) = std::clamp(v, lo, hi);
    }
  }
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ValidationError("percentile of an empty map");
  if (!(q >= 0.0 && q <= 1.0)) throw ValidationError("percentile q must be in [0, 1]");
  std::sort(values.begin(), values.end());
  const double rank = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

BinaryMask threshold_mask(const Matrix& map, double q) {
  const std::span<const double> v(map.data());
  if (!all_finite(v)) throw NumericError("non-finite value in thresholded map");
  const double t = percentile(std::vector<double>(v.begin(), v.end()), q);
  BinaryMask m(map.rows(), map.cols());
  for (std::size_t i = 0; i < v.size(); ++i) m.bits[i] = v[i] > t ? 1 : 0;
  m.source = "q=" + std::to_string(q);
  return m;
}

BinaryMask expand_grid_mask(const BinaryMask& grid_mask, std::size_t cell_size) {
  BinaryMask out(grid_mask.rows * cell_size, grid_mask.cols * cell_size);
  out.source = grid_mask.source;
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < out.cols; ++c) out.set(r, c, grid_mask.at(r / cell_size, c / cell_size));
  return out;
}

BinaryMask receptive_field_mask(const Heatmap& heatmap, const ModelConfig& config, double q,
                                ThresholdLevel level) {
  BinaryMask m = level == ThresholdLevel::grid
                     ? expand_grid_mask(threshold_mask(heatmap.values, q), config.patch_size())
                     : threshold_mask(bilinear_upsample(heatmap.values, config.image_size), q);
  m.source += " L" + std::to_string(heatmap.layer) + "/U" + std::to_string(heatmap.unit);
  return m;
}

double iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw ShapeError("mask dimensions differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    inter += (a.bits[i] && b.bits[i]) ? 1 : 0;
    uni += (a.bits[i] || b.bits[i]) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

Matrix class_selectivity(const Pipeline& pipeline, const std::vector<std::vector<Image>>& images_by_class,
                         const std::vector<std::vector<UnitRef>>& units_by_class) {
  const std::size_t n = images_by_class.size();
  if (n == 0 || units_by_class.size() != n) throw ValidationError("one unit set per image class required");
  for (std::size_t i = 0; i < n; ++i) {
    if (images_by_class[i].empty()) throw ValidationError("class " + std::to_string(i) + " has no images");
    if (units_by_class[i].empty()) throw ValidationError("class " + std::to_string(i) + " has no units");
  }
  const auto& cfg = pipeline.model.config;
  const std::size_t P = cfg.n_patches();
  // sums(i, j): activation of class i's units summed over class j's patches.
  Matrix sums(n, n);
  for (std::size_t j = 0; j < n; ++j)
    for (const Image& img : images_by_class[j]) {
      const auto tr = *forward(pipeline.model, pipeline.prompt(img), true).trace;
      for (std::size_t i = 0; i < n; ++i)
        for (const UnitRef& u : units_by_class[i]) {
          if (u.layer >= cfg.n_layers || u.unit >= cfg.d_mlp) throw ValidationError("selectivity unit out of range");
          for (std::size_t p = 0; p < P; ++p) sums(i, j) += tr.layers[u.layer].act(p, u.unit);
        }
    }
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    Vector mean(n);
    for (std::size_t j = 0; j < n; ++j)
      mean[j] = sums(i, j) / static_cast<double>(images_by_class[j].size() * P * units_by_class[i].size());
    const double mx = *std::max_element(mean.begin(), mean.end());
    for (std::size_t j = 0; j < n; ++j) {
      if (mx > 0.0)
        out(i, j) = std::clamp(mean[j] / mx, 0.0, 1.0);
      else
        out(i, j) = mean[j] == mx ? 1.0 : 0.0;
    }
  }
  return out;
}

void write_heatmap_csv(std::ostream& out, const Heatmap& heatmap) {
  out.precision(17);
  for (std::size_t r = 0; r < heatmap.values.rows(); ++r) {
    for (std::size_t c = 0; c < heatmap.values.cols(); ++c) {
      if (c) out << ',';
      out << heatmap.values(r, c);
    }
    out << '\n';
  }
}

void save_mask(const std::filesystem::path& path, const BinaryMask& mask) {
  if (mask.rows != mask.cols) throw ShapeError("only square masks can be saved");
  Image img(static_cast<std::uint32_t>(mask.rows), 1);
  for (std::size_t i = 0; i < mask.bits.size(); ++i) img.pixels[i] = mask.bits[i] ? 1.0 : 0.0;
  save_image(path, img);
}

BinaryMask load_mask(const std::filesystem::path& path) {
  const Image img = load_image(path);
  if (img.channels != 1) throw ValidationError("mask must be a single-channel PGM: " + path.string());
  BinaryMask m(img.size, img.size);
  for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = img.pixels[i] >= 0.5 ? 1 : 0;
  m.source = "annotation";
  return m;
}

void write_iou_jsonl(std::ostream& out, const std::vector<IouRecord>& records) {
  for (const auto& r : records) {
    nlohmann::json j;
    j["image"] = r.image;
    j["layer"] = r.layer;
    j["unit"] = r.unit;
    j["iou"] = r.iou;
    out << j.dump() << '\n';
  }
}

}  // namespace mmn

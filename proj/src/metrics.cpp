#include "tdg/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>

namespace tdg::metrics {

namespace {

void require_same_size(const LabelMap& a, const LabelMap& b, const char* what) {
  if (a.height != b.height || a.width != b.width || a.ids.size() != b.ids.size()) {
    throw ShapeError(std::string(what) + ": label maps differ in size");
  }
}

std::vector<std::int32_t> sorted_unique(std::vector<std::int32_t> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

int index_of(const std::vector<std::int32_t>& ids, std::int32_t id) {
  return static_cast<int>(std::lower_bound(ids.begin(), ids.end(), id) - ids.begin());
}

double pairs(std::int64_t n) { return static_cast<double>(n) * static_cast<double>(n - 1) / 2.0; }

}  // namespace

LabelMap argmax_labels(const model::MaskStack& stack) {
  const auto& m = stack.masks;
  if (m.rank() != 3) throw ShapeError("argmax_labels: masks must be (K,H,W), got " + shape_str(m.shape()));
  const std::int64_t k = m.dim(0), h = m.dim(1), w = m.dim(2), plane = h * w;
  LabelMap out{h, w, std::vector<std::int32_t>(static_cast<std::size_t>(plane), 0)};
  for (std::int64_t p = 0; p < plane; ++p) {
    std::int32_t best = 0;
    for (std::int64_t s = 1; s < k; ++s) {
      if (m[s * plane + p] > m[best * plane + p]) best = static_cast<std::int32_t>(s);
    }
    out.ids[static_cast<std::size_t>(p)] = best;
  }
  return out;
}

double adjusted_rand_index(std::span<const std::int32_t> a, std::span<const std::int32_t> b) {
  if (a.size() != b.size()) throw ShapeError("adjusted_rand_index: labelings differ in length");
  const auto ua = sorted_unique({a.begin(), a.end()});
  const auto ub = sorted_unique({b.begin(), b.end()});
  const std::size_t ra = ua.size(), rb = ub.size();
  std::vector<std::int64_t> table(ra * rb, 0), rows(ra, 0), cols(rb, 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const int x = index_of(ua, a[i]);
    const int y = index_of(ub, b[i]);
    ++table[static_cast<std::size_t>(x) * rb + y];
    ++rows[x];
    ++cols[y];
  }
  double index = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (std::int64_t n : table) index += pairs(n);
  for (std::int64_t n : rows) sum_a += pairs(n);
  for (std::int64_t n : cols) sum_b += pairs(n);
  const double total = pairs(static_cast<std::int64_t>(a.size()));
  const double expected = total > 0.0 ? sum_a * sum_b / total : 0.0;
  const double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

std::optional<double> ari_fg(const LabelMap& pred, const LabelMap& gt) {
  require_same_size(pred, gt, "ari_fg");
  std::vector<std::int32_t> p, g;
  for (std::size_t i = 0; i < gt.ids.size(); ++i) {
    if (gt.ids[i] == 0) continue;
    g.push_back(gt.ids[i]);
    p.push_back(pred.ids[i]);
  }
  if (sorted_unique(g).size() < 2) return std::nullopt;
  return adjusted_rand_index(p, g);
}

IouTable iou_table(const LabelMap& pred, const LabelMap& gt, bool include_background) {
  require_same_size(pred, gt, "iou_table");
  IouTable t;
  t.gt_ids = sorted_unique(gt.ids);
  if (!include_background) std::erase(t.gt_ids, 0);
  t.pred_ids = sorted_unique(pred.ids);
  const std::size_t rows = t.gt_ids.size(), cols = t.pred_ids.size();
  std::vector<std::int64_t> inter(rows * cols, 0), gt_area(rows, 0), pred_area(cols, 0);
  for (std::size_t i = 0; i < gt.ids.size(); ++i) {
    const int c = index_of(t.pred_ids, pred.ids[i]);
    ++pred_area[c];
    const auto it = std::lower_bound(t.gt_ids.begin(), t.gt_ids.end(), gt.ids[i]);
    if (it == t.gt_ids.end() || *it != gt.ids[i]) continue;
    const auto r = static_cast<std::size_t>(it - t.gt_ids.begin());
    ++gt_area[r];
    ++inter[r * cols + c];
  }
  t.iou.assign(rows, std::vector<double>(cols, 0.0));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::int64_t i = inter[r * cols + c];
      const std::int64_t u = gt_area[r] + pred_area[c] - i;
      t.iou[r][c] = u > 0 ? static_cast<double>(i) / static_cast<double>(u) : 0.0;
    }
  }
  return t;
}

std::vector<int> hungarian_max(const std::vector<std::vector<double>>& weights) {
  const int rows = static_cast<int>(weights.size());
  if (rows == 0) return {};
  const int cols = static_cast<int>(weights[0].size());
  for (const auto& r : weights) {
    if (static_cast<int>(r.size()) != cols) throw std::invalid_argument("hungarian_max: ragged weight matrix");
  }
  std::vector<int> result(static_cast<std::size_t>(rows), -1);
  if (cols == 0) return result;

  // Shortest augmenting path (potentials) form; requires n <= m, so transpose if needed.
  const bool flip = rows > cols;
  const int n = flip ? cols : rows, m = flip ? rows : cols;
  auto cost = [&](int i, int j) { return flip ? -weights[j - 1][i - 1] : -weights[i - 1][j - 1]; };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (int j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    if (flip) {
      result[static_cast<std::size_t>(j - 1)] = p[j] - 1;
    } else {
      result[static_cast<std::size_t>(p[j] - 1)] = j - 1;
    }
  }
  return result;
}

double miou(const LabelMap& pred, const LabelMap& gt) {
  const IouTable t = iou_table(pred, gt, true);
  if (t.gt_ids.empty()) return 0.0;
  const auto match = hungarian_max(t.iou);
  double sum = 0.0;
  for (std::size_t r = 0; r < t.gt_ids.size(); ++r) {
    if (match[r] >= 0) sum += t.iou[r][static_cast<std::size_t>(match[r])];
  }
  return sum / static_cast<double>(t.gt_ids.size());
}

std::optional<double> mbo(const LabelMap& pred, const LabelMap& gt) {
  const IouTable t = iou_table(pred, gt, false);
  if (t.gt_ids.empty()) return std::nullopt;
  double sum = 0.0;
  for (const auto& row : t.iou) sum += *std::max_element(row.begin(), row.end());
  return sum / static_cast<double>(t.gt_ids.size());
}

double mse(const Tensor<double>& reconstruction, const Tensor<double>& image) {
  if (reconstruction.shape() != image.shape()) {
    throw ShapeError("mse: shapes differ, " + shape_str(reconstruction.shape()) + " vs " + shape_str(image.shape()));
  }
  double sum = 0.0;
  for (std::int64_t i = 0; i < image.numel(); ++i) {
    const double d = (reconstruction[i] - image[i]) * 255.0;
    sum += d * d;
  }
  return sum / static_cast<double>(image.numel());
}

LabelMap downsample_labels(const LabelMap& labels, int stride) {
  if (stride < 1 || labels.height % stride != 0 || labels.width % stride != 0) {
    throw ShapeError("downsample_labels: stride " + std::to_string(stride) + " does not divide the label map");
  }
  const std::int64_t h = labels.height / stride, w = labels.width / stride;
  LabelMap out{h, w, std::vector<std::int32_t>(static_cast<std::size_t>(h * w), 0)};
  std::map<std::int32_t, int> votes;
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      votes.clear();
      for (int dy = 0; dy < stride; ++dy) {
        for (int dx = 0; dx < stride; ++dx) ++votes[labels.at(y * stride + dy, x * stride + dx)];
      }
      // std::map iterates ascending, so strict > keeps the lowest id on ties.
      std::int32_t best = votes.begin()->first;
      int best_count = 0;
      for (const auto& [id, count] : votes) {
        if (count > best_count) {
          best = id;
          best_count = count;
        }
      }
      out.ids[static_cast<std::size_t>(y * w + x)] = best;
    }
  }
  return out;
}

VarianceReport feature_variance(const model::FeatureGrid& grid, const LabelMap& gt) {
  const auto& f = grid.features;
  if (f.rank() != 3) throw ShapeError("feature_variance: features must be (C,h,w)");
  const LabelMap cells = downsample_labels(gt, grid.stride);
  const std::int64_t c = f.dim(0), plane = f.dim(1) * f.dim(2);
  if (cells.height != f.dim(1) || cells.width != f.dim(2)) {
    throw ShapeError("feature_variance: label grid does not match the feature grid");
  }
  const auto regions = sorted_unique(cells.ids);
  const std::size_t nr = regions.size();
  std::vector<std::int64_t> count(nr, 0);
  std::vector<double> mean(nr * c, 0.0), sq(nr * c, 0.0);
  for (std::int64_t p = 0; p < plane; ++p) {
    const auto r = static_cast<std::size_t>(index_of(regions, cells.ids[static_cast<std::size_t>(p)]));
    ++count[r];
    for (std::int64_t ch = 0; ch < c; ++ch) mean[r * c + ch] += f[ch * plane + p];
  }
  for (std::size_t r = 0; r < nr; ++r) {
    for (std::int64_t ch = 0; ch < c; ++ch) mean[r * c + ch] /= static_cast<double>(count[r]);
  }
  for (std::int64_t p = 0; p < plane; ++p) {
    const auto r = static_cast<std::size_t>(index_of(regions, cells.ids[static_cast<std::size_t>(p)]));
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double d = f[ch * plane + p] - mean[r * c + ch];
      sq[r * c + ch] += d * d;
    }
  }
  VarianceReport rep;
  rep.regions = static_cast<std::int64_t>(nr);
  for (std::size_t r = 0; r < nr; ++r) {
    double v = 0.0;
    for (std::int64_t ch = 0; ch < c; ++ch) v += sq[r * c + ch] / static_cast<double>(count[r]);
    rep.intra += v / static_cast<double>(c);
  }
  rep.intra /= static_cast<double>(nr);
  if (nr > 1) {
    double total = 0.0;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double mu = 0.0;
      for (std::size_t r = 0; r < nr; ++r) mu += mean[r * c + ch];
      mu /= static_cast<double>(nr);
      double var = 0.0;
      for (std::size_t r = 0; r < nr; ++r) {
        const double d = mean[r * c + ch] - mu;
        var += d * d;
      }
      total += var / static_cast<double>(nr);
    }
    rep.inter = total / static_cast<double>(c);
  }
  return rep;
}

PcaProjection pca_project(const model::FeatureGrid& grid) {
  const auto& f = grid.features;
  if (f.rank() != 3) throw ShapeError("pca_project: features must be (C,h,w)");
  const std::int64_t c = f.dim(0), h = f.dim(1), w = f.dim(2), plane = h * w;
  if (c < 3) throw std::invalid_argument("pca_project: need at least 3 feature channels");
  Eigen::MatrixXd x(plane, c);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t p = 0; p < plane; ++p) x(p, ch) = f[ch * plane + p];
  }
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(plane);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  PcaProjection out;
  out.total_variance = cov.trace();
  out.components = Tensor<double>({3, h, w}, 0.0);
  out.eigenvalues.assign(3, 0.0);
  const double tol = 1e-12 * std::max(1.0, out.total_variance);
  for (int k = 0; k < 3; ++k) {
    const Eigen::Index col = c - 1 - k;  // eigenvalues come out ascending
    const double lambda = solver.eigenvalues()(col);
    if (lambda <= tol) continue;
    Eigen::VectorXd axis = solver.eigenvectors().col(col);
    Eigen::Index lead = 0;
    for (Eigen::Index i = 1; i < axis.size(); ++i) {
      if (std::abs(axis(i)) > std::abs(axis(lead))) lead = i;
    }
    if (axis(lead) < 0) axis = -axis;
    out.eigenvalues[static_cast<std::size_t>(k)] = lambda;
    const Eigen::VectorXd scores = x * axis;
    for (std::int64_t p = 0; p < plane; ++p) out.components[k * plane + p] = scores(p);
  }
  return out;
}

Tensor<double> pca_rgb(const model::FeatureGrid& grid) {
  PcaProjection pca = pca_project(grid);
  Tensor<double> rgb = pca.components;
  const std::int64_t plane = rgb.dim(1) * rgb.dim(2);
  for (int k = 0; k < 3; ++k) {
    auto* ch = rgb.data().data() + k * plane;
    const auto [lo, hi] = std::minmax_element(ch, ch + plane);
    const double a = *lo, b = *hi;
    if (pca.eigenvalues[static_cast<std::size_t>(k)] == 0.0 || !(b > a)) {
      std::fill(ch, ch + plane, 0.5);
      continue;
    }
    for (std::int64_t p = 0; p < plane; ++p) ch[p] = (ch[p] - a) / (b - a);
  }
  return rgb;
}

ImageMetrics score_image(std::int64_t index, const model::MaskStack& masks, const Tensor<double>& reconstruction,
                         const scenes::SceneSample& gt) {
  const LabelMap pred = argmax_labels(masks);
  ImageMetrics m;
  m.index = index;
  m.ari_fg = ari_fg(pred, gt.labels);
  m.miou = miou(pred, gt.labels);
  m.mbo = mbo(pred, gt.labels);
  m.mse = mse(reconstruction, gt.image.cast<double>());
  return m;
}

MetricsReport aggregate(std::vector<ImageMetrics> per_image) {
  MetricsReport rep;
  rep.image_count = static_cast<std::int64_t>(per_image.size());
  std::int64_t ari_n = 0, mbo_n = 0;
  for (const auto& m : per_image) {
    if (m.ari_fg) {
      rep.ari_fg += *m.ari_fg;
      ++ari_n;
    } else {
      ++rep.ari_skipped;
    }
    if (m.mbo) {
      rep.mbo += *m.mbo;
      ++mbo_n;
    }
    rep.miou += m.miou;
    rep.mse += m.mse;
  }
  if (ari_n > 0) rep.ari_fg /= static_cast<double>(ari_n);
  if (mbo_n > 0) rep.mbo /= static_cast<double>(mbo_n);
  if (rep.image_count > 0) {
    rep.miou /= static_cast<double>(rep.image_count);
    rep.mse /= static_cast<double>(rep.image_count);
  }
  rep.per_image = std::move(per_image);
  return rep;
}

std::vector<nlohmann::ordered_json> report_records(const MetricsReport& report) {
  std::vector<nlohmann::ordered_json> out;
  out.reserve(report.per_image.size() + 1);
  for (const auto& m : report.per_image) {
    nlohmann::ordered_json j;
    j["kind"] = "image";
    j["index"] = m.index;
    j["ari_fg"] = m.ari_fg ? nlohmann::ordered_json(*m.ari_fg) : nlohmann::ordered_json(nullptr);
    j["miou"] = m.miou;
    j["mbo"] = m.mbo ? nlohmann::ordered_json(*m.mbo) : nlohmann::ordered_json(nullptr);
    j["mse"] = m.mse;
    out.push_back(std::move(j));
  }
  nlohmann::ordered_json agg;
  agg["kind"] = "aggregate";
  agg["images"] = report.image_count;
  agg["ari_fg"] = report.ari_fg;
  agg["ari_skipped"] = report.ari_skipped;
  agg["miou"] = report.miou;
  agg["mbo"] = report.mbo;
  agg["mse"] = report.mse;
  out.push_back(std::move(agg));
  return out;
}

}  // namespace tdg::metrics

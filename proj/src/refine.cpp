#include "tdg/refine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace tdg::refine {

using model::SlotSet;

void RefineConfig::validate() const {
  if (!(threshold >= kThresholdFloor)) {
    throw std::invalid_argument("refine config: threshold " + std::to_string(threshold) + " below floor " +
                                std::to_string(kThresholdFloor));
  }
  if (max_added_slots < 1) throw std::invalid_argument("refine config: max_added_slots must be positive");
  if (calibration_size < 1) throw std::invalid_argument("refine config: calibration_size must be positive");
}

double cosine_distance(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return 1.0 - dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-8);
}

namespace {

// Projected vector at raster location `loc` of a (C, h, w) field.
std::vector<double> column(const Tensor<double>& field, std::int64_t loc) {
  const std::int64_t c = field.dim(0), hw = field.dim(1) * field.dim(2);
  std::vector<double> v(static_cast<std::size_t>(c));
  for (std::int64_t j = 0; j < c; ++j) v[j] = field[j * hw + loc];
  return v;
}

std::vector<double> unit(std::vector<double> v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  const double den = std::max(std::sqrt(ss), 1e-8);
  for (double& x : v) x /= den;
  return v;
}

void check_field(const Tensor<double>& projected, const SlotSet& slots) {
  if (slots.slots.rank() != 2 || slots.count() < 1) throw std::invalid_argument("conflict_map: empty slot set");
  if (projected.rank() != 3 || projected.dim(0) != slots.dim()) {
    throw ShapeError("conflict_map: projection " + shape_str(projected.shape()) + " does not match slot width " +
                     std::to_string(slots.dim()));
  }
}

std::int64_t argmax_location(const Tensor<double>& values) {
  std::int64_t best = 0;
  for (std::int64_t i = 1; i < values.numel(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

}  // namespace

ConflictMap conflict_map(const Tensor<double>& projected, const SlotSet& slots) {
  check_field(projected, slots);
  const std::int64_t h = projected.dim(1), w = projected.dim(2);
  ConflictMap cm{Tensor<double>(Shape{h, w}), std::vector<int>(static_cast<std::size_t>(h * w), 0)};
  std::vector<std::vector<double>> rows;
  for (std::int64_t k = 0; k < slots.count(); ++k) rows.push_back(slots.row(k));
  for (std::int64_t loc = 0; loc < h * w; ++loc) {
    const auto p = column(projected, loc);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const double d = cosine_distance(p, rows[k]);
      if (d < best) {
        best = d;
        cm.nearest[loc] = static_cast<int>(k);
      }
    }
    cm.values[loc] = best;
  }
  return cm;
}

ConflictMap conflict_map(const model::SlotModel& model, const model::FeatureGrid& features, const SlotSet& slots) {
  return conflict_map(model::project_features(model, features), slots);
}

double calibrate_threshold(std::span<const SlotSet> slot_sets) {
  double total = 0.0;
  std::int64_t used = 0;
  for (const auto& s : slot_sets) {
    if (s.count() < 2) continue;
    double acc = 0.0;
    std::int64_t pairs = 0;
    for (std::int64_t i = 0; i < s.count(); ++i) {
      const auto a = s.row(i);
      for (std::int64_t j = i + 1; j < s.count(); ++j) {
        acc += cosine_distance(a, s.row(j));
        ++pairs;
      }
    }
    total += acc / static_cast<double>(pairs);
    ++used;
  }
  if (used == 0) throw std::invalid_argument("calibrate_threshold: no calibration image has two or more slots");
  return std::max(0.5 * total / static_cast<double>(used), RefineConfig::kThresholdFloor);
}

double calibrate_threshold(const model::SlotModel& model, std::span<const Tensor<float>> images) {
  if (images.empty()) throw std::invalid_argument("calibrate_threshold: no calibration images");
  std::vector<SlotSet> sets;
  sets.reserve(images.size());
  for (const auto& img : images) sets.push_back(model::perceive(model, img).slots);
  return calibrate_threshold(sets);
}

std::pair<SlotSet, RefineTrace> add_conflicting_slots(const SlotSet& slots, const Tensor<double>& projected,
                                                      const RefineConfig& cfg) {
  ConflictMap cm = conflict_map(projected, slots);
  const std::int64_t c = slots.dim();
  std::vector<double> data(slots.slots.data().begin(), slots.slots.data().end());
  std::int64_t count = slots.count();

  RefineTrace trace;
  trace.initial_count = count;
  trace.threshold = cfg.threshold;
  std::int64_t best = argmax_location(cm.values);
  trace.max_conflict.push_back(cm.values[best]);
  trace.conflict_maps.push_back(cm.values);
  while (cm.values[best] > cfg.threshold) {
    if (static_cast<int>(trace.additions.size()) >= cfg.max_added_slots) {
      trace.hit_cap = true;
      break;
    }
    const auto added = unit(column(projected, best));
    trace.additions.push_back({best, cm.values[best], added});
    data.insert(data.end(), added.begin(), added.end());
    ++count;
    // Only the new slot can lower a location's minimum; ties keep the older slot.
    for (std::int64_t loc = 0; loc < cm.values.numel(); ++loc) {
      const double d = cosine_distance(column(projected, loc), added);
      if (d < cm.values[loc]) {
        cm.values[loc] = d;
        cm.nearest[loc] = static_cast<int>(count - 1);
      }
    }
    best = argmax_location(cm.values);
    trace.max_conflict.push_back(cm.values[best]);
    trace.conflict_maps.push_back(cm.values);
  }
  trace.final_count = count;
  return {SlotSet{Tensor<double>(Shape{count, c}, std::move(data)), true}, std::move(trace)};
}

std::vector<std::vector<int>> average_linkage_groups(const std::vector<std::vector<double>>& distances, double th) {
  const int n = static_cast<int>(distances.size());
  std::vector<std::vector<int>> clusters(n);
  for (int i = 0; i < n; ++i) clusters[i] = {i};
  auto linkage = [&](const std::vector<int>& a, const std::vector<int>& b) {
    double acc = 0.0;
    for (int i : a) {
      for (int j : b) acc += distances[i][j];
    }
    return acc / static_cast<double>(a.size() * b.size());
  };
  while (clusters.size() > 1) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < clusters.size(); ++i) {
      for (std::size_t j = i + 1; j < clusters.size(); ++j) {
        const double d = linkage(clusters[i], clusters[j]);
        if (d < best) {
          best = d;
          bi = i;
          bj = j;
        }
      }
    }
    if (!(best < th)) break;
    clusters[bi].insert(clusters[bi].end(), clusters[bj].begin(), clusters[bj].end());
    std::sort(clusters[bi].begin(), clusters[bi].end());
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bj));
  }
  std::sort(clusters.begin(), clusters.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });
  return clusters;
}

MergeResult merge_slots(const SlotSet& slots, double th) {
  const std::int64_t c = slots.dim();
  std::vector<std::vector<double>> rows;
  for (std::int64_t k = 0; k < slots.count(); ++k) rows.push_back(slots.row(k));
  std::vector<std::vector<int>> members(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) members[i] = {static_cast<int>(i)};

  for (;;) {
    const std::size_t n = rows.size();
    std::vector<std::vector<double>> dist(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) dist[i][j] = dist[j][i] = cosine_distance(rows[i], rows[j]);
    }
    const auto groups = average_linkage_groups(dist, th);
    if (groups.size() == n) break;
    std::vector<std::vector<double>> next_rows;
    std::vector<std::vector<int>> next_members;
    for (const auto& g : groups) {
      std::vector<double> mean(static_cast<std::size_t>(c), 0.0);
      std::vector<int> m;
      for (int i : g) {
        for (std::int64_t j = 0; j < c; ++j) mean[j] += rows[i][j];
        m.insert(m.end(), members[i].begin(), members[i].end());
      }
      std::sort(m.begin(), m.end());
      next_rows.push_back(unit(std::move(mean)));
      next_members.push_back(std::move(m));
    }
    rows = std::move(next_rows);
    members = std::move(next_members);
  }

  std::vector<double> data;
  for (const auto& r : rows) data.insert(data.end(), r.begin(), r.end());
  MergeResult out;
  out.slots = {Tensor<double>(Shape{static_cast<std::int64_t>(rows.size()), c}, std::move(data)), true};
  out.groups = std::move(members);
  return out;
}

Refined refine_from(const model::SlotModel& model, const model::Perception& perception, const SlotSet& start,
                    const RefineConfig& cfg, bool merge) {
  cfg.validate();
  const Tensor<double> projected = model::project_features(model, perception.features);
  auto [added, trace] = add_conflicting_slots(start, projected, cfg);
  SlotSet final_slots = added;
  if (merge) {
    auto merged = merge_slots(added, cfg.threshold);
    for (const auto& g : merged.groups) {
      if (g.size() > 1) trace.merge_groups.push_back(g);
    }
    final_slots = std::move(merged.slots);
  }
  trace.final_count = final_slots.count();

  Refined out;
  const bool unchanged = trace.additions.empty() && trace.merge_groups.empty() &&
                         start.slots == perception.slots.slots;
  if (unchanged) {
    out.slots = perception.slots;
    out.masks = perception.masks;
    out.reconstruction = perception.reconstruction;
  } else {
    auto [recon, masks] = model::decode(model, final_slots);
    out.slots = std::move(final_slots);
    out.masks = std::move(masks);
    out.reconstruction = std::move(recon);
  }
  out.trace = std::move(trace);
  return out;
}

Refined refine(const Tensor<float>& image, const model::SlotModel& model, const RefineConfig& cfg) {
  const model::Perception p = model::perceive(model, image);
  RefineConfig effective = cfg;
  if (cfg.per_image_threshold) {
    const SlotSet one[] = {p.slots};
    effective.threshold = calibrate_threshold(one);
  }
  return refine_from(model, p, p.slots, effective);
}

std::vector<nlohmann::ordered_json> trace_records(const RefineTrace& trace, std::int64_t image_index) {
  std::vector<nlohmann::ordered_json> out;
  for (std::size_t i = 0; i < trace.additions.size(); ++i) {
    const auto& a = trace.additions[i];
    nlohmann::ordered_json r;
    r["image"] = image_index;
    r["event"] = "add";
    r["iteration"] = i;
    r["location"] = a.location;
    r["conflict"] = a.conflict;
    r["max_conflict_after"] = trace.max_conflict[i + 1];
    r["slot"] = a.slot;
    out.push_back(std::move(r));
  }
  if (!trace.merge_groups.empty()) {
    nlohmann::ordered_json r;
    r["image"] = image_index;
    r["event"] = "merge";
    r["groups"] = trace.merge_groups;
    out.push_back(std::move(r));
  }
  nlohmann::ordered_json s;
  s["image"] = image_index;
  s["event"] = "summary";
  s["threshold"] = trace.threshold;
  s["initial_slots"] = trace.initial_count;
  s["final_slots"] = trace.final_count;
  s["added"] = trace.additions.size();
  s["hit_cap"] = trace.hit_cap;
  s["max_conflict"] = trace.max_conflict;
  out.push_back(std::move(s));
  return out;
}

}  // namespace tdg::refine

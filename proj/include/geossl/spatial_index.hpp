#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "geossl/survey.hpp"

namespace geossl {

// Uniform grid over (easting, northing). Queries with radius above the cell
// size scan a correspondingly wider ring of cells, so results stay exact.
class SpatialIndex {
public:
  SpatialIndex(std::span<const GeoPatch> patches, double cell_size) : cell_(cell_size) {
    if (!(cell_size > 0.0)) throw SurveyError("spatial index: cell size must be positive");
    for (const auto& p : patches) {
      if (p.id != pos_.size()) throw SurveyError("spatial index: patch ids must be dense and ordered");
      pos_.push_back({p.northing_m, p.easting_m});
      cells_[key(cell_of(p.easting_m), cell_of(p.northing_m))].push_back(p.id);
    }
  }

  explicit SpatialIndex(const SurveyManifest& m, double cell_size)
      : SpatialIndex(std::span<const GeoPatch>(m.patches), cell_size) {}

  std::size_t size() const { return pos_.size(); }
  double cell_size() const { return cell_; }

  // { j != i : dist(i, j) < r }, ascending ids.
  std::vector<std::size_t> radius_query(std::size_t i, double r) const {
    if (i >= pos_.size()) throw SurveyError("radius_query: unknown patch id " + std::to_string(i));
    if (!(r > 0.0)) throw SurveyError("radius_query: radius must be positive");
    const auto [ni, ei] = pos_[i];
    const auto reach = static_cast<std::int64_t>(std::ceil(r / cell_));
    const std::int64_t cx = cell_of(ei), cy = cell_of(ni);
    std::vector<std::size_t> out;
    for (std::int64_t dy = -reach; dy <= reach; ++dy)
      for (std::int64_t dx = -reach; dx <= reach; ++dx) {
        auto it = cells_.find(key(cx + dx, cy + dy));
        if (it == cells_.end()) continue;
        for (std::size_t j : it->second) {
          if (j == i) continue;
          const double dn = ni - pos_[j].northing, de = ei - pos_[j].easting;
          if (std::sqrt(dn * dn + de * de) < r) out.push_back(j);
        }
      }
    std::sort(out.begin(), out.end());
    return out;
  }

private:
  struct Pos {
    double northing, easting;
  };

  std::int64_t cell_of(double v) const { return static_cast<std::int64_t>(std::floor(v / cell_)); }
  static std::uint64_t key(std::int64_t x, std::int64_t y) {
    return (static_cast<std::uint64_t>(x) << 32) ^ (static_cast<std::uint64_t>(y) & 0xffffffffULL);
  }

  double cell_;
  std::vector<Pos> pos_;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> cells_;
};

}  // namespace geossl

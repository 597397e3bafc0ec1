#pragma once

#include <random>

#include "nestcal/data.hpp"
#include "nestcal/model.hpp"
#include "nestcal/taxonomy.hpp"

namespace nestcal::testing {

// Four fine classes on 8x8 images: class c lights up quadrant c. Coarse groups
// are {0, 1} (top half) and {2, 3} (bottom half).
inline Taxonomy quadrant_taxonomy() { return Taxonomy({2, 4}, {{}, {0, 0, 1, 1}}); }

inline Dataset quadrant_dataset(int n, std::uint64_t seed, double noise = 0.15) {
  Dataset ds;
  ds.height = ds.width = 8;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, noise);
  for (int k = 0; k < n; ++k) {
    const int c = static_cast<int>(rng() % 4);
    const int oy = (c / 2) * 4, ox = (c % 2) * 4;
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) {
        const bool on = y >= oy && y < oy + 4 && x >= ox && x < ox + 4;
        const double v = (on ? 0.8 : 0.1) + g(rng);
        ds.images.push_back(static_cast<float>(std::clamp(v, 0.0, 1.0)));
      }
    }
    ds.fine_labels.push_back(c);
  }
  return relabel(ds, quadrant_taxonomy());
}

inline NestedModelSpec quadrant_spec(Variant v = Variant::nested) {
  NestedModelSpec s;
  s.variant = v;
  s.height = s.width = 8;
  s.arities = v == Variant::end_to_end ? std::vector<int>{4} : std::vector<int>{2, 4};
  s.encoder_widths = {4, 4};
  s.decoder_widths = {4};
  s.head_hidden = 8;
  s.init_seed = 3;
  return s;
}

}  // namespace nestcal::testing

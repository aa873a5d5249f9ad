#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>

#include "pnet/dataio.hpp"
#include "pnet/rng.hpp"
#include "pnet/tensor.hpp"

namespace pnet::synthetic {

// Stand-in pressure maps with the real file layout. A body is drawn as a few
// Gaussian blobs; the coarse category sets its placement and width, the fine
// posture id sets limb offsets and tilt, the subject sets size and weight.

struct Options {
  int subjects = kNumSubjects;
  std::size_t frames = 12;
  double noise = 60.0;        // sensor counts
  double spike_rate = 0.002;  // fraction of cells replaced by a full-scale spike
  std::uint64_t seed = 1;
};

inline void add_blob(Tensor<float>& f, double cy, double cx, double sy, double sx, double tilt, double amp) {
  const double c = std::cos(tilt), s = std::sin(tilt);
  for (std::size_t r = 0; r < f.dim(0); ++r)
    for (std::size_t k = 0; k < f.dim(1); ++k) {
      const double y = static_cast<double>(r) - cy, x = static_cast<double>(k) - cx;
      const double u = (c * x + s * y) / sx, v = (-s * x + c * y) / sy;
      f.at(r, k) += static_cast<float>(amp * std::exp(-0.5 * (u * u + v * v)));
    }
}

/// One raw frame in sensor counts, H=32 x W=64 (W runs head to foot).
inline Tensor<float> frame(int subject, int posture, const Taxonomy& tax, SeededRng& rng,
                           const Options& opt = {}) {
  Tensor<float> f({kFrameH, kFrameW});
  const Category cat = tax.category(posture);
  const double size = 1.0 + 0.06 * (subject % 5) - 0.1;
  const double weight = 2500.0 + 280.0 * subject;
  const double jitter_y = rng.gaussian(0, 0.4), jitter_x = rng.gaussian(0, 0.6);
  const double tilt = 0.05 * (posture % 5 - 2) + rng.gaussian(0, 0.02);
  double cy = 15.5 + jitter_y, width = 4.5 * size;
  if (cat == Category::right) cy -= 6.0, width *= 0.55;
  if (cat == Category::left) cy += 6.0, width *= 0.55;
  const double head = 8.0 + 0.4 * (subject % 4) + jitter_x;
  add_blob(f, cy, head, 2.2 * size, 2.6 * size, 0, weight * 0.7);                      // head
  add_blob(f, cy, head + 14.0 * size, width, 8.0 * size, tilt, weight);                  // torso
  const double spread = 1.5 + 0.9 * ((posture * 7) % 5);
  const double legs_x = head + 34.0 * size;
  add_blob(f, cy - spread, legs_x, 1.6 * size, 9.0 * size, tilt + 0.04 * (posture % 3), weight * 0.55);
  add_blob(f, cy + spread, legs_x + 1.5 * ((posture * 3) % 4), 1.6 * size, 9.0 * size, tilt, weight * 0.55);
  if (posture % 2 == 0) add_blob(f, cy - width - 2.0, head + 12.0, 1.2, 5.0, 0.3, weight * 0.35);  // arm
  for (auto& v : f.data()) {
    v += static_cast<float>(rng.gaussian(0, opt.noise));
    if (rng.bernoulli(opt.spike_rate)) v = kSensorMax;
    v = std::clamp(std::round(v), 0.0F, kSensorMax);
  }
  return f;
}

/// Writes one record per frame in the default on-disk layout (64 rows of 32 values).
inline void write_sequence_file(const std::filesystem::path& path, const std::vector<Tensor<float>>& frames) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  for (const auto& f : frames) {
    for (std::size_t r = 0; r < kFrameW; ++r)
      for (std::size_t c = 0; c < kFrameH; ++c) {
        out << static_cast<int>(f.at(c, r));
        out << ((r + 1 == kFrameW && c + 1 == kFrameH) ? '\n' : ' ');
      }
  }
}

/// Writes <root>/S<k>/<stem>.txt for every subject and posture.
inline void write_dataset(const std::filesystem::path& root, const Options& opt,
                          const Taxonomy& tax = default_taxonomy()) {
  for (int s = 1; s <= opt.subjects; ++s)
    for (int p = 1; p <= kNumPostures; ++p) {
      SeededRng rng(derive_seed(opt.seed, static_cast<std::uint64_t>(s * 100 + p)));
      std::vector<Tensor<float>> frames;
      for (std::size_t t = 0; t < opt.frames; ++t) frames.push_back(frame(s, p, tax, rng, opt));
      write_sequence_file(root / ("S" + std::to_string(s)) / (tax.entries.at(p).stem + ".txt"), frames);
    }
}

}  // namespace pnet::synthetic

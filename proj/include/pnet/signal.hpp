#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "pnet/binio.hpp"
#include "pnet/dataio.hpp"
#include "pnet/errors.hpp"
#include "pnet/rng.hpp"
#include "pnet/tensor.hpp"

namespace pnet {

/// Preprocessed sequence: frames [T, H, W] with values in [0, 1].
struct CleanSequence {
  std::string source;
  int subject = 0;
  int posture = 0;
  Tensor<float> frames;

  std::size_t length() const { return frames.dim(0); }
  bool operator==(const CleanSequence&) const = default;
};

namespace detail {
inline void require_volume(const Shape& s, const char* what) {
  if (s.size() != 3) throw ShapeError(std::string(what) + ": expected [T,H,W], got " + shape_str(s));
}
inline void require_frame(const Shape& s, const char* what) {
  if (s.size() != 2) throw ShapeError(std::string(what) + ": expected [H,W], got " + shape_str(s));
}
}  // namespace detail

/// 3x3x3 median over (time, row, col) with clamp-to-edge boundaries.
template <typename T>
Tensor<T> median_filter_3d(const Tensor<T>& vol) {
  detail::require_volume(vol.shape(), "median_filter_3d");
  const std::ptrdiff_t nt = vol.dim(0), nh = vol.dim(1), nw = vol.dim(2);
  Tensor<T> out(vol.shape());
  const T* in = vol.ptr();
  T* o = out.ptr();
  auto clampi = [](std::ptrdiff_t v, std::ptrdiff_t n) { return std::clamp<std::ptrdiff_t>(v, 0, n - 1); };
  std::array<T, 27> win;
  for (std::ptrdiff_t t = 0; t < nt; ++t) {
    std::array<std::ptrdiff_t, 3> ts{clampi(t - 1, nt), t, clampi(t + 1, nt)};
    for (std::ptrdiff_t r = 0; r < nh; ++r) {
      std::array<std::ptrdiff_t, 3> rs{clampi(r - 1, nh), r, clampi(r + 1, nh)};
      for (std::ptrdiff_t c = 0; c < nw; ++c) {
        std::array<std::ptrdiff_t, 3> cs{clampi(c - 1, nw), c, clampi(c + 1, nw)};
        std::size_t k = 0;
        for (auto tt : ts)
          for (auto rr : rs) {
            const T* row = in + (tt * nh + rr) * nw;
            for (auto cc : cs) win[k++] = row[cc];
          }
        std::nth_element(win.begin(), win.begin() + 13, win.end());
        o[(t * nh + r) * nw + c] = win[13];
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> normalize_frames(const Tensor<T>& x, T full_scale = T(10000)) {
  Tensor<T> out = x;
  for (auto& v : out.data()) v = std::clamp(v / full_scale, T(0), T(1));
  return out;
}

/// Drops the first and last n frames; nullopt when nothing is left.
template <typename T>
std::optional<Tensor<T>> trim_sequence(const Tensor<T>& vol, std::size_t n = 3) {
  detail::require_volume(vol.shape(), "trim_sequence");
  const std::size_t len = vol.dim(0);
  if (len <= 2 * n) return std::nullopt;
  const std::size_t keep = len - 2 * n, plane = vol.dim(1) * vol.dim(2);
  Tensor<T> out({keep, vol.dim(1), vol.dim(2)});
  std::copy_n(vol.ptr() + n * plane, keep * plane, out.ptr());
  return out;
}

struct PreprocessOptions {
  float full_scale = kSensorMax;
  std::size_t trim = 3;
  double empty_threshold = 1.0;

  std::string describe() const {
    return "median3x3x3;scale=" + std::to_string(full_scale) + ";trim=" + std::to_string(trim) +
           ";empty<" + std::to_string(empty_threshold);
  }
};

/// Median filter, normalize, trim. Empty-frame removal runs over the whole set.
inline std::optional<CleanSequence> preprocess_sequence(const SampleSequence& raw,
                                                        const PreprocessOptions& opt,
                                                        std::vector<std::string>* warnings = nullptr) {
  auto trimmed = trim_sequence(normalize_frames(median_filter_3d(raw.frames), opt.full_scale), opt.trim);
  if (!trimmed) {
    if (warnings)
      warnings->push_back(raw.source.string() + ": " + std::to_string(raw.length()) +
                          " frames, nothing left after trimming " + std::to_string(opt.trim) +
                          " from each end");
    return std::nullopt;
  }
  return CleanSequence{raw.source.generic_string(), raw.subject, raw.posture, std::move(*trimmed)};
}

struct RemovalReport {
  struct Frame {
    std::string source;
    std::size_t index;
  };
  std::vector<Frame> empty_frames;
  std::vector<std::string> dropped_sequences;
};

struct DropResult {
  std::vector<CleanSequence> kept;
  RemovalReport report;
};

/// Removes frames whose sum is below threshold; drops sequences left with none.
inline DropResult drop_empty_samples(std::vector<CleanSequence> seqs, double threshold = 1.0) {
  DropResult res;
  for (auto& s : seqs) {
    const std::size_t plane = s.frames.dim(1) * s.frames.dim(2);
    std::vector<std::size_t> keep;
    for (std::size_t t = 0; t < s.length(); ++t) {
      const float* f = s.frames.ptr() + t * plane;
      double sum = 0;
      for (std::size_t i = 0; i < plane; ++i) sum += f[i];
      if (sum < threshold)
        res.report.empty_frames.push_back({s.source, t});
      else
        keep.push_back(t);
    }
    if (keep.empty()) {
      res.report.dropped_sequences.push_back(s.source);
      continue;
    }
    if (keep.size() != s.length()) {
      Tensor<float> f({keep.size(), s.frames.dim(1), s.frames.dim(2)});
      for (std::size_t i = 0; i < keep.size(); ++i)
        std::copy_n(s.frames.ptr() + keep[i] * plane, plane, f.ptr() + i * plane);
      s.frames = std::move(f);
    }
    res.kept.push_back(std::move(s));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Geometric transforms on single [H, W] frames.

template <typename T>
Tensor<T> rotate180(const Tensor<T>& f) {
  detail::require_frame(f.shape(), "rotate180");
  Tensor<T> out(f.shape());
  const std::size_t n = f.size();
  for (std::size_t i = 0; i < n; ++i) out[n - 1 - i] = f[i];
  return out;
}

namespace detail {

// out(r, c) samples src at the inverse image of (r, c) under
// "shift by (dx along W, dy along H), then rotate by angle about the center".
template <typename T>
void affine_into(const T* src, T* dst, std::size_t h, std::size_t w, int dx, int dy, double angle_deg) {
  const auto ih = static_cast<std::ptrdiff_t>(h), iw = static_cast<std::ptrdiff_t>(w);
  if (angle_deg == 0.0) {
    for (std::ptrdiff_t r = 0; r < ih; ++r)
      for (std::ptrdiff_t c = 0; c < iw; ++c) {
        const std::ptrdiff_t sr = r - dy, sc = c - dx;
        dst[r * iw + c] = (sr >= 0 && sr < ih && sc >= 0 && sc < iw) ? src[sr * iw + sc] : T(0);
      }
    return;
  }
  const double th = angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
  auto at = [&](std::ptrdiff_t r, std::ptrdiff_t c) -> double {
    return (r >= 0 && r < ih && c >= 0 && c < iw) ? static_cast<double>(src[r * iw + c]) : 0.0;
  };
  for (std::ptrdiff_t r = 0; r < ih; ++r)
    for (std::ptrdiff_t c = 0; c < iw; ++c) {
      const double y = static_cast<double>(r) - cy, x = static_cast<double>(c) - cx;
      // Inverse rotation, then inverse shift.
      const double sy = cs * y - sn * x + cy - dy;
      const double sx = sn * y + cs * x + cx - dx;
      const double fy = std::floor(sy), fx = std::floor(sx);
      const double ay = sy - fy, ax = sx - fx;
      const auto r0 = static_cast<std::ptrdiff_t>(fy), c0 = static_cast<std::ptrdiff_t>(fx);
      const double v = (1 - ay) * ((1 - ax) * at(r0, c0) + ax * at(r0, c0 + 1)) +
                       ay * ((1 - ax) * at(r0 + 1, c0) + ax * at(r0 + 1, c0 + 1));
      dst[r * iw + c] = static_cast<T>(v);
    }
}

}  // namespace detail

/// Integer shift (dx along W, dy along H) then bilinear rotation about the center, zero fill.
template <typename T>
Tensor<T> affine_transform(const Tensor<T>& f, int dx, int dy, double angle_deg) {
  detail::require_frame(f.shape(), "affine_transform");
  Tensor<T> out(f.shape());
  detail::affine_into(f.ptr(), out.ptr(), f.dim(0), f.dim(1), dx, dy, angle_deg);
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentPolicy {
  double p_rotate180 = 0.5;
  double p_shift_x = 0.2;
  double p_shift_y = 0.2;
  double p_rotate = 0.2;
  int max_shift_x = 6;  // 10% of 64 columns
  int max_shift_y = 3;  // 10% of 32 rows
  double max_angle = 25.0;

  static AugmentPolicy none() { return {0, 0, 0, 0}; }

  void validate() const {
    for (double p : {p_rotate180, p_shift_x, p_shift_y, p_rotate})
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("augmentation probability outside [0,1]");
    if (max_shift_x < 0 || max_shift_y < 0 || !(max_angle >= 0.0))
      throw ConfigError("augmentation magnitudes must be non-negative");
  }
};

struct AugmentDraw {
  std::array<bool, 4> fired{};  // rotate180, shift x, shift y, rotate
  int dx = 0;
  int dy = 0;
  double angle = 0.0;
};

/// Draws the random choices for one sample; a probability and magnitude per step, in table order.
inline AugmentDraw draw_augment(const AugmentPolicy& p, SeededRng& rng) {
  AugmentDraw d;
  d.fired[0] = rng.bernoulli(p.p_rotate180);
  d.fired[1] = rng.bernoulli(p.p_shift_x);
  if (d.fired[1]) d.dx = static_cast<int>(rng.uniform_int(-p.max_shift_x, p.max_shift_x));
  d.fired[2] = rng.bernoulli(p.p_shift_y);
  if (d.fired[2]) d.dy = static_cast<int>(rng.uniform_int(-p.max_shift_y, p.max_shift_y));
  d.fired[3] = rng.bernoulli(p.p_rotate);
  if (d.fired[3]) d.angle = rng.uniform(-p.max_angle, p.max_angle);
  return d;
}

/// Applies a draw in place to one frame stored at `data` ([h, w]); scratch must hold h*w values.
template <typename T>
void apply_augment(T* data, std::size_t h, std::size_t w, const AugmentDraw& d, std::vector<T>& scratch) {
  const std::size_t n = h * w;
  if (d.fired[0]) std::reverse(data, data + n);
  if (d.dx == 0 && d.dy == 0 && d.angle == 0.0) return;
  scratch.assign(data, data + n);
  detail::affine_into(scratch.data(), data, h, w, d.dx, d.dy, d.angle);
  for (std::size_t i = 0; i < n; ++i) data[i] = std::clamp(data[i], T(0), T(1));
}

template <typename T>
struct AugmentResult {
  Tensor<T> frame;
  AugmentDraw draw;
};

template <typename T>
AugmentResult<T> augment_sample(const Tensor<T>& f, const AugmentPolicy& p, SeededRng& rng) {
  detail::require_frame(f.shape(), "augment_sample");
  p.validate();
  AugmentResult<T> res{f, draw_augment(p, rng)};
  std::vector<T> scratch;
  apply_augment(res.frame.ptr(), f.dim(0), f.dim(1), res.draw, scratch);
  return res;
}

// ---------------------------------------------------------------------------
// Sequence cache: "PSEQ1", labels, shape, source, float32 payload, FNV-1a checksum.

inline constexpr std::string_view kSeqMagic = "PSEQ1";

inline std::string encode_sequence(const CleanSequence& s) {
  ByteWriter w;
  w.bytes(kSeqMagic);
  w.u32(static_cast<std::uint32_t>(s.subject));
  w.u32(static_cast<std::uint32_t>(s.posture));
  for (std::size_t i = 0; i < 3; ++i) w.u32(static_cast<std::uint32_t>(s.frames.dim(i)));
  w.str(s.source);
  for (float v : s.frames.data()) w.f32(v);
  w.u64(fnv1a(w.buffer()));
  return w.take();
}

inline CleanSequence decode_sequence(std::string_view bytes) {
  if (bytes.size() < kSeqMagic.size() + 8 || bytes.substr(0, kSeqMagic.size()) != kSeqMagic)
    throw LoadError("not a sequence cache file (bad magic)");
  ByteReader tail(bytes.substr(bytes.size() - 8));
  if (tail.u64() != fnv1a(bytes.substr(0, bytes.size() - 8)))
    throw LoadError("sequence cache checksum mismatch");
  ByteReader r(bytes.substr(0, bytes.size() - 8));
  r.bytes(kSeqMagic.size());
  CleanSequence s;
  s.subject = static_cast<int>(r.u32());
  s.posture = static_cast<int>(r.u32());
  Shape shape{r.u32(), r.u32(), r.u32()};
  s.source = r.str();
  if (shape_numel(shape) == 0) throw LoadError("sequence cache has an empty shape");
  if (shape_numel(shape) * 4 != r.remaining()) throw LoadError("sequence cache payload size mismatch");
  s.frames = Tensor<float>(shape);
  for (auto& v : s.frames.data()) v = r.f32();
  return s;
}

inline void save_sequence(const std::filesystem::path& p, const CleanSequence& s) {
  write_file_bytes(p, encode_sequence(s));
}

inline CleanSequence load_sequence(const std::filesystem::path& p) {
  return decode_sequence(read_file_bytes(p));
}

}  // namespace pnet

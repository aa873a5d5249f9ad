#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "pnet/errors.hpp"
#include "pnet/tensor.hpp"

namespace pnet {

inline constexpr std::size_t kFrameH = 32;
inline constexpr std::size_t kFrameW = 64;
inline constexpr std::size_t kFrameCells = kFrameH * kFrameW;
inline constexpr int kNumSubjects = 13;
inline constexpr int kNumPostures = 17;
inline constexpr float kSensorMax = 10000.0F;

enum class Delimiter { whitespace, comma };

// How one text record maps onto the H x W frame. With the defaults a record
// holds 64 rows of 32 values and is transposed into a 32 x 64 frame.
struct FrameFormat {
  Delimiter delimiter = Delimiter::whitespace;
  std::size_t record_rows = 64;
  std::size_t record_cols = 32;
  bool transpose = true;

  std::size_t fields() const { return record_rows * record_cols; }
  std::size_t frame_h() const { return transpose ? record_cols : record_rows; }
  std::size_t frame_w() const { return transpose ? record_rows : record_cols; }
};

struct SampleSequence {
  std::filesystem::path source;
  int subject = 0;
  int posture = 0;
  Tensor<float> frames;              // [T, H, W], raw sensor counts
  std::size_t out_of_range = 0;      // values outside [0, 10000], kept as-is

  std::size_t length() const { return frames.dim(0); }
  Tensor<float> frame(std::size_t t) const {
    const std::size_t h = frames.dim(1), w = frames.dim(2);
    if (t >= length())
      throw UsageError("frame index " + std::to_string(t) + " out of range (" +
                       std::to_string(length()) + " frames)");
    Tensor<float> out({h, w});
    std::copy_n(frames.ptr() + t * h * w, h * w, out.ptr());
    return out;
  }
};

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line, Delimiter d) {
  std::vector<std::string_view> out;
  auto is_ws = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  if (d == Delimiter::whitespace) {
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && is_ws(line[i])) ++i;
      std::size_t j = i;
      while (j < line.size() && !is_ws(line[j])) ++j;
      if (j > i) out.push_back(line.substr(i, j - i));
      i = j;
    }
  } else {
    while (!line.empty() && is_ws(line.back())) line.remove_suffix(1);
    std::size_t start = 0;
    while (true) {
      std::size_t comma = line.find(',', start);
      std::string_view f = line.substr(start, comma == std::string_view::npos ? line.npos : comma - start);
      while (!f.empty() && is_ws(f.front())) f.remove_prefix(1);
      while (!f.empty() && is_ws(f.back())) f.remove_suffix(1);
      out.push_back(f);
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
  }
  return out;
}

inline bool blank_line(std::string_view line) {
  return std::all_of(line.begin(), line.end(),
                     [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; });
}

inline std::optional<double> parse_number(std::string_view s) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

}  // namespace detail

// Parses one file: one record per non-blank line, records in file order.
inline SampleSequence parse_frame_stream(std::istream& in, const std::string& name,
                                         const FrameFormat& fmt, int subject, int posture) {
  const std::size_t nf = fmt.fields(), h = fmt.frame_h(), w = fmt.frame_w();
  std::vector<float> values;
  std::size_t records = 0, out_of_range = 0, lineno = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::blank_line(line)) continue;
    auto fields = detail::split_fields(line, fmt.delimiter);
    if (fields.size() != nf)
      throw ParseError(name + ": line " + std::to_string(lineno) + " (record " +
                       std::to_string(records) + "): expected " + std::to_string(nf) +
                       " fields, found " + std::to_string(fields.size()));
    const std::size_t base = values.size();
    values.resize(base + nf);
    for (std::size_t i = 0; i < nf; ++i) {
      auto v = detail::parse_number(fields[i]);
      if (!v)
        throw ParseError(name + ": line " + std::to_string(lineno) + " (record " +
                         std::to_string(records) + "), field " + std::to_string(i) +
                         ": non-numeric value '" + std::string(fields[i]) + "'");
      if (*v < 0.0 || *v > kSensorMax) ++out_of_range;
      const std::size_t r = i / fmt.record_cols, c = i % fmt.record_cols;
      const std::size_t dst = fmt.transpose ? c * w + r : r * w + c;
      values[base + dst] = static_cast<float>(*v);
    }
    ++records;
  }
  if (records == 0) throw IngestError(name + ": file contains no records");
  SampleSequence seq;
  seq.source = name;
  seq.subject = subject;
  seq.posture = posture;
  seq.frames = Tensor<float>({records, h, w});
  std::copy(values.begin(), values.end(), seq.frames.ptr());
  seq.out_of_range = out_of_range;
  return seq;
}

inline SampleSequence parse_frame_file(const std::filesystem::path& path, const FrameFormat& fmt,
                                       int subject, int posture) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open " + path.string());
  auto seq = parse_frame_stream(in, path.string(), fmt, subject, posture);
  seq.source = path;
  return seq;
}

// ---------------------------------------------------------------------------
// Taxonomy

enum class Category { supine = 0, right = 1, left = 2 };
inline constexpr int kNumCategories = 3;

inline std::string to_string(Category c) {
  switch (c) {
    case Category::supine: return "supine";
    case Category::right: return "right";
    case Category::left: return "left";
  }
  return "?";
}

inline std::optional<Category> parse_category(std::string_view s) {
  if (s == "supine") return Category::supine;
  if (s == "right") return Category::right;
  if (s == "left") return Category::left;
  return std::nullopt;
}

// Posture id -> (coarse category, on-disk file stem).
struct Taxonomy {
  struct Entry {
    Category category;
    std::string stem;
  };
  std::map<int, Entry> entries;

  Category category(int id) const {
    auto it = entries.find(id);
    if (it == entries.end()) throw LabelError("unknown posture id " + std::to_string(id));
    return it->second.category;
  }
  std::optional<int> id_for_stem(const std::string& stem) const {
    for (const auto& [id, e] : entries)
      if (e.stem == stem) return id;
    return std::nullopt;
  }
  std::array<int, kNumPostures> category_table() const {
    std::array<int, kNumPostures> t{};
    for (int id = 1; id <= kNumPostures; ++id) t[id - 1] = static_cast<int>(category(id));
    return t;
  }
  bool operator==(const Taxonomy& o) const {
    if (entries.size() != o.entries.size()) return false;
    for (const auto& [id, e] : entries) {
      auto it = o.entries.find(id);
      if (it == o.entries.end() || it->second.category != e.category || it->second.stem != e.stem)
        return false;
    }
    return true;
  }
};

inline Category map_posture_category(int posture_id, const Taxonomy& tax) {
  return tax.category(posture_id);
}

// Ids 1-9 are supine variants (7-9 on an inclined bed), 10-13 right, 14-17 left.
// Stems name the experiment files of the public recording session.
inline Taxonomy default_taxonomy() {
  Taxonomy t;
  const std::array<std::pair<Category, int>, kNumPostures> table{{
      {Category::supine, 1},  {Category::supine, 8},  {Category::supine, 9},
      {Category::supine, 10}, {Category::supine, 11}, {Category::supine, 12},
      {Category::supine, 15}, {Category::supine, 16}, {Category::supine, 17},
      {Category::right, 2},   {Category::right, 4},   {Category::right, 5},
      {Category::right, 13},  {Category::left, 3},    {Category::left, 6},
      {Category::left, 7},    {Category::left, 14},
  }};
  for (int id = 1; id <= kNumPostures; ++id)
    t.entries[id] = {table[id - 1].first, std::to_string(table[id - 1].second)};
  return t;
}

inline void validate_taxonomy(const Taxonomy& t) {
  std::vector<int> missing;
  for (int id = 1; id <= kNumPostures; ++id)
    if (!t.entries.count(id)) missing.push_back(id);
  if (!missing.empty()) {
    std::string msg = "taxonomy: unmapped posture id(s):";
    for (int id : missing) msg += " " + std::to_string(id);
    throw ConfigError(msg);
  }
  for (const auto& [id, e] : t.entries)
    if (id < 1 || id > kNumPostures)
      throw ConfigError("taxonomy: posture id " + std::to_string(id) + " outside 1.." +
                        std::to_string(kNumPostures));
  std::map<std::string, int> stems;
  for (const auto& [id, e] : t.entries)
    if (!stems.emplace(e.stem, id).second)
      throw ConfigError("taxonomy: stem '" + e.stem + "' used by ids " +
                        std::to_string(stems[e.stem]) + " and " + std::to_string(id));
}

// Format: "<id> <category> [stem]" per line; '#' starts a comment.
inline Taxonomy parse_taxonomy(std::istream& in, const std::string& name = "taxonomy") {
  Taxonomy t;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    auto f = detail::split_fields(line, Delimiter::whitespace);
    if (f.empty()) continue;
    auto where = name + ":" + std::to_string(lineno);
    if (f.size() < 2 || f.size() > 3) throw ConfigError(where + ": expected 'id category [stem]'");
    int id = 0;
    auto [p, ec] = std::from_chars(f[0].data(), f[0].data() + f[0].size(), id);
    if (ec != std::errc() || p != f[0].data() + f[0].size())
      throw ConfigError(where + ": bad posture id '" + std::string(f[0]) + "'");
    auto cat = parse_category(f[1]);
    if (!cat) throw ConfigError(where + ": unknown category '" + std::string(f[1]) + "'");
    std::string stem = f.size() == 3 ? std::string(f[2]) : std::to_string(id);
    if (!t.entries.emplace(id, Taxonomy::Entry{*cat, stem}).second)
      throw ConfigError(where + ": duplicate posture id " + std::to_string(id));
  }
  validate_taxonomy(t);
  return t;
}

inline Taxonomy load_taxonomy(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open taxonomy file " + path.string());
  return parse_taxonomy(in, path.string());
}

inline std::string format_taxonomy(const Taxonomy& t) {
  std::ostringstream os;
  os << "# posture_id category file_stem\n";
  for (const auto& [id, e] : t.entries) os << id << ' ' << to_string(e.category) << ' ' << e.stem << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
  std::string path;  // relative to the dataset root
  int subject = 0;
  int posture = 0;
  std::size_t frames = 0;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> warnings;
  Taxonomy taxonomy;

  std::size_t total_frames() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.frames;
    return n;
  }
  std::vector<int> subjects() const {
    std::vector<int> s;
    for (const auto& e : entries) s.push_back(e.subject);
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    return s;
  }
};

// Layout rule: <root>/S<subject>/<stem>.txt, subject from the directory name,
// posture from the taxonomy entry whose stem matches the file stem.
inline constexpr const char* kLayoutRule = "<root>/S<subject>/<stem>.txt; posture = taxonomy id with that stem";

inline std::size_t count_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open " + path.string());
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line))
    if (!detail::blank_line(line)) ++n;
  return n;
}

inline DatasetManifest build_manifest(const std::filesystem::path& root, const Taxonomy& tax) {
  namespace fs = std::filesystem;
  validate_taxonomy(tax);
  if (!fs::is_directory(root))
    throw IngestError("dataset root '" + root.string() + "' is not a directory; expected layout " +
                      kLayoutRule);
  DatasetManifest m;
  m.taxonomy = tax;
  const std::regex subject_re("[Ss]([0-9]+)");
  std::vector<fs::path> dirs;
  for (const auto& d : fs::directory_iterator(root))
    if (d.is_directory()) dirs.push_back(d.path());
  std::sort(dirs.begin(), dirs.end());
  for (const auto& dir : dirs) {
    std::smatch sm;
    const std::string dname = dir.filename().string();
    if (!std::regex_match(dname, sm, subject_re)) {
      m.warnings.push_back("ignored directory " + dname);
      continue;
    }
    const int subject = std::stoi(sm[1]);
    std::vector<fs::path> files;
    for (const auto& f : fs::directory_iterator(dir))
      if (f.is_regular_file() && f.path().extension() == ".txt") files.push_back(f.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      auto id = tax.id_for_stem(f.stem().string());
      if (!id) {
        m.warnings.push_back("no taxonomy entry for " + fs::relative(f, root).generic_string());
        continue;
      }
      m.entries.push_back({fs::relative(f, root).generic_string(), subject, *id, count_records(f)});
    }
  }
  if (m.entries.empty())
    throw IngestError("no sequence files under '" + root.string() + "'; expected layout " + kLayoutRule);
  std::stable_sort(m.entries.begin(), m.entries.end(), [](const auto& a, const auto& b) {
    return std::tie(a.subject, a.posture, a.path) < std::tie(b.subject, b.posture, b.path);
  });
  for (int s : m.subjects())
    for (int p = 1; p <= kNumPostures; ++p) {
      bool found = std::any_of(m.entries.begin(), m.entries.end(),
                               [&](const auto& e) { return e.subject == s && e.posture == p; });
      if (!found)
        m.warnings.push_back("missing subject " + std::to_string(s) + " posture " + std::to_string(p));
    }
  return m;
}

inline std::string format_manifest(const DatasetManifest& m) {
  std::ostringstream os;
  os << "# pnet manifest v1\n# layout: " << kLayoutRule << "\n# path\tsubject\tposture\tframes\n";
  for (const auto& w : m.warnings) os << "# warning: " << w << '\n';
  for (const auto& e : m.entries)
    os << e.path << '\t' << e.subject << '\t' << e.posture << '\t' << e.frames << '\n';
  return os.str();
}

inline DatasetManifest parse_manifest(std::istream& in, const Taxonomy& tax) {
  DatasetManifest m;
  m.taxonomy = tax;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.rfind("# warning: ", 0) == 0) {
      m.warnings.push_back(line.substr(11));
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ManifestEntry e;
    if (!std::getline(ls, e.path, '\t') || !(ls >> e.subject >> e.posture >> e.frames))
      throw ParseError("manifest line " + std::to_string(lineno) + ": malformed entry");
    m.entries.push_back(e);
  }
  return m;
}

}  // namespace pnet

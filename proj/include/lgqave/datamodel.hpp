#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lgqave/numcore/tensor.hpp"

namespace lgqave::data {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr std::size_t kMaxBoxes = 10;
inline constexpr std::size_t kMaxTokensPerFrame = 100;
inline constexpr std::array<char, 5> kTensorMagic = {'L', 'G', 'Q', 'E', '1'};
inline constexpr std::uint8_t kDtypeF32 = 0x01;

/// Malformed tensor file; offset is the first byte that could not be accepted.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& source, std::size_t offset, const std::string& what)
      : std::runtime_error(source + ": format error at byte offset " + std::to_string(offset) + ": " + what),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Episode that failed to load or validate.
class LoadError : public std::runtime_error {
 public:
  LoadError(const std::string& episode_id, const std::string& what)
      : std::runtime_error("episode '" + episode_id + "': " + what), episode_id_(episode_id) {}
  const std::string& episode_id() const { return episode_id_; }

 private:
  std::string episode_id_;
};

// ---------------------------------------------------------------------------
// LGQE1 tensor files

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_tensor(const Tensor<float>& t) {
  std::vector<std::uint8_t> out(kTensorMagic.begin(), kTensorMagic.end());
  out.push_back(kDtypeF32);
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
  out.reserve(out.size() + 4 * t.size());
  for (float v : t.storage()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline Tensor<float> decode_tensor(const std::vector<std::uint8_t>& bytes, const std::string& source = "<memory>") {
  const std::size_t n = bytes.size();
  for (std::size_t i = 0; i < kTensorMagic.size(); ++i) {
    if (i >= n) throw FormatError(source, i, "truncated magic");
    if (bytes[i] != static_cast<std::uint8_t>(kTensorMagic[i])) throw FormatError(source, i, "bad magic");
  }
  std::size_t pos = kTensorMagic.size();
  if (pos >= n) throw FormatError(source, pos, "missing dtype byte");
  if (bytes[pos] != kDtypeF32) throw FormatError(source, pos, "unsupported dtype " + std::to_string(bytes[pos]));
  ++pos;
  if (pos + 4 > n) throw FormatError(source, pos, "truncated rank field");
  const std::uint32_t rank = detail::get_u32(bytes.data() + pos);
  if (rank > Tensor<float>::kMaxRank) throw FormatError(source, pos, "rank " + std::to_string(rank) + " exceeds 3");
  pos += 4;
  Shape shape;
  for (std::uint32_t r = 0; r < rank; ++r) {
    if (pos + 4 > n) throw FormatError(source, pos, "truncated dimension field");
    shape.push_back(detail::get_u32(bytes.data() + pos));
    pos += 4;
  }
  const std::size_t count = shape_product(shape);
  const std::size_t need = 4 * count;
  if (n - pos < need) {
    // First payload byte that is missing.
    throw FormatError(source, n, "truncated payload: expected " + std::to_string(need) + " bytes, found " +
                                     std::to_string(n - pos));
  }
  if (n - pos > need) throw FormatError(source, pos + need, "trailing bytes after payload");
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) data[i] = std::bit_cast<float>(detail::get_u32(bytes.data() + pos + 4 * i));
  return Tensor<float>(std::move(shape), std::move(data));
}

inline void write_tensor(const fs::path& path, const Tensor<float>& t) {
  const auto bytes = encode_tensor(t);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

inline std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline Tensor<float> read_tensor(const fs::path& path) { return decode_tensor(read_bytes(path), path.string()); }

// ---------------------------------------------------------------------------
// Records

/// Normalized image-space box, x1 < x2 and y1 < y2 inside [0, 1].
struct Box {
  float x1 = 0, y1 = 0, x2 = 1, y2 = 1;
  friend bool operator==(const Box&, const Box&) = default;
};

struct FrameRecord {
  int t = 0;
  Tensor<float> patch_embeddings;  // N x C
  std::vector<Box> boxes;          // m <= 10
  Tensor<float> roi_features;      // m x C
  Tensor<float> spatial_features;  // m x 4
  Tensor<float> frame_feature;     // C

  std::size_t num_objects() const { return boxes.size(); }
  std::size_t width() const { return patch_embeddings.cols(); }

  /// Throws std::invalid_argument describing the first violated invariant.
  void validate() const {
    const std::size_t m = boxes.size();
    if (m > kMaxBoxes) throw std::invalid_argument("m exceeds 10 (got " + std::to_string(m) + " boxes)");
    if (t < 0) throw std::invalid_argument("negative frame index");
    if (patch_embeddings.rank() != 2 || patch_embeddings.rows() == 0) {
      throw std::invalid_argument("patch embeddings must be a nonempty N x C matrix");
    }
    if (patch_embeddings.rows() > kMaxTokensPerFrame) throw std::invalid_argument("more than 100 tokens per frame");
    const std::size_t c = patch_embeddings.cols();
    if (roi_features.rank() != 2 || roi_features.dim(0) != m || roi_features.dim(1) != c) {
      throw std::invalid_argument("roi features must be m x C");
    }
    if (spatial_features.rank() != 2 || spatial_features.dim(0) != m || spatial_features.dim(1) != 4) {
      throw std::invalid_argument("spatial features must be m x 4");
    }
    if (frame_feature.rank() != 1 || frame_feature.size() != c) throw std::invalid_argument("frame feature must be C");
    for (const auto& b : boxes) {
      if (!(b.x1 < b.x2 && b.y1 < b.y2)) throw std::invalid_argument("degenerate box (need x1<x2, y1<y2)");
      for (float v : {b.x1, b.y1, b.x2, b.y2})
        if (!(v >= 0.f && v <= 1.f)) throw std::invalid_argument("box coordinate outside [0,1]");
    }
    for (const auto* t : {&patch_embeddings, &roi_features, &spatial_features, &frame_feature})
      if (!t->all_finite()) throw std::invalid_argument("non-finite value in frame tensors");
  }
};

enum class QaMode { kMultiChoice, kOpenEnded };

inline std::string to_string(QaMode m) { return m == QaMode::kMultiChoice ? "multi_choice" : "open_ended"; }

inline QaMode parse_qa_mode(const std::string& s) {
  if (s == "multi_choice") return QaMode::kMultiChoice;
  if (s == "open_ended") return QaMode::kOpenEnded;
  throw std::invalid_argument("qa_mode must be multi_choice or open_ended");
}

struct Episode {
  std::string video_id;
  std::vector<FrameRecord> frames;
  Tensor<float> question_tokens;  // M x C_text
  Tensor<float> answer_bank;      // |A| x C_text
  QaMode qa_mode = QaMode::kMultiChoice;
  std::size_t label = 0;
  std::string category;

  std::size_t num_answers() const { return answer_bank.rank() == 2 ? answer_bank.rows() : 0; }

  void validate() const {
    try {
      if (video_id.empty()) throw std::invalid_argument("empty video_id");
      if (frames.empty()) throw std::invalid_argument("episode has no frames");
      if (question_tokens.rank() != 2 || question_tokens.rows() == 0) {
        throw std::invalid_argument("question must be a nonempty M x C_text matrix");
      }
      if (answer_bank.rank() != 2 || answer_bank.rows() == 0) throw std::invalid_argument("empty answer bank");
      if (answer_bank.cols() != question_tokens.cols()) {
        throw std::invalid_argument("answer bank width differs from question width");
      }
      if (label >= answer_bank.rows()) {
        throw std::invalid_argument("label " + std::to_string(label) + " out of range for " +
                                    std::to_string(answer_bank.rows()) + " answers");
      }
      if (!question_tokens.all_finite() || !answer_bank.all_finite()) {
        throw std::invalid_argument("non-finite value in text tensors");
      }
      const std::size_t c = frames.front().width();
      int prev = -1;
      for (const auto& f : frames) {
        f.validate();
        if (f.width() != c) throw std::invalid_argument("frames disagree on embedding width");
        if (f.t <= prev) throw std::invalid_argument("frame indices must be strictly increasing");
        prev = f.t;
      }
    } catch (const std::invalid_argument& e) {
      throw LoadError(video_id, e.what());
    }
  }
};

/// FrameRecord whose object tensors are zero-padded to m_max rows, plus the
/// node mask (1 = real object, 0 = padding). `record.boxes` keeps the real boxes.
struct PaddedFrame {
  FrameRecord record;
  std::vector<std::uint8_t> node_mask;
};

inline PaddedFrame pad_grounding(const FrameRecord& rec, std::size_t m_max = kMaxBoxes) {
  const std::size_t m = rec.num_objects();
  if (m > m_max) throw std::invalid_argument("pad_grounding: m exceeds m_max");
  PaddedFrame out{rec, std::vector<std::uint8_t>(m_max, 0)};
  const std::size_t c = rec.width();
  Tensor<float> roi({m_max, c});
  Tensor<float> sp({m_max, 4});
  std::copy(rec.roi_features.storage().begin(), rec.roi_features.storage().end(), roi.data());
  std::copy(rec.spatial_features.storage().begin(), rec.spatial_features.storage().end(), sp.data());
  out.record.roi_features = std::move(roi);
  out.record.spatial_features = std::move(sp);
  for (std::size_t i = 0; i < m; ++i) out.node_mask[i] = 1;
  return out;
}

// ---------------------------------------------------------------------------
// NDJSON manifest

namespace detail {

inline void require_keys(const json& obj, const std::set<std::string>& keys, const std::string& what) {
  if (!obj.is_object()) throw std::invalid_argument(what + " must be a JSON object");
  for (const auto& k : keys)
    if (!obj.contains(k)) throw std::invalid_argument(what + " missing key '" + k + "'");
  for (const auto& [k, v] : obj.items())
    if (!keys.count(k)) throw std::invalid_argument(what + " has unknown key '" + k + "'");
}

inline std::string get_string(const json& obj, const char* key) {
  const auto& v = obj.at(key);
  if (!v.is_string()) throw std::invalid_argument(std::string("'") + key + "' must be a string");
  return v.get<std::string>();
}

inline std::int64_t get_int(const json& obj, const char* key) {
  const auto& v = obj.at(key);
  if (!v.is_number_integer()) throw std::invalid_argument(std::string("'") + key + "' must be an integer");
  return v.get<std::int64_t>();
}

inline Tensor<float> load_ref(const fs::path& base, const std::string& rel) {
  if (rel.empty()) throw std::invalid_argument("empty tensor file reference");
  const fs::path p = base / rel;
  if (!fs::exists(p)) throw std::invalid_argument("missing file " + p.string());
  return read_tensor(p);
}

}  // namespace detail

/// Loads and validates one manifest entry; file references resolve against base_dir.
inline Episode load_episode(const json& entry, const fs::path& base_dir) {
  std::string id = "<unknown>";
  if (entry.is_object() && entry.contains("video_id") && entry["video_id"].is_string()) {
    id = entry["video_id"].get<std::string>();
  }
  Episode ep;
  try {
    detail::require_keys(entry, {"video_id", "question_file", "answers_file", "label", "qa_mode", "category", "frames"},
                         "manifest entry");
    ep.video_id = detail::get_string(entry, "video_id");
    ep.category = detail::get_string(entry, "category");
    ep.qa_mode = parse_qa_mode(detail::get_string(entry, "qa_mode"));
    const std::int64_t label = detail::get_int(entry, "label");
    if (label < 0) throw std::invalid_argument("negative label");
    ep.label = static_cast<std::size_t>(label);
    ep.question_tokens = detail::load_ref(base_dir, detail::get_string(entry, "question_file"));
    ep.answer_bank = detail::load_ref(base_dir, detail::get_string(entry, "answers_file"));
    const auto& frames = entry.at("frames");
    if (!frames.is_array()) throw std::invalid_argument("'frames' must be an array");
    for (const auto& fr : frames) {
      detail::require_keys(fr, {"t", "embeddings_file", "grounding_file"}, "frame entry");
      FrameRecord rec;
      const std::int64_t t = detail::get_int(fr, "t");
      if (t < 0 || t > std::numeric_limits<int>::max()) throw std::invalid_argument("frame index out of range");
      rec.t = static_cast<int>(t);
      rec.patch_embeddings = detail::load_ref(base_dir, detail::get_string(fr, "embeddings_file"));
      const fs::path gpath = base_dir / detail::get_string(fr, "grounding_file");
      if (!fs::exists(gpath)) throw std::invalid_argument("missing file " + gpath.string());
      std::ifstream gs(gpath);
      json g = json::parse(gs, nullptr, false);
      if (g.is_discarded()) throw std::invalid_argument("grounding file is not valid JSON: " + gpath.string());
      detail::require_keys(g, {"boxes", "roi_file", "spatial_file", "frame_feature_file"}, "grounding file");
      if (!g["boxes"].is_array()) throw std::invalid_argument("'boxes' must be an array");
      for (const auto& b : g["boxes"]) {
        if (!b.is_array() || b.size() != 4) throw std::invalid_argument("each box needs 4 coordinates");
        for (const auto& v : b)
          if (!v.is_number()) throw std::invalid_argument("box coordinates must be numbers");
        rec.boxes.push_back({b[0].get<float>(), b[1].get<float>(), b[2].get<float>(), b[3].get<float>()});
      }
      if (rec.boxes.size() > kMaxBoxes) {
        throw std::invalid_argument("m exceeds 10 (got " + std::to_string(rec.boxes.size()) + " boxes)");
      }
      const fs::path gdir = gpath.parent_path();
      rec.roi_features = detail::load_ref(gdir, detail::get_string(g, "roi_file"));
      rec.spatial_features = detail::load_ref(gdir, detail::get_string(g, "spatial_file"));
      rec.frame_feature = detail::load_ref(gdir, detail::get_string(g, "frame_feature_file"));
      ep.frames.push_back(std::move(rec));
    }
  } catch (const LoadError&) {
    throw;
  } catch (const std::exception& e) {
    throw LoadError(id, e.what());
  }
  ep.validate();
  return ep;
}

/// Writes an episode's tensors and grounding files under dir (names prefixed by
/// stem) and returns the manifest entry, with paths relative to dir.
inline json save_episode(const Episode& ep, const fs::path& dir, const std::string& stem) {
  ep.validate();
  fs::create_directories(dir);
  auto put = [&](const std::string& name, const Tensor<float>& t) {
    write_tensor(dir / name, t);
    return name;
  };
  json entry;
  entry["video_id"] = ep.video_id;
  entry["question_file"] = put(stem + ".q.lgqe", ep.question_tokens);
  entry["answers_file"] = put(stem + ".a.lgqe", ep.answer_bank);
  entry["label"] = ep.label;
  entry["qa_mode"] = to_string(ep.qa_mode);
  entry["category"] = ep.category;
  entry["frames"] = json::array();
  for (const auto& f : ep.frames) {
    const std::string fs = stem + ".f" + std::to_string(f.t);
    json g;
    g["boxes"] = json::array();
    for (const auto& b : f.boxes) g["boxes"].push_back({b.x1, b.y1, b.x2, b.y2});
    g["roi_file"] = put(fs + ".roi.lgqe", f.roi_features);
    g["spatial_file"] = put(fs + ".sp.lgqe", f.spatial_features);
    g["frame_feature_file"] = put(fs + ".ff.lgqe", f.frame_feature);
    {
      std::ofstream os(dir / (fs + ".grd.json"), std::ios::trunc);
      if (!os) throw std::runtime_error("cannot write " + (dir / (fs + ".grd.json")).string());
      os << g.dump() << '\n';
    }
    entry["frames"].push_back({{"t", f.t}, {"embeddings_file", put(fs + ".emb.lgqe", f.patch_embeddings)},
                               {"grounding_file", fs + ".grd.json"}});
  }
  return entry;
}

inline void write_manifest(const fs::path& path, const std::vector<json>& entries) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write manifest " + path.string());
  for (const auto& e : entries) os << e.dump() << '\n';
}

/// Loads every line of an NDJSON manifest (blank lines skipped).
inline std::vector<Episode> load_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open manifest " + path.string());
  std::vector<Episode> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json entry = json::parse(line, nullptr, false);
    if (entry.is_discarded()) {
      throw LoadError("<line " + std::to_string(lineno) + ">", "manifest line is not valid JSON");
    }
    out.push_back(load_episode(entry, path.parent_path()));
  }
  return out;
}

}  // namespace lgqave::data

#pragma once

// Survey manifest files (JSON lines) and raw image blobs.
//
//   line 1:  {"type":"header","class_names":[...],"patch_interval_m":x,
//             "generator":{...}|null,"seed":n|null}
//   line k:  {"id":i,"northing_m":n,"easting_m":e,"label":c|null,"image_ref":ref}
//
// image_ref is either a path relative to the manifest's directory or
// "inline:" followed by the base64 encoding of the blob bytes.
//
// Blob: "GSSL", u32 H, u32 W, u32 C, then H*W*C float32, all little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "geossl/survey.hpp"

namespace geossl {

namespace detail {

template <class T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.insert(out.end(), bytes, bytes + sizeof(T));
}

template <class T>
T get_le(const std::uint8_t* p) {
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

constexpr std::string_view kB64 =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string base64_encode(const std::vector<std::uint8_t>& in) {
  std::string out;
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const std::uint32_t v = (in[i] << 16) | (in[i + 1] << 8) | in[i + 2];
    for (int s = 18; s >= 0; s -= 6) out += kB64[(v >> s) & 63];
  }
  if (i < in.size()) {
    std::uint32_t v = in[i] << 16;
    if (i + 1 < in.size()) v |= in[i + 1] << 8;
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += (i + 1 < in.size()) ? kB64[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

inline std::vector<std::uint8_t> base64_decode(std::string_view in) {
  std::vector<std::uint8_t> out;
  std::uint32_t acc = 0;
  int bits = 0;
  for (char ch : in) {
    if (ch == '=') break;
    const auto pos = kB64.find(ch);
    if (pos == std::string_view::npos) throw SurveyError("invalid base64 payload");
    acc = (acc << 6) | static_cast<std::uint32_t>(pos);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xff));
    }
  }
  return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_blob(const Image& im) {
  std::vector<std::uint8_t> out{'G', 'S', 'S', 'L'};
  detail::put_le(out, static_cast<std::uint32_t>(im.height));
  detail::put_le(out, static_cast<std::uint32_t>(im.width));
  detail::put_le(out, static_cast<std::uint32_t>(im.channels));
  out.reserve(16 + im.pixels.size() * 4);
  for (float v : im.pixels) detail::put_le(out, v);
  return out;
}

inline Image decode_blob(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), "GSSL", 4) != 0)
    throw SurveyError("image blob: bad magic");
  const auto h = detail::get_le<std::uint32_t>(bytes.data() + 4);
  const auto w = detail::get_le<std::uint32_t>(bytes.data() + 8);
  const auto c = detail::get_le<std::uint32_t>(bytes.data() + 12);
  const std::size_t n = std::size_t{h} * w * c;
  if (bytes.size() != 16 + 4 * n) throw SurveyError("image blob: truncated payload");
  Image im(h, w, c);
  for (std::size_t i = 0; i < n; ++i) im.pixels[i] = detail::get_le<float>(bytes.data() + 16 + 4 * i);
  return im;
}

inline void write_blob(const std::filesystem::path& path, const Image& im) {
  const auto bytes = encode_blob(im);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw SurveyError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw SurveyError("failed writing " + path.string());
}

inline Image read_blob(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw SurveyError("missing image payload " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_blob(bytes);
}

inline std::string inline_image_ref(const Image& im) {
  return "inline:" + detail::base64_encode(encode_blob(im));
}

inline nlohmann::json manifest_header(const SurveyManifest& m) {
  nlohmann::json h = {{"type", "header"},
                      {"class_names", m.class_names},
                      {"patch_interval_m", m.patch_interval_m},
                      {"generator", m.generator}};
  h["seed"] = m.seed ? nlohmann::json(*m.seed) : nlohmann::json(nullptr);
  return h;
}

// Writes dir/manifest.jsonl plus one blob per patch (skipped for inline refs).
inline std::filesystem::path save_manifest(const SurveyManifest& m, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw SurveyError("cannot create " + dir.string() + ": " + ec.message());
  const fs::path path = dir / "manifest.jsonl";
  std::ofstream out(path);
  if (!out) throw SurveyError("cannot write " + path.string());
  out << manifest_header(m).dump() << '\n';
  for (const auto& p : m.patches) {
    nlohmann::json row = {{"id", p.id},
                          {"northing_m", p.northing_m},
                          {"easting_m", p.easting_m},
                          {"image_ref", p.image_ref}};
    row["label"] = p.label ? nlohmann::json(*p.label) : nlohmann::json(nullptr);
    out << row.dump() << '\n';
    if (!p.image_ref.starts_with("inline:")) {
      const fs::path blob = dir / p.image_ref;
      fs::create_directories(blob.parent_path(), ec);
      write_blob(blob, m.image(p.id));
    }
  }
  if (!out) throw SurveyError("failed writing " + path.string());
  return path;
}

inline SurveyManifest load_manifest(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  std::ifstream in(path);
  if (!in) throw SurveyError("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();

  SurveyManifest m;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  std::vector<GeoPatch> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw SurveyError("manifest line " + std::to_string(line_no) + ": malformed JSON");
    }
    if (!j.is_object()) throw SurveyError("manifest line " + std::to_string(line_no) + ": not an object");
    if (j.value("type", "") == "header") {
      if (have_header) throw SurveyError("manifest line " + std::to_string(line_no) + ": duplicate header");
      have_header = true;
      m.class_names = j.value("class_names", std::vector<std::string>{});
      m.patch_interval_m = j.value("patch_interval_m", 0.0);
      m.generator = j.contains("generator") ? j["generator"] : nlohmann::json(nullptr);
      if (j.contains("seed") && !j["seed"].is_null()) m.seed = j["seed"].get<std::uint64_t>();
      continue;
    }
    const std::string where = "manifest line " + std::to_string(line_no);
    auto require_number = [&](const char* key) {
      if (!j.contains(key) || !j[key].is_number())
        throw SurveyError(where + ": row missing numeric field '" + key + "'");
      return j[key].get<double>();
    };
    if (!j.contains("id") || !j["id"].is_number_integer() || j["id"].get<long long>() < 0)
      throw SurveyError(where + ": row missing non-negative integer 'id'");
    GeoPatch p;
    p.id = j["id"].get<std::size_t>();
    p.northing_m = require_number("northing_m");
    p.easting_m = require_number("easting_m");
    if (j.contains("label") && !j["label"].is_null()) {
      if (!j["label"].is_number_integer() || j["label"].get<long long>() < 0)
        throw SurveyError(where + ": label must be a non-negative integer or null");
      p.label = j["label"].get<int>();
    }
    if (!j.contains("image_ref") || !j["image_ref"].is_string() || j["image_ref"].get<std::string>().empty())
      throw SurveyError(where + ": row missing image payload reference 'image_ref'");
    p.image_ref = j["image_ref"].get<std::string>();
    rows.push_back(std::move(p));
  }
  if (rows.empty()) throw SurveyError("no patches in " + path.string());

  std::vector<std::optional<GeoPatch>> by_id(rows.size());
  for (auto& p : rows) {
    if (p.id >= rows.size())
      throw SurveyError("manifest ids must be dense 0..n-1; got id " + std::to_string(p.id));
    if (by_id[p.id]) throw SurveyError("duplicate id " + std::to_string(p.id));
    by_id[p.id] = p;
  }
  for (auto& p : by_id) {
    if (p->label && static_cast<std::size_t>(*p->label) >= m.class_names.size())
      throw SurveyError("patch " + std::to_string(p->id) + ": label " + std::to_string(*p->label) +
                        " out of range for " + std::to_string(m.class_names.size()) + " classes");
    if (!p->image_ref.starts_with("inline:") && !fs::exists(base / p->image_ref))
      throw SurveyError("patch " + std::to_string(p->id) + ": missing image payload " +
                        (base / p->image_ref).string());
    m.patches.push_back(*p);
  }

  std::vector<std::string> refs;
  for (const auto& p : m.patches) refs.push_back(p.image_ref);
  m.images = std::make_shared<ImageStore>(m.patches.size(), [refs, base](std::size_t id) {
    const std::string& ref = refs[id];
    if (ref.starts_with("inline:")) return decode_blob(detail::base64_decode(std::string_view(ref).substr(7)));
    return read_blob(base / ref);
  });
  return m;
}

}  // namespace geossl

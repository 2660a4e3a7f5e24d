#pragma once

// Binary checkpoint.
//
//   "GSSLCKPT"  u32 version  u64 header_bytes  header (JSON, UTF-8)
//   then each section listed in header["sections"] as little-endian f64.
//
// The header carries the parameter layout, encoder config, init seed, epoch,
// the run config echo and the queue cursor, so a checkpoint is self-describing
// and resumable.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "geossl/encoder.hpp"
#include "geossl/manifest_io.hpp"

namespace geossl {

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::size_t epoch = 0;
  ModelState student;
  std::vector<double> velocity;          // optimizer momentum buffer
  std::optional<ModelState> teacher;     // moco, dino
  std::vector<double> center;            // dino
  std::vector<double> queue;             // moco, capacity x dim
  std::size_t queue_capacity = 0, queue_dim = 0, queue_size = 0, queue_cursor = 0;
  std::vector<double> cluster_labels;    // deepcluster, one per patch
  nlohmann::json config;                 // run config echo

  bool operator==(const Checkpoint& o) const {
    auto same_model = [](const ModelState& a, const ModelState& b) {
      return a.config == b.config && a.layout == b.layout && a.seed == b.seed && a.params == b.params;
    };
    return epoch == o.epoch && same_model(student, o.student) && velocity == o.velocity &&
           teacher.has_value() == o.teacher.has_value() && (!teacher || same_model(*teacher, *o.teacher)) &&
           center == o.center && queue == o.queue && queue_capacity == o.queue_capacity &&
           queue_dim == o.queue_dim && queue_size == o.queue_size && queue_cursor == o.queue_cursor &&
           cluster_labels == o.cluster_labels && config == o.config;
  }
};

namespace detail {

inline nlohmann::json layout_json(const Layout& l) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : l.entries()) arr.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}});
  return arr;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  std::vector<std::pair<std::string, const std::vector<double>*>> sections{{"student", &c.student.params},
                                                                          {"velocity", &c.velocity}};
  if (c.teacher) sections.emplace_back("teacher", &c.teacher->params);
  if (!c.center.empty()) sections.emplace_back("center", &c.center);
  if (!c.queue.empty()) sections.emplace_back("queue", &c.queue);
  if (!c.cluster_labels.empty()) sections.emplace_back("cluster_labels", &c.cluster_labels);

  nlohmann::json h;
  h["format"] = "geossl-checkpoint";
  h["epoch"] = c.epoch;
  h["encoder"] = c.student.config;
  h["layout"] = detail::layout_json(c.student.layout);
  h["parameter_count"] = c.student.params.size();
  h["seed"] = c.student.seed;
  h["queue"] = {{"capacity", c.queue_capacity}, {"dim", c.queue_dim}, {"size", c.queue_size},
                {"cursor", c.queue_cursor}};
  h["config"] = c.config;
  nlohmann::json secs = nlohmann::json::array();
  for (const auto& [name, v] : sections) secs.push_back({{"name", name}, {"count", v->size()}});
  h["sections"] = secs;
  const std::string header = h.dump();

  std::vector<std::uint8_t> out{'G', 'S', 'S', 'L', 'C', 'K', 'P', 'T'};
  detail::put_le(out, std::uint32_t{1});
  detail::put_le(out, static_cast<std::uint64_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  for (const auto& [name, v] : sections)
    for (double x : *v) detail::put_le(out, x);
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), "GSSLCKPT", 8) != 0)
    throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = detail::get_le<std::uint32_t>(bytes.data() + 8);
  if (version != 1) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto hlen = detail::get_le<std::uint64_t>(bytes.data() + 12);
  if (20 + hlen > bytes.size()) throw CheckpointError("truncated checkpoint header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.begin() + 20, bytes.begin() + 20 + static_cast<long>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }

  Checkpoint c;
  c.epoch = h.at("epoch").get<std::size_t>();
  c.config = h.at("config");
  const EncoderParams enc = h.at("encoder").get<EncoderParams>();
  const Layout layout = make_layout(enc);
  if (!(detail::layout_json(layout) == h.at("layout")))
    throw CheckpointError("checkpoint layout does not match its encoder config");
  const auto seed = h.at("seed").get<std::uint64_t>();
  const auto& q = h.at("queue");
  c.queue_capacity = q.at("capacity");
  c.queue_dim = q.at("dim");
  c.queue_size = q.at("size");
  c.queue_cursor = q.at("cursor");

  std::size_t pos = 20 + hlen;
  auto read_section = [&](std::size_t count) {
    if (pos + 8 * count > bytes.size()) throw CheckpointError("truncated checkpoint payload");
    std::vector<double> v(count);
    for (std::size_t i = 0; i < count; ++i) v[i] = detail::get_le<double>(bytes.data() + pos + 8 * i);
    pos += 8 * count;
    return v;
  };
  auto model = [&](std::vector<double> params) {
    if (params.size() != layout.total()) throw CheckpointError("parameter count does not match layout");
    ModelState m;
    m.config = enc;
    m.layout = layout;
    m.params = std::move(params);
    m.seed = seed;
    return m;
  };
  for (const auto& s : h.at("sections")) {
    const std::string name = s.at("name");
    auto v = read_section(s.at("count").get<std::size_t>());
    if (name == "student") c.student = model(std::move(v));
    else if (name == "velocity") c.velocity = std::move(v);
    else if (name == "teacher") c.teacher = model(std::move(v));
    else if (name == "center") c.center = std::move(v);
    else if (name == "queue") c.queue = std::move(v);
    else if (name == "cluster_labels") c.cluster_labels = std::move(v);
    else throw CheckpointError("unknown checkpoint section '" + name + "'");
  }
  if (pos != bytes.size()) throw CheckpointError("trailing bytes after checkpoint payload");
  if (c.student.params.empty()) throw CheckpointError("checkpoint has no student parameters");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(c);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("failed writing " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace geossl

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dmc/network.hpp"
#include "dmc/optim.hpp"
#include "dmc/rng.hpp"
#include "dmc/volume.hpp"

// Checkpoint container: an 8-byte magic, a little-endian u64 header length,
// a JSON header (format version, network spec, epoch, rng state, tensor
// names+shapes) and the raw little-endian f64 payload - parameters in
// registration order, then velocity buffers when present. Round-trips are
// byte-exact.

namespace dmc {

inline nlohmann::json spec_to_json(const NetworkSpec& s) {
  nlohmann::json j{{"spatial_rank", s.spatial_rank},
                   {"variant", variant_name(s.variant)},
                   {"stage_channels", s.channels()},
                   {"num_classes", s.num_classes},
                   {"input_channels", s.input_channels},
                   {"dmsc_kernel", s.dmsc_kernel},
                   {"dmrc_pool", s.dmrc_pool},
                   {"plain_convs", s.plain_convs},
                   {"seed", s.seed}};
  if (s.lightweight_dmsc.has_value()) {
    j["lightweight_dmsc"] = *s.lightweight_dmsc;
  } else {
    j["lightweight_dmsc"] = nullptr;
  }
  return j;
}

inline NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec s;
  try {
    s.spatial_rank = j.at("spatial_rank").get<int>();
    s.variant = variant_from_name(j.at("variant").get<std::string>());
    if (j.contains("stage_channels") && !j.at("stage_channels").is_null()) {
      s.stage_channels = j.at("stage_channels").get<std::vector<std::int64_t>>();
    }
    s.num_classes = j.value("num_classes", std::int64_t{2});
    s.input_channels = j.value("input_channels", std::int64_t{1});
    if (j.contains("lightweight_dmsc") && !j.at("lightweight_dmsc").is_null()) {
      s.lightweight_dmsc = j.at("lightweight_dmsc").get<bool>();
    }
    s.dmsc_kernel = j.value("dmsc_kernel", std::int64_t{5});
    s.dmrc_pool = j.value("dmrc_pool", std::int64_t{4});
    s.plain_convs = j.value("plain_convs", false);
    s.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad network spec: ") + e.what());
  }
  s.validate();
  return s;
}

struct Checkpoint {
  int version = 1;
  NetworkSpec spec;
  std::int64_t epoch = 0;
  std::string rng_state;
  std::vector<std::string> names;
  std::vector<Tensor> params;
  std::vector<Tensor> velocity;  // empty, or one per parameter
};

namespace detail {

constexpr char kCheckpointMagic[9] = "DMCKPT01";

inline void append_f64_le(std::string& out, const Tensor& t) {
  for (std::int64_t i = 0; i < t.size(); ++i) {
    std::uint64_t u;
    const double v = t[i];
    std::memcpy(&u, &v, 8);
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xff));
  }
}

inline Tensor read_f64_le(const unsigned char* p, Shape shape) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) {
    std::uint64_t u = 0;
    for (int b = 0; b < 8; ++b) u |= static_cast<std::uint64_t>(p[8 * i + b]) << (8 * b);
    double v;
    std::memcpy(&v, &u, 8);
    t[i] = v;
  }
  return t;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  if (c.params.size() != c.names.size()) {
    throw ContractError("save_checkpoint: name/tensor count mismatch");
  }
  if (!c.velocity.empty() && c.velocity.size() != c.params.size()) {
    throw ContractError("save_checkpoint: velocity count mismatch");
  }
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    tensors.push_back({{"name", c.names[i]}, {"shape", c.params[i].shape()}});
  }
  nlohmann::json header{{"version", c.version},
                        {"spec", spec_to_json(c.spec)},
                        {"epoch", c.epoch},
                        {"rng", c.rng_state},
                        {"tensors", tensors},
                        {"has_velocity", !c.velocity.empty()}};
  const std::string hj = header.dump();
  std::string bytes;
  bytes.append(detail::kCheckpointMagic, 8);
  const std::uint64_t hlen = hj.size();
  for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<char>((hlen >> (8 * b)) & 0xff));
  bytes += hj;
  for (const Tensor& t : c.params) detail::append_f64_le(bytes, t);
  for (const Tensor& t : c.velocity) detail::append_f64_le(bytes, t);
  detail::atomic_write(path, bytes);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = detail::read_all(path);
  if (bytes.size() < 16 || bytes.compare(0, 8, detail::kCheckpointMagic, 8) != 0) {
    throw IoError("not a checkpoint file: " + path.string());
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  std::uint64_t hlen = 0;
  for (int b = 0; b < 8; ++b) hlen |= static_cast<std::uint64_t>(p[8 + b]) << (8 * b);
  if (bytes.size() < 16 + hlen) throw IoError("truncated checkpoint header: " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint header: " + std::string(e.what()));
  }
  Checkpoint c;
  c.version = header.at("version").get<int>();
  if (c.version != 1) {
    throw IoError("unsupported checkpoint version " + std::to_string(c.version));
  }
  c.spec = spec_from_json(header.at("spec"));
  c.epoch = header.at("epoch").get<std::int64_t>();
  c.rng_state = header.at("rng").get<std::string>();
  const bool has_velocity = header.value("has_velocity", false);

  std::size_t off = 16 + hlen;
  std::int64_t total = 0;
  std::vector<Shape> shapes;
  for (const auto& t : header.at("tensors")) {
    c.names.push_back(t.at("name").get<std::string>());
    shapes.push_back(t.at("shape").get<Shape>());
    total += numel(shapes.back());
  }
  const std::int64_t expect = total * 8 * (has_velocity ? 2 : 1);
  if (bytes.size() - off != static_cast<std::size_t>(expect)) {
    throw IoError("checkpoint payload length mismatch: expected " + std::to_string(expect) +
                  " bytes, got " + std::to_string(bytes.size() - off));
  }
  for (const Shape& s : shapes) {
    c.params.push_back(detail::read_f64_le(p + off, s));
    off += static_cast<std::size_t>(numel(s)) * 8;
  }
  if (has_velocity) {
    for (const Shape& s : shapes) {
      c.velocity.push_back(detail::read_f64_le(p + off, s));
      off += static_cast<std::size_t>(numel(s)) * 8;
    }
  }
  return c;
}

inline Checkpoint checkpoint_from(const Model& m, const SgdNesterov* opt, const Rng& rng,
                                  std::int64_t epoch) {
  Checkpoint c;
  c.spec = m.spec;
  c.epoch = epoch;
  c.rng_state = rng.serialize();
  for (const auto& e : m.params.entries()) {
    c.names.push_back(e.name);
    c.params.push_back(e.value);
  }
  if (opt != nullptr && !opt->velocity.empty()) c.velocity = opt->velocity;
  return c;
}

// Loads parameters (and velocity, when given a non-null optimizer) into a
// built model, verifying every tensor name and shape in order.
inline void apply_checkpoint(Model& m, const Checkpoint& c, SgdNesterov* opt = nullptr) {
  if (c.names.size() != m.params.count()) {
    throw IoError("checkpoint has " + std::to_string(c.names.size()) +
                  " tensors, model expects " + std::to_string(m.params.count()));
  }
  for (std::size_t i = 0; i < c.names.size(); ++i) {
    const auto& entry = m.params.entry(static_cast<int>(i));
    if (entry.name != c.names[i]) {
      throw IoError("checkpoint tensor mismatch at index " + std::to_string(i) +
                    ": checkpoint has '" + c.names[i] + "', model expects '" + entry.name + "'");
    }
    if (entry.shape != c.params[i].shape()) {
      throw IoError("checkpoint tensor '" + c.names[i] + "' shape " +
                    shape_str(c.params[i].shape()) + " does not match model " +
                    shape_str(entry.shape));
    }
  }
  for (std::size_t i = 0; i < c.names.size(); ++i) {
    m.params.value(static_cast<int>(i)) = c.params[i];
  }
  if (opt != nullptr && !c.velocity.empty()) opt->velocity = c.velocity;
}

}  // namespace dmc

// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tcomp/checkpoint.hpp"

#include <boost/crc.hpp>
#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace tcomp {

static_assert(std::endian::native == std::endian::little, "checkpoint payload is written in host order");

using nlohmann::json;

namespace {

constexpr std::string_view kChecksumPrefix = "crc32:";

json config_json(const ModelConfig& c) {
  json j = {{"vocab_size", c.vocab_size}, {"hidden", c.hidden},
            {"encoder_layers", c.encoder_layers}, {"decoder_layers", c.decoder_layers},
            {"heads", c.heads}, {"ffn_dim", c.ffn_dim},
            {"max_positions", c.max_positions}};
  if (c.rank) j["rank"] = *c.rank;
  return j;
}

int int_field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw FormatError(fmt::format("{}: missing field '{}'", where, key));
  const auto& v = j.at(key);
  if (!v.is_number_integer()) throw FormatError(fmt::format("{}: field '{}' is not an integer", where, key));
  const auto x = v.get<std::int64_t>();
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
    throw FormatError(fmt::format("{}: field '{}' out of range", where, key));
  }
  return static_cast<int>(x);
}

ModelConfig parse_config(const json& j, const std::string& where) {
  if (!j.is_object()) throw FormatError(where + ": config is not an object");
  ModelConfig c;
  c.vocab_size = int_field(j, "vocab_size", where);
  c.hidden = int_field(j, "hidden", where);
  c.encoder_layers = int_field(j, "encoder_layers", where);
  c.decoder_layers = int_field(j, "decoder_layers", where);
  c.heads = int_field(j, "heads", where);
  c.ffn_dim = int_field(j, "ffn_dim", where);
  c.max_positions = int_field(j, "max_positions", where);
  if (j.contains("rank") && !j.at("rank").is_null()) c.rank = int_field(j, "rank", where);
  try {
    c.validate();
  } catch (const SpecError& e) {
    throw FormatError(where + ": " + e.what());
  }
  return c;
}

std::uint32_t crc32(std::string_view header, std::string_view payload) {
  boost::crc_32_type crc;
  crc.process_bytes(header.data(), header.size());
  crc.process_bytes(payload.data(), payload.size());
  return crc.checksum();
}

// Empty model of the right structure; values are overwritten by the loader.
Model skeleton(const ModelConfig& config) {
  ModelConfig dense = config;
  dense.rank.reset();
  Model m = Model::init(dense, 0);
  if (config.rank) {
    const int r = *config.rank;
    m.embedding.factors = LowRankEmbedding{Tensor::zeros({config.vocab_size, r}, true),
                                           Tensor::zeros({r, config.hidden}, true)};
    m.embedding.table = Tensor();
    m.config.rank = r;
  }
  return m;
}

std::uint64_t read_u64_le(std::string_view bytes) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(bytes[i]);
  return v;
}

}  // namespace

std::string config_to_json(const ModelConfig& config) { return config_json(config).dump(); }

ModelConfig config_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  return parse_config(j, "config");
}

std::string serialize_checkpoint(const Model& model) {
  auto named = model.named_parameters();
  std::sort(named.begin(), named.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

  json header = json::object();
  std::string payload;
  for (const auto& [name, t] : named) {
    const auto data = t.data();
    const auto begin = payload.size();
    payload.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
    header[name] = {{"dtype", "f32"}, {"offsets", {begin, payload.size()}}, {"shape", t.shape()}};
  }
  json manifest = {{"config", config_json(model.config)}};
  if (model.config.rank) manifest["rank"] = *model.config.rank;
  header[std::string(kManifestKey)] = manifest;

  const std::uint32_t sum = crc32(header.dump(), payload);
  header[std::string(kManifestKey)]["checksum"] = fmt::format("{}{:08x}", kChecksumPrefix, sum);
  const std::string text = header.dump();

  std::string out(8, '\0');
  std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) out[i] = static_cast<char>((len >> (8 * i)) & 0xff);
  out += text;
  out += payload;
  return out;
}

Model parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < 8) throw FormatError(fmt::format("header_len: file is {} bytes, need at least 8", bytes.size()));
  const std::uint64_t header_len = read_u64_le(bytes);
  if (header_len > bytes.size() - 8) {
    throw FormatError(fmt::format("header_len: {} exceeds the {} bytes after the length field", header_len,
                                  bytes.size() - 8));
  }
  const std::string_view text = bytes.substr(8, header_len);
  const std::string_view payload = bytes.substr(8 + header_len);

  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("header: invalid JSON: ") + e.what());
  }
  if (!header.is_object()) throw FormatError("header: not a JSON object");
  if (header.dump() != text) throw FormatError("header: JSON is not in canonical form");

  const std::string mkey(kManifestKey);
  if (!header.contains(mkey) || !header[mkey].is_object()) throw FormatError("__manifest__: missing");
  json manifest = header[mkey];
  for (const auto& [key, value] : manifest.items()) {
    if (key != "config" && key != "rank" && key != "checksum") {
      throw FormatError(fmt::format("__manifest__: unknown field '{}'", key));
    }
  }
  if (!manifest.contains("config")) throw FormatError("__manifest__.config: missing");
  const ModelConfig config = parse_config(manifest["config"], "__manifest__.config");
  const bool has_rank = manifest.contains("rank");
  if (has_rank != config.rank.has_value() ||
      (has_rank && (!manifest["rank"].is_number_integer() || manifest["rank"].get<std::int64_t>() != *config.rank))) {
    throw FormatError("__manifest__.rank: disagrees with the config");
  }

  if (!manifest.contains("checksum") || !manifest["checksum"].is_string()) {
    throw FormatError("__manifest__.checksum: missing");
  }
  const std::string checksum = manifest["checksum"].get<std::string>();
  json unsummed = header;
  unsummed[mkey].erase("checksum");
  const std::string expected = fmt::format("{}{:08x}", kChecksumPrefix, crc32(unsummed.dump(), payload));
  if (checksum != expected) {
    throw FormatError(fmt::format("__manifest__.checksum: stored {} but contents give {}", checksum, expected));
  }

  struct Entry {
    std::uint64_t begin = 0, end = 0;
    Shape shape;
  };
  std::map<std::string, Entry> entries;
  for (const auto& [name, e] : header.items()) {
    if (name == mkey) continue;
    if (!e.is_object() || e.size() != 3 || !e.contains("dtype") || !e.contains("offsets") || !e.contains("shape")) {
      throw FormatError(fmt::format("tensor '{}': entry must hold exactly dtype, offsets and shape", name));
    }
    if (e["dtype"] != "f32") throw FormatError(fmt::format("tensor '{}': unknown dtype {}", name, e["dtype"].dump()));
    const auto& off = e["offsets"];
    if (!off.is_array() || off.size() != 2 || !off[0].is_number_unsigned() || !off[1].is_number_unsigned()) {
      throw FormatError(fmt::format("tensor '{}': offsets must be two non-negative integers", name));
    }
    Entry entry;
    entry.begin = off[0].get<std::uint64_t>();
    entry.end = off[1].get<std::uint64_t>();
    if (!e["shape"].is_array() || e["shape"].empty()) throw FormatError(fmt::format("tensor '{}': bad shape", name));
    std::uint64_t numel = 1;
    for (const auto& d : e["shape"]) {
      if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0 || d.get<std::uint64_t>() > (1ULL << 32)) {
        throw FormatError(fmt::format("tensor '{}': shape dimensions must be positive integers", name));
      }
      entry.shape.push_back(d.get<std::int64_t>());
      numel *= d.get<std::uint64_t>();
      if (numel > payload.size()) throw FormatError(fmt::format("tensor '{}': shape exceeds the payload", name));
    }
    if (entry.end < entry.begin || entry.end - entry.begin != numel * sizeof(float)) {
      throw FormatError(fmt::format("tensor '{}': offsets [{}, {}) do not match shape", name, entry.begin, entry.end));
    }
    entries.emplace(name, std::move(entry));
  }

  std::vector<std::pair<std::uint64_t, std::string>> order;
  for (const auto& [name, e] : entries) order.emplace_back(e.begin, name);
  std::sort(order.begin(), order.end());
  std::uint64_t cursor = 0;
  for (const auto& [begin, name] : order) {
    if (begin < cursor) throw FormatError(fmt::format("tensor '{}': offsets overlap the previous tensor", name));
    if (begin > cursor) throw FormatError(fmt::format("tensor '{}': gap before offset {}", name, begin));
    cursor = entries[name].end;
  }
  if (cursor != payload.size()) {
    throw FormatError(fmt::format("payload: tensors cover {} bytes but the payload holds {}", cursor, payload.size()));
  }

  Model model = skeleton(config);
  const auto params = model.named_parameters();
  if (params.size() != entries.size()) {
    throw FormatError(fmt::format("header: {} tensors listed, the config needs {}", entries.size(), params.size()));
  }
  for (const auto& [name, t] : params) {
    auto it = entries.find(name);
    if (it == entries.end()) throw FormatError(fmt::format("tensor '{}': missing", name));
    if (it->second.shape != t.shape()) {
      throw FormatError(fmt::format("tensor '{}': shape {} but the config needs {}", name, shape_str(it->second.shape),
                                    shape_str(t.shape())));
    }
    auto dst = t.node()->data.data();
    std::memcpy(dst, payload.data() + it->second.begin, it->second.end - it->second.begin);
    for (std::size_t i = 0; i < t.node()->data.size(); ++i) {
      if (!std::isfinite(dst[i])) throw FormatError(fmt::format("tensor '{}': non-finite value at {}", name, i));
    }
  }
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(model);
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw FormatError("cannot create " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_checkpoint(buf.str());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace tcomp

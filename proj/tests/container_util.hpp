// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Helpers for taking checkpoint containers apart and putting them back
// together with a valid checksum.

#pragma once

#include <cstdint>
#include <cstdio>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>

namespace container_util {

using nlohmann::json;

// Reflected CRC-32 (polynomial 0xEDB88320), bit by bit.
inline std::uint32_t crc32_bitwise(std::string_view a, std::string_view b) {
  std::uint32_t c = 0xffffffffu;
  for (std::string_view s : {a, b})
    for (unsigned char byte : s) {
      c ^= byte;
      for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xedb88320u & (0u - (c & 1u)));
    }
  return ~c;
}

struct Container {
  json header;
  std::string payload;
};

inline Container split(const std::string& bytes) {
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  return {json::parse(bytes.substr(8, len)), bytes.substr(8 + len)};
}

inline std::string checksum_field(const json& header_without_checksum, std::string_view payload) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", crc32_bitwise(header_without_checksum.dump(), payload));
  return std::string("crc32:") + buf;
}

// Re-encodes with a valid checksum so that deeper checks are reached.
inline std::string seal(Container c) {
  if (c.header.contains("__manifest__") && c.header["__manifest__"].is_object()) {
    c.header["__manifest__"].erase("checksum");
    c.header["__manifest__"]["checksum"] = checksum_field(c.header, c.payload);
  }
  const std::string text = c.header.dump();
  std::string out(8, '\0');
  for (int i = 0; i < 8; ++i) out[i] = static_cast<char>((static_cast<std::uint64_t>(text.size()) >> (8 * i)) & 0xff);
  return out + text + c.payload;
}

}  // namespace container_util

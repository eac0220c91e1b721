// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Named-tensor checkpoint container.
//
//   [u64 little-endian header length][JSON header][f32 payload]
//
// The header maps each tensor name to {"dtype":"f32","offsets":[b,e),
// "shape":[...]} with byte offsets into the payload, plus a "__manifest__"
// entry holding the model config, the embedding rank when factored and a
// CRC-32 of the header (without the checksum) followed by the payload.
// JSON is written canonically: sorted keys, no whitespace. Payload order
// follows the sorted names.

#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "tcomp/model.hpp"

namespace tcomp {

inline constexpr std::string_view kManifestKey = "__manifest__";

std::string config_to_json(const ModelConfig& config);
/// Throws FormatError on missing or mistyped fields.
ModelConfig config_from_json(std::string_view text);

std::string serialize_checkpoint(const Model& model);
/// Validates everything before building the model; any defect throws
/// FormatError and nothing is returned.
Model parse_checkpoint(std::string_view bytes);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace tcomp

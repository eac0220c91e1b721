// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string_view>

namespace tcomp {

// Quiet mode drops info lines; warnings are always written to stderr.
void set_quiet(bool quiet);
bool quiet();

void log_info(std::string_view message);
void log_warning(std::string_view message);

}  // namespace tcomp

// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tcomp/log.hpp"

#include <fmt/core.h>

#include <atomic>
#include <cstdio>

namespace tcomp {

namespace {
std::atomic<bool> g_quiet{false};
}  // namespace

void set_quiet(bool quiet) { g_quiet = quiet; }
bool quiet() { return g_quiet; }

void log_info(std::string_view message) {
  if (!g_quiet) fmt::print(stderr, "{}\n", message);
}

void log_warning(std::string_view message) { fmt::print(stderr, "warning: {}\n", message); }

}  // namespace tcomp

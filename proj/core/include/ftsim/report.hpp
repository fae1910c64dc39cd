// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ftsim/runner.hpp"

namespace ftsim {

enum class ReportFormat { kCsv, kJson };
ReportFormat parse_report_format(std::string_view name);

nlohmann::ordered_json to_json(const Report& report);
nlohmann::ordered_json to_json(const PartitionPlan& plan);
std::string to_json_text(const Report& report);

/// Header plus one row per collective, or one row per k for sweeps.
std::string to_csv(const Report& report);

/// Writes report.{json,csv} and, unless disabled, SVG plots into dir.
/// Returns the written paths. Throws std::runtime_error on unwritable paths.
std::vector<std::filesystem::path> emit(const Report& report, ReportFormat format,
                                        const std::filesystem::path& dir, bool plots = true);

}  // namespace ftsim

/* Copyright 2026 The IQT Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef IQT_ACCEPTANCE_HPP_
#define IQT_ACCEPTANCE_HPP_

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace iqt {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
};

struct AcceptanceOptions {
  std::vector<int> only;             // empty runs every criterion
  std::filesystem::path workdir;     // scratch space for file round trips
  bool verbose = false;              // progress lines on stderr
};

inline constexpr int kCriterionCount = 11;

const char* criterion_name(int id);

CriterionResult run_criterion(int id, const AcceptanceOptions& opts);
std::vector<CriterionResult> run_acceptance(const AcceptanceOptions& opts);

// One "PASS|FAIL [id] name: detail" line per criterion.
std::string format_report(const std::vector<CriterionResult>& results);
nlohmann::json report_json(const std::vector<CriterionResult>& results);

}  // namespace iqt

#endif  // IQT_ACCEPTANCE_HPP_

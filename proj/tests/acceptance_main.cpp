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

// Runs the acceptance criteria and prints one PASS/FAIL line per criterion.
// Usage: iqt_acceptance [--only 1,5,7] [--workdir dir] [--verbose]

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>

#include "iqt/acceptance.hpp"

int main(int argc, char** argv) {
  iqt::AcceptanceOptions opts;
  opts.workdir = std::filesystem::temp_directory_path() / "iqt-acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) opts.only.push_back(std::stoi(item));
    } else if (a == "--workdir" && i + 1 < argc) {
      opts.workdir = argv[++i];
    } else if (a == "--verbose") {
      opts.verbose = true;
    } else {
      std::cerr << "usage: iqt_acceptance [--only ids] [--workdir dir] [--verbose]\n";
      return 2;
    }
  }
  const auto results = iqt::run_acceptance(opts);
  std::cout << iqt::format_report(results) << std::flush;
  for (const auto& r : results) {
    if (!r.passed) return EXIT_FAILURE;
  }
  return results.empty() ? EXIT_FAILURE : EXIT_SUCCESS;
}

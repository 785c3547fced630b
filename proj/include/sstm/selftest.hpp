#pragma once

// Built-in check suites behind the `selftest` CLI command and the acceptance
// harness. Oracle comparisons use independent naive re-implementations kept
// in this module; gradient checks re-execute graphs in double precision.
//
// Suites: gradcheck, oracle, structural, behavioral, io;
//         invariants = structural + behavioral + io; all = everything.

#include <string>
#include <vector>

namespace sstm {

struct CheckResult {
  std::string suite;
  std::string name;
  bool pass = false;
  std::string detail;
};

std::vector<CheckResult> run_selftest(const std::string& suite, double tol_override = 0.0);

bool all_passed(const std::vector<CheckResult>& rs);

}  // namespace sstm

#pragma once

// Finite-difference gradient checks in double precision.

#include <functional>
#include <string>
#include <vector>

#include "caesar/autodiff.hpp"

namespace caesar::gradcheck {

inline constexpr double kStep = 1e-5;
inline constexpr double kTolerance = 1e-4;
/// Denominator floor of the relative error, so entries whose true gradient
/// is ~0 are judged by absolute error.
inline constexpr double kRelativeFloor = 1e-6;

struct GroupResult {
  std::string group;  // "input", "encoder" or "rest"
  double max_rel_error = 0;
  std::size_t checked = 0;
};

struct Report {
  std::string name;
  std::vector<GroupResult> groups;
  double tolerance = kTolerance;
  bool finite = true;

  double max_error() const;
  bool passed() const;
};

/// Builds the objective on a tape from the given input handles. Non-scalar
/// outputs are reduced with fixed random weights.
using Objective = std::function<ad::Var(ad::Tape<double>&, const std::vector<ad::Var>&)>;

struct Options {
  double step = kStep;
  double tolerance = kTolerance;
  /// Entries checked per tensor; 0 checks all of them.
  std::size_t max_entries = 0;
  std::uint64_t seed = 0;
};

Report check(const std::string& name, const Objective& f, std::vector<Matrix<double>> inputs,
             ad::ParameterStore<double>* params, const Options& options = {});

/// Names accepted by run_suite besides "all".
std::vector<std::string> suite_names();
/// Runs one named check (or every check for "all").
std::vector<Report> run_suite(const std::string& scope);

}  // namespace caesar::gradcheck

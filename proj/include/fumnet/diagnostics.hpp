#pragma once

// Invariant battery run by `fumnet gradcheck`: gradient checks for every
// layer and the whole tiny model in double precision, causality and
// receptive-field probes, and shape-chain checks.

#include "fumnet/model_config.hpp"

#include <functional>
#include <string>
#include <vector>

namespace fumnet {

struct DiagnosticResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct DiagnosticsReport {
  std::vector<DiagnosticResult> results;
  bool all_passed() const;
  std::vector<std::string> failures() const;
};

/// c=8, d=4, N=2, filter sizes {2,2}, 12x12 images and small hidden sizes.
ModelConfig tiny_model_config();

struct DiagnosticsOptions {
  double step = 1e-6;
  double tolerance = 1e-4;
  bool include_default_shape_chain = true;  // builds a full-size model once
};

/// Runs every check; `on_result` (optional) sees each result as it completes.
DiagnosticsReport run_diagnostics(const DiagnosticsOptions& options = {},
                                  const std::function<void(const DiagnosticResult&)>& on_result = {});

}  // namespace fumnet

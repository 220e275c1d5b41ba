#pragma once

#include <vector>

#include "ipg/policy.hpp"
#include "ipg/tensor.hpp"

namespace ipg::detail {

// Taped teacher-forced pass over `toks`. Returns the per-row cross-entropy of
// `targets` at `score_rows` (both size T). When `override_rows` is non-null,
// the residual rows at `override_layer` are replaced by it at exactly the
// score rows before the next block runs. Shared by scoring and training.
Tensor taped_selected_ce(Tape& tape, const Policy& policy, const std::vector<int>& toks,
                         const std::vector<int>& score_rows, const std::vector<int>& targets,
                         int override_layer, const Tensor* override_rows);

}  // namespace ipg::detail

#pragma once

#include "hbma/models.hpp"
#include "hbma/sampler.hpp"

namespace hbma {

/// Build the target for a model family and run the configured chains from
/// jittered starting points. The result always comes back, converged or
/// not; `converged` reports the R-hat < 1.1 verdict over every reported
/// (non-constant) parameter.
PosteriorDraws run_chains(const ModelSpec& spec, const DataBundle& data,
                          const SamplerConfig& config);

}  // namespace hbma

#include "hbma/fit.hpp"

namespace hbma {

PosteriorDraws run_chains(const ModelSpec& spec, const DataBundle& data,
                          const SamplerConfig& config) {
  const TargetDensity target = make_target(spec, data);
  return nuts_sample(target, config);
}

}  // namespace hbma

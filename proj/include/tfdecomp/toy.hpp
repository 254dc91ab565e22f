#pragma once

#include <cstdint>
#include <vector>

#include "tfdecomp/model.hpp"

namespace tfdecomp {

struct Sequence {
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> segments;  // empty means all segment 0
};

using Corpus = std::vector<Sequence>;

struct ToyScales {
  double embedding = 1.0;
  double bias = 0.1;
  double gain_spread = 0.2;  // gains drawn from 1 + N(0, spread)
};

/// Random model with Gaussian weights scaled by 1/sqrt(fan_in); deterministic in seed.
ModelParams random_model(const ModelConfig& config, std::uint64_t seed, const ToyScales& scales = {});

/// Random sequences with lengths in [min_len, max_len] and one or two segments.
Corpus random_corpus(const ModelConfig& config, std::size_t sequences, std::size_t min_len, std::size_t max_len,
                     std::uint64_t seed);

}  // namespace tfdecomp

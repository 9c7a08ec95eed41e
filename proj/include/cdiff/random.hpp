#pragma once

#include <cstdint>

#include <torch/torch.h>

namespace cdiff {

// splitmix64 mixing of (seed, stream, index).
uint64_t derive_seed(uint64_t seed, uint64_t stream, uint64_t index = 0);

// Independent CPU generator seeded with `seed`.
torch::Generator make_generator(uint64_t seed);

} // namespace cdiff

#pragma once

#include <cstdint>
#include <string>

#include "dfq/model.hpp"

namespace dfq {

// Four Conv-BN-ReLU blocks, global average pool and a linear head (~48k parameters).
ModelGraph tiny_block_net(int classes = 10, std::uint64_t seed = 0);

// Stem block plus two residual stages with identity shortcuts (~38k parameters).
ModelGraph mini_resnet(int classes = 10, std::uint64_t seed = 0);

// "tiny" / "tinyblocknet" or "resnet" / "miniresnet".
ModelGraph make_zoo_model(const std::string& name, int classes, std::uint64_t seed);

}  // namespace dfq

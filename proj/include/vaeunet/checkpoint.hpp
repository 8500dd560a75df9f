#pragma once

// Checkpoint file: a text header (format tag, model config, free-form metadata)
// followed by named float64 tensors in parameter registration order.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vaeunet/network.hpp"

namespace vaeunet {

struct Checkpoint {
    ModelConfig model;
    std::map<std::string, std::string> meta;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

/// Copies the current weights of `net`.
Checkpoint snapshot(const VaeUnet& net, std::map<std::string, std::string> meta = {});

/// Fresh network holding the checkpoint weights. Throws if names or shapes do not match the manifest.
VaeUnet restore(const Checkpoint& ckpt);

/// Overwrites the weights of `net` in place.
void load_weights(VaeUnet& net, const Checkpoint& ckpt);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);

/// Validates the format tag and the model config before reading any weights.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace vaeunet

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "rffi/nn/optim.hpp"
#include "rffi/nn/tensor.hpp"

namespace rffi {

// Versioned model container shared by the classifier and the VAE guard:
// magic "RFCK", u32 version, arch descriptor (JSON), meta (JSON: config
// digest, epoch, metric snapshot), named float32 blobs, CRC32 trailer.
struct Checkpoint {
  uint32_t version = 1;
  std::string arch_json;
  std::string meta_json;
  std::vector<std::pair<std::string, nn::Tensor>> tensors;

  const nn::Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

Checkpoint checkpoint_from_params(const nn::ParamStore& ps, std::string arch_json,
                                  std::string meta_json);
void params_from_checkpoint(const Checkpoint& c, nn::ParamStore& ps);

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& c);
Checkpoint deserialize_checkpoint(const std::vector<uint8_t>& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace rffi

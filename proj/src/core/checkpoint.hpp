#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "core/structured.hpp"

namespace latdyn {

// Versioned JSON checkpoint: base parameters, hypernetworks, modulation kind
// and layout, MR banks, GENERIC tensors, and the training latent codes keyed
// by task index. Floats round-trip exactly.
struct Checkpoint {
  int version = 1;
  std::string method;
  std::string system;
  std::uint64_t spec_hash = 0;
  std::uint64_t config_hash = 0;
  DynamicsModel model;
  std::vector<Tensor> latents;      // training latent codes (modulation methods)
  std::vector<int> latent_tasks;    // task index per latent code
};

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path, const SystemSpec& spec);

}  // namespace latdyn

#pragma once

#include <filesystem>
#include <string>

#include "capslu/features.hpp"
#include "capslu/model.hpp"
#include "capslu/params.hpp"

namespace capslu {

/// A trained model: kind, architecture, feature normalization and weights.
struct Checkpoint {
  ModelKind kind = ModelKind::capsule;
  ModelConfig config;
  NormStats norm;
  ParamSet<float> params;
};

/// Binary container: magic ("CSLM" capsule, "CSLB" baseline), version, the
/// ModelConfig fields as u32, normalization stats, then every parameter as
/// (name, rank, dims, little-endian f32 data) in parameter order.
std::string checkpoint_bytes(const Checkpoint& ckpt);
Checkpoint checkpoint_from_bytes(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace capslu

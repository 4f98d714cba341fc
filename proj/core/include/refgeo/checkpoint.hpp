#pragma once

#include <string>

#include "refgeo/model.hpp"

namespace refgeo {

// Binary checkpoint, little-endian:
//   magic "TLM1"; version u32; ModelConfig as seven u64 fields
//   (vocab_size, d_model, n_layers, n_heads, d_ff, max_seq_len, rng_seed);
//   then every tensor in visit_tensors order, each as
//   rank u32, dims u64[rank], payload float32 row-major.
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace refgeo

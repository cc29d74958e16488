#pragma once

#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "qgn/nn.hpp"
#include "qgn/tensor.hpp"

namespace qgn {

// Self-describing checkpoint identity. `kind`, `arch`, `embed_dim`, and the
// component flags are compared on load; a mismatch refuses the checkpoint
// instead of silently reinterpreting weights.
struct CheckpointMeta {
  int schema = 1;
  std::string kind;  // "fewshot" or "search"
  std::string arch;
  int embed_dim = 0;
  bool qsse = true;
  bool qrpn = true;
  bool qsimnet = true;
  long long step = 0;
  nlohmann::json extra;  // rng state, optimizer type, schedule position, ...
};

// Binary format: 8-byte magic, little-endian u64 header length, JSON header
// (meta + tensor directory), then raw float64 payloads in directory order.
void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const ParamStore& params,
                     const std::map<std::string, Tensor>& buffers);

// Reads header only.
CheckpointMeta peek_checkpoint(const std::string& path);

// Loads everything. params/buffers are replaced wholesale.
CheckpointMeta load_checkpoint(const std::string& path, ParamStore* params,
                               std::map<std::string, Tensor>* buffers);

// Throws with a field-by-field message when identities disagree.
void require_compatible(const CheckpointMeta& got, const CheckpointMeta& expected);

}  // namespace qgn

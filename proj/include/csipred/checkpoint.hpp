#pragma once

#include <string>

#include "csipred/optim.hpp"

#include "json.hpp"

namespace csipred {

// Checkpoint file: magic "CSCK", version u16, u32 JSON header length, JSON
// header bytes, u32 parameter count, then per parameter: u16 name length,
// name, u8 rank, u32 dims, f32 data. Little-endian throughout; values are
// stored as f32 regardless of the build scalar.
void save_checkpoint(const std::string& path, const nlohmann::json& header,
                     const ParamRegistry& reg);

// Loads values into an already-constructed registry; every stored name must
// match an existing parameter of identical shape. Returns the JSON header.
nlohmann::json load_checkpoint(const std::string& path, ParamRegistry& reg);

// Header only, for reconstructing model configs before loading values.
nlohmann::json peek_checkpoint(const std::string& path);

}  // namespace csipred

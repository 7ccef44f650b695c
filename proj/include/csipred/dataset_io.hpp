#pragma once

#include <string>

#include "csipred/channel.hpp"

#include "json.hpp"

namespace csipred {

// Binary dataset format (little-endian):
//   magic "CSIA", version u16
//   header: M u32, F u32, T u32, n_train u32, n_val u32, n_test u32,
//           f_uplink f64, f_downlink f64
//   per split (train, val, test), per sample:
//     velocity_mps f32, velocity_bin u16,
//     history  f32 interleaved (re,im), C-order [pair][F][T],
//     target   f32 interleaved (re,im), C-order [pair][F]
// A JSON sidecar <path>.json carries the full ScenarioConfig.
void write_dataset(const std::string& path, const DatasetSplit& ds);
DatasetSplit read_dataset(const std::string& path);

nlohmann::json scenario_to_json(const ScenarioConfig& cfg);
// Strict: unknown or missing keys raise ParamError naming the key.
ScenarioConfig scenario_from_json(const nlohmann::json& j);

}  // namespace csipred

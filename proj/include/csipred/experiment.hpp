#pragma once

#include <optional>
#include <string>

#include "csipred/training.hpp"

#include "json.hpp"

namespace csipred {

using json = nlohmann::json;

// Strict parsing: unknown keys are hard errors naming the key, as are
// missing ones. Every config carries schema_version = 1.
void check_keys(const json& j, const std::vector<std::string>& known, const std::string& context);
json load_config_file(const std::string& path);

// FNV-1a over the canonical (sorted-key) dump; 16 hex characters.
std::string config_hash(const json& j);

json teacher_config_to_json(const TeacherConfig& cfg);
TeacherConfig teacher_config_from_json(const json& j);
json student_config_to_json(const StudentConfig& cfg);
StudentConfig student_config_from_json(const json& j);
json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const json& j);

struct CliOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<double> few_shot;
    std::string resume_checkpoint;  // train only
};

// Stratified train-split subset: exactly round(fraction * n) samples, the
// per-velocity-bin counts as equal as possible, selection seeded.
std::vector<Sample> few_shot_subset(const std::vector<Sample>& train, double fraction,
                                    std::uint64_t seed);

int cmd_generate(const std::string& config_path, const std::string& out_dir);
int cmd_train(const std::string& config_path, const std::string& out_dir, const CliOverrides& ov);
int cmd_distill(const std::string& config_path, const std::string& out_dir, const CliOverrides& ov);
int cmd_eval(const std::string& config_path, const std::string& out_dir);
int cmd_cost(const std::string& config_path, const std::string& out_dir);
int cmd_dump_embeddings(const std::string& config_path, const std::string& out_dir);
int cmd_ablate(const std::string& config_path, const std::string& out_dir);

}  // namespace csipred

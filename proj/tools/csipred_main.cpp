// Command-line surface for the channel prediction pipeline: dataset
// generation, teacher/student training, attention-relation distillation,
// evaluation sweeps, cost accounting and embedding dumps.

#include <iostream>

#include "CLI11.hpp"

#include "csipred/experiment.hpp"

int main(int argc, char** argv) {
    CLI::App app{"csipred: channel prediction pipeline"};
    app.require_subcommand(1);

    std::string config, out = ".";
    std::uint64_t seed = 0;
    bool seed_set = false;
    double few_shot = 1.0;
    bool few_shot_set = false;
    std::string resume;

    auto add_common = [&](CLI::App* cmd, bool with_train_flags) {
        cmd->add_option("--config", config, "JSON config file")->required();
        cmd->add_option("--out", out, "output directory");
        if (with_train_flags) {
            cmd->add_option("--seed", seed, "override the training seed")
                ->each([&](const std::string&) { seed_set = true; });
            cmd->add_option("--few-shot", few_shot, "train on this fraction of the training split")
                ->each([&](const std::string&) { few_shot_set = true; });
        }
    };

    CLI::App* generate = app.add_subcommand("generate", "generate a dataset");
    add_common(generate, false);
    CLI::App* train = app.add_subcommand("train", "train a model");
    add_common(train, true);
    train->add_option("--resume", resume, "continue from a checkpoint of the same config");
    CLI::App* distill = app.add_subcommand("distill", "distill a student from a teacher checkpoint");
    add_common(distill, true);
    CLI::App* eval = app.add_subcommand("eval", "evaluate checkpoints and baselines");
    add_common(eval, false);
    CLI::App* cost = app.add_subcommand("cost", "parameter counts and inference latency");
    add_common(cost, false);
    CLI::App* dump = app.add_subcommand("dump-embeddings", "dump word/CSI embedding vectors");
    add_common(dump, false);
    CLI::App* ablate = app.add_subcommand("ablate", "run ablation variants over seeds");
    add_common(ablate, false);

    CLI11_PARSE(app, argc, argv);

    csipred::CliOverrides ov;
    if (seed_set) ov.seed = seed;
    if (few_shot_set) ov.few_shot = few_shot;
    ov.resume_checkpoint = resume;

    try {
        if (generate->parsed()) return csipred::cmd_generate(config, out);
        if (train->parsed()) return csipred::cmd_train(config, out, ov);
        if (distill->parsed()) return csipred::cmd_distill(config, out, ov);
        if (eval->parsed()) return csipred::cmd_eval(config, out);
        if (cost->parsed()) return csipred::cmd_cost(config, out);
        if (dump->parsed()) return csipred::cmd_dump_embeddings(config, out);
        if (ablate->parsed()) return csipred::cmd_ablate(config, out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "error: no subcommand\n";
    return 1;
}

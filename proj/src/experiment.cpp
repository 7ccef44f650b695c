#include "csipred/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <thread>
#include <unistd.h>

#include "csipred/checkpoint.hpp"
#include "csipred/dataset_io.hpp"

namespace csipred {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- json utils

void check_keys(const json& j, const std::vector<std::string>& known, const std::string& context) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw ParamError(context + ": unknown key '" + it.key() + "'");
    }
}

json load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config " + path);
    json j = json::parse(is, nullptr, true);
    if (!j.contains("schema_version")) throw ParamError(path + ": missing key 'schema_version'");
    if (j.at("schema_version").get<int>() != 1)
        throw ParamError(path + ": unsupported schema_version");
    return j;
}

std::string config_hash(const json& j) {
    const std::string s = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace {

std::string fmt_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
    return j.contains(key) ? j.at(key).get<T>() : fallback;
}

}  // namespace

// ------------------------------------------------------- config serializers

static json lora_to_json(const LoraConfig& c) {
    return json{{"enabled", c.enabled}, {"rank", c.rank}, {"alpha", c.alpha}};
}

static LoraConfig lora_from_json(const json& j) {
    check_keys(j, {"enabled", "rank", "alpha"}, "lora");
    LoraConfig c;
    c.enabled = get_or(j, "enabled", c.enabled);
    c.rank = get_or(j, "rank", c.rank);
    c.alpha = get_or(j, "alpha", c.alpha);
    return c;
}

static json backbone_to_json(const BackboneConfig& c) {
    return json{{"layers", c.layers},     {"hidden", c.hidden},
                {"heads", c.heads},       {"ffn_mult", c.ffn_mult},
                {"max_positions", c.max_positions}, {"vocab", c.vocab},
                {"causal", c.causal},     {"lora", lora_to_json(c.lora)},
                {"frozen_base", c.frozen_base}};
}

static BackboneConfig backbone_from_json(const json& j) {
    check_keys(j, {"layers", "hidden", "heads", "ffn_mult", "max_positions", "vocab", "causal",
                   "lora", "frozen_base"},
               "backbone");
    BackboneConfig c;
    c.layers = get_or(j, "layers", c.layers);
    c.hidden = get_or(j, "hidden", c.hidden);
    c.heads = get_or(j, "heads", c.heads);
    c.ffn_mult = get_or(j, "ffn_mult", c.ffn_mult);
    c.max_positions = get_or(j, "max_positions", c.max_positions);
    c.vocab = get_or(j, "vocab", c.vocab);
    c.causal = get_or(j, "causal", c.causal);
    if (j.contains("lora")) c.lora = lora_from_json(j.at("lora"));
    c.frozen_base = get_or(j, "frozen_base", c.frozen_base);
    c.validate();
    return c;
}

json teacher_config_to_json(const TeacherConfig& c) {
    return json{{"subcarriers", c.subcarriers},
                {"t_history", c.t_history},
                {"patch_size", c.patch_size},
                {"cssa_dim", c.cssa_dim},
                {"dict_d", c.dict_d},
                {"anchors_m", c.anchors_m},
                {"prompts_k", c.prompts_k},
                {"align_heads", c.align_heads},
                {"backbone", backbone_to_json(c.backbone)},
                {"use_cssa", c.use_cssa},
                {"temporal_attention", c.temporal_attention},
                {"cross_modal", c.cross_modal},
                {"prompts", c.prompts}};
}

TeacherConfig teacher_config_from_json(const json& j) {
    check_keys(j, {"subcarriers", "t_history", "patch_size", "cssa_dim", "dict_d", "anchors_m",
                   "prompts_k", "align_heads", "backbone", "use_cssa", "temporal_attention",
                   "cross_modal", "prompts"},
               "model.teacher");
    TeacherConfig c;
    c.subcarriers = get_or(j, "subcarriers", c.subcarriers);
    c.t_history = get_or(j, "t_history", c.t_history);
    c.patch_size = get_or(j, "patch_size", c.patch_size);
    c.cssa_dim = get_or(j, "cssa_dim", c.cssa_dim);
    c.dict_d = get_or(j, "dict_d", c.dict_d);
    c.anchors_m = get_or(j, "anchors_m", c.anchors_m);
    c.prompts_k = get_or(j, "prompts_k", c.prompts_k);
    c.align_heads = get_or(j, "align_heads", c.align_heads);
    if (j.contains("backbone")) c.backbone = backbone_from_json(j.at("backbone"));
    c.use_cssa = get_or(j, "use_cssa", c.use_cssa);
    c.temporal_attention = get_or(j, "temporal_attention", c.temporal_attention);
    c.cross_modal = get_or(j, "cross_modal", c.cross_modal);
    c.prompts = get_or(j, "prompts", c.prompts);
    c.validate();
    return c;
}

json student_config_to_json(const StudentConfig& c) {
    return json{{"layers", c.layers},       {"hidden", c.hidden},
                {"heads", c.heads},         {"prompt_len", c.prompt_len},
                {"max_positions", c.max_positions}, {"ffn_mult", c.ffn_mult},
                {"subcarriers", c.subcarriers}, {"t_history", c.t_history}};
}

StudentConfig student_config_from_json(const json& j) {
    check_keys(j, {"layers", "hidden", "heads", "prompt_len", "max_positions", "ffn_mult",
                   "subcarriers", "t_history"},
               "model.student");
    StudentConfig c;
    c.layers = get_or(j, "layers", c.layers);
    c.hidden = get_or(j, "hidden", c.hidden);
    c.heads = get_or(j, "heads", c.heads);
    c.prompt_len = get_or(j, "prompt_len", c.prompt_len);
    c.max_positions = get_or(j, "max_positions", c.max_positions);
    c.ffn_mult = get_or(j, "ffn_mult", c.ffn_mult);
    c.subcarriers = get_or(j, "subcarriers", c.subcarriers);
    c.t_history = get_or(j, "t_history", c.t_history);
    c.validate();
    return c;
}

static json relation_to_json(const RelationConfig& c) {
    return json{{"relation_heads", c.relation_heads},
                {"window", c.window},
                {"alpha", {{c.alpha[0][0], c.alpha[0][1], c.alpha[0][2]},
                           {c.alpha[1][0], c.alpha[1][1], c.alpha[1][2]},
                           {c.alpha[2][0], c.alpha[2][1], c.alpha[2][2]}}}};
}

static RelationConfig relation_from_json(const json& j) {
    check_keys(j, {"relation_heads", "window", "alpha"}, "relation");
    RelationConfig c;
    c.relation_heads = get_or(j, "relation_heads", c.relation_heads);
    c.window = get_or(j, "window", c.window);
    if (j.contains("alpha")) {
        const auto& a = j.at("alpha");
        for (int x = 0; x < 3; ++x)
            for (int y = 0; y < 3; ++y) c.alpha[x][y] = a.at(x).at(y).get<int>();
    }
    c.validate();
    return c;
}

json train_config_to_json(const TrainConfig& c) {
    return json{{"epochs", c.epochs},   {"batch", c.batch},       {"lr", c.lr},
                {"seed", c.seed},       {"patience", c.patience}, {"lambda1", c.lambda1},
                {"lambda2", c.lambda2}, {"relation", relation_to_json(c.relation)}};
}

TrainConfig train_config_from_json(const json& j) {
    check_keys(j, {"epochs", "batch", "lr", "seed", "patience", "lambda1", "lambda2", "relation"},
               "train");
    TrainConfig c;
    c.epochs = get_or(j, "epochs", c.epochs);
    c.batch = get_or(j, "batch", c.batch);
    c.lr = get_or(j, "lr", c.lr);
    c.seed = get_or(j, "seed", c.seed);
    c.patience = get_or(j, "patience", c.patience);
    c.lambda1 = get_or(j, "lambda1", c.lambda1);
    c.lambda2 = get_or(j, "lambda2", c.lambda2);
    if (j.contains("relation")) c.relation = relation_from_json(j.at("relation"));
    c.validate();
    return c;
}

static json pretrain_to_json(const PretrainConfig& c) {
    return json{{"steps", c.steps},   {"batch", c.batch},       {"seq_len", c.seq_len},
                {"lr", c.lr},         {"zipf_s", c.zipf_s},     {"bigram_prob", c.bigram_prob},
                {"seed", c.seed}};
}

static PretrainConfig pretrain_from_json(const json& j) {
    check_keys(j, {"steps", "batch", "seq_len", "lr", "zipf_s", "bigram_prob", "seed"}, "pretrain");
    PretrainConfig c;
    c.steps = get_or(j, "steps", c.steps);
    c.batch = get_or(j, "batch", c.batch);
    c.seq_len = get_or(j, "seq_len", c.seq_len);
    c.lr = get_or(j, "lr", c.lr);
    c.zipf_s = get_or(j, "zipf_s", c.zipf_s);
    c.bigram_prob = get_or(j, "bigram_prob", c.bigram_prob);
    c.seed = get_or(j, "seed", c.seed);
    return c;
}

// --------------------------------------------------------------- few shot

std::vector<Sample> few_shot_subset(const std::vector<Sample>& train, double fraction,
                                    std::uint64_t seed) {
    if (fraction <= 0 || fraction > 1) throw ParamError("few_shot: fraction must be in (0, 1]");
    if (fraction == 1.0) return train;
    const int want = static_cast<int>(std::llround(fraction * static_cast<double>(train.size())));
    if (want < 1) throw ParamError("few_shot: fraction leaves no samples");

    std::vector<std::vector<int>> by_bin(kVelocityBins);
    for (size_t i = 0; i < train.size(); ++i)
        by_bin[static_cast<size_t>(train[i].velocity_bin)].push_back(static_cast<int>(i));

    // Per-bin quota: floor everywhere, remainder to the lowest bins.
    std::vector<int> quota(kVelocityBins, want / kVelocityBins);
    for (int i = 0; i < want % kVelocityBins; ++i) quota[static_cast<size_t>(i)] += 1;

    Rng rng(mix_seed(seed, 0xf5));
    std::vector<int> chosen;
    for (int b = 0; b < kVelocityBins; ++b) {
        auto& ids = by_bin[static_cast<size_t>(b)];
        rng.shuffle(ids.begin(), ids.end());
        const int take = std::min<int>(quota[static_cast<size_t>(b)], static_cast<int>(ids.size()));
        for (int i = 0; i < take; ++i) chosen.push_back(ids[static_cast<size_t>(i)]);
    }
    std::sort(chosen.begin(), chosen.end());
    std::vector<Sample> out;
    out.reserve(chosen.size());
    for (int i : chosen) out.push_back(train[static_cast<size_t>(i)]);
    return out;
}

// ------------------------------------------------------------ shared pieces

namespace {

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
}

std::ofstream open_out(const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    return os;
}

void write_metrics_csv(const std::string& path, const TrainRun& run, const std::string& hash) {
    auto os = open_out(path);
    os << "epoch,split,nmse_db,loss_total,loss_align_or_kd,wall_ms,config_hash\n";
    for (const auto& m : run.log)
        os << m.epoch << "," << m.split << "," << fmt_num(m.nmse_db) << "," << fmt_num(m.loss_total)
           << "," << fmt_num(m.loss_aux) << "," << fmt_num(m.wall_ms) << "," << hash << "\n";
}

// Cached surrogate pretraining: one checkpoint per (backbone, pretrain)
// config pair, written atomically so concurrent runs can share it.
std::string ensure_pretrained(const BackboneConfig& target_backbone, const PretrainConfig& pc,
                              const std::string& cache_dir) {
    BackboneConfig bc = target_backbone;
    bc.lora.enabled = false;  // pretraining trains the base itself
    bc.frozen_base = false;
    const json key = {{"backbone", backbone_to_json(bc)}, {"pretrain", pretrain_to_json(pc)}};
    const std::string hash = config_hash(key);
    ensure_dir(cache_dir);
    const std::string path = cache_dir + "/pretrain_" + hash + ".ckpt";
    if (fs::exists(path)) return path;

    ParamRegistry reg;
    TransformerBackbone bb;
    Rng rng(mix_seed(pc.seed, 0xb0));
    bb.init(bc, reg, "teacher.backbone", rng);
    const auto ce = surrogate_pretrain(bb, reg, pc);
    json header = {{"schema_version", 1},
                   {"kind", "pretrain"},
                   {"key", key},
                   {"ce_first", ce.front()},
                   {"ce_last", ce.back()}};
    const std::string tmp = path + ".tmp." + std::to_string(::getpid());
    save_checkpoint(tmp, header, reg);
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec && !fs::exists(path)) throw IoError("cannot place pretrain cache at " + path);
    return path;
}

struct TeacherRunSpec {
    std::string name;
    TeacherConfig model_cfg;
    bool pretrained = true;
    PretrainConfig pre_cfg;
    std::string cache_dir = "pretrain_cache";
    TrainConfig train_cfg;
    json full_config;  // hashed into every output row
};

struct TeacherRunResult {
    TrainRun run;
    double test_nmse_db = 0;
    std::unique_ptr<TeacherModel> model;
    std::string hash;
};

TeacherRunResult execute_teacher_run(const TeacherRunSpec& spec, const DatasetSplit& data,
                                     const std::string& resume_path = "") {
    if (!spec.pretrained && spec.model_cfg.backbone.frozen_base)
        throw ParamError("train: a frozen randomly initialized backbone would be untrainable");
    TeacherRunResult out;
    out.hash = config_hash(spec.full_config);
    out.model = std::make_unique<TeacherModel>(spec.model_cfg,
                                               mix_seed(spec.train_cfg.seed, 0xa11));
    if (spec.pretrained) {
        const std::string ckpt = ensure_pretrained(spec.model_cfg.backbone, spec.pre_cfg, spec.cache_dir);
        // The pretrain checkpoint stores the base weights only (no LoRA
        // factors), so loading leaves the adapters at their zero init.
        load_checkpoint(ckpt, out.model->registry());
        out.model->refresh_dictionary();
    }
    if (!resume_path.empty()) {
        const json header = load_checkpoint(resume_path, out.model->registry());
        out.model->normalizer().load(header.at("norm_mean").get<double>(),
                                     header.at("norm_std").get<double>());
        out.model->refresh_dictionary();
    }
    out.run = train_teacher(data, *out.model, spec.train_cfg);
    auto predictor = [&](const std::vector<const cplx*>& h) {
        return out.model->forward_batch(h, false, false).preds_raw;
    };
    out.test_nmse_db = mean_nmse_db(per_sample_nmse(predictor, data.test, data.config.antennas,
                                                    data.config.subcarriers, data.config.t_history));
    return out;
}

json teacher_header(const TeacherRunSpec& spec, const TeacherRunResult& res, double few_shot) {
    return json{{"schema_version", 1},
                {"kind", "teacher"},
                {"name", spec.name},
                {"model", teacher_config_to_json(spec.model_cfg)},
                {"train", train_config_to_json(spec.train_cfg)},
                {"pretrained", spec.pretrained},
                {"few_shot", few_shot},
                {"norm_mean", res.model->normalizer().frozen().mean},
                {"norm_std", res.model->normalizer().frozen().std},
                {"epochs_run", res.run.epochs_run},
                {"best_epoch", res.run.best_epoch},
                {"best_val_nmse_db", res.run.best_val_nmse_db},
                {"test_nmse_db", res.test_nmse_db},
                {"config_hash", res.hash}};
}

std::unique_ptr<TeacherModel> teacher_from_checkpoint(const std::string& path, json* header_out) {
    json header = peek_checkpoint(path);
    if (header.at("kind").get<std::string>() != "teacher")
        throw ParamError(path + ": not a teacher checkpoint");
    const TeacherConfig cfg = teacher_config_from_json(header.at("model"));
    auto model = std::make_unique<TeacherModel>(cfg, 0);
    load_checkpoint(path, model->registry());
    model->normalizer().load(header.at("norm_mean").get<double>(),
                             header.at("norm_std").get<double>());
    model->refresh_dictionary();
    for (auto& [name, t] : model->registry().items()) t.set_requires_grad(false);
    if (header_out) *header_out = header;
    return model;
}

std::unique_ptr<StudentModel> student_from_checkpoint(const std::string& path, json* header_out) {
    json header = peek_checkpoint(path);
    if (header.at("kind").get<std::string>() != "student")
        throw ParamError(path + ": not a student checkpoint");
    const StudentConfig cfg = student_config_from_json(header.at("model"));
    auto model = std::make_unique<StudentModel>(cfg, 0);
    load_checkpoint(path, model->registry());
    model->normalizer().load(header.at("norm_mean").get<double>(),
                             header.at("norm_std").get<double>());
    for (auto& [name, t] : model->registry().items()) t.set_requires_grad(false);
    if (header_out) *header_out = header;
    return model;
}

// Minimal fixed-size worker pool over an indexed job list.
void run_pool(int jobs, int workers, const std::function<void(int)>& fn) {
    std::atomic<int> next{0};
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        threads.emplace_back([&, w]() {
            try {
                for (int i = next.fetch_add(1); i < jobs; i = next.fetch_add(1)) fn(i);
            } catch (...) {
                errors[static_cast<size_t>(w)] = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace

// ----------------------------------------------------------------- generate

int cmd_generate(const std::string& config_path, const std::string& out_dir) {
    const json j = load_config_file(config_path);
    check_keys(j, {"schema_version", "name", "scenario", "counts"}, "generate");
    if (!j.contains("scenario")) throw ParamError("generate: missing key 'scenario'");
    if (!j.contains("counts")) throw ParamError("generate: missing key 'counts'");
    const ScenarioConfig sc = scenario_from_json(j.at("scenario"));
    check_keys(j.at("counts"), {"train", "val", "test"}, "counts");
    const int n_train = j.at("counts").at("train").get<int>();
    const int n_val = j.at("counts").at("val").get<int>();
    const int n_test = j.at("counts").at("test").get<int>();
    const std::string name = get_or<std::string>(j, "name", "dataset");

    const DatasetSplit ds = make_dataset(sc, n_train, n_val, n_test);
    ensure_dir(out_dir);
    const std::string path = out_dir + "/" + name + ".csia";
    write_dataset(path, ds);
    std::cout << "dataset " << path << " hash " << config_hash(j) << " train " << n_train << " val "
              << n_val << " test " << n_test << "\n";
    return 0;
}

// -------------------------------------------------------------------- train

int cmd_train(const std::string& config_path, const std::string& out_dir, const CliOverrides& ov) {
    json j = load_config_file(config_path);
    check_keys(j, {"schema_version", "name", "dataset", "model", "init", "train"}, "train");
    const std::string name = get_or<std::string>(j, "name", "model");
    if (!j.contains("dataset")) throw ParamError("train: missing key 'dataset'");
    if (!j.contains("model")) throw ParamError("train: missing key 'model'");
    check_keys(j.at("model"), {"kind", "teacher", "student"}, "model");
    const std::string kind = j.at("model").at("kind").get<std::string>();

    TrainConfig tc = j.contains("train") ? train_config_from_json(j.at("train")) : TrainConfig{};
    if (ov.seed) tc.seed = *ov.seed;
    const double few_shot = ov.few_shot.value_or(1.0);
    j["applied_seed"] = tc.seed;
    j["applied_few_shot"] = few_shot;

    DatasetSplit data = read_dataset(j.at("dataset").get<std::string>());
    data.train = few_shot_subset(data.train, few_shot, tc.seed);
    ensure_dir(out_dir);

    if (kind == "teacher") {
        TeacherRunSpec spec;
        spec.name = name;
        spec.model_cfg = teacher_config_from_json(j.at("model").at("teacher"));
        if (j.contains("init")) {
            check_keys(j.at("init"), {"pretrained", "pretrain", "cache_dir"}, "init");
            spec.pretrained = get_or(j.at("init"), "pretrained", true);
            if (j.at("init").contains("pretrain"))
                spec.pre_cfg = pretrain_from_json(j.at("init").at("pretrain"));
            spec.cache_dir = get_or<std::string>(j.at("init"), "cache_dir", spec.cache_dir);
        }
        spec.train_cfg = tc;
        spec.full_config = j;

        if (!ov.resume_checkpoint.empty()) {
            // Resume: epoch counter continues from the stored run.
            json header = peek_checkpoint(ov.resume_checkpoint);
            if (header.at("config_hash").get<std::string>() != config_hash(j))
                throw ParamError("resume: checkpoint config hash does not match this config");
            spec.train_cfg.start_epoch = header.at("epochs_run").get<int>();
        }

        TeacherRunResult res = execute_teacher_run(spec, data, ov.resume_checkpoint);
        const json header = teacher_header(spec, res, few_shot);
        save_checkpoint(out_dir + "/checkpoint.ckpt", header, res.model->registry());
        write_metrics_csv(out_dir + "/metrics.csv", res.run, res.hash);
        auto os = open_out(out_dir + "/summary.json");
        os << header.dump(2) << "\n";
        std::cout << "trained " << name << " hash " << res.hash << " best_val "
                  << fmt_num(res.run.best_val_nmse_db) << " dB test " << fmt_num(res.test_nmse_db)
                  << " dB epochs " << res.run.epochs_run << "\n";
        return 0;
    }
    if (kind == "student") {
        const StudentConfig cfg = student_config_from_json(j.at("model").at("student"));
        StudentModel student(cfg, mix_seed(tc.seed, 0xa11));
        tc.lambda2 = 0.0;  // plain student training; distillation is cmd_distill
        TrainRun run = train_student(data, nullptr, student, tc);
        auto predictor = [&](const std::vector<const cplx*>& h) {
            return student.forward_batch(h, false, false).preds_raw;
        };
        const double test_db = mean_nmse_db(per_sample_nmse(
            predictor, data.test, data.config.antennas, data.config.subcarriers, data.config.t_history));
        const std::string hash = config_hash(j);
        const json header = {{"schema_version", 1},
                             {"kind", "student"},
                             {"name", name},
                             {"model", student_config_to_json(cfg)},
                             {"train", train_config_to_json(tc)},
                             {"few_shot", few_shot},
                             {"norm_mean", student.normalizer().frozen().mean},
                             {"norm_std", student.normalizer().frozen().std},
                             {"epochs_run", run.epochs_run},
                             {"best_epoch", run.best_epoch},
                             {"best_val_nmse_db", run.best_val_nmse_db},
                             {"test_nmse_db", test_db},
                             {"config_hash", hash}};
        save_checkpoint(out_dir + "/checkpoint.ckpt", header, student.registry());
        write_metrics_csv(out_dir + "/metrics.csv", run, hash);
        auto os = open_out(out_dir + "/summary.json");
        os << header.dump(2) << "\n";
        std::cout << "trained " << name << " hash " << hash << " best_val "
                  << fmt_num(run.best_val_nmse_db) << " dB test " << fmt_num(test_db) << " dB epochs "
                  << run.epochs_run << "\n";
        return 0;
    }
    throw ParamError("train: model.kind must be 'teacher' or 'student', got '" + kind + "'");
}

// ------------------------------------------------------------------ distill

int cmd_distill(const std::string& config_path, const std::string& out_dir, const CliOverrides& ov) {
    json j = load_config_file(config_path);
    check_keys(j, {"schema_version", "name", "dataset", "teacher_checkpoint", "student", "train"},
               "distill");
    const std::string name = get_or<std::string>(j, "name", "student_kd");
    TrainConfig tc = j.contains("train") ? train_config_from_json(j.at("train")) : TrainConfig{};
    if (ov.seed) tc.seed = *ov.seed;
    const double few_shot = ov.few_shot.value_or(1.0);
    j["applied_seed"] = tc.seed;
    j["applied_few_shot"] = few_shot;

    DatasetSplit data = read_dataset(j.at("dataset").get<std::string>());
    data.train = few_shot_subset(data.train, few_shot, tc.seed);

    auto teacher = teacher_from_checkpoint(j.at("teacher_checkpoint").get<std::string>(), nullptr);
    const StudentConfig cfg = student_config_from_json(j.at("student"));
    StudentModel student(cfg, mix_seed(tc.seed, 0xa11));
    TrainRun run = train_student(data, teacher.get(), student, tc);

    auto predictor = [&](const std::vector<const cplx*>& h) {
        return student.forward_batch(h, false, false).preds_raw;
    };
    const double test_db = mean_nmse_db(per_sample_nmse(
        predictor, data.test, data.config.antennas, data.config.subcarriers, data.config.t_history));
    const std::string hash = config_hash(j);
    ensure_dir(out_dir);
    const json header = {{"schema_version", 1},
                         {"kind", "student"},
                         {"name", name},
                         {"model", student_config_to_json(cfg)},
                         {"train", train_config_to_json(tc)},
                         {"few_shot", few_shot},
                         {"norm_mean", student.normalizer().frozen().mean},
                         {"norm_std", student.normalizer().frozen().std},
                         {"epochs_run", run.epochs_run},
                         {"best_epoch", run.best_epoch},
                         {"best_val_nmse_db", run.best_val_nmse_db},
                         {"test_nmse_db", test_db},
                         {"config_hash", hash}};
    save_checkpoint(out_dir + "/checkpoint.ckpt", header, student.registry());
    write_metrics_csv(out_dir + "/metrics.csv", run, hash);
    auto os = open_out(out_dir + "/summary.json");
    os << header.dump(2) << "\n";
    std::cout << "distilled " << name << " hash " << hash << " best_val "
              << fmt_num(run.best_val_nmse_db) << " dB test " << fmt_num(test_db) << " dB epochs "
              << run.epochs_run << "\n";
    return 0;
}

// --------------------------------------------------------------------- eval

namespace {

struct EvalModel {
    std::string name;
    std::string kind;  // teacher | student | persistence | zero
    std::unique_ptr<TeacherModel> teacher;
    std::unique_ptr<StudentModel> student;
    std::int64_t params_total = 0;
    std::int64_t params_trainable = 0;

    Tensor predict(const std::vector<const cplx*>& hist, int f, int t) const {
        if (kind == "teacher") return teacher->forward_batch(hist, false, false).preds_raw;
        if (kind == "student") return student->forward_batch(hist, false, false).preds_raw;
        const int b = static_cast<int>(hist.size());
        Tensor out = Tensor::zeros({b, 2 * f});
        if (kind == "persistence") {
            for (int r = 0; r < b; ++r)
                for (int k = 0; k < f; ++k) {
                    const cplx v = hist[static_cast<size_t>(r)][static_cast<size_t>(k) * t + (t - 1)];
                    out.ptr()[r * 2 * f + k] = static_cast<real_t>(v.real());
                    out.ptr()[r * 2 * f + k + f] = static_cast<real_t>(v.imag());
                }
        }
        return out;  // zero baseline: all zeros
    }
};

EvalModel load_eval_model(const json& spec) {
    check_keys(spec, {"name", "checkpoint", "baseline"}, "models[]");
    EvalModel m;
    m.name = spec.at("name").get<std::string>();
    if (spec.contains("baseline")) {
        m.kind = spec.at("baseline").get<std::string>();
        if (m.kind != "persistence" && m.kind != "zero")
            throw ParamError("eval: baseline must be 'persistence' or 'zero'");
        return m;
    }
    const std::string path = spec.at("checkpoint").get<std::string>();
    const json header = peek_checkpoint(path);
    m.kind = header.at("kind").get<std::string>();
    if (m.kind == "teacher") {
        m.teacher = teacher_from_checkpoint(path, nullptr);
        m.params_total = m.teacher->registry().total_count();
        // Trainable counts reflect the training-time contract stored in the
        // config, not the frozen eval state.
        ParamRegistry scratch;
        TeacherModel counter(m.teacher->config(), 0);
        m.params_trainable = counter.registry().trainable_count();
    } else {
        m.student = student_from_checkpoint(path, nullptr);
        m.params_total = m.student->registry().total_count();
        StudentModel counter(m.student->config(), 0);
        m.params_trainable = counter.registry().trainable_count();
    }
    return m;
}

double median_latency_us(const EvalModel& m, const Sample& sample, int pairs, int f, int t,
                         int runs) {
    std::vector<const cplx*> hist;
    for (int p = 0; p < pairs; ++p)
        hist.push_back(sample.uplink.values.data() + static_cast<size_t>(p) * f * t);
    NoGradGuard ng;
    for (int i = 0; i < 10; ++i) {
        (void)m.predict(hist, f, t);
        tape().clear();
    }
    std::vector<double> us(static_cast<size_t>(runs));
    for (int i = 0; i < runs; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        (void)m.predict(hist, f, t);
        tape().clear();
        us[static_cast<size_t>(i)] =
            std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
    }
    std::sort(us.begin(), us.end());
    return us[us.size() / 2];
}

}  // namespace

int cmd_eval(const std::string& config_path, const std::string& out_dir) {
    const json j = load_config_file(config_path);
    check_keys(j, {"schema_version", "name", "dataset", "seed", "models", "sweeps"}, "eval");
    const std::string name = get_or<std::string>(j, "name", "eval");
    const std::uint64_t seed = get_or<std::uint64_t>(j, "seed", 1);
    const DatasetSplit data = read_dataset(j.at("dataset").get<std::string>());
    const int pairs = data.config.antennas;
    const int f = data.config.subcarriers;
    const int t = data.config.t_history;
    const std::string hash = config_hash(j);

    bool sweep_velocity = true;
    std::vector<double> snr_list;
    if (j.contains("sweeps")) {
        check_keys(j.at("sweeps"), {"velocity", "snr_db"}, "sweeps");
        sweep_velocity = get_or(j.at("sweeps"), "velocity", true);
        if (j.at("sweeps").contains("snr_db")) snr_list = j.at("sweeps").at("snr_db").get<std::vector<double>>();
    }

    std::vector<EvalModel> models;
    for (const auto& spec : j.at("models")) models.push_back(load_eval_model(spec));

    ensure_dir(out_dir);
    auto results = open_out(out_dir + "/results.csv");
    results << "experiment,model,condition,seed,nmse_db,params_total,params_trainable,inference_us,"
               "config_hash\n";
    auto persample = open_out(out_dir + "/persample.csv");
    persample << "model,sample_index,velocity_kmh,nmse_ratio,config_hash\n";
    std::ofstream velocity_csv, snr_csv;
    if (sweep_velocity) {
        velocity_csv = open_out(out_dir + "/velocity.csv");
        velocity_csv << "model,velocity_kmh,nmse_db,n_samples,config_hash\n";
    }
    if (!snr_list.empty()) {
        snr_csv = open_out(out_dir + "/snr.csv");
        snr_csv << "model,snr_db,nmse_db,n_samples,config_hash\n";
    }

    // The SNR sweep runs at the 30 km/h bin with noise shared across models.
    const int snr_bin = 2;
    std::vector<const Sample*> snr_samples;
    for (const auto& s : data.test)
        if (s.velocity_bin == snr_bin) snr_samples.push_back(&s);
    std::vector<std::vector<CsiSequence>> noisy;  // [snr][sample]
    for (size_t si = 0; si < snr_list.size(); ++si) {
        noisy.emplace_back();
        for (size_t k = 0; k < snr_samples.size(); ++k) {
            Rng rng(mix_seed(seed, si, k));
            noisy.back().push_back(add_noise(snr_samples[k]->uplink, snr_list[si], rng));
        }
    }

    struct ModelOut {
        std::vector<double> ratios;
        double inference_us = 0;
        std::vector<double> snr_db_out;
    };
    std::vector<ModelOut> outs(models.size());

    run_pool(static_cast<int>(models.size()), 2, [&](int mi) {
        const EvalModel& m = models[static_cast<size_t>(mi)];
        auto predictor = [&](const std::vector<const cplx*>& h) { return m.predict(h, f, t); };
        ModelOut& mo = outs[static_cast<size_t>(mi)];
        mo.ratios = per_sample_nmse(predictor, data.test, pairs, f, t);
        mo.inference_us = median_latency_us(m, data.test.front(), pairs, f, t, 100);
        for (size_t si = 0; si < snr_list.size(); ++si) {
            double acc = 0;
            NoGradGuard ng;
            for (size_t k = 0; k < snr_samples.size(); ++k) {
                std::vector<const cplx*> hist;
                for (int p = 0; p < pairs; ++p)
                    hist.push_back(noisy[si][k].values.data() + static_cast<size_t>(p) * f * t);
                Tensor preds = m.predict(hist, f, t);
                double num = 0, den = 0;
                for (int p = 0; p < pairs; ++p) {
                    const auto tv = pair_target(*snr_samples[k], p, f);
                    for (int c = 0; c < 2 * f; ++c) {
                        const double e = static_cast<double>(tv[static_cast<size_t>(c)]) -
                                         preds.ptr()[p * 2 * f + c];
                        num += e * e;
                        den += static_cast<double>(tv[static_cast<size_t>(c)]) * tv[static_cast<size_t>(c)];
                    }
                }
                acc += num / den;
                tape().clear();
            }
            mo.snr_db_out.push_back(std::max(to_db(acc / snr_samples.size()), -100.0));
        }
    });

    for (size_t mi = 0; mi < models.size(); ++mi) {
        const EvalModel& m = models[mi];
        const ModelOut& mo = outs[mi];
        results << name << "," << m.name << ",overall," << seed << "," << fmt_num(mean_nmse_db(mo.ratios))
                << "," << m.params_total << "," << m.params_trainable << "," << fmt_num(mo.inference_us)
                << "," << hash << "\n";
        for (size_t i = 0; i < mo.ratios.size(); ++i)
            persample << m.name << "," << i << ","
                      << fmt_num(data.test[i].velocity_mps * 3.6) << "," << fmt_num(mo.ratios[i]) << ","
                      << hash << "\n";
        if (sweep_velocity) {
            for (int b = 0; b < kVelocityBins; ++b) {
                double acc = 0;
                int n = 0;
                for (size_t i = 0; i < mo.ratios.size(); ++i)
                    if (data.test[i].velocity_bin == b) {
                        acc += mo.ratios[i];
                        ++n;
                    }
                if (n == 0) continue;
                velocity_csv << m.name << "," << fmt_num(velocity_for_bin(b) * 3.6) << ","
                             << fmt_num(std::max(to_db(acc / n), -100.0)) << "," << n << "," << hash
                             << "\n";
            }
        }
        for (size_t si = 0; si < snr_list.size(); ++si)
            snr_csv << m.name << "," << fmt_num(snr_list[si]) << "," << fmt_num(mo.snr_db_out[si]) << ","
                    << snr_samples.size() << "," << hash << "\n";
    }
    std::cout << "eval " << name << " hash " << hash << " models " << models.size() << "\n";
    return 0;
}

// --------------------------------------------------------------------- cost

int cmd_cost(const std::string& config_path, const std::string& out_dir) {
    const json j = load_config_file(config_path);
    check_keys(j, {"schema_version", "name", "dataset", "models", "warm_runs"}, "cost");
    const std::string name = get_or<std::string>(j, "name", "cost");
    const int warm_runs = std::max(100, get_or(j, "warm_runs", 100));
    const DatasetSplit data = read_dataset(j.at("dataset").get<std::string>());
    const std::string hash = config_hash(j);

    ensure_dir(out_dir);
    auto os = open_out(out_dir + "/cost.csv");
    os << "model,params_total,params_trainable,inference_us,config_hash\n";
    for (const auto& spec : j.at("models")) {
        EvalModel m = load_eval_model(spec);
        const double us = median_latency_us(m, data.test.front(), data.config.antennas,
                                            data.config.subcarriers, data.config.t_history, warm_runs);
        os << m.name << "," << m.params_total << "," << m.params_trainable << "," << fmt_num(us) << ","
           << hash << "\n";
        std::cout << m.name << " params " << m.params_total << " trainable " << m.params_trainable
                  << " latency_us " << fmt_num(us) << " hash " << hash << "\n";
    }
    return 0;
}

// --------------------------------------------------------- dump embeddings

int cmd_dump_embeddings(const std::string& config_path, const std::string& out_dir) {
    const json j = load_config_file(config_path);
    check_keys(j, {"schema_version", "name", "checkpoint", "dataset", "count"}, "dump-embeddings");
    const int count = get_or(j, "count", 64);
    const DatasetSplit data = read_dataset(j.at("dataset").get<std::string>());
    auto teacher = teacher_from_checkpoint(j.at("checkpoint").get<std::string>(), nullptr);
    const int d = teacher->config().backbone.hidden;
    const std::string hash = config_hash(j);

    ensure_dir(out_dir);
    auto os = open_out(out_dir + "/embeddings.csv");
    os << "kind,index";
    for (int i = 0; i < d; ++i) os << ",d" << i;
    os << ",config_hash\n";

    const auto anchors = teacher->anchor_values();
    const int m = teacher->config().anchors_m;
    for (int i = 0; i < m; ++i) {
        os << "word," << i;
        for (int c = 0; c < d; ++c) os << "," << fmt_num(anchors[static_cast<size_t>(i) * d + c]);
        os << "," << hash << "\n";
    }
    const int n = std::min<int>(count, static_cast<int>(data.test.size()));
    for (int i = 0; i < n; ++i) {
        const auto feats = teacher->pooled_features(data.test[static_cast<size_t>(i)].uplink.values.data());
        os << "csi," << i;
        for (int c = 0; c < d; ++c) os << "," << fmt_num(feats[static_cast<size_t>(c)]);
        os << "," << hash << "\n";
    }
    std::cout << "embeddings rows " << (m + n) << " hash " << hash << "\n";
    return 0;
}

// ------------------------------------------------------------------- ablate

int cmd_ablate(const std::string& config_path, const std::string& out_dir) {
    const json j = load_config_file(config_path);
    check_keys(j, {"schema_version", "name", "dataset", "model", "init", "train", "variants",
                   "seeds", "few_shot"},
               "ablate");
    const std::string name = get_or<std::string>(j, "name", "ablation");
    const DatasetSplit data = read_dataset(j.at("dataset").get<std::string>());
    const double few_shot = get_or(j, "few_shot", 1.0);
    const std::vector<std::string> variants = j.at("variants").get<std::vector<std::string>>();
    const std::vector<std::uint64_t> seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (variants.empty() || seeds.empty()) throw ParamError("ablate: variants and seeds must be nonempty");

    const TeacherConfig base_cfg = teacher_config_from_json(j.at("model").at("teacher"));
    PretrainConfig pre_cfg;
    std::string cache_dir = "pretrain_cache";
    bool base_pretrained = true;
    if (j.contains("init")) {
        check_keys(j.at("init"), {"pretrained", "pretrain", "cache_dir"}, "init");
        base_pretrained = get_or(j.at("init"), "pretrained", true);
        if (j.at("init").contains("pretrain")) pre_cfg = pretrain_from_json(j.at("init").at("pretrain"));
        cache_dir = get_or<std::string>(j.at("init"), "cache_dir", cache_dir);
    }
    const TrainConfig base_tc = train_config_from_json(j.at("train"));

    struct Job {
        std::string variant;
        std::uint64_t seed;
        TeacherRunSpec spec;
    };
    std::vector<Job> jobs;
    for (const auto& variant : variants) {
        TeacherRunSpec spec;
        spec.model_cfg = base_cfg;
        spec.pretrained = base_pretrained;
        spec.pre_cfg = pre_cfg;
        spec.cache_dir = cache_dir;
        spec.train_cfg = base_tc;
        if (variant == "full") {
        } else if (variant == "no_pretrain") {
            spec.pretrained = false;
            spec.model_cfg.backbone.lora.enabled = false;
            spec.model_cfg.backbone.frozen_base = false;
        } else if (variant == "no_cross_modal") {
            spec.model_cfg.cross_modal = false;
        } else if (variant == "no_prompts") {
            spec.model_cfg.prompts = false;
        } else {
            throw ParamError("ablate: unknown variant '" + variant + "'");
        }
        for (const auto seed : seeds) {
            Job job;
            job.variant = variant;
            job.seed = seed;
            job.spec = spec;
            job.spec.name = name + "." + variant;
            job.spec.train_cfg.seed = seed;
            json cfg_json = j;
            cfg_json["applied_variant"] = variant;
            cfg_json["applied_seed"] = seed;
            job.spec.full_config = cfg_json;
            jobs.push_back(std::move(job));
        }
    }

    // Warm the pretraining cache once before fanning out.
    for (const auto& job : jobs)
        if (job.spec.pretrained) {
            ensure_pretrained(job.spec.model_cfg.backbone, job.spec.pre_cfg, job.spec.cache_dir);
            break;
        }

    std::vector<double> test_db(jobs.size(), 0.0);
    std::vector<int> epochs_run(jobs.size(), 0);
    std::vector<std::string> hashes(jobs.size());
    run_pool(static_cast<int>(jobs.size()), 2, [&](int i) {
        DatasetSplit local = data;
        local.train = few_shot_subset(data.train, few_shot, jobs[static_cast<size_t>(i)].seed);
        TeacherRunResult res = execute_teacher_run(jobs[static_cast<size_t>(i)].spec, local);
        test_db[static_cast<size_t>(i)] = res.test_nmse_db;
        epochs_run[static_cast<size_t>(i)] = res.run.epochs_run;
        hashes[static_cast<size_t>(i)] = res.hash;
    });

    ensure_dir(out_dir);
    auto os = open_out(out_dir + "/ablation.csv");
    os << "experiment,variant,seed,nmse_db,epochs_run,config_hash\n";
    for (size_t i = 0; i < jobs.size(); ++i)
        os << name << "," << jobs[i].variant << "," << jobs[i].seed << "," << fmt_num(test_db[i]) << ","
           << epochs_run[i] << "," << hashes[i] << "\n";
    std::cout << "ablation " << name << " jobs " << jobs.size() << "\n";
    return 0;
}

}  // namespace csipred

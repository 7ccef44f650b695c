#include <cmath>

#include "doctest.h"

#include "csipred/training.hpp"

using namespace csipred;

namespace {

ScenarioConfig tiny_scenario() {
    ScenarioConfig cfg;
    cfg.antennas = 2;
    cfg.paths = 4;
    cfg.subcarriers = 4;
    cfg.t_history = 8;
    cfg.seed = 11;
    return cfg;
}

TeacherConfig tiny_teacher(int f, int t) {
    TeacherConfig cfg;
    cfg.subcarriers = f;
    cfg.t_history = t;
    cfg.patch_size = 4;
    cfg.cssa_dim = 4;
    cfg.dict_d = 16;
    cfg.anchors_m = 8;
    cfg.prompts_k = 2;
    cfg.align_heads = 4;
    cfg.backbone.layers = 2;
    cfg.backbone.hidden = 32;
    cfg.backbone.heads = 4;
    cfg.backbone.ffn_mult = 2;
    cfg.backbone.max_positions = 16;
    cfg.backbone.vocab = 64;
    cfg.backbone.lora.enabled = false;
    cfg.backbone.frozen_base = false;
    return cfg;
}

StudentConfig tiny_student(int f, int t) {
    StudentConfig cfg;
    cfg.layers = 2;
    cfg.hidden = 32;
    cfg.heads = 4;
    cfg.prompt_len = 2;
    cfg.max_positions = 16;
    cfg.ffn_mult = 2;
    cfg.subcarriers = f;
    cfg.t_history = t;
    return cfg;
}

bool logs_equal(const TrainRun& a, const TrainRun& b) {
    if (a.log.size() != b.log.size()) return false;
    for (size_t i = 0; i < a.log.size(); ++i) {
        if (a.log[i].epoch != b.log[i].epoch || a.log[i].split != b.log[i].split) return false;
        if (a.log[i].nmse_db != b.log[i].nmse_db) return false;
        if (a.log[i].loss_total != b.log[i].loss_total) return false;
        if (a.log[i].loss_aux != b.log[i].loss_aux) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("nmse identities") {
    Tensor h = Tensor::from_data({2, 3}, {1, -2, 3, 0.5, 2, -1});
    CHECK(nmse(h, h).item() == doctest::Approx(0.0).epsilon(1e-12));
    Tensor zero = Tensor::zeros({2, 3});
    CHECK(nmse(zero, h).item() == doctest::Approx(1.0).epsilon(1e-9));
    Tensor twice = mul_scalar(h, real_t(2));
    CHECK(nmse(twice, h).item() == doctest::Approx(1.0).epsilon(1e-9));
    // Scale-aware: scaling the prediction changes the value in general.
    Tensor half = mul_scalar(h, real_t(0.5));
    CHECK(nmse(half, h).item() == doctest::Approx(0.25).epsilon(1e-9));
    CHECK_THROWS_AS(nmse(h, zero), ContractError);

    CHECK(to_db(1.0) == doctest::Approx(0.0));
    CHECK(to_db(0.1) == doctest::Approx(-10.0).epsilon(1e-12));
    CHECK(to_db(100.0) == doctest::Approx(20.0).epsilon(1e-12));
}

TEST_CASE("teacher training is deterministic and lambda1=0 is pure NMSE") {
    const ScenarioConfig sc = tiny_scenario();
    const DatasetSplit data = make_dataset(sc, 8, 2, 2);
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch = 8;
    tc.lr = 1e-3;
    tc.seed = 5;
    tc.patience = 10;
    tc.lambda1 = 0.0;

    TeacherModel m1(tiny_teacher(sc.subcarriers, sc.t_history), 21);
    TrainRun r1 = train_teacher(data, m1, tc);
    TeacherModel m2(tiny_teacher(sc.subcarriers, sc.t_history), 21);
    TrainRun r2 = train_teacher(data, m2, tc);
    CHECK(logs_equal(r1, r2));

    // lambda1 = 0: the optimized loss IS the batch NMSE.
    for (const auto& em : r1.log)
        if (em.split == "train")
            CHECK(em.loss_total == doctest::Approx(std::pow(10.0, em.nmse_db / 10.0)).epsilon(1e-9));

    // Validation-selected checkpoint: best val <= final-epoch val.
    double final_val = 0;
    for (const auto& em : r1.log)
        if (em.split == "val") final_val = em.nmse_db;
    CHECK(r1.best_val_nmse_db <= final_val + 1e-12);
}

TEST_CASE("teacher loss decreases on a fixed batch") {
    const ScenarioConfig sc = tiny_scenario();
    const DatasetSplit data = make_dataset(sc, 16, 1, 1);  // 32 rows = one batch
    TrainConfig tc;
    tc.epochs = 50;
    tc.batch = 32;
    tc.lr = 1e-3;
    tc.seed = 7;
    tc.patience = 100;
    tc.lambda1 = 0.1;

    TeacherModel model(tiny_teacher(sc.subcarriers, sc.t_history), 33);
    TrainRun run = train_teacher(data, model, tc);
    std::vector<double> losses;
    for (const auto& em : run.log)
        if (em.split == "train") losses.push_back(em.loss_total);
    REQUIRE(losses.size() >= 50);
    // Non-increase of the 10-step moving average over the first 50 steps.
    auto ma = [&](size_t i) {
        double s = 0;
        for (size_t j = i; j < i + 10; ++j) s += losses[j];
        return s / 10;
    };
    for (size_t i = 0; i + 11 <= 50; ++i) CHECK(ma(i + 1) <= ma(i) + 1e-6);
}

TEST_CASE("one-sample overfit reaches -20 dB") {
    ScenarioConfig sc = tiny_scenario();
    sc.velocity_mps = 30.0 / 3.6;
    const DatasetSplit data = make_dataset(sc, 1, 1, 1);
    TrainConfig tc;
    tc.epochs = 1200;  // one batch per epoch: 2 rows
    tc.batch = 2;
    tc.lr = 2e-3;
    tc.seed = 3;
    tc.patience = 1200;  // never early-stop on val here
    tc.lambda1 = 0.1;

    TeacherModel model(tiny_teacher(sc.subcarriers, sc.t_history), 9);
    TrainRun run = train_teacher(data, model, tc);
    double best_train = 1e9;
    for (const auto& em : run.log)
        if (em.split == "train") best_train = std::min(best_train, em.nmse_db);
    CHECK(best_train < -20.0);
}

TEST_CASE("student training: lambda2=0 equals plain training; teacher frozen under KD") {
    const ScenarioConfig sc = tiny_scenario();
    const DatasetSplit data = make_dataset(sc, 8, 2, 2);

    TeacherModel teacher(tiny_teacher(sc.subcarriers, sc.t_history), 17);
    {
        TrainConfig warm;
        warm.epochs = 2;
        warm.batch = 8;
        warm.lr = 1e-3;
        warm.seed = 2;
        warm.lambda1 = 0.1;
        train_teacher(data, teacher, warm);
    }

    TrainConfig tc;
    tc.epochs = 3;
    tc.batch = 8;
    tc.lr = 1e-3;
    tc.seed = 5;
    tc.lambda2 = 0.0;
    StudentModel s1(tiny_student(sc.subcarriers, sc.t_history), 41);
    StudentModel s2(tiny_student(sc.subcarriers, sc.t_history), 41);
    TrainRun r1 = train_student(data, &teacher, s1, tc);
    TrainRun r2 = train_student(data, nullptr, s2, tc);
    CHECK(logs_equal(r1, r2));

    // Teacher parameters bit-identical across a KD run.
    std::vector<std::vector<real_t>> before;
    for (const auto& [name, t] : teacher.registry().items())
        before.emplace_back(t.data().begin(), t.data().end());
    TrainConfig kd = tc;
    kd.lambda2 = 1.0;
    kd.relation.relation_heads = 4;
    StudentModel s3(tiny_student(sc.subcarriers, sc.t_history), 43);
    TrainRun r3 = train_student(data, &teacher, s3, kd);
    size_t idx = 0;
    for (const auto& [name, t] : teacher.registry().items()) {
        const auto& b = before[idx++];
        for (std::int64_t i = 0; i < t.numel(); ++i) CHECK(t.ptr()[i] == b[static_cast<size_t>(i)]);
    }
    // KD column is populated under distillation.
    bool kd_seen = false;
    for (const auto& em : r3.log)
        if (em.split == "train" && em.loss_aux > 0) kd_seen = true;
    CHECK(kd_seen);
}

TEST_CASE("per_sample_nmse agrees with nmse() on saved predictions") {
    const ScenarioConfig sc = tiny_scenario();
    const DatasetSplit data = make_dataset(sc, 2, 1, 4);
    TeacherModel model(tiny_teacher(sc.subcarriers, sc.t_history), 3);
    {  // initialize normalizer stats
        std::vector<const cplx*> hist;
        for (int p = 0; p < sc.antennas; ++p)
            hist.push_back(data.train[0].uplink.values.data() +
                           static_cast<size_t>(p) * sc.subcarriers * sc.t_history);
        (void)model.forward_batch(hist, true, false);
        tape().clear();
    }
    auto predictor = [&](const std::vector<const cplx*>& h) {
        return model.forward_batch(h, false, false).preds_raw;
    };
    const auto ratios = per_sample_nmse(predictor, data.test, sc.antennas, sc.subcarriers, sc.t_history);
    REQUIRE(ratios.size() == data.test.size());

    // Recompute sample 0's ratio through the loss op on saved predictions.
    NoGradGuard ng;
    std::vector<const cplx*> hist;
    for (int p = 0; p < sc.antennas; ++p)
        hist.push_back(data.test[0].uplink.values.data() +
                       static_cast<size_t>(p) * sc.subcarriers * sc.t_history);
    Tensor preds = model.forward_batch(hist, false, false).preds_raw;
    Tensor flat_pred = reshape(preds, {1, sc.antennas * 2 * sc.subcarriers});
    std::vector<real_t> tv;
    for (int p = 0; p < sc.antennas; ++p) {
        const auto one = pair_target(data.test[0], p, sc.subcarriers);
        tv.insert(tv.end(), one.begin(), one.end());
    }
    Tensor flat_true = Tensor::from_data({1, sc.antennas * 2 * sc.subcarriers}, tv);
    CHECK(nmse(flat_pred, flat_true).item() == doctest::Approx(ratios[0]).epsilon(1e-9));
    tape().clear();
}

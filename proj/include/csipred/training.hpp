#pragma once

#include <functional>

#include "csipred/distill.hpp"
#include "csipred/teacher.hpp"

namespace csipred {

// Batch NMSE: mean over rows of ||truth - pred||^2 / ||truth||^2.
// Differentiable in pred; a zero-norm truth row is a contract error.
Tensor nmse(const Tensor& pred, const Tensor& truth);

inline double to_db(double ratio) { return 10.0 * std::log10(ratio); }

struct TrainConfig {
    int epochs = 40;
    int batch = 64;
    double lr = 5e-4;
    std::uint64_t seed = 1;
    int patience = 10;
    double lambda1 = 0.1;  // teacher: alignment score weight (maximized)
    double lambda2 = 1.0;  // student: attention-relation KD weight
    RelationConfig relation;
    int start_epoch = 0;  // resume: continue the epoch counter from here
    bool verbose = false;

    void validate() const {
        if (epochs < 1 || batch < 1) throw ParamError("train: epochs and batch must be >= 1");
        if (lr <= 0) throw ParamError("train: lr must be > 0");
        if (lambda1 < 0 || lambda2 < 0) throw ParamError("train: loss weights must be >= 0");
    }
};

struct EpochMetric {
    int epoch = 0;
    std::string split;    // "train" or "val"
    double nmse_db = 0;
    double loss_total = 0;
    double loss_aux = 0;  // alignment score (teacher) or KD loss (student)
    double wall_ms = 0;
};

struct TrainRun {
    std::vector<EpochMetric> log;
    int epochs_run = 0;
    int best_epoch = -1;
    double best_val_nmse_db = 0;
};

// Minimizes L_NMSE - lambda1 * mean-cosine over the trainable parameters.
// Prompt selection is straight-through: indices fixed within a step,
// gradients flow into the selected anchors. Aborts on NaN loss. The
// validation-best parameter snapshot is restored at the end.
TrainRun train_teacher(const DatasetSplit& data, TeacherModel& model, const TrainConfig& cfg);

// Minimizes L_NMSE + lambda2 * kd_loss against a frozen teacher (pass
// nullptr or lambda2 = 0 for plain student training). Teacher forward runs
// untraced into the tape, so its parameters are bit-identical afterwards.
TrainRun train_student(const DatasetSplit& data, TeacherModel* teacher, StudentModel& student,
                       const TrainConfig& cfg);

// Eval-mode batch predictor: complex histories -> raw predictions [B x 2F].
using BatchPredictor = std::function<Tensor(const std::vector<const cplx*>&)>;

// Per-sample NMSE ratios over all antenna pairs of each sample.
std::vector<double> per_sample_nmse(const BatchPredictor& predict, const std::vector<Sample>& samples,
                                    int pairs, int subcarriers, int t_history);

// Mean ratio -> dB, floored at -100 dB.
double mean_nmse_db(const std::vector<double>& ratios);

// Raw real target of one antenna pair: [re(f0..fF-1), im(f0..fF-1)].
std::vector<real_t> pair_target(const Sample& s, int pair, int subcarriers);

}  // namespace csipred

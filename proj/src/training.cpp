#include "csipred/training.hpp"

#include <chrono>
#include <cmath>
#include <iostream>

namespace csipred {

Tensor nmse(const Tensor& pred, const Tensor& truth) {
    if (pred.shape() != truth.shape())
        throw ShapeError("nmse: " + shape_str(pred.shape()) + " vs " + shape_str(truth.shape()));
    Tensor t2 = sum_last(mul(truth, truth));
    for (std::int64_t i = 0; i < t2.numel(); ++i)
        if (t2.ptr()[i] <= real_t(0)) throw ContractError("nmse: zero-norm target in row " + std::to_string(i));
    Tensor diff = sub(truth, pred);
    return mean_all(div(sum_last(mul(diff, diff)), t2));
}

std::vector<real_t> pair_target(const Sample& s, int pair, int subcarriers) {
    std::vector<real_t> out(static_cast<size_t>(2 * subcarriers));
    for (int k = 0; k < subcarriers; ++k) {
        const cplx v = s.target[static_cast<size_t>(pair) * subcarriers + k];
        out[static_cast<size_t>(k)] = static_cast<real_t>(v.real());
        out[static_cast<size_t>(k + subcarriers)] = static_cast<real_t>(v.imag());
    }
    return out;
}

namespace {

struct Row {
    int sample = 0;
    int pair = 0;
};

std::vector<Row> all_rows(const std::vector<Sample>& samples, int pairs) {
    std::vector<Row> rows;
    rows.reserve(samples.size() * static_cast<size_t>(pairs));
    for (size_t s = 0; s < samples.size(); ++s)
        for (int p = 0; p < pairs; ++p) rows.push_back({static_cast<int>(s), p});
    return rows;
}

// History pointer of one antenna pair: contiguous [F x T] block.
const cplx* pair_history(const Sample& s, int pair) {
    return s.uplink.values.data() +
           static_cast<size_t>(pair) * s.uplink.subcarriers * s.uplink.steps;
}

Tensor batch_targets(const std::vector<Sample>& samples, const std::vector<Row>& rows, size_t lo,
                     size_t hi, int subcarriers) {
    const int f2 = 2 * subcarriers;
    Tensor t = Tensor::zeros({static_cast<int>(hi - lo), f2});
    for (size_t i = lo; i < hi; ++i) {
        const auto tv = pair_target(samples[static_cast<size_t>(rows[i].sample)], rows[i].pair, subcarriers);
        std::copy(tv.begin(), tv.end(), t.ptr() + static_cast<std::int64_t>(i - lo) * f2);
    }
    return t;
}

double wall_ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

struct Snapshot {
    std::vector<std::vector<real_t>> values;
    double norm_mean = 0, norm_std = 1;
};

Snapshot snapshot_params(const ParamRegistry& reg, const Normalizer& norm) {
    Snapshot s;
    s.values.reserve(reg.items().size());
    for (const auto& [name, t] : reg.items())
        s.values.emplace_back(t.data().begin(), t.data().end());
    s.norm_mean = norm.frozen().mean;
    s.norm_std = norm.frozen().std;
    return s;
}

void restore_params(const Snapshot& s, ParamRegistry& reg, Normalizer& norm) {
    for (size_t i = 0; i < reg.items().size(); ++i) {
        Tensor t = reg.items()[i].second;
        std::copy(s.values[i].begin(), s.values[i].end(), t.ptr());
    }
    norm.load(s.norm_mean, s.norm_std);
}

}  // namespace

std::vector<double> per_sample_nmse(const BatchPredictor& predict, const std::vector<Sample>& samples,
                                    int pairs, int subcarriers, int t_history) {
    (void)t_history;
    std::vector<double> ratios;
    ratios.reserve(samples.size());
    NoGradGuard ng;
    for (const auto& s : samples) {
        std::vector<const cplx*> hist;
        hist.reserve(static_cast<size_t>(pairs));
        for (int p = 0; p < pairs; ++p) hist.push_back(pair_history(s, p));
        Tensor preds = predict(hist);  // [pairs x 2F]
        double num = 0, den = 0;
        for (int p = 0; p < pairs; ++p) {
            const auto tv = pair_target(s, p, subcarriers);
            for (int j = 0; j < 2 * subcarriers; ++j) {
                const double e = static_cast<double>(tv[static_cast<size_t>(j)]) -
                                 preds.ptr()[static_cast<std::int64_t>(p) * 2 * subcarriers + j];
                num += e * e;
                den += static_cast<double>(tv[static_cast<size_t>(j)]) * tv[static_cast<size_t>(j)];
            }
        }
        ratios.push_back(num / den);
        tape().clear();
    }
    return ratios;
}

double mean_nmse_db(const std::vector<double>& ratios) {
    double m = 0;
    for (double r : ratios) m += r;
    m /= static_cast<double>(ratios.size());
    return std::max(to_db(m), -100.0);
}

TrainRun train_teacher(const DatasetSplit& data, TeacherModel& model, const TrainConfig& cfg) {
    cfg.validate();
    if (data.train.empty()) throw ParamError("train_teacher: empty training split");
    const int pairs = data.config.antennas;
    const int f = data.config.subcarriers;
    const int t_hist = data.config.t_history;
    Rng rng(mix_seed(cfg.seed, 0x7e31));
    std::vector<Row> rows = all_rows(data.train, pairs);
    std::vector<Tensor> params = model.registry().trainable();
    AdamState opt;
    opt.lr = cfg.lr;

    auto val_predictor = [&](const std::vector<const cplx*>& hist) {
        return model.forward_batch(hist, false, false).preds_raw;
    };

    TrainRun run;
    Snapshot best;
    for (int epoch = cfg.start_epoch; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        rng.shuffle(rows.begin(), rows.end());
        double loss_sum = 0, nmse_sum = 0, aux_sum = 0;
        int batches = 0;
        for (size_t lo = 0; lo < rows.size(); lo += static_cast<size_t>(cfg.batch)) {
            const size_t hi = std::min(rows.size(), lo + static_cast<size_t>(cfg.batch));
            std::vector<const cplx*> hist;
            hist.reserve(hi - lo);
            for (size_t i = lo; i < hi; ++i)
                hist.push_back(pair_history(data.train[static_cast<size_t>(rows[i].sample)], rows[i].pair));
            Tensor targets = batch_targets(data.train, rows, lo, hi, f);

            tape().clear();
            model.registry().zero_grads();
            auto fw = model.forward_batch(hist, true, false);
            Tensor l_nmse = nmse(fw.preds_raw, targets);
            Tensor loss = cfg.lambda1 > 0 && model.config().prompts
                              ? sub(l_nmse, mul_scalar(fw.align_score, static_cast<real_t>(cfg.lambda1)))
                              : l_nmse;
            const double lval = loss.item();
            if (std::isnan(lval)) throw NumericError("train_teacher: loss diverged to NaN");
            tape().backward(loss);
            adam_step(params, opt);
            loss_sum += lval;
            nmse_sum += l_nmse.item();
            aux_sum += fw.align_score.item();
            ++batches;
        }
        tape().clear();

        run.log.push_back({epoch, "train", std::max(to_db(nmse_sum / batches), -100.0),
                           loss_sum / batches, aux_sum / batches, wall_ms_since(t0)});
        const auto tv = std::chrono::steady_clock::now();
        const double val_db =
            mean_nmse_db(per_sample_nmse(val_predictor, data.val, pairs, f, t_hist));
        run.log.push_back({epoch, "val", val_db, val_db, 0.0, wall_ms_since(tv)});
        if (cfg.verbose)
            std::cerr << "epoch " << epoch << " train " << run.log[run.log.size() - 2].nmse_db
                      << " dB val " << val_db << " dB\n";

        run.epochs_run = epoch + 1;
        if (run.best_epoch < 0 || val_db < run.best_val_nmse_db) {
            run.best_epoch = epoch;
            run.best_val_nmse_db = val_db;
            best = snapshot_params(model.registry(), model.normalizer());
        } else if (epoch - run.best_epoch >= cfg.patience) {
            break;
        }
    }
    if (run.best_epoch >= 0) restore_params(best, model.registry(), model.normalizer());
    return run;
}

TrainRun train_student(const DatasetSplit& data, TeacherModel* teacher, StudentModel& student,
                       const TrainConfig& cfg) {
    cfg.validate();
    if (data.train.empty()) throw ParamError("train_student: empty training split");
    const bool use_kd = teacher != nullptr && cfg.lambda2 > 0;
    const int pairs = data.config.antennas;
    const int f = data.config.subcarriers;
    const int t_hist = data.config.t_history;
    RelationConfig rel = cfg.relation;
    if (rel.window == 0) rel.window = t_hist;  // relations over the shared CSI positions

    Rng rng(mix_seed(cfg.seed, 0x570d));
    std::vector<Row> rows = all_rows(data.train, pairs);
    std::vector<Tensor> params = student.registry().trainable();
    AdamState opt;
    opt.lr = cfg.lr;

    auto val_predictor = [&](const std::vector<const cplx*>& hist) {
        return student.forward_batch(hist, false, false).preds_raw;
    };

    TrainRun run;
    Snapshot best;
    for (int epoch = cfg.start_epoch; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        rng.shuffle(rows.begin(), rows.end());
        double loss_sum = 0, nmse_sum = 0, aux_sum = 0;
        int batches = 0;
        for (size_t lo = 0; lo < rows.size(); lo += static_cast<size_t>(cfg.batch)) {
            const size_t hi = std::min(rows.size(), lo + static_cast<size_t>(cfg.batch));
            std::vector<const cplx*> hist;
            hist.reserve(hi - lo);
            for (size_t i = lo; i < hi; ++i)
                hist.push_back(pair_history(data.train[static_cast<size_t>(rows[i].sample)], rows[i].pair));
            Tensor targets = batch_targets(data.train, rows, lo, hi, f);

            std::vector<LayerTrace> teacher_traces;
            if (use_kd) {
                NoGradGuard ng;
                auto tf = teacher->forward_batch(hist, false, true);
                teacher_traces = std::move(tf.traces);
            }

            tape().clear();
            student.registry().zero_grads();
            auto fw = student.forward_batch(hist, true, use_kd);
            Tensor l_nmse = nmse(fw.preds_raw, targets);
            Tensor loss = l_nmse;
            double kd_val = 0;
            if (use_kd) {
                Tensor kd = kd_loss(teacher_traces.back(), fw.traces.back(), rel);
                kd_val = kd.item();
                loss = add(l_nmse, mul_scalar(kd, static_cast<real_t>(cfg.lambda2)));
            }
            const double lval = loss.item();
            if (std::isnan(lval)) throw NumericError("train_student: loss diverged to NaN");
            tape().backward(loss);
            adam_step(params, opt);
            loss_sum += lval;
            nmse_sum += l_nmse.item();
            aux_sum += kd_val;
            ++batches;
        }
        tape().clear();

        run.log.push_back({epoch, "train", std::max(to_db(nmse_sum / batches), -100.0),
                           loss_sum / batches, aux_sum / batches, wall_ms_since(t0)});
        const auto tv = std::chrono::steady_clock::now();
        const double val_db =
            mean_nmse_db(per_sample_nmse(val_predictor, data.val, pairs, f, t_hist));
        run.log.push_back({epoch, "val", val_db, val_db, 0.0, wall_ms_since(tv)});
        if (cfg.verbose)
            std::cerr << "epoch " << epoch << " train " << run.log[run.log.size() - 2].nmse_db
                      << " dB val " << val_db << " dB kd " << aux_sum / batches << "\n";

        run.epochs_run = epoch + 1;
        if (run.best_epoch < 0 || val_db < run.best_val_nmse_db) {
            run.best_epoch = epoch;
            run.best_val_nmse_db = val_db;
            best = snapshot_params(student.registry(), student.normalizer());
        } else if (epoch - run.best_epoch >= cfg.patience) {
            break;
        }
    }
    if (run.best_epoch >= 0) restore_params(best, student.registry(), student.normalizer());
    return run;
}

}  // namespace csipred

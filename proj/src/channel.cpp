#include "csipred/channel.hpp"

#include <cmath>
#include <limits>

namespace csipred {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kSpeedOfLight = 299792458.0;

// Reflect an angle into [-pi/2, pi/2]. Mirroring at +-pi/2 preserves
// sin(theta), i.e. the ULA cone ambiguity.
double reflect_into_halfpi(double theta) {
    const double pi = kTwoPi / 2.0;
    theta = std::fmod(theta, kTwoPi);
    if (theta > pi) theta -= kTwoPi;
    if (theta < -pi) theta += kTwoPi;
    if (theta > pi / 2.0) theta = pi - theta;
    if (theta < -pi / 2.0) theta = -pi - theta;
    return theta;
}

}  // namespace

double velocity_for_bin(int bin) {
    if (bin < 0 || bin >= kVelocityBins) throw ParamError("velocity bin out of range");
    return (10.0 + 10.0 * bin) / 3.6;
}

PathSet with_downlink_phases(const PathSet& p) {
    PathSet out = p;
    out.phase = p.phase_dl;
    return out;
}

std::vector<cplx> array_response(double theta, int m, double d_over_lambda) {
    std::vector<cplx> a(static_cast<size_t>(m));
    const double s = std::sin(theta);
    for (int i = 0; i < m; ++i) {
        const double arg = -kTwoPi * i * d_over_lambda * s;
        a[static_cast<size_t>(i)] = cplx(std::cos(arg), std::sin(arg));
    }
    return a;
}

PathSet draw_paths(const ScenarioConfig& cfg, double velocity_mps, Rng& rng) {
    cfg.validate();
    const int p = cfg.paths;
    PathSet out;
    out.alpha.resize(static_cast<size_t>(p));
    out.theta.resize(static_cast<size_t>(p));
    out.tau.resize(static_cast<size_t>(p));
    out.phase.resize(static_cast<size_t>(p));
    out.phase_dl.resize(static_cast<size_t>(p));
    out.doppler_hz.resize(static_cast<size_t>(p));

    const double mean_theta = rng.uniform(-kTwoPi / 6.0, kTwoPi / 6.0);  // +-pi/3
    const double lambda_up = kSpeedOfLight / cfg.f_uplink_hz;

    double power = 0.0;
    for (int i = 0; i < p; ++i) {
        out.theta[static_cast<size_t>(i)] =
            reflect_into_halfpi(mean_theta + cfg.angle_spread_rad * rng.normal());
        out.tau[static_cast<size_t>(i)] = -cfg.delay_spread_s * std::log(1.0 - rng.uniform());
        out.phase[static_cast<size_t>(i)] = rng.uniform(0.0, kTwoPi);
        const double dl = rng.uniform(0.0, kTwoPi);
        out.phase_dl[static_cast<size_t>(i)] =
            cfg.duplex == Duplex::TDD ? out.phase[static_cast<size_t>(i)] : dl;
        const double aoa_offset = rng.uniform(-kTwoPi / 2.0, kTwoPi / 2.0);
        out.doppler_hz[static_cast<size_t>(i)] =
            velocity_mps / lambda_up * std::sin(out.theta[static_cast<size_t>(i)] + aoa_offset);
        const cplx a(rng.normal(), rng.normal());
        out.alpha[static_cast<size_t>(i)] = a;
        power += std::norm(a);
    }
    const double scale = 1.0 / std::sqrt(power);
    for (auto& a : out.alpha) a *= scale;
    return out;
}

std::vector<cplx> sample_csi(const PathSet& paths, const ScenarioConfig& cfg, int t_index,
                             double carrier_hz) {
    if (carrier_hz <= 0) throw ParamError("sample_csi: carrier must be positive");
    const int m = cfg.antennas;
    const int f = cfg.subcarriers;
    const int p = paths.size();
    const double t = t_index * cfg.sample_interval_s;
    // Physical spacing is fixed at design time (uplink wavelength), so the
    // effective d/lambda scales with the carrier actually transmitted.
    const double d_over_lambda_eff = cfg.d_over_lambda * (carrier_hz / cfg.f_uplink_hz);

    std::vector<cplx> h(static_cast<size_t>(m) * f, cplx(0.0, 0.0));
    for (int ip = 0; ip < p; ++ip) {
        const cplx phase_fac(std::cos(paths.phase[static_cast<size_t>(ip)]),
                             std::sin(paths.phase[static_cast<size_t>(ip)]));
        const double darg = kTwoPi * paths.doppler_hz[static_cast<size_t>(ip)] * t;
        const cplx doppler_fac(std::cos(darg), std::sin(darg));
        const cplx common = paths.alpha[static_cast<size_t>(ip)] * phase_fac * doppler_fac;
        const auto steer = array_response(paths.theta[static_cast<size_t>(ip)], m, d_over_lambda_eff);
        for (int k = 0; k < f; ++k) {
            const double fk = carrier_hz + k * cfg.subcarrier_spacing_hz;
            const double farg = -kTwoPi * fk * paths.tau[static_cast<size_t>(ip)];
            const cplx freq_fac(std::cos(farg), std::sin(farg));
            const cplx term = common * freq_fac;
            for (int im = 0; im < m; ++im)
                h[static_cast<size_t>(im) * f + k] += term * steer[static_cast<size_t>(im)];
        }
    }
    return h;
}

namespace {

Sample make_sample(const ScenarioConfig& cfg, int split_id, int index) {
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(split_id), static_cast<std::uint64_t>(index)));
    Sample s;
    s.velocity_bin = index % kVelocityBins;
    s.velocity_mps = velocity_for_bin(s.velocity_bin);

    const PathSet paths = draw_paths(cfg, s.velocity_mps, rng);
    const int m = cfg.antennas, f = cfg.subcarriers, t_hist = cfg.t_history;

    s.uplink.pairs = m;
    s.uplink.subcarriers = f;
    s.uplink.steps = t_hist;
    s.uplink.carrier_hz = cfg.f_uplink_hz;
    s.uplink.values.assign(static_cast<size_t>(m) * f * t_hist, cplx(0, 0));
    s.uplink.timestamps.resize(static_cast<size_t>(t_hist));
    for (int t = 0; t < t_hist; ++t) {
        s.uplink.timestamps[static_cast<size_t>(t)] = t * cfg.sample_interval_s;
        const auto h = sample_csi(paths, cfg, t, cfg.f_uplink_hz);
        for (int ip = 0; ip < m; ++ip)
            for (int k = 0; k < f; ++k) s.uplink.at(ip, k, t) = h[static_cast<size_t>(ip) * f + k];
    }

    const PathSet target_paths = cfg.duplex == Duplex::FDD ? with_downlink_phases(paths) : paths;
    s.target = sample_csi(target_paths, cfg, t_hist, cfg.f_downlink_hz());
    return s;
}

}  // namespace

DatasetSplit make_dataset(const ScenarioConfig& cfg, int n_train, int n_val, int n_test) {
    cfg.validate();
    if (n_train < 1 || n_val < 1 || n_test < 1)
        throw ParamError("make_dataset: split counts must be >= 1");
    DatasetSplit out;
    out.config = cfg;
    out.train.reserve(static_cast<size_t>(n_train));
    out.val.reserve(static_cast<size_t>(n_val));
    out.test.reserve(static_cast<size_t>(n_test));
    for (int i = 0; i < n_train; ++i) out.train.push_back(make_sample(cfg, 0, i));
    for (int i = 0; i < n_val; ++i) out.val.push_back(make_sample(cfg, 1, i));
    for (int i = 0; i < n_test; ++i) out.test.push_back(make_sample(cfg, 2, i));
    return out;
}

CsiSequence add_noise(const CsiSequence& csi, double snr_db, Rng& rng) {
    if (std::isnan(snr_db)) throw ParamError("add_noise: snr is NaN");
    if (std::isinf(snr_db) && snr_db > 0) return csi;
    CsiSequence out = csi;
    double power = 0.0;
    for (const auto& v : csi.values) power += std::norm(v);
    power /= static_cast<double>(csi.values.size());
    const double noise_power = power / std::pow(10.0, snr_db / 10.0);
    const double s = std::sqrt(noise_power / 2.0);
    for (auto& v : out.values) v += cplx(s * rng.normal(), s * rng.normal());
    return out;
}

}  // namespace csipred

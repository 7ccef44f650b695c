#pragma once

#include <complex>
#include <string>
#include <vector>

#include "csipred/common.hpp"
#include "csipred/rng.hpp"

namespace csipred {

// Channel math stays in double regardless of the build scalar; dataset files
// quantize to f32 at the IO boundary.
using cplx = std::complex<double>;

enum class Duplex { TDD, FDD };

struct ScenarioConfig {
    int antennas = 8;                     // M, uniform linear array at the BS
    double d_over_lambda = 0.5;           // antenna spacing in uplink wavelengths
    int paths = 12;                       // P
    double f_uplink_hz = 2.4e9;
    double delta_f_fdd_hz = 0.0;          // downlink carrier offset (FDD only)
    int subcarriers = 16;                 // F
    double subcarrier_spacing_hz = 180e3;
    int t_history = 16;                   // T
    double sample_interval_s = 1e-3;
    double velocity_mps = 30.0 / 3.6;     // used when drawing a single realization
    double angle_spread_rad = 0.35;
    double delay_spread_s = 3e-7;
    Duplex duplex = Duplex::TDD;
    std::uint64_t seed = 1;

    double f_downlink_hz() const {
        return duplex == Duplex::FDD ? f_uplink_hz + delta_f_fdd_hz : f_uplink_hz;
    }

    void validate() const {
        if (antennas < 1 || paths < 1 || subcarriers < 1 || t_history < 1)
            throw ParamError("scenario: M, P, F and T_history must all be >= 1");
        if (duplex == Duplex::TDD && delta_f_fdd_hz != 0.0)
            throw ParamError("scenario: TDD requires delta_f_fdd == 0");
        if (f_uplink_hz <= 0 || subcarrier_spacing_hz <= 0 || sample_interval_s <= 0)
            throw ParamError("scenario: carrier, spacing and sample interval must be positive");
    }
};

// One multipath realization. phase holds the uplink per-path phases;
// phase_dl the downlink ones (identical under TDD reciprocity, redrawn for
// FDD while the rest of the geometry is shared).
struct PathSet {
    std::vector<cplx> alpha;        // complex attenuations, sum |a|^2 == 1
    std::vector<double> theta;      // DOA in [-pi/2, pi/2]
    std::vector<double> tau;        // delays, seconds
    std::vector<double> phase;      // uplink phases
    std::vector<double> phase_dl;   // downlink phases
    std::vector<double> doppler_hz; // per-path Doppler shifts

    int size() const { return static_cast<int>(alpha.size()); }
};

// Swap in the downlink phase realization, keeping the geometry.
PathSet with_downlink_phases(const PathSet& p);

// CSI over (antenna pair, subcarrier, time), C-order [pair][F][T].
struct CsiSequence {
    std::vector<cplx> values;
    int pairs = 0;
    int subcarriers = 0;
    int steps = 0;
    double carrier_hz = 0;
    std::vector<double> timestamps;
    std::string scenario_tag;

    cplx& at(int p, int f, int t) {
        return values[(static_cast<size_t>(p) * subcarriers + f) * steps + t];
    }
    const cplx& at(int p, int f, int t) const {
        return values[(static_cast<size_t>(p) * subcarriers + f) * steps + t];
    }
};

struct Sample {
    double velocity_mps = 0;
    int velocity_bin = 0;            // index into the stratified velocity grid
    CsiSequence uplink;              // history, [M][F][T] at the uplink carrier
    std::vector<cplx> target;        // [M][F] downlink CSI at step T
};

struct DatasetSplit {
    ScenarioConfig config;
    std::vector<Sample> train, val, test;
};

// Velocity grid used for stratification: 10..100 km/h in 10 km/h levels.
constexpr int kVelocityBins = 10;
double velocity_for_bin(int bin);  // m/s

// ULA steering vector, element m = exp(-j 2 pi m (d/lambda) sin theta).
std::vector<cplx> array_response(double theta, int m, double d_over_lambda);

// Draw a multipath realization for the given velocity.
PathSet draw_paths(const ScenarioConfig& cfg, double velocity_mps, Rng& rng);

// Channel matrix [M x F] (row-major) at discrete time index t_index:
//   H[m,k] = sum_p alpha_p a_m(theta_p) exp(j(phi_p + 2 pi nu_p t - 2 pi f_k tau_p))
// with f_k = carrier + k * spacing and t = t_index * sample_interval.
std::vector<cplx> sample_csi(const PathSet& paths, const ScenarioConfig& cfg, int t_index,
                             double carrier_hz);

// Stratified dataset: each sample is (uplink history over T steps, downlink
// target at step T). Per-sample RNG streams derive from (seed, split, index)
// so splits are disjoint by seed lineage and generation parallelizes.
DatasetSplit make_dataset(const ScenarioConfig& cfg, int n_train, int n_val, int n_test);

// Circular complex Gaussian noise at the requested SNR, applied to a history
// sequence (never to targets). snr_db = +infinity returns the input as-is.
CsiSequence add_noise(const CsiSequence& csi, double snr_db, Rng& rng);

}  // namespace csipred

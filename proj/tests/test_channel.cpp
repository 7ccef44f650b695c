#include <cmath>

#include "doctest.h"

#include "csipred/channel.hpp"
#include "csipred/dataset_io.hpp"

#include <cstdio>
#include <fstream>

using namespace csipred;

namespace {

ScenarioConfig small_cfg() {
    ScenarioConfig cfg;
    cfg.antennas = 4;
    cfg.paths = 3;
    cfg.subcarriers = 6;
    cfg.t_history = 5;
    cfg.seed = 42;
    return cfg;
}

}  // namespace

TEST_CASE("array_response boresight and endfire") {
    const auto a0 = array_response(0.0, 5, 0.5);
    for (const auto& v : a0) {
        CHECK(v.real() == doctest::Approx(1.0).epsilon(1e-15));
        CHECK(v.imag() == doctest::Approx(0.0).epsilon(1e-15));
    }
    const auto a90 = array_response(std::acos(-1.0) / 2.0, 2, 0.5);
    CHECK(a90[0].real() == doctest::Approx(1.0));
    CHECK(a90[1].real() == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(std::abs(a90[1].imag()) < 1e-12);

    for (double theta : {-1.2, -0.3, 0.7, 1.5}) {
        const auto a = array_response(theta, 8, 0.5);
        for (const auto& v : a) CHECK(std::abs(std::abs(v) - 1.0) < 1e-12);
    }
}

TEST_CASE("draw_paths invariants") {
    ScenarioConfig cfg = small_cfg();
    Rng rng(7);
    const PathSet p = draw_paths(cfg, 10.0, rng);
    double power = 0;
    for (const auto& a : p.alpha) power += std::norm(a);
    CHECK(power == doctest::Approx(1.0).epsilon(1e-9));
    for (double th : p.theta) CHECK(std::abs(th) <= std::acos(-1.0) / 2.0 + 1e-12);

    Rng r0(9);
    const PathSet pz = draw_paths(cfg, 0.0, r0);
    for (double nu : pz.doppler_hz) CHECK(nu == 0.0);

    Rng ra(123), rb(123);
    const PathSet p1 = draw_paths(cfg, 5.0, ra);
    const PathSet p2 = draw_paths(cfg, 5.0, rb);
    for (int i = 0; i < p1.size(); ++i) {
        CHECK(p1.alpha[i] == p2.alpha[i]);
        CHECK(p1.theta[i] == p2.theta[i]);
        CHECK(p1.tau[i] == p2.tau[i]);
    }
}

TEST_CASE("sample_csi single path is flat in frequency") {
    ScenarioConfig cfg = small_cfg();
    cfg.paths = 1;
    PathSet p;
    p.alpha = {cplx(0.6, 0.4)};
    p.theta = {0.5};
    p.tau = {0.0};
    p.phase = {0.0};
    p.phase_dl = {0.0};
    p.doppler_hz = {0.0};
    const auto h = sample_csi(p, cfg, 0, cfg.f_uplink_hz);
    const auto steer = array_response(0.5, cfg.antennas, cfg.d_over_lambda);
    for (int m = 0; m < cfg.antennas; ++m)
        for (int k = 0; k < cfg.subcarriers; ++k) {
            const cplx expect = p.alpha[0] * steer[m];
            CHECK(std::abs(h[m * cfg.subcarriers + k] - expect) < 1e-12);
        }
}

TEST_CASE("sample_csi matches a direct two-path sum") {
    ScenarioConfig cfg = small_cfg();
    cfg.paths = 2;
    PathSet p;
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    p.alpha = {cplx(inv_sqrt2, 0), cplx(0, inv_sqrt2)};
    p.theta = {0.3, -0.9};
    p.tau = {1.2e-7, 4.5e-7};
    p.phase = {0.7, 2.9};
    p.phase_dl = p.phase;
    p.doppler_hz = {55.0, -110.0};

    const int t_index = 3;
    const auto h = sample_csi(p, cfg, t_index, cfg.f_uplink_hz);

    // Independent oracle: straight Eq-style product of complex factors.
    const double two_pi = 2.0 * std::acos(-1.0);
    const double t = t_index * cfg.sample_interval_s;
    for (int m = 0; m < cfg.antennas; ++m)
        for (int k = 0; k < cfg.subcarriers; ++k) {
            cplx acc(0, 0);
            const double fk = cfg.f_uplink_hz + k * cfg.subcarrier_spacing_hz;
            for (int ip = 0; ip < 2; ++ip) {
                const cplx steer = std::polar(1.0, -two_pi * m * cfg.d_over_lambda * std::sin(p.theta[ip]));
                const cplx rot = std::polar(1.0, p.phase[ip]) *
                                 std::polar(1.0, two_pi * p.doppler_hz[ip] * t) *
                                 std::polar(1.0, -two_pi * fk * p.tau[ip]);
                acc += p.alpha[ip] * steer * rot;
            }
            CHECK(std::abs(h[m * cfg.subcarriers + k] - acc) < 1e-12);
        }
}

TEST_CASE("TDD reciprocity is bit exact") {
    ScenarioConfig cfg = small_cfg();
    Rng rng(5);
    const PathSet p = draw_paths(cfg, 12.0, rng);
    const PathSet pd = with_downlink_phases(p);
    const auto up = sample_csi(p, cfg, 4, cfg.f_uplink_hz);
    const auto dn = sample_csi(pd, cfg, 4, cfg.f_downlink_hz());
    for (size_t i = 0; i < up.size(); ++i) {
        CHECK(up[i].real() == dn[i].real());
        CHECK(up[i].imag() == dn[i].imag());
    }
}

TEST_CASE("zero velocity means time-constant sequences") {
    ScenarioConfig cfg = small_cfg();
    Rng rng(11);
    const PathSet p = draw_paths(cfg, 0.0, rng);
    const auto h0 = sample_csi(p, cfg, 0, cfg.f_uplink_hz);
    const auto h9 = sample_csi(p, cfg, 9, cfg.f_uplink_hz);
    for (size_t i = 0; i < h0.size(); ++i) {
        CHECK(h0[i].real() == h9[i].real());
        CHECK(h0[i].imag() == h9[i].imag());
    }
}

TEST_CASE("temporal coherence decreases with velocity") {
    ScenarioConfig cfg = small_cfg();
    cfg.t_history = 24;
    auto autocorr = [&](double v) {
        double acc = 0;
        for (int rep = 0; rep < 40; ++rep) {
            Rng rng(mix_seed(100, static_cast<std::uint64_t>(rep)));
            const PathSet p = draw_paths(cfg, v, rng);
            const auto ha = sample_csi(p, cfg, 0, cfg.f_uplink_hz);
            const auto hb = sample_csi(p, cfg, 8, cfg.f_uplink_hz);
            cplx num(0, 0);
            double na = 0, nb = 0;
            for (size_t i = 0; i < ha.size(); ++i) {
                num += ha[i] * std::conj(hb[i]);
                na += std::norm(ha[i]);
                nb += std::norm(hb[i]);
            }
            acc += std::abs(num) / std::sqrt(na * nb);
        }
        return acc / 40;
    };
    const double slow = autocorr(3.0);
    const double fast = autocorr(28.0);
    CHECK(slow > fast);
}

TEST_CASE("flat response when delay spread vanishes") {
    ScenarioConfig cfg = small_cfg();
    cfg.delay_spread_s = 0.0;
    Rng rng(21);
    const PathSet p = draw_paths(cfg, 10.0, rng);
    const auto h = sample_csi(p, cfg, 2, cfg.f_uplink_hz);
    for (int m = 0; m < cfg.antennas; ++m)
        for (int k = 1; k < cfg.subcarriers; ++k)
            CHECK(std::abs(h[m * cfg.subcarriers + k] - h[m * cfg.subcarriers]) < 1e-9);
}

TEST_CASE("mean energy is about M") {
    ScenarioConfig cfg = small_cfg();
    double acc = 0;
    const int reps = 1000;
    for (int rep = 0; rep < reps; ++rep) {
        Rng rng(mix_seed(7, static_cast<std::uint64_t>(rep)));
        const PathSet p = draw_paths(cfg, 10.0, rng);
        const auto h = sample_csi(p, cfg, 0, cfg.f_uplink_hz);
        double e = 0;
        for (int m = 0; m < cfg.antennas; ++m) e += std::norm(h[m * cfg.subcarriers]);
        acc += e;
    }
    acc /= reps;
    CHECK(acc == doctest::Approx(cfg.antennas).epsilon(0.10));
}

TEST_CASE("make_dataset stratification and determinism") {
    ScenarioConfig cfg = small_cfg();
    const DatasetSplit ds = make_dataset(cfg, 20, 10, 100);
    std::vector<int> bin_counts(kVelocityBins, 0);
    for (const auto& s : ds.test) bin_counts[s.velocity_bin]++;
    for (int c : bin_counts) CHECK(c == 10);

    const DatasetSplit ds2 = make_dataset(cfg, 20, 10, 100);
    REQUIRE(ds.train.size() == ds2.train.size());
    for (size_t i = 0; i < ds.train.size(); ++i)
        for (size_t j = 0; j < ds.train[i].uplink.values.size(); ++j)
            CHECK(ds.train[i].uplink.values[j] == ds2.train[i].uplink.values[j]);

    // Split streams are disjoint: same index, different split, different draw.
    CHECK(ds.train[0].uplink.values[0] != ds.val[0].uplink.values[0]);
}

TEST_CASE("FDD target reuses geometry but not phases") {
    ScenarioConfig cfg = small_cfg();
    cfg.duplex = Duplex::FDD;
    cfg.delta_f_fdd_hz = 2.88e6;
    Rng rng(31);
    const PathSet p = draw_paths(cfg, 10.0, rng);
    bool any_differs = false;
    for (int i = 0; i < p.size(); ++i)
        if (p.phase[i] != p.phase_dl[i]) any_differs = true;
    CHECK(any_differs);

    ScenarioConfig tdd = small_cfg();
    Rng rng2(31);
    const PathSet pt = draw_paths(tdd, 10.0, rng2);
    for (int i = 0; i < pt.size(); ++i) CHECK(pt.phase[i] == pt.phase_dl[i]);
    // Geometry identical across duplex modes with the same stream.
    for (int i = 0; i < pt.size(); ++i) {
        CHECK(pt.theta[i] == p.theta[i]);
        CHECK(pt.tau[i] == p.tau[i]);
    }
}

TEST_CASE("add_noise calibration and target isolation") {
    ScenarioConfig cfg = small_cfg();
    cfg.antennas = 8;
    cfg.subcarriers = 25;
    cfg.t_history = 50;  // 10k entries per draw
    Rng rng(3);
    const PathSet p = draw_paths(cfg, 10.0, rng);
    CsiSequence seq;
    seq.pairs = cfg.antennas;
    seq.subcarriers = cfg.subcarriers;
    seq.steps = cfg.t_history;
    seq.carrier_hz = cfg.f_uplink_hz;
    seq.values.resize(static_cast<size_t>(cfg.antennas) * cfg.subcarriers * cfg.t_history);
    for (int t = 0; t < cfg.t_history; ++t) {
        const auto h = sample_csi(p, cfg, t, cfg.f_uplink_hz);
        for (int m = 0; m < cfg.antennas; ++m)
            for (int k = 0; k < cfg.subcarriers; ++k) seq.at(m, k, t) = h[m * cfg.subcarriers + k];
    }

    const double snr_db = 10.0;
    double sig = 0, noise = 0;
    Rng nrng(77);
    for (int rep = 0; rep < 10; ++rep) {  // 100k noisy entries total
        const CsiSequence noisy = add_noise(seq, snr_db, nrng);
        for (size_t i = 0; i < seq.values.size(); ++i) {
            sig += std::norm(seq.values[i]);
            noise += std::norm(noisy.values[i] - seq.values[i]);
        }
    }
    const double measured_db = 10.0 * std::log10(sig / noise);
    CHECK(std::abs(measured_db - snr_db) < 0.2);

    Rng r2(5);
    const CsiSequence same = add_noise(seq, std::numeric_limits<double>::infinity(), r2);
    for (size_t i = 0; i < seq.values.size(); ++i) CHECK(same.values[i] == seq.values[i]);
}

TEST_CASE("dataset round-trips bit exactly") {
    ScenarioConfig cfg = small_cfg();
    const DatasetSplit ds = make_dataset(cfg, 6, 3, 10);
    const std::string path = "test_roundtrip.csia";
    write_dataset(path, ds);
    const DatasetSplit back = read_dataset(path);
    write_dataset(path + "2", back);

    auto slurp = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    CHECK(slurp(path) == slurp(path + "2"));
    CHECK(back.train.size() == ds.train.size());
    CHECK(back.config.antennas == cfg.antennas);
    std::remove(path.c_str());
    std::remove((path + ".json").c_str());
    std::remove((path + "2").c_str());
    std::remove((path + "2.json").c_str());
}

TEST_CASE("scenario json rejects unknown and missing keys") {
    nlohmann::json j = scenario_to_json(small_cfg());
    j["bogus_key"] = 1;
    CHECK_THROWS_WITH_AS(scenario_from_json(j), doctest::Contains("bogus_key"), ParamError);
    j.erase("bogus_key");
    j.erase("paths");
    CHECK_THROWS_WITH_AS(scenario_from_json(j), doctest::Contains("paths"), ParamError);
}

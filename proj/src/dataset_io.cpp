#include "csipred/dataset_io.hpp"

#include <cstring>
#include <fstream>
#include <set>

namespace csipred {

namespace {

constexpr char kMagic[4] = {'C', 'S', 'I', 'A'};
constexpr std::uint16_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("dataset file truncated");
    return v;
}

void write_sample(std::ostream& os, const Sample& s) {
    put<float>(os, static_cast<float>(s.velocity_mps));
    put<std::uint16_t>(os, static_cast<std::uint16_t>(s.velocity_bin));
    for (const auto& v : s.uplink.values) {
        put<float>(os, static_cast<float>(v.real()));
        put<float>(os, static_cast<float>(v.imag()));
    }
    for (const auto& v : s.target) {
        put<float>(os, static_cast<float>(v.real()));
        put<float>(os, static_cast<float>(v.imag()));
    }
}

Sample read_sample(std::istream& is, const ScenarioConfig& cfg) {
    Sample s;
    s.velocity_mps = get<float>(is);
    s.velocity_bin = get<std::uint16_t>(is);
    s.uplink.pairs = cfg.antennas;
    s.uplink.subcarriers = cfg.subcarriers;
    s.uplink.steps = cfg.t_history;
    s.uplink.carrier_hz = cfg.f_uplink_hz;
    s.uplink.values.resize(static_cast<size_t>(cfg.antennas) * cfg.subcarriers * cfg.t_history);
    s.uplink.timestamps.resize(static_cast<size_t>(cfg.t_history));
    for (int t = 0; t < cfg.t_history; ++t)
        s.uplink.timestamps[static_cast<size_t>(t)] = t * cfg.sample_interval_s;
    for (auto& v : s.uplink.values) {
        const float re = get<float>(is);
        const float im = get<float>(is);
        v = cplx(re, im);
    }
    s.target.resize(static_cast<size_t>(cfg.antennas) * cfg.subcarriers);
    for (auto& v : s.target) {
        const float re = get<float>(is);
        const float im = get<float>(is);
        v = cplx(re, im);
    }
    return s;
}

}  // namespace

void write_dataset(const std::string& path, const DatasetSplit& ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(kMagic, 4);
    put<std::uint16_t>(os, kVersion);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(ds.config.antennas));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(ds.config.subcarriers));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(ds.config.t_history));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(ds.train.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(ds.val.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(ds.test.size()));
    put<double>(os, ds.config.f_uplink_hz);
    put<double>(os, ds.config.f_downlink_hz());
    for (const auto& s : ds.train) write_sample(os, s);
    for (const auto& s : ds.val) write_sample(os, s);
    for (const auto& s : ds.test) write_sample(os, s);
    if (!os) throw IoError("failed writing " + path);
    os.close();

    std::ofstream js(path + ".json");
    if (!js) throw IoError("cannot open " + path + ".json for writing");
    nlohmann::json sidecar;
    sidecar["schema_version"] = 1;
    sidecar["scenario"] = scenario_to_json(ds.config);
    sidecar["counts"] = {{"train", ds.train.size()}, {"val", ds.val.size()}, {"test", ds.test.size()}};
    js << sidecar.dump(2) << "\n";
}

DatasetSplit read_dataset(const std::string& path) {
    std::ifstream js(path + ".json");
    if (!js) throw IoError("missing dataset sidecar " + path + ".json");
    nlohmann::json sidecar = nlohmann::json::parse(js, nullptr, true);
    DatasetSplit ds;
    ds.config = scenario_from_json(sidecar.at("scenario"));

    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError(path + ": bad magic");
    const auto version = get<std::uint16_t>(is);
    if (version != kVersion) throw IoError(path + ": unsupported version " + std::to_string(version));
    const auto m = get<std::uint32_t>(is);
    const auto f = get<std::uint32_t>(is);
    const auto t = get<std::uint32_t>(is);
    const auto n_train = get<std::uint32_t>(is);
    const auto n_val = get<std::uint32_t>(is);
    const auto n_test = get<std::uint32_t>(is);
    const double f_up = get<double>(is);
    const double f_dn = get<double>(is);
    if (static_cast<int>(m) != ds.config.antennas || static_cast<int>(f) != ds.config.subcarriers ||
        static_cast<int>(t) != ds.config.t_history || f_up != ds.config.f_uplink_hz ||
        f_dn != ds.config.f_downlink_hz())
        throw IoError(path + ": header disagrees with sidecar scenario");
    ds.train.reserve(n_train);
    ds.val.reserve(n_val);
    ds.test.reserve(n_test);
    for (std::uint32_t i = 0; i < n_train; ++i) ds.train.push_back(read_sample(is, ds.config));
    for (std::uint32_t i = 0; i < n_val; ++i) ds.val.push_back(read_sample(is, ds.config));
    for (std::uint32_t i = 0; i < n_test; ++i) ds.test.push_back(read_sample(is, ds.config));
    return ds;
}

nlohmann::json scenario_to_json(const ScenarioConfig& cfg) {
    return nlohmann::json{{"antennas", cfg.antennas},
                          {"d_over_lambda", cfg.d_over_lambda},
                          {"paths", cfg.paths},
                          {"f_uplink_hz", cfg.f_uplink_hz},
                          {"delta_f_fdd_hz", cfg.delta_f_fdd_hz},
                          {"subcarriers", cfg.subcarriers},
                          {"subcarrier_spacing_hz", cfg.subcarrier_spacing_hz},
                          {"t_history", cfg.t_history},
                          {"sample_interval_s", cfg.sample_interval_s},
                          {"velocity_mps", cfg.velocity_mps},
                          {"angle_spread_rad", cfg.angle_spread_rad},
                          {"delay_spread_s", cfg.delay_spread_s},
                          {"duplex", cfg.duplex == Duplex::TDD ? "TDD" : "FDD"},
                          {"seed", cfg.seed}};
}

ScenarioConfig scenario_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {
        "antennas",      "d_over_lambda",         "paths",       "f_uplink_hz",
        "delta_f_fdd_hz", "subcarriers",          "subcarrier_spacing_hz", "t_history",
        "sample_interval_s", "velocity_mps",      "angle_spread_rad", "delay_spread_s",
        "duplex",        "seed"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key())) throw ParamError("scenario: unknown key '" + it.key() + "'");
    for (const auto& k : known)
        if (!j.contains(k)) throw ParamError("scenario: missing key '" + k + "'");
    ScenarioConfig cfg;
    cfg.antennas = j.at("antennas").get<int>();
    cfg.d_over_lambda = j.at("d_over_lambda").get<double>();
    cfg.paths = j.at("paths").get<int>();
    cfg.f_uplink_hz = j.at("f_uplink_hz").get<double>();
    cfg.delta_f_fdd_hz = j.at("delta_f_fdd_hz").get<double>();
    cfg.subcarriers = j.at("subcarriers").get<int>();
    cfg.subcarrier_spacing_hz = j.at("subcarrier_spacing_hz").get<double>();
    cfg.t_history = j.at("t_history").get<int>();
    cfg.sample_interval_s = j.at("sample_interval_s").get<double>();
    cfg.velocity_mps = j.at("velocity_mps").get<double>();
    cfg.angle_spread_rad = j.at("angle_spread_rad").get<double>();
    cfg.delay_spread_s = j.at("delay_spread_s").get<double>();
    const std::string duplex = j.at("duplex").get<std::string>();
    if (duplex == "TDD")
        cfg.duplex = Duplex::TDD;
    else if (duplex == "FDD")
        cfg.duplex = Duplex::FDD;
    else
        throw ParamError("scenario: duplex must be TDD or FDD, got '" + duplex + "'");
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.validate();
    return cfg;
}

}  // namespace csipred

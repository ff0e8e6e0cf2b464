#pragma once

#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "sttis/flows.hpp"
#include "sttis/model.hpp"
#include "sttis/pipeline.hpp"

namespace sttis::cli {

// Effective run configuration. Unknown keys anywhere in the file are
// rejected; every field has a documented default (see README).
struct RunConfig {
    GridSpec grid;
    ModelConfig model;  // n and o filled in from flows metadata at use time
    SampleConfig sample;
    TrainOptions train_opt;
    std::size_t train_days = 40;
    std::size_t test_days = 20;
    double val_fraction = 0.2;
    std::uint64_t graph_seed = 0;
    double threshold = 10.0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["grid"] = {{"rows", grid.rows},       {"cols", grid.cols},
                     {"lat_min", grid.lat_min}, {"lat_max", grid.lat_max},
                     {"lon_min", grid.lon_min}, {"lon_max", grid.lon_max},
                     {"slot_minutes", grid.slot_minutes}};
        j["model"] = {{"d", model.d},
                      {"w", model.w},
                      {"p", model.p},
                      {"f", model.f},
                      {"alpha", model.alpha},
                      {"heads_dli", model.heads_dli},
                      {"heads_dlm", model.heads_dlm},
                      {"dropout", model.dropout},
                      {"ffn_mult", model.ffn_mult},
                      {"layer_norm", model.layer_norm}};
        j["sample"] = {{"recent", sample.recent}, {"daily", sample.daily},
                       {"weekly", sample.weekly}};
        j["train"] = {{"epochs", train_opt.epochs},   {"batch", train_opt.batch},
                      {"lr", train_opt.lr},           {"seed", train_opt.seed},
                      {"train_days", train_days},     {"test_days", test_days},
                      {"val_fraction", val_fraction}};
        j["graph"] = {{"seed", graph_seed}};
        j["threshold"] = threshold;
        return j;
    }

    void echo(const std::string& dir) const {
        std::ofstream out(dir + "/config.json");
        out << to_json().dump(2) << "\n";
    }
};

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                           const std::string& where) {
    for (auto& [key, val] : j.items())
        if (!allowed.count(key))
            throw std::invalid_argument("config: unknown key '" + key + "' in " + where);
}

inline RunConfig load_run_config(const std::string& path) {
    RunConfig c;
    if (path.empty()) return c;
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    nlohmann::json j;
    in >> j;
    reject_unknown(j, {"grid", "model", "sample", "train", "graph", "threshold"}, "top level");
    if (j.count("grid")) {
        auto& g = j["grid"];
        reject_unknown(g, {"rows", "cols", "lat_min", "lat_max", "lon_min", "lon_max",
                           "slot_minutes"}, "grid");
        if (g.count("rows")) c.grid.rows = g["rows"].get<std::size_t>();
        if (g.count("cols")) c.grid.cols = g["cols"].get<std::size_t>();
        if (g.count("lat_min")) c.grid.lat_min = g["lat_min"].get<double>();
        if (g.count("lat_max")) c.grid.lat_max = g["lat_max"].get<double>();
        if (g.count("lon_min")) c.grid.lon_min = g["lon_min"].get<double>();
        if (g.count("lon_max")) c.grid.lon_max = g["lon_max"].get<double>();
        if (g.count("slot_minutes")) c.grid.slot_minutes = g["slot_minutes"].get<std::size_t>();
    }
    if (j.count("model")) {
        auto& m = j["model"];
        reject_unknown(m, {"d", "w", "p", "f", "alpha", "heads_dli", "heads_dlm", "dropout",
                           "ffn_mult", "layer_norm"}, "model");
        if (m.count("d")) c.model.d = m["d"].get<std::size_t>();
        if (m.count("w")) c.model.w = m["w"].get<std::size_t>();
        if (m.count("p")) c.model.p = m["p"].get<std::size_t>();
        if (m.count("f")) c.model.f = m["f"].get<std::size_t>();
        if (m.count("alpha")) c.model.alpha = m["alpha"].get<std::size_t>();
        if (m.count("heads_dli")) c.model.heads_dli = m["heads_dli"].get<std::size_t>();
        if (m.count("heads_dlm")) c.model.heads_dlm = m["heads_dlm"].get<std::size_t>();
        if (m.count("dropout")) c.model.dropout = m["dropout"].get<double>();
        if (m.count("ffn_mult")) c.model.ffn_mult = m["ffn_mult"].get<std::size_t>();
        if (m.count("layer_norm")) c.model.layer_norm = m["layer_norm"].get<bool>();
    }
    if (j.count("sample")) {
        auto& s = j["sample"];
        reject_unknown(s, {"recent", "daily", "weekly"}, "sample");
        if (s.count("recent")) c.sample.recent = s["recent"].get<std::size_t>();
        if (s.count("daily")) c.sample.daily = s["daily"].get<std::size_t>();
        if (s.count("weekly")) c.sample.weekly = s["weekly"].get<std::size_t>();
    }
    if (j.count("train")) {
        auto& t = j["train"];
        reject_unknown(t, {"epochs", "batch", "lr", "seed", "train_days", "test_days",
                           "val_fraction"}, "train");
        if (t.count("epochs")) c.train_opt.epochs = t["epochs"].get<std::size_t>();
        if (t.count("batch")) c.train_opt.batch = t["batch"].get<std::size_t>();
        if (t.count("lr")) c.train_opt.lr = t["lr"].get<double>();
        if (t.count("seed")) c.train_opt.seed = t["seed"].get<std::uint64_t>();
        if (t.count("train_days")) c.train_days = t["train_days"].get<std::size_t>();
        if (t.count("test_days")) c.test_days = t["test_days"].get<std::size_t>();
        if (t.count("val_fraction")) c.val_fraction = t["val_fraction"].get<double>();
    }
    if (j.count("graph")) {
        reject_unknown(j["graph"], {"seed"}, "graph");
        if (j["graph"].count("seed")) c.graph_seed = j["graph"]["seed"].get<std::uint64_t>();
    }
    if (j.count("threshold")) c.threshold = j["threshold"].get<double>();
    return c;
}

}  // namespace sttis::cli

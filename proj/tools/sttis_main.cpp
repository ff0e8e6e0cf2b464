#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "run_config.hpp"
#include "sttis/flows.hpp"
#include "sttis/graph.hpp"
#include "sttis/ingest.hpp"
#include "sttis/model.hpp"
#include "sttis/pipeline.hpp"
#include "sttis/similarity.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitIo = 2;
constexpr int kExitData = 3;
constexpr int kExitModel = 4;

using namespace sttis;
using cli::RunConfig;

SampleConfig sample_config(const RunConfig& cfg, std::size_t o) {
    SampleConfig s;
    s.recent = cfg.sample.recent;
    s.daily = cfg.sample.daily;
    s.weekly = cfg.sample.weekly;
    s.w = cfg.model.w;
    s.o = o;
    return s;
}

// Training slots (all training days, validation included) drive the daily
// profiles and normalization statistics.
SlotRange full_train_range(const RunConfig& cfg, const FlowsMetadata& meta) {
    const std::size_t o = meta.slots_per_day;
    const std::size_t avail_days = meta.num_slots / o;
    if (cfg.train_days + cfg.test_days > avail_days)
        throw std::invalid_argument("config: need " +
                                    std::to_string(cfg.train_days + cfg.test_days) +
                                    " days but flows cover only " + std::to_string(avail_days));
    return {0, cfg.train_days * o};
}

// Generic numeric matrix: '#'-prefixed lines ignored, comma-separated rows.
std::vector<double> read_matrix_values(const std::string& path, std::size_t& rows,
                                       std::size_t& cols) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open matrix: " + path);
    std::vector<double> vals;
    rows = 0;
    cols = 0;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream row(line);
        std::string cell;
        std::size_t c = 0;
        while (std::getline(row, cell, ',')) {
            vals.push_back(std::stod(cell));
            ++c;
        }
        if (cols == 0) cols = c;
        else if (c != cols)
            throw std::runtime_error("ragged matrix row in " + path);
        ++rows;
    }
    if (vals.empty()) throw std::runtime_error("empty matrix: " + path);
    return vals;
}

int cmd_synth(std::size_t n, std::size_t days, std::size_t o, std::uint64_t seed,
              const std::string& out_dir, const RunConfig& cfg) {
    FlowSeries flows = synth_generate(n, days, o, seed);
    FlowsMetadata meta;
    meta.n = n;
    const auto r = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
    if (r * r == n) {
        meta.rows = r;
        meta.cols = r;
    } else {
        meta.rows = 1;
        meta.cols = n;
    }
    meta.slot_minutes = 1440 / o;
    meta.slots_per_day = o;
    meta.num_slots = flows.num_slots;
    meta.start_slot_of_day = 0;
    write_flows_dir(out_dir, flows, meta);
    cfg.echo(out_dir);
    std::cout << "wrote " << flows.num_slots << " slots x " << n << " regions to " << out_dir
              << "\n";
    return kExitOk;
}

int cmd_ingest(const std::string& trips, const std::string& out_dir, const RunConfig& cfg) {
    IngestReport report;
    FlowSeries flows;
    try {
        flows = parse_trips(trips, cfg.grid, report);
    } catch (const std::exception& e) {
        std::cerr << "ingest: " << e.what() << "\n";
        for (const auto& msg : report.row_errors) std::cerr << "  " << msg << "\n";
        const std::string what = e.what();
        return what.find("malformed") != std::string::npos ? kExitData : kExitIo;
    }
    FlowsMetadata meta;
    meta.n = cfg.grid.n();
    meta.rows = cfg.grid.rows;
    meta.cols = cfg.grid.cols;
    meta.slot_minutes = cfg.grid.slot_minutes;
    meta.slots_per_day = cfg.grid.slots_per_day();
    meta.num_slots = flows.num_slots;
    meta.start_slot_of_day = flows.start_slot_of_day;
    write_flows_dir(out_dir, flows, meta);
    cfg.echo(out_dir);
    std::cout << "parsed " << report.parsed << " trips (" << report.malformed << " malformed, "
              << report.dropped_out_of_bbox << " outside bbox) into " << flows.num_slots
              << " slots\n";
    return kExitOk;
}

int cmd_graph(const std::string& flows_dir, std::uint64_t seed, const std::string& out_path,
              bool do_validate, const RunConfig& cfg) {
    FlowsBundle b = read_flows_dir(flows_dir);
    SlotRange train = full_train_range(cfg, b.meta);
    SimilarityMatrix sim = similarity_matrix(b.flows, train, b.meta.slots_per_day);
    RegionGraph g = build_graph(sim, seed);
    std::ofstream out(out_path);
    if (!out) {
        std::cerr << "graph: cannot write " << out_path << "\n";
        return kExitIo;
    }
    out << g.to_json();
    if (do_validate) {
        ValidationReport r = validate(g);
        std::cout << r.to_string() << "\n";
        if (!r.pass) return kExitData;
    }
    std::cout << "graph: n=" << g.n << " hubs=" << g.hubs.size() << " edges=" << g.num_edges()
              << " -> " << out_path << "\n";
    return kExitOk;
}

struct LoadedRun {
    FlowsBundle bundle;
    RegionGraph graph;
    NormalizeResult norm;
    SplitRanges splits;
    SampleConfig sample;
};

LoadedRun load_run(const std::string& flows_dir, const std::string& graph_path,
                   const RunConfig& cfg) {
    LoadedRun r;
    r.bundle = read_flows_dir(flows_dir);
    std::ifstream gin(graph_path);
    if (!gin) throw std::runtime_error("cannot open graph: " + graph_path);
    std::stringstream gbuf;
    gbuf << gin.rdbuf();
    r.graph = RegionGraph::from_json(gbuf.str());
    if (r.graph.n != r.bundle.meta.n)
        throw std::invalid_argument("graph/flows region count mismatch");
    r.splits = split(r.bundle.flows, r.bundle.meta.slots_per_day, cfg.train_days, cfg.test_days,
                     cfg.val_fraction);
    SlotRange full_train{0, r.splits.val.hi};
    r.norm = normalize(r.bundle.flows, full_train);
    r.sample = sample_config(cfg, r.bundle.meta.slots_per_day);
    return r;
}

Model make_model(const RunConfig& cfg, const FlowsMetadata& meta) {
    ModelConfig m = cfg.model;
    m.n = meta.n;
    m.o = meta.slots_per_day;
    m.q_recipe = {cfg.sample.recent, cfg.sample.daily, cfg.sample.weekly};
    return Model(m, cfg.train_opt.seed);
}

int cmd_train(const std::string& flows_dir, const std::string& graph_path,
              const std::string& out_dir, const RunConfig& cfg, bool verbose) {
    LoadedRun run = load_run(flows_dir, graph_path, cfg);
    Model model = make_model(cfg, run.bundle.meta);
    TrainOptions opt = cfg.train_opt;
    opt.verbose = verbose;
    TrainResult res = train(model, run.norm.flows, run.graph, run.sample, run.splits.train,
                            run.splits.val, opt);
    std::filesystem::create_directories(out_dir);
    save_checkpoint(out_dir + "/model.ckpt", model);
    write_epoch_log(out_dir + "/epochs.csv", res.log);
    cfg.echo(out_dir);
    std::cout << "best epoch " << res.best_epoch << " val loss " << res.best_val_loss << " -> "
              << out_dir << "/model.ckpt\n";
    return kExitOk;
}

int cmd_evaluate(const std::string& flows_dir, const std::string& graph_path,
                 const std::string& ckpt, const std::string& out_dir, const std::string& which,
                 bool with_ha, const RunConfig& cfg) {
    LoadedRun run = load_run(flows_dir, graph_path, cfg);
    Model model = load_checkpoint(ckpt);
    const SlotRange range = which == "val" ? run.splits.val : run.splits.test;
    Metrics m = evaluate(model, run.norm.flows, run.bundle.flows, run.norm.scale, run.graph,
                         run.sample, range, cfg.threshold);
    std::filesystem::create_directories(out_dir);
    {
        std::ofstream out(out_dir + "/metrics.json");
        out << m.to_json();
    }
    cfg.echo(out_dir);
    std::cout << m.to_json();
    if (with_ha) {
        SlotRange full_train{0, run.splits.val.hi};
        Metrics ha = ha_baseline(run.bundle.flows, full_train, range,
                                 run.bundle.meta.slots_per_day, cfg.threshold);
        std::ofstream out(out_dir + "/ha_metrics.json");
        out << ha.to_json();
        std::cout << "ha: " << ha.to_json();
    }
    return kExitOk;
}

int cmd_predict(const std::string& flows_dir, const std::string& graph_path,
                const std::string& ckpt, std::size_t slot, const std::string& out_path,
                const RunConfig& cfg) {
    LoadedRun run = load_run(flows_dir, graph_path, cfg);
    Model model = load_checkpoint(ckpt);
    if (slot >= run.bundle.meta.num_slots)
        throw std::invalid_argument("predict: slot " + std::to_string(slot) +
                                    " outside data (num_slots=" +
                                    std::to_string(run.bundle.meta.num_slots) + ")");
    TemporalContext ctx = assemble_sample(run.norm.flows, slot, run.sample);
    Tensor pred = model.predict(ctx, run.graph);
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write " + out_path);
    out << "region,inflow_hat,outflow_hat\n";
    char buf[96];
    for (std::size_t i = 0; i < pred.rows(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.6g,%.6g\n", i,
                      denormalize_value(pred.at(i, 0), run.norm.scale, Channel::In),
                      denormalize_value(pred.at(i, 1), run.norm.scale, Channel::Out));
        out << buf;
    }
    return kExitOk;
}

int cmd_attention(const std::string& flows_dir, const std::string& graph_path,
                  const std::string& ckpt, std::size_t slot, long region,
                  const std::string& out_dir, const RunConfig& cfg) {
    LoadedRun run = load_run(flows_dir, graph_path, cfg);
    Model model = load_checkpoint(ckpt);
    TemporalContext ctx = assemble_sample(run.norm.flows, slot, run.sample);
    AttentionCapture capture;
    ForwardOptions fo;
    fo.capture = &capture;
    (void)model.predict(ctx, run.graph, fo);

    std::filesystem::create_directories(out_dir);
    {
        std::ofstream out(out_dir + "/dli_weights.csv");
        out << "head,layer,src,dst,score\n";
        char buf[96];
        for (const auto& e : capture.dli) {
            if (region >= 0 && e.src != static_cast<std::size_t>(region)) continue;
            std::snprintf(buf, sizeof(buf), "%d,%d,%zu,%zu,%.9g\n", e.head, e.layer, e.src, e.dst,
                          e.weight);
            out << buf;
        }
    }
    {
        std::ofstream out(out_dir + "/dlm_weights.csv");
        out << "head,region,context_slot,weight\n";
        char buf[96];
        for (const auto& e : capture.dlm) {
            if (region >= 0 && e.region != static_cast<std::size_t>(region)) continue;
            const long ctx_slot = ctx.context[e.context_index].slot;
            std::snprintf(buf, sizeof(buf), "%d,%zu,%ld,%.9g\n", e.head, e.region, ctx_slot,
                          e.weight);
            out << buf;
        }
    }
    cfg.echo(out_dir);
    std::cout << "wrote attention exports to " << out_dir << "\n";
    return kExitOk;
}

int cmd_correlate(const std::string& path_a, const std::string& path_b) {
    std::size_t ra, ca, rb, cb;
    const auto a = read_matrix_values(path_a, ra, ca);
    const auto b = read_matrix_values(path_b, rb, cb);
    if (ra != rb || ca != cb) throw std::invalid_argument("correlate: matrices differ in shape");
    const auto n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) throw std::invalid_argument("correlate: zero-variance matrix");
    std::printf("%.4f\n", sab / std::sqrt(saa * sbb));
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ST-TIS traffic forecasting toolkit"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "run configuration JSON (defaults when omitted)");

    auto* synth = app.add_subcommand("synth", "generate a synthetic flows dataset");
    std::size_t synth_n = 36, synth_days = 60, synth_o = 48;
    std::uint64_t synth_seed = 0;
    std::string synth_out;
    synth->add_option("--n", synth_n, "number of regions")->capture_default_str();
    synth->add_option("--days", synth_days, "number of days")->capture_default_str();
    synth->add_option("--o", synth_o, "slots per day")->capture_default_str();
    synth->add_option("--seed", synth_seed, "generator seed")->capture_default_str();
    synth->add_option("--out", synth_out, "output directory")->required();

    auto* ingest = app.add_subcommand("ingest", "aggregate a trips CSV into flows");
    std::string trips_path, ingest_out;
    ingest->add_option("--trips", trips_path, "trips CSV")->required();
    ingest->add_option("--out", ingest_out, "output directory")->required();

    auto* graph = app.add_subcommand("graph", "build the region connected graph");
    std::string graph_flows, graph_out = "graph.json";
    std::uint64_t graph_seed = 0;
    bool graph_validate = false;
    graph->add_option("--flows", graph_flows, "flows directory")->required();
    graph->add_option("--seed", graph_seed, "star-hub seed")->capture_default_str();
    graph->add_option("--out", graph_out, "output JSON path")->capture_default_str();
    graph->add_flag("--validate", graph_validate, "print the validation report, fail on violation");

    auto* train_cmd = app.add_subcommand("train", "train a model");
    std::string train_flows, train_graph, train_out;
    bool train_verbose = false;
    train_cmd->add_option("--flows", train_flows, "flows directory")->required();
    train_cmd->add_option("--graph", train_graph, "graph JSON")->required();
    train_cmd->add_option("--out", train_out, "output directory")->required();
    train_cmd->add_flag("--verbose", train_verbose, "per-epoch progress on stderr");

    auto* eval_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint");
    std::string eval_flows, eval_graph, eval_ckpt, eval_out, eval_range = "test";
    bool eval_ha = false;
    eval_cmd->add_option("--flows", eval_flows, "flows directory")->required();
    eval_cmd->add_option("--graph", eval_graph, "graph JSON")->required();
    eval_cmd->add_option("--model", eval_ckpt, "checkpoint path")->required();
    eval_cmd->add_option("--out", eval_out, "output directory")->required();
    eval_cmd->add_option("--range", eval_range, "test|val")->capture_default_str();
    eval_cmd->add_flag("--ha", eval_ha, "also report the historical-average baseline");

    auto* predict = app.add_subcommand("predict", "predict one slot");
    std::string pred_flows, pred_graph, pred_ckpt, pred_out;
    std::size_t pred_slot = 0;
    predict->add_option("--flows", pred_flows, "flows directory")->required();
    predict->add_option("--graph", pred_graph, "graph JSON")->required();
    predict->add_option("--model", pred_ckpt, "checkpoint path")->required();
    predict->add_option("--slot", pred_slot, "target slot")->required();
    predict->add_option("--out", pred_out, "output CSV")->required();

    auto* attn = app.add_subcommand("attention", "export attention weights at a slot");
    std::string attn_flows, attn_graph, attn_ckpt, attn_out;
    std::size_t attn_slot = 0;
    long attn_region = -1;
    attn->add_option("--flows", attn_flows, "flows directory")->required();
    attn->add_option("--graph", attn_graph, "graph JSON")->required();
    attn->add_option("--model", attn_ckpt, "checkpoint path")->required();
    attn->add_option("--slot", attn_slot, "target slot")->required();
    attn->add_option("--region", attn_region, "restrict to one region");
    attn->add_option("--out", attn_out, "output directory")->required();

    auto* corr = app.add_subcommand("correlate", "Pearson correlation of two CSV matrices");
    std::string corr_a, corr_b;
    corr->add_option("--a", corr_a, "first matrix CSV")->required();
    corr->add_option("--b", corr_b, "second matrix CSV")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitIo;
    }

    try {
        RunConfig cfg = sttis::cli::load_run_config(config_path);
        if (synth->parsed()) return cmd_synth(synth_n, synth_days, synth_o, synth_seed, synth_out,
                                              cfg);
        if (ingest->parsed()) return cmd_ingest(trips_path, ingest_out, cfg);
        if (graph->parsed()) return cmd_graph(graph_flows, graph_seed, graph_out, graph_validate,
                                              cfg);
        if (train_cmd->parsed()) return cmd_train(train_flows, train_graph, train_out, cfg,
                                                  train_verbose);
        if (eval_cmd->parsed()) return cmd_evaluate(eval_flows, eval_graph, eval_ckpt, eval_out,
                                                    eval_range, eval_ha, cfg);
        if (predict->parsed()) return cmd_predict(pred_flows, pred_graph, pred_ckpt, pred_slot,
                                                  pred_out, cfg);
        if (attn->parsed()) return cmd_attention(attn_flows, attn_graph, attn_ckpt, attn_slot,
                                                 attn_region, attn_out, cfg);
        if (corr->parsed()) return cmd_correlate(corr_a, corr_b);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitModel;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        const std::string what = e.what();
        if (what.find("cannot") != std::string::npos || what.find("No such") != std::string::npos)
            return kExitIo;
        return kExitData;
    }
    return kExitOk;
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const std::string kBin = STTIS_BIN;

struct RunResult {
    int code;
    std::string output;
};

// Runs the tool with stdout and stderr captured to a scratch file.
RunResult run(const std::string& args) {
    static int counter = 0;
    const std::string cap =
        (fs::temp_directory_path() / ("sttis_cli_out_" + std::to_string(counter++))).string();
    const std::string cmd = kBin + " " + args + " > " + cap + " 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream in(cap);
    std::stringstream buf;
    buf << in.rdbuf();
    fs::remove(cap);
    int code = -1;
    if (status != -1 && WIFEXITED(status)) code = WEXITSTATUS(status);
    return {code, buf.str()};
}

// Shared scratch workspace: synth -> graph -> train once, reuse everywhere.
struct Workspace {
    fs::path root;
    std::string flows, graph, config, ckpt;

    Workspace() {
        root = fs::temp_directory_path() / "sttis_cli_ws";
        fs::remove_all(root);
        fs::create_directories(root);
        flows = (root / "flows").string();
        graph = (root / "graph.json").string();
        config = (root / "run.json").string();
        {
            std::ofstream out(config);
            out << R"({
  "model": {"d": 4, "w": 3, "p": 2, "f": 2, "alpha": 1,
            "heads_dli": 2, "heads_dlm": 2, "dropout": 0.0, "ffn_mult": 2},
  "sample": {"recent": 2, "daily": 1, "weekly": 0},
  "train": {"epochs": 2, "batch": 8, "lr": 0.005, "seed": 1,
            "train_days": 6, "test_days": 2, "val_fraction": 0.25},
  "threshold": 5.0
})";
        }
        REQUIRE(run("synth --n 9 --days 8 --o 12 --seed 3 --out " + flows).code == 0);
        REQUIRE(run("--config " + config + " graph --flows " + flows + " --out " + graph +
                    " --validate")
                    .code == 0);
        const std::string model_dir = (root / "model").string();
        REQUIRE(run("--config " + config + " train --flows " + flows + " --graph " + graph +
                    " --out " + model_dir)
                    .code == 0);
        ckpt = model_dir + "/model.ckpt";
        REQUIRE(fs::exists(ckpt));
    }
    ~Workspace() { fs::remove_all(root); }
};

Workspace& ws() {
    static Workspace w;
    return w;
}

}  // namespace

TEST_CASE("synth echoes the effective configuration next to its output") {
    CHECK(fs::exists(fs::path(ws().flows) / "flows.csv"));
    CHECK(fs::exists(fs::path(ws().flows) / "metadata.json"));
    CHECK(fs::exists(fs::path(ws().flows) / "config.json"));
}

TEST_CASE("graph --validate reports the bound and passes") {
    RunResult r = run("--config " + ws().config + " graph --flows " + ws().flows +
                      " --out " + ws().graph + " --validate");
    CHECK(r.code == 0);
    CHECK(r.output.find("connected=yes") != std::string::npos);
    CHECK(r.output.find("PASS") != std::string::npos);
}

TEST_CASE("missing input files exit with the IO code") {
    CHECK(run("graph --flows /no/such/dir --out /tmp/g.json").code == 2);
    CHECK(run("--config /no/such/config.json synth --n 4 --days 8 --o 12 --out /tmp/x").code == 2);
    CHECK(run("correlate --a /no/such.csv --b /no/such.csv").code == 2);
}

TEST_CASE("unknown configuration keys are rejected loudly") {
    const std::string bad = (ws().root / "bad.json").string();
    {
        std::ofstream out(bad);
        out << R"({"model": {"depth": 3}})";
    }
    RunResult r = run("--config " + bad + " synth --n 4 --days 8 --o 12 --out /tmp/x");
    CHECK(r.code != 0);
    CHECK(r.output.find("depth") != std::string::npos);
}

TEST_CASE("evaluate writes metrics plus the baseline") {
    const std::string out = (ws().root / "eval").string();
    RunResult r = run("--config " + ws().config + " evaluate --flows " + ws().flows + " --graph " +
                      ws().graph + " --model " + ws().ckpt + " --out " + out + " --ha");
    CHECK(r.code == 0);
    CHECK(fs::exists(out + "/metrics.json"));
    CHECK(fs::exists(out + "/ha_metrics.json"));
    CHECK(r.output.find("rmse_in") != std::string::npos);
    CHECK(r.output.find("ha:") != std::string::npos);
}

TEST_CASE("predict emits one denormalized row per region") {
    const std::string out = (ws().root / "pred.csv").string();
    RunResult r = run("--config " + ws().config + " predict --flows " + ws().flows + " --graph " +
                      ws().graph + " --model " + ws().ckpt + " --slot 80 --out " + out);
    CHECK(r.code == 0);
    std::ifstream in(out);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "region,inflow_hat,outflow_hat");
    std::size_t rows = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 9);
}

TEST_CASE("predict refuses a slot outside the data") {
    RunResult r = run("--config " + ws().config + " predict --flows " + ws().flows + " --graph " +
                      ws().graph + " --model " + ws().ckpt + " --slot 9999 --out /tmp/p.csv");
    CHECK(r.code == 4);
    CHECK(r.output.find("9999") != std::string::npos);
}

TEST_CASE("attention export: spatial weights sum to one per query") {
    const std::string out = (ws().root / "attn").string();
    RunResult r = run("--config " + ws().config + " attention --flows " + ws().flows +
                      " --graph " + ws().graph + " --model " + ws().ckpt + " --slot 80 --out " +
                      out);
    REQUIRE(r.code == 0);
    std::ifstream dli(out + "/dli_weights.csv");
    std::string line;
    REQUIRE(std::getline(dli, line));
    CHECK(line == "head,layer,src,dst,score");
    std::map<std::string, double> sums;
    while (std::getline(dli, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string head, layer, src, dst, score;
        std::getline(row, head, ',');
        std::getline(row, layer, ',');
        std::getline(row, src, ',');
        std::getline(row, dst, ',');
        std::getline(row, score, ',');
        sums[head + "/" + layer + "/" + src] += std::stod(score);
    }
    CHECK(sums.size() == 2 * 1 * 9);  // heads x layers x regions
    for (const auto& [key, total] : sums) CHECK(total == doctest::Approx(1.0).epsilon(1e-6));

    std::ifstream dlm(out + "/dlm_weights.csv");
    REQUIRE(std::getline(dlm, line));
    CHECK(line == "head,region,context_slot,weight");
    std::map<std::string, double> tsums;
    while (std::getline(dlm, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string head, region, slot, weight;
        std::getline(row, head, ',');
        std::getline(row, region, ',');
        std::getline(row, slot, ',');
        std::getline(row, weight, ',');
        const long s = std::stol(slot);
        CHECK(s < 80);
        CHECK(s >= 80 - 12);  // deepest context offset is one day back
        tsums[head + "/" + region] += std::stod(weight);
    }
    CHECK(tsums.size() == 2 * 9);
    for (const auto& [key, total] : tsums) CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("attention export honors --region") {
    const std::string out = (ws().root / "attn_r3").string();
    RunResult r = run("--config " + ws().config + " attention --flows " + ws().flows +
                      " --graph " + ws().graph + " --model " + ws().ckpt +
                      " --slot 80 --region 3 --out " + out);
    REQUIRE(r.code == 0);
    std::ifstream dli(out + "/dli_weights.csv");
    std::string line;
    std::getline(dli, line);
    while (std::getline(dli, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string head, layer, src;
        std::getline(row, head, ',');
        std::getline(row, layer, ',');
        std::getline(row, src, ',');
        CHECK(src == "3");
    }
}

TEST_CASE("correlate: identical, inverted, and near-linear matrices") {
    const std::string a = (ws().root / "corr_a.csv").string();
    const std::string b = (ws().root / "corr_b.csv").string();
    const std::string c = (ws().root / "corr_c.csv").string();
    {
        std::ofstream(a) << "# comment line\n1,2\n3,4\n";
        std::ofstream(b) << "4,3\n2,1\n";
        std::ofstream(c) << "1,2\n3,5\n";
    }
    RunResult same = run("correlate --a " + a + " --b " + a);
    CHECK(same.code == 0);
    CHECK(same.output == "1.0000\n");
    RunResult anti = run("correlate --a " + a + " --b " + b);
    CHECK(anti.output == "-1.0000\n");
    RunResult close = run("correlate --a " + a + " --b " + c);
    CHECK(close.output == "0.9827\n");

    const std::string flat = (ws().root / "corr_flat.csv").string();
    std::ofstream(flat) << "2,2\n2,2\n";
    CHECK(run("correlate --a " + a + " --b " + flat).code == 4);
}

TEST_CASE("training is reproducible across identical invocations") {
    const std::string m1 = (ws().root / "repro1").string();
    const std::string m2 = (ws().root / "repro2").string();
    REQUIRE(run("--config " + ws().config + " train --flows " + ws().flows + " --graph " +
                ws().graph + " --out " + m1)
                .code == 0);
    REQUIRE(run("--config " + ws().config + " train --flows " + ws().flows + " --graph " +
                ws().graph + " --out " + m2)
                .code == 0);
    auto slurp = [](const std::string& p) {
        std::ifstream in(p, std::ios::binary);
        std::stringstream buf;
        buf << in.rdbuf();
        return buf.str();
    };
    const std::string c1 = slurp(m1 + "/model.ckpt");
    REQUIRE_FALSE(c1.empty());
    CHECK(c1 == slurp(m2 + "/model.ckpt"));
    // The epoch log carries wall-clock seconds; compare the loss columns only.
    auto losses = [&](const std::string& p) {
        std::istringstream in(slurp(p + "/epochs.csv"));
        std::string line, kept;
        while (std::getline(in, line)) kept += line.substr(0, line.rfind(',')) + "\n";
        return kept;
    };
    CHECK(losses(m1) == losses(m2));
}

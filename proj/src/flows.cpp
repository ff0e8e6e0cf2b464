#include "sttis/flows.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace sttis {

void GridSpec::check() const {
    if (rows * cols < 2) throw std::invalid_argument("grid: rows*cols must be >= 2");
    if (slot_minutes == 0 || 1440 % slot_minutes != 0)
        throw std::invalid_argument("grid: slot_minutes must divide 1440");
    if (!(lat_max > lat_min) || !(lon_max > lon_min))
        throw std::invalid_argument("grid: empty bounding box");
}

long GridSpec::region_of(double lat, double lon) const {
    if (lat < lat_min || lat >= lat_max || lon < lon_min || lon >= lon_max) return -1;
    const double rh = (lat_max - lat_min) / static_cast<double>(rows);
    const double cw = (lon_max - lon_min) / static_cast<double>(cols);
    auto row = static_cast<std::size_t>((lat - lat_min) / rh);
    auto col = static_cast<std::size_t>((lon - lon_min) / cw);
    if (row >= rows) row = rows - 1;
    if (col >= cols) col = cols - 1;
    return static_cast<long>(row * cols + col);
}

FlowSeries FlowSeries::zeros(std::size_t n, std::size_t num_slots) {
    FlowSeries f;
    f.n = n;
    f.num_slots = num_slots;
    f.inflow = Tensor({num_slots, n});
    f.outflow = Tensor({num_slots, n});
    return f;
}

namespace {

struct ChannelScale {
    double mn, mx;
};

ChannelScale channel_minmax(const Tensor& t, const SlotRange& r, std::size_t n) {
    ChannelScale s{t.data[r.lo * n], t.data[r.lo * n]};
    for (std::size_t i = r.lo * n; i < r.hi * n; ++i) {
        s.mn = std::min(s.mn, t.data[i]);
        s.mx = std::max(s.mx, t.data[i]);
    }
    return s;
}

void apply_scale(Tensor& t, double mn, double mx) {
    if (mx == mn) {
        t.fill(0.0);
        return;
    }
    const double inv = 1.0 / (mx - mn);
    for (double& v : t.data) v = (v - mn) * inv;
}

}  // namespace

NormalizeResult normalize(const FlowSeries& flows, const SlotRange& train_slots) {
    if (train_slots.size() == 0) throw std::invalid_argument("normalize: empty training range");
    if (train_slots.hi > flows.num_slots)
        throw std::invalid_argument("normalize: training range out of bounds");
    NormalizeResult r;
    r.flows = flows;
    const auto si = channel_minmax(flows.inflow, train_slots, flows.n);
    const auto so = channel_minmax(flows.outflow, train_slots, flows.n);
    r.scale = {si.mn, si.mx, so.mn, so.mx};
    r.in_degenerate = si.mx == si.mn;
    r.out_degenerate = so.mx == so.mn;
    apply_scale(r.flows.inflow, si.mn, si.mx);
    apply_scale(r.flows.outflow, so.mn, so.mx);
    return r;
}

double denormalize_value(double v, const ScaleParams& scale, Channel channel) {
    const double mn = channel == Channel::In ? scale.in_min : scale.out_min;
    const double mx = channel == Channel::In ? scale.in_max : scale.out_max;
    return v * (mx - mn) + mn;
}

Tensor denormalize(const Tensor& values, const ScaleParams& scale, Channel channel) {
    Tensor out = values;
    for (double& v : out.data) v = denormalize_value(v, scale, channel);
    return out;
}

SplitRanges split(const FlowSeries& flows, std::size_t slots_per_day, std::size_t train_days,
                  std::size_t test_days, double val_fraction) {
    if (val_fraction <= 0.0 || val_fraction >= 1.0)
        throw std::invalid_argument("split: val_fraction must be in (0,1)");
    const std::size_t avail_days = flows.num_slots / slots_per_day;
    if (train_days + test_days > avail_days)
        throw std::invalid_argument("split: need " + std::to_string(train_days + test_days) +
                                    " days but only " + std::to_string(avail_days) +
                                    " are available");
    const auto val_days = static_cast<std::size_t>(
        std::llround(val_fraction * static_cast<double>(train_days)));
    const std::size_t fit_days = train_days - val_days;
    SplitRanges s;
    s.train = {0, fit_days * slots_per_day};
    s.val = {s.train.hi, train_days * slots_per_day};
    s.test = {s.val.hi, (train_days + test_days) * slots_per_day};
    return s;
}

void write_flows_csv(const std::string& path, const FlowSeries& flows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "slot,region,inflow,outflow\n";
    char buf[96];
    for (std::size_t t = 0; t < flows.num_slots; ++t)
        for (std::size_t i = 0; i < flows.n; ++i) {
            std::snprintf(buf, sizeof(buf), "%zu,%zu,%.6g,%.6g\n", t, i, flows.inflow.at(t, i),
                          flows.outflow.at(t, i));
            out << buf;
        }
}

FlowSeries read_flows_csv(const std::string& path, std::size_t n, std::size_t num_slots,
                          std::size_t start_slot_of_day) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    FlowSeries f = FlowSeries::zeros(n, num_slots);
    f.start_slot_of_day = start_slot_of_day;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::size_t t, i;
        double fin, fout;
        if (std::sscanf(line.c_str(), "%zu,%zu,%lf,%lf", &t, &i, &fin, &fout) != 4)
            throw std::runtime_error("bad flows row: " + line);
        if (t >= num_slots || i >= n) throw std::runtime_error("flows row out of range: " + line);
        f.inflow.at(t, i) = fin;
        f.outflow.at(t, i) = fout;
    }
    return f;
}

void write_flows_dir(const std::string& dir, const FlowSeries& flows, const FlowsMetadata& meta) {
    std::filesystem::create_directories(dir);
    write_flows_csv(dir + "/flows.csv", flows);
    nlohmann::json j;
    j["n"] = meta.n;
    j["rows"] = meta.rows;
    j["cols"] = meta.cols;
    j["slot_minutes"] = meta.slot_minutes;
    j["slots_per_day"] = meta.slots_per_day;
    j["num_slots"] = meta.num_slots;
    j["start_slot_of_day"] = meta.start_slot_of_day;
    if (meta.has_scale) {
        j["scale"] = {{"in_min", meta.scale.in_min},
                      {"in_max", meta.scale.in_max},
                      {"out_min", meta.scale.out_min},
                      {"out_max", meta.scale.out_max}};
    } else {
        j["scale"] = nullptr;
    }
    std::ofstream out(dir + "/metadata.json");
    out << j.dump(2) << "\n";
}

FlowsBundle read_flows_dir(const std::string& dir) {
    std::ifstream in(dir + "/metadata.json");
    if (!in) throw std::runtime_error("cannot read " + dir + "/metadata.json");
    nlohmann::json j;
    in >> j;
    FlowsBundle b;
    b.meta.n = j.at("n").get<std::size_t>();
    b.meta.rows = j.at("rows").get<std::size_t>();
    b.meta.cols = j.at("cols").get<std::size_t>();
    b.meta.slot_minutes = j.at("slot_minutes").get<std::size_t>();
    b.meta.slots_per_day = j.at("slots_per_day").get<std::size_t>();
    b.meta.num_slots = j.at("num_slots").get<std::size_t>();
    b.meta.start_slot_of_day = j.at("start_slot_of_day").get<std::size_t>();
    if (!j.at("scale").is_null()) {
        b.meta.has_scale = true;
        b.meta.scale.in_min = j["scale"].at("in_min").get<double>();
        b.meta.scale.in_max = j["scale"].at("in_max").get<double>();
        b.meta.scale.out_min = j["scale"].at("out_min").get<double>();
        b.meta.scale.out_max = j["scale"].at("out_max").get<double>();
    }
    b.flows = read_flows_csv(dir + "/flows.csv", b.meta.n, b.meta.num_slots,
                             b.meta.start_slot_of_day);
    return b;
}

}  // namespace sttis

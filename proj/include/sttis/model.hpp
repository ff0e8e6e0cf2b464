#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sttis/graph.hpp"
#include "sttis/store.hpp"
#include "sttis/tape.hpp"
#include "sttis/tensor.hpp"

namespace sttis {

struct QRecipe {
    std::size_t recent = 6;  // h
    std::size_t daily = 10;
    std::size_t weekly = 0;

    std::size_t total() const { return recent + daily + weekly; }
};

struct ModelConfig {
    std::size_t n = 0;
    std::size_t o = 48;          // slots per day
    std::size_t d = 8;           // embedding width
    std::size_t w = 6;           // surrounding-observation length
    std::size_t p = 3;           // conv kernel size
    std::size_t f = 4;           // conv channels
    std::size_t alpha = 3;       // DLI layer count
    std::size_t heads_dli = 6;   // M
    std::size_t heads_dlm = 6;   // Z
    double dropout = 0.1;
    QRecipe q_recipe;
    std::size_t ffn_mult = 4;
    bool layer_norm = true;

    std::size_t conv_flat() const { return 2 * f * (w - p + 1); }  // l
    void check() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

// One context slot's model input: the w-slot surrounding observations per
// region plus the slot-of-day index.
struct SlotInput {
    long slot = 0;
    std::size_t slot_of_day = 0;
    Tensor in_window;   // n x w
    Tensor out_window;  // n x w
};

struct TemporalContext {
    long target_slot = 0;
    SlotInput target;
    std::vector<SlotInput> context;  // ascending slot order, all < target
    Tensor truth;                    // n x 2 (normalized), optional, empty when predicting
};

struct ForwardOptions {
    bool training = false;
    ScoreCounter* counter = nullptr;
    AttentionCapture* capture = nullptr;  // DLI weights captured for the target slot only
    std::mt19937_64* rng = nullptr;       // dropout RNG override; defaults to the model's own
};

// ST-TIS network. Parameters live in an owned ParameterStore; the dropout
// stream is a member so a fixed model seed gives a reproducible run.
class Model {
public:
    Model(ModelConfig cfg, std::uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }
    ParameterStore& store() { return store_; }
    const ParameterStore& store() const { return store_; }
    std::mt19937_64& dropout_rng() { return drop_rng_; }

    Var stf_embed(Tape& tape, const SlotInput& slot) const;
    // Stacked embedding for several slots at once, slots.size()*n rows. The
    // whole context set rides one tape pass this way.
    Var stf_embed_batch(Tape& tape, const std::vector<const SlotInput*>& slots) const;
    Var dli_layer(Tape& tape, Var emb, const RegionGraph& graph, int layer,
                  const ForwardOptions& opt, bool capture_this, std::size_t blocks = 1,
                  std::size_t capture_block = 0) const;
    Var dli_stack(Tape& tape, const SlotInput& slot, const RegionGraph& graph,
                  const ForwardOptions& opt, bool capture_this) const;
    Var dlm(Tape& tape, Var r_target, const std::vector<Var>& r_context,
            const ForwardOptions& opt) const;
    Var predict_head(Tape& tape, Var omega) const;
    Var loss(Tape& tape, Var pred, const Tensor& truth) const;

    // dli_stack over every context slot and the target (shared weights),
    // then dlm and the prediction head. Returns the prediction node.
    Var forward(Tape& tape, const TemporalContext& ctx, const RegionGraph& graph,
                const ForwardOptions& opt = {}) const;

    // Several samples through one spatial pass: every context and target slot
    // of every sample rides the same block-stacked DLI tensor, then each
    // sample gets its own temporal attention and prediction node. Attention
    // capture requires a single sample.
    std::vector<Var> forward_many(Tape& tape, const std::vector<const TemporalContext*>& ctxs,
                                  const RegionGraph& graph, const ForwardOptions& opt = {}) const;

    // Convenience: forward without a tape caller, returns the n x 2 prediction.
    Tensor predict(const TemporalContext& ctx, const RegionGraph& graph,
                   const ForwardOptions& opt = {}) const;

private:
    void build_params(std::uint64_t init_seed);

    ModelConfig cfg_;
    ParameterStore store_;
    mutable std::mt19937_64 drop_rng_;
};

// Training loss recomputed directly (no tape), for oracles and evaluation.
double rmse_loss(const Tensor& pred, const Tensor& truth);

// Checkpoint binary: magic "STTIS\0", u32 version, length-prefixed config
// JSON, then each parameter in store order.
void save_checkpoint(const std::string& path, const Model& model);
Model load_checkpoint(const std::string& path);

}  // namespace sttis

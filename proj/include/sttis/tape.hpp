#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "sttis/graph.hpp"
#include "sttis/store.hpp"
#include "sttis/tensor.hpp"

namespace sttis {

using Var = int;

// Tallies attention-score evaluations, one per directed (query, key) pair.
struct ScoreCounter {
    long long evals = 0;
};

// Softmax weights captured during a forward pass, for the attention export.
struct AttentionCapture {
    struct DliWeight {
        int layer;
        int head;
        std::size_t src;
        std::size_t dst;
        double weight;
    };
    struct DlmWeight {
        int head;
        std::size_t region;
        std::size_t context_index;  // position within Q, ascending slots
        double weight;
    };
    std::vector<DliWeight> dli;
    std::vector<DlmWeight> dlm;
};

// Reverse-mode tape. Forward ops append nodes; backward() runs the node
// closures in reverse and accumulates into bound parameter gradients.
class Tape {
public:
    Var input(Tensor value);
    Var param(ParameterStore& store, const std::string& name);

    const Tensor& value(Var v) const { return nodes_[v].value; }
    const Tensor& grad(Var v) const { return nodes_[v].grad; }

    // out[i][j] = sum_k a[i][k] b[k][j]
    Var matmul(Var a, Var b);
    // matmul followed by a row-broadcast bias, one node instead of two
    Var linear(Var a, Var w, Var bias);
    // linear followed by relu in one node; the ffn hot path
    Var linear_relu(Var a, Var w, Var bias);
    // out row r = table row idx[r]; gradient scatter-adds back into the table
    Var rows_select(Var table, std::vector<std::size_t> idx);
    Var add(Var a, Var b);             // same shape
    Var sub(Var a, Var b);             // same shape
    Var add_rowvec(Var a, Var bias);   // m x n plus length-n vector
    Var scale(Var a, double c);
    Var relu(Var a);
    Var softmax_rows(Var a);
    Var concat_cols(const std::vector<Var>& parts);
    Var layer_norm(Var a, Var gain, Var bias);  // last axis, eps 1e-5
    Var dropout(Var a, double rate, std::mt19937_64& rng, bool training);
    // dropout(a) + res in one node; the residual hot path
    Var dropout_add(Var a, Var res, double rate, std::mt19937_64& rng, bool training);

    // x: n x w per-region windows, kernel: f x p, bias: length f.
    // Output n x f*(w-p+1), channel-major per region.
    Var conv1d(Var x, Var kernel, Var bias);

    Var sum_all(Var a);      // scalar
    Var sum_squares(Var a);  // scalar
    Var sqrt_scalar(Var a);

    // Per-region sparse attention over graph neighborhoods:
    // out_i = sum_{v in Neigh(i)} softmax_v((q_i . k_v)/sqrt(d)) * val_v.
    // Dropout, when active, masks post-softmax weights. Inputs may stack
    // `blocks` independent slots of graph.n rows each; attention never
    // crosses a block boundary and only `capture_block` is captured.
    Var neighbor_attention(Var q, Var k, Var val, const RegionGraph& graph, double drop_rate,
                           std::mt19937_64* rng, bool training, ScoreCounter* counter,
                           AttentionCapture* capture, int capture_layer, int capture_head,
                           std::size_t blocks = 1, std::size_t capture_block = 0);

    // All heads of the sparse attention in one op. q and k hold the head
    // projections side by side (rows x heads*d), val holds the shared raw
    // embeddings (rows x d), and the output interleaves the per-head results
    // the same way q does. Scores, softmax, dropout, counter and capture all
    // match `heads` separate neighbor_attention calls.
    Var multihead_neighbor_attention(Var q, Var k, Var val, const RegionGraph& graph,
                                     std::size_t heads, double drop_rate, std::mt19937_64* rng,
                                     bool training, ScoreCounter* counter,
                                     AttentionCapture* capture, int capture_layer,
                                     std::size_t blocks = 1, std::size_t capture_block = 0);

    Var slice_rows(Var a, std::size_t lo, std::size_t hi);  // half-open row range

    // Per-region attention of one query row over |Q| context slots:
    // out_i = sum_s softmax_s((q_i . k_{s,i})/sqrt(d)) * val_{s,i}.
    Var temporal_attention(Var q, const std::vector<Var>& keys, const std::vector<Var>& values,
                           double drop_rate, std::mt19937_64* rng, bool training,
                           AttentionCapture* capture, int capture_head);

    // All heads of the temporal attention in one op. q and each keys[s] hold
    // the head projections side by side (n x heads*d), values[s] are shared
    // by every head (n x dv), and the output interleaves the per-head
    // aggregates (n x heads*dv). Matches `heads` separate calls.
    Var multihead_temporal_attention(Var q, const std::vector<Var>& keys,
                                     const std::vector<Var>& values, std::size_t heads,
                                     double drop_rate, std::mt19937_64* rng, bool training,
                                     AttentionCapture* capture);

    // Square blocks assembled into one block-diagonal matrix node.
    Var blockdiag(const std::vector<Var>& parts);

    // Reverse sweep from a scalar loss; flows gradients into every bound
    // parameter. Accumulates when called twice without zero_grad.
    void backward(Var loss);

    // Split form of backward for concurrent tapes over a shared store: the
    // sweep itself touches only this tape, so several can run in parallel,
    // while flush_param_grads does the store accumulation and must be called
    // one tape at a time (order fixes the floating-point result).
    void backward_local(Var loss);
    void flush_param_grads();

    std::size_t num_nodes() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void()> back;  // empty for leaves
    };

    Var push(Tensor value);
    std::vector<Node> nodes_;
    std::vector<std::pair<Var, Param*>> bindings_;
    std::vector<ParameterStore*> stores_;
};

// Central-difference gradient check over every parameter coordinate.
// fn must be deterministic; it is evaluated twice up front and must
// reproduce its value bit-for-bit, otherwise this throws.
double finite_diff_check(const std::function<Var(Tape&)>& fn, ParameterStore& store,
                         double eps = 1e-4);

}  // namespace sttis

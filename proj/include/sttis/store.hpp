#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "sttis/tensor.hpp"

namespace sttis {

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor adam_m;
    Tensor adam_v;
};

// Ordered collection of named learnable tensors with shared Adam state.
// Insertion order is the serialization order.
class ParameterStore {
public:
    Param& add(const std::string& name, std::vector<std::size_t> shape);
    Param& get(const std::string& name);
    const Param& get(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) > 0; }

    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    std::size_t num_values() const;

    void zero_grad();
    void mark_grads_ready() { grads_ready_ = true; }
    bool grads_ready() const { return grads_ready_; }

    // Standard Adam with bias correction; clears gradients afterwards.
    void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    std::int64_t step_count() const { return step_; }
    void reset_adam();

    // uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) with fan_in = shape[0]
    void init_uniform(Param& p, std::mt19937_64& rng);

    // Copies values only (shapes must match); Adam state is untouched.
    void copy_values_from(const ParameterStore& other);

private:
    std::vector<Param> params_;
    std::unordered_map<std::string, std::size_t> index_;
    std::int64_t step_ = 0;
    bool grads_ready_ = false;
};

}  // namespace sttis

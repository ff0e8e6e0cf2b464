#include "sttis/store.hpp"

#include <cmath>
#include <stdexcept>

namespace sttis {

Param& ParameterStore::add(const std::string& name, std::vector<std::size_t> shape) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    Param p;
    p.name = name;
    p.value = Tensor::zeros(shape);
    p.grad = Tensor::zeros(shape);
    p.adam_m = Tensor::zeros(shape);
    p.adam_v = Tensor::zeros(std::move(shape));
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return params_.back();
}

Param& ParameterStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no such parameter: " + name);
    return params_[it->second];
}

const Param& ParameterStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no such parameter: " + name);
    return params_[it->second];
}

std::size_t ParameterStore::num_values() const {
    std::size_t c = 0;
    for (const auto& p : params_) c += p.value.size();
    return c;
}

void ParameterStore::zero_grad() {
    for (auto& p : params_) p.grad.fill(0.0);
    grads_ready_ = false;
}

void ParameterStore::adam_step(double lr, double beta1, double beta2, double eps) {
    if (!grads_ready_)
        throw std::logic_error("adam_step: gradients not populated (run backward first)");
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
    for (auto& p : params_) {
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad.data[i];
            p.adam_m.data[i] = beta1 * p.adam_m.data[i] + (1.0 - beta1) * g;
            p.adam_v.data[i] = beta2 * p.adam_v.data[i] + (1.0 - beta2) * g * g;
            const double mhat = p.adam_m.data[i] / bc1;
            const double vhat = p.adam_v.data[i] / bc2;
            p.value.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
    zero_grad();
}

void ParameterStore::reset_adam() {
    for (auto& p : params_) {
        p.adam_m.fill(0.0);
        p.adam_v.fill(0.0);
    }
    step_ = 0;
}

void ParameterStore::init_uniform(Param& p, std::mt19937_64& rng) {
    const double fan_in = static_cast<double>(p.value.shape.empty() ? 1 : p.value.shape[0]);
    const double bound = 1.0 / std::sqrt(fan_in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : p.value.data) v = dist(rng);
}

void ParameterStore::copy_values_from(const ParameterStore& other) {
    if (other.params_.size() != params_.size())
        throw std::invalid_argument("copy_values_from: store layout mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (params_[i].name != other.params_[i].name ||
            params_[i].value.shape != other.params_[i].value.shape)
            throw std::invalid_argument("copy_values_from: parameter mismatch at " +
                                        params_[i].name);
        params_[i].value.data = other.params_[i].value.data;
    }
}

}  // namespace sttis

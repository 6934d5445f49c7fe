#ifndef AAI_PARAMS_HPP
#define AAI_PARAMS_HPP

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "aai/autograd.hpp"
#include "aai/tensor.hpp"

namespace aai {

// Seeded random source shared by every stochastic routine.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    int uniform_int(int n) { return std::uniform_int_distribution<int>(0, n - 1)(engine_); }
    Tensor normal_tensor(Shape shape, double stddev = 1.0);
    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

struct NamedTensor {
    std::string name;
    Tensor value;
};

// Ordered collection of named parameter arrays.
class ParamSet {
public:
    ParamSet() = default;

    Tensor& add(std::string name, Tensor value);
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const;

    std::vector<NamedTensor>& items() { return items_; }
    const std::vector<NamedTensor>& items() const { return items_; }
    std::size_t size() const { return items_.size(); }
    std::size_t num_values() const;

    bool same_layout(const ParamSet& other) const;
    std::uint64_t checksum() const;

    bool operator==(const ParamSet& other) const;

private:
    std::vector<NamedTensor> items_;
};

// Graph leaves for one forward pass; `trainable` controls requires_grad.
class ParamVars {
public:
    ParamVars(const ParamSet& params, bool trainable);

    const ad::Var& operator[](const std::string& name) const;
    std::vector<Tensor> grads() const;
    const std::vector<ad::Var>& vars() const { return vars_; }

private:
    std::vector<std::string> names_;
    std::vector<ad::Var> vars_;
};

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled (AdamW)
};

// Adaptive-moment optimizer with decoupled weight decay over a ParamSet.
class Adam {
public:
    Adam(const ParamSet& params, AdamOptions options);

    void step(ParamSet& params, const std::vector<Tensor>& grads);
    // Single-array variant for optimizing one free vector.
    void step(Tensor& param, const Tensor& grad);
    long steps() const { return t_; }

private:
    void update(Tensor& p, const Tensor& g, Tensor& m, Tensor& v) const;

    AdamOptions opt_;
    std::vector<Tensor> m_, v_;
    long t_ = 0;
};

}  // namespace aai

#endif  // AAI_PARAMS_HPP

#include "aai/params.hpp"

#include <cmath>

#include "aai/error.hpp"

namespace aai {

Tensor Rng::normal_tensor(Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) {
        v = stddev * normal();
    }
    return t;
}

Tensor& ParamSet::add(std::string name, Tensor value) {
    require(!contains(name), "duplicate parameter name '" + name + "'");
    items_.push_back({std::move(name), std::move(value)});
    return items_.back().value;
}

Tensor& ParamSet::get(const std::string& name) {
    for (auto& it : items_) {
        if (it.name == name) {
            return it.value;
        }
    }
    throw ArgumentError("unknown parameter '" + name + "'");
}

const Tensor& ParamSet::get(const std::string& name) const {
    return const_cast<ParamSet*>(this)->get(name);
}

bool ParamSet::contains(const std::string& name) const {
    for (const auto& it : items_) {
        if (it.name == name) {
            return true;
        }
    }
    return false;
}

std::size_t ParamSet::num_values() const {
    std::size_t n = 0;
    for (const auto& it : items_) {
        n += it.value.size();
    }
    return n;
}

bool ParamSet::same_layout(const ParamSet& other) const {
    if (items_.size() != other.items_.size()) {
        return false;
    }
    for (std::size_t i = 0; i < items_.size(); ++i) {
        if (items_[i].name != other.items_[i].name || items_[i].value.shape() != other.items_[i].value.shape()) {
            return false;
        }
    }
    return true;
}

std::uint64_t ParamSet::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& it : items_) {
        h ^= aai::checksum(it.value) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        for (char c : it.name) {
            h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
        }
    }
    return h;
}

bool ParamSet::operator==(const ParamSet& other) const {
    if (!same_layout(other)) {
        return false;
    }
    for (std::size_t i = 0; i < items_.size(); ++i) {
        if (!(items_[i].value == other.items_[i].value)) {
            return false;
        }
    }
    return true;
}

ParamVars::ParamVars(const ParamSet& params, bool trainable) {
    for (const auto& it : params.items()) {
        names_.push_back(it.name);
        vars_.emplace_back(it.value, trainable);
    }
}

const ad::Var& ParamVars::operator[](const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
        if (names_[i] == name) {
            return vars_[i];
        }
    }
    throw ArgumentError("unknown parameter '" + name + "'");
}

std::vector<Tensor> ParamVars::grads() const {
    std::vector<Tensor> out;
    out.reserve(vars_.size());
    for (const auto& v : vars_) {
        out.push_back(v.grad());
    }
    return out;
}

Adam::Adam(const ParamSet& params, AdamOptions options) : opt_(options) {
    for (const auto& it : params.items()) {
        m_.emplace_back(it.value.shape(), 0.0);
        v_.emplace_back(it.value.shape(), 0.0);
    }
}

void Adam::update(Tensor& p, const Tensor& g, Tensor& m, Tensor& v) const {
    require(p.shape() == g.shape() && p.shape() == m.shape(), "optimizer: gradient shape mismatch");
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (opt_.weight_decay != 0.0) {
            p[i] *= 1.0 - opt_.lr * opt_.weight_decay;
        }
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i];
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
    }
}

void Adam::step(ParamSet& params, const std::vector<Tensor>& grads) {
    require(grads.size() == params.size() && m_.size() == params.size(), "optimizer: parameter count mismatch");
    ++t_;
    for (std::size_t i = 0; i < params.size(); ++i) {
        update(params.items()[i].value, grads[i], m_[i], v_[i]);
    }
}

void Adam::step(Tensor& param, const Tensor& grad) {
    require(m_.size() == 1, "single-array step needs an optimizer built for one array");
    ++t_;
    update(param, grad, m_[0], v_[0]);
}

}  // namespace aai

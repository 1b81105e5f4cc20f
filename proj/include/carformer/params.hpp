#pragma once

#include <map>
#include <string>
#include <vector>

#include "carformer/errors.hpp"
#include "carformer/tensor.hpp"

namespace cf {

// Initialization class of a parameter (see training.hpp).
enum class ParamKind {
    Embedding,        // N(0, 0.02)
    LinearWeight,     // SMALLINIT
    FfnIntermediate,  // N(0, 2 / (n_layers * sqrt(d)))
    Bias,             // zero
    Gain,             // one
};

// Named parameter tensors in fixed insertion order. Iteration order is part
// of the determinism contract (optimizer updates, checkpoints).
class ParamStore {
public:
    Tensor add(const std::string& name, std::vector<int> shape, ParamKind kind) {
        if (map_.count(name)) throw ConfigError("duplicate parameter name " + name);
        Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
        names_.push_back(name);
        kinds_.push_back(kind);
        map_.emplace(name, t);
        return t;
    }

    Tensor get(const std::string& name) const {
        auto it = map_.find(name);
        if (it == map_.end()) throw ConfigError("unknown parameter " + name);
        return it->second;
    }

    bool contains(const std::string& name) const { return map_.count(name) > 0; }

    const std::vector<std::string>& names() const { return names_; }
    ParamKind kind(std::size_t i) const { return kinds_[i]; }

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        out.reserve(names_.size());
        for (const auto& n : names_) out.push_back(map_.at(n));
        return out;
    }

    std::size_t total_size() const {
        std::size_t s = 0;
        for (const auto& n : names_) s += map_.at(n)->size();
        return s;
    }

    void zero_grad() const {
        for (const auto& n : names_) map_.at(n)->zero_grad();
    }

private:
    std::vector<std::string> names_;
    std::vector<ParamKind> kinds_;
    std::map<std::string, Tensor> map_;
};

}  // namespace cf

#pragma once

#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "streamtts/rng.hpp"
#include "streamtts/tensor.hpp"

namespace streamtts {

// Named parameter tensors in a stable insertion order (checkpoint layout
// and optimizer iteration both follow it). Frozen names are excluded from
// optimizer updates, which realizes the depth-transformer freeze ablation.
template <typename T>
class ParameterStore {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        if (index_.count(name)) throw ValidationError("duplicate parameter: " + name);
        index_[name] = static_cast<int>(names_.size());
        names_.push_back(name);
        t.alloc_grad();
        tensors_.push_back(std::move(t));
        return tensors_.back();
    }

    Tensor<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
        return tensors_[it->second];
    }

    const Tensor<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
        return tensors_[it->second];
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    const std::vector<std::string>& names() const { return names_; }
    Tensor<T>& at(int i) { return tensors_[i]; }
    const Tensor<T>& at(int i) const { return tensors_[i]; }
    int size() const { return static_cast<int>(tensors_.size()); }

    void zero_grads() {
        for (auto& t : tensors_) t.zero_grad();
    }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& t : tensors_) n += t.numel();
        return n;
    }

    void freeze_prefix(const std::string& prefix) {
        for (const auto& n : names_)
            if (n.rfind(prefix, 0) == 0) frozen_.insert(n);
    }

    bool is_frozen(const std::string& name) const { return frozen_.count(name) != 0; }
    const std::set<std::string>& frozen() const { return frozen_; }
    void clear_freeze() { frozen_.clear(); }

    template <typename U>
    ParameterStore<U> cast() const {
        ParameterStore<U> out;
        for (int i = 0; i < size(); ++i) out.add(names_[i], tensors_[i].template cast<U>());
        return out;
    }

private:
    std::vector<std::string> names_;
    std::vector<Tensor<T>> tensors_;
    std::unordered_map<std::string, int> index_;
    std::set<std::string> frozen_;
};

}  // namespace streamtts

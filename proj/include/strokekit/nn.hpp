#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "strokekit/ops.hpp"
#include "strokekit/rng.hpp"
#include "strokekit/tensor.hpp"

namespace strokekit::nn {

// Ordered, named parameter registry. Initialization draws from a stream
// keyed by (seed, parameter name), so values do not depend on creation
// order, and the ordering gives the optimizer and checkpoint a stable
// traversal.
template <typename T>
class ParamStore {
public:
    explicit ParamStore(uint64_t seed = 0) : seed_(seed) {}

    Tensor<T> zeros(const std::string& name, Shape shape) {
        return add(name, Tensor<T>::zeros(std::move(shape)));
    }

    Tensor<T> ones(const std::string& name, Shape shape) {
        return add(name, Tensor<T>::full(std::move(shape), T(1)));
    }

    Tensor<T> uniform_fan_in(const std::string& name, Shape shape, int fan_in) {
        Rng rng = init_stream(name);
        const T bound = T(1) / std::sqrt(static_cast<T>(fan_in));
        Tensor<T> t = Tensor<T>::zeros(std::move(shape));
        for (auto& v : t.raw()) v = static_cast<T>(rng.uniform(-bound, bound));
        return add(name, std::move(t));
    }

    Tensor<T> normal(const std::string& name, Shape shape, T stddev) {
        Rng rng = init_stream(name);
        Tensor<T> t = Tensor<T>::zeros(std::move(shape));
        for (auto& v : t.raw()) v = static_cast<T>(rng.normal()) * stddev;
        return add(name, std::move(t));
    }

    Tensor<T> values(const std::string& name, Shape shape, std::vector<T> vals) {
        return add(name, Tensor<T>::from(std::move(shape), std::move(vals)));
    }

    std::vector<std::pair<std::string, Tensor<T>>>& items() { return items_; }
    const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }

    int64_t count() const {
        int64_t n = 0;
        for (const auto& [name, t] : items_) n += t.numel();
        return n;
    }

private:
    Rng init_stream(const std::string& name) const {
        return Rng(Rng::derive(seed_, "init", {Rng::hash_str(name)}));
    }

    Tensor<T> add(const std::string& name, Tensor<T> t) {
        for (const auto& [n, _] : items_)
            SK_CHECK(n != name, ContractError, "duplicate parameter name " << name);
        t.set_requires_grad(true);
        items_.emplace_back(name, t);
        return t;
    }

    uint64_t seed_;
    std::vector<std::pair<std::string, Tensor<T>>> items_;
};

template <typename T>
struct Linear {
    Tensor<T> w; // [in, out]
    Tensor<T> b; // [out]

    Linear() = default;
    Linear(ParamStore<T>& ps, const std::string& name, int in, int out)
        : w(ps.uniform_fan_in(name + ".w", {in, out}, in)), b(ps.zeros(name + ".b", {out})) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        return ops::bias_add_rows(ops::matmul(x, w), b);
    }
};

template <typename T>
struct Conv {
    Tensor<T> w; // [out, in/groups, k, k]
    Tensor<T> b; // [out]
    int stride = 1, pad = 0, groups = 1;

    Conv() = default;
    Conv(ParamStore<T>& ps, const std::string& name, int in, int out, int k, int stride_,
         int pad_, int groups_)
        : w(ps.uniform_fan_in(name + ".w", {out, in / groups_, k, k}, (in / groups_) * k * k)),
          b(ps.zeros(name + ".b", {out})), stride(stride_), pad(pad_), groups(groups_) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        return ops::conv2d(x, w, &b, stride, pad, groups);
    }
};

inline int norm_groups(int channels) {
    if (channels % 4 == 0) return 4;
    if (channels % 2 == 0) return 2;
    return 1;
}

template <typename T>
struct GroupNorm {
    Tensor<T> g, b;
    int groups = 1;

    GroupNorm() = default;
    GroupNorm(ParamStore<T>& ps, const std::string& name, int channels)
        : g(ps.ones(name + ".g", {channels})), b(ps.zeros(name + ".b", {channels})),
          groups(norm_groups(channels)) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        return ops::group_norm(x, groups, g, b, T(1e-5));
    }
};

template <typename T>
struct LayerNorm {
    Tensor<T> g, b;

    LayerNorm() = default;
    LayerNorm(ParamStore<T>& ps, const std::string& name, int dim)
        : g(ps.ones(name + ".g", {dim})), b(ps.zeros(name + ".b", {dim})) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        return ops::layer_norm_rows(x, g, b, T(1e-5));
    }
};

// Two-layer feed-forward with GELU.
template <typename T>
struct Mlp {
    Linear<T> l1, l2;

    Mlp() = default;
    Mlp(ParamStore<T>& ps, const std::string& name, int in, int hidden, int out)
        : l1(ps, name + ".l1", in, hidden), l2(ps, name + ".l2", hidden, out) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        return l2.forward(ops::gelu(l1.forward(x)));
    }
};

// Three-layer head MLP, GELU between layers, linear output.
template <typename T>
struct Mlp3 {
    Linear<T> l1, l2, l3;

    Mlp3() = default;
    Mlp3(ParamStore<T>& ps, const std::string& name, int in, int hidden, int out)
        : l1(ps, name + ".l1", in, hidden), l2(ps, name + ".l2", hidden, hidden),
          l3(ps, name + ".l3", hidden, out) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        return l3.forward(ops::gelu(l2.forward(ops::gelu(l1.forward(x)))));
    }
};

} // namespace strokekit::nn

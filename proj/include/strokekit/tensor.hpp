#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "strokekit/error.hpp"

namespace strokekit {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <typename T> class Tape;

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad; // empty until a backward pass populates it
    bool requires_grad = false;
    Tape<T>* tape = nullptr; // tape holding the op that produced this tensor
    int64_t node = -1;
};

// Dense row-major tensor handle with shared storage. Values are immutable
// once an op has consumed them; gradient accumulation is the only sanctioned
// post-hoc mutation (the optimizer rewrites leaf data between tapes).
template <typename T>
class Tensor {
public:
    using Impl = TensorImpl<T>;

    Tensor() = default;

    static Tensor zeros(Shape s) { return filled(std::move(s), T(0)); }

    static Tensor full(Shape s, T v) { return filled(std::move(s), v); }

    static Tensor scalar(T v) { return full({}, v); }

    static Tensor from(Shape s, std::vector<T> values) {
        SK_CHECK(shape_numel(s) == static_cast<int64_t>(values.size()), ShapeError,
                 "tensor data length " << values.size() << " does not match shape "
                                       << shape_str(s));
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = std::move(s);
        t.impl_->data = std::move(values);
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int extent(int axis) const { return impl_->shape[axis]; }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

    std::span<const T> data() const { return impl_->data; }
    std::span<T> raw() { return impl_->data; }

    template <class... I>
    T& at(I... idx) {
        return impl_->data[offset_of({static_cast<int>(idx)...})];
    }
    template <class... I>
    T at(I... idx) const {
        return impl_->data[offset_of({static_cast<int>(idx)...})];
    }

    T item() const {
        SK_CHECK(defined() && numel() == 1, ContractError,
                 "item() requires a one-element tensor");
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const T> grad() const {
        SK_CHECK(has_grad(), ContractError, "gradient not populated");
        return impl_->grad;
    }
    std::span<T> grad_raw() {
        SK_CHECK(has_grad(), ContractError, "gradient not populated");
        return impl_->grad;
    }
    void zero_grad() {
        if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }
    void drop_grad() {
        if (impl_) impl_->grad.clear();
    }

    std::shared_ptr<Impl> impl() const { return impl_; }

    bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

private:
    static Tensor filled(Shape s, T v) {
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        int64_t n = shape_numel(s);
        t.impl_->shape = std::move(s);
        t.impl_->data.assign(static_cast<size_t>(n), v);
        return t;
    }

    int64_t offset_of(std::initializer_list<int> idx) const {
        SK_CHECK(idx.size() == impl_->shape.size(), ShapeError,
                 "index rank " << idx.size() << " does not match tensor "
                               << shape_str(impl_->shape));
        int64_t off = 0;
        auto it = idx.begin();
        for (size_t a = 0; a < impl_->shape.size(); ++a, ++it) {
            off = off * impl_->shape[a] + *it;
        }
        return off;
    }

    std::shared_ptr<Impl> impl_;
};

// Reverse-mode tape. Ops record one node per executed operation; backward
// replays nodes in reverse execution order, which is a reverse topological
// order because every op's inputs exist before its node is pushed.
//
// Gradients accumulate in a tape-local buffer map so several tapes may run
// concurrently against shared (read-only) parameters; backward() then
// flushes buffers into the tensors' grad fields, while backward_no_flush()
// leaves them in the tape for an externally ordered reduction.
template <typename T>
class Tape {
public:
    Tape() : prev_(active_) { active_ = this; }
    ~Tape() { active_ = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_; }

    void record(const Tensor<T>& out, std::vector<std::shared_ptr<TensorImpl<T>>> hold,
                std::function<void(Tape&)> backward) {
        out.impl()->tape = this;
        out.impl()->node = static_cast<int64_t>(nodes_.size());
        nodes_.push_back(Node{out.impl(), std::move(hold), std::move(backward)});
    }

    size_t size() const { return nodes_.size(); }

    void clear() {
        nodes_.clear();
        grads_.clear();
    }

    // Accumulation buffer for a tensor, created zero-filled on first use.
    std::vector<T>& buffer(const std::shared_ptr<TensorImpl<T>>& impl) {
        auto& buf = grads_[impl.get()];
        if (buf.empty()) buf.assign(impl->data.size(), T(0));
        return buf;
    }

    const std::vector<T>* find(const TensorImpl<T>* impl) const {
        auto it = grads_.find(impl);
        return it == grads_.end() ? nullptr : &it->second;
    }

    std::span<const T> gradient_of(const Tensor<T>& t) const {
        const auto* buf = find(t.impl().get());
        SK_CHECK(buf != nullptr, ContractError, "no gradient recorded for tensor");
        return *buf;
    }

    void backward(const Tensor<T>& loss, T seed = T(1)) {
        backward_no_flush(loss, seed);
        flush();
    }

    void backward_no_flush(const Tensor<T>& loss, T seed = T(1)) {
        SK_CHECK(loss.defined() && loss.numel() == 1, ContractError,
                 "backward expects a scalar loss, got "
                     << (loss.defined() ? shape_str(loss.shape()) : "undefined"));
        SK_CHECK(loss.impl()->tape == this, ContractError, "loss is not on this tape");
        buffer(loss.impl())[0] += seed;
        for (int64_t i = loss.impl()->node; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (grads_.find(n.out.get()) == grads_.end()) continue; // not reachable
            n.backward(*this);
        }
    }

    // Adds accumulated buffers into the grad field of every requires_grad
    // tensor touched by this tape.
    void flush() {
        for (auto& n : nodes_) flush_one(n.out);
        for (auto& n : nodes_) {
            for (auto& in : n.hold) flush_one(in);
        }
    }

private:
    struct Node {
        std::shared_ptr<TensorImpl<T>> out;
        std::vector<std::shared_ptr<TensorImpl<T>>> hold; // inputs kept alive
        std::function<void(Tape&)> backward;
    };

    void flush_one(const std::shared_ptr<TensorImpl<T>>& impl) {
        if (!impl->requires_grad) return;
        auto it = grads_.find(impl.get());
        if (it == grads_.end() || it->second.empty()) return;
        if (impl->grad.empty()) impl->grad.assign(impl->data.size(), T(0));
        for (size_t k = 0; k < impl->grad.size(); ++k) impl->grad[k] += it->second[k];
        it->second.clear(); // flushed once per backward call
    }

    static thread_local Tape* active_;
    Tape* prev_ = nullptr;
    std::vector<Node> nodes_;
    std::unordered_map<const TensorImpl<T>*, std::vector<T>> grads_;
};

template <typename T>
thread_local Tape<T>* Tape<T>::active_ = nullptr;

} // namespace strokekit

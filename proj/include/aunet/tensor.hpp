#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "aunet/errors.hpp"

namespace aunet {

using Shape = std::vector<int>;

std::int64_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<double> data;     // row-major, contiguous
    std::vector<double> grad;     // allocated on first accumulation
    std::vector<double> adjoint;  // scratch, live only inside one backward walk
    bool requires_grad = false;
};

// Lazily sized adjoint accumulator used by op backward closures.
std::vector<double>& adjoint_buffer(TensorImpl& t);

// Dense 64-bit float tensor. Tensor is a shared handle: copies alias the
// same storage, clone() deep-copies.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape s);
    static Tensor full(Shape s, double v);
    static Tensor from(Shape s, std::vector<double> values);
    static Tensor scalar(double v);

    bool defined() const { return impl != nullptr; }
    const Shape& shape() const { return impl->shape; }
    int ndim() const { return static_cast<int>(impl->shape.size()); }
    int dim(int i) const { return impl->shape[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl->data.size()); }

    bool requires_grad() const { return impl && impl->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        impl->requires_grad = rg;
        return *this;
    }

    std::vector<double>& data() { return impl->data; }
    const std::vector<double>& data() const { return impl->data; }

    double& at(int i);
    double& at(int i, int j);
    double& at(int i, int j, int k);
    double& at(int i, int j, int k, int l);
    double at(int i) const { return const_cast<Tensor*>(this)->at(i); }
    double at(int i, int j) const { return const_cast<Tensor*>(this)->at(i, j); }
    double at(int i, int j, int k) const { return const_cast<Tensor*>(this)->at(i, j, k); }
    double at(int i, int j, int k, int l) const { return const_cast<Tensor*>(this)->at(i, j, k, l); }

    // scalar convenience
    double value() const;

    std::vector<double>& grad();
    bool has_grad() const { return impl && !impl->grad.empty(); }
    void zero_grad();

    Tensor clone() const;

    std::shared_ptr<TensorImpl> impl;
};

struct TapeNode {
    std::function<void()> backward;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
};

// Recording tape plus the registry of named trainable parameters. One Graph
// owns one model's training state; the tape is cleared every step, the
// registry persists. Single-threaded during forward/backward; independent
// graphs may run on independent threads.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // --- tape ---
    void record(TapeNode node) { nodes_.push_back(std::move(node)); }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Seeds d(loss)/d(loss)=1 and walks the tape once in reverse execution
    // order (execution order is topological by construction). Accumulates
    // into .grad of every requires_grad tensor; repeated calls without
    // zero_grad() accumulate.
    void backward(const Tensor& loss);

    // --- parameter registry ---
    Tensor add_parameter(const std::string& name, Tensor t);
    bool has_parameter(const std::string& name) const;
    Tensor parameter(const std::string& name) const;
    const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
    void zero_grad();

    static Graph* active();

private:
    friend class TapeScope;
    std::vector<TapeNode> nodes_;
    std::vector<std::pair<std::string, Tensor>> params_;
};

// RAII guard: ops record onto `g` while the scope is alive. Scopes nest;
// with no active scope ops run forward-only.
class TapeScope {
public:
    explicit TapeScope(Graph& g);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Graph* prev_;
};

}  // namespace aunet

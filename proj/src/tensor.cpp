#include "aunet/tensor.hpp"

#include <unordered_set>

namespace aunet {

std::int64_t numel_of(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw DimensionError("tensor: dimension sizes must be positive, got " + shape_str(s));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

std::vector<double>& adjoint_buffer(TensorImpl& t) {
    if (t.adjoint.empty()) t.adjoint.assign(t.data.size(), 0.0);
    return t.adjoint;
}

Tensor Tensor::zeros(Shape s) {
    Tensor t;
    t.impl = std::make_shared<TensorImpl>();
    t.impl->data.assign(static_cast<std::size_t>(numel_of(s)), 0.0);
    t.impl->shape = std::move(s);
    return t;
}

Tensor Tensor::full(Shape s, double v) {
    Tensor t = zeros(std::move(s));
    for (double& x : t.impl->data) x = v;
    return t;
}

Tensor Tensor::from(Shape s, std::vector<double> values) {
    if (numel_of(s) != static_cast<std::int64_t>(values.size()))
        throw DimensionError("tensor: " + std::to_string(values.size()) + " values do not fill shape " + shape_str(s));
    Tensor t;
    t.impl = std::make_shared<TensorImpl>();
    t.impl->shape = std::move(s);
    t.impl->data = std::move(values);
    return t;
}

Tensor Tensor::scalar(double v) {
    return from({1}, {v});
}

double& Tensor::at(int i) {
    return impl->data[static_cast<std::size_t>(i)];
}

double& Tensor::at(int i, int j) {
    return impl->data[static_cast<std::size_t>(i) * impl->shape[1] + j];
}

double& Tensor::at(int i, int j, int k) {
    const auto& s = impl->shape;
    return impl->data[(static_cast<std::size_t>(i) * s[1] + j) * s[2] + k];
}

double& Tensor::at(int i, int j, int k, int l) {
    const auto& s = impl->shape;
    return impl->data[((static_cast<std::size_t>(i) * s[1] + j) * s[2] + k) * s[3] + l];
}

double Tensor::value() const {
    if (!impl || impl->data.size() != 1) throw UsageError("tensor: value() requires a scalar");
    return impl->data[0];
}

std::vector<double>& Tensor::grad() {
    if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
    return impl->grad;
}

void Tensor::zero_grad() {
    if (impl) impl->grad.clear();
}

Tensor Tensor::clone() const {
    Tensor t;
    t.impl = std::make_shared<TensorImpl>();
    t.impl->shape = impl->shape;
    t.impl->data = impl->data;
    t.impl->requires_grad = impl->requires_grad;
    return t;
}

namespace {
thread_local Graph* g_active_graph = nullptr;
}

Graph* Graph::active() {
    return g_active_graph;
}

TapeScope::TapeScope(Graph& g) : prev_(g_active_graph) {
    g_active_graph = &g;
}

TapeScope::~TapeScope() {
    g_active_graph = prev_;
}

void Graph::backward(const Tensor& loss) {
    if (!loss.defined()) throw UsageError("backward: loss tensor is undefined");
    if (loss.numel() != 1) throw UsageError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));

    adjoint_buffer(*loss.impl)[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();

    std::unordered_set<TensorImpl*> seen;
    auto flush = [&seen](const std::shared_ptr<TensorImpl>& t) {
        if (!t || !seen.insert(t.get()).second) return;
        if (!t->adjoint.empty() && t->requires_grad) {
            if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
            for (std::size_t i = 0; i < t->grad.size(); ++i) t->grad[i] += t->adjoint[i];
        }
        t->adjoint.clear();
    };
    flush(loss.impl);
    for (auto& n : nodes_) {
        flush(n.output);
        for (auto& in : n.inputs) flush(in);
    }
}

Tensor Graph::add_parameter(const std::string& name, Tensor t) {
    if (!t.defined()) throw UsageError("graph: cannot register undefined parameter '" + name + "'");
    if (has_parameter(name)) throw UsageError("graph: duplicate parameter name '" + name + "'");
    t.set_requires_grad(true);
    params_.emplace_back(name, t);
    return t;
}

bool Graph::has_parameter(const std::string& name) const {
    for (const auto& [n, t] : params_)
        if (n == name) return true;
    return false;
}

Tensor Graph::parameter(const std::string& name) const {
    for (const auto& [n, t] : params_)
        if (n == name) return t;
    throw UsageError("graph: no parameter named '" + name + "'");
}

void Graph::zero_grad() {
    for (auto& [n, t] : params_) t.zero_grad();
}

}  // namespace aunet

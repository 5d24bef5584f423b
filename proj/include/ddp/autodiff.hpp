#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <unordered_set>
#include <vector>

#include "ddp/tensor.hpp"

namespace ddp {

// Reverse-mode tape node. Recording an op links the result to its inputs and
// stores a closure that routes the upstream gradient to them. Values are
// immutable after construction; only the gradient accumulator is written, and
// only during backward().
template <typename T>
struct Node {
    TensorT<T> value;
    TensorT<T> grad;  // allocated on first accumulation
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<T>>> inputs;
    std::function<void(Node<T>&)> backward_fn;

    explicit Node(TensorT<T> v) : value(std::move(v)) {}

    void accumulate(const TensorT<T>& g) {
        if (!has_grad) {
            grad = TensorT<T>(value.shape());
            has_grad = true;
        }
        for (std::int64_t i = 0; i < grad.numel(); ++i) grad[i] += g[i];
    }

    const TensorT<T>& grad_or_zero() {
        if (!has_grad) {
            grad = TensorT<T>(value.shape());
            has_grad = true;
        }
        return grad;
    }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> leaf(TensorT<T> v, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>(std::move(v));
    n->requires_grad = requires_grad;
    return n;
}

template <typename T>
bool any_requires_grad(const std::vector<Var<T>>& vars) {
    for (const auto& v : vars)
        if (v->requires_grad) return true;
    return false;
}

// Named gradients, one entry per trainable parameter.
template <typename T>
using GradientSetT = std::map<std::string, TensorT<T>>;

using GradientSet = GradientSetT<float>;

// Reverse topological accumulation from a scalar loss. The recorded order is
// recovered by depth-first traversal over input links; summation order is
// fixed, so results are deterministic.
template <typename T>
void backward(const Var<T>& loss) {
    if (loss->value.numel() != 1) throw UsageError("backward: loss must be scalar");
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    seen.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<T>* child = node->inputs[next++].get();
            if (seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    TensorT<T> one(loss->value.shape(), T(1));
    loss->accumulate(one);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward_fn && node->has_grad) node->backward_fn(*node);
    }
}

// Central finite differences against the recorded reverse-mode gradient.
// `f` must be deterministic; x is perturbed element by element.
template <typename T>
double finite_diff_check(const std::function<T(const TensorT<T>&)>& f,
                         const std::function<TensorT<T>(const TensorT<T>&)>& analytic_grad,
                         const TensorT<T>& x, T eps) {
    TensorT<T> g = analytic_grad(x);
    double worst = 0.0;
    TensorT<T> xp = x;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const T orig = xp[i];
        xp[i] = orig + eps;
        const double fp = static_cast<double>(f(xp));
        xp[i] = orig - eps;
        const double fm = static_cast<double>(f(xp));
        xp[i] = orig;
        const double num = (fp - fm) / (2.0 * static_cast<double>(eps));
        const double ana = static_cast<double>(g[i]);
        const double denom = std::max({std::abs(num), std::abs(ana), 1e-8});
        worst = std::max(worst, std::abs(num - ana) / denom);
    }
    return worst;
}

}  // namespace ddp

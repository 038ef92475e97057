#include "hybridscan/autodiff.hpp"

#include <sstream>
#include <unordered_set>
#include <utility>

namespace hybridscan {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

template <typename Scalar>
void backward(const Var<Scalar>& root) {
  if (!root.defined() || root.size() != 1) {
    throw UsageError("backward() requires a scalar root, got shape " +
                     (root.defined() ? shape_str(root.shape()) : std::string("<undefined>")));
  }
  using NodeT = Node<Scalar>;
  NodeT* start = root.node();
  if (!start->requires_grad) return;

  // Iterative post-order DFS: order ends with the root. Owning handles keep
  // intermediates alive while parents lists are cleared below.
  std::vector<std::shared_ptr<NodeT>> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<std::shared_ptr<NodeT>, std::size_t>> stack;
  stack.emplace_back(root.node_ptr(), 0);
  visited.insert(start);
  while (!stack.empty()) {
    NodeT* node = stack.back().first.get();
    std::size_t& next = stack.back().second;
    if (next < node->parents.size()) {
      std::shared_ptr<NodeT> p = node->parents[next++];
      if (p->requires_grad && visited.insert(p.get()).second) stack.emplace_back(std::move(p), 0);
    } else {
      order.push_back(std::move(stack.back().first));
      stack.pop_back();
    }
  }

  start->accumulate(Tensor<Scalar>::constant(start->value.shape(), Scalar(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = it->get();
    if (!node->backward) continue;
    if (node->grad.defined()) node->backward(*node);
    node->backward = nullptr;
    node->grad = Tensor<Scalar>();
    node->parents.clear();
  }
}

template <typename Scalar>
Var<Scalar> ParameterSet<Scalar>::add(const std::string& name, Tensor<Scalar> init) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  Var<Scalar> v(std::move(init), true);
  index_.emplace(name, params_.size());
  params_.push_back({name, v});
  return v;
}

template <typename Scalar>
Var<Scalar> ParameterSet<Scalar>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("unknown parameter: " + name);
  return params_[it->second].var;
}

template <typename Scalar>
Index ParameterSet<Scalar>::numel() const {
  Index n = 0;
  for (const auto& p : params_) n += p.var.size();
  return n;
}

template <typename Scalar>
void ParameterSet<Scalar>::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);
template class ParameterSet<float>;
template class ParameterSet<double>;

}  // namespace hybridscan

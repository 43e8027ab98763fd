#include "pf/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace pf {

std::size_t numel_of(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

DiffTensor tensor_zeros(std::vector<std::size_t> shape, bool requires_grad) {
  auto t = std::make_shared<Tensor>();
  t->value.assign(numel_of(shape), 0.0);
  t->shape = std::move(shape);
  t->requires_grad = requires_grad;
  return t;
}

DiffTensor tensor_from(std::vector<std::size_t> shape, std::vector<double> data,
                       bool requires_grad) {
  if (data.size() != numel_of(shape)) {
    throw std::runtime_error("tensor_from: data size " +
                             std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
  }
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->value = std::move(data);
  t->requires_grad = requires_grad;
  return t;
}

DiffTensor tensor_scalar(double v, bool requires_grad) {
  return tensor_from({1}, {v}, requires_grad);
}

DiffTensor clone(const DiffTensor& t, bool requires_grad) {
  auto c = std::make_shared<Tensor>();
  c->shape = t->shape;
  c->value = t->value;
  c->requires_grad = requires_grad;
  return c;
}

DiffTensor detach(const DiffTensor& t) { return clone(t, false); }

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

void Tape::reset() {
  nodes_.clear();
  ++epoch_;
}

void Tape::check_usable(const Tensor& t, const char* op_name) const {
  if (!t.recorded()) return;
  if (t.tape != this) {
    throw std::runtime_error(std::string(op_name) +
                             ": input tensor belongs to a different tape");
  }
  if (t.epoch != epoch_) {
    throw std::runtime_error(
        std::string(op_name) +
        ": input tensor was recorded in a stale tape epoch; detach() it to "
        "use its values as a constant");
  }
}

void Tape::record(const DiffTensor& out, std::vector<DiffTensor> parents,
                  std::function<void()> backward_fn) {
  Node node;
  node.out = out;
  node.parent_ids.reserve(parents.size());
  for (const auto& p : parents) {
    check_usable(*p, "Tape::record");
    if (p->recorded()) node.parent_ids.push_back(p->node_id);
  }
  node.backward_fn = std::move(backward_fn);

  out->tape = this;
  out->epoch = epoch_;
  out->node_id = nodes_.size();
  nodes_.push_back(std::move(node));
}

void Tape::backward(const DiffTensor& root) {
  if (root->numel() != 1) {
    throw std::runtime_error("Tape::backward: root must be a scalar, got " +
                             shape_str(root->shape));
  }
  if (!root->recorded() || root->tape != this) {
    throw std::runtime_error(
        "Tape::backward: root is not recorded on this tape");
  }
  if (root->epoch != epoch_) {
    throw std::runtime_error(
        "Tape::backward: root belongs to a stale tape epoch");
  }

  const std::size_t root_id = root->node_id;

  // Pass 1 (reverse): mark the subgraph that actually feeds the root.
  // Parents always have smaller ids than children, so a single reverse
  // sweep settles reachability.
  std::vector<char> live(root_id + 1, 0);
  live[root_id] = 1;
  for (std::size_t i = root_id + 1; i-- > 0;) {
    if (!live[i]) continue;
    for (std::size_t p : nodes_[i].parent_ids) live[p] = 1;
  }

  // Interior gradients are scratch: re-zero every live one so that repeated
  // backward calls against the same epoch stay independent.
  for (std::size_t i = 0; i <= root_id; ++i) {
    if (!live[i]) continue;
    auto& g = nodes_[i].out->grad_ref();
    std::fill(g.begin(), g.end(), 0.0);
  }

  root->grad_ref()[0] = 1.0;

  // Pass 2 (reverse): pull gradients down the live subgraph.
  for (std::size_t i = root_id + 1; i-- > 0;) {
    if (!live[i]) continue;
    if (nodes_[i].backward_fn) nodes_[i].backward_fn();
  }
}

}  // namespace pf

#include "sci/tensor.hpp"

#include <sstream>

namespace sci {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::string shape_str(std::span<const std::int64_t> shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = previous_;
}

Tape* Tape::active() noexcept { return g_active_tape; }

void Tape::record(std::function<void()> backward) { nodes_.push_back(std::move(backward)); }

void Tape::clear() noexcept { nodes_.clear(); }

template <class S>
void Tape::backward(const Tensor<S>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw UsageError("backward() needs a scalar objective, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  if (!loss.requires_grad()) return;
  auto& node = *loss.node();
  node.ensure_grad();
  node.grad[0] += S(1);
  // Closures may create temporaries; keep them off this tape.
  NoGradGuard guard;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

template void Tape::backward<float>(const Tensor<float>&);
template void Tape::backward<double>(const Tensor<double>&);

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }
NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

template <class S>
Tensor<S> Tensor<S>::zeros(Shape shape) {
  return autograd::make_result<S>(std::move(shape), false);
}

template <class S>
Tensor<S> Tensor<S>::full(Shape shape, S value) {
  auto t = zeros(std::move(shape));
  std::fill(t.node_->data.begin(), t.node_->data.end(), value);
  return t;
}

template <class S>
Tensor<S> Tensor<S>::from(Shape shape, std::vector<S> values) {
  if (static_cast<std::int64_t>(values.size()) != sci::numel(shape))
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  return Tensor(std::move(node));
}

template <class S>
Tensor<S> Tensor<S>::scalar(S value) {
  return from({}, {value});
}

template <class S>
std::int64_t Tensor<S>::dim(int i) const {
  const int r = static_cast<int>(rank());
  const int k = i < 0 ? r + i : i;
  if (k < 0 || k >= r) throw DimensionError("axis " + std::to_string(i) + " out of range for " + shape_str(shape()));
  return node_->shape[static_cast<std::size_t>(k)];
}

template <class S>
S Tensor<S>::item() const {
  if (numel() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
  return node_->data[0];
}

template <class S>
Tensor<S> Tensor<S>::clone() const {
  return from(shape(), node_->data);
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace sci

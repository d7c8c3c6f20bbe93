#include "t3/tensor.hpp"

#include <cmath>
#include <random>
#include <sstream>
#include <unordered_set>

namespace t3 {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {
thread_local bool g_grad_enabled = true;

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must be non-empty");
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("zero-sized dimension in shape " + shape_str(shape));
  }
}
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : impl_(std::make_shared<TensorImpl<T>>()) {
  check_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape) {
  check_shape(shape);
  return Tensor(shape, std::vector<T>(shape_numel(shape), T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::ones(const Shape& shape) {
  return full(shape, T(1));
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value) {
  check_shape(shape);
  return Tensor(shape, std::vector<T>(shape_numel(shape), value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{1}, std::vector<T>{value});
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (!is_leaf() && !on) throw std::logic_error("cannot clear requires_grad on a non-leaf tensor");
  impl_->requires_grad = on;
  return *this;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("index rank mismatch for shape " + shape_str(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= impl_->shape[axis]) throw std::out_of_range("index out of range");
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  }
  // Iterative post-order DFS; input order fixes the traversal so the sweep is
  // deterministic for a given forward trace.
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> seen;
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* gn = node->node.get();
    if (gn != nullptr && next < gn->inputs.size()) {
      TensorImpl<T>* child = gn->inputs[next++].get();
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (TensorImpl<T>* t : order) {
    if (t->node) t->grad.assign(t->data.size(), T(0));
  }
  impl_->ensure_grad();
  impl_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* t = *it;
    if (t->node && t->node->backward_fn) t->node->backward_fn(*t);
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(impl);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  auto impl = std::make_shared<TensorImpl<T>>(*impl_);
  impl->node.reset();
  return Tensor(impl);
}

template <typename T>
Tensor<T> init_tensor(const Shape& shape, const InitScheme& scheme, std::uint64_t seed) {
  check_shape(shape);
  std::vector<T> values(shape_numel(shape));
  std::mt19937_64 rng(seed);
  switch (scheme.kind) {
    case InitScheme::Kind::kZeros:
      std::fill(values.begin(), values.end(), T(0));
      break;
    case InitScheme::Kind::kOnes:
      std::fill(values.begin(), values.end(), T(1));
      break;
    case InitScheme::Kind::kTruncatedNormal: {
      if (!(scheme.a > 0)) throw std::invalid_argument("truncated_normal needs std > 0");
      std::normal_distribution<double> dist(0.0, scheme.a);
      for (auto& v : values) {
        double s;
        do {
          s = dist(rng);
        } while (std::abs(s) > 2.0 * scheme.a);
        v = static_cast<T>(s);
      }
      break;
    }
    case InitScheme::Kind::kUniform: {
      if (!(scheme.b > scheme.a)) throw std::invalid_argument("uniform needs lo < hi");
      std::uniform_real_distribution<double> dist(scheme.a, scheme.b);
      for (auto& v : values) v = static_cast<T>(dist(rng));
      break;
    }
  }
  return Tensor<T>(shape, std::move(values));
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> init_tensor<float>(const Shape&, const InitScheme&, std::uint64_t);
template Tensor<double> init_tensor<double>(const Shape&, const InitScheme&, std::uint64_t);

}  // namespace t3

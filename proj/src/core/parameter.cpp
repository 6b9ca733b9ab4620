#include "afft/core/parameter.hpp"

namespace afft::core {

template <typename T>
void ParameterSet<T>::add(const std::string& name, const Tensor<T>& tensor) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  index_[name] = items_.size();
  items_.push_back({name, tensor});
}

template <typename T>
const Tensor<T>& ParameterSet<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return items_[it->second].tensor;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& p : items_) p.tensor.zero_grad();
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

template <typename T>
Tensor<T> trunc_normal(Shape shape, std::mt19937_64& rng, double stddev) {
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) {
    double x = 0;
    do {
      x = std::normal_distribution<double>(0.0, 1.0)(rng);
    } while (x < -2.0 || x > 2.0);
    v = static_cast<T>(x * stddev);
  }
  return Tensor<T>(std::move(shape), std::move(values), true);
}

template <typename T>
void sgd_momentum_step(const ParameterSet<T>& params, double lr, double momentum, double weight_decay,
                       MomentumState<T>& state) {
  const T eta = static_cast<T>(lr), mu = static_cast<T>(momentum), wd = static_cast<T>(weight_decay);
  for (const auto& p : params.items()) {
    Tensor<T> t = p.tensor;
    auto theta = t.mutable_data();
    auto& v = state.velocity[p.name];
    if (v.empty()) v.assign(theta.size(), T(0));
    if (v.size() != theta.size()) throw ShapeError("velocity shape mismatch for " + p.name);
    const auto& g = t.node()->grad;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const T gi = g.empty() ? T(0) : g[i];
      v[i] = mu * v[i] + gi + wd * theta[i];
      theta[i] -= eta * v[i];
    }
  }
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template Tensor<float> trunc_normal<float>(Shape, std::mt19937_64&, double);
template Tensor<double> trunc_normal<double>(Shape, std::mt19937_64&, double);
template void sgd_momentum_step<float>(const ParameterSet<float>&, double, double, double, MomentumState<float>&);
template void sgd_momentum_step<double>(const ParameterSet<double>&, double, double, double, MomentumState<double>&);

}  // namespace afft::core

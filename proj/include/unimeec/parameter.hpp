#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "unimeec/error.hpp"

namespace unimeec {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Optimizer parameter groups; the encoder is fine-tuned at its own rate.
enum class ParamGroup { encoder, other };

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  ParamGroup group = ParamGroup::other;
  bool trainable = true;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

// Owns every parameter of a model. Iteration order is creation order, which
// fixes initialization, checkpoint layout, and optimizer traversal.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore& other) { *this = other; }
  ParameterStore& operator=(const ParameterStore& other) {
    if (this == &other) return *this;
    params_.clear();
    index_.clear();
    for (const auto& p : other.params_) {
      params_.push_back(std::make_unique<Parameter>(*p));
      index_[p->name] = params_.size() - 1;
    }
    return *this;
  }
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter& add(std::string name, Matrix init, ParamGroup group) {
    if (index_.count(name)) throw Error("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter>();
    p->name = std::move(name);
    p->value = std::move(init);
    p->group = group;
    p->zero_grad();
    index_[p->name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter: " + name);
    return *params_[it->second];
  }
  const Parameter& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter: " + name);
    return *params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  // First parameter whose gradient holds a NaN or Inf, or nullptr.
  const Parameter* first_non_finite_grad() const {
    for (const auto& p : params_)
      if (!p->grad.allFinite()) return p.get();
    return nullptr;
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t> index_;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Matrix fan_in_uniform(Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in,
                             std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace unimeec

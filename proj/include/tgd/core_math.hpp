#pragma once

// Losses and regularizers of the anchored transfer objective, with their
// analytic gradients. Loss values are reduced in double precision; Omega sums
// walk parameters in sorted-name order so repeated evaluations are bitwise
// identical.

#include <map>
#include <span>
#include <string>
#include <vector>

#include "tgd/tensor.hpp"

namespace tgd {

enum class Role { feature, head };
enum class RoleFilter { feature, head, all };

std::string_view role_name(Role role);
Role parse_role(std::string_view name);

inline bool role_selected(Role role, RoleFilter filter) {
  return filter == RoleFilter::all ||
         (filter == RoleFilter::feature && role == Role::feature) ||
         (filter == RoleFilter::head && role == Role::head);
}

/// Named, role-partitioned collection of tensors. Iteration is in sorted name
/// order.
template <class T>
class BasicParameterSet {
 public:
  struct Entry {
    BasicTensor<T> tensor;
    Role role = Role::feature;
    friend bool operator==(const Entry&, const Entry&) = default;
  };
  using Map = std::map<std::string, Entry, std::less<>>;

  void add(std::string name, BasicTensor<T> tensor, Role role);

  bool contains(std::string_view name) const {
    return entries_.find(name) != entries_.end();
  }
  BasicTensor<T>& at(std::string_view name);
  const BasicTensor<T>& at(std::string_view name) const;
  Role role(std::string_view name) const;

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  /// Total number of scalar entries.
  std::size_t scalar_count() const;
  std::vector<std::string> names() const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  /// Same names, shapes and roles, all values zero.
  BasicParameterSet zeros_like() const;

  template <class U>
  BasicParameterSet<U> cast() const {
    BasicParameterSet<U> out;
    for (const auto& [name, e] : entries_) {
      out.add(name, e.tensor.template cast<U>(), e.role);
    }
    return out;
  }

  friend bool operator==(const BasicParameterSet&,
                         const BasicParameterSet&) = default;

 private:
  Map entries_;
};

using ParameterSet = BasicParameterSet<float>;

/// Throws AlignmentError naming the first offending parameter unless both sets
/// have identical names, shapes and roles.
template <class T>
void require_aligned(const BasicParameterSet<T>& a,
                     const BasicParameterSet<T>& b);

template <class T>
bool aligned(const BasicParameterSet<T>& a, const BasicParameterSet<T>& b);

/// Clamp applied to predictions before taking logs.
inline constexpr double kPredictionEpsilon = 1e-7;

/// Mean binary cross-entropy.
double binary_cross_entropy(std::span<const double> predictions,
                            std::span<const double> labels);

/// d(mean BCE)/d(logit_i) where predictions_i = sigmoid(logit_i); zero where
/// the clamp is active.
std::vector<double> binary_cross_entropy_logit_grad(
    std::span<const double> predictions, std::span<const double> labels);

template <class T>
double l2_norm_squared(const BasicParameterSet<T>& params, RoleFilter filter);

/// Sum over feature tensors of squared differences to the anchor.
template <class T>
double sp_penalty(const BasicParameterSet<T>& current,
                  const BasicParameterSet<T>& anchor);

double pretrain_loss(std::span<const double> predictions,
                     std::span<const double> labels,
                     const ParameterSet& params, double lambda_pretrain);

/// BCE + gamma * sp_penalty + gamma * ||head||^2.
template <class T>
double transfer_loss(std::span<const double> predictions,
                     std::span<const double> labels,
                     const BasicParameterSet<T>& current,
                     const BasicParameterSet<T>& anchor, double gamma);

/// Fixed-coefficient variant: BCE + alpha * sp_penalty + beta * ||head||^2.
template <class T>
double legacy_transfer_loss(std::span<const double> predictions,
                            std::span<const double> labels,
                            const BasicParameterSet<T>& current,
                            const BasicParameterSet<T>& anchor, double alpha,
                            double beta);

/// Coefficients of the regularizer gradient added to a data-term gradient.
struct RegularizerCoefficients {
  double l2_all = 0.0;    // weight on ||w||^2 over every parameter
  double sp = 0.0;        // weight on sp_penalty(w, anchor)
  double l2_head = 0.0;   // weight on ||w_head||^2
};

/// grad += d/dw [l2_all*||w||^2 + sp*||w_feat - anchor_feat||^2 +
/// l2_head*||w_head||^2]. `anchor` may be null when sp == 0.
template <class T>
void add_regularizer_grad(const BasicParameterSet<T>& current,
                          const BasicParameterSet<T>* anchor,
                          const RegularizerCoefficients& coeffs,
                          BasicParameterSet<T>& grad);

}  // namespace tgd

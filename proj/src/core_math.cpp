#include "tgd/core_math.hpp"

#include <algorithm>
#include <cmath>
#include <type_traits>

#include "tgd/simd/kernels.hpp"

namespace tgd {

std::string_view role_name(Role role) {
  return role == Role::head ? "head" : "feature";
}

Role parse_role(std::string_view name) {
  if (name == "feature") return Role::feature;
  if (name == "head") return Role::head;
  throw ContractViolation("unknown parameter role '" + std::string(name) + "'");
}

template <class T>
void BasicParameterSet<T>::add(std::string name, BasicTensor<T> tensor,
                               Role role) {
  if (contains(name)) {
    throw ContractViolation("duplicate parameter name '" + name + "'");
  }
  entries_.emplace(std::move(name), Entry{std::move(tensor), role});
}

template <class T>
BasicTensor<T>& BasicParameterSet<T>::at(std::string_view name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw AlignmentError(std::string(name), "no such parameter");
  }
  return it->second.tensor;
}

template <class T>
const BasicTensor<T>& BasicParameterSet<T>::at(std::string_view name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw AlignmentError(std::string(name), "no such parameter");
  }
  return it->second.tensor;
}

template <class T>
Role BasicParameterSet<T>::role(std::string_view name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw AlignmentError(std::string(name), "no such parameter");
  }
  return it->second.role;
}

template <class T>
std::size_t BasicParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_) n += e.tensor.size();
  return n;
}

template <class T>
std::vector<std::string> BasicParameterSet<T>::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, e] : entries_) out.push_back(name);
  return out;
}

template <class T>
BasicParameterSet<T> BasicParameterSet<T>::zeros_like() const {
  BasicParameterSet out;
  for (const auto& [name, e] : entries_) {
    out.add(name, BasicTensor<T>(e.tensor.shape()), e.role);
  }
  return out;
}

template <class T>
void require_aligned(const BasicParameterSet<T>& a,
                     const BasicParameterSet<T>& b) {
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (ia->first != ib->first) {
      const std::string& missing = std::min(ia->first, ib->first);
      throw AlignmentError(missing, "present in only one parameter set");
    }
    if (ia->second.tensor.shape() != ib->second.tensor.shape()) {
      throw AlignmentError(ia->first,
                           "shape " + shape_to_string(ia->second.tensor.shape()) +
                               " vs " + shape_to_string(ib->second.tensor.shape()));
    }
    if (ia->second.role != ib->second.role) {
      throw AlignmentError(ia->first, "role mismatch");
    }
    ++ia;
    ++ib;
  }
  if (ia != a.end()) throw AlignmentError(ia->first, "present in only one parameter set");
  if (ib != b.end()) throw AlignmentError(ib->first, "present in only one parameter set");
}

template <class T>
bool aligned(const BasicParameterSet<T>& a, const BasicParameterSet<T>& b) {
  try {
    require_aligned(a, b);
    return true;
  } catch (const AlignmentError&) {
    return false;
  }
}

namespace {

void check_prediction_inputs(std::span<const double> predictions,
                             std::span<const double> labels) {
  if (predictions.empty()) {
    throw ContractViolation("binary_cross_entropy: empty input");
  }
  if (predictions.size() != labels.size()) {
    throw ContractViolation("binary_cross_entropy: " +
                            std::to_string(predictions.size()) +
                            " predictions vs " + std::to_string(labels.size()) +
                            " labels");
  }
}

template <class T>
double sum_squares(std::span<const T> x) {
  if constexpr (std::is_same_v<T, float>) {
    return simd::kernels().sum_squares(x.data(), x.size());
  } else {
    double acc = 0.0;
    for (T v : x) acc += static_cast<double>(v) * v;
    return acc;
  }
}

template <class T>
double sum_squared_diff(std::span<const T> a, std::span<const T> b) {
  if constexpr (std::is_same_v<T, float>) {
    return simd::kernels().sum_squared_diff(a.data(), b.data(), a.size());
  } else {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = static_cast<double>(a[i]) - b[i];
      acc += d * d;
    }
    return acc;
  }
}

}  // namespace

double binary_cross_entropy(std::span<const double> predictions,
                            std::span<const double> labels) {
  check_prediction_inputs(predictions, labels);
  double total = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double p =
        std::clamp(predictions[i], kPredictionEpsilon, 1.0 - kPredictionEpsilon);
    const double y = labels[i];
    total += -y * std::log(p) - (1.0 - y) * std::log(1.0 - p);
  }
  return total / static_cast<double>(predictions.size());
}

std::vector<double> binary_cross_entropy_logit_grad(
    std::span<const double> predictions, std::span<const double> labels) {
  check_prediction_inputs(predictions, labels);
  const double inv_m = 1.0 / static_cast<double>(predictions.size());
  std::vector<double> grad(predictions.size());
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double p = predictions[i];
    const bool clamped = p < kPredictionEpsilon || p > 1.0 - kPredictionEpsilon;
    grad[i] = clamped ? 0.0 : (p - labels[i]) * inv_m;
  }
  return grad;
}

template <class T>
double l2_norm_squared(const BasicParameterSet<T>& params, RoleFilter filter) {
  double total = 0.0;
  bool any = false;
  for (const auto& [name, e] : params) {
    if (!role_selected(e.role, filter)) continue;
    any = true;
    total += sum_squares<T>(e.tensor.values());
  }
  if (!any) throw ContractViolation("l2_norm_squared: empty selection");
  return total;
}

template <class T>
double sp_penalty(const BasicParameterSet<T>& current,
                  const BasicParameterSet<T>& anchor) {
  require_aligned(current, anchor);
  double total = 0.0;
  auto ia = anchor.begin();
  for (const auto& [name, e] : current) {
    if (e.role == Role::feature) {
      total += sum_squared_diff<T>(e.tensor.values(), ia->second.tensor.values());
    }
    ++ia;
  }
  return total;
}

double pretrain_loss(std::span<const double> predictions,
                     std::span<const double> labels, const ParameterSet& params,
                     double lambda_pretrain) {
  if (lambda_pretrain < 0.0) {
    throw ContractViolation("pretrain_loss: lambda must be nonnegative");
  }
  const double j = binary_cross_entropy(predictions, labels);
  if (lambda_pretrain == 0.0) return j;
  return j + lambda_pretrain * l2_norm_squared(params, RoleFilter::all);
}

template <class T>
double legacy_transfer_loss(std::span<const double> predictions,
                            std::span<const double> labels,
                            const BasicParameterSet<T>& current,
                            const BasicParameterSet<T>& anchor, double alpha,
                            double beta) {
  if (alpha < 0.0 || beta < 0.0) {
    throw ContractViolation("transfer loss coefficients must be nonnegative");
  }
  const double j = binary_cross_entropy(predictions, labels);
  const double sp = sp_penalty(current, anchor);
  const double head = l2_norm_squared(current, RoleFilter::head);
  return j + alpha * sp + beta * head;
}

template <class T>
double transfer_loss(std::span<const double> predictions,
                     std::span<const double> labels,
                     const BasicParameterSet<T>& current,
                     const BasicParameterSet<T>& anchor, double gamma) {
  return legacy_transfer_loss(predictions, labels, current, anchor, gamma, gamma);
}

template <class T>
void add_regularizer_grad(const BasicParameterSet<T>& current,
                          const BasicParameterSet<T>* anchor,
                          const RegularizerCoefficients& coeffs,
                          BasicParameterSet<T>& grad) {
  require_aligned(current, grad);
  if (coeffs.sp != 0.0) {
    if (anchor == nullptr) {
      throw ContractViolation("sp regularizer requires an anchor");
    }
    require_aligned(current, *anchor);
  }
  auto ig = grad.begin();
  for (const auto& [name, e] : current) {
    double w_coeff = coeffs.l2_all;
    if (e.role == Role::head) w_coeff += coeffs.l2_head;
    const bool with_sp = e.role == Role::feature && coeffs.sp != 0.0;
    const T* w = e.tensor.data();
    T* g = ig->second.tensor.data();
    const T* a = with_sp ? anchor->at(name).data() : nullptr;
    for (std::size_t i = 0; i < e.tensor.size(); ++i) {
      double d = 2.0 * w_coeff * w[i];
      if (with_sp) d += 2.0 * coeffs.sp * (static_cast<double>(w[i]) - a[i]);
      g[i] += static_cast<T>(d);
    }
    ++ig;
  }
}

#define TGD_INSTANTIATE(T)                                                    \
  template class BasicParameterSet<T>;                                        \
  template void require_aligned(const BasicParameterSet<T>&,                  \
                                const BasicParameterSet<T>&);                 \
  template bool aligned(const BasicParameterSet<T>&,                          \
                        const BasicParameterSet<T>&);                         \
  template double l2_norm_squared(const BasicParameterSet<T>&, RoleFilter);   \
  template double sp_penalty(const BasicParameterSet<T>&,                     \
                             const BasicParameterSet<T>&);                    \
  template double transfer_loss(std::span<const double>,                      \
                                std::span<const double>,                      \
                                const BasicParameterSet<T>&,                  \
                                const BasicParameterSet<T>&, double);         \
  template double legacy_transfer_loss(                                       \
      std::span<const double>, std::span<const double>,                       \
      const BasicParameterSet<T>&, const BasicParameterSet<T>&, double,       \
      double);                                                                \
  template void add_regularizer_grad(const BasicParameterSet<T>&,             \
                                     const BasicParameterSet<T>*,             \
                                     const RegularizerCoefficients&,          \
                                     BasicParameterSet<T>&);

TGD_INSTANTIATE(float)
TGD_INSTANTIATE(double)

#undef TGD_INSTANTIATE

}  // namespace tgd

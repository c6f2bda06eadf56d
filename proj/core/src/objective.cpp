#include "rangevit/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "rangevit/ops.hpp"

namespace rangevit {

namespace {

template <typename T>
void check_logits(const Tensor<T>& logits, const std::vector<int>& labels, const char* op) {
  RV_CHECK(logits.ndim() == 2, std::string(op) + ": logits must be N x K");
  RV_CHECK(logits.dim(0) == static_cast<int64_t>(labels.size()),
           std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
               std::to_string(logits.dim(0)) + " rows");
  const int64_t k = logits.dim(1);
  for (size_t i = 0; i < labels.size(); ++i)
    RV_CHECK(labels[i] >= 0 && labels[i] <= k,
             std::string(op) + ": label " + std::to_string(labels[i]) + " out of range at point " +
                 std::to_string(i));
}

}  // namespace

template <typename T>
Tensor<T> focal_loss(const Tensor<T>& logits, const std::vector<int>& labels, double gamma,
                     bool* all_ignored) {
  check_logits(logits, labels, "focal_loss");
  RV_CHECK(gamma >= 0.0, "focal_loss: gamma must be non-negative");

  std::vector<int> scored_rows, classes;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] > 0) {
      scored_rows.push_back(static_cast<int>(i));
      classes.push_back(labels[i] - 1);
    }
  }
  if (all_ignored) *all_ignored = scored_rows.empty();
  if (scored_rows.empty()) return Tensor<T>::scalar(T(0));

  Tensor<T> lp = log_softmax(logits);
  Tensor<T> lp_t = gather_rows(take_rows(lp, scored_rows), classes);
  if (gamma == 0.0) return neg(mean(lp_t));
  // (1 - p_t)^gamma
  Tensor<T> focal_w = pow_scalar(add_scalar(neg(exp(lp_t)), T(1)), static_cast<T>(gamma));
  return neg(mean(mul(focal_w, lp_t)));
}

namespace {

// gradient of the Lovasz extension of the Jaccard loss for ground-truth
// indicators sorted by descending error
std::vector<double> lovasz_grad(const std::vector<int>& gt_sorted) {
  const size_t n = gt_sorted.size();
  double gts = std::accumulate(gt_sorted.begin(), gt_sorted.end(), 0.0);
  std::vector<double> jaccard(n), grad(n);
  double cum_gt = 0.0, cum_not = 0.0;
  for (size_t i = 0; i < n; ++i) {
    cum_gt += gt_sorted[i];
    cum_not += 1 - gt_sorted[i];
    const double intersection = gts - cum_gt;
    const double uni = gts + cum_not;
    jaccard[i] = 1.0 - intersection / uni;
  }
  grad[0] = jaccard[0];
  for (size_t i = 1; i < n; ++i) grad[i] = jaccard[i] - jaccard[i - 1];
  return grad;
}

}  // namespace

template <typename T>
Tensor<T> lovasz_softmax(const Tensor<T>& probs, const std::vector<int>& labels,
                         bool* no_scored) {
  check_logits(probs, labels, "lovasz_softmax");
  const int64_t k = probs.dim(1);

  std::vector<int> scored_rows;
  std::vector<uint8_t> present(k, 0);
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] > 0) {
      scored_rows.push_back(static_cast<int>(i));
      present[labels[i] - 1] = 1;
    }
  }
  if (no_scored) *no_scored = scored_rows.empty();
  if (scored_rows.empty()) return Tensor<T>::scalar(T(0));
  const int64_t s = static_cast<int64_t>(scored_rows.size());
  const int n_present = static_cast<int>(std::count(present.begin(), present.end(), 1));

  // The loss is linear in the probabilities once the sort order is fixed, so
  // a single custom node carries the exact coefficient matrix.
  auto pv = probs.value();
  std::vector<T> coeff(probs.numel(), T(0));
  double loss_val = 0.0;
  std::vector<double> errors(s);
  std::vector<int> order(s);
  for (int64_t c = 0; c < k; ++c) {
    if (!present[c]) continue;
    for (int64_t i = 0; i < s; ++i) {
      const int row = scored_rows[i];
      const double p = pv[static_cast<int64_t>(row) * k + c];
      errors[i] = labels[row] - 1 == c ? 1.0 - p : p;
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return errors[a] > errors[b]; });
    std::vector<int> gt_sorted(s);
    for (int64_t i = 0; i < s; ++i) gt_sorted[i] = labels[scored_rows[order[i]]] - 1 == c ? 1 : 0;
    const std::vector<double> g = lovasz_grad(gt_sorted);
    for (int64_t i = 0; i < s; ++i) {
      loss_val += errors[order[i]] * g[i];
      // d(error)/d(p) is -1 for the true class, +1 otherwise
      const int row = scored_rows[order[i]];
      const double sign = gt_sorted[i] ? -1.0 : 1.0;
      coeff[static_cast<int64_t>(row) * k + c] += static_cast<T>(sign * g[i] / n_present);
    }
  }
  loss_val /= n_present;

  Tensor<T> out = Tensor<T>::make_op({1}, {probs});
  out.value_mut()[0] = static_cast<T>(loss_val);
  auto pn = probs.node();
  out.set_backward([pn, coeff = std::move(coeff)](detail::TensorNode<T>& self) {
    if (!pn->requires_grad) return;
    const T g = self.grad[0];
    for (size_t i = 0; i < coeff.size(); ++i) pn->grad[i] += g * coeff[i];
  });
  return out;
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& logits, const std::vector<int>& labels, double gamma) {
  Tensor<T> focal = focal_loss(logits, labels, gamma);
  Tensor<T> lovasz = lovasz_softmax(softmax(logits), labels);
  return add(focal, lovasz);
}

#define RV_INSTANTIATE_OBJECTIVE(T)                                                              \
  template Tensor<T> focal_loss(const Tensor<T>&, const std::vector<int>&, double, bool*);       \
  template Tensor<T> lovasz_softmax(const Tensor<T>&, const std::vector<int>&, bool*);           \
  template Tensor<T> total_loss(const Tensor<T>&, const std::vector<int>&, double);

RV_INSTANTIATE_OBJECTIVE(float)
RV_INSTANTIATE_OBJECTIVE(double)

#undef RV_INSTANTIATE_OBJECTIVE

ConfusionMatrix::ConfusionMatrix(int num_classes) : k_(num_classes) {
  RV_CHECK(num_classes > 0, "ConfusionMatrix: need at least one class");
  counts_.assign(static_cast<int64_t>(k_) * k_, 0);
}

void ConfusionMatrix::add(int true_label, int predicted_label) {
  if (true_label == 0) return;
  RV_CHECK(true_label >= 1 && true_label <= k_,
           "ConfusionMatrix: true label " + std::to_string(true_label) + " out of range");
  RV_CHECK(predicted_label >= 1 && predicted_label <= k_,
           "ConfusionMatrix: predicted label " + std::to_string(predicted_label) +
               " out of range");
  counts_[static_cast<int64_t>(true_label - 1) * k_ + (predicted_label - 1)]++;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  RV_CHECK(other.k_ == k_, "ConfusionMatrix: class count mismatch in merge");
  for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

int64_t ConfusionMatrix::at(int true_label, int predicted_label) const {
  RV_CHECK(true_label >= 1 && true_label <= k_ && predicted_label >= 1 && predicted_label <= k_,
           "ConfusionMatrix: label out of range");
  return counts_[static_cast<int64_t>(true_label - 1) * k_ + (predicted_label - 1)];
}

int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), int64_t{0});
}

IouReport miou(const ConfusionMatrix& cm) {
  const int k = cm.num_classes();
  IouReport rep;
  rep.per_class.assign(k, std::numeric_limits<double>::quiet_NaN());
  rep.valid.assign(k, false);
  double acc = 0.0;
  int n_valid = 0;
  for (int c = 1; c <= k; ++c) {
    const int64_t tp = cm.at(c, c);
    int64_t fp = 0, fn = 0;
    for (int o = 1; o <= k; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const int64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    rep.per_class[c - 1] = static_cast<double>(tp) / static_cast<double>(denom);
    rep.valid[c - 1] = true;
    acc += rep.per_class[c - 1];
    n_valid++;
  }
  if (n_valid > 0) {
    rep.mean = acc / n_valid;
    rep.defined = true;
  } else {
    rep.mean = std::numeric_limits<double>::quiet_NaN();
  }
  return rep;
}

}  // namespace rangevit

#pragma once

#include <cstdint>
#include <vector>

#include "rangevit/tensor.hpp"

namespace rangevit {

// Labels are in {0..K}; 0 is the ignore class and never scored. Logit column
// j corresponds to label j + 1.

// mean over scored points of -(1 - p_t)^gamma * log(p_t). With every label
// ignored the loss is a constant zero and *all_ignored is set when provided.
template <typename T>
Tensor<T> focal_loss(const Tensor<T>& logits, const std::vector<int>& labels, double gamma = 2.0,
                     bool* all_ignored = nullptr);

// Lovasz extension of the Jaccard loss on softmax probabilities, averaged over
// the classes present among the scored labels. The sort permutation is fixed
// data in the backward pass.
template <typename T>
Tensor<T> lovasz_softmax(const Tensor<T>& probs, const std::vector<int>& labels,
                         bool* no_scored = nullptr);

// focal + lovasz, unweighted sum
template <typename T>
Tensor<T> total_loss(const Tensor<T>& logits, const std::vector<int>& labels,
                     double gamma = 2.0);

extern template Tensor<float> focal_loss(const Tensor<float>&, const std::vector<int>&, double, bool*);
extern template Tensor<double> focal_loss(const Tensor<double>&, const std::vector<int>&, double, bool*);
extern template Tensor<float> lovasz_softmax(const Tensor<float>&, const std::vector<int>&, bool*);
extern template Tensor<double> lovasz_softmax(const Tensor<double>&, const std::vector<int>&, bool*);
extern template Tensor<float> total_loss(const Tensor<float>&, const std::vector<int>&, double);
extern template Tensor<double> total_loss(const Tensor<double>&, const std::vector<int>&, double);

// K x K confusion counts over scored points; rows index the true label,
// columns the prediction (both 1-based labels stored 0-based).
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  void add(int true_label, int predicted_label);  // true_label 0 is skipped
  void merge(const ConfusionMatrix& other);
  int64_t at(int true_label, int predicted_label) const;
  int num_classes() const { return k_; }
  int64_t total() const;

 private:
  int k_;
  std::vector<int64_t> counts_;
};

// Per-class intersection over union. Classes whose TP + FP + FN is zero are
// excluded from the mean; with no valid class the mean is undefined.
struct IouReport {
  std::vector<double> per_class;  // NaN for excluded classes
  std::vector<bool> valid;
  double mean = 0.0;
  bool defined = false;
};
IouReport miou(const ConfusionMatrix& cm);

}  // namespace rangevit

#pragma once

#include <memory>

#include "fusion/common.hpp"

namespace fusion {

// Deterministic feature expansion shared by the linear/logistic learners.
struct Basis {
  bool intercept = true;
  bool interactions = false;  // pairwise products including squares
  Vec expand(const Vec& x) const;
  int dim(int p) const;
};

class Regressor {
 public:
  virtual ~Regressor() = default;
  virtual void fit(const Mat& X, const Vec& y, const Vec& w) = 0;
  virtual double predict(const Vec& x) const = 0;
};

using RegressorFactory = std::function<std::unique_ptr<Regressor>()>;

// Weighted least squares on an expanded basis; falls back to a ridge penalty
// when the normal equations are near-singular.
class LinearModel : public Regressor {
 public:
  explicit LinearModel(Basis basis = {}) : basis_(basis) {}
  void fit(const Mat& X, const Vec& y, const Vec& w) override;
  double predict(const Vec& x) const override;
  const Vec& coefficients() const { return coef_; }
  bool used_ridge_fallback() const { return ridge_fallback_; }

 private:
  Basis basis_;
  Vec coef_;
  bool ridge_fallback_ = false;
};

// Weighted logistic regression via IRLS; predictions trimmed away from {0,1}.
class LogisticModel : public Regressor {
 public:
  explicit LogisticModel(Basis basis = {}, double trim = 1e-6) : basis_(basis), trim_(trim) {}
  void fit(const Mat& X, const Vec& y, const Vec& w) override;
  double predict(const Vec& x) const override;
  const Vec& coefficients() const { return coef_; }

 private:
  Basis basis_;
  double trim_;
  Vec coef_;
};

inline double normal_scale_bandwidth(double sd, std::size_t n) {
  return 1.06 * sd * std::pow(static_cast<double>(n), -0.2);
}

// Nadaraya-Watson with a product Gaussian kernel and per-dimension
// normal-scale bandwidths. max_train caps the retained training sample
// (deterministic stride subsample) to bound prediction cost.
class KernelRegression : public Regressor {
 public:
  explicit KernelRegression(std::size_t max_train = 1024) : max_train_(max_train) {}
  void fit(const Mat& X, const Vec& y, const Vec& w) override;
  double predict(const Vec& x) const override;

 private:
  std::size_t max_train_;
  Mat X_;
  Vec y_, w_, h_;
  double fallback_ = 0.0;  // weighted mean, used when all kernel mass vanishes
};

// Multivariate product-kernel density estimate; when asked, also the partial
// derivative with respect to the last coordinate (Gaussian kernel derivative).
class Kde {
 public:
  explicit Kde(std::size_t max_train = 1024) : max_train_(max_train) {}
  void fit(const Mat& X, const Vec& w);
  double density(const Vec& x) const;
  double ddensity_dlast(const Vec& x) const;
  int dim() const { return static_cast<int>(X_.cols()); }
  const Vec& bandwidths() const { return h_; }

 private:
  std::size_t max_train_;
  Mat X_;
  Vec w_, h_;
  double total_w_ = 0.0;
};

// Convex stack over component learners; weights chosen by 5-fold
// cross-validated squared error, projected onto the simplex.
class EnsembleStack : public Regressor {
 public:
  explicit EnsembleStack(std::vector<RegressorFactory> library) : library_(std::move(library)) {}
  void fit(const Mat& X, const Vec& y, const Vec& w) override;
  double predict(const Vec& x) const override;
  const Vec& weights() const { return alpha_; }

 private:
  std::vector<RegressorFactory> library_;
  std::vector<std::unique_ptr<Regressor>> fitted_;
  Vec alpha_;
};

// Default library matching the built-in learner set: linear model with
// pairwise interactions plus kernel regression.
std::vector<RegressorFactory> default_library();

}  // namespace fusion

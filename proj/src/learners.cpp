#include "fusion/learners.hpp"

#include <algorithm>
#include <cmath>

namespace fusion {

Vec Basis::expand(const Vec& x) const {
  int p = static_cast<int>(x.size());
  Vec out(dim(p));
  int pos = 0;
  if (intercept) out(pos++) = 1.0;
  for (int i = 0; i < p; ++i) out(pos++) = x(i);
  if (interactions)
    for (int i = 0; i < p; ++i)
      for (int j = i; j < p; ++j) out(pos++) = x(i) * x(j);
  return out;
}

int Basis::dim(int p) const {
  int n = p + (intercept ? 1 : 0);
  if (interactions) n += p * (p + 1) / 2;
  return n;
}

namespace {

Mat expand_all(const Basis& basis, const Mat& X) {
  Mat out(X.rows(), basis.dim(static_cast<int>(X.cols())));
  for (Eigen::Index i = 0; i < X.rows(); ++i) out.row(i) = basis.expand(X.row(i)).transpose();
  return out;
}

Vec weighted_sd(const Mat& X, const Vec& w) {
  double sw = w.sum();
  Vec mu = (X.transpose() * w) / sw;
  Vec sd(X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      double c = X(i, j) - mu(j);
      acc += w(i) * c * c;
    }
    sd(j) = std::sqrt(acc / sw);
  }
  return sd;
}

// Deterministic stride subsample of row indices down to cap elements.
std::vector<Eigen::Index> stride_subsample(Eigen::Index n, std::size_t cap) {
  std::vector<Eigen::Index> idx;
  if (static_cast<std::size_t>(n) <= cap) {
    idx.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) idx[i] = i;
    return idx;
  }
  idx.reserve(cap);
  for (std::size_t t = 0; t < cap; ++t)
    idx.push_back(static_cast<Eigen::Index>((t * static_cast<std::size_t>(n)) / cap));
  return idx;
}

Vec bandwidths_for(const Mat& X, const Vec& w) {
  Vec sd = weighted_sd(X, w);
  Vec h(X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    double s = sd(j);
    if (s <= 0.0) s = 1e-12;  // degenerate column: effectively a point mass
    h(j) = normal_scale_bandwidth(s, static_cast<std::size_t>(X.rows()));
  }
  return h;
}

}  // namespace

void LinearModel::fit(const Mat& X, const Vec& y, const Vec& w) {
  Mat Phi = expand_all(basis_, X);
  Mat A = Phi.transpose() * w.asDiagonal() * Phi;
  Vec b = Phi.transpose() * (w.array() * y.array()).matrix();
  Eigen::LDLT<Mat> ldlt(A);
  ridge_fallback_ = false;
  if (ldlt.info() == Eigen::Success) {
    coef_ = ldlt.solve(b);
    double resid = (A * coef_ - b).norm();
    if (resid <= 1e-6 * (1.0 + b.norm())) return;
  }
  ridge_fallback_ = true;
  double lambda = 1e-8 * (1.0 + A.diagonal().mean());
  Mat Ar = A + lambda * Mat::Identity(A.rows(), A.cols());
  coef_ = Ar.ldlt().solve(b);
}

double LinearModel::predict(const Vec& x) const { return basis_.expand(x).dot(coef_); }

void LogisticModel::fit(const Mat& X, const Vec& y, const Vec& w) {
  Mat Phi = expand_all(basis_, X);
  coef_ = Vec::Zero(Phi.cols());
  for (int iter = 0; iter < 50; ++iter) {
    Vec eta = Phi * coef_;
    Vec p(eta.size()), v(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      double pi = 1.0 / (1.0 + std::exp(-eta(i)));
      pi = std::clamp(pi, 1e-9, 1.0 - 1e-9);
      p(i) = pi;
      v(i) = w(i) * pi * (1.0 - pi);
    }
    Vec grad = Phi.transpose() * (w.array() * (y - p).array()).matrix();
    Mat H = Phi.transpose() * v.asDiagonal() * Phi;
    H += 1e-10 * Mat::Identity(H.rows(), H.cols());
    Vec step = H.ldlt().solve(grad);
    coef_ += step;
    if (step.norm() < 1e-10 * (1.0 + coef_.norm())) break;
  }
}

double LogisticModel::predict(const Vec& x) const {
  double eta = basis_.expand(x).dot(coef_);
  double p = 1.0 / (1.0 + std::exp(-eta));
  return std::clamp(p, trim_, 1.0 - trim_);
}

void KernelRegression::fit(const Mat& X, const Vec& y, const Vec& w) {
  auto idx = stride_subsample(X.rows(), max_train_);
  X_.resize(static_cast<Eigen::Index>(idx.size()), X.cols());
  y_.resize(static_cast<Eigen::Index>(idx.size()));
  w_.resize(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t t = 0; t < idx.size(); ++t) {
    X_.row(static_cast<Eigen::Index>(t)) = X.row(idx[t]);
    y_(static_cast<Eigen::Index>(t)) = y(idx[t]);
    w_(static_cast<Eigen::Index>(t)) = w(idx[t]);
  }
  h_ = bandwidths_for(X_, w_);
  fallback_ = (w_.array() * y_.array()).sum() / w_.sum();
}

double KernelRegression::predict(const Vec& x) const {
  double num = 0.0, den = 0.0;
  for (Eigen::Index i = 0; i < X_.rows(); ++i) {
    double q = 0.0;
    for (Eigen::Index j = 0; j < X_.cols(); ++j) {
      double u = (x(j) - X_(i, j)) / h_(j);
      q += u * u;
    }
    double kv = std::exp(-0.5 * q) * w_(i);
    num += kv * y_(i);
    den += kv;
  }
  if (den <= 1e-300) return fallback_;
  return num / den;
}

void Kde::fit(const Mat& X, const Vec& w) {
  auto idx = stride_subsample(X.rows(), max_train_);
  X_.resize(static_cast<Eigen::Index>(idx.size()), X.cols());
  w_.resize(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t t = 0; t < idx.size(); ++t) {
    X_.row(static_cast<Eigen::Index>(t)) = X.row(idx[t]);
    w_(static_cast<Eigen::Index>(t)) = w(idx[t]);
  }
  h_ = bandwidths_for(X_, w_);
  total_w_ = w_.sum();
}

double Kde::density(const Vec& x) const {
  double acc = 0.0;
  double norm = 1.0;
  for (Eigen::Index j = 0; j < X_.cols(); ++j) norm *= h_(j) * std::sqrt(2.0 * M_PI);
  for (Eigen::Index i = 0; i < X_.rows(); ++i) {
    double q = 0.0;
    for (Eigen::Index j = 0; j < X_.cols(); ++j) {
      double u = (x(j) - X_(i, j)) / h_(j);
      q += u * u;
    }
    acc += w_(i) * std::exp(-0.5 * q);
  }
  return acc / (total_w_ * norm);
}

double Kde::ddensity_dlast(const Vec& x) const {
  double acc = 0.0;
  double norm = 1.0;
  for (Eigen::Index j = 0; j < X_.cols(); ++j) norm *= h_(j) * std::sqrt(2.0 * M_PI);
  Eigen::Index last = X_.cols() - 1;
  for (Eigen::Index i = 0; i < X_.rows(); ++i) {
    double q = 0.0;
    for (Eigen::Index j = 0; j < X_.cols(); ++j) {
      double u = (x(j) - X_(i, j)) / h_(j);
      q += u * u;
    }
    double ulast = (x(last) - X_(i, last)) / h_(last);
    acc += w_(i) * std::exp(-0.5 * q) * (-ulast / h_(last));
  }
  return acc / (total_w_ * norm);
}

namespace {

// Euclidean projection onto the probability simplex.
Vec project_simplex(Vec v) {
  std::vector<double> u(v.data(), v.data() + v.size());
  std::sort(u.begin(), u.end(), std::greater<double>());
  double css = 0.0, tau = 0.0;
  int rho = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    css += u[i];
    double t = (css - 1.0) / static_cast<double>(i + 1);
    if (u[i] - t > 0) {
      rho = static_cast<int>(i + 1);
      tau = t;
    }
  }
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = std::max(v(i) - tau, 0.0);
  return v;
}

}  // namespace

void EnsembleStack::fit(const Mat& X, const Vec& y, const Vec& w) {
  const int L = static_cast<int>(library_.size());
  const Eigen::Index n = X.rows();
  const int folds = n >= 10 ? 5 : 2;

  // Out-of-fold prediction matrix.
  Mat P = Mat::Zero(n, L);
  for (int f = 0; f < folds; ++f) {
    std::vector<Eigen::Index> tr, te;
    for (Eigen::Index i = 0; i < n; ++i) (static_cast<int>(i % folds) == f ? te : tr).push_back(i);
    if (tr.empty() || te.empty()) continue;
    Mat Xtr(static_cast<Eigen::Index>(tr.size()), X.cols());
    Vec ytr(static_cast<Eigen::Index>(tr.size())), wtr(static_cast<Eigen::Index>(tr.size()));
    for (std::size_t t = 0; t < tr.size(); ++t) {
      Xtr.row(static_cast<Eigen::Index>(t)) = X.row(tr[t]);
      ytr(static_cast<Eigen::Index>(t)) = y(tr[t]);
      wtr(static_cast<Eigen::Index>(t)) = w(tr[t]);
    }
    for (int l = 0; l < L; ++l) {
      auto reg = library_[l]();
      reg->fit(Xtr, ytr, wtr);
      for (Eigen::Index i : te) P(i, l) = reg->predict(X.row(i));
    }
  }

  // Minimize weighted squared error over the simplex by projected gradient.
  Mat A = P.transpose() * w.asDiagonal() * P;
  Vec b = P.transpose() * (w.array() * y.array()).matrix();
  alpha_ = Vec::Constant(L, 1.0 / L);
  double step = 1.0 / std::max(A.norm(), 1e-12);
  for (int it = 0; it < 500; ++it) {
    Vec g = A * alpha_ - b;
    Vec next = project_simplex(alpha_ - step * g);
    if ((next - alpha_).norm() < 1e-12) {
      alpha_ = next;
      break;
    }
    alpha_ = next;
  }

  fitted_.clear();
  for (int l = 0; l < L; ++l) {
    fitted_.push_back(library_[l]());
    fitted_.back()->fit(X, y, w);
  }
}

double EnsembleStack::predict(const Vec& x) const {
  double out = 0.0;
  for (std::size_t l = 0; l < fitted_.size(); ++l) out += alpha_(static_cast<Eigen::Index>(l)) * fitted_[l]->predict(x);
  return out;
}

std::vector<RegressorFactory> default_library() {
  return {
      []() { return std::make_unique<LinearModel>(Basis{true, true}); },
      []() { return std::make_unique<KernelRegression>(); },
  };
}

}  // namespace fusion

#include "fprb/probes.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "fprb/errors.hpp"
#include "fprb/parallel.hpp"
#include "fprb/rng.hpp"

namespace fprb {

std::size_t ProbeDataset::positives() const { return static_cast<std::size_t>(std::count(y.begin(), y.end(), 1)); }

void ProbeDataset::validate() const {
  require(X.rows() == static_cast<Eigen::Index>(y.size()), "probe: label count differs from row count");
  require(X.rows() >= 3, "probe: need at least three cases");
  require(X.allFinite(), "probe: non-finite hidden states");
  for (int v : y) require(v == 0 || v == 1, "probe: labels must be 0 or 1");
  const auto pos = positives(), neg = y.size() - pos;
  require(pos > 0 && neg > 0, "probe: single-class dataset (" + std::to_string(pos) + " flips of " +
                                  std::to_string(y.size()) + ")");
  require(pos >= 2 && neg >= 2, "probe: leave-one-out needs at least two cases of each class");
}

std::vector<int> build_flip_labels(const std::vector<bool>& source, const std::vector<bool>& target) {
  require(source.size() == target.size(), "flip labels: unpaired correctness vectors");
  std::vector<int> y(source.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = source[i] != target[i] ? 1 : 0;
  return y;
}

std::vector<int> build_flip_labels(std::span<const CaseOutcome> outcomes, Condition source, Condition target,
                                   const ScoringRule& rule) {
  const auto a = correctness(outcomes, source, rule);
  const auto b = correctness(outcomes, target, rule);
  std::vector<int> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] != b[i] ? 1 : 0;
  return y;
}

ProbeDataset assemble_probe_dataset(std::span<const ActivationDump> dumps, std::span<const CaseOutcome> outcomes,
                                    Condition source, Condition target, const ScoringRule& rule) {
  require(!dumps.empty(), "probe: no dumps");
  std::map<std::string, const CaseOutcome*> by_case;
  for (const auto& o : outcomes) by_case[o.case_id] = &o;
  ProbeDataset d;
  d.layer = dumps.front().layer;
  d.transition = std::string(to_string(source)) + "->" + std::string(to_string(target));
  const auto D = dumps.front().dim();
  d.X.resize(static_cast<Eigen::Index>(dumps.size()), D);
  for (std::size_t i = 0; i < dumps.size(); ++i) {
    const auto& dump = dumps[i];
    require(dump.condition == source, "probe: dump condition differs from the source condition", dump.case_id);
    require(dump.layer == d.layer && dump.dim() == D, "probe: dumps mix layers or widths", dump.case_id);
    auto it = by_case.find(dump.case_id);
    if (it == by_case.end()) fail(ErrorKind::validation, "probe: no outcome for case " + dump.case_id, dump.case_id);
    d.X.row(static_cast<Eigen::Index>(i)) = dump.residuals.row(dump.decision_index).cast<double>();
    d.y.push_back(is_correct(*it->second, source, rule) != is_correct(*it->second, target, rule) ? 1 : 0);
    d.case_ids.push_back(dump.case_id);
  }
  return d;
}

namespace {

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

std::vector<double> class_weights(std::span<const int> y, bool balanced) {
  const auto n = static_cast<double>(y.size());
  const auto pos = static_cast<double>(std::count(y.begin(), y.end(), 1));
  const double wp = balanced ? n / (2.0 * pos) : 1.0;
  const double wn = balanced ? n / (2.0 * (n - pos)) : 1.0;
  std::vector<double> w(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) w[i] = y[i] == 1 ? wp : wn;
  return w;
}

}  // namespace

Eigen::VectorXd fit_logistic(const Eigen::MatrixXd& Z, std::span<const int> y, std::span<const double> weights,
                             double l2, double tolerance, int max_iterations) {
  const auto m = Z.rows(), p = Z.cols();
  require(static_cast<std::size_t>(m) == y.size() && y.size() == weights.size(), "logistic: size mismatch");
  require(l2 >= 0.0, "logistic: negative penalty");
  Eigen::MatrixXd A(m, p + 1);
  A.col(0).setOnes();
  A.rightCols(p) = Z;
  Eigen::VectorXd yv(m), wv(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    yv(i) = y[static_cast<std::size_t>(i)];
    wv(i) = weights[static_cast<std::size_t>(i)];
  }
  Eigen::VectorXd penalty = Eigen::VectorXd::Constant(p + 1, l2);
  penalty(0) = 0.0;

  auto objective = [&](const Eigen::VectorXd& theta) {
    const Eigen::VectorXd z = A * theta;
    double f = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) f += wv(i) * (softplus(z(i)) - yv(i) * z(i));
    return f + 0.5 * theta.cwiseProduct(penalty).dot(theta);
  };

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(p + 1);
  double f = objective(theta);
  for (int it = 0; it < max_iterations; ++it) {
    const Eigen::VectorXd z = A * theta;
    Eigen::VectorXd s(m), curv(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      s(i) = sigmoid(z(i));
      curv(i) = wv(i) * s(i) * (1.0 - s(i));
    }
    const Eigen::VectorXd g = A.transpose() * (wv.cwiseProduct(s - yv)) + penalty.cwiseProduct(theta);
    if (g.norm() < tolerance) break;
    Eigen::MatrixXd H = A.transpose() * curv.asDiagonal() * A;
    H.diagonal() += penalty + Eigen::VectorXd::Constant(p + 1, 1e-12);
    const Eigen::VectorXd step = H.ldlt().solve(g);
    const double slope = g.dot(step);
    double t = 1.0;
    Eigen::VectorXd next = theta - step;
    double fn = objective(next);
    for (int k = 0; k < 60 && fn > f - 1e-4 * t * slope; ++k) {
      t *= 0.5;
      next = theta - t * step;
      fn = objective(next);
    }
    if (!(fn <= f)) break;
    theta = next;
    f = fn;
  }
  return theta;
}

LoocvProbe::LoocvProbe(const Eigen::MatrixXd& X, const ProbeOptions& options) : options_(options) {
  const auto n = X.rows(), D = X.cols();
  require(n >= 3, "probe: need at least three cases");
  folds_.resize(static_cast<std::size_t>(n));
  parallel_for(folds_.size(), options.workers, [&](std::size_t held) {
    const auto h = static_cast<Eigen::Index>(held);
    Eigen::MatrixXd train(n - 1, D);
    for (Eigen::Index i = 0, r = 0; i < n; ++i)
      if (i != h) train.row(r++) = X.row(i);
    Eigen::RowVectorXd test = X.row(h);
    if (options.standardize) {
      const Eigen::RowVectorXd mu = train.colwise().mean();
      train.rowwise() -= mu;
      Eigen::RowVectorXd sd = (train.array().square().colwise().sum() / static_cast<double>(n - 1)).sqrt();
      for (Eigen::Index c = 0; c < D; ++c)
        if (!(sd(c) > 0.0)) sd(c) = 1.0;
      train.array().rowwise() /= sd.array();
      test = ((test - mu).array() / sd.array()).matrix();
    }
    Fold& f = folds_[held];
    if (D <= n - 1) {
      f.design = train;
      f.test = test.transpose();
      return;
    }
    // Wide data: the optimum lies in the row space of the training set, so
    // solve in the eigenbasis of the Gram matrix instead.
    const Eigen::MatrixXd K = train * train.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(K);
    const Eigen::VectorXd& lambda = eig.eigenvalues();
    const double cutoff = std::max(lambda.maxCoeff(), 0.0) * 1e-12;
    std::vector<Eigen::Index> keep;
    for (Eigen::Index j = 0; j < lambda.size(); ++j)
      if (lambda(j) > cutoff) keep.push_back(j);
    const auto r = static_cast<Eigen::Index>(keep.size());
    f.design.resize(n - 1, r);
    f.test.resize(r);
    const Eigen::VectorXd cross = train * test.transpose();
    for (Eigen::Index c = 0; c < r; ++c) {
      const auto j = keep[static_cast<std::size_t>(c)];
      const double root = std::sqrt(lambda(j));
      f.design.col(c) = eig.eigenvectors().col(j) * root;
      f.test(c) = eig.eigenvectors().col(j).dot(cross) / root;
    }
  });
}

Eigen::VectorXd LoocvProbe::scores(std::span<const int> y) const {
  require(y.size() == folds_.size(), "probe: label count differs from row count");
  Eigen::VectorXd out(static_cast<Eigen::Index>(folds_.size()));
  std::vector<int> train_y(y.size() - 1);
  for (std::size_t held = 0; held < folds_.size(); ++held) {
    for (std::size_t i = 0, r = 0; i < y.size(); ++i)
      if (i != held) train_y[r++] = y[i];
    const auto w = class_weights(train_y, options_.balanced);
    const auto& f = folds_[held];
    const Eigen::VectorXd theta =
        fit_logistic(f.design, train_y, w, options_.l2, options_.tolerance, options_.max_iterations);
    out(static_cast<Eigen::Index>(held)) = theta(0) + f.test.dot(theta.tail(theta.size() - 1));
  }
  return out;
}

namespace {

void require_two_classes(std::span<const double> scores, std::span<const int> y) {
  require(scores.size() == y.size(), "metric: score and label counts differ");
  const auto pos = std::count(y.begin(), y.end(), 1);
  require(pos > 0 && pos < static_cast<std::ptrdiff_t>(y.size()), "metric: labels contain a single class");
}

}  // namespace

double roc_auc(std::span<const double> scores, std::span<const int> y) {
  require_two_classes(scores, y);
  const auto n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (auto k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (y[i] == 1) {
      pos += 1.0;
      rank_sum += rank[i];
    }
  const double neg = static_cast<double>(n) - pos;
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double pr_auc(std::span<const double> scores, std::span<const int> y) {
  require_two_classes(scores, y);
  const auto n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const auto total_pos = static_cast<double>(std::count(y.begin(), y.end(), 1));
  // One operating point per distinct score threshold.
  std::vector<double> recall, precision;
  double tp = 0.0, taken = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      tp += y[order[j]] == 1 ? 1.0 : 0.0;
      taken += 1.0;
      ++j;
    }
    recall.push_back(tp / total_pos);
    precision.push_back(tp / taken);
    i = j;
  }
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double area = 0.0, prev = 0.0;
  for (std::size_t k = 0; k < recall.size(); ++k) {
    area += (recall[k] - prev) * precision[k];
    prev = recall[k];
  }
  return area;
}

ProbeResult train_loocv(const ProbeDataset& data, const ProbeOptions& options, std::uint64_t seed) {
  data.validate();
  const LoocvProbe probe(data.X, options);
  const Eigen::VectorXd s = probe.scores(data.y);
  ProbeResult r;
  r.layer = data.layer;
  r.transition = data.transition;
  r.n = data.y.size();
  r.positives = data.positives();
  r.scores.assign(s.data(), s.data() + s.size());
  r.roc_auc = roc_auc(r.scores, data.y);
  r.pr_auc = pr_auc(r.scores, data.y);
  r.prevalence = static_cast<double>(r.positives) / static_cast<double>(r.n);
  r.seed = seed;
  r.l2 = options.l2;
  r.standardized = options.standardize;
  return r;
}

ProbeResult permutation_test(const ProbeDataset& data, std::size_t iterations, std::uint64_t seed,
                             const ProbeOptions& options) {
  data.validate();
  require(iterations >= 1, "permutation test needs at least one iteration");
  const LoocvProbe probe(data.X, options);
  const Eigen::VectorXd s = probe.scores(data.y);
  ProbeResult r;
  r.layer = data.layer;
  r.transition = data.transition;
  r.n = data.y.size();
  r.positives = data.positives();
  r.scores.assign(s.data(), s.data() + s.size());
  r.roc_auc = roc_auc(r.scores, data.y);
  r.pr_auc = pr_auc(r.scores, data.y);
  r.prevalence = static_cast<double>(r.positives) / static_cast<double>(r.n);
  r.seed = seed;
  r.l2 = options.l2;
  r.standardized = options.standardize;
  r.iterations = iterations;

  std::vector<char> roc_hit(iterations), pr_hit(iterations);
  parallel_for(iterations, options.workers, [&](std::size_t i) {
    Stream stream(seed, "probe_perm", i);
    std::vector<int> y = data.y;
    shuffle(y, stream);
    const Eigen::VectorXd ps = probe.scores(y);
    const std::span<const double> sp(ps.data(), static_cast<std::size_t>(ps.size()));
    roc_hit[i] = roc_auc(sp, y) >= r.roc_auc;
    pr_hit[i] = pr_auc(sp, y) >= r.pr_auc;
  });
  const auto denom = static_cast<double>(iterations + 1);
  r.p_roc = (1.0 + static_cast<double>(std::count(roc_hit.begin(), roc_hit.end(), 1))) / denom;
  r.p_pr = (1.0 + static_cast<double>(std::count(pr_hit.begin(), pr_hit.end(), 1))) / denom;
  return r;
}

void to_json(nlohmann::json& j, const ProbeResult& r) {
  j = nlohmann::json{{"layer", r.layer},
                     {"transition", r.transition},
                     {"n", r.n},
                     {"positives", r.positives},
                     {"roc_auc", r.roc_auc},
                     {"pr_auc", r.pr_auc},
                     {"prevalence", r.prevalence},
                     {"p_roc", r.p_roc},
                     {"p_pr", r.p_pr},
                     {"iterations", r.iterations},
                     {"seed", r.seed},
                     {"l2", r.l2},
                     {"standardized", r.standardized},
                     {"scores", r.scores}};
}

}  // namespace fprb

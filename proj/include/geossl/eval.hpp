#pragma once

// Downstream evaluation: PCA, stratified split, multinomial logistic probe,
// macro-F1 / confusion, and seed-aggregated run comparison.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "geossl/rng.hpp"

namespace geossl {

class EvalError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

using MatrixXdR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// PCA

struct PcaModel {
  std::vector<double> mean;        // D
  MatrixXdR components;            // D x d, orthonormal columns
  std::vector<double> explained;   // d shares of total variance, non-increasing
};

inline PcaModel pca_fit(std::span<const double> x, std::size_t n, std::size_t dim, std::size_t d) {
  if (x.size() != n * dim) throw EvalError("pca_fit: data size does not match n x D");
  if (n <= 1) throw EvalError("pca_fit: need at least 2 rows");
  if (d == 0 || d > dim) throw EvalError("pca_fit: reduced dim " + std::to_string(d) + " exceeds D = " + std::to_string(dim));
  Eigen::Map<const MatrixXdR> X(x.data(), static_cast<long>(n), static_cast<long>(dim));
  const Eigen::RowVectorXd mu = X.colwise().mean();
  const MatrixXdR centered = X.rowwise() - mu;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw EvalError("pca_fit: eigendecomposition failed");

  PcaModel m;
  m.mean.assign(mu.data(), mu.data() + dim);
  m.components.resize(static_cast<long>(dim), static_cast<long>(d));
  const Eigen::VectorXd& ev = es.eigenvalues();  // ascending
  double total = 0.0;
  for (long k = 0; k < ev.size(); ++k) total += std::max(ev[k], 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    const long src = static_cast<long>(dim - 1 - k);
    Eigen::VectorXd v = es.eigenvectors().col(src);
    // Sign convention: largest-magnitude entry positive.
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0.0) v = -v;
    m.components.col(static_cast<long>(k)) = v;
    m.explained.push_back(total > 0.0 ? std::max(ev[src], 0.0) / total : 0.0);
  }
  return m;
}

inline std::vector<double> pca_apply(const PcaModel& m, std::span<const double> x, std::size_t n) {
  const std::size_t dim = m.mean.size();
  if (x.size() != n * dim) throw EvalError("pca_apply: expected " + std::to_string(dim) + "-dim rows");
  Eigen::Map<const MatrixXdR> X(x.data(), static_cast<long>(n), static_cast<long>(dim));
  Eigen::Map<const Eigen::RowVectorXd> mu(m.mean.data(), static_cast<long>(dim));
  const MatrixXdR y = (X.rowwise() - mu) * m.components;
  return {y.data(), y.data() + y.size()};
}

// ---------------------------------------------------------------------------
// Split

struct Split {
  std::vector<std::size_t> train, eval;  // row indices, ascending
  std::uint64_t seed = 0;
  bool operator==(const Split&) const = default;
};

// Per-class shuffle, first round(fraction * count) rows to train.
inline Split stratified_split(std::span<const int> labels, std::size_t n_classes, std::uint64_t seed,
                              double train_fraction = 0.6) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw EvalError("train fraction must lie in (0, 1)");
  std::vector<std::vector<std::size_t>> by_class(n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    if (static_cast<std::size_t>(labels[i]) >= n_classes) throw EvalError("label out of range");
    by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  Split s;
  s.seed = seed;
  for (std::size_t c = 0; c < n_classes; ++c) {
    auto& rows = by_class[c];
    Rng rng = make_rng(seed, {tag(Stream::kSplit), c});
    std::shuffle(rows.begin(), rows.end(), rng);
    auto n_train = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(rows.size())));
    if (rows.size() >= 2) n_train = std::clamp<std::size_t>(n_train, 1, rows.size() - 1);
    s.train.insert(s.train.end(), rows.begin(), rows.begin() + static_cast<long>(n_train));
    s.eval.insert(s.eval.end(), rows.begin() + static_cast<long>(n_train), rows.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.eval.begin(), s.eval.end());
  return s;
}

// ---------------------------------------------------------------------------
// Linear probe

struct ProbeConfig {
  std::size_t epochs = 300;
  double lr = 0.5;
  double momentum = 0.9;
  double l2 = 1e-4;
};

inline void to_json(nlohmann::json& j, const ProbeConfig& p) {
  j = {{"epochs", p.epochs}, {"lr", p.lr}, {"momentum", p.momentum}, {"l2", p.l2}};
}
inline void from_json(const nlohmann::json& j, ProbeConfig& p) {
  p.epochs = j.value("epochs", p.epochs);
  p.lr = j.value("lr", p.lr);
  p.momentum = j.value("momentum", p.momentum);
  p.l2 = j.value("l2", p.l2);
}

struct ProbeModel {
  std::vector<double> feature_mean, feature_scale;  // standardization, d
  MatrixXdR weight;                                 // d x C
  Eigen::RowVectorXd bias;                          // C
  std::size_t n_classes = 0;
  ProbeConfig config;
  std::uint64_t split_seed = 0;
};

namespace detail {

inline MatrixXdR gather_rows(std::span<const double> x, std::size_t dim, std::span<const std::size_t> rows) {
  MatrixXdR out(static_cast<long>(rows.size()), static_cast<long>(dim));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t k = 0; k < dim; ++k) out(static_cast<long>(r), static_cast<long>(k)) = x[rows[r] * dim + k];
  return out;
}

inline void standardize(MatrixXdR& x, const std::vector<double>& mean, const std::vector<double>& scale) {
  for (long r = 0; r < x.rows(); ++r)
    for (long k = 0; k < x.cols(); ++k) x(r, k) = (x(r, k) - mean[k]) / scale[k];
}

inline MatrixXdR softmax_rows(const MatrixXdR& logits) {
  MatrixXdR p(logits.rows(), logits.cols());
  for (long r = 0; r < logits.rows(); ++r) {
    double mx = -INFINITY;
    for (long c = 0; c < logits.cols(); ++c) mx = std::max(mx, logits(r, c));
    double s = 0.0;
    for (long c = 0; c < logits.cols(); ++c) s += (p(r, c) = std::exp(logits(r, c) - mx));
    for (long c = 0; c < logits.cols(); ++c) p(r, c) /= s;
  }
  return p;
}

}  // namespace detail

// Multinomial logistic regression on standardized features, full-batch
// gradient descent with momentum and an L2 penalty on the weights.
inline ProbeModel probe_train(std::span<const double> x, std::size_t dim, std::span<const int> labels,
                              std::span<const std::size_t> train_rows, std::size_t n_classes,
                              const ProbeConfig& cfg = {}, std::uint64_t split_seed = 0) {
  if (train_rows.empty()) throw EvalError("probe_train: empty training split");
  std::vector<std::size_t> counts(n_classes, 0);
  for (std::size_t r : train_rows) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= n_classes)
      throw EvalError("probe_train: label out of range");
    ++counts[static_cast<std::size_t>(labels[r])];
  }
  const auto present = std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; });
  if (present < 2) throw EvalError("probe_train: training split has a single class");

  ProbeModel m;
  m.n_classes = n_classes;
  m.config = cfg;
  m.split_seed = split_seed;
  MatrixXdR X = detail::gather_rows(x, dim, train_rows);
  const long n = X.rows();
  m.feature_mean.assign(dim, 0.0);
  m.feature_scale.assign(dim, 1.0);
  for (std::size_t k = 0; k < dim; ++k) {
    double s = 0.0, ss = 0.0;
    for (long r = 0; r < n; ++r) s += X(r, static_cast<long>(k));
    const double mu = s / static_cast<double>(n);
    for (long r = 0; r < n; ++r) ss += (X(r, static_cast<long>(k)) - mu) * (X(r, static_cast<long>(k)) - mu);
    const double sd = std::sqrt(ss / static_cast<double>(n));
    m.feature_mean[k] = mu;
    m.feature_scale[k] = sd > 1e-12 ? sd : 1.0;
  }
  detail::standardize(X, m.feature_mean, m.feature_scale);

  MatrixXdR Y = MatrixXdR::Zero(n, static_cast<long>(n_classes));
  for (long r = 0; r < n; ++r) Y(r, labels[train_rows[static_cast<std::size_t>(r)]]) = 1.0;
  m.weight = MatrixXdR::Zero(static_cast<long>(dim), static_cast<long>(n_classes));
  m.bias = Eigen::RowVectorXd::Zero(static_cast<long>(n_classes));
  MatrixXdR vw = m.weight;
  Eigen::RowVectorXd vb = m.bias;
  for (std::size_t it = 0; it < cfg.epochs; ++it) {
    const MatrixXdR logits = (X * m.weight).rowwise() + m.bias;
    const MatrixXdR err = (detail::softmax_rows(logits) - Y) / static_cast<double>(n);
    const MatrixXdR gw = X.transpose() * err + cfg.l2 * m.weight;
    const Eigen::RowVectorXd gb = err.colwise().sum();
    vw = cfg.momentum * vw + gw;
    vb = cfg.momentum * vb + gb;
    m.weight -= cfg.lr * vw;
    m.bias -= cfg.lr * vb;
  }
  return m;
}

inline std::vector<int> probe_predict(const ProbeModel& m, std::span<const double> x, std::size_t dim,
                                      std::span<const std::size_t> rows) {
  if (static_cast<std::size_t>(m.weight.rows()) != dim) throw EvalError("probe_predict: feature dim mismatch");
  MatrixXdR X = detail::gather_rows(x, dim, rows);
  detail::standardize(X, m.feature_mean, m.feature_scale);
  const MatrixXdR logits = (X * m.weight).rowwise() + m.bias;
  std::vector<int> out;
  for (long r = 0; r < logits.rows(); ++r) {
    Eigen::Index arg;
    logits.row(r).maxCoeff(&arg);
    out.push_back(static_cast<int>(arg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

using Confusion = std::vector<std::vector<std::size_t>>;  // [ref][pred]

inline Confusion confusion(std::span<const int> pred, std::span<const int> ref, std::size_t n_classes) {
  if (pred.size() != ref.size()) throw EvalError("confusion: length mismatch");
  Confusion m(n_classes, std::vector<std::size_t>(n_classes, 0));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || ref[i] < 0 || static_cast<std::size_t>(pred[i]) >= n_classes ||
        static_cast<std::size_t>(ref[i]) >= n_classes)
      throw EvalError("confusion: label outside [0, C)");
    ++m[static_cast<std::size_t>(ref[i])][static_cast<std::size_t>(pred[i])];
  }
  return m;
}

struct ClassScores {
  std::vector<double> precision, recall, f1;
  std::vector<std::size_t> support;
  double macro_f1 = 0.0;
};

inline ClassScores class_scores(const Confusion& cm) {
  const std::size_t c = cm.size();
  ClassScores s;
  for (std::size_t k = 0; k < c; ++k) {
    std::size_t tp = cm[k][k], pred_k = 0, ref_k = 0;
    for (std::size_t o = 0; o < c; ++o) {
      pred_k += cm[o][k];
      ref_k += cm[k][o];
    }
    const double p = pred_k ? static_cast<double>(tp) / static_cast<double>(pred_k) : 0.0;
    const double r = ref_k ? static_cast<double>(tp) / static_cast<double>(ref_k) : 0.0;
    s.precision.push_back(p);
    s.recall.push_back(r);
    s.f1.push_back(p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0);
    s.support.push_back(ref_k);
  }
  s.macro_f1 = c ? std::accumulate(s.f1.begin(), s.f1.end(), 0.0) / static_cast<double>(c) : 0.0;
  return s;
}

// Unweighted mean over all C classes; a class absent from ref contributes 0.
inline double macro_f1(std::span<const int> pred, std::span<const int> ref, std::size_t n_classes) {
  const auto cm = confusion(pred, ref, n_classes);
  const auto s = class_scores(cm);
  for (std::size_t k = 0; k < n_classes; ++k)
    if (s.support[k] == 0)
      std::cerr << "warning: class " << k << " absent from the evaluation split; counted as F1 = 0\n";
  return s.macro_f1;
}

// ---------------------------------------------------------------------------
// Report

struct EvalConfig {
  std::optional<std::size_t> pca_dim = 128;  // nullopt: use raw latents
  std::uint64_t split_seed = 0;
  double train_fraction = 0.6;
  ProbeConfig probe;
};

inline void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = {{"split_seed", c.split_seed}, {"train_fraction", c.train_fraction}, {"probe", c.probe}};
  j["pca_dim"] = c.pca_dim ? nlohmann::json(*c.pca_dim) : nlohmann::json(nullptr);
}
inline void from_json(const nlohmann::json& j, EvalConfig& c) {
  if (j.contains("pca_dim")) c.pca_dim = j["pca_dim"].is_null() ? std::nullopt : std::optional<std::size_t>(j["pca_dim"].get<std::size_t>());
  c.split_seed = j.value("split_seed", c.split_seed);
  c.train_fraction = j.value("train_fraction", c.train_fraction);
  if (j.contains("probe")) c.probe = j["probe"].get<ProbeConfig>();
}

struct EvalReport {
  double macro_f1 = 0.0;
  std::vector<std::string> class_names;
  ClassScores scores;
  Confusion confusion;
  std::size_t n_train = 0, n_eval = 0;
  std::uint64_t split_hash = 0;  // fingerprint of the eval rows
  std::optional<std::size_t> pca_dim;
  std::vector<double> explained;
  nlohmann::json config;
  std::string classifier = "multinomial logistic regression (linear probe, used in place of an SVM)";
};

inline std::uint64_t split_fingerprint(const Split& s, std::size_t n_rows) {
  std::uint64_t h = mix64(n_rows);
  for (std::size_t r : s.eval) h = mix64(h ^ r);
  h = mix64(h ^ 0x5eedULL);
  for (std::size_t r : s.train) h = mix64(h ^ r);
  return h;
}

// x: [n, D] latents; labels < 0 are unlabelled and skipped.
inline EvalReport evaluate(std::span<const double> x, std::size_t n, std::size_t dim, std::span<const int> labels,
                           const std::vector<std::string>& class_names, const EvalConfig& cfg = {}) {
  if (labels.size() != n || x.size() != n * dim) throw EvalError("evaluate: latent/label size mismatch");
  const std::size_t c = class_names.size();
  if (c < 2) throw EvalError("evaluate: need at least 2 classes");
  const Split split = stratified_split(labels, c, cfg.split_seed, cfg.train_fraction);
  if (split.eval.empty()) throw EvalError("evaluate: empty evaluation split");

  EvalReport rep;
  std::vector<double> feats(x.begin(), x.end());
  std::size_t fdim = dim;
  if (cfg.pca_dim) {
    const auto train_x = detail::gather_rows(x, dim, split.train);
    const PcaModel pca = pca_fit({train_x.data(), static_cast<std::size_t>(train_x.size())}, split.train.size(), dim,
                                 *cfg.pca_dim);
    feats = pca_apply(pca, x, n);
    fdim = *cfg.pca_dim;
    rep.explained = pca.explained;
  }
  const ProbeModel probe = probe_train(feats, fdim, labels, split.train, c, cfg.probe, cfg.split_seed);
  const auto pred = probe_predict(probe, feats, fdim, split.eval);
  std::vector<int> ref;
  for (std::size_t r : split.eval) ref.push_back(labels[r]);

  rep.class_names = class_names;
  rep.confusion = confusion(pred, ref, c);
  rep.scores = class_scores(rep.confusion);
  for (std::size_t k = 0; k < c; ++k)
    if (rep.scores.support[k] == 0)
      std::cerr << "warning: class '" << class_names[k] << "' absent from the evaluation split; counted as F1 = 0\n";
  rep.macro_f1 = rep.scores.macro_f1;
  rep.n_train = split.train.size();
  rep.n_eval = split.eval.size();
  rep.split_hash = split_fingerprint(split, n);
  rep.pca_dim = cfg.pca_dim;
  rep.config = cfg;
  return rep;
}

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t k = 0; k < r.class_names.size(); ++k)
    per_class.push_back({{"class", r.class_names[k]},
                         {"precision", r.scores.precision[k]},
                         {"recall", r.scores.recall[k]},
                         {"f1", r.scores.f1[k]},
                         {"support", r.scores.support[k]}});
  j = {{"macro_f1", r.macro_f1},   {"per_class", per_class},         {"confusion", r.confusion},
       {"n_train", r.n_train},     {"n_eval", r.n_eval},             {"split_hash", r.split_hash},
       {"explained", r.explained}, {"config", r.config},             {"classifier", r.classifier},
       {"class_names", r.class_names}};
  j["pca_dim"] = r.pca_dim ? nlohmann::json(*r.pca_dim) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  try {
    r.macro_f1 = j.at("macro_f1");
    r.class_names = j.at("class_names").get<std::vector<std::string>>();
    r.confusion = j.at("confusion").get<Confusion>();
    r.scores = class_scores(r.confusion);
    r.n_train = j.at("n_train");
    r.n_eval = j.at("n_eval");
    r.split_hash = j.at("split_hash");
    r.explained = j.value("explained", std::vector<double>{});
    r.config = j.value("config", nlohmann::json::object());
    r.classifier = j.value("classifier", r.classifier);
    if (j.contains("pca_dim") && !j["pca_dim"].is_null()) r.pca_dim = j["pca_dim"].get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw EvalError(std::string("malformed eval report: ") + e.what());
  }
}

inline void write_confusion_csv(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw EvalError("cannot write " + path.string());
  out << "ref\\pred";
  for (const auto& n : r.class_names) out << ',' << n;
  out << '\n';
  for (std::size_t a = 0; a < r.confusion.size(); ++a) {
    out << r.class_names[a];
    for (std::size_t v : r.confusion[a]) out << ',' << v;
    out << '\n';
  }
}

inline void save_report(const EvalReport& r, const std::filesystem::path& json_path) {
  std::ofstream out(json_path);
  if (!out) throw EvalError("cannot write " + json_path.string());
  out << nlohmann::json(r).dump(2) << '\n';
}

inline EvalReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw EvalError("cannot open report " + path.string());
  try {
    return nlohmann::json::parse(in).get<EvalReport>();
  } catch (const nlohmann::json::parse_error& e) {
    throw EvalError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Comparison

struct DeltaRow {
  std::string name;  // class name, or "macro"
  double a_mean = 0, a_std = 0, b_mean = 0, b_std = 0;
  double delta = 0;     // b - a
  double relative = 0;  // (b - a) / a; 0 when a == 0
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

}  // namespace detail

inline double relative_delta(double a, double b) { return a != 0.0 ? (b - a) / a : 0.0; }

// a, b: one report per seed. Rows: per class, then the macro row.
inline std::vector<DeltaRow> compare_runs(const std::vector<EvalReport>& a, const std::vector<EvalReport>& b) {
  if (a.empty() || b.empty()) throw EvalError("compare_runs: need at least one report per side");
  const auto& ref = a.front();
  for (const auto* side : {&a, &b})
    for (const auto& r : *side)
      if (r.split_hash != ref.split_hash || r.class_names != ref.class_names || r.n_eval != ref.n_eval)
        throw EvalError("compare_runs: reports use mismatched splits or class sets");
  std::vector<DeltaRow> rows;
  auto add_row = [&](const std::string& name, auto metric) {
    std::vector<double> va, vb;
    for (const auto& r : a) va.push_back(metric(r));
    for (const auto& r : b) vb.push_back(metric(r));
    DeltaRow d;
    d.name = name;
    std::tie(d.a_mean, d.a_std) = detail::mean_std(va);
    std::tie(d.b_mean, d.b_std) = detail::mean_std(vb);
    d.delta = d.b_mean - d.a_mean;
    d.relative = relative_delta(d.a_mean, d.b_mean);
    rows.push_back(d);
  };
  for (std::size_t k = 0; k < ref.class_names.size(); ++k)
    add_row(ref.class_names[k], [k](const EvalReport& r) { return r.scores.f1[k]; });
  add_row("macro", [](const EvalReport& r) { return r.macro_f1; });
  return rows;
}

inline void write_delta_csv(const std::vector<DeltaRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw EvalError("cannot write " + path.string());
  out << "row,a_mean,a_std,b_mean,b_std,delta,relative_delta\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.name.c_str(), r.a_mean, r.a_std,
                  r.b_mean, r.b_std, r.delta, r.relative);
    out << buf;
  }
}

}  // namespace geossl

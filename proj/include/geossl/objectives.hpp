#pragma once

// Self-supervised objectives and their shared machinery.
//
// Instance level: NT-Xent over the reordered similarity matrix (SimCLR),
// symmetric negative-cosine with stop-gradient targets (SimSiam), and InfoNCE
// against a momentum teacher plus a FIFO queue of past keys (MoCo v2).
// Cluster level: swapped prediction against Sinkhorn-balanced assignments
// (SwAV), cross-entropy to offline k-means pseudolabels (DeepCluster-v2), and
// teacher-student distillation with centering and sharpening (DINO).

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "geossl/encoder.hpp"
#include "geossl/rng.hpp"
#include "geossl/tensor.hpp"

namespace geossl {

class ObjectiveError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct LossConfig {
  double temperature = 0.2;          // NT-Xent, MoCo
  double student_temperature = 0.1;  // DINO student; also SwAV/DeepCluster prediction softmax
  double teacher_temperature = 0.04;
  double momentum = 0.99;
  std::size_t queue_capacity = 1024;
  std::size_t sinkhorn_iterations = 3;
  double sinkhorn_epsilon = 0.05;
  std::size_t n_clusters = 0;  // DeepCluster K; 0 resolves to 4 x class count
  double center_momentum = 0.9;
  bool cluster_every_step = false;

  void validate() const {
    if (!(temperature > 0.0) || !(student_temperature > 0.0) || !(teacher_temperature > 0.0))
      throw ObjectiveError("temperatures must be positive");
    if (!(teacher_temperature < student_temperature))
      throw ObjectiveError("teacher temperature must be below student temperature");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ObjectiveError("momentum must lie in [0, 1)");
    if (queue_capacity == 0) throw ObjectiveError("queue capacity must be positive");
    if (sinkhorn_iterations == 0 || !(sinkhorn_epsilon > 0.0))
      throw ObjectiveError("sinkhorn needs iterations >= 1 and epsilon > 0");
    if (!(center_momentum >= 0.0 && center_momentum < 1.0))
      throw ObjectiveError("center momentum must lie in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const LossConfig& c) {
  j = {{"temperature", c.temperature},
       {"student_temperature", c.student_temperature},
       {"teacher_temperature", c.teacher_temperature},
       {"momentum", c.momentum},
       {"queue_capacity", c.queue_capacity},
       {"sinkhorn_iterations", c.sinkhorn_iterations},
       {"sinkhorn_epsilon", c.sinkhorn_epsilon},
       {"n_clusters", c.n_clusters},
       {"center_momentum", c.center_momentum},
       {"cluster_every_step", c.cluster_every_step}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c) {
  c.temperature = j.value("temperature", c.temperature);
  c.student_temperature = j.value("student_temperature", c.student_temperature);
  c.teacher_temperature = j.value("teacher_temperature", c.teacher_temperature);
  c.momentum = j.value("momentum", c.momentum);
  c.queue_capacity = j.value("queue_capacity", c.queue_capacity);
  c.sinkhorn_iterations = j.value("sinkhorn_iterations", c.sinkhorn_iterations);
  c.sinkhorn_epsilon = j.value("sinkhorn_epsilon", c.sinkhorn_epsilon);
  c.n_clusters = j.value("n_clusters", c.n_clusters);
  c.center_momentum = j.value("center_momentum", c.center_momentum);
  c.cluster_every_step = j.value("cluster_every_step", c.cluster_every_step);
}

// ---------------------------------------------------------------------------
// Similarities

inline double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ObjectiveError("cosine_sim: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw ObjectiveError("cosine_sim: zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

// Row-wise cosine similarity of two [B, D] tensors -> [B, 1].
inline Tensor row_cosine(const Tensor& a, const Tensor& b) {
  return sum(mul(l2_normalize(a, 1), l2_normalize(b, 1)), 1);
}

// Column order of row i in the reordered matrix: the positive (i + N) mod 2N
// first, then every j != i, j != positive, ascending.
inline std::vector<std::size_t> similarity_index_map(std::size_t two_n) {
  if (two_n == 0 || two_n % 2 != 0) throw ObjectiveError("similarity matrix needs an even, non-zero row count");
  const std::size_t n = two_n / 2;
  std::vector<std::size_t> idx;
  idx.reserve(two_n * (two_n - 1));
  for (std::size_t i = 0; i < two_n; ++i) {
    const std::size_t pos = (i + n) % two_n;
    idx.push_back(i * two_n + pos);
    for (std::size_t j = 0; j < two_n; ++j)
      if (j != i && j != pos) idx.push_back(i * two_n + j);
  }
  return idx;
}

// Z: [2N, D] laid out as [x_1^(1) .. x_N^(1), x_1^(2) .. x_N^(2)].
// Returns [2N, 2N-1] with the positive pair's similarity in column 0.
inline Tensor build_similarity_matrix(const Tensor& z) {
  if (z.rank() != 2) throw ObjectiveError("build_similarity_matrix: expected [2N, D]");
  const std::size_t two_n = z.dim(0);
  auto idx = similarity_index_map(two_n);
  const Tensor zn = l2_normalize(z, 1);
  const Tensor full = matmul(zn, transpose(zn));
  return gather(full, std::move(idx), {two_n, two_n - 1});
}

inline Tensor nt_xent(const Tensor& m, double tau) {
  if (!(tau > 0.0)) throw ObjectiveError("nt_xent: temperature must be positive");
  if (m.rank() != 2 || m.dim(1) + 1 != m.dim(0))
    throw ObjectiveError("nt_xent: expected a [2N, 2N-1] similarity matrix");
  return -mean(slice(log_softmax(m / tau, 1), 1, 0, 1));
}

// -1/2 (sim(p1, sg(z2)) + sim(p2, sg(z1))), averaged over the batch.
inline Tensor simsiam_loss(const Tensor& p1, const Tensor& z1, const Tensor& p2, const Tensor& z2) {
  if (p1.shape() != z2.shape() || p2.shape() != z1.shape() || p1.shape() != p2.shape())
    throw ObjectiveError("simsiam_loss: dim mismatch");
  const Tensor a = mean(row_cosine(p1, stop_gradient(z2)));
  const Tensor b = mean(row_cosine(p2, stop_gradient(z1)));
  return -0.5 * (a + b);
}

// ---------------------------------------------------------------------------
// Momentum teacher

struct TeacherState {
  ModelState teacher;
  std::vector<double> center;  // DINO centering over prototypes
};

inline TeacherState make_teacher(const ModelState& student) {
  TeacherState t;
  t.teacher = student;
  t.center.assign(student.config.n_prototypes, 0.0);
  return t;
}

inline void ema_update(TeacherState& t, const ModelState& student, double m) {
  if (!(m >= 0.0 && m < 1.0)) throw ObjectiveError("ema_update: momentum must lie in [0, 1)");
  if (!(t.teacher.layout == student.layout)) throw ObjectiveError("ema_update: layout mismatch");
  auto& th = t.teacher.params;
  for (std::size_t i = 0; i < th.size(); ++i) th[i] = m * th[i] + (1.0 - m) * student.params[i];
}

// ---------------------------------------------------------------------------
// MoCo

class MemoryQueue {
public:
  MemoryQueue(std::size_t capacity, std::size_t dim) : capacity_(capacity), dim_(dim) {
    if (capacity == 0 || dim == 0) throw ObjectiveError("memory queue: zero capacity or dim");
    keys_.assign(capacity * dim, 0.0);
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return size_; }
  std::size_t cursor() const { return cursor_; }

  // Stores l2-normalized copies of the rows of keys [B, D], evicting oldest first.
  void enqueue(const Tensor& keys) {
    if (keys.rank() != 2 || keys.dim(1) != dim_) throw ObjectiveError("memory queue: key dim mismatch");
    auto k = keys.data();
    for (std::size_t r = 0; r < keys.dim(0); ++r) {
      double ss = 0.0;
      for (std::size_t c = 0; c < dim_; ++c) ss += k[r * dim_ + c] * k[r * dim_ + c];
      const double n = std::sqrt(ss);
      if (n == 0.0) throw ObjectiveError("memory queue: zero key");
      for (std::size_t c = 0; c < dim_; ++c) keys_[cursor_ * dim_ + c] = k[r * dim_ + c] / n;
      cursor_ = (cursor_ + 1) % capacity_;
      size_ = std::min(size_ + 1, capacity_);
    }
  }

  // Entries oldest to newest, [size, D], no gradient.
  Tensor entries() const {
    std::vector<double> out;
    out.reserve(size_ * dim_);
    const std::size_t start = size_ < capacity_ ? 0 : cursor_;
    for (std::size_t k = 0; k < size_; ++k) {
      const std::size_t slot = (start + k) % capacity_;
      out.insert(out.end(), keys_.begin() + static_cast<long>(slot * dim_),
                 keys_.begin() + static_cast<long>((slot + 1) * dim_));
    }
    if (size_ == 0) return Tensor{};
    return Tensor::from({size_, dim_}, out);
  }

  const std::vector<double>& raw() const { return keys_; }
  void restore(std::vector<double> raw, std::size_t size, std::size_t cursor) {
    if (raw.size() != capacity_ * dim_ || size > capacity_ || cursor >= capacity_)
      throw ObjectiveError("memory queue: inconsistent restore state");
    keys_ = std::move(raw);
    size_ = size;
    cursor_ = cursor;
  }

private:
  std::size_t capacity_, dim_;
  std::size_t size_ = 0, cursor_ = 0;
  std::vector<double> keys_;
};

// q from the student, k_plus from the teacher. The keys are enqueued after the
// loss is formed, so a batch never contrasts against its own keys.
inline Tensor moco_loss(const Tensor& q, const Tensor& k_plus, MemoryQueue& queue, double tau) {
  if (!(tau > 0.0)) throw ObjectiveError("moco_loss: temperature must be positive");
  if (q.shape() != k_plus.shape() || q.rank() != 2) throw ObjectiveError("moco_loss: dim mismatch");
  const Tensor qn = l2_normalize(q, 1);
  const Tensor kn = stop_gradient(l2_normalize(stop_gradient(k_plus), 1));
  Tensor logits = sum(mul(qn, kn), 1);
  if (queue.size() > 0) logits = concat({logits, matmul(qn, transpose(queue.entries()))}, 1);
  const Tensor loss = -mean(slice(log_softmax(logits / tau, 1), 1, 0, 1));
  queue.enqueue(k_plus);
  return loss;
}

// ---------------------------------------------------------------------------
// Sinkhorn-Knopp

// scores: row-major [B, K]. Returns assignments whose rows sum to 1 and whose
// columns approach B / K (equipartition). Alternates column then row
// normalization so the final row normalization is exact.
inline std::vector<double> sinkhorn(std::span<const double> scores, std::size_t rows, std::size_t cols,
                                    double epsilon, std::size_t iterations) {
  if (scores.size() != rows * cols || rows == 0 || cols == 0) throw ObjectiveError("sinkhorn: bad shape");
  if (!(epsilon > 0.0) || iterations == 0) throw ObjectiveError("sinkhorn: need epsilon > 0, iterations >= 1");
  double mx = -INFINITY;
  for (double s : scores) {
    if (!std::isfinite(s)) throw ObjectiveError("sinkhorn: non-finite score");
    mx = std::max(mx, s);
  }
  std::vector<double> q(scores.size());
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = std::exp((scores[i] - mx) / epsilon);
  const double col_target = static_cast<double>(rows) / static_cast<double>(cols);
  std::vector<double> colsum(cols);
  for (std::size_t it = 0; it < iterations; ++it) {
    std::fill(colsum.begin(), colsum.end(), 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) colsum[c] += q[r * cols + c];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) q[r * cols + c] *= col_target / colsum[c];
    for (std::size_t r = 0; r < rows; ++r) {
      double rs = 0.0;
      for (std::size_t c = 0; c < cols; ++c) rs += q[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) q[r * cols + c] /= rs;
    }
  }
  return q;
}

inline Tensor sinkhorn(const Tensor& scores, double epsilon, std::size_t iterations) {
  if (scores.rank() != 2) throw ObjectiveError("sinkhorn: expected [B, K]");
  auto q = sinkhorn(scores.data(), scores.dim(0), scores.dim(1), epsilon, iterations);
  return Tensor::from(scores.shape(), q);
}

// Mean over the batch of -q^T log softmax(logits / tau); q is constant.
inline Tensor swapped_prediction_term(const Tensor& q, const Tensor& logits, double tau) {
  if (q.shape() != logits.shape()) throw ObjectiveError("swapped prediction: shape mismatch");
  const Tensor logp = log_softmax(logits / tau, 1);
  return -(sum(mul(stop_gradient(q), logp)) / static_cast<double>(q.dim(0)));
}

// all_logits[0..1] are the two global views; the rest are locals. Each is
// [B, K_p]. For each global v, the Sinkhorn code of v is predicted from every
// other view, and the sum is normalized by 1/(2N).
inline Tensor swav_loss(const std::vector<Tensor>& all_logits, const LossConfig& cfg,
                        std::size_t n_globals = 2) {
  if (n_globals < 2 || all_logits.size() < n_globals)
    throw ObjectiveError("swav_loss: need at least two global views");
  const std::size_t batch = all_logits[0].dim(0);
  Tensor total;
  for (std::size_t v = 0; v < n_globals; ++v) {
    const Tensor q = sinkhorn(stop_gradient(all_logits[v]), cfg.sinkhorn_epsilon, cfg.sinkhorn_iterations);
    for (std::size_t w = 0; w < all_logits.size(); ++w) {
      if (w == v) continue;
      // batch-summed term
      const Tensor t = swapped_prediction_term(q, all_logits[w], cfg.student_temperature) *
                       static_cast<double>(batch);
      total = total.defined() ? total + t : t;
    }
  }
  return total / (2.0 * static_cast<double>(batch));
}

// ---------------------------------------------------------------------------
// k-means

struct KMeansResult {
  std::vector<int> labels;
  std::vector<double> centroids;  // [K, D]
  std::vector<double> objective;  // after each assignment step
  std::size_t iterations = 0;
};

// Lloyd's algorithm with k-means++ seeding. Runs until assignments stop
// changing or 100 iterations; an empty cluster is reseeded at the point
// farthest from its own centroid.
inline KMeansResult kmeans(std::span<const double> x, std::size_t n, std::size_t dim, std::size_t k,
                           std::uint64_t seed, std::size_t max_iter = 100) {
  if (x.size() != n * dim || dim == 0) throw ObjectiveError("kmeans: bad shape");
  if (k == 0 || n < k) throw ObjectiveError("kmeans: need n >= K >= 1");
  Rng rng = make_rng(seed, {tag(Stream::kKmeans)});
  auto dist2 = [&](std::size_t i, const double* c) {
    double d = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      const double t = x[i * dim + j] - c[j];
      d += t * t;
    }
    return d;
  };

  KMeansResult r;
  r.centroids.assign(k * dim, 0.0);
  std::vector<double> nearest(n, INFINITY);
  std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  std::copy_n(x.begin() + static_cast<long>(first * dim), dim, r.centroids.begin());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], dist2(i, &r.centroids[(c - 1) * dim]));
      total += nearest[i];
    }
    std::size_t pick = n - 1;
    if (total > 0.0) {
      double u = uniform(rng, 0.0, total), acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += nearest[i];
        if (u < acc) {
          pick = i;
          break;
        }
      }
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    }
    std::copy_n(x.begin() + static_cast<long>(pick * dim), dim, r.centroids.begin() + static_cast<long>(c * dim));
  }

  r.labels.assign(n, -1);
  std::vector<double> d_own(n);
  for (std::size_t it = 0; it < max_iter; ++it) {
    bool changed = false;
    double obj = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = INFINITY;
      for (std::size_t c = 0; c < k; ++c) {
        const double d = dist2(i, &r.centroids[c * dim]);
        if (d < bd) {
          bd = d;
          best = static_cast<int>(c);
        }
      }
      changed = changed || best != r.labels[i];
      r.labels[i] = best;
      d_own[i] = bd;
      obj += bd;
    }
    r.objective.push_back(obj);
    r.iterations = it + 1;
    if (!changed && it > 0) break;

    std::vector<double> sums(k * dim, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(r.labels[i]);
      ++counts[c];
      for (std::size_t j = 0; j < dim; ++j) sums[c * dim + j] += x[i * dim + j];
    }
    std::vector<bool> taken(n, false);
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        for (std::size_t j = 0; j < dim; ++j) r.centroids[c * dim + j] = sums[c * dim + j] / static_cast<double>(counts[c]);
        continue;
      }
      std::size_t far = 0;
      double fd = -1.0;
      for (std::size_t i = 0; i < n; ++i)
        if (!taken[i] && d_own[i] > fd) {
          fd = d_own[i];
          far = i;
        }
      taken[far] = true;
      std::copy_n(x.begin() + static_cast<long>(far * dim), dim, r.centroids.begin() + static_cast<long>(c * dim));
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// DeepCluster-v2

// probs: [B, K] rows summing to one; labels index the target cluster.
inline Tensor deepcluster_loss(const Tensor& probs, std::span<const int> labels) {
  if (probs.rank() != 2 || labels.size() != probs.dim(0)) throw ObjectiveError("deepcluster_loss: shape mismatch");
  const std::size_t k = probs.dim(1);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw ObjectiveError("deepcluster_loss: label " + std::to_string(labels[i]) + " >= K");
    idx.push_back(i * k + static_cast<std::size_t>(labels[i]));
  }
  return -mean(log(gather(probs, idx, {labels.size()})));
}

// Same objective on logits, via log-softmax for numerical range.
inline Tensor deepcluster_loss_from_logits(const Tensor& logits, std::span<const int> labels, double tau) {
  if (logits.rank() != 2 || labels.size() != logits.dim(0))
    throw ObjectiveError("deepcluster_loss: shape mismatch");
  if (!(tau > 0.0)) throw ObjectiveError("deepcluster_loss: temperature must be positive");
  const std::size_t k = logits.dim(1);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw ObjectiveError("deepcluster_loss: label " + std::to_string(labels[i]) + " >= K");
    idx.push_back(i * k + static_cast<std::size_t>(labels[i]));
  }
  return -mean(gather(log_softmax(logits / tau, 1), idx, {labels.size()}));
}

// ---------------------------------------------------------------------------
// DINO

// Cross-entropy between one teacher distribution and one student view,
// averaged over the batch.
inline Tensor distillation_term(const Tensor& teacher_probs, const Tensor& student_logits, double tau_s) {
  return -(sum(mul(stop_gradient(teacher_probs), log_softmax(student_logits / tau_s, 1))) /
           static_cast<double>(student_logits.dim(0)));
}

inline Tensor teacher_distribution(const Tensor& teacher_logits, std::span<const double> center, double tau_t) {
  const std::size_t b = teacher_logits.dim(0), k = teacher_logits.dim(1);
  if (center.size() != k) throw ObjectiveError("dino: center size mismatch");
  std::vector<double> shifted(b * k);
  auto t = teacher_logits.data();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < k; ++j) shifted[i * k + j] = (t[i * k + j] - center[j]) / tau_t;
  return softmax(Tensor::from({b, k}, shifted), 1);
}

// student_logits: every view, globals first in the same order as
// teacher_logits (the teacher sees globals only). Pairs where the student and
// teacher look at the same view are skipped; the loss averages over the pairs
// that remain. Updates the teacher's center afterwards.
inline Tensor dino_loss(const std::vector<Tensor>& student_logits, const std::vector<Tensor>& teacher_logits,
                        TeacherState& teacher, const LossConfig& cfg) {
  if (!(cfg.student_temperature > 0.0) || !(cfg.teacher_temperature > 0.0))
    throw ObjectiveError("dino_loss: temperatures must be positive");
  if (teacher_logits.empty() || student_logits.size() < teacher_logits.size())
    throw ObjectiveError("dino_loss: student must see every teacher view");
  std::vector<Tensor> p_t;
  for (const auto& t : teacher_logits)
    p_t.push_back(teacher_distribution(stop_gradient(t), teacher.center, cfg.teacher_temperature));

  Tensor total;
  std::size_t terms = 0;
  for (std::size_t s = 0; s < student_logits.size(); ++s)
    for (std::size_t t = 0; t < p_t.size(); ++t) {
      if (s == t) continue;
      const Tensor term = distillation_term(p_t[t], student_logits[s], cfg.student_temperature);
      total = total.defined() ? total + term : term;
      ++terms;
    }
  if (terms == 0) throw ObjectiveError("dino_loss: no student/teacher pairs");

  const std::size_t k = teacher.center.size();
  std::vector<double> batch_mean(k, 0.0);
  std::size_t rows = 0;
  for (const auto& t : teacher_logits) {
    auto d = t.data();
    for (std::size_t i = 0; i < t.dim(0); ++i)
      for (std::size_t j = 0; j < k; ++j) batch_mean[j] += d[i * k + j];
    rows += t.dim(0);
  }
  for (std::size_t j = 0; j < k; ++j)
    teacher.center[j] = cfg.center_momentum * teacher.center[j] +
                        (1.0 - cfg.center_momentum) * batch_mean[j] / static_cast<double>(rows);
  return total / static_cast<double>(terms);
}

}  // namespace geossl

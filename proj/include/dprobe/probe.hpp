#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dprobe/corpus.hpp"
#include "dprobe/embedstore.hpp"
#include "dprobe/error.hpp"

namespace dprobe {

using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Structural probe for one target layer: softmax mixing over layers 0..layer,
// a scale, and a rank x dim projection.
struct ProbeParams {
  std::size_t layer = 0;
  Eigen::VectorXf mix_logits;  // layer + 1 entries
  float scale = 1.0f;
  Eigen::MatrixXf projection;  // rank x dim

  std::size_t dim() const { return static_cast<std::size_t>(projection.cols()); }
  std::size_t rank() const { return static_cast<std::size_t>(projection.rows()); }
  Eigen::VectorXd mix_weights() const;
};

// B ~ U(-1/sqrt(dim), 1/sqrt(dim)), uniform mixing logits, scale 1.
ProbeParams init_probe(std::size_t layer, std::size_t dim, std::size_t rank, std::uint64_t seed);

// One row per token: scale * sum_k softmax(a)_k h^k. `h` must hold exactly
// layer + 1 slices.
RowMatrixXd mix_embeddings(const ProbeParams& p, const LayerTensor& h);

// ||B m_i - B m_j||_2
double predict_distance(const ProbeParams& p, const Eigen::VectorXd& m_i,
                        const Eigen::VectorXd& m_j);

struct ProbeExample {
  LayerTensor embeddings;  // layers 0..layer (or more; extra layers are ignored)
  GoldDistances gold;
};

// (1/|s|^2) * sum_{i<j} |gold_ij - d_B(m_i, m_j)|
double sentence_loss(const ProbeParams& p, const LayerTensor& h, const GoldDistances& gold);

struct Gradients {
  double loss = 0.0;  // mean sentence loss over the batch
  Eigen::MatrixXd projection;
  Eigen::VectorXd mix_logits;
  double scale = 0.0;
  // pairs whose predicted distance was exactly 0; their subgradient is 0
  std::size_t zero_distance_pairs = 0;
};

// Analytic gradient of the mean sentence loss over `batch`. Computed in
// double precision from the float parameters.
Gradients gradients(const ProbeParams& p, std::span<const ProbeExample> batch);
Gradients gradients(const ProbeParams& p, std::span<const ProbeExample* const> batch);

// Source of training examples; lets large corpora stream from a bundle.
class ExampleSource {
 public:
  virtual ~ExampleSource() = default;
  virtual std::size_t size() const = 0;
  virtual ProbeExample get(std::size_t index) const = 0;
};

class InMemorySource : public ExampleSource {
 public:
  explicit InMemorySource(std::vector<ProbeExample> examples) : examples_(std::move(examples)) {}
  std::size_t size() const override { return examples_.size(); }
  ProbeExample get(std::size_t index) const override { return examples_[index]; }
  const ProbeExample& at(std::size_t index) const { return examples_[index]; }

 private:
  std::vector<ProbeExample> examples_;
};

// Reads layers [0, layer_count) of each sentence from a bundle on demand.
class BundleSource : public ExampleSource {
 public:
  BundleSource(const BundleReader& reader, const std::vector<DepSentence>& sentences,
               std::size_t layer_count);
  std::size_t size() const override { return sentences_->size(); }
  ProbeExample get(std::size_t index) const override;

 private:
  const BundleReader* reader_;
  const std::vector<DepSentence>* sentences_;
  std::size_t layer_count_;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  // reduce-on-plateau, monitored on dev loss
  double plateau_factor = 0.5;
  std::size_t plateau_patience = 1;
  double plateau_threshold = 1e-4;  // relative improvement needed to reset patience
  double min_learning_rate = 0.0;
  std::uint64_t seed = 0;
  std::size_t rank = 0;  // 0 means rank = dim

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_loss = 0.0;
  double learning_rate = 0.0;
  bool lr_reduced = false;
};

struct TrainResult {
  ProbeParams params;  // parameters from the epoch with the lowest dev loss
  ProbeParams initial;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 0 means the initial parameters were never beaten
  std::size_t zero_distance_pairs = 0;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

// Deterministic given cfg.seed. Throws DivergenceError on a non-finite loss.
TrainResult train_probe(std::size_t layer, std::size_t dim, const ExampleSource& train,
                        const ExampleSource& dev, const TrainConfig& cfg);

// Loss history as CSV: epoch,train_loss,dev_loss,learning_rate,lr_reduced
std::string history_csv(const std::vector<EpochRecord>& history);

// Checkpoint: "DPCKPT01", u32 manifest length, manifest JSON, then float32
// little-endian mix logits, scale, projection (row-major).
void save_checkpoint(const std::string& path, const ProbeParams& p, const nlohmann::json& meta);

struct Checkpoint {
  ProbeParams params;
  nlohmann::json meta;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace dprobe

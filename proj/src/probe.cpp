#include "dprobe/probe.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dprobe/rng.hpp"

namespace dprobe {

namespace {

using RowMatrixXf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatrixXf> layer_map(const LayerTensor& h, std::size_t layer) {
  return {h.layer(layer).data(), static_cast<Eigen::Index>(h.tokens),
          static_cast<Eigen::Index>(h.dim)};
}

Eigen::VectorXd softmax(const Eigen::VectorXf& logits) {
  Eigen::VectorXd a = logits.cast<double>();
  const double mx = a.maxCoeff();
  Eigen::VectorXd e = (a.array() - mx).exp();
  return e / e.sum();
}

// Unscaled mixture sum_k w_k h^k over the first w.size() layers.
RowMatrixXd weighted_layers(const Eigen::VectorXd& w, const LayerTensor& h) {
  RowMatrixXd u = RowMatrixXd::Zero(static_cast<Eigen::Index>(h.tokens),
                                    static_cast<Eigen::Index>(h.dim));
  for (Eigen::Index k = 0; k < w.size(); ++k) {
    u.noalias() += w[k] * layer_map(h, static_cast<std::size_t>(k)).cast<double>();
  }
  return u;
}

void check_layers(const ProbeParams& p, const LayerTensor& h, bool exact) {
  const std::size_t need = p.layer + 1;
  if (exact ? h.layers != need : h.layers < need) {
    throw ValidationError("probe for layer " + std::to_string(p.layer) + " needs " +
                          std::to_string(need) + " layer slices, got " +
                          std::to_string(h.layers));
  }
  if (h.dim != p.dim()) {
    throw ValidationError("embedding dim " + std::to_string(h.dim) + " != probe dim " +
                          std::to_string(p.dim()));
  }
}

struct SentenceTerms {
  double loss = 0.0;
  std::size_t zero_pairs = 0;
};

// Adds this sentence's gradient (unnormalised by batch size) into `g`.
SentenceTerms accumulate(const ProbeParams& p, const Eigen::VectorXd& w, const Eigen::MatrixXd& B,
                         const ProbeExample& ex, Gradients& g) {
  const LayerTensor& h = ex.embeddings;
  check_layers(p, h, false);
  const auto n = static_cast<Eigen::Index>(h.tokens);
  const double gamma = p.scale;
  const RowMatrixXd u = weighted_layers(w, h);
  const RowMatrixXd m = gamma * u;
  const RowMatrixXd z = m * B.transpose();
  const double norm = 1.0 / static_cast<double>(n * n);

  SentenceTerms out;
  RowMatrixXd gz = RowMatrixXd::Zero(n, z.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const Eigen::VectorXd diff = (z.row(i) - z.row(j)).transpose();
      const double dist = diff.norm();
      const double resid = ex.gold(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) - dist;
      out.loss += std::abs(resid);
      if (resid == 0.0) continue;
      if (dist == 0.0) {
        ++out.zero_pairs;
        if (gamma == 0.0) {
          // d = |gamma| * ||B(u_i - u_j)||; use the limit of the scale
          // derivative as gamma -> 0+.
          const double c = (B * (u.row(i) - u.row(j)).transpose()).norm();
          g.scale += (resid > 0 ? -norm : norm) * c;
        }
        continue;
      }
      // d|gold - dist|/d dist = -sign(resid)
      const double coef = (resid > 0 ? -norm : norm) / dist;
      gz.row(i) += coef * diff.transpose();
      gz.row(j) -= coef * diff.transpose();
    }
  }
  out.loss *= norm;

  g.projection.noalias() += gz.transpose() * m;
  const RowMatrixXd gm = gz * B;
  g.scale += (gm.array() * u.array()).sum();
  Eigen::VectorXd gw(w.size());
  for (Eigen::Index k = 0; k < w.size(); ++k) {
    gw[k] = gamma * (gm.array() * layer_map(h, static_cast<std::size_t>(k)).cast<double>().array()).sum();
  }
  g.mix_logits.array() += w.array() * (gw.array() - w.dot(gw));
  return out;
}

Gradients batch_gradients(const ProbeParams& p, std::size_t count,
                          const auto& example_at) {
  const Eigen::VectorXd w = p.mix_weights();
  const Eigen::MatrixXd B = p.projection.cast<double>();
  Gradients g;
  g.projection = Eigen::MatrixXd::Zero(B.rows(), B.cols());
  g.mix_logits = Eigen::VectorXd::Zero(w.size());
  if (count == 0) return g;
  for (std::size_t s = 0; s < count; ++s) {
    const auto terms = accumulate(p, w, B, example_at(s), g);
    g.loss += terms.loss;
    g.zero_distance_pairs += terms.zero_pairs;
  }
  const double inv = 1.0 / static_cast<double>(count);
  g.loss *= inv;
  g.projection *= inv;
  g.mix_logits *= inv;
  g.scale *= inv;
  return g;
}

double mean_loss(const ProbeParams& p, const ExampleSource& src) {
  if (src.size() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const ProbeExample ex = src.get(i);
    total += sentence_loss(p, ex.embeddings.layers == p.layer + 1
                                  ? ex.embeddings
                                  : ex.embeddings.prefix(p.layer + 1),
                           ex.gold);
  }
  return total / static_cast<double>(src.size());
}

struct AdamState {
  Eigen::MatrixXd m_proj, v_proj;
  Eigen::VectorXd m_mix, v_mix;
  double m_scale = 0.0, v_scale = 0.0;
  std::size_t step = 0;
};

void adam_step(ProbeParams& p, const Gradients& g, AdamState& st, const TrainConfig& cfg,
               double lr) {
  ++st.step;
  const double b1 = cfg.adam_beta1;
  const double b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  auto update = [&](auto& param, const auto& grad, auto& m, auto& v) {
    m = b1 * m + (1.0 - b1) * grad;
    v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
    const auto step = (lr * (m / c1).array() / ((v / c2).array().sqrt() + cfg.adam_eps)).matrix();
    param = (param.template cast<double>() - step).template cast<float>();
  };
  update(p.projection, g.projection, st.m_proj, st.v_proj);
  update(p.mix_logits, g.mix_logits, st.m_mix, st.v_mix);
  st.m_scale = b1 * st.m_scale + (1.0 - b1) * g.scale;
  st.v_scale = b2 * st.v_scale + (1.0 - b2) * g.scale * g.scale;
  const double step = lr * (st.m_scale / c1) / (std::sqrt(st.v_scale / c2) + cfg.adam_eps);
  p.scale = static_cast<float>(static_cast<double>(p.scale) - step);
}

}  // namespace

Eigen::VectorXd ProbeParams::mix_weights() const { return softmax(mix_logits); }

ProbeParams init_probe(std::size_t layer, std::size_t dim, std::size_t rank, std::uint64_t seed) {
  if (dim == 0) throw ValidationError("probe dim must be >= 1");
  if (rank == 0) rank = dim;
  if (rank > dim) throw ValidationError("probe rank must not exceed dim");
  ProbeParams p;
  p.layer = layer;
  p.mix_logits = Eigen::VectorXf::Zero(static_cast<Eigen::Index>(layer + 1));
  p.scale = 1.0f;
  p.projection.resize(static_cast<Eigen::Index>(rank), static_cast<Eigen::Index>(dim));
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  Rng rng(seed);
  for (Eigen::Index r = 0; r < p.projection.rows(); ++r) {
    for (Eigen::Index c = 0; c < p.projection.cols(); ++c) {
      p.projection(r, c) = static_cast<float>(rng.uniform(-bound, bound));
    }
  }
  return p;
}

RowMatrixXd mix_embeddings(const ProbeParams& p, const LayerTensor& h) {
  check_layers(p, h, true);
  return static_cast<double>(p.scale) * weighted_layers(p.mix_weights(), h);
}

double predict_distance(const ProbeParams& p, const Eigen::VectorXd& m_i,
                        const Eigen::VectorXd& m_j) {
  return (p.projection.cast<double>() * (m_i - m_j)).norm();
}

double sentence_loss(const ProbeParams& p, const LayerTensor& h, const GoldDistances& gold) {
  const RowMatrixXd z = mix_embeddings(p, h) * p.projection.cast<double>().transpose();
  const auto n = static_cast<Eigen::Index>(h.tokens);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double dist = (z.row(i) - z.row(j)).norm();
      total += std::abs(gold(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) - dist);
    }
  }
  return total / static_cast<double>(n * n);
}

Gradients gradients(const ProbeParams& p, std::span<const ProbeExample> batch) {
  return batch_gradients(p, batch.size(),
                         [&](std::size_t s) -> const ProbeExample& { return batch[s]; });
}

Gradients gradients(const ProbeParams& p, std::span<const ProbeExample* const> batch) {
  return batch_gradients(p, batch.size(),
                         [&](std::size_t s) -> const ProbeExample& { return *batch[s]; });
}

BundleSource::BundleSource(const BundleReader& reader, const std::vector<DepSentence>& sentences,
                           std::size_t layer_count)
    : reader_(&reader), sentences_(&sentences), layer_count_(layer_count) {
  verify_alignment(reader.manifest(), sentences);
}

ProbeExample BundleSource::get(std::size_t index) const {
  return {reader_->read_layers(index, layer_count_), gold_distances((*sentences_)[index])};
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},
          {"adam_eps", adam_eps},
          {"plateau_factor", plateau_factor},
          {"plateau_patience", plateau_patience},
          {"plateau_threshold", plateau_threshold},
          {"min_learning_rate", min_learning_rate},
          {"seed", seed},
          {"rank", rank}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.plateau_factor = j.value("plateau_factor", c.plateau_factor);
  c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
  c.plateau_threshold = j.value("plateau_threshold", c.plateau_threshold);
  c.min_learning_rate = j.value("min_learning_rate", c.min_learning_rate);
  c.seed = j.value("seed", c.seed);
  c.rank = j.value("rank", c.rank);
  if (!(c.learning_rate >= 0.0)) throw ValidationError("learning_rate must be >= 0");
  if (c.epochs < 1) throw ValidationError("epochs must be >= 1");
  if (c.batch_size < 1) throw ValidationError("batch_size must be >= 1");
  return c;
}

TrainResult train_probe(std::size_t layer, std::size_t dim, const ExampleSource& train,
                        const ExampleSource& dev, const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw ValidationError("epochs must be >= 1");
  if (cfg.batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (train.size() == 0) throw ValidationError("train_probe: empty training set");

  Rng rng(cfg.seed);
  TrainResult result;
  ProbeParams p = init_probe(layer, dim, cfg.rank, rng.next());
  result.initial = p;
  result.params = p;

  AdamState st;
  st.m_proj = st.v_proj = Eigen::MatrixXd::Zero(p.projection.rows(), p.projection.cols());
  st.m_mix = st.v_mix = Eigen::VectorXd::Zero(p.mix_logits.size());

  const ExampleSource& monitor = dev.size() > 0 ? dev : train;
  double best = mean_loss(p, monitor);
  if (!std::isfinite(best)) throw DivergenceError("non-finite loss at initialisation");
  double plateau_best = best;
  std::size_t bad_epochs = 0;
  double lr = cfg.learning_rate;

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<ProbeExample> batch;
  batch.reserve(cfg.batch_size);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double train_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      for (std::size_t k = start; k < stop; ++k) batch.push_back(train.get(order[k]));
      const Gradients g = gradients(p, std::span<const ProbeExample>(batch));
      if (!std::isfinite(g.loss) || !std::isfinite(g.scale) || !g.projection.allFinite() ||
          !g.mix_logits.allFinite()) {
        throw DivergenceError("non-finite loss or gradient in epoch " + std::to_string(epoch) +
                              " (layer " + std::to_string(layer) + ")");
      }
      result.zero_distance_pairs += g.zero_distance_pairs;
      train_total += g.loss * static_cast<double>(stop - start);
      adam_step(p, g, st, cfg, lr);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_total / static_cast<double>(order.size());
    rec.dev_loss = mean_loss(p, monitor);
    rec.learning_rate = lr;
    if (!std::isfinite(rec.dev_loss) || !std::isfinite(rec.train_loss)) {
      throw DivergenceError("non-finite loss after epoch " + std::to_string(epoch) + " (layer " +
                            std::to_string(layer) + ")");
    }
    if (rec.dev_loss < best) {
      best = rec.dev_loss;
      result.params = p;
      result.best_epoch = epoch;
    }
    if (rec.dev_loss < plateau_best * (1.0 - cfg.plateau_threshold)) {
      plateau_best = rec.dev_loss;
      bad_epochs = 0;
    } else if (++bad_epochs > cfg.plateau_patience) {
      const double reduced = std::max(lr * cfg.plateau_factor, cfg.min_learning_rate);
      if (reduced < lr) {
        lr = reduced;
        rec.lr_reduced = true;
      }
      bad_epochs = 0;
    }
    result.history.push_back(rec);
  }
  return result;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,train_loss,dev_loss,learning_rate,lr_reduced\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << r.train_loss << ',' << r.dev_loss << ',' << r.learning_rate << ','
        << (r.lr_reduced ? 1 : 0) << '\n';
  }
  return out.str();
}

void save_checkpoint(const std::string& path, const ProbeParams& p, const nlohmann::json& meta) {
  nlohmann::json manifest = meta;
  manifest["format_version"] = 1;
  manifest["layer"] = p.layer;
  manifest["dim"] = p.dim();
  manifest["rank"] = p.rank();
  std::string bytes = encode_header(kCheckpointMagic, manifest);
  append_floats_le(bytes, std::span<const float>(p.mix_logits.data(),
                                                 static_cast<std::size_t>(p.mix_logits.size())));
  append_floats_le(bytes, std::span<const float>(&p.scale, 1));
  const RowMatrixXf rows = p.projection;
  append_floats_le(bytes, std::span<const float>(rows.data(), static_cast<std::size_t>(rows.size())));

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write checkpoint: " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint: " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12) throw FormatError(path + ": too short to be a checkpoint");
  const std::string_view magic(bytes.data(), 8);
  if (magic != kCheckpointMagic) {
    if (magic.substr(0, 6) == kCheckpointMagic.substr(0, 6)) {
      throw FormatError(path + ": checkpoint version mismatch: found '" + std::string(magic) +
                        "', expected '" + std::string(kCheckpointMagic) + "'");
    }
    throw FormatError(path + ": not a probe checkpoint (bad magic)");
  }
  const auto* u = reinterpret_cast<const unsigned char*>(bytes.data() + 8);
  const std::uint64_t len = u[0] | (u[1] << 8) | (u[2] << 16) | (static_cast<std::uint64_t>(u[3]) << 24);
  if (12 + len > bytes.size()) throw FormatError(path + ": truncated manifest");

  Checkpoint ck;
  try {
    ck.meta = nlohmann::json::parse(bytes.substr(12, len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": manifest is not valid JSON: " + e.what());
  }
  if (ck.meta.value("format_version", 0) != 1) {
    throw FormatError(path + ": unsupported checkpoint format_version");
  }
  std::size_t layer = 0, dim = 0, rank = 0;
  try {
    layer = ck.meta.at("layer").get<std::size_t>();
    dim = ck.meta.at("dim").get<std::size_t>();
    rank = ck.meta.at("rank").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed checkpoint manifest: " + e.what());
  }
  const std::size_t floats = (layer + 1) + 1 + rank * dim;
  const std::uint64_t expected = floats * 4;
  const std::uint64_t found = bytes.size() - 12 - len;
  if (found < expected) {
    throw FormatError(path + ": truncated payload: expected " + std::to_string(expected) +
                      " bytes, found " + std::to_string(found));
  }
  if (found > expected) {
    throw FormatError(path + ": trailing bytes: expected " + std::to_string(expected) +
                      " payload bytes, found " + std::to_string(found));
  }
  const auto values = decode_floats_le(bytes.data() + 12 + len, floats);
  ProbeParams& p = ck.params;
  p.layer = layer;
  p.mix_logits = Eigen::Map<const Eigen::VectorXf>(values.data(), static_cast<Eigen::Index>(layer + 1));
  p.scale = values[layer + 1];
  p.projection = Eigen::Map<const RowMatrixXf>(values.data() + layer + 2,
                                               static_cast<Eigen::Index>(rank),
                                               static_cast<Eigen::Index>(dim));
  return ck;
}

}  // namespace dprobe

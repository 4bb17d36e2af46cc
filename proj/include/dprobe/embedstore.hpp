#pragma once

// Embedding bundle: one file holding per-layer, word-level embeddings for
// every sentence of a companion CoNLL-U treebank.
//
// Byte layout (all integers little-endian):
//
//   offset 0   8 bytes   magic "DPROBE01" (the trailing digits are the version)
//   offset 8   u32       manifest length M in bytes
//   offset 12  M bytes   manifest, UTF-8 JSON (see BundleManifest)
//   12 + M     payload   per sentence, in manifest order, a float32 tensor of
//                        shape [L+1][T][d], row-major, layer-major
//
// Sentence offsets in the manifest are relative to the start of the payload.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dprobe/corpus.hpp"

namespace dprobe {

// Dense [layers][tokens][dim] float tensor.
struct LayerTensor {
  std::size_t layers = 0;
  std::size_t tokens = 0;
  std::size_t dim = 0;
  std::vector<float> data;

  LayerTensor() = default;
  LayerTensor(std::size_t layers_, std::size_t tokens_, std::size_t dim_)
      : layers(layers_), tokens(tokens_), dim(dim_), data(layers_ * tokens_ * dim_, 0.0f) {}

  std::span<float> vec(std::size_t layer, std::size_t token) {
    return {data.data() + (layer * tokens + token) * dim, dim};
  }
  std::span<const float> vec(std::size_t layer, std::size_t token) const {
    return {data.data() + (layer * tokens + token) * dim, dim};
  }
  std::span<const float> layer(std::size_t l) const {
    return {data.data() + l * tokens * dim, tokens * dim};
  }

  // Copy of layers [0, count).
  LayerTensor prefix(std::size_t count) const;
};

inline constexpr std::string_view kBundleMagic = "DPROBE01";
inline constexpr std::string_view kCheckpointMagic = "DPCKPT01";

struct BundleEntry {
  std::string id;
  std::size_t tokens = 0;
  std::uint64_t offset = 0;
};

struct BundleManifest {
  std::string model_name;
  std::size_t num_layers = 0;  // L; the bundle holds L+1 hidden-state sets
  std::size_t hidden_dim = 0;
  std::string dtype = "float32";
  std::string endianness = "little";
  std::string pooling = "mean";
  std::vector<BundleEntry> sentences;

  std::uint64_t sentence_bytes(std::size_t tokens) const {
    return static_cast<std::uint64_t>(num_layers + 1) * tokens * hidden_dim * sizeof(float);
  }
  std::uint64_t payload_bytes() const;

  // Fills offsets from token counts.
  void assign_offsets();

  nlohmann::json to_json() const;
  static BundleManifest from_json(const nlohmann::json& j);
};

// Throws AlignmentError unless the manifest lists exactly the treebank's
// sentence ids, in order, with matching token counts.
void verify_alignment(const BundleManifest& manifest, const std::vector<DepSentence>& sents);

// Header framing shared by bundles and probe checkpoints.
std::string encode_header(std::string_view magic, const nlohmann::json& manifest);
void append_floats_le(std::string& out, std::span<const float> values);
std::vector<float> decode_floats_le(const char* bytes, std::size_t count);

// Writes atomically (temporary file then rename) once finish() succeeds.
// Sentences must be appended in manifest order.
class BundleWriter {
 public:
  BundleWriter(BundleManifest manifest, std::string path);
  ~BundleWriter();
  BundleWriter(const BundleWriter&) = delete;
  BundleWriter& operator=(const BundleWriter&) = delete;

  void append(const LayerTensor& sentence);
  void finish();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

void write_bundle(const BundleManifest& manifest, std::span<const LayerTensor> sentences,
                  const std::string& path);

// Random-access reader; read() is safe to call from several threads.
class BundleReader {
 public:
  explicit BundleReader(const std::string& path);
  ~BundleReader();
  BundleReader(BundleReader&&) noexcept;
  BundleReader& operator=(BundleReader&&) noexcept;

  const BundleManifest& manifest() const { return manifest_; }
  std::size_t size() const { return manifest_.sentences.size(); }

  LayerTensor read(std::size_t index) const;
  // Only layers [0, layer_count); the layer-major layout makes this one read.
  LayerTensor read_layers(std::size_t index, std::size_t layer_count) const;

 private:
  int fd_ = -1;
  std::string path_;
  std::uint64_t payload_start_ = 0;
  BundleManifest manifest_;
};

enum class PoolingRule { Mean, First };

PoolingRule parse_pooling(const std::string& tag);
std::string pooling_tag(PoolingRule rule);

// Half-open subword range [begin, end) covering one word.
struct SubwordSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
};

// Collapses [L+1][S][d] subword states to [L+1][T][d] word states.
// Spans must be non-empty, ordered and non-overlapping; subwords outside every
// span (sentence delimiters) are ignored.
LayerTensor pool_subwords(const LayerTensor& subwords, std::span<const SubwordSpan> alignment,
                          PoolingRule rule = PoolingRule::Mean);

}  // namespace dprobe

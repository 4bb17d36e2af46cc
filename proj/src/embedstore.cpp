#include "dprobe/embedstore.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <bit>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "dprobe/error.hpp"

namespace dprobe {

namespace {

void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void read_exact(int fd, void* dst, std::size_t bytes, std::uint64_t offset,
                const std::string& path) {
  auto* out = static_cast<char*>(dst);
  std::size_t done = 0;
  while (done < bytes) {
    const ssize_t got = ::pread(fd, out + done, bytes - done, static_cast<off_t>(offset + done));
    if (got < 0) {
      if (errno == EINTR) continue;
      throw FormatError(path + ": read failed: " + std::strerror(errno));
    }
    if (got == 0) throw FormatError(path + ": unexpected end of file");
    done += static_cast<std::size_t>(got);
  }
}

}  // namespace

LayerTensor LayerTensor::prefix(std::size_t count) const {
  LayerTensor out(count, tokens, dim);
  std::copy_n(data.begin(), count * tokens * dim, out.data.begin());
  return out;
}

std::uint64_t BundleManifest::payload_bytes() const {
  std::uint64_t total = 0;
  for (const auto& e : sentences) total += sentence_bytes(e.tokens);
  return total;
}

void BundleManifest::assign_offsets() {
  std::uint64_t offset = 0;
  for (auto& e : sentences) {
    e.offset = offset;
    offset += sentence_bytes(e.tokens);
  }
}

nlohmann::json BundleManifest::to_json() const {
  nlohmann::json index = nlohmann::json::array();
  for (const auto& e : sentences) index.push_back({e.id, e.tokens, e.offset});
  return {{"format_version", 1},   {"model_name", model_name}, {"num_layers", num_layers},
          {"hidden_dim", hidden_dim}, {"dtype", dtype},       {"endianness", endianness},
          {"pooling", pooling},     {"sentences", index}};
}

BundleManifest BundleManifest::from_json(const nlohmann::json& j) {
  BundleManifest m;
  try {
    if (j.at("format_version").get<int>() != 1) {
      throw FormatError("unsupported manifest format_version " + j.at("format_version").dump());
    }
    m.model_name = j.at("model_name").get<std::string>();
    m.num_layers = j.at("num_layers").get<std::size_t>();
    m.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    m.dtype = j.at("dtype").get<std::string>();
    m.endianness = j.at("endianness").get<std::string>();
    m.pooling = j.at("pooling").get<std::string>();
    for (const auto& row : j.at("sentences")) {
      m.sentences.push_back(
          {row.at(0).get<std::string>(), row.at(1).get<std::size_t>(), row.at(2).get<std::uint64_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed bundle manifest: ") + e.what());
  }
  if (m.num_layers < 1) throw FormatError("bundle manifest: num_layers must be >= 1");
  if (m.hidden_dim < 1) throw FormatError("bundle manifest: hidden_dim must be >= 1");
  if (m.dtype != "float32") throw FormatError("bundle manifest: unsupported dtype " + m.dtype);
  if (m.endianness != "little") {
    throw FormatError("bundle manifest: unsupported endianness " + m.endianness);
  }
  std::uint64_t expected = 0;
  for (std::size_t i = 0; i < m.sentences.size(); ++i) {
    const auto& e = m.sentences[i];
    if (e.offset != expected || (i > 0 && e.offset <= m.sentences[i - 1].offset)) {
      throw FormatError("bundle manifest: offset of sentence " + e.id + " is " +
                        std::to_string(e.offset) + ", expected " + std::to_string(expected));
    }
    expected += m.sentence_bytes(e.tokens);
  }
  return m;
}

void verify_alignment(const BundleManifest& manifest, const std::vector<DepSentence>& sents) {
  if (manifest.sentences.size() != sents.size()) {
    throw AlignmentError("bundle has " + std::to_string(manifest.sentences.size()) +
                         " sentences, treebank has " + std::to_string(sents.size()));
  }
  for (std::size_t i = 0; i < sents.size(); ++i) {
    const auto& e = manifest.sentences[i];
    if (e.id != sents[i].id) {
      throw AlignmentError("sentence " + std::to_string(i) + ": bundle id '" + e.id +
                           "' != treebank id '" + sents[i].id + "'");
    }
    if (e.tokens != sents[i].size()) {
      throw AlignmentError("sentence " + e.id + ": bundle has " + std::to_string(e.tokens) +
                           " tokens, treebank has " + std::to_string(sents[i].size()));
    }
  }
}

std::string encode_header(std::string_view magic, const nlohmann::json& manifest) {
  const std::string body = manifest.dump();
  std::string out(magic);
  put_u32_le(out, static_cast<std::uint32_t>(body.size()));
  out += body;
  return out;
}

void append_floats_le(std::string& out, std::span<const float> values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * 4);
  char* dst = out.data() + start;
  for (float v : values) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) *dst++ = static_cast<char>((bits >> (8 * i)) & 0xffu);
  }
}

std::vector<float> decode_floats_le(const char* bytes, std::size_t count) {
  std::vector<float> out(count);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < count; ++i, p += 4) out[i] = std::bit_cast<float>(get_u32_le(p));
  return out;
}

struct BundleWriter::Impl {
  BundleManifest manifest;
  std::string path;
  std::string tmp_path;
  std::ofstream out;
  std::size_t next = 0;
  bool finished = false;
};

BundleWriter::BundleWriter(BundleManifest manifest, std::string path)
    : impl_(std::make_unique<Impl>()) {
  if (manifest.num_layers < 1 || manifest.hidden_dim < 1) {
    throw ValidationError("bundle manifest needs num_layers >= 1 and hidden_dim >= 1");
  }
  manifest.assign_offsets();
  impl_->manifest = std::move(manifest);
  impl_->path = std::move(path);
  impl_->tmp_path = impl_->path + ".tmp";
  impl_->out.open(impl_->tmp_path, std::ios::binary | std::ios::trunc);
  if (!impl_->out) throw ValidationError("cannot write bundle: " + impl_->path);
  const std::string header = encode_header(kBundleMagic, impl_->manifest.to_json());
  impl_->out.write(header.data(), static_cast<std::streamsize>(header.size()));
}

BundleWriter::~BundleWriter() {
  if (impl_ && !impl_->finished) {
    impl_->out.close();
    std::error_code ec;
    std::filesystem::remove(impl_->tmp_path, ec);
  }
}

void BundleWriter::append(const LayerTensor& t) {
  const auto& m = impl_->manifest;
  if (impl_->next >= m.sentences.size()) {
    throw ValidationError("bundle writer: more sentences than the manifest lists");
  }
  const auto& entry = m.sentences[impl_->next];
  if (t.layers != m.num_layers + 1 || t.tokens != entry.tokens || t.dim != m.hidden_dim ||
      t.data.size() != t.layers * t.tokens * t.dim) {
    throw ValidationError("bundle writer: sentence " + entry.id + " has shape [" +
                          std::to_string(t.layers) + "][" + std::to_string(t.tokens) + "][" +
                          std::to_string(t.dim) + "], manifest expects [" +
                          std::to_string(m.num_layers + 1) + "][" + std::to_string(entry.tokens) +
                          "][" + std::to_string(m.hidden_dim) + "]");
  }
  for (float v : t.data) {
    if (!std::isfinite(v)) {
      throw ValidationError("bundle writer: non-finite value in sentence " + entry.id);
    }
  }
  std::string bytes;
  append_floats_le(bytes, t.data);
  impl_->out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  ++impl_->next;
}

void BundleWriter::finish() {
  if (impl_->next != impl_->manifest.sentences.size()) {
    throw ValidationError("bundle writer: " + std::to_string(impl_->next) + " of " +
                          std::to_string(impl_->manifest.sentences.size()) +
                          " sentences written");
  }
  impl_->out.close();
  if (!impl_->out) throw Error("bundle writer: write failed for " + impl_->path);
  std::filesystem::rename(impl_->tmp_path, impl_->path);
  impl_->finished = true;
}

void write_bundle(const BundleManifest& manifest, std::span<const LayerTensor> sentences,
                  const std::string& path) {
  BundleWriter writer(manifest, path);
  for (const auto& s : sentences) writer.append(s);
  writer.finish();
}

BundleReader::BundleReader(const std::string& path) : path_(path) {
  fd_ = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd_ < 0) throw ValidationError("cannot open bundle: " + path);
  try {
    struct stat st {};
    ::fstat(fd_, &st);
    const auto file_size = static_cast<std::uint64_t>(st.st_size);
    if (file_size < 12) throw FormatError(path + ": too short to be a bundle");

    unsigned char head[12];
    read_exact(fd_, head, sizeof head, 0, path);
    const std::string_view magic(reinterpret_cast<const char*>(head), 8);
    if (magic != kBundleMagic) {
      if (magic.substr(0, 6) == kBundleMagic.substr(0, 6)) {
        throw FormatError(path + ": bundle version mismatch: found '" + std::string(magic) +
                          "', expected '" + std::string(kBundleMagic) + "'");
      }
      throw FormatError(path + ": not an embedding bundle (bad magic)");
    }
    const std::uint32_t manifest_len = get_u32_le(head + 8);
    if (12 + static_cast<std::uint64_t>(manifest_len) > file_size) {
      throw FormatError(path + ": truncated manifest");
    }
    std::string body(manifest_len, '\0');
    read_exact(fd_, body.data(), manifest_len, 12, path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ": manifest is not valid JSON: " + e.what());
    }
    manifest_ = BundleManifest::from_json(j);
    payload_start_ = 12 + manifest_len;
    // byte counts in these messages refer to the payload alone
    const std::uint64_t expected = manifest_.payload_bytes();
    const std::uint64_t found = file_size - payload_start_;
    if (found < expected) {
      throw FormatError(path + ": truncated payload: expected " + std::to_string(expected) +
                        " bytes, found " + std::to_string(found));
    }
    if (found > expected) {
      throw FormatError(path + ": trailing bytes: expected " + std::to_string(expected) +
                        " payload bytes, found " + std::to_string(found));
    }
  } catch (...) {
    ::close(fd_);
    fd_ = -1;
    throw;
  }
}

BundleReader::~BundleReader() {
  if (fd_ >= 0) ::close(fd_);
}

BundleReader::BundleReader(BundleReader&& other) noexcept
    : fd_(std::exchange(other.fd_, -1)),
      path_(std::move(other.path_)),
      payload_start_(other.payload_start_),
      manifest_(std::move(other.manifest_)) {}

BundleReader& BundleReader::operator=(BundleReader&& other) noexcept {
  if (this != &other) {
    if (fd_ >= 0) ::close(fd_);
    fd_ = std::exchange(other.fd_, -1);
    path_ = std::move(other.path_);
    payload_start_ = other.payload_start_;
    manifest_ = std::move(other.manifest_);
  }
  return *this;
}

LayerTensor BundleReader::read(std::size_t index) const {
  return read_layers(index, manifest_.num_layers + 1);
}

LayerTensor BundleReader::read_layers(std::size_t index, std::size_t layer_count) const {
  if (index >= manifest_.sentences.size()) throw ValidationError("bundle index out of range");
  if (layer_count > manifest_.num_layers + 1) {
    throw ValidationError("bundle " + path_ + " has only " +
                          std::to_string(manifest_.num_layers + 1) + " layers");
  }
  const auto& e = manifest_.sentences[index];
  const std::size_t count = layer_count * e.tokens * manifest_.hidden_dim;
  std::string raw(count * 4, '\0');
  read_exact(fd_, raw.data(), raw.size(), payload_start_ + e.offset, path_);
  LayerTensor t;
  t.layers = layer_count;
  t.tokens = e.tokens;
  t.dim = manifest_.hidden_dim;
  if constexpr (std::endian::native == std::endian::little) {
    t.data.resize(count);
    std::memcpy(t.data.data(), raw.data(), raw.size());
  } else {
    t.data = decode_floats_le(raw.data(), count);
  }
  return t;
}

PoolingRule parse_pooling(const std::string& tag) {
  if (tag == "mean") return PoolingRule::Mean;
  if (tag == "first") return PoolingRule::First;
  throw ValidationError("unknown pooling rule: " + tag);
}

std::string pooling_tag(PoolingRule rule) { return rule == PoolingRule::Mean ? "mean" : "first"; }

LayerTensor pool_subwords(const LayerTensor& subwords, std::span<const SubwordSpan> alignment,
                          PoolingRule rule) {
  std::size_t prev_end = 0;
  for (std::size_t w = 0; w < alignment.size(); ++w) {
    const auto& span = alignment[w];
    if (span.end <= span.begin) {
      throw ValidationError("pool_subwords: word " + std::to_string(w) + " has an empty span");
    }
    if (span.begin < prev_end || span.end > subwords.tokens) {
      throw ValidationError("pool_subwords: span of word " + std::to_string(w) +
                            " overlaps or exceeds the subword sequence");
    }
    prev_end = span.end;
  }
  LayerTensor out(subwords.layers, alignment.size(), subwords.dim);
  for (std::size_t l = 0; l < subwords.layers; ++l) {
    for (std::size_t w = 0; w < alignment.size(); ++w) {
      const auto& span = alignment[w];
      const std::size_t last = rule == PoolingRule::Mean ? span.end : span.begin + 1;
      auto dst = out.vec(l, w);
      for (std::size_t k = 0; k < subwords.dim; ++k) {
        double acc = 0.0;
        for (std::size_t s = span.begin; s < last; ++s) acc += subwords.vec(l, s)[k];
        dst[k] = static_cast<float>(acc / static_cast<double>(last - span.begin));
      }
    }
  }
  return out;
}

}  // namespace dprobe

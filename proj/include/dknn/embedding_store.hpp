#pragma once

#include "dknn/corpus.hpp"

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace dknn {

enum class EmbeddingSource { Remote, File };

struct EmbeddingVector {
  std::string doc_id;
  std::vector<double> values;
  EmbeddingSource source = EmbeddingSource::File;
  bool normalized = false;
};

/// Cosine similarity. Throws Error{DimensionMismatch} on unequal lengths
/// and Error{ZeroVector} when either vector has zero norm.
double cosine(std::span<const double> u, std::span<const double> v);

struct Neighbor {
  std::string doc_id;
  double cosine = 0.0;
};

struct NeighborList {
  std::string target_id;
  std::vector<Neighbor> neighbors;  // cosine descending, ties by doc_id ascending

  std::vector<std::string> ids() const;
};

/// Exact-search vector store. All vectors share one dimension; queries are
/// const and may run concurrently once the store is populated.
class EmbeddingStore {
 public:
  /// Throws Error{DimensionMismatch} if the dimension differs from the
  /// store's, Error{ZeroVector} for an all-zero vector. Replaces an
  /// existing vector with the same id.
  void add(EmbeddingVector vector);

  std::size_t size() const noexcept { return vectors_.size(); }
  bool empty() const noexcept { return vectors_.empty(); }
  std::size_t dimension() const noexcept { return dimension_; }
  bool contains(const std::string& id) const { return index_.count(id) > 0; }
  /// Throws Error{UnknownDocId}.
  const EmbeddingVector& at(const std::string& id) const;
  const std::vector<EmbeddingVector>& vectors() const noexcept { return vectors_; }

  double similarity(const std::string& a, const std::string& b) const;

  /// Top-k of `pool` by cosine to `target_id`.
  /// Errors: UnknownDocId, KTooLarge, InvalidArgument (target in pool, k < 1).
  NeighborList nearest_neighbors(const std::string& target_id, std::span<const std::string> pool,
                                 std::size_t k) const;

 private:
  std::size_t dimension_ = 0;
  std::vector<EmbeddingVector> vectors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// JSONL, one `{"id": "...", "vector": [...]}` per line.
EmbeddingStore load_embeddings(const std::filesystem::path& path);
void save_embeddings(const EmbeddingStore& store, const std::filesystem::path& path);

/// One file per content hash of (model, text). Writes are serialized.
class EmbeddingCache {
 public:
  explicit EmbeddingCache(std::filesystem::path directory);

  static std::string key(const std::string& model_name, const std::string& text);
  std::optional<std::vector<double>> get(const std::string& model_name, const std::string& text) const;
  void put(const std::string& model_name, const std::string& text, const std::vector<double>& values);

  const std::filesystem::path& directory() const noexcept { return directory_; }

 private:
  std::filesystem::path directory_;
  mutable std::mutex write_mutex_;
};

struct RemoteEmbedderConfig {
  std::string base_url;
  std::string model_name = "text-embedding-3-large";
  std::string api_key_env = "LLM_API_KEY";
  std::chrono::milliseconds timeout{60'000};
  std::size_t batch_size = 64;
  int max_retries = 2;
};

/// Client for `POST {base_url}/v1/embeddings`, backed by an on-disk cache.
class RemoteEmbedder {
 public:
  RemoteEmbedder(RemoteEmbedderConfig config, std::filesystem::path cache_dir);

  /// One vector per text, order preserved. Cached texts cost no request.
  std::vector<std::vector<double>> embed_texts(const std::vector<std::string>& texts);
  EmbeddingStore embed_corpus(const Corpus& corpus);

  std::size_t network_calls() const noexcept { return network_calls_; }

 private:
  std::vector<std::vector<double>> request(const std::vector<std::string>& texts);

  RemoteEmbedderConfig config_;
  EmbeddingCache cache_;
  std::size_t network_calls_ = 0;
};

}  // namespace dknn

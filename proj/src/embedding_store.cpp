#include "dknn/embedding_store.hpp"

#include "dknn/error.hpp"
#include "dknn/hashing.hpp"
#include "http_json.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

namespace dknn {

namespace {

using nlohmann::json;

double norm(std::span<const double> v) {
  double sum = 0.0;
  for (double x : v) sum += x * x;
  return std::sqrt(sum);
}

bool unit_norm(std::span<const double> v) { return std::abs(norm(v) - 1.0) <= 1e-6; }

bool neighbor_before(const Neighbor& a, const Neighbor& b) {
  if (a.cosine != b.cosine) return a.cosine > b.cosine;
  return a.doc_id < b.doc_id;
}

}  // namespace

double cosine(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw Error(ErrorCode::DimensionMismatch,
                "cosine of vectors with " + std::to_string(u.size()) + " and " + std::to_string(v.size()) + " dims");
  }
  double dot = 0.0;
  double uu = 0.0;
  double vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) throw Error(ErrorCode::ZeroVector, "cosine with an all-zero vector");
  return std::clamp(dot / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

std::vector<std::string> NeighborList::ids() const {
  std::vector<std::string> out;
  out.reserve(neighbors.size());
  for (const auto& n : neighbors) out.push_back(n.doc_id);
  return out;
}

void EmbeddingStore::add(EmbeddingVector vector) {
  if (vector.values.empty()) throw Error(ErrorCode::DimensionMismatch, "empty vector for \"" + vector.doc_id + "\"");
  if (dimension_ == 0) dimension_ = vector.values.size();
  if (vector.values.size() != dimension_) {
    throw Error(ErrorCode::DimensionMismatch, "vector \"" + vector.doc_id + "\" has " +
                                                  std::to_string(vector.values.size()) + " dims, store has " +
                                                  std::to_string(dimension_));
  }
  if (norm(vector.values) == 0.0) throw Error(ErrorCode::ZeroVector, "vector \"" + vector.doc_id + "\" is all zeros");
  vector.normalized = unit_norm(vector.values);
  if (const auto it = index_.find(vector.doc_id); it != index_.end()) {
    vectors_[it->second] = std::move(vector);
    return;
  }
  index_.emplace(vector.doc_id, vectors_.size());
  vectors_.push_back(std::move(vector));
}

const EmbeddingVector& EmbeddingStore::at(const std::string& id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) throw Error(ErrorCode::UnknownDocId, "no embedding for \"" + id + "\"");
  return vectors_[it->second];
}

double EmbeddingStore::similarity(const std::string& a, const std::string& b) const {
  return cosine(at(a).values, at(b).values);
}

NeighborList EmbeddingStore::nearest_neighbors(const std::string& target_id, std::span<const std::string> pool,
                                               std::size_t k) const {
  if (k < 1) throw Error(ErrorCode::InvalidArgument, "k must be positive");
  if (k > pool.size()) {
    throw Error(ErrorCode::KTooLarge, "k=" + std::to_string(k) + " exceeds pool size " + std::to_string(pool.size()));
  }
  const auto& target = at(target_id).values;
  std::vector<Neighbor> scored;
  scored.reserve(pool.size());
  for (const auto& id : pool) {
    if (id == target_id) throw Error(ErrorCode::InvalidArgument, "target \"" + id + "\" is in its own pool");
    scored.push_back({id, cosine(target, at(id).values)});
  }
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(), neighbor_before);
  scored.resize(k);
  return NeighborList{target_id, std::move(scored)};
}

EmbeddingStore load_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open embeddings " + path.string());
  EmbeddingStore store;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    EmbeddingVector v;
    try {
      const auto j = json::parse(line);
      v.doc_id = j.at("id").get<std::string>();
      v.values = j.at("vector").get<std::vector<double>>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::MalformedRecord, path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
    v.source = EmbeddingSource::File;
    store.add(std::move(v));
  }
  return store;
}

void save_embeddings(const EmbeddingStore& store, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  for (const auto& v : store.vectors()) out << json{{"id", v.doc_id}, {"vector", v.values}}.dump() << '\n';
}

// ---------------------------------------------------------------------------

EmbeddingCache::EmbeddingCache(std::filesystem::path directory) : directory_(std::move(directory)) {
  std::error_code ec;
  std::filesystem::create_directories(directory_, ec);
  if (ec) throw Error(ErrorCode::Io, "cannot create cache directory " + directory_.string() + ": " + ec.message());
}

std::string EmbeddingCache::key(const std::string& model_name, const std::string& text) {
  std::string material = model_name;
  material.push_back('\0');
  material += text;
  return sha256_hex(material);
}

std::optional<std::vector<double>> EmbeddingCache::get(const std::string& model_name, const std::string& text) const {
  std::ifstream in(directory_ / (key(model_name, text) + ".json"));
  if (!in) return std::nullopt;
  try {
    json j;
    in >> j;
    return j.at("embedding").get<std::vector<double>>();
  } catch (const json::exception&) {
    return std::nullopt;  // corrupt entry: re-embed
  }
}

void EmbeddingCache::put(const std::string& model_name, const std::string& text, const std::vector<double>& values) {
  std::lock_guard lock(write_mutex_);
  const auto final_path = directory_ / (key(model_name, text) + ".json");
  const auto tmp_path = final_path.string() + ".tmp";
  {
    std::ofstream out(tmp_path, std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot write cache entry " + tmp_path);
    out << json{{"model", model_name}, {"dim", values.size()}, {"embedding", values}}.dump();
  }
  std::filesystem::rename(tmp_path, final_path);
}

RemoteEmbedder::RemoteEmbedder(RemoteEmbedderConfig config, std::filesystem::path cache_dir)
    : config_(std::move(config)), cache_(std::move(cache_dir)) {
  if (config_.batch_size == 0) config_.batch_size = 1;
}

std::vector<std::vector<double>> RemoteEmbedder::request(const std::vector<std::string>& texts) {
  if (config_.base_url.empty()) throw Error(ErrorCode::ConfigError, "embedding base_url is not set");
  const json body = {{"model", config_.model_name}, {"input", texts}};
  for (int attempt = 0;; ++attempt) {
    try {
      ++network_calls_;
      const auto response = detail::post_json(config_.base_url, "/v1/embeddings", body.dump(),
                                              detail::env_or_empty(config_.api_key_env), config_.timeout);
      detail::check_status(response, "embeddings");
      std::vector<std::vector<double>> out(texts.size());
      try {
        const auto j = json::parse(response.body);
        const auto& data = j.at("data");
        if (data.size() != texts.size()) {
          throw Error(ErrorCode::TransportError, "embeddings response has " + std::to_string(data.size()) +
                                                     " items for " + std::to_string(texts.size()) + " inputs");
        }
        for (std::size_t i = 0; i < data.size(); ++i) {
          const auto slot = data[i].contains("index") ? data[i]["index"].get<std::size_t>() : i;
          if (slot >= out.size()) throw Error(ErrorCode::TransportError, "embedding index out of range");
          out[slot] = data[i].at("embedding").get<std::vector<double>>();
        }
      } catch (const json::exception& e) {
        throw Error(ErrorCode::TransportError, std::string("malformed embeddings response: ") + e.what());
      }
      return out;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::TransportError || attempt >= config_.max_retries) throw;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(200) * (1 << std::min(attempt, 10)));
  }
}

std::vector<std::vector<double>> RemoteEmbedder::embed_texts(const std::vector<std::string>& texts) {
  if (texts.empty()) throw Error(ErrorCode::InvalidArgument, "no texts to embed");
  std::vector<std::vector<double>> out(texts.size());
  std::vector<std::size_t> missing;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (auto hit = cache_.get(config_.model_name, texts[i])) {
      out[i] = std::move(*hit);
    } else {
      missing.push_back(i);
    }
  }
  for (std::size_t start = 0; start < missing.size(); start += config_.batch_size) {
    const auto stop = std::min(missing.size(), start + config_.batch_size);
    std::vector<std::string> batch;
    for (std::size_t m = start; m < stop; ++m) batch.push_back(texts[missing[m]]);
    auto vectors = request(batch);
    for (std::size_t m = start; m < stop; ++m) {
      auto& v = vectors[m - start];
      cache_.put(config_.model_name, texts[missing[m]], v);
      out[missing[m]] = std::move(v);
    }
  }
  const auto dim = out.front().size();
  for (const auto& v : out) {
    if (v.size() != dim || dim == 0) {
      throw Error(ErrorCode::DimensionMismatch, "endpoint returned inconsistent embedding dimensions");
    }
  }
  return out;
}

EmbeddingStore RemoteEmbedder::embed_corpus(const Corpus& corpus) {
  std::vector<std::string> texts;
  texts.reserve(corpus.size());
  for (const auto& d : corpus) texts.push_back(d.text);
  auto vectors = embed_texts(texts);
  EmbeddingStore store;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    store.add(EmbeddingVector{corpus[i].id, std::move(vectors[i]), EmbeddingSource::Remote, false});
  }
  return store;
}

}  // namespace dknn

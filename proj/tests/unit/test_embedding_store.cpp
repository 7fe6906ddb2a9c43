#include "dknn/embedding_store.hpp"
#include "dknn/error.hpp"
#include "support/local_server.hpp"
#include "support/test_support.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

using namespace dknn;
using namespace dknn::testing;
using nlohmann::json;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::Io;
}

double cos2(std::vector<double> u, std::vector<double> v) { return cosine(u, v); }

}  // namespace

TEST(Cosine, SpecExamples) {
  EXPECT_DOUBLE_EQ(cos2({1, 0}, {0, 1}), 0.0);
  EXPECT_NEAR(cos2({2, 2}, {1, 1}), 1.0, 1e-15);
  // 32 / sqrt(14 * 77)
  EXPECT_NEAR(cos2({1, 2, 3}, {4, 5, 6}), 0.9746318461970762, 1e-15);
  EXPECT_EQ(code_of([] { cos2({1, 2}, {1, 2, 3}); }), ErrorCode::DimensionMismatch);
  EXPECT_EQ(code_of([] { cos2({0, 0}, {1, 2}); }), ErrorCode::ZeroVector);
}

TEST(CosineProperty, SymmetryIdentityScale) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  std::uniform_real_distribution<double> scale(1e-3, 1e3);
  for (int i = 0; i < 500; ++i) {
    std::vector<double> u(1 + rng() % 64), v(u.size());
    for (auto& x : u) x = n(rng);
    for (auto& x : v) x = n(rng);
    EXPECT_EQ(cosine(u, v), cosine(v, u));
    EXPECT_NEAR(cosine(u, u), 1.0, 1e-9);
    auto au = u;
    const double a = scale(rng);
    for (auto& x : au) x *= a;
    EXPECT_NEAR(cosine(au, v), cosine(u, v), 1e-9);
    EXPECT_NEAR(cosine(u, v), oracle_cosine(u, v), 1e-12);
  }
}

TEST(EmbeddingStore, LoadAndErrors) {
  TempDir dir;
  std::string text;
  for (int i = 0; i < 3; ++i) text += json{{"id", "d" + std::to_string(i)}, {"vector", std::vector<double>(8, i + 1.0)}}.dump() + "\n";
  write_file(dir / "e.jsonl", text);
  const auto store = load_embeddings(dir / "e.jsonl");
  EXPECT_EQ(store.size(), 3u);
  EXPECT_EQ(store.dimension(), 8u);

  write_file(dir / "mixed.jsonl", json{{"id", "a"}, {"vector", std::vector<double>(8, 1.0)}}.dump() + "\n" +
                                       json{{"id", "b"}, {"vector", std::vector<double>(16, 1.0)}}.dump() + "\n");
  EXPECT_EQ(code_of([&] { load_embeddings(dir / "mixed.jsonl"); }), ErrorCode::DimensionMismatch);

  EmbeddingStore ab;
  ab.add({"a", {1, 0}, EmbeddingSource::File, false});
  ab.add({"b", {0, 1}, EmbeddingSource::File, false});
  const std::vector<std::string> pool{"a"};
  EXPECT_EQ(code_of([&] { ab.nearest_neighbors("c", pool, 1); }), ErrorCode::UnknownDocId);
  EXPECT_EQ(code_of([&] { (void)ab.at("c"); }), ErrorCode::UnknownDocId);
  EXPECT_EQ(code_of([&] { ab.add({"z", {0, 0}, EmbeddingSource::File, false}); }), ErrorCode::ZeroVector);

  save_embeddings(store, dir / "copy.jsonl");
  const auto back = load_embeddings(dir / "copy.jsonl");
  for (const auto& v : store.vectors()) EXPECT_EQ(back.at(v.doc_id).values, v.values);
}

TEST(NearestNeighbors, ForcedCasesAndErrors) {
  EmbeddingStore s;
  s.add({"t", {1, 0}, EmbeddingSource::File, false});
  s.add({"a", {1, 1}, EmbeddingSource::File, false});
  s.add({"b", {1, -1}, EmbeddingSource::File, false});
  s.add({"c", {0, 1}, EmbeddingSource::File, false});
  const std::vector<std::string> one{"c"};
  EXPECT_EQ(s.nearest_neighbors("t", one, 1).ids(), one);
  const std::vector<std::string> pool{"c", "b", "a"};
  // a and b tie at cos 0.7071; the id breaks the tie.
  EXPECT_EQ(s.nearest_neighbors("t", pool, 3).ids(), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(code_of([&] { s.nearest_neighbors("t", pool, 4); }), ErrorCode::KTooLarge);
  EXPECT_EQ(code_of([&] { s.nearest_neighbors("t", pool, 0); }), ErrorCode::InvalidArgument);
  const std::vector<std::string> with_target{"a", "t"};
  EXPECT_EQ(code_of([&] { s.nearest_neighbors("t", with_target, 1); }), ErrorCode::InvalidArgument);
}

// Property: every k yields a prefix of the brute-force ranking. Integer
// coordinates in a small range force frequent exact ties.
TEST(NearestNeighborsProperty, PrefixOfBruteForceRanking) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 60; ++trial) {
    const auto dim = 1 + rng() % 6;
    std::map<std::string, std::vector<double>> vectors;
    EmbeddingStore s;
    std::vector<std::string> pool;
    for (int i = 0; i < 20; ++i) {
      std::vector<double> v(dim);
      do {
        for (auto& x : v) x = static_cast<double>(static_cast<int>(rng() % 5) - 2);
      } while (std::all_of(v.begin(), v.end(), [](double x) { return x == 0; }));
      const auto id = "d" + std::to_string(i);
      vectors[id] = v;
      s.add({id, v, EmbeddingSource::File, false});
      if (i > 0) pool.push_back(id);
    }
    const auto expected = oracle_ranking(vectors, "d0", pool);
    for (std::size_t k = 1; k <= pool.size(); ++k) {
      const auto got = s.nearest_neighbors("d0", pool, k).ids();
      EXPECT_EQ(got, std::vector<std::string>(expected.begin(), expected.begin() + static_cast<long>(k)));
    }
  }
}

namespace {

struct FakeEmbeddingServer {
  LocalServer local;
  std::atomic<int> requests{0};
  std::atomic<int> texts{0};

  FakeEmbeddingServer() {
    local.server.Post("/v1/embeddings", [this](const httplib::Request& req, httplib::Response& res) {
      ++requests;
      const auto body = json::parse(req.body);
      json data = json::array();
      int index = 0;
      // Items come back reversed; "index" carries the position.
      std::vector<json> items;
      for (const auto& t : body["input"]) {
        ++texts;
        const auto s = t.get<std::string>();
        items.push_back({{"index", index++}, {"embedding", {static_cast<double>(s.size()), 1.0 / 3.0, 0.1 * s[0]}}});
      }
      for (auto it = items.rbegin(); it != items.rend(); ++it) data.push_back(*it);
      res.set_content(json{{"data", data}, {"model", body["model"]}}.dump(), "application/json");
    });
    local.start();
  }
};

}  // namespace

TEST(RemoteEmbedder, CacheServesRepeatsWithoutNetwork) {
  FakeEmbeddingServer server;
  TempDir dir;
  RemoteEmbedderConfig config;
  config.base_url = server.local.url();
  config.batch_size = 2;

  RemoteEmbedder first(config, dir / "cache");
  const auto a = first.embed_texts({"alpha", "be", "gamma"});
  ASSERT_EQ(a.size(), 3u);
  EXPECT_EQ(a[0].size(), a[1].size());
  EXPECT_EQ(a[0][0], 5.0);
  EXPECT_EQ(a[1][0], 2.0);
  EXPECT_EQ(first.network_calls(), 2u);

  RemoteEmbedder second(config, dir / "cache");
  const auto b = second.embed_texts({"gamma", "alpha"});
  EXPECT_EQ(second.network_calls(), 0u);
  EXPECT_EQ(b[0], a[2]);  // bit-identical through the cache
  EXPECT_EQ(b[1], a[0]);

  const auto c = second.embed_texts({"alpha", "delta"});
  EXPECT_EQ(second.network_calls(), 1u);
  EXPECT_EQ(server.texts.load(), 4);
  EXPECT_EQ(c[0], a[0]);

  config.model_name = "other-model";
  RemoteEmbedder other(config, dir / "cache");
  other.embed_texts({"alpha"});
  EXPECT_EQ(other.network_calls(), 1u);
}

TEST(RemoteEmbedder, EmbedCorpusAndUnreachable) {
  FakeEmbeddingServer server;
  TempDir dir;
  RemoteEmbedderConfig config;
  config.base_url = server.local.url();
  RemoteEmbedder e(config, dir / "cache");
  const Corpus corpus("c", {doc("x", "one", Label::Patient), doc("y", "three", Label::Control)});
  const auto store = e.embed_corpus(corpus);
  EXPECT_EQ(store.size(), 2u);
  EXPECT_EQ(store.at("y").source, EmbeddingSource::Remote);

  config.base_url = "http://127.0.0.1:1";
  config.max_retries = 0;
  RemoteEmbedder dead(config, dir / "cache2");
  EXPECT_EQ(code_of([&] { dead.embed_texts({"z"}); }), ErrorCode::TransportError);
}

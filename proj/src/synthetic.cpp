#include "dknn/synthetic.hpp"

#include "dknn/error.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace dknn {

namespace {

constexpr const char* kWords[] = {"the",    "boy",   "is",     "on",     "stool", "cookie",  "jar",
                                  "mother", "water", "sink",   "window", "girl",  "falling", "dishes",
                                  "um",     "and",   "taking", "plate",  "uh",    "curtain"};

std::string synthetic_text(const std::string& id, std::mt19937_64& rng) {
  std::string text = doc_sentinel(id);
  const auto words = 8 + rng() % 12;
  for (std::uint64_t w = 0; w < words; ++w) {
    text += ' ';
    text += kWords[rng() % std::size(kWords)];
  }
  return text + ".";
}

}  // namespace

MockAnswer answer_with_correct_probability(Label gold, double p_correct) {
  p_correct = std::clamp(p_correct, 0.0, 1.0);
  return p_correct >= 0.5 ? MockAnswer{gold, p_correct} : MockAnswer{opposite(gold), 1.0 - p_correct};
}

double standard_normal(std::mt19937_64& rng) {
  auto unit = [&] { return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53; };
  const double u1 = unit();
  const double u2 = unit();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

SyntheticBundle make_synthetic(const SyntheticSpec& spec) {
  if (spec.dimension < 2) throw Error(ErrorCode::InvalidArgument, "synthetic embeddings need at least 2 dimensions");
  std::mt19937_64 rng(spec.seed);

  std::vector<Document> docs;
  for (const Split split : {Split::Train, Split::Test}) {
    const auto per_label = split == Split::Train ? spec.train_per_label : spec.test_per_label;
    for (std::size_t i = 0; i < per_label; ++i) {
      for (const Label label : {Label::Patient, Label::Control}) {
        const auto id = fmt::format("{}-{}-{:03}", split_token(split), label_token(label), i);
        docs.push_back(Document{id, synthetic_text(id, rng), label, split});
      }
    }
  }

  SyntheticBundle bundle;
  bundle.corpus = Corpus("synthetic", docs);

  for (const auto& d : docs) {
    std::vector<double> v(spec.dimension);
    for (auto& x : v) x = spec.cluster_noise * standard_normal(rng);
    v[d.label == Label::Patient ? 0 : 1] += 1.0;
    bundle.embeddings.add(EmbeddingVector{d.id, std::move(v), EmbeddingSource::File, false});
  }

  auto& rule = bundle.rule;
  rule.default_answer = MockAnswer{Label::Patient, 0.5};
  rule.multi_shot = MultiShotRule::Mean;
  for (const auto& target : docs) {
    rule.zero_shot_table[target.id] = answer_with_correct_probability(target.label, spec.zero_shot_p_correct);
    for (const auto& demo : docs) {
      if (demo.split != Split::Train || demo.id == target.id) continue;
      const double gain = demo.label == target.label ? spec.same_label_gain : spec.cross_label_gain;
      rule.one_shot_table[{demo.id, target.id}] =
          answer_with_correct_probability(target.label, spec.zero_shot_p_correct + gain);
      // Three target tokens; demos more similar to the target make it likelier.
      const double sim = bundle.embeddings.similarity(demo.id, target.id);
      rule.logprob_table[{demo.id, target.id}] = {-2.0 + 0.5 * sim, -1.5 + 0.5 * sim, -1.0 + 0.5 * sim};
    }
  }
  return bundle;
}

void write_synthetic(const SyntheticBundle& bundle, const std::filesystem::path& directory) {
  std::filesystem::create_directories(directory);
  save_corpus(bundle.corpus, directory / "corpus.jsonl", CorpusFormat::Jsonl);
  save_embeddings(bundle.embeddings, directory / "embeddings.jsonl");
  save_mock_rule(bundle.rule, directory / "mock_rules.json");
  std::ofstream config(directory / "config.toml", std::ios::trunc);
  if (!config) throw Error(ErrorCode::Io, "cannot write config.toml in " + directory.string());
  config << "# Synthetic mock experiment. Paths are relative to this file.\n"
            "seed = 0\n"
            "runs = 3\n"
            "output_dir = \"out\"\n\n"
            "[corpus]\n"
            "path = \"corpus.jsonl\"\n\n"
            "[backend]\n"
            "kind = \"mock\"\n"
            "model = \"mock\"\n"
            "mock_rules = \"mock_rules.json\"\n"
            "max_inflight = 8\n\n"
            "[embeddings]\n"
            "path = \"embeddings.jsonl\"\n\n"
            "[prompt]\n"
            "template = \"role,context,linguistic,guided_cot\"\n\n"
            "[selection]\n"
            "strategy = \"delta_knn\"\n"
            "n_shot = 4\n"
            "balance = false\n"
            "k_neighbors = 5\n";
}

}  // namespace dknn

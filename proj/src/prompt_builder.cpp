#include "dknn/prompt_builder.hpp"

#include "dknn/error.hpp"
#include "dknn/hashing.hpp"

#include <algorithm>
#include <cctype>

namespace dknn {

namespace {

void append_section(std::string& out, const std::string& section) {
  if (section.empty()) return;
  if (!out.empty()) out += "\n\n";
  out += section;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

void length_prefixed(std::string& out, const std::string& s) {
  out += std::to_string(s.size());
  out.push_back(':');
  out += s;
}

}  // namespace

ComponentTexts ComponentTexts::defaults() {
  ComponentTexts t;
  t.role = "You are a medical expert in Alzheimer's disease.";
  t.context =
      "The Boston Cookie Theft picture description task is a well established speech assessment in "
      "Alzheimer's disease. During the task, participants are shown the picture and are asked to describe "
      "everything they see in the scene using as much time as they would like. The objects (also known as "
      "information units) in this picture includes: \"cookie\", \"girl\", \"boy\", \"woman\", \"jar\", "
      "\"stool\", \"plate\", \"dishcloth\", \"water\", \"window\", \"cupboard\", \"curtain\", \"dishes\", "
      "\"sink\".";
  t.linguistic =
      "You analyze linguistic features in the patient's speech, such as lexical richness, syntactic "
      "complexity, grammatical correctness, information units, and semantic coherence. Based on the "
      "participant's description of the picture, provide an initial diagnosis of dementia patient (P) and "
      "healthy control (H).";
  t.question =
      "Given the text below, classify the participant as a dementia patient (P) or healthy control (H). "
      "Give a prediction with a probability.";
  t.cot =
      "Given the text below, classify the participant as a dementia patient (P) or healthy control (H). "
      "First explain step-by-step and then give a prediction with a probability.";
  t.guided_cot =
      "Given the text below, classify the participant as a dementia patient (P) or healthy control (H). "
      "Please first reason from the following perspectives: (1) Vocabulary richness: such as the usage of "
      "different words; (2) Syntactic complexity: such as the length of the sentence and the number of "
      "subordinate clauses; (3) Information content: whether the participant describe most of the "
      "information units in the picture; (4) Semantic coherence: such as the usage of connectives and the "
      "change in description from one information unit to another; (5) Fluency and repetitiveness: whether "
      "the text is fluent with less repetitive sentences. Based on your reasoning, please give a prediction "
      "and the corresponding probability.";
  t.demonstration_header = "Example:";
  return t;
}

void ComponentTexts::set(std::string_view key, std::string text) {
  if (key == "role") {
    role = std::move(text);
  } else if (key == "context") {
    context = std::move(text);
  } else if (key == "linguistic") {
    linguistic = std::move(text);
  } else if (key == "question") {
    question = std::move(text);
  } else if (key == "cot") {
    cot = std::move(text);
  } else if (key == "guided_cot") {
    guided_cot = std::move(text);
  } else if (key == "demonstration_header") {
    demonstration_header = std::move(text);
  } else {
    throw Error(ErrorCode::ConfigError, "unknown prompt component \"" + std::string(key) + "\"");
  }
}

void PromptTemplate::validate() const {
  if (cot && guided_cot) throw Error(ErrorCode::InvalidTemplate, "cot and guided_cot are mutually exclusive");
}

std::string PromptTemplate::fingerprint() const {
  std::string material = "dknn-template-v1;";
  for (bool flag : {role, context, linguistic, cot, guided_cot}) material.push_back(flag ? '1' : '0');
  for (const auto* text : {&texts.role, &texts.context, &texts.linguistic, &texts.question, &texts.cot,
                           &texts.guided_cot, &texts.demonstration_header}) {
    length_prefixed(material, *text);
  }
  return sha256_hex(material);
}

std::string PromptTemplate::describe() const {
  std::string background;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!background.empty()) background += "+";
    background += name;
  };
  add(role, "Role");
  add(context, "Context");
  add(linguistic, "Linguistic");
  std::string question = guided_cot ? "G.-CoT" : cot ? "CoT" : "";
  if (background.empty() && question.empty()) return "minimal";
  if (question.empty()) return background;
  if (background.empty()) return question;
  return background + "; " + question;
}

std::string PromptTemplate::flags() const {
  std::string out;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += ",";
    out += name;
  };
  add(role, "role");
  add(context, "context");
  add(linguistic, "linguistic");
  add(cot, "cot");
  add(guided_cot, "guided_cot");
  return out.empty() ? "none" : out;
}

PromptTemplate parse_template(std::string_view spec) {
  const auto s = trim(spec);
  if (!s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); })) {
    const int row = std::stoi(s);
    const auto grid = ablation_grid();
    if (row < 1 || row > static_cast<int>(grid.size())) {
      throw Error(ErrorCode::ConfigError, "prompt-grid row must be 1..7, got " + s);
    }
    return grid[static_cast<std::size_t>(row - 1)];
  }
  PromptTemplate t;
  if (s == "none" || s.empty()) return t;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const auto comma = s.find(',', pos);
    const auto item = trim(std::string_view(s).substr(pos, comma == std::string::npos ? s.npos : comma - pos));
    pos = comma == std::string::npos ? s.size() + 1 : comma + 1;
    if (item == "role") {
      t.role = true;
    } else if (item == "context") {
      t.context = true;
    } else if (item == "linguistic") {
      t.linguistic = true;
    } else if (item == "cot") {
      t.cot = true;
    } else if (item == "guided_cot" || item == "g-cot") {
      t.guided_cot = true;
    } else {
      throw Error(ErrorCode::ConfigError, "unknown template flag \"" + item + "\"");
    }
  }
  t.validate();
  return t;
}

PromptTemplate full_template() { return ablation_grid().back(); }

std::string format_demonstration(const Document& doc) {
  return "## Text: " + doc.text + "\n## Answer: " +
         (doc.label == Label::Patient ? "dementia patient (P)." : "healthy control (H).");
}

PromptInstance build_prompt(const PromptTemplate& tmpl, std::span<const Document> demos, const Document& target) {
  tmpl.validate();
  PromptInstance out;
  out.target_id = target.id;
  out.template_fingerprint = tmpl.fingerprint();

  if (tmpl.role) append_section(out.system_text, tmpl.texts.role);
  if (tmpl.context) append_section(out.system_text, tmpl.texts.context);
  if (tmpl.linguistic) append_section(out.system_text, tmpl.texts.linguistic);

  if (!demos.empty()) {
    std::string block = tmpl.texts.demonstration_header;
    bool first = true;
    for (const auto& demo : demos) {
      if (demo.id == target.id) throw Error(ErrorCode::TargetInDemos, "target \"" + target.id + "\" is among the demonstrations");
      if (!block.empty()) block += first ? "\n" : "\n\n";
      first = false;
      block += format_demonstration(demo);
      out.demo_ids.push_back(demo.id);
    }
    append_section(out.user_text, block);
  }

  const auto& question = tmpl.guided_cot ? tmpl.texts.guided_cot : tmpl.cot ? tmpl.texts.cot : tmpl.texts.question;
  append_section(out.user_text, question + "\n\n## Text: " + target.text);
  return out;
}

std::vector<PromptTemplate> ablation_grid(const ComponentTexts& texts) {
  struct Row {
    bool role, context, linguistic, cot, guided_cot;
  };
  static constexpr Row kRows[] = {
      {false, false, false, false, false},
      {true, true, false, false, false},
      {true, false, true, false, false},
      {true, true, false, true, false},
      {true, false, true, true, false},
      {true, true, true, true, false},
      {true, true, true, false, true},
  };
  std::vector<PromptTemplate> out;
  for (const auto& r : kRows) {
    PromptTemplate t;
    t.role = r.role;
    t.context = r.context;
    t.linguistic = r.linguistic;
    t.cot = r.cot;
    t.guided_cot = r.guided_cot;
    t.texts = texts;
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace dknn

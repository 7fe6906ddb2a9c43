#pragma once

#include "dknn/corpus.hpp"
#include "dknn/llm_gateway.hpp"

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dknn {

enum class Component { Role, Context, Linguistic, Cot, GuidedCot };

/// Text of every prompt component. Defaults reproduce the published AD
/// detection template; any field may be overridden from configuration.
struct ComponentTexts {
  std::string role;
  std::string context;
  std::string linguistic;
  std::string question;  // question block used when neither CoT variant is on
  std::string cot;
  std::string guided_cot;
  std::string demonstration_header;

  static ComponentTexts defaults();

  /// Sets a component by config key: role, context, linguistic, question,
  /// cot, guided_cot, demonstration_header. Throws Error{ConfigError}.
  void set(std::string_view key, std::string text);

  friend bool operator==(const ComponentTexts&, const ComponentTexts&) = default;
};

struct PromptTemplate {
  bool role = false;
  bool context = false;
  bool linguistic = false;
  bool cot = false;
  bool guided_cot = false;
  ComponentTexts texts = ComponentTexts::defaults();

  /// Throws Error{InvalidTemplate} when cot and guided_cot are both set.
  void validate() const;
  /// SHA-256 over the flags and every component text.
  std::string fingerprint() const;
  /// Short form such as "Role+Context+Linguistic; G.-CoT".
  std::string describe() const;
  /// Comma-separated enabled flags, e.g. "role,context,linguistic,guided_cot".
  std::string flags() const;

  friend bool operator==(const PromptTemplate&, const PromptTemplate&) = default;
};

/// Parses "role,context,guided_cot", "none", or a prompt-grid row "1".."7".
PromptTemplate parse_template(std::string_view spec);

/// The full template (Role+Context+Linguistic; G.-CoT).
PromptTemplate full_template();

struct PromptInstance {
  std::string system_text;
  std::string user_text;
  std::vector<std::string> demo_ids;
  std::string target_id;
  std::string template_fingerprint;

  ChatPrompt chat() const { return ChatPrompt{system_text, user_text}; }

  friend bool operator==(const PromptInstance&, const PromptInstance&) = default;
};

/// "## Text: {text}\n## Answer: {dementia patient (P)|healthy control (H)}."
std::string format_demonstration(const Document& doc);

/// Background components (Role, Context, Linguistic) form the system
/// message; demonstrations in the given order, then the question block and
/// the target text, form the user message.
/// Throws Error{TargetInDemos}.
PromptInstance build_prompt(const PromptTemplate& tmpl, std::span<const Document> demos, const Document& target);

/// Seven component combinations of the prompt ablation, in row order:
/// (1) none, (2) Role+Context, (3) Role+Linguistic, (4) Role+Context+CoT,
/// (5) Role+Linguistic+CoT, (6) Role+Context+Linguistic+CoT,
/// (7) Role+Context+Linguistic+G.-CoT.
std::vector<PromptTemplate> ablation_grid(const ComponentTexts& texts = ComponentTexts::defaults());

}  // namespace dknn

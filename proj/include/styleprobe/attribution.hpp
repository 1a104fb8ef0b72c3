#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "styleprobe/core.hpp"
#include "styleprobe/serialization.hpp"
#include "styleprobe/synthetic.hpp"

namespace styleprobe {

inline constexpr double kDefaultMaskThreshold = 0.2;

// Per-pixel max-over-channels |original - perturbed|, normalized by its
// maximum; normalized values below `threshold` are zeroed. Single channel.
ImageTensor build_diff_mask(const ImageTensor& original, const ImageTensor& perturbed,
                            double threshold = kDefaultMaskThreshold);

struct TriptychQuery {
  ImageTensor original;
  ImageTensor perturbed;
  ImageTensor diff_mask;
  std::string task_attribute;
  std::string prompt_template_id = "relevance_attribution";
  // Provenance of the perturbation; ground-truth backends key on it.
  std::optional<ChannelRef> channel;

  void validate() const;
};

// original | perturbed | mask, RGB, 2-pixel white separators.
ImageTensor compose_triptych(const TriptychQuery& query);

struct RelabelQuery {
  ImageTensor image;
  std::string task_attribute;
  std::string prompt_template_id = "relabel";
  // Style state behind the image, when known (ground-truth backends need it).
  std::optional<StyleState> state;
};

class JudgmentBackend {
 public:
  virtual ~JudgmentBackend() = default;
  virtual Vote judge_pair(const TriptychQuery& query) = 0;
  virtual ImageLabel relabel(const RelabelQuery& query) = 0;
  virtual bool deterministic() const = 0;
  virtual std::string name() const = 0;
};

Vote judge_pair(const TriptychQuery& query, JudgmentBackend& backend);
ImageLabel relabel_boundary_image(const RelabelQuery& query, JudgmentBackend& backend);

// Looks channels up in the synthetic ground truth; relabels from the style
// state (object present => POSITIVE).
class GroundTruthBackend : public JudgmentBackend {
 public:
  explicit GroundTruthBackend(GroundTruthMap map) : map_(std::move(map)) {}

  Vote judge_pair(const TriptychQuery& query) override;
  ImageLabel relabel(const RelabelQuery& query) override;
  bool deterministic() const override { return true; }
  std::string name() const override { return "ground_truth"; }

 private:
  GroundTruthMap map_;
};

// Prompt templates keyed by id. Placeholders: {attribute}, {label_key}.
class PromptTemplates {
 public:
  // Built-in defaults: "relevance_attribution" and "relabel".
  PromptTemplates();
  // Defaults overridden by every `<id>.txt` in `directory`.
  static PromptTemplates from_directory(const std::filesystem::path& directory);

  const std::string& get(const std::string& id) const;
  void set(const std::string& id, std::string text) { templates_[id] = std::move(text); }
  std::string render(const std::string& id, const std::string& attribute,
                     const std::string& label_key) const;
  const std::map<std::string, std::string>& all() const { return templates_; }

 private:
  std::map<std::string, std::string> templates_;
};

// Parses an attribution answer. The first JSON object in the text must carry
// an "answer" string starting with yes/no; anything else is AMBIGUOUS.
Vote parse_attribution_response(const std::string& text);
// Parses a relabel answer: the value under `label_key` (or the only string
// value) must be Yes, No or Ambiguous.
ImageLabel parse_relabel_response(const std::string& text, const std::string& label_key);

struct VlmConfig {
  // scheme://host[:port]
  std::string base_url = "http://127.0.0.1:8000";
  std::string path = "/v1/chat/completions";
  std::string model = "gpt-4o";
  std::string api_key;
  std::string label_key = "glasses";
  std::size_t max_retries = 2;
  int timeout_seconds = 60;
  int max_tokens = 200;
};

// Chat-completions style HTTP client. Sends one PNG (data URL) and the
// rendered prompt; every raw response is archived.
class VlmHttpBackend : public JudgmentBackend {
 public:
  VlmHttpBackend(VlmConfig config, PromptTemplates templates);

  Vote judge_pair(const TriptychQuery& query) override;
  ImageLabel relabel(const RelabelQuery& query) override;
  bool deterministic() const override { return false; }
  std::string name() const override { return "vlm_http"; }

  // {"kind", "prompt_template_id", "raw", "error"} per query, in call order.
  std::vector<Json> archive() const;

  // Request body for one image + prompt; exposed for inspection and tests.
  Json build_request(const ImageTensor& image, const std::string& prompt) const;

 private:
  // Returns the assistant text, or nullopt after exhausting retries.
  std::optional<std::string> ask(const ImageTensor& image, const std::string& prompt,
                                 Json& archive_entry);

  VlmConfig config_;
  PromptTemplates templates_;
  mutable std::mutex archive_mutex_;
  std::vector<Json> archive_;
};

enum class TieRule { kRelevant, kSpurious, kUndetermined };

std::string_view to_string(TieRule rule);
TieRule tie_rule_from_string(std::string_view text);

// Majority of the decided (non-AMBIGUOUS) votes; ties and all-AMBIGUOUS go to
// `tie_rule`. Requires at least one vote.
FeatureVerdict attribute_channel(const ChannelRef& channel, const std::vector<Vote>& votes,
                                 TieRule tie_rule = TieRule::kRelevant);

}  // namespace styleprobe

#include "styleprobe/attribution.hpp"

#include <httplib.h>

#include <algorithm>
#include <cctype>
#include <cmath>

#include "styleprobe/image_io.hpp"
#include "styleprobe/util.hpp"

namespace styleprobe {

ImageTensor build_diff_mask(const ImageTensor& original, const ImageTensor& perturbed,
                            double threshold) {
  if (original.shape() != perturbed.shape()) {
    throw Error(ErrorCode::kShapeMismatch, "diff mask: " + to_string(original.shape()) +
                                               " vs " + to_string(perturbed.shape()));
  }
  const std::size_t C = original.channels();
  const std::size_t n = original.height() * original.width();
  auto a = original.data();
  auto b = perturbed.data();
  std::vector<double> diff(n, 0.0);
  double peak = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t c = 0; c < C; ++c) {
      diff[p] = std::max(diff[p], std::abs(a[p * C + c] - b[p * C + c]));
    }
    peak = std::max(peak, diff[p]);
  }
  for (auto& d : diff) {
    d = peak > 0.0 ? d / peak : 0.0;
    if (d < threshold) d = 0.0;
  }
  return ImageTensor({original.height(), original.width(), 1}, std::move(diff));
}

void TriptychQuery::validate() const {
  if (original.shape() != perturbed.shape()) {
    throw Error(ErrorCode::kShapeMismatch, "triptych: original and perturbed differ in shape");
  }
  if (diff_mask.channels() != 1 || diff_mask.height() != original.height() ||
      diff_mask.width() != original.width()) {
    throw Error(ErrorCode::kShapeMismatch, "triptych: mask must be single-channel H x W");
  }
  if (!diff_mask.in_unit_range()) {
    throw Error(ErrorCode::kValidation, "triptych: mask values must lie in [0, 1]");
  }
}

ImageTensor compose_triptych(const TriptychQuery& query) {
  query.validate();
  return hconcat({query.original, query.perturbed, query.diff_mask}, 2);
}

Vote judge_pair(const TriptychQuery& query, JudgmentBackend& backend) {
  query.validate();
  return backend.judge_pair(query);
}

ImageLabel relabel_boundary_image(const RelabelQuery& query, JudgmentBackend& backend) {
  return backend.relabel(query);
}

// ---------------------------------------------------------------------------
// Ground truth

Vote GroundTruthBackend::judge_pair(const TriptychQuery& query) {
  if (!query.channel) {
    throw Error(ErrorCode::kPrecondition, "ground-truth judgment needs the channel");
  }
  return map_.task_relevant(*query.channel) ? Vote::kRelevantChange
                                            : Vote::kNoRelevantChange;
}

ImageLabel GroundTruthBackend::relabel(const RelabelQuery& query) {
  if (!query.state) {
    throw Error(ErrorCode::kPrecondition, "ground-truth relabel needs the style state");
  }
  return synthetic_object_present(*query.state) ? ImageLabel::kPositive
                                                : ImageLabel::kNegative;
}

// ---------------------------------------------------------------------------
// Prompts

namespace {

constexpr const char* kRelevanceTemplate = R"(
You are given three AI-generated images:

The first is the original face.
The second is generated by changing one latent direction.
The third is a difference mask showing where the change occurred.

Focus specifically on whether the presence of {attribute} changes between
the first and second images.
Outout a JSON object with the following keys:
    {"answer": "yes, {attribute} are added/removed"
       or "no, {attribute} remain the same."}

Use the mask to support your reasoning and ignore irrelevant changes
such as lighting or color tone.
)";

constexpr const char* kRelabelTemplate = R"(You are an image tagger for AI-generated portraits.
For each image, output a JSON object with the following fields:
Determine whether the person in the image is wearing {attribute}.
output a JSON object.
{ "{label_key}": "Yes / No / Ambiguous"}
If the image quality is poor or unclear, respond with "Ambiguous".
)";

void replace_all(std::string& text, const std::string& from, const std::string& to) {
  std::size_t pos = 0;
  while ((pos = text.find(from, pos)) != std::string::npos) {
    text.replace(pos, from.size(), to);
    pos += to.size();
  }
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n\"'");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n\"'.");
  return s.substr(b, e - b + 1);
}

// First balanced {...} block that parses as a JSON object.
std::optional<Json> first_json_object(const std::string& text) {
  for (std::size_t start = text.find('{'); start != std::string::npos;
       start = text.find('{', start + 1)) {
    int depth = 0;
    bool in_string = false;
    for (std::size_t i = start; i < text.size(); ++i) {
      const char ch = text[i];
      if (in_string) {
        if (ch == '\\') {
          ++i;
        } else if (ch == '"') {
          in_string = false;
        }
        continue;
      }
      if (ch == '"') {
        in_string = true;
      } else if (ch == '{') {
        ++depth;
      } else if (ch == '}' && --depth == 0) {
        Json parsed = Json::parse(text.substr(start, i - start + 1), nullptr, false);
        if (!parsed.is_discarded() && parsed.is_object()) return parsed;
        break;
      }
    }
  }
  return std::nullopt;
}

}  // namespace

PromptTemplates::PromptTemplates() {
  templates_["relevance_attribution"] = kRelevanceTemplate;
  templates_["relabel"] = kRelabelTemplate;
}

PromptTemplates PromptTemplates::from_directory(const std::filesystem::path& directory) {
  PromptTemplates templates;
  if (!std::filesystem::is_directory(directory)) {
    throw Error(ErrorCode::kConfig, "template directory " + directory.string() + " not found");
  }
  for (const auto& entry : std::filesystem::directory_iterator(directory)) {
    if (entry.path().extension() == ".txt") {
      templates.set(entry.path().stem().string(), read_text_file(entry.path()));
    }
  }
  return templates;
}

const std::string& PromptTemplates::get(const std::string& id) const {
  auto it = templates_.find(id);
  if (it == templates_.end()) {
    throw Error(ErrorCode::kConfig, "unknown prompt template '" + id + "'");
  }
  return it->second;
}

std::string PromptTemplates::render(const std::string& id, const std::string& attribute,
                                    const std::string& label_key) const {
  std::string text = get(id);
  replace_all(text, "{attribute}", attribute);
  replace_all(text, "{label_key}", label_key);
  return text;
}

Vote parse_attribution_response(const std::string& text) {
  auto object = first_json_object(text);
  if (!object || !object->contains("answer") || !(*object)["answer"].is_string()) {
    return Vote::kAmbiguous;
  }
  const std::string answer = lower(trim((*object)["answer"].get<std::string>()));
  auto leads_with = [&](std::string_view word) {
    return answer.rfind(word, 0) == 0 &&
           (answer.size() == word.size() ||
            !std::isalpha(static_cast<unsigned char>(answer[word.size()])));
  };
  if (leads_with("yes")) return Vote::kRelevantChange;
  if (leads_with("no")) return Vote::kNoRelevantChange;
  return Vote::kAmbiguous;
}

ImageLabel parse_relabel_response(const std::string& text, const std::string& label_key) {
  auto object = first_json_object(text);
  if (!object) return ImageLabel::kAmbiguous;
  const Json* value = nullptr;
  if (object->contains(label_key)) {
    value = &(*object)[label_key];
  } else if (object->size() == 1) {
    value = &object->begin().value();
  }
  if (!value || !value->is_string()) return ImageLabel::kAmbiguous;
  const std::string answer = lower(trim(value->get<std::string>()));
  if (answer == "yes") return ImageLabel::kPositive;
  if (answer == "no") return ImageLabel::kNegative;
  return ImageLabel::kAmbiguous;
}

// ---------------------------------------------------------------------------
// VLM over HTTP

VlmHttpBackend::VlmHttpBackend(VlmConfig config, PromptTemplates templates)
    : config_(std::move(config)), templates_(std::move(templates)) {}

Json VlmHttpBackend::build_request(const ImageTensor& image, const std::string& prompt) const {
  auto png = encode_png(image, 8);
  std::string data_url = "data:image/png;base64," +
                         httplib::detail::base64_encode(std::string(png.begin(), png.end()));
  return Json{
      {"model", config_.model},
      {"max_tokens", config_.max_tokens},
      {"temperature", 0},
      {"messages",
       Json::array({Json{{"role", "user"},
                         {"content", Json::array({
                                         Json{{"type", "text"}, {"text", prompt}},
                                         Json{{"type", "image_url"},
                                              {"image_url", {{"url", data_url}}}},
                                     })}}})}};
}

std::optional<std::string> VlmHttpBackend::ask(const ImageTensor& image,
                                               const std::string& prompt,
                                               Json& archive_entry) {
  const std::string body = build_request(image, prompt).dump();
  httplib::Client client(config_.base_url);
  client.set_connection_timeout(config_.timeout_seconds);
  client.set_read_timeout(config_.timeout_seconds);
  httplib::Headers headers;
  if (!config_.api_key.empty()) {
    headers.emplace("Authorization", "Bearer " + config_.api_key);
  }
  std::string last_error;
  for (std::size_t attempt = 0; attempt <= config_.max_retries; ++attempt) {
    auto response = client.Post(config_.path, headers, body, "application/json");
    if (!response) {
      last_error = "transport: " + httplib::to_string(response.error());
      continue;
    }
    if (response->status != 200) {
      last_error = "http status " + std::to_string(response->status);
      archive_entry["raw"] = response->body;
      continue;
    }
    archive_entry["raw"] = response->body;
    Json parsed = Json::parse(response->body, nullptr, false);
    if (parsed.is_discarded()) {
      archive_entry["error"] = "response is not JSON";
      return std::string();
    }
    try {
      return parsed.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const Json::exception&) {
      archive_entry["error"] = "response has no choices[0].message.content";
      return std::string();
    }
  }
  archive_entry["error"] = last_error;
  log_warning("VLM request failed after retries: " + last_error);
  return std::nullopt;
}

Vote VlmHttpBackend::judge_pair(const TriptychQuery& query) {
  const std::string prompt =
      templates_.render(query.prompt_template_id, query.task_attribute, config_.label_key);
  Json entry{{"kind", "judge_pair"},
             {"prompt_template_id", query.prompt_template_id},
             {"raw", nullptr},
             {"error", nullptr}};
  if (query.channel) entry["channel"] = to_json(*query.channel);
  auto text = ask(compose_triptych(query), prompt, entry);
  Vote vote = text ? parse_attribution_response(*text) : Vote::kAmbiguous;
  entry["vote"] = to_string(vote);
  std::lock_guard lock(archive_mutex_);
  archive_.push_back(std::move(entry));
  return vote;
}

ImageLabel VlmHttpBackend::relabel(const RelabelQuery& query) {
  const std::string prompt =
      templates_.render(query.prompt_template_id, query.task_attribute, config_.label_key);
  Json entry{{"kind", "relabel"},
             {"prompt_template_id", query.prompt_template_id},
             {"raw", nullptr},
             {"error", nullptr}};
  auto text = ask(query.image, prompt, entry);
  ImageLabel label = text ? parse_relabel_response(*text, config_.label_key)
                          : ImageLabel::kAmbiguous;
  entry["label"] = to_string(label);
  std::lock_guard lock(archive_mutex_);
  archive_.push_back(std::move(entry));
  return label;
}

std::vector<Json> VlmHttpBackend::archive() const {
  std::lock_guard lock(archive_mutex_);
  return archive_;
}

// ---------------------------------------------------------------------------
// Voting

std::string_view to_string(TieRule rule) {
  switch (rule) {
    case TieRule::kRelevant: return "relevant";
    case TieRule::kSpurious: return "spurious";
    case TieRule::kUndetermined: return "undetermined";
  }
  return "relevant";
}

TieRule tie_rule_from_string(std::string_view text) {
  for (auto r : {TieRule::kRelevant, TieRule::kSpurious, TieRule::kUndetermined}) {
    if (to_string(r) == text) return r;
  }
  throw Error(ErrorCode::kConfig, "unknown tie rule '" + std::string(text) +
                                      "'; valid: relevant, spurious, undetermined");
}

FeatureVerdict attribute_channel(const ChannelRef& channel, const std::vector<Vote>& votes,
                                 TieRule tie_rule) {
  if (votes.empty()) {
    throw Error(ErrorCode::kPrecondition, "attribution needs at least one vote");
  }
  const auto relevant = std::count(votes.begin(), votes.end(), Vote::kRelevantChange);
  const auto irrelevant = std::count(votes.begin(), votes.end(), Vote::kNoRelevantChange);
  FeatureVerdict verdict;
  verdict.channel = channel;
  verdict.votes = votes;
  verdict.n_samples = votes.size();
  if (relevant > irrelevant) {
    verdict.label = FeatureLabel::kRelevant;
  } else if (irrelevant > relevant) {
    // Only influential channels reach attribution, so SPURIOUS is allowed.
    verdict.label = FeatureLabel::kSpurious;
  } else {
    switch (tie_rule) {
      case TieRule::kRelevant: verdict.label = FeatureLabel::kRelevant; break;
      case TieRule::kSpurious: verdict.label = FeatureLabel::kSpurious; break;
      case TieRule::kUndetermined: verdict.label = FeatureLabel::kUndetermined; break;
    }
  }
  return verdict;
}

}  // namespace styleprobe

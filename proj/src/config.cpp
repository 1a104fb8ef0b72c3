#include "styleprobe/config.hpp"

#include <cstdlib>
#include <set>

#include "styleprobe/util.hpp"

namespace styleprobe {

void PipelineConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::kConfig, m); };
  if (seeds.empty()) fail("seeds: need at least one seed");
  if (!(truncation > 0.0 && truncation <= 1.0)) fail("truncation must lie in (0, 1]");
  for (const Json* spec : {&generator, &sut}) {
    const std::string kind = spec->value("kind", "");
    if (kind == "scenario" && !scenario) fail("backend kind \"scenario\" needs \"scenario\"");
    if (kind == "external") {
      if (!spec->contains("command") || !(*spec)["command"].is_array() ||
          (*spec)["command"].empty()) {
        fail("external backend needs a non-empty \"command\" array");
      }
    }
  }
  const std::string gk = generator.value("kind", "");
  if (gk != "scenario" && gk != "synthetic" && gk != "external") {
    fail("generator.kind must be one of: scenario, synthetic, external");
  }
  const std::string sk = sut.value("kind", "");
  if (sk != "scenario" && sk != "toy" && sk != "external") {
    fail("sut.kind must be one of: scenario, toy, external");
  }
  if (sk == "toy" && !sut.contains("path")) fail("sut.kind \"toy\" needs \"path\"");
  if (screening.smoothgrad.samples < 1) fail("screening.samples must be >= 1");
  if (screening.smoothgrad.sigma && !(*screening.smoothgrad.sigma > 0.0)) {
    fail("screening.sigma must be > 0");
  }
  if (!(screening.smoothgrad.sigma_scale > 0.0)) fail("screening.sigma_scale must be > 0");
  if (!(screening.fda.step > 0.0)) fail("screening.fda_step must be > 0");
  try {
    oracle.validate();
  } catch (const Error& e) {
    fail(std::string("oracle: ") + e.what());
  }
  const auto& a = attribution;
  if (a.backend != "ground_truth" && a.backend != "vlm_http") {
    fail("attribution.backend must be one of: ground_truth, vlm_http");
  }
  if (a.backend == "ground_truth" && !scenario) {
    fail("attribution.backend \"ground_truth\" needs \"scenario\"");
  }
  if (a.vote_samples < 1) fail("attribution.vote_samples must be >= 1");
  if (a.vote_samples % 2 == 0) {
    log_warning("attribution.vote_samples is even; ties go to the tie rule");
  }
  if (!(a.mask_threshold >= 0.0 && a.mask_threshold < 1.0)) {
    fail("attribution.mask_threshold must lie in [0, 1)");
  }
  repair.mix.validate();
  if (repair.training.learning_rate < 0.0) fail("repair.learning_rate must be >= 0");
  if (workers < 1) fail("workers must be >= 1");
}

std::string interpolate_env(const std::string& text) {
  std::string out;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text.compare(i, 3, "$${") == 0) {
      out += "${";
      i += 2;
      continue;
    }
    if (text.compare(i, 2, "${") == 0) {
      const auto close = text.find('}', i + 2);
      if (close == std::string::npos) {
        throw Error(ErrorCode::kConfig, "unterminated ${ in: " + text);
      }
      const std::string name = text.substr(i + 2, close - i - 2);
      const char* value = std::getenv(name.c_str());
      if (!value) throw Error(ErrorCode::kConfig, "environment variable " + name + " is not set");
      out += value;
      i = close;
      continue;
    }
    out += text[i];
  }
  return out;
}

Json interpolate_env(const Json& value) {
  if (value.is_string()) return interpolate_env(value.get<std::string>());
  if (value.is_array() || value.is_object()) {
    Json out = value;
    for (auto it = out.begin(); it != out.end(); ++it) *it = interpolate_env(*it);
    return out;
  }
  return value;
}

namespace {

std::vector<std::uint64_t> parse_seeds(const Json& j) {
  std::vector<std::uint64_t> seeds;
  if (j.is_array()) return j.get<std::vector<std::uint64_t>>();
  if (j.is_object()) {
    const auto count = j.at("count").get<std::uint64_t>();
    const auto start = j.value("start", std::uint64_t{0});
    for (std::uint64_t i = 0; i < count; ++i) seeds.push_back(start + i);
    return seeds;
  }
  throw Error(ErrorCode::kConfig, "seeds must be a list or {\"count\", \"start\"}");
}

const std::set<std::string> kTopLevelKeys = {
    "preset", "scenario", "generator", "sut",         "seeds",       "truncation",
    "target", "screening", "budgets", "oracle",      "attribution", "repair",
    "report", "output_dir", "workers"};

}  // namespace

PipelineConfig pipeline_config_from_json(const Json& j) {
  if (!j.is_object()) throw Error(ErrorCode::kConfig, "config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!kTopLevelKeys.count(it.key())) {
      throw Error(ErrorCode::kConfig, "unknown config key \"" + it.key() + "\"");
    }
  }
  PipelineConfig c;
  try {
    c.preset = j.value("preset", c.preset);
    if (j.contains("scenario") && !j["scenario"].is_null()) {
      c.scenario = j["scenario"].get<std::string>();
    }
    c.generator = j.value("generator", c.generator);
    c.sut = j.value("sut", c.sut);
    c.seeds = parse_seeds(j.value("seeds", Json{{"count", 50}}));
    c.truncation = j.value("truncation", c.truncation);
    c.target = j.value("target", c.target);

    const Json s = j.value("screening", Json::object());
    c.screening.method =
        sensitivity_method_from_string(s.value("method", std::string("smoothgrad")));
    c.screening.smoothgrad.samples = s.value("samples", c.screening.smoothgrad.samples);
    if (s.contains("sigma") && !s["sigma"].is_null()) {
      c.screening.smoothgrad.sigma = s["sigma"].get<double>();
    }
    c.screening.smoothgrad.sigma_scale =
        s.value("sigma_scale", c.screening.smoothgrad.sigma_scale);
    c.screening.smoothgrad.rng_seed = s.value("rng_seed", c.screening.smoothgrad.rng_seed);
    c.screening.fda.step = s.value("fda_step", c.screening.fda.step);

    const Json b = j.value("budgets", Json::object());
    c.k_coarse_mid = b.value("k_coarse_mid", c.k_coarse_mid);
    c.k_fine = b.value("k_fine", c.k_fine);

    const Json o = j.value("oracle", Json::object());
    c.oracle.epsilon = o.value("epsilon", c.oracle.epsilon);
    c.oracle.tau_fraction = o.value("tau_fraction", c.oracle.tau_fraction);
    c.oracle.drop_convention =
        drop_convention_from_string(o.value("drop_convention", std::string("signed")));
    c.oracle.bisection_tolerance = o.value("bisection_tolerance", c.oracle.bisection_tolerance);
    c.oracle.bracket_tolerance = o.value("bracket_tolerance", c.oracle.bracket_tolerance);
    c.oracle.max_iterations = o.value("max_iterations", c.oracle.max_iterations);

    const Json a = j.value("attribution", Json::object());
    auto& at = c.attribution;
    at.backend = a.value("backend", at.backend);
    at.vote_samples = a.value("vote_samples", at.vote_samples);
    at.tie_rule = tie_rule_from_string(a.value("tie_rule", std::string("relevant")));
    at.mask_threshold = a.value("mask_threshold", at.mask_threshold);
    at.task_attribute = a.value("task_attribute", at.task_attribute);
    if (a.contains("templates_dir") && !a["templates_dir"].is_null()) {
      at.templates_dir = a["templates_dir"].get<std::string>();
    }
    const Json v = a.value("vlm", Json::object());
    at.vlm.base_url = v.value("base_url", at.vlm.base_url);
    at.vlm.path = v.value("path", at.vlm.path);
    at.vlm.model = v.value("model", at.vlm.model);
    at.vlm.api_key = v.value("api_key", at.vlm.api_key);
    at.vlm.label_key = v.value("label_key", at.vlm.label_key);
    at.vlm.max_retries = v.value("max_retries", at.vlm.max_retries);
    at.vlm.timeout_seconds = v.value("timeout_seconds", at.vlm.timeout_seconds);
    at.vlm.max_tokens = v.value("max_tokens", at.vlm.max_tokens);

    const Json r = j.value("repair", Json::object());
    auto& rp = c.repair;
    rp.mix.mix_ratio = r.value("mix_ratio", rp.mix.mix_ratio);
    rp.mix.holdout_fraction = r.value("holdout_fraction", rp.mix.holdout_fraction);
    rp.mix.rng_seed = r.value("rng_seed", rp.mix.rng_seed);
    if (r.contains("optimizer")) {
      rp.training.optimizer = head_optimizer_from_string(r["optimizer"].get<std::string>());
    }
    rp.training.learning_rate = r.value("learning_rate", rp.training.learning_rate);
    rp.training.max_epochs = r.value("max_epochs", rp.training.max_epochs);
    rp.training.early_stop = r.value("early_stop", rp.training.early_stop);
    rp.training.patience = r.value("patience", rp.training.patience);
    rp.training.shuffle_seed = rp.mix.rng_seed;
    rp.originals = r.value("originals", rp.originals);
    if (r.contains("originals_manifest") && !r["originals_manifest"].is_null()) {
      rp.originals_manifest = r["originals_manifest"].get<std::string>();
    }

    c.report_top_n = j.value("report", Json::object()).value("top_n", c.report_top_n);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.workers = j.value("workers", c.workers);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("config: ") + e.what());
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfig, e.what());
  }
  c.validate();
  return c;
}

Json to_json(const PipelineConfig& c, bool with_runtime) {
  const auto& sg = c.screening.smoothgrad;
  const auto& at = c.attribution;
  Json j{
      {"preset", c.preset},
      {"scenario", c.scenario ? Json(*c.scenario) : Json(nullptr)},
      {"generator", c.generator},
      {"sut", c.sut},
      {"seeds", c.seeds},
      {"truncation", c.truncation},
      {"target", c.target},
      {"screening",
       {{"method", to_string(c.screening.method)},
        {"samples", sg.samples},
        {"sigma", sg.sigma ? Json(*sg.sigma) : Json(nullptr)},
        {"sigma_scale", sg.sigma_scale},
        {"rng_seed", sg.rng_seed},
        {"fda_step", c.screening.fda.step}}},
      {"budgets", {{"k_coarse_mid", c.k_coarse_mid}, {"k_fine", c.k_fine}}},
      {"oracle",
       {{"epsilon", c.oracle.epsilon},
        {"tau_fraction", c.oracle.tau_fraction},
        {"drop_convention", to_string(c.oracle.drop_convention)},
        {"bisection_tolerance", c.oracle.bisection_tolerance},
        {"bracket_tolerance", c.oracle.bracket_tolerance},
        {"max_iterations", c.oracle.max_iterations}}},
      {"attribution",
       {{"backend", at.backend},
        {"vote_samples", at.vote_samples},
        {"tie_rule", to_string(at.tie_rule)},
        {"mask_threshold", at.mask_threshold},
        {"task_attribute", at.task_attribute},
        {"templates_dir", at.templates_dir ? Json(*at.templates_dir) : Json(nullptr)},
        {"vlm",
         {{"base_url", at.vlm.base_url},
          {"path", at.vlm.path},
          {"model", at.vlm.model},
          {"api_key", at.vlm.api_key.empty() ? "" : "<redacted>"},
          {"label_key", at.vlm.label_key},
          {"max_retries", at.vlm.max_retries},
          {"timeout_seconds", at.vlm.timeout_seconds},
          {"max_tokens", at.vlm.max_tokens}}}}},
      {"repair",
       {{"mix_ratio", c.repair.mix.mix_ratio},
        {"holdout_fraction", c.repair.mix.holdout_fraction},
        {"rng_seed", c.repair.mix.rng_seed},
        {"optimizer", to_string(c.repair.training.optimizer)},
        {"learning_rate", c.repair.training.learning_rate},
        {"max_epochs", c.repair.training.max_epochs},
        {"early_stop", c.repair.training.early_stop},
        {"patience", c.repair.training.patience},
        {"originals", c.repair.originals},
        {"originals_manifest",
         c.repair.originals_manifest ? Json(*c.repair.originals_manifest) : Json(nullptr)}}},
      {"report", {{"top_n", c.report_top_n}}},
  };
  if (with_runtime) {
    j["output_dir"] = c.output_dir;
    j["workers"] = c.workers;
  }
  return j;
}

Json preset_json(const std::string& name) {
  Json base{{"preset", name},
            {"seeds", {{"count", 50}, {"start", 0}}},
            {"truncation", 0.7},
            {"screening", {{"method", "smoothgrad"}, {"samples", 10}}},
            {"budgets", {{"k_coarse_mid", 15}, {"k_fine", 5}}},
            {"oracle", {{"epsilon", 10.0}, {"tau_fraction", 0.4}}}};
  auto external = [&] {
    base["generator"] = {{"kind", "external"}, {"command", Json::array()}};
    base["sut"] = {{"kind", "external"}, {"command", Json::array()}};
    base["attribution"] = {{"backend", "vlm_http"}};
  };
  if (name == "synthetic") {
    base["generator"] = {{"kind", "scenario"}};
    base["sut"] = {{"kind", "scenario"}};
    base["attribution"] = {{"backend", "ground_truth"}, {"task_attribute", "object"}};
  } else if (name == "celeba") {
    external();
    base["attribution"]["task_attribute"] = "eyeglasses";
    base["attribution"]["vlm"] = {{"label_key", "glasses"}};
  } else if (name == "dogs") {
    external();
    base["attribution"]["task_attribute"] = "dog breed";
    base["attribution"]["vlm"] = {{"label_key", "breed"}};
  } else if (name == "cars") {
    external();
    base["truncation"] = 0.5;
    base["attribution"]["task_attribute"] = "car";
    base["attribution"]["vlm"] = {{"label_key", "car"}};
  } else {
    std::string valid;
    for (const auto& n : preset_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw Error(ErrorCode::kConfig, "unknown preset \"" + name + "\"; valid: " + valid);
  }
  return base;
}

std::vector<std::string> preset_names() { return {"synthetic", "celeba", "dogs", "cars"}; }

PipelineConfig pipeline_config_from_preset(const std::string& name, const Json& overrides) {
  Json merged = preset_json(name);
  merged.merge_patch(overrides);
  return pipeline_config_from_json(interpolate_env(merged));
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path, const Json& overrides) {
  Json file;
  try {
    file = Json::parse(read_text_file(path));
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::kConfig, path.string() + ": " + e.what());
  }
  if (!file.is_object()) throw Error(ErrorCode::kConfig, path.string() + ": not an object");
  Json merged = preset_json(file.value("preset", std::string("synthetic")));
  merged.merge_patch(file);
  merged.merge_patch(overrides);
  merged = interpolate_env(merged);
  // Relative scenario / template paths resolve against the config file.
  const auto base = path.parent_path();
  auto resolve = [&](Json& field) {
    if (field.is_string() && !field.get<std::string>().empty() &&
        std::filesystem::path(field.get<std::string>()).is_relative()) {
      field = (base / field.get<std::string>()).lexically_normal().string();
    }
  };
  if (merged.contains("scenario")) resolve(merged["scenario"]);
  if (merged.contains("attribution") && merged["attribution"].contains("templates_dir")) {
    resolve(merged["attribution"]["templates_dir"]);
  }
  return pipeline_config_from_json(merged);
}

std::string config_hash(const PipelineConfig& config) {
  return sha256_hex(to_json(config, false).dump());
}

std::string stage_hash(const PipelineConfig& config, std::string_view stage) {
  static const std::vector<std::pair<std::string_view, std::vector<std::string>>> kAdds = {
      {"screen",
       {"scenario", "generator", "sut", "seeds", "truncation", "target", "screening", "budgets"}},
      {"mine", {"oracle"}},
      {"attribute", {"attribution"}},
      {"explore", {}},
      {"repair", {"repair"}},
      {"report", {"report"}},
  };
  const Json full = to_json(config, false);
  Json subset = Json::object();
  for (const auto& [name, keys] : kAdds) {
    for (const auto& k : keys) subset[k] = full.at(k);
    if (name == stage) return sha256_hex(subset.dump());
  }
  throw Error(ErrorCode::kValidation, "unknown stage \"" + std::string(stage) + "\"");
}

}  // namespace styleprobe

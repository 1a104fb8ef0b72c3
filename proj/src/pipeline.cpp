#include "styleprobe/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "styleprobe/adapter.hpp"
#include "styleprobe/image_io.hpp"
#include "styleprobe/perturb.hpp"
#include "styleprobe/repair.hpp"
#include "styleprobe/util.hpp"

namespace styleprobe {

void parallel_for(std::size_t n, std::size_t workers,
                  const std::function<void(std::size_t, std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i, 0);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i, w);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

namespace {

constexpr std::uint64_t kOriginalsStream = 0x0516'1a15;

std::string image_name(std::uint64_t seed, const ChannelRef& ch, const std::string& phase) {
  return "images/" + std::to_string(seed) + "_" + std::to_string(ch.layer) + "_" +
         std::to_string(ch.channel) + "_" + phase + ".png";
}

std::string original_name(std::uint64_t seed) {
  return "images/" + std::to_string(seed) + "_original.png";
}

std::string seed_file(std::uint64_t seed) { return "seed_" + std::to_string(seed) + ".json"; }

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

std::vector<std::string> command_of(const Json& spec) {
  return spec.at("command").get<std::vector<std::string>>();
}

// Screen output for one seed, as consumed by later stages.
struct SeedScreen {
  StyleState state{{{0.0}}};
  LogitVector logits;
  SensitivityMap map;
  CandidateSet candidates;
  TaskKind task_kind = TaskKind::kBinary;
};

SeedScreen parse_seed_screen(const Json& j) {
  SeedScreen s;
  s.state = style_state_from_json(j.at("style_state"));
  s.logits = logits_from_json(j.at("original_logits"));
  s.map = sensitivity_map_from_json(j.at("sensitivity"));
  s.candidates = candidate_set_from_json(j.at("candidates"));
  s.task_kind = task_kind_from_string(j.at("task_kind").get<std::string>());
  return s;
}

struct MeanStd {
  std::optional<double> mean;
  std::optional<double> std;
};

MeanStd mean_std(const std::vector<double>& v) {
  if (v.empty()) return {};
  double sum = 0.0;
  for (double x : v) sum += x;
  const double mean = sum / static_cast<double>(v.size());
  double sq = 0.0;
  for (double x : v) sq += (x - mean) * (x - mean);
  return {mean, std::sqrt(sq / static_cast<double>(v.size()))};
}

}  // namespace

Pipeline::Pipeline(PipelineConfig config) : config_(std::move(config)) {
  config_.validate();
  hash_ = styleprobe::config_hash(config_);
  if (config_.scenario) scenario_ = load_scenario(*config_.scenario);
}

Pipeline::~Pipeline() = default;

void Pipeline::set_judgment_backend(std::unique_ptr<JudgmentBackend> backend) {
  judgment_ = std::move(backend);
}

Backends Pipeline::make_backends() const {
  Backends b;
  const std::string gk = config_.generator.at("kind").get<std::string>();
  if (gk == "scenario") {
    b.generator = std::make_unique<SyntheticGenerator>(scenario_->generator.config());
  } else if (gk == "synthetic") {
    b.generator = std::make_unique<SyntheticGenerator>(
        synthetic_config_from_json(config_.generator.value("config", Json::object())));
  } else {
    b.generator = std::make_unique<ExternalGenerator>(command_of(config_.generator));
  }
  const std::string sk = config_.sut.at("kind").get<std::string>();
  if (sk == "scenario") {
    b.sut = std::make_unique<ToyFeatureSut>(scenario_->sut);
  } else if (sk == "toy") {
    const auto path = config_.sut.at("path").get<std::string>();
    b.sut = std::make_unique<ToyFeatureSut>(
        ToyFeatureSut::from_json(Json::parse(read_text_file(path))));
  } else {
    b.sut = std::make_unique<ExternalSut>(command_of(config_.sut));
  }
  return b;
}

JudgmentBackend& Pipeline::judgment() {
  if (judgment_) return *judgment_;
  const auto& a = config_.attribution;
  if (a.backend == "ground_truth") {
    judgment_ = std::make_unique<GroundTruthBackend>(scenario_->ground_truth);
  } else {
    VlmConfig vlm = a.vlm;
    if (vlm.api_key.empty()) {
      if (const char* key = std::getenv("STYLEPROBE_VLM_API_KEY")) vlm.api_key = key;
    }
    PromptTemplates templates = a.templates_dir
                                    ? PromptTemplates::from_directory(*a.templates_dir)
                                    : PromptTemplates();
    judgment_ = std::make_unique<VlmHttpBackend>(std::move(vlm), std::move(templates));
  }
  return *judgment_;
}

Json Pipeline::load_artifact(const std::string& stage, const std::string& file) const {
  const auto path = output_dir() / stage / file;
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorCode::kMissingArtifact,
                "missing " + path.string() + ": run `styleprobe " + stage + "` first");
  }
  Json j;
  try {
    j = Json::parse(read_text_file(path));
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::kMissingArtifact, path.string() + " is unreadable (" + e.what() +
                                                 "); rerun `styleprobe " + stage + "`");
  }
  if (j.value("stage_hash", std::string()) != stage_hash(config_, stage)) {
    throw Error(ErrorCode::kMissingArtifact,
                path.string() + " was produced under a different config; rerun `styleprobe " +
                    stage + "`");
  }
  return j;
}

std::vector<Json> Pipeline::load_jsonl_artifact(const std::string& stage,
                                                const std::string& file) const {
  // The summary carries the hash check; the stream itself is read as-is.
  load_artifact(stage, "summary.json");
  std::istringstream in(read_text_file(output_dir() / stage / file));
  std::vector<Json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(Json::parse(line));
  }
  return out;
}

void Pipeline::stamp(Json& body, const std::string& stage) const {
  body["stage"] = stage;
  body["config_hash"] = hash_;
  if (stage != "config") body["stage_hash"] = stage_hash(config_, stage);
}

void Pipeline::write_json(const std::filesystem::path& relative, Json body,
                          const std::string& stage) const {
  stamp(body, stage);
  write_text_file(output_dir() / relative, dump(body));
}

// ---------------------------------------------------------------------------
// Stage (b): screening

void Pipeline::screen() {
  write_json("config.json", Json{{"config", to_json(config_)}}, "config");
  const auto& seeds = config_.seeds;
  std::vector<std::optional<Backends>> pool(config_.workers);
  GeneratorTopology topology;
  std::mutex topology_mutex;
  std::vector<std::string> task_kinds(seeds.size());

  parallel_for(seeds.size(), config_.workers, [&](std::size_t i, std::size_t w) {
    if (!pool[w]) pool[w] = make_backends();
    Generator& gen = *pool[w]->generator;
    Sut& sut = *pool[w]->sut;
    {
      std::lock_guard lock(topology_mutex);
      topology = gen.topology();
    }
    const StyleState state = gen.sample_style_state(seeds[i], config_.truncation);
    const LogitVector logits = sut.forward(gen.synthesize(state)).with_target(config_.target);

    CountingSut counter(sut);
    auto run = [&](SensitivityMethod method) {
      switch (method) {
        case SensitivityMethod::kGrad:
          return grad_saliency(state, gen, counter, config_.target);
        case SensitivityMethod::kSmoothGrad:
          return smoothgrad(state, gen, counter, config_.target, config_.screening.smoothgrad);
        case SensitivityMethod::kFda:
          break;
      }
      return fda(state, gen, counter, config_.target, config_.screening.fda);
    };
    SensitivityMap map;
    try {
      map = run(config_.screening.method);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNotDifferentiable) throw;
      log_warning("seed " + std::to_string(seeds[i]) + ": " + e.what() +
                  "; falling back to fda");
      counter.reset();
      map = run(SensitivityMethod::kFda);
    }
    const CandidateSet candidates =
        select_candidates(map, gen.topology(), config_.k_coarse_mid, config_.k_fine);
    const std::string task = std::string(to_string(sut.capabilities().task_kind));
    task_kinds[i] = task;
    log_info("screen seed " + std::to_string(seeds[i]) + ": " +
             std::string(to_string(map.method)) + " used " +
             std::to_string(counter.forward_calls()) + " SUT forward passes, " +
             std::to_string(counter.gradient_calls()) + " input gradients; " +
             std::to_string(candidates.entries.size()) + " candidates");
    write_json("screen/" + seed_file(seeds[i]),
               Json{{"seed", seeds[i]},
                    {"task_kind", task},
                    {"style_state", to_json(state)},
                    {"original_logits", to_json(logits)},
                    {"sensitivity", to_json(map)},
                    {"candidates", to_json(candidates)},
                    {"forward_calls", counter.forward_calls()},
                    {"gradient_calls", counter.gradient_calls()}},
               "screen");
  });

  Json bands = Json::array();
  for (auto b : topology.layer_bands) bands.push_back(to_string(b));
  Json files = Json::array();
  for (auto s : seeds) files.push_back(seed_file(s));
  write_json("screen/summary.json",
             Json{{"seeds", seeds},
                  {"files", files},
                  {"layer_widths", topology.layer_widths},
                  {"layer_bands", bands},
                  {"task_kind", task_kinds.empty() ? "" : task_kinds.front()}},
             "screen");
}

// ---------------------------------------------------------------------------
// Stage (c): influential channel mining

namespace {

struct SeedProbes {
  std::size_t probed = 0;
  std::vector<Json> lines;
};

}  // namespace

void Pipeline::mine() {
  load_artifact("screen", "summary.json");
  const auto& seeds = config_.seeds;
  std::vector<SeedScreen> screens;
  for (auto s : seeds) screens.push_back(parse_seed_screen(load_artifact("screen", seed_file(s))));

  OracleSpec oracle = config_.oracle;
  oracle.kind = OracleKind::kConfidence;
  std::vector<std::optional<Backends>> pool(config_.workers);
  std::vector<SeedProbes> per_seed(seeds.size());

  parallel_for(seeds.size(), config_.workers, [&](std::size_t i, std::size_t w) {
    if (!pool[w]) pool[w] = make_backends();
    const SeedScreen& sc = screens[i];
    if (sc.candidates.empty()) {
      log_warning("mine seed " + std::to_string(seeds[i]) + ": empty candidate set");
      return;
    }
    auto probes = channel_perturb(sc.state, *pool[w]->generator, *pool[w]->sut,
                                  sc.candidates, oracle, config_.target);
    per_seed[i].probed = probes.size();
    auto hits = recorded(std::move(probes));
    if (!hits.empty()) write_png(output_dir() / original_name(seeds[i]), hits[0].original_image);
    for (const auto& p : hits) {
      const std::string name = image_name(p.seed, p.channel, "mine");
      write_png(output_dir() / name, p.perturbed_image);
      Json line = to_json(make_record(p, original_name(p.seed), name));
      line["phase"] = "mine";
      stamp(line, "mine");
      per_seed[i].lines.push_back(std::move(line));
    }
  });

  std::string stream;
  std::map<ChannelRef, std::vector<std::uint64_t>> influential;
  Json per_seed_json = Json::array();
  std::size_t probed = 0, hits = 0;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    probed += per_seed[i].probed;
    hits += per_seed[i].lines.size();
    per_seed_json.push_back({{"seed", seeds[i]},
                             {"probed", per_seed[i].probed},
                             {"recorded", per_seed[i].lines.size()}});
    for (const auto& line : per_seed[i].lines) {
      stream += line.dump() + "\n";
      influential[channel_ref_from_json(line.at("channel"))].push_back(seeds[i]);
    }
  }
  if (hits == 0) log_warning("mine: no influential channels recorded");
  write_text_file(output_dir() / "mine" / "probes.jsonl", stream);
  Json channels = Json::array();
  for (const auto& [ch, s] : influential) {
    channels.push_back({{"channel", to_json(ch)}, {"seeds", s}});
  }
  write_json("mine/summary.json",
             Json{{"drop_convention", to_string(oracle.drop_convention)},
                  {"tau_fraction", oracle.tau_fraction},
                  {"epsilon", oracle.epsilon},
                  {"n_probed", probed},
                  {"n_recorded", hits},
                  {"influential", channels},
                  {"per_seed", per_seed_json}},
             "mine");
}

// ---------------------------------------------------------------------------
// Stage (d): relevance attribution

void Pipeline::attribute() {
  const Json mine_summary = load_artifact("mine", "summary.json");
  const auto probes = load_jsonl_artifact("mine", "probes.jsonl");
  const auto& a = config_.attribution;
  JudgmentBackend& backend = judgment();
  Backends b = make_backends();

  std::map<std::uint64_t, SeedScreen> screens;
  auto screen_of = [&](std::uint64_t seed) -> const SeedScreen& {
    auto it = screens.find(seed);
    if (it == screens.end()) {
      it = screens.emplace(seed, parse_seed_screen(load_artifact("screen", seed_file(seed))))
               .first;
    }
    return it->second;
  };
  // Recorded delta per (channel, seed).
  std::map<std::pair<ChannelRef, std::uint64_t>, double> recorded_delta;
  for (const auto& p : probes) {
    recorded_delta[{channel_ref_from_json(p.at("channel")), p.at("seed").get<std::uint64_t>()}] =
        p.at("delta").get<double>();
  }

  Json verdicts = Json::array();
  Json relevant = Json::array(), spurious = Json::array();
  for (const auto& entry : mine_summary.at("influential")) {
    const ChannelRef ch = channel_ref_from_json(entry.at("channel"));
    std::vector<std::uint64_t> order = entry.at("seeds").get<std::vector<std::uint64_t>>();
    order.erase(std::unique(order.begin(), order.end()), order.end());
    for (auto s : config_.seeds) {
      if (std::find(order.begin(), order.end(), s) == order.end()) order.push_back(s);
    }
    std::vector<Vote> votes;
    std::vector<std::uint64_t> used;
    for (auto seed : order) {
      if (votes.size() == a.vote_samples) break;
      const SeedScreen& sc = screen_of(seed);
      double delta = 0.0;
      if (auto it = recorded_delta.find({ch, seed}); it != recorded_delta.end()) {
        delta = it->second;
      } else {
        const double alpha = sc.map.at(ch);
        if (alpha == 0.0) continue;
        delta = perturbation_delta(alpha, sc.logits.target_value(), config_.oracle.epsilon,
                                   sc.task_kind);
      }
      TriptychQuery q;
      q.original = b.generator->synthesize(sc.state);
      q.perturbed = b.generator->synthesize(sc.state.with_offset(ch, delta));
      q.diff_mask = build_diff_mask(q.original, q.perturbed, a.mask_threshold);
      q.task_attribute = a.task_attribute;
      q.channel = ch;
      write_png(output_dir() / "attribute" / "triptychs" /
                    (std::to_string(ch.layer) + "_" + std::to_string(ch.channel) + "_" +
                     std::to_string(seed) + ".png"),
                compose_triptych(q), 8);
      votes.push_back(judge_pair(q, backend));
      used.push_back(seed);
    }
    if (votes.empty()) {
      log_warning("attribute: no counterfactual sample for " + to_string(ch));
      continue;
    }
    const FeatureVerdict v = attribute_channel(ch, votes, a.tie_rule);
    Json vj = to_json(v);
    vj["sample_seeds"] = used;
    verdicts.push_back(vj);
    if (v.label == FeatureLabel::kRelevant) relevant.push_back(to_json(ch));
    if (v.label == FeatureLabel::kSpurious) spurious.push_back(to_json(ch));
  }
  if (auto* vlm = dynamic_cast<VlmHttpBackend*>(&backend)) {
    std::string archive;
    for (const auto& e : vlm->archive()) archive += e.dump() + "\n";
    write_text_file(output_dir() / "attribute" / "vlm_responses.jsonl", archive);
  }
  write_json("attribute/verdicts.json",
             Json{{"backend", backend.name()},
                  {"deterministic", backend.deterministic()},
                  {"tie_rule", to_string(a.tie_rule)},
                  {"vote_samples", a.vote_samples},
                  {"mask_threshold", a.mask_threshold},
                  {"task_attribute", a.task_attribute},
                  {"verdicts", verdicts},
                  {"relevant", relevant},
                  {"spurious", spurious}},
             "attribute");
  // Summary twin so the stream loader's hash check has one place to look.
  write_json("attribute/summary.json",
             Json{{"n_verdicts", verdicts.size()},
                  {"n_relevant", relevant.size()},
                  {"n_spurious", spurious.size()}},
             "attribute");
}

// ---------------------------------------------------------------------------
// Stage (e): relevant behavior exploration

void Pipeline::explore() {
  const Json verdicts = load_artifact("attribute", "verdicts.json");
  std::set<ChannelRef> relevant;
  for (const auto& c : verdicts.at("relevant")) relevant.insert(channel_ref_from_json(c));

  const auto& seeds = config_.seeds;
  std::vector<SeedScreen> screens;
  for (auto s : seeds) screens.push_back(parse_seed_screen(load_artifact("screen", seed_file(s))));

  OracleSpec oracle = config_.oracle;
  oracle.kind = OracleKind::kMisclassification;
  std::vector<std::optional<Backends>> pool(config_.workers);
  std::vector<std::vector<ProbeResult>> per_seed(seeds.size());

  parallel_for(seeds.size(), config_.workers, [&](std::size_t i, std::size_t w) {
    CandidateSet phase_two = screens[i].candidates;
    std::erase_if(phase_two.entries,
                  [&](const Candidate& c) { return !relevant.count(c.channel); });
    if (phase_two.empty()) return;
    for (const auto& c : phase_two.entries) {
      if (!relevant.count(c.channel)) {
        throw Error(ErrorCode::kPrecondition, "explore candidate outside the relevant set");
      }
    }
    if (!pool[w]) pool[w] = make_backends();
    per_seed[i] = recorded(channel_perturb(screens[i].state, *pool[w]->generator,
                                           *pool[w]->sut, phase_two, oracle, config_.target));
    if (!per_seed[i].empty()) {
      write_png(output_dir() / original_name(seeds[i]), per_seed[i][0].original_image);
    }
    for (const auto& p : per_seed[i]) {
      write_png(output_dir() / image_name(p.seed, p.channel, "explore"), p.perturbed_image);
    }
  });

  JudgmentBackend& backend = judgment();
  std::string stream;
  std::map<std::string, std::size_t> label_counts;
  std::size_t inexact = 0, total = 0;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    for (const auto& p : per_seed[i]) {
      RelabelQuery q;
      q.image = p.perturbed_image;
      q.task_attribute = config_.attribution.task_attribute;
      q.state = screens[i].state.with_offset(p.channel, *p.refined_delta);
      const ImageLabel label = relabel_boundary_image(q, backend);
      Json line = to_json(make_record(p, original_name(p.seed),
                                      image_name(p.seed, p.channel, "explore")));
      line["relabel"] = to_string(label);
      line["phase"] = "explore";
      stamp(line, "explore");
      stream += line.dump() + "\n";
      ++label_counts[std::string(to_string(label))];
      ++total;
      if (p.refinement && !p.refinement->exact) ++inexact;
    }
  }
  write_text_file(output_dir() / "explore" / "probes.jsonl", stream);
  Json rel = Json::array();
  for (const auto& c : relevant) rel.push_back(to_json(c));
  write_json("explore/summary.json",
             Json{{"relevant_channels", rel},
                  {"n_boundary", total},
                  {"n_inexact", inexact},
                  {"relabels", label_counts},
                  {"bisection_tolerance", oracle.bisection_tolerance},
                  {"bracket_tolerance", oracle.bracket_tolerance},
                  {"max_iterations", oracle.max_iterations}},
             "explore");
}

// ---------------------------------------------------------------------------
// Stage (f): relabel and repair

bool Pipeline::repair() {
  const auto mine_probes = load_jsonl_artifact("mine", "probes.jsonl");
  const Json verdicts = load_artifact("attribute", "verdicts.json");
  const auto explore_probes = load_jsonl_artifact("explore", "probes.jsonl");
  std::set<ChannelRef> spurious;
  for (const auto& c : verdicts.at("spurious")) spurious.insert(channel_ref_from_json(c));
  JudgmentBackend& backend = judgment();

  std::vector<RepairCandidate> originals, boundary, spurious_images;
  if (scenario_) {
    SyntheticGenerator gen(scenario_->generator.config());
    const auto images = sample_scenario_images(scenario_->spec, gen, config_.repair.originals,
                                               kOriginalsStream);
    for (std::size_t i = 0; i < images.size(); ++i) {
      const std::string name = "repair/originals/" + std::to_string(i) + ".png";
      write_png(output_dir() / name, images[i].image);
      originals.push_back({name,
                           images[i].label == 1 ? ImageLabel::kPositive : ImageLabel::kNegative,
                           RepairSource::kOriginal, std::nullopt, 0});
    }
  } else if (config_.repair.originals_manifest) {
    const std::filesystem::path manifest(*config_.repair.originals_manifest);
    std::istringstream in(read_text_file(manifest));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const Json j = Json::parse(line);
      std::filesystem::path image(j.at("image").get<std::string>());
      if (image.is_relative()) image = manifest.parent_path() / image;
      originals.push_back({std::filesystem::absolute(image).string(),
                           j.at("label").get<std::size_t>() == 1 ? ImageLabel::kPositive
                                                                 : ImageLabel::kNegative,
                           RepairSource::kOriginal, std::nullopt, 0});
    }
  } else {
    log_warning("repair: no originals configured; the repair set holds generated images only");
  }

  for (const auto& p : explore_probes) {
    boundary.push_back({p.at("perturbed_image").get<std::string>(),
                        image_label_from_string(p.at("relabel").get<std::string>()),
                        RepairSource::kBoundaryRelevant, channel_ref_from_json(p.at("channel")),
                        p.at("seed").get<std::uint64_t>()});
  }
  // Spurious counterfactuals keep the label of their unperturbed source.
  std::map<std::uint64_t, ImageLabel> source_label;
  for (const auto& p : mine_probes) {
    const ChannelRef ch = channel_ref_from_json(p.at("channel"));
    if (!spurious.count(ch)) continue;
    const auto seed = p.at("seed").get<std::uint64_t>();
    if (!source_label.count(seed)) {
      const SeedScreen sc = parse_seed_screen(load_artifact("screen", seed_file(seed)));
      RelabelQuery q;
      q.image = read_png(output_dir() / p.at("original_image").get<std::string>());
      q.task_attribute = config_.attribution.task_attribute;
      q.state = sc.state;
      source_label[seed] = relabel_boundary_image(q, backend);
    }
    spurious_images.push_back({p.at("perturbed_image").get<std::string>(), source_label[seed],
                               RepairSource::kSpuriousInvariant, ch, seed});
  }

  RepairManifest manifest =
      assemble_repair_set(originals, boundary, spurious_images, config_.repair.mix);
  std::string header_and_entries = manifest_to_jsonl(manifest);
  {
    // Stamp the header line.
    const auto eol = header_and_entries.find('\n');
    Json header = Json::parse(header_and_entries.substr(0, eol));
    stamp(header, "repair");
    header_and_entries = header.dump() + header_and_entries.substr(eol);
  }
  write_text_file(output_dir() / "repair" / "manifest.jsonl", header_and_entries);

  const auto root = output_dir();
  ImageLoader load = [root](const std::string& path) {
    const std::filesystem::path p(path);
    return read_png(p.is_absolute() ? p : root / p);
  };
  Backends b = make_backends();
  const RepairReport report = run_repair(*b.sut, manifest, load, config_.repair.training);
  if (auto* toy = dynamic_cast<ToyFeatureSut*>(b.sut.get()); toy && report.mode == "finetuned") {
    Json sut_json = toy->to_json();
    stamp(sut_json, "repair");
    write_text_file(output_dir() / "repair" / "sut_repaired.json", dump(sut_json));
  }
  auto count = [&](Split split, bool generated) { return manifest.select(split, generated).size(); };
  write_json("repair/summary.json",
             Json{{"report", to_json(report)},
                  {"counts",
                   {{"original_train", count(Split::kTrain, false)},
                    {"original_holdout", count(Split::kHoldout, false)},
                    {"generated_train", count(Split::kTrain, true)},
                    {"generated_holdout", count(Split::kHoldout, true)}}},
                  {"warnings", manifest.warnings},
                  {"optimizer", to_string(config_.repair.training.optimizer)},
                  {"learning_rate", config_.repair.training.learning_rate},
                  {"max_epochs", config_.repair.training.max_epochs}},
             "repair");
  return report.mode == "finetuned";
}

// ---------------------------------------------------------------------------
// Report

void Pipeline::report() {
  const Json screen_summary = load_artifact("screen", "summary.json");
  const Json mine_summary = load_artifact("mine", "summary.json");
  const auto mine_probes = load_jsonl_artifact("mine", "probes.jsonl");
  const Json verdicts = load_artifact("attribute", "verdicts.json");
  const auto explore_probes = load_jsonl_artifact("explore", "probes.jsonl");
  const TaskKind task_kind =
      task_kind_from_string(screen_summary.at("task_kind").get<std::string>());

  MetricReport m;
  std::map<ChannelRef, FeatureLabel> labels;
  for (const auto& v : verdicts.at("verdicts")) {
    const FeatureVerdict fv = feature_verdict_from_json(v);
    labels[fv.channel] = fv.label;
    if (fv.label == FeatureLabel::kRelevant) ++m.counts.relevant_channels;
    if (fv.label == FeatureLabel::kSpurious) ++m.counts.spurious_channels;
  }
  m.counts.influential_inputs = mine_probes.size();
  m.r_relevance = r_relevance(m.counts.relevant_channels, m.counts.spurious_channels);

  std::vector<double> ssim, d2i, d2b;
  std::set<std::string> warnings;
  std::size_t scales = 5;
  for (const auto& p : explore_probes) {
    const ImageTensor a = read_png(output_dir() / p.at("original_image").get<std::string>());
    const ImageTensor b = read_png(output_dir() / p.at("perturbed_image").get<std::string>());
    const MsSsimResult r = ms_ssim(a, b);
    if (r.warning) warnings.insert(*r.warning);
    scales = std::min(scales, r.scales_used);
    ssim.push_back(r.value);
    d2i.push_back(d2_image(a, b));
    d2b.push_back(d2_boundary(logits_from_json(p.at("perturbed_logits")), task_kind));
  }
  for (const auto& w : warnings) log_warning(w);
  auto fill = [](const std::vector<double>& v, std::optional<double>& mean,
                 std::optional<double>& sd) {
    const MeanStd s = mean_std(v);
    mean = s.mean;
    sd = s.std;
  };
  fill(ssim, m.ms_ssim, m.ms_ssim_std);
  fill(d2i, m.d2_image, m.d2_image_std);
  fill(d2b, m.d2_boundary, m.d2_boundary_std);
  m.ms_ssim_scales = scales;

  std::optional<Json> repair_summary;
  if (std::filesystem::exists(output_dir() / "repair" / "summary.json")) {
    repair_summary = load_artifact("repair", "summary.json").at("report");
  } else {
    log_info("report: no repair stage output; repair metrics omitted");
  }

  const std::string method = config_.screening.method == SensitivityMethod::kSmoothGrad
                                 ? "smoothgrad"
                                 : std::string(to_string(config_.screening.method));
  write_json("report/metrics.json",
             Json{{"metrics", to_json(m)},
                  {"judgment_backend", verdicts.at("backend")},
                  {"deterministic", verdicts.at("deterministic")},
                  {"drop_convention", mine_summary.at("drop_convention")},
                  {"d2_boundary_definition",
                   task_kind == TaskKind::kMulticlass ? "top1 - top2 logit gap"
                                                      : "|target logit|"},
                  {"warnings", std::vector<std::string>(warnings.begin(), warnings.end())},
                  {"repair", repair_summary ? *repair_summary : Json(nullptr)}},
             "report");
  write_text_file(output_dir() / "report" / "metrics.csv",
                  metrics_csv(method, config_.attribution.task_attribute, m));
  const std::string table = format_metrics_table(m);
  write_text_file(output_dir() / "report" / "metrics.txt", table);

  // Layer-band histogram.
  const auto widths = screen_summary.at("layer_widths").get<std::vector<std::size_t>>();
  const auto bands = screen_summary.at("layer_bands");
  std::vector<LayerCounts> layers(widths.size());
  for (std::size_t l = 0; l < widths.size(); ++l) {
    layers[l].layer = l;
    const std::string band = bands.at(l).get<std::string>();
    layers[l].band = band == "COARSE" ? LayerBand::kCoarse
                     : band == "MIDDLE" ? LayerBand::kMiddle
                                        : LayerBand::kFine;
  }
  for (const auto& [ch, label] : labels) {
    if (ch.layer >= layers.size()) continue;
    if (label == FeatureLabel::kRelevant) ++layers[ch.layer].relevant;
    if (label == FeatureLabel::kSpurious) ++layers[ch.layer].spurious;
  }
  write_text_file(output_dir() / "report" / "layer_bands.svg", layer_histogram_svg(layers));

  // Top-N spurious gallery, ranked by the number of seeds each channel moved.
  std::map<ChannelRef, std::vector<const Json*>> by_channel;
  for (const auto& p : mine_probes) by_channel[channel_ref_from_json(p.at("channel"))].push_back(&p);
  std::vector<std::pair<ChannelRef, std::size_t>> ranked;
  for (const auto& [ch, ps] : by_channel) {
    if (labels.count(ch) && labels[ch] == FeatureLabel::kSpurious) ranked.push_back({ch, ps.size()});
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > config_.report_top_n) ranked.resize(config_.report_top_n);
  std::vector<ImageTensor> rows;
  for (const auto& [ch, n] : ranked) {
    const Json& p = *by_channel[ch].front();
    TriptychQuery q;
    q.original = read_png(output_dir() / p.at("original_image").get<std::string>());
    q.perturbed = read_png(output_dir() / p.at("perturbed_image").get<std::string>());
    q.diff_mask = build_diff_mask(q.original, q.perturbed, config_.attribution.mask_threshold);
    q.task_attribute = config_.attribution.task_attribute;
    rows.push_back(compose_triptych(q));
  }
  if (!rows.empty()) {
    write_png(output_dir() / "report" / "spurious_gallery.png", vconcat(rows, 4), 8);
  }
  rows.clear();
  for (std::size_t i = 0; i < explore_probes.size() && i < config_.report_top_n; ++i) {
    const Json& p = explore_probes[i];
    rows.push_back(hconcat({read_png(output_dir() / p.at("original_image").get<std::string>()),
                            read_png(output_dir() / p.at("perturbed_image").get<std::string>())},
                           2));
  }
  if (!rows.empty()) write_png(output_dir() / "report" / "boundary_grid.png", vconcat(rows, 4), 8);
}

bool Pipeline::run_all() {
  screen();
  mine();
  attribute();
  explore();
  const bool finetuned = repair();
  report();
  return finetuned;
}

// ---------------------------------------------------------------------------
// Formatting

namespace {

std::string fixed(double v, int digits) {
  char buffer[64];
  std::snprintf(buffer, sizeof(buffer), "%.*f", digits, v);
  return buffer;
}

std::string opt_fixed(const std::optional<double>& v, int digits) {
  return v ? fixed(*v, digits) : "";
}

std::string mean_pm(const std::optional<double>& mean, const std::optional<double>& sd) {
  if (!mean) return "n/a";
  return fixed(*mean, 4) + " +/- " + fixed(sd.value_or(0.0), 4);
}

}  // namespace

std::string format_metrics_table(const MetricReport& r) {
  std::ostringstream out;
  char line[128];
  auto row = [&](const char* name, const std::string& value) {
    std::snprintf(line, sizeof(line), "%-20s %s\n", name, value.c_str());
    out << line;
  };
  row("R_Relevance", format_ratio(r.r_relevance));
  row("relevant channels", std::to_string(r.counts.relevant_channels));
  row("spurious channels", std::to_string(r.counts.spurious_channels));
  row("influential inputs", std::to_string(r.counts.influential_inputs));
  row("MS-SSIM", mean_pm(r.ms_ssim, r.ms_ssim_std));
  row("d2-image", mean_pm(r.d2_image, r.d2_image_std));
  row("d2-boundary", mean_pm(r.d2_boundary, r.d2_boundary_std));
  return out.str();
}

std::string metrics_csv(const std::string& method, const std::string& task,
                        const MetricReport& r) {
  std::string out =
      "method,task,r_relevance,relevant_channels,spurious_channels,influential_inputs,"
      "ms_ssim_mean,ms_ssim_std,ms_ssim_scales,d2_image_mean,d2_image_std,"
      "d2_boundary_mean,d2_boundary_std\n";
  out += method + "," + task + "," + format_ratio(r.r_relevance) + "," +
         std::to_string(r.counts.relevant_channels) + "," +
         std::to_string(r.counts.spurious_channels) + "," +
         std::to_string(r.counts.influential_inputs) + "," + opt_fixed(r.ms_ssim, 6) + "," +
         opt_fixed(r.ms_ssim_std, 6) + "," + std::to_string(r.ms_ssim_scales) + "," +
         opt_fixed(r.d2_image, 6) + "," + opt_fixed(r.d2_image_std, 6) + "," +
         opt_fixed(r.d2_boundary, 6) + "," + opt_fixed(r.d2_boundary_std, 6) + "\n";
  return out;
}

std::string layer_histogram_svg(const std::vector<LayerCounts>& counts) {
  constexpr int kBar = 14, kGap = 10, kHeight = 160, kLeft = 40, kTop = 30, kBottom = 50;
  std::size_t peak = 1;
  for (const auto& c : counts) peak = std::max({peak, c.relevant, c.spurious});
  const int group = 2 * kBar + kGap;
  const int width = kLeft + static_cast<int>(counts.size()) * group + 20;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << kTop + kHeight + kBottom << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  svg << "<text x=\"" << kLeft << "\" y=\"16\" font-size=\"12\">"
      << "Relevant (blue) and spurious (orange) channels per layer</text>\n";
  const int base = kTop + kHeight;
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << base << "\" x2=\"" << width - 10
      << "\" y2=\"" << base << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"4\" y=\"" << kTop + 4 << "\">" << peak << "</text>\n";
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const auto& c = counts[i];
    const int x = kLeft + static_cast<int>(i) * group;
    const auto bar = [&](std::size_t n, int dx, const char* color) {
      const int h = static_cast<int>(std::lround(static_cast<double>(n) * kHeight /
                                                  static_cast<double>(peak)));
      svg << "<rect x=\"" << x + dx << "\" y=\"" << base - h << "\" width=\"" << kBar
          << "\" height=\"" << h << "\" fill=\"" << color << "\"/>\n";
    };
    bar(c.relevant, 0, "#3b6fb6");
    bar(c.spurious, kBar, "#e08a2c");
    svg << "<text x=\"" << x << "\" y=\"" << base + 14 << "\">L" << c.layer << "</text>\n";
    svg << "<text x=\"" << x << "\" y=\"" << base + 28 << "\">"
        << to_string(c.band).substr(0, 1) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace styleprobe

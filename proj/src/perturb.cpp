#include "styleprobe/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "styleprobe/util.hpp"

namespace styleprobe {

std::string_view to_string(OracleKind kind) {
  return kind == OracleKind::kConfidence ? "confidence" : "misclassification";
}

std::string_view to_string(DropConvention convention) {
  return convention == DropConvention::kSigned ? "signed" : "absolute";
}

DropConvention drop_convention_from_string(std::string_view text) {
  if (text == "signed") return DropConvention::kSigned;
  if (text == "absolute") return DropConvention::kAbsolute;
  throw Error(ErrorCode::kConfig, "unknown drop convention '" + std::string(text) +
                                      "'; valid: signed, absolute");
}

void OracleSpec::validate() const {
  if (!(tau_fraction > 0.0)) throw Error(ErrorCode::kConfig, "tau_fraction must be > 0");
  if (!(epsilon > 0.0)) throw Error(ErrorCode::kConfig, "epsilon must be > 0");
  if (!(bisection_tolerance > 0.0)) {
    throw Error(ErrorCode::kConfig, "bisection tolerance must be > 0");
  }
  if (!(bracket_tolerance > 0.0)) throw Error(ErrorCode::kConfig, "bracket tolerance must be > 0");
}

namespace {

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace

double perturbation_delta(double alpha, double y_target, double epsilon,
                          TaskKind task_kind) {
  if (alpha == 0.0) {
    throw Error(ErrorCode::kPrecondition, "zero-sensitivity channels have no direction");
  }
  if (task_kind == TaskKind::kBinary) {
    // A logit of exactly 0 counts as the negative class, like predicted_label.
    const double polarity = y_target > 0.0 ? 1.0 : -1.0;
    return -epsilon * sign(alpha) * polarity;
  }
  return -epsilon * sign(alpha);
}

double confidence_drop(const LogitVector& original, const LogitVector& perturbed,
                       TaskKind task_kind, DropConvention convention) {
  const double before = original.target_value();
  const double after = perturbed.values()[original.target_index()];
  if (convention == DropConvention::kAbsolute) return std::abs(after - before);
  if (task_kind == TaskKind::kMulticlass) return before - after;
  const double polarity = before > 0.0 ? 1.0 : -1.0;
  return polarity * (before - after);
}

bool exceeds_threshold(double drop, double y_target, double tau_fraction) {
  return drop > tau_fraction * std::abs(y_target);
}

double decision_margin(const LogitVector& logits) {
  auto v = logits.values();
  if (v.size() == 1) return std::abs(v[0]);
  double top1 = -std::numeric_limits<double>::infinity();
  double top2 = top1;
  for (double x : v) {
    if (x > top1) {
      top2 = top1;
      top1 = x;
    } else if (x > top2) {
      top2 = x;
    }
  }
  return top1 - top2;
}

BoundaryRefinement refine_boundary(const StyleState& state, Generator& generator,
                                   Sut& sut, const ChannelRef& channel,
                                   double delta_flip, const OracleSpec& oracle) {
  const std::size_t original_label = predicted_label(sut.forward(generator.synthesize(state)));
  auto evaluate = [&](double delta) {
    return sut.forward(generator.synthesize(state.with_offset(channel, delta)));
  };

  LogitVector at_flip = evaluate(delta_flip);
  if (delta_flip == 0.0 || predicted_label(at_flip) == original_label) {
    throw Error(ErrorCode::kPrecondition,
                "refine_boundary: delta " + std::to_string(delta_flip) +
                    " does not flip the label of " + to_string(channel));
  }

  BoundaryRefinement result;
  result.tolerance = oracle.bisection_tolerance;
  const double direction = delta_flip > 0.0 ? 1.0 : -1.0;
  double lo = 0.0;
  double hi = std::abs(delta_flip);
  double hi_margin = decision_margin(at_flip);

  auto converged = [&] {
    return hi_margin <= oracle.bisection_tolerance && hi - lo <= oracle.bracket_tolerance * hi;
  };
  while (!converged() && result.iterations < oracle.max_iterations) {
    ++result.iterations;
    const double mid = 0.5 * (lo + hi);
    LogitVector logits = evaluate(direction * mid);
    if (predicted_label(logits) != original_label) {
      hi = mid;
      hi_margin = decision_margin(logits);
    } else {
      lo = mid;
    }
  }
  result.delta_star = direction * hi;
  result.margin_at_star = hi_margin;
  result.exact = hi_margin <= oracle.bisection_tolerance;
  return result;
}

std::vector<ProbeResult> channel_perturb(const StyleState& state, Generator& generator,
                                         Sut& sut, const CandidateSet& candidates,
                                         const OracleSpec& oracle, std::size_t target) {
  oracle.validate();
  check_topology(generator.topology(), state);
  const TaskKind task_kind = sut.capabilities().task_kind;
  const ImageTensor original_image = generator.synthesize(state);
  const LogitVector original_logits = sut.forward(original_image).with_target(target);
  const std::size_t original_label = predicted_label(original_logits);

  std::vector<ProbeResult> results;
  results.reserve(candidates.entries.size());
  for (const auto& candidate : candidates.entries) {
    if (candidate.score == 0.0) continue;
    try {
      ProbeResult probe;
      probe.seed = state.seed();
      probe.channel = candidate.channel;
      probe.alpha = candidate.score;
      probe.delta = perturbation_delta(candidate.score, original_logits.target_value(),
                                       oracle.epsilon, task_kind);
      probe.original_image = original_image;
      probe.original_logits = original_logits;

      const StyleState perturbed = state.with_offset(candidate.channel, probe.delta);
      probe.perturbed_image = generator.synthesize(perturbed);
      probe.perturbed_logits = sut.forward(probe.perturbed_image).with_target(target);
      probe.drop = confidence_drop(original_logits, probe.perturbed_logits, task_kind,
                                   oracle.drop_convention);

      if (oracle.kind == OracleKind::kConfidence) {
        probe.verdict = exceeds_threshold(probe.drop, original_logits.target_value(),
                                          oracle.tau_fraction)
                            ? Verdict::kInfluential
                            : Verdict::kNoEffect;
      } else if (predicted_label(probe.perturbed_logits) != original_label) {
        BoundaryRefinement refinement =
            refine_boundary(state, generator, sut, candidate.channel, probe.delta, oracle);
        if (!refinement.exact) {
          log_warning("boundary refinement for " + to_string(candidate.channel) +
                      " (seed " + std::to_string(state.seed()) +
                      ") hit max_iterations with margin " +
                      std::to_string(refinement.margin_at_star));
        }
        probe.refined_delta = refinement.delta_star;
        probe.refinement = refinement;
        probe.perturbed_image = generator.synthesize(
            state.with_offset(candidate.channel, refinement.delta_star));
        probe.perturbed_logits = sut.forward(probe.perturbed_image).with_target(target);
        probe.verdict = Verdict::kMisclassified;
      } else {
        probe.verdict = Verdict::kNoEffect;
      }
      results.push_back(std::move(probe));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kBackend) throw;
      log_warning("probe of " + to_string(candidate.channel) + " (seed " +
                  std::to_string(state.seed()) + ") failed: " + e.what());
    }
  }
  return results;
}

std::vector<ProbeResult> recorded(std::vector<ProbeResult> probes) {
  std::erase_if(probes, [](const ProbeResult& p) { return p.verdict == Verdict::kNoEffect; });
  return probes;
}

}  // namespace styleprobe

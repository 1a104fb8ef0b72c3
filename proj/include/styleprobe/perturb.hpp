#pragma once

#include <vector>

#include "styleprobe/core.hpp"
#include "styleprobe/genbackend.hpp"
#include "styleprobe/sensitivity.hpp"
#include "styleprobe/sut.hpp"

namespace styleprobe {

enum class OracleKind { kConfidence, kMisclassification };

// How a confidence drop is measured.
//   kSigned:   sign(y_orig) * (y_orig - y_pert) for single-logit tasks, i.e.
//              movement toward (and past) the decision threshold;
//              y_orig[t] - y_pert[t] for multiclass targets.
//   kAbsolute: |y_pert[t] - y_orig[t]|.
enum class DropConvention { kSigned, kAbsolute };

std::string_view to_string(OracleKind kind);
std::string_view to_string(DropConvention convention);
DropConvention drop_convention_from_string(std::string_view text);

struct OracleSpec {
  OracleKind kind = OracleKind::kConfidence;
  double tau_fraction = 0.4;
  double epsilon = 10.0;
  DropConvention drop_convention = DropConvention::kSigned;
  // Bisection stops once the margin at the flipping end is within
  // bisection_tolerance and the bracket is narrower than bracket_tolerance
  // times its upper end, or after max_iterations.
  double bisection_tolerance = 1e-2;
  double bracket_tolerance = 1e-3;
  std::size_t max_iterations = 12;

  void validate() const;
};

// Binary: -eps * sign(alpha) * sign(y_t). Multiclass and detection:
// -eps * sign(alpha). Requires alpha != 0.
double perturbation_delta(double alpha, double y_target, double epsilon, TaskKind task_kind);

double confidence_drop(const LogitVector& original, const LogitVector& perturbed,
                       TaskKind task_kind, DropConvention convention);

// Strictly greater than tau_fraction * |y_orig[t]|.
bool exceeds_threshold(double drop, double y_target, double tau_fraction);

// Distance to the decision boundary: |y| for one logit, top-1 minus top-2
// otherwise.
double decision_margin(const LogitVector& logits);

// Bisection on |delta| in [0, |delta_flip|] keeping delta's sign. Requires the
// label to flip at delta_flip and not at 0 (kPrecondition otherwise).
BoundaryRefinement refine_boundary(const StyleState& state, Generator& generator,
                                   Sut& sut, const ChannelRef& channel,
                                   double delta_flip, const OracleSpec& oracle);

// Runs the oracle over every candidate. Returns one ProbeResult per probed
// channel (NO_EFFECT included), in candidate order. A failing backend call
// skips that channel with a warning.
std::vector<ProbeResult> channel_perturb(const StyleState& state, Generator& generator,
                                         Sut& sut, const CandidateSet& candidates,
                                         const OracleSpec& oracle, std::size_t target);

// Probes flagged by the oracle (verdict != NO_EFFECT).
std::vector<ProbeResult> recorded(std::vector<ProbeResult> probes);

}  // namespace styleprobe

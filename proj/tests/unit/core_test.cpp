#include <cstring>

#include "doctest.h"
#include "styleprobe/core.hpp"
#include "styleprobe/serialization.hpp"
#include "test_util.hpp"

namespace styleprobe {
namespace {

using testing::error_code_of;

StyleState small_state() { return StyleState({{1.0, -2.0, 3.0}, {0.5}, {4.0, 5.0}}, 7, 0.7); }

TEST_CASE("style state edits return new states") {
  const StyleState s = small_state();
  const StyleState t = s.with_offset({0, 1}, 10.0);
  CHECK(s.at({0, 1}) == -2.0);
  CHECK(t.at({0, 1}) == 8.0);
  CHECK(t.seed() == 7);
  CHECK(t.truncation() == 0.7);
  CHECK(s.with_value({2, 0}, -1.0).at({2, 0}) == -1.0);
  CHECK(error_code_of([&] { (void)s.at({1, 1}); }) == ErrorCode::kTopology);
}

TEST_CASE("style state structure is validated") {
  CHECK(error_code_of([] { StyleState({}); }) == ErrorCode::kSchema);
  CHECK(error_code_of([] { StyleState(std::vector<std::vector<double>>{{1.0}, {}}); }) == ErrorCode::kSchema);
  CHECK(error_code_of([] { StyleState({{1.0}}, 0, 0.0); }) == ErrorCode::kValidation);
}

TEST_CASE("flat index round trip") {
  const StyleState s = small_state();
  const auto flat = s.flatten();
  REQUIRE(flat.size() == 6);
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const ChannelRef ref = s.ref_of_flat(i);
    CHECK(s.flat_index(ref) == i);
    CHECK(s.at(ref) == flat[i]);
  }
  const auto widths = s.widths();
  CHECK(StyleState::unflatten(widths, flat, 7, 0.7) == s);
}

TEST_CASE("style payload round trip and corruption") {
  const StyleState s = small_state();
  auto bytes = serialize_style_state(s);
  CHECK(deserialize_style_state(bytes) == s);
  auto truncated = bytes;
  truncated.pop_back();
  CHECK(error_code_of([&] { deserialize_style_state(truncated); }) == ErrorCode::kDecode);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK(error_code_of([&] { deserialize_style_state(trailing); }) == ErrorCode::kDecode);
  bytes[0] ^= 0xff;
  CHECK(error_code_of([&] { deserialize_style_state(bytes); }) == ErrorCode::kDecode);
}

TEST_CASE("non-finite style coordinates cannot be encoded") {
  const StyleState s({{1.0, std::nan("")}});
  CHECK_FALSE(s.all_finite());
  CHECK(error_code_of([&] { serialize_style_state(s); }) == ErrorCode::kEncode);
}

TEST_CASE("image tensor shape checks and luma") {
  CHECK(error_code_of([] { ImageTensor({2, 2, 3}, std::vector<double>(5)); }) ==
        ErrorCode::kShapeMismatch);
  ImageTensor red = ImageTensor::filled({1, 1, 3}, 0.0);
  red.at(0, 0, 0) = 1.0;
  CHECK(red.to_gray().at(0, 0, 0) == doctest::Approx(0.299));
  const auto c = ImageTensor::clamped({1, 2, 1}, {-0.5, 1.5});
  CHECK(c.at(0, 0, 0) == 0.0);
  CHECK(c.at(0, 1, 0) == 1.0);
  CHECK(c.in_unit_range());
}

TEST_CASE("predicted label conventions") {
  CHECK(predicted_label(LogitVector({0.0})) == 0);
  CHECK(predicted_label(LogitVector({1e-9})) == 1);
  CHECK(predicted_label(LogitVector({2.0, 5.0, 5.0})) == 1);
  CHECK(error_code_of([] { LogitVector({1.0}, 1); }) == ErrorCode::kValidation);
  CHECK(error_code_of([] { LogitVector(std::vector<double>{}); }) == ErrorCode::kValidation);
}

TEST_CASE("raw tensor byte layout") {
  RawTensor t{{2, 1}, {1.5f, -2.0f}};
  const auto bytes = encode_tensor(t);
  REQUIRE(bytes.size() == 8 + 4 + 2 * 4 + 2 * 4);
  CHECK(std::memcmp(bytes.data(), "SPTENSR1", 8) == 0);
  // rank 2, dims 2 and 1, little endian
  CHECK(bytes[8] == 2);
  CHECK(bytes[12] == 2);
  CHECK(bytes[16] == 1);
  float first = 0.0f;
  std::memcpy(&first, bytes.data() + 20, 4);
  CHECK(first == 1.5f);
  std::size_t offset = 0;
  const RawTensor back = decode_tensor(bytes, offset);
  CHECK(offset == bytes.size());
  CHECK(back.dims == t.dims);
  CHECK(back.values == t.values);

  auto bad = bytes;
  bad[0] = 'X';
  offset = 0;
  CHECK(error_code_of([&] { decode_tensor(bad, offset); }) == ErrorCode::kDecode);
  auto short_payload = bytes;
  short_payload.resize(bytes.size() - 1);
  offset = 0;
  CHECK(error_code_of([&] { decode_tensor(short_payload, offset); }) == ErrorCode::kDecode);
}

TEST_CASE("image and style raw conversion") {
  const ImageTensor img = testing::random_image({3, 4, 3}, 1);
  const ImageTensor back = image_from_raw(to_raw(img));
  REQUIRE(back.shape() == img.shape());
  for (std::size_t i = 0; i < img.data().size(); ++i) {
    CHECK(back.data()[i] == doctest::Approx(img.data()[i]).epsilon(1e-6));
  }
  const StyleState s({{0.25, -1.0}, {2.0}});
  const auto raw = to_raw(s);
  CHECK(raw.size() == 2);
  CHECK(style_from_raw(raw) == s);
}

TEST_CASE("probe record JSON round trip") {
  ProbeRecord r;
  r.seed = 3;
  r.channel = {1, 2};
  r.alpha = -0.25;
  r.delta = 10.0;
  r.original_image = "images/3_original.png";
  r.perturbed_image = "images/3_1_2_mine.png";
  r.original_logits = LogitVector({1.0, 2.0}, 1);
  r.perturbed_logits = LogitVector({1.5, 0.5}, 1);
  r.drop = 1.5;
  r.verdict = Verdict::kMisclassified;
  r.refined_delta = 4.0;
  r.refinement = BoundaryRefinement{4.0, 0.001, 9, 0.01, true};
  const Json j = to_json(r);
  CHECK(j.at("verdict") == "MISCLASSIFIED");
  const ProbeRecord back = probe_record_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(error_code_of([] { probe_record_from_json(Json::object()); }) == ErrorCode::kSchema);
}

TEST_CASE("enum strings round trip") {
  for (auto v : {Vote::kRelevantChange, Vote::kNoRelevantChange, Vote::kAmbiguous}) {
    CHECK(vote_from_string(to_string(v)) == v);
  }
  for (auto l : {ImageLabel::kPositive, ImageLabel::kNegative, ImageLabel::kAmbiguous}) {
    CHECK(image_label_from_string(to_string(l)) == l);
  }
  CHECK(error_code_of([] { verdict_from_string("MAYBE"); }) == ErrorCode::kSchema);
}

}  // namespace
}  // namespace styleprobe

#include <httplib.h>
#include <openssl/evp.h>

#include <atomic>
#include <fstream>
#include <thread>

#include "doctest.h"
#include "styleprobe/attribution.hpp"
#include "styleprobe/image_io.hpp"
#include "test_util.hpp"

namespace styleprobe {
namespace {

using testing::error_code_of;
using testing::TempDir;

TEST_CASE("diff mask takes the channel maximum and normalizes") {
  const ImageShape shape{1, 3, 3};
  ImageTensor a(shape, {0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.2, 0.2, 0.2});
  ImageTensor b(shape, {0.0, 0.1, 0.0, 0.5, 0.5, 0.9, 0.2, 0.25, 0.2});
  // Raw maxima 0.1, 0.4, 0.05 -> 0.25, 1.0, 0.125 -> last one cut at 0.2.
  const ImageTensor m = build_diff_mask(a, b);
  CHECK(m.shape() == ImageShape{1, 3, 1});
  CHECK(m.at(0, 0, 0) == doctest::Approx(0.25));
  CHECK(m.at(0, 1, 0) == doctest::Approx(1.0));
  CHECK(m.at(0, 2, 0) == 0.0);
  CHECK(build_diff_mask(a, a).data()[1] == 0.0);
  CHECK(error_code_of([&] { build_diff_mask(a, ImageTensor::filled({1, 2, 3}, 0.0)); }) ==
        ErrorCode::kShapeMismatch);
}

TEST_CASE("triptych layout") {
  TriptychQuery q;
  q.original = ImageTensor::filled({4, 5, 3}, 0.0);
  q.perturbed = ImageTensor::filled({4, 5, 3}, 0.5);
  q.diff_mask = ImageTensor::filled({4, 5, 1}, 0.25);
  const ImageTensor t = compose_triptych(q);
  CHECK(t.shape() == ImageShape{4, 3 * 5 + 2 * 2, 3});
  CHECK(t.at(0, 0, 0) == 0.0);
  CHECK(t.at(0, 5, 1) == 1.0);  // separator
  CHECK(t.at(0, 7, 2) == 0.5);
  CHECK(t.at(3, 18, 0) == 0.25);
  q.diff_mask = ImageTensor::filled({4, 5, 3}, 0.0);
  CHECK(error_code_of([&] { compose_triptych(q); }) == ErrorCode::kShapeMismatch);
}

TEST_CASE("majority vote and tie rules") {
  using V = Vote;
  const ChannelRef ch{1, 2};
  CHECK(attribute_channel(ch, {V::kRelevantChange, V::kRelevantChange, V::kNoRelevantChange})
            .label == FeatureLabel::kRelevant);
  CHECK(attribute_channel(ch, {V::kNoRelevantChange, V::kAmbiguous, V::kAmbiguous}).label ==
        FeatureLabel::kSpurious);
  const std::vector<Vote> tie{V::kRelevantChange, V::kNoRelevantChange, V::kAmbiguous};
  CHECK(attribute_channel(ch, tie).label == FeatureLabel::kRelevant);
  CHECK(attribute_channel(ch, tie, TieRule::kSpurious).label == FeatureLabel::kSpurious);
  CHECK(attribute_channel(ch, tie, TieRule::kUndetermined).label ==
        FeatureLabel::kUndetermined);
  CHECK(attribute_channel(ch, {V::kAmbiguous}, TieRule::kUndetermined).label ==
        FeatureLabel::kUndetermined);
  const auto v = attribute_channel(ch, tie);
  CHECK(v.n_samples == 3);
  CHECK(v.votes == tie);
  CHECK(error_code_of([&] { attribute_channel(ch, {}); }) == ErrorCode::kPrecondition);
  CHECK(tie_rule_from_string("spurious") == TieRule::kSpurious);
  CHECK(error_code_of([] { tie_rule_from_string("coin"); }) == ErrorCode::kConfig);
}

TEST_CASE("attribution answers") {
  CHECK(parse_attribution_response(R"({"answer": "yes, eyeglasses are added"})") ==
        Vote::kRelevantChange);
  CHECK(parse_attribution_response(R"(Sure. {"answer": "No, eyeglasses remain the same."})") ==
        Vote::kNoRelevantChange);
  CHECK(parse_attribution_response(R"({"answer": "Yes"})") == Vote::kRelevantChange);
  CHECK(parse_attribution_response(R"({"answer": "nope"})") == Vote::kAmbiguous);
  CHECK(parse_attribution_response(R"({"answer": "maybe"})") == Vote::kAmbiguous);
  CHECK(parse_attribution_response("yes") == Vote::kAmbiguous);
  CHECK(parse_attribution_response(R"({"reply": "yes"})") == Vote::kAmbiguous);
  CHECK(parse_attribution_response(R"({"answer": "yes" )") == Vote::kAmbiguous);
}

TEST_CASE("relabel answers") {
  CHECK(parse_relabel_response(R"({"glasses": "Yes"})", "glasses") == ImageLabel::kPositive);
  CHECK(parse_relabel_response(R"({"glasses": "No"})", "glasses") == ImageLabel::kNegative);
  CHECK(parse_relabel_response(R"({"glasses": "Ambiguous"})", "glasses") ==
        ImageLabel::kAmbiguous);
  CHECK(parse_relabel_response(R"({"label": "no"})", "glasses") == ImageLabel::kNegative);
  CHECK(parse_relabel_response(R"({"a": "no", "b": "yes"})", "glasses") ==
        ImageLabel::kAmbiguous);
  CHECK(parse_relabel_response("garbage", "glasses") == ImageLabel::kAmbiguous);
}

TEST_CASE("prompt templates") {
  PromptTemplates t;
  const std::string r = t.render("relabel", "eyeglasses", "glasses");
  CHECK(r.find("wearing eyeglasses") != std::string::npos);
  CHECK(r.find("\"glasses\"") != std::string::npos);
  CHECK(r.find("{attribute}") == std::string::npos);
  CHECK(t.render("relevance_attribution", "a hat", "x").find("presence of a hat") !=
        std::string::npos);
  CHECK(error_code_of([&] { t.get("missing"); }) == ErrorCode::kConfig);

  TempDir dir;
  std::ofstream(dir.path() / "relabel.txt") << "Is there {attribute}? key {label_key}";
  std::ofstream(dir.path() / "notes.md") << "ignored";
  const auto loaded = PromptTemplates::from_directory(dir.path());
  CHECK(loaded.render("relabel", "an object", "k") == "Is there an object? key k");
  CHECK(loaded.all().size() == 2);
  CHECK(error_code_of([&] { PromptTemplates::from_directory(dir.path() / "nope"); }) ==
        ErrorCode::kConfig);
}

TEST_CASE("ground truth backend") {
  GroundTruthBackend gt(GroundTruthMap::for_synthetic(SyntheticConfig{}));
  TriptychQuery q;
  q.original = q.perturbed = ImageTensor::filled({2, 2, 3}, 0.0);
  q.diff_mask = ImageTensor::filled({2, 2, 1}, 0.0);
  q.channel = kObjectPresence;
  CHECK(judge_pair(q, gt) == Vote::kRelevantChange);
  q.channel = kCuePresence;
  CHECK(judge_pair(q, gt) == Vote::kNoRelevantChange);
  q.channel.reset();
  CHECK(error_code_of([&] { judge_pair(q, gt); }) == ErrorCode::kPrecondition);

  SyntheticGenerator gen;
  RelabelQuery r;
  r.state = gen.mean_style().with_value(kObjectPresence, 2.0);
  CHECK(relabel_boundary_image(r, gt) == ImageLabel::kPositive);
  r.state = gen.mean_style().with_value(kObjectPresence, -2.0);
  CHECK(relabel_boundary_image(r, gt) == ImageLabel::kNegative);
}

// Chat-completions stand-in. Fails the first `failures` requests with 503.
class MockVlm {
 public:
  explicit MockVlm(int failures, std::string reply) : failures_(failures) {
    server_.Post("/v1/chat/completions", [this, reply](const httplib::Request& req,
                                                       httplib::Response& res) {
      last_auth_ = req.get_header_value("Authorization");
      last_body_ = req.body;
      if (calls_++ < failures_) {
        res.status = 503;
        res.set_content("busy", "text/plain");
        return;
      }
      Json body{{"choices", Json::array({{{"message", {{"content", reply}}}}})}};
      res.set_content(body.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockVlm() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int calls() const { return calls_; }
  std::string last_auth() const { return last_auth_; }
  std::string last_body() const { return last_body_; }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  int failures_;
  std::atomic<int> calls_{0};
  std::string last_auth_, last_body_;
};

TriptychQuery small_query() {
  TriptychQuery q;
  q.original = ImageTensor::filled({8, 8, 3}, 0.2);
  q.perturbed = ImageTensor::filled({8, 8, 3}, 0.6);
  q.diff_mask = build_diff_mask(q.original, q.perturbed);
  q.task_attribute = "eyeglasses";
  return q;
}

TEST_CASE("VLM backend request, retries and archive") {
  MockVlm server(2, R"({"answer": "yes, eyeglasses are added"})");
  VlmConfig cfg;
  cfg.base_url = server.url();
  cfg.api_key = "secret";
  cfg.max_retries = 2;
  cfg.timeout_seconds = 5;
  VlmHttpBackend vlm(cfg, PromptTemplates{});
  CHECK(judge_pair(small_query(), vlm) == Vote::kRelevantChange);
  CHECK(server.calls() == 3);
  CHECK(server.last_auth() == "Bearer secret");
  CHECK_FALSE(vlm.deterministic());

  const Json sent = Json::parse(server.last_body());
  CHECK(sent["model"] == "gpt-4o");
  const auto& content = sent["messages"][0]["content"];
  CHECK(content[0]["text"].get<std::string>().find("eyeglasses") != std::string::npos);
  const std::string url = content[1]["image_url"]["url"];
  REQUIRE(url.rfind("data:image/png;base64,", 0) == 0);
  const std::string b64 = url.substr(22);
  std::vector<std::uint8_t> png(b64.size());
  const int n = EVP_DecodeBlock(png.data(), reinterpret_cast<const unsigned char*>(b64.data()),
                                static_cast<int>(b64.size()));
  REQUIRE(n > 0);
  // DecodeBlock keeps the zero bytes produced by '=' padding; PNG ignores
  // trailing data after IEND.
  png.resize(static_cast<std::size_t>(n));
  const ImageTensor img = decode_png(png);
  CHECK(img.shape() == ImageShape{8, 28, 3});

  const auto archive = vlm.archive();
  REQUIRE(archive.size() == 1);
  CHECK(archive[0]["kind"] == "judge_pair");
  CHECK(archive[0]["vote"] == "RELEVANT_CHANGE");
  CHECK(archive[0]["raw"].get<std::string>().find("eyeglasses") != std::string::npos);
}

TEST_CASE("VLM backend gives up as AMBIGUOUS") {
  MockVlm server(100, "{}");
  VlmConfig cfg;
  cfg.base_url = server.url();
  cfg.max_retries = 1;
  cfg.timeout_seconds = 5;
  VlmHttpBackend vlm(cfg, PromptTemplates{});
  CHECK(judge_pair(small_query(), vlm) == Vote::kAmbiguous);
  CHECK(server.calls() == 2);
  const auto archive = vlm.archive();
  REQUIRE(archive.size() == 1);
  CHECK(archive[0]["error"] == "http status 503");
}

TEST_CASE("VLM relabel") {
  MockVlm server(0, R"(```json
{"glasses": "No"}
```)");
  VlmConfig cfg;
  cfg.base_url = server.url();
  cfg.timeout_seconds = 5;
  VlmHttpBackend vlm(cfg, PromptTemplates{});
  RelabelQuery r;
  r.image = ImageTensor::filled({8, 8, 3}, 0.5);
  r.task_attribute = "eyeglasses";
  CHECK(relabel_boundary_image(r, vlm) == ImageLabel::kNegative);
  CHECK(vlm.archive()[0]["label"] == "NEGATIVE");
}

}  // namespace
}  // namespace styleprobe

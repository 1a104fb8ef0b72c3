#include "styleprobe/adapter.hpp"

#include <errno.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstring>

#include "styleprobe/image_io.hpp"
#include "styleprobe/util.hpp"

namespace styleprobe {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

constexpr std::size_t kPrefixSize = 12;

Frame parse_body(std::span<const std::uint8_t> header, std::span<const std::uint8_t> payload) {
  Frame frame;
  try {
    frame.header = Json::parse(header.begin(), header.end());
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::kDecode, std::string("frame header: ") + e.what());
  }
  if (!frame.header.is_object() || !frame.header.contains("type")) {
    throw Error(ErrorCode::kDecode, "frame header lacks \"type\"");
  }
  std::size_t offset = 0;
  while (offset < payload.size()) frame.tensors.push_back(decode_tensor(payload, offset));
  return frame;
}

}  // namespace

std::vector<std::uint8_t> encode_frame(const Frame& frame) {
  const std::string header = frame.header.dump();
  std::vector<std::uint8_t> payload;
  for (const auto& t : frame.tensors) append_tensor(payload, t);
  std::vector<std::uint8_t> out(kFrameMagic, kFrameMagic + 4);
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  out.insert(out.end(), header.begin(), header.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

Frame decode_frame(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kPrefixSize || std::memcmp(bytes.data(), kFrameMagic, 4) != 0) {
    throw Error(ErrorCode::kDecode, "frame: bad magic");
  }
  const std::size_t header_len = get_u32(bytes.data() + 4);
  const std::size_t payload_len = get_u32(bytes.data() + 8);
  if (bytes.size() != kPrefixSize + header_len + payload_len) {
    throw Error(ErrorCode::kDecode, "frame: length fields disagree with frame size");
  }
  return parse_body(bytes.subspan(kPrefixSize, header_len),
                    bytes.subspan(kPrefixSize + header_len, payload_len));
}

namespace {

// Returns false on EOF before any byte was read.
bool read_exact(int fd, std::uint8_t* data, std::size_t n) {
  std::size_t done = 0;
  while (done < n) {
    const ssize_t got = ::read(fd, data + done, n - done);
    if (got < 0 && errno == EINTR) continue;
    if (got < 0) throw Error(ErrorCode::kBackend, std::string("read: ") + std::strerror(errno));
    if (got == 0) {
      if (done == 0) return false;
      throw Error(ErrorCode::kBackend, "adapter stream closed mid-frame");
    }
    done += static_cast<std::size_t>(got);
  }
  return true;
}

void write_all(int fd, const std::uint8_t* data, std::size_t n) {
  std::size_t done = 0;
  while (done < n) {
    const ssize_t put = ::write(fd, data + done, n - done);
    if (put < 0 && errno == EINTR) continue;
    if (put < 0) throw Error(ErrorCode::kBackend, std::string("write: ") + std::strerror(errno));
    done += static_cast<std::size_t>(put);
  }
}

}  // namespace

void FrameChannel::send(const Frame& frame) {
  const auto bytes = encode_frame(frame);
  write_all(write_fd_, bytes.data(), bytes.size());
}

std::optional<Frame> FrameChannel::receive() {
  std::uint8_t prefix[kPrefixSize];
  if (!read_exact(read_fd_, prefix, kPrefixSize)) return std::nullopt;
  if (std::memcmp(prefix, kFrameMagic, 4) != 0) {
    throw Error(ErrorCode::kDecode, "frame: bad magic");
  }
  std::vector<std::uint8_t> header(get_u32(prefix + 4));
  std::vector<std::uint8_t> payload(get_u32(prefix + 8));
  if (!header.empty() && !read_exact(read_fd_, header.data(), header.size())) {
    throw Error(ErrorCode::kBackend, "adapter stream closed mid-frame");
  }
  if (!payload.empty() && !read_exact(read_fd_, payload.data(), payload.size())) {
    throw Error(ErrorCode::kBackend, "adapter stream closed mid-frame");
  }
  return parse_body(header, payload);
}

Frame FrameChannel::call(Frame request) {
  const std::uint64_t id = next_id_++;
  request.header["id"] = id;
  const std::string type = request.header.at("type").get<std::string>();
  send(request);
  auto reply = receive();
  if (!reply) throw Error(ErrorCode::kBackend, "adapter closed while awaiting " + type);
  if (reply->header.value("id", std::uint64_t{0}) != id) {
    throw Error(ErrorCode::kBackend, "adapter reply id mismatch for " + type);
  }
  if (reply->header.at("type") == "ERROR") {
    throw Error(ErrorCode::kBackend,
                type + " failed remotely: " + reply->header.value("message", std::string("?")));
  }
  if (reply->header.at("type") != type) {
    throw Error(ErrorCode::kBackend, "adapter answered " + type + " with " +
                                         reply->header.at("type").get<std::string>());
  }
  return std::move(*reply);
}

AdapterProcess::AdapterProcess(const std::vector<std::string>& command) {
  if (command.empty()) throw Error(ErrorCode::kConfig, "adapter command is empty");
  int down[2], up[2];
  if (::pipe(down) != 0 || ::pipe(up) != 0) {
    throw Error(ErrorCode::kBackend, std::string("pipe: ") + std::strerror(errno));
  }
  ::signal(SIGPIPE, SIG_IGN);
  pid_ = ::fork();
  if (pid_ < 0) throw Error(ErrorCode::kBackend, std::string("fork: ") + std::strerror(errno));
  if (pid_ == 0) {
    ::dup2(down[0], STDIN_FILENO);
    ::dup2(up[1], STDOUT_FILENO);
    ::close(down[0]);
    ::close(down[1]);
    ::close(up[0]);
    ::close(up[1]);
    std::vector<char*> argv;
    for (const auto& a : command) argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);
    ::execvp(argv[0], argv.data());
    ::_exit(127);
  }
  ::close(down[0]);
  ::close(up[1]);
  to_child_ = down[1];
  from_child_ = up[0];
  channel_ = std::make_unique<FrameChannel>(from_child_, to_child_);
}

AdapterProcess::~AdapterProcess() {
  if (to_child_ >= 0) ::close(to_child_);
  if (from_child_ >= 0) ::close(from_child_);
  if (pid_ > 0) {
    int status = 0;
    ::waitpid(pid_, &status, 0);
  }
}

namespace {

Frame request(const std::string& type, Json fields = Json::object()) {
  Frame f;
  f.header = std::move(fields);
  f.header["type"] = type;
  return f;
}

std::vector<RawTensor> raw_layers(const StyleState& s) { return to_raw(s); }

}  // namespace

ExternalGenerator::ExternalGenerator(FrameChannel& channel) : channel_(&channel) {
  handshake();
}

ExternalGenerator::ExternalGenerator(const std::vector<std::string>& command)
    : process_(std::make_unique<AdapterProcess>(command)), channel_(&process_->channel()) {
  handshake();
}

void ExternalGenerator::handshake() {
  Frame reply = channel_->call(request("TOPOLOGY"));
  const Json& h = reply.header;
  try {
    topology_.layer_widths = h.at("layer_widths").get<std::vector<std::size_t>>();
    for (const auto& band : h.at("layer_bands")) {
      const auto name = band.get<std::string>();
      if (name == "COARSE") {
        topology_.layer_bands.push_back(LayerBand::kCoarse);
      } else if (name == "MIDDLE") {
        topology_.layer_bands.push_back(LayerBand::kMiddle);
      } else if (name == "FINE") {
        topology_.layer_bands.push_back(LayerBand::kFine);
      } else {
        throw Error(ErrorCode::kDecode, "unknown layer band " + name);
      }
    }
    const auto shape = h.at("image_shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw Error(ErrorCode::kDecode, "image_shape must be [H, W, C]");
    topology_.image_shape = {shape[0], shape[1], shape[2]};
    stddev_ = h.at("layer_stddev").get<std::vector<double>>();
    differentiable_ = h.value("differentiable", false);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::kBackend, std::string("TOPOLOGY reply: ") + e.what());
  }
  topology_.validate();
  mean_ = style_from_raw(reply.tensors);
  check_topology(topology_, mean_);
  if (stddev_.size() != topology_.layer_widths.size()) {
    throw Error(ErrorCode::kBackend, "TOPOLOGY reply: layer_stddev length mismatch");
  }
}

StyleState ExternalGenerator::sample_untruncated(std::uint64_t seed) {
  Frame reply = channel_->call(request("SAMPLE", {{"seed", seed}}));
  StyleState s = style_from_raw(reply.tensors, seed);
  check_topology(topology_, s);
  return s;
}

ImageTensor ExternalGenerator::synthesize(const StyleState& state) {
  check_topology(topology_, state);
  Frame f = request("SYNTH");
  f.tensors = raw_layers(state);
  Frame reply = channel_->call(std::move(f));
  if (reply.tensors.size() != 1) throw Error(ErrorCode::kBackend, "SYNTH reply needs 1 tensor");
  ImageTensor raw = image_from_raw(reply.tensors[0]);
  auto d = raw.data();
  return ImageTensor::clamped(raw.shape(), std::vector<double>(d.begin(), d.end()));
}

ImageTensor ExternalGenerator::jvp(const StyleState& state, const StyleState& tangent) {
  if (!differentiable_) {
    throw Error(ErrorCode::kNotDifferentiable, "external generator has no JVP support");
  }
  check_topology(topology_, state);
  check_topology(topology_, tangent);
  Frame f = request("JVP");
  f.tensors = raw_layers(state);
  auto t = raw_layers(tangent);
  f.tensors.insert(f.tensors.end(), t.begin(), t.end());
  Frame reply = channel_->call(std::move(f));
  if (reply.tensors.size() != 1) throw Error(ErrorCode::kBackend, "JVP reply needs 1 tensor");
  return image_from_raw(reply.tensors[0]);
}

ExternalSut::ExternalSut(FrameChannel& channel) : channel_(&channel) { handshake(); }

ExternalSut::ExternalSut(const std::vector<std::string>& command)
    : process_(std::make_unique<AdapterProcess>(command)), channel_(&process_->channel()) {
  handshake();
}

void ExternalSut::handshake() {
  Frame reply = channel_->call(request("CAPS"));
  const Json& h = reply.header;
  try {
    caps_.differentiable = h.value("differentiable", false);
    caps_.task_kind = task_kind_from_string(h.at("task_kind").get<std::string>());
    caps_.num_classes = h.at("num_classes").get<std::size_t>();
    if (h.contains("detection_target") && !h["detection_target"].is_null()) {
      caps_.detection_target = h["detection_target"].get<std::size_t>();
    }
    // One request at a time over a single stream.
    caps_.concurrent_safe = false;
    if (h.contains("input_shape") && !h["input_shape"].is_null()) {
      const auto s = h["input_shape"].get<std::vector<std::size_t>>();
      if (s.size() != 3) throw Error(ErrorCode::kDecode, "input_shape must be [H, W, C]");
      input_shape_ = ImageShape{s[0], s[1], s[2]};
    }
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::kBackend, std::string("CAPS reply: ") + e.what());
  }
  caps_.validate();
}

ImageTensor ExternalSut::adapt(const ImageTensor& image) const {
  if (!input_shape_) return image;
  if (input_shape_->channels != image.channels()) {
    throw Error(ErrorCode::kShapeMismatch, "external SUT expects " +
                                               to_string(*input_shape_) + ", got " +
                                               to_string(image.shape()));
  }
  return resize_bilinear(image, input_shape_->height, input_shape_->width);
}

LogitVector ExternalSut::forward(const ImageTensor& image) {
  Frame f = request("FORWARD");
  f.tensors = {to_raw(adapt(image))};
  Frame reply = channel_->call(std::move(f));
  if (reply.tensors.size() != 1 || reply.tensors[0].dims.size() != 1) {
    throw Error(ErrorCode::kBackend, "FORWARD reply needs one rank-1 tensor");
  }
  const auto& v = reply.tensors[0].values;
  return LogitVector(std::vector<double>(v.begin(), v.end()));
}

ImageTensor ExternalSut::input_gradient(const ImageTensor& image, std::size_t target) {
  if (!caps_.differentiable) {
    throw Error(ErrorCode::kNotDifferentiable, "external SUT has no input gradients");
  }
  Frame f = request("GRAD_INPUT", {{"target", target}});
  f.tensors = {to_raw(adapt(image))};
  Frame reply = channel_->call(std::move(f));
  if (reply.tensors.size() != 1) {
    throw Error(ErrorCode::kBackend, "GRAD_INPUT reply needs 1 tensor");
  }
  ImageTensor grad = image_from_raw(reply.tensors[0]);
  return resize_bilinear_adjoint(grad, image.shape());
}

namespace {

std::vector<std::string> band_names(const GeneratorTopology& t) {
  std::vector<std::string> out;
  for (auto b : t.layer_bands) out.emplace_back(to_string(b));
  return out;
}

Frame handle(const Frame& in, Generator* generator, Sut* sut) {
  const std::string type = in.header.at("type").get<std::string>();
  Frame out = request(type);
  auto need_generator = [&] {
    if (!generator) throw Error(ErrorCode::kUnsupported, "no generator behind this adapter");
    return generator;
  };
  auto need_sut = [&] {
    if (!sut) throw Error(ErrorCode::kUnsupported, "no SUT behind this adapter");
    return sut;
  };
  auto split_states = [&](std::size_t groups) {
    const auto& widths = need_generator()->topology().layer_widths;
    if (in.tensors.size() != groups * widths.size()) {
      throw Error(ErrorCode::kTopology, type + ": expected " +
                                            std::to_string(groups * widths.size()) +
                                            " layer tensors");
    }
    std::vector<StyleState> states;
    for (std::size_t g = 0; g < groups; ++g) {
      states.push_back(style_from_raw(std::span(in.tensors).subspan(g * widths.size(),
                                                                   widths.size())));
    }
    return states;
  };

  if (type == "TOPOLOGY") {
    Generator* g = need_generator();
    const auto& t = g->topology();
    out.header["layer_widths"] = t.layer_widths;
    out.header["layer_bands"] = band_names(t);
    out.header["image_shape"] = {t.image_shape.height, t.image_shape.width,
                                 t.image_shape.channels};
    out.header["layer_stddev"] = g->layer_stddev();
    out.header["differentiable"] = g->differentiable();
    out.tensors = to_raw(g->mean_style());
  } else if (type == "SAMPLE") {
    const auto seed = in.header.at("seed").get<std::uint64_t>();
    out.tensors = to_raw(need_generator()->sample_style_state(seed, 1.0));
  } else if (type == "SYNTH") {
    out.tensors = {to_raw(generator->synthesize(split_states(1)[0]))};
  } else if (type == "JVP") {
    auto states = split_states(2);
    out.tensors = {to_raw(generator->jvp(states[0], states[1]))};
  } else if (type == "CAPS") {
    const auto caps = need_sut()->capabilities();
    out.header["differentiable"] = caps.differentiable;
    out.header["task_kind"] = to_string(caps.task_kind);
    out.header["num_classes"] = caps.num_classes;
    out.header["detection_target"] =
        caps.detection_target ? Json(*caps.detection_target) : Json(nullptr);
    out.header["input_shape"] = nullptr;
  } else if (type == "FORWARD" || type == "GRAD_INPUT") {
    Sut* s = need_sut();
    if (in.tensors.size() != 1) throw Error(ErrorCode::kDecode, type + " needs one image");
    const ImageTensor image = image_from_raw(in.tensors[0]);
    if (type == "FORWARD") {
      const auto logits = s->forward(image);
      RawTensor t;
      t.dims = {static_cast<std::uint32_t>(logits.num_classes())};
      t.values.assign(logits.values().begin(), logits.values().end());
      out.tensors = {std::move(t)};
    } else {
      out.tensors = {to_raw(s->input_gradient(image, in.header.value("target", 0u)))};
    }
  } else {
    throw Error(ErrorCode::kUnsupported, "unknown frame type " + type);
  }
  return out;
}

}  // namespace

void serve_adapter(FrameChannel& channel, Generator* generator, Sut* sut) {
  while (auto in = channel.receive()) {
    Frame out;
    try {
      out = handle(*in, generator, sut);
    } catch (const Error& e) {
      out = request("ERROR", {{"message", e.what()}, {"code", to_string(e.code())}});
    } catch (const std::exception& e) {
      out = request("ERROR", {{"message", e.what()}, {"code", "internal"}});
    }
    out.header["id"] = in->header.value("id", std::uint64_t{0});
    channel.send(out);
  }
}

}  // namespace styleprobe

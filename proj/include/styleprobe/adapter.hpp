#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "styleprobe/genbackend.hpp"
#include "styleprobe/serialization.hpp"
#include "styleprobe/sut.hpp"

namespace styleprobe {

// Out-of-process backends. See docs/wire-format.md for the byte layout:
//   "SPFR" | u32 LE header length | u32 LE payload length | header | payload
// The header is a UTF-8 JSON object carrying at least "type" and "id"; the
// payload is zero or more tensors in the raw interchange format.
inline constexpr char kFrameMagic[4] = {'S', 'P', 'F', 'R'};

struct Frame {
  Json header = Json::object();
  std::vector<RawTensor> tensors;
};

std::vector<std::uint8_t> encode_frame(const Frame& frame);
// Throws kDecode on malformed input.
Frame decode_frame(std::span<const std::uint8_t> bytes);

// Blocking frame I/O on a pair of file descriptors.
class FrameChannel {
 public:
  FrameChannel(int read_fd, int write_fd) : read_fd_(read_fd), write_fd_(write_fd) {}
  void send(const Frame& frame);
  // nullopt on clean EOF before the first byte of a frame.
  std::optional<Frame> receive();
  // Sends `request` with a fresh id and waits for the matching reply. ERROR
  // replies become kBackend errors carrying the remote message.
  Frame call(Frame request);

 private:
  int read_fd_;
  int write_fd_;
  std::uint64_t next_id_ = 1;
};

// Child process with stdin/stdout attached to a FrameChannel.
class AdapterProcess {
 public:
  explicit AdapterProcess(const std::vector<std::string>& command);
  ~AdapterProcess();
  AdapterProcess(const AdapterProcess&) = delete;
  AdapterProcess& operator=(const AdapterProcess&) = delete;

  FrameChannel& channel() { return *channel_; }

 private:
  int pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::unique_ptr<FrameChannel> channel_;
};

// Generator client. Truncation is applied locally with the mean style from
// the TOPOLOGY reply; SAMPLE returns the untruncated style.
class ExternalGenerator : public Generator {
 public:
  // `channel` must outlive the generator.
  explicit ExternalGenerator(FrameChannel& channel);
  // Spawns `command` and owns the process.
  explicit ExternalGenerator(const std::vector<std::string>& command);

  const GeneratorTopology& topology() const override { return topology_; }
  StyleState mean_style() const override { return mean_; }
  std::vector<double> layer_stddev() const override { return stddev_; }
  ImageTensor synthesize(const StyleState& state) override;
  bool differentiable() const override { return differentiable_; }
  ImageTensor jvp(const StyleState& state, const StyleState& tangent) override;

 protected:
  StyleState sample_untruncated(std::uint64_t seed) override;

 private:
  void handshake();

  std::unique_ptr<AdapterProcess> process_;
  FrameChannel* channel_;
  GeneratorTopology topology_;
  StyleState mean_{{{0.0}}};
  std::vector<double> stddev_;
  bool differentiable_ = false;
};

// SUT client. When CAPS declares an "input_shape" different from the image,
// images are resized bilinearly (and gradients mapped back by the adjoint).
class ExternalSut : public Sut {
 public:
  explicit ExternalSut(FrameChannel& channel);
  explicit ExternalSut(const std::vector<std::string>& command);

  SutCapabilities capabilities() const override { return caps_; }
  LogitVector forward(const ImageTensor& image) override;
  ImageTensor input_gradient(const ImageTensor& image, std::size_t target) override;

 private:
  void handshake();
  ImageTensor adapt(const ImageTensor& image) const;

  std::unique_ptr<AdapterProcess> process_;
  FrameChannel* channel_;
  SutCapabilities caps_;
  std::optional<ImageShape> input_shape_;
};

// Answers frames on `channel` until EOF. Either backend may be null; requests
// for a missing one get an ERROR frame.
void serve_adapter(FrameChannel& channel, Generator* generator, Sut* sut);

}  // namespace styleprobe

#pragma once

// Checkpoint directory layout:
//   manifest.json  format_version, model config, tensor table, rng_state, step
//   params.bin     raw little-endian f64 payload, tensors at manifest offsets

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "opdlab/model.hpp"

namespace opdlab {

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { Io, Malformed, VersionMismatch, OverlappingOffsets, OffsetOutOfBounds, TruncatedPayload };

  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct CheckpointState {
  std::int64_t step = 0;
  std::string rng_state;
};

struct LoadedCheckpoint {
  PolicyModel model;
  CheckpointState state;
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim},     {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},   {"max_context", c.max_context}, {"seed", c.seed},
          {"zero_init_head", c.zero_init_head}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.num_layers = j.at("num_layers").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.max_context = j.at("max_context").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.zero_init_head = j.value("zero_init_head", false);
  return c;
}

namespace detail {

inline void put_f64(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double get_f64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline void save_checkpoint(const PolicyModel& model, const CheckpointState& state, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string payload;
  payload.reserve(model.num_parameters() * 8);
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& p : model.params()) {
    tensors.push_back({{"name", p.name},
                       {"shape", p.tensor.shape()},
                       {"dtype", "f64"},
                       {"offset", payload.size()},
                       {"count", p.tensor.size()}});
    for (double v : p.tensor.data()) detail::put_f64(payload, v);
  }
  nlohmann::json manifest = {{"format_version", kCheckpointVersion},
                             {"model", config_to_json(model.config())},
                             {"frozen", model.frozen()},
                             {"tensors", tensors},
                             {"payload_bytes", payload.size()},
                             {"rng_state", state.rng_state},
                             {"step", state.step}};
  {
    std::ofstream out(dir / "params.bin", std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::Io, "cannot write " + (dir / "params.bin").string());
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  }
  std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointError::Kind::Io, "cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir, bool frozen = false) {
  using Kind = CheckpointError::Kind;
  std::ifstream mf(dir / "manifest.json", std::ios::binary);
  if (!mf) throw CheckpointError(Kind::Io, "cannot read " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::Malformed, "manifest.json: " + std::string(e.what()));
  }
  std::ifstream pf(dir / "params.bin", std::ios::binary);
  if (!pf) throw CheckpointError(Kind::Io, "cannot read " + (dir / "params.bin").string());
  std::vector<unsigned char> payload((std::istreambuf_iterator<char>(pf)), std::istreambuf_iterator<char>());

  try {
    const int version = manifest.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
      throw CheckpointError(Kind::VersionMismatch, "checkpoint format_version " + std::to_string(version) +
                                                       ", expected " + std::to_string(kCheckpointVersion));
    }
    const auto declared = manifest.at("payload_bytes").get<std::size_t>();
    if (payload.size() < declared) {
      throw CheckpointError(Kind::TruncatedPayload, "params.bin has " + std::to_string(payload.size()) +
                                                        " bytes, manifest declares " + std::to_string(declared));
    }
    const auto config = config_from_json(manifest.at("model"));

    struct Span {
      std::size_t begin, end;
      std::string name;
    };
    std::vector<Span> spans;
    ParamList params;
    for (const auto& t : manifest.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      if (t.at("dtype").get<std::string>() != "f64") {
        throw CheckpointError(Kind::Malformed, "tensor '" + name + "' has unsupported dtype");
      }
      const auto shape = t.at("shape").get<ad::Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto count = t.at("count").get<std::size_t>();
      if (ad::numel(shape) != count) {
        throw CheckpointError(Kind::Malformed, "tensor '" + name + "' count does not match its shape");
      }
      if (offset > payload.size() || count * 8 > payload.size() - offset) {
        throw CheckpointError(Kind::OffsetOutOfBounds, "tensor '" + name + "' at offset " + std::to_string(offset) +
                                                           " exceeds payload of " + std::to_string(payload.size()) +
                                                           " bytes");
      }
      spans.push_back({offset, offset + count * 8, name});
      std::vector<double> data(count);
      for (std::size_t i = 0; i < count; ++i) data[i] = detail::get_f64(payload.data() + offset + 8 * i);
      params.push_back({name, ad::Tensor(shape, std::move(data), !frozen)});
    }
    std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) { return a.begin < b.begin; });
    for (std::size_t i = 1; i < spans.size(); ++i) {
      if (spans[i].begin < spans[i - 1].end) {
        throw CheckpointError(Kind::OverlappingOffsets,
                              "tensors '" + spans[i - 1].name + "' and '" + spans[i].name + "' overlap");
      }
    }
    LoadedCheckpoint out;
    try {
      out.model = make_model(config, std::move(params), frozen);
    } catch (const std::invalid_argument& e) {
      throw CheckpointError(Kind::Malformed, e.what());
    }
    out.state.step = manifest.value("step", std::int64_t{0});
    out.state.rng_state = manifest.value("rng_state", std::string{});
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::Malformed, "manifest.json: " + std::string(e.what()));
  }
}

}  // namespace opdlab

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Single-file binary checkpoint, little-endian throughout:
//
//   magic "LGFLCKPT" | u32 version | u64 config hash | str config text
//   u64 step | u64 training seed | u64 model seed
//   backbone: u64 dim, stem_width, layers, units | u8 residual | f64 eps, momentum
//   tasks:    u64 count, then per task: str name, u64 input_dim, u8 head kind,
//             u64 classes, outputs, seq_len | u8 adapter | f64 loss weight
//   params:   u64 count, then per parameter (controllers excluded): str id,
//             u8 trainable, u8 decay, u64 rank, u64 dims..., f32 values...
//   controllers: u64 count, then per task: str name, u64 L, u64 N, f32 logits...
//   optimizer:   u64 count, then per parameter in store order: str id,
//                u64 size, f32 momentum...
//   rng:         u64 seed, u64 next step (worker streams are stateless
//                functions of (seed, step, worker))
//
// Strings are u64 length + bytes. Saving a loaded checkpoint reproduces the
// input bytes exactly.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "legoflow/error.hpp"
#include "legoflow/model.hpp"
#include "legoflow/rng.hpp"

namespace legoflow {

inline constexpr char kCheckpointMagic[8] = {'L', 'G', 'F', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config_text;
  std::uint64_t config_hash = 0;
  std::size_t step = 0;
  std::uint64_t seed = 0;
  MultiTaskModel<float> model{BackboneConfig{}, 0};
};

namespace detail {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  // Sizes are bounded by the remaining input so a corrupt length cannot
  // trigger a huge allocation.
  std::size_t count(std::size_t element_bytes = 1) {
    const std::uint64_t n = u64();
    if (element_bytes && n > (in_.size() - pos_) / element_bytes) throw FormatError("checkpoint length field out of range");
    return static_cast<std::size_t>(n);
  }
  std::string str() {
    const std::size_t n = count();
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

inline std::set<std::size_t> controller_indices(const MultiTaskModel<float>& model) {
  std::set<std::size_t> s;
  for (const auto& t : model.tasks()) s.insert(t.controller.begin(), t.controller.end());
  return s;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const MultiTaskModel<float>& model, std::size_t step,
                                                   std::uint64_t seed, const std::string& config_text = {}) {
  detail::Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u64(fnv1a(config_text));
  w.str(config_text);
  w.u64(step);
  w.u64(seed);
  w.u64(model.seed());

  const BackboneConfig& bc = model.config();
  w.u64(bc.dim);
  w.u64(bc.stem_width);
  w.u64(bc.layers);
  w.u64(bc.units);
  w.u8(bc.residual ? 1 : 0);
  w.f64(bc.bn_eps);
  w.f64(bc.bn_momentum);

  w.u64(model.tasks().size());
  for (const auto& t : model.tasks()) {
    const TaskDescriptor& d = t.desc;
    w.str(d.name);
    w.u64(d.input_dim);
    w.u8(static_cast<std::uint8_t>(d.head.kind));
    w.u64(d.head.classes);
    w.u64(d.head.outputs);
    w.u64(d.head.seq_len);
    w.u8(d.use_adapter ? 1 : 0);
    w.f64(d.loss_weight);
  }

  const auto controllers = detail::controller_indices(model);
  const auto& params = model.params();
  w.u64(params.size() - controllers.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (controllers.contains(i)) continue;
    const auto& p = params[i];
    w.str(p.id);
    w.u8(p.trainable ? 1 : 0);
    w.u8(p.decay ? 1 : 0);
    w.u64(p.value.rank());
    for (std::size_t d : p.value.shape()) w.u64(d);
    for (float v : p.value.data()) w.f32(v);
  }

  w.u64(model.tasks().size());
  for (const auto& t : model.tasks()) {
    w.str(t.desc.name);
    w.u64(t.controller.size());
    w.u64(bc.units);
    for (std::size_t idx : t.controller)
      for (float v : params[idx].value.data()) w.f32(v);
  }

  w.u64(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    w.str(params[i].id);
    w.u64(params[i].momentum.size());
    for (float v : params[i].momentum.data()) w.f32(v);
  }

  w.u64(seed);
  w.u64(step);
  return w.take();
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::Reader r(bytes);
  r.need(sizeof kCheckpointMagic);
  char magic[8];
  for (char& c : magic) c = static_cast<char>(r.u8());
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw FormatError("not a legoflow checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  ck.config_hash = r.u64();
  ck.config_text = r.str();
  if (fnv1a(ck.config_text) != ck.config_hash) throw FormatError("checkpoint config hash mismatch");
  ck.step = r.u64();
  ck.seed = r.u64();
  const std::uint64_t model_seed = r.u64();

  BackboneConfig bc;
  bc.dim = r.u64();
  bc.stem_width = r.u64();
  bc.layers = r.u64();
  bc.units = r.u64();
  bc.residual = r.u8() != 0;
  bc.bn_eps = r.f64();
  bc.bn_momentum = r.f64();
  if (bc.dim == 0 || bc.layers == 0 || bc.units == 0) throw FormatError("checkpoint has an empty backbone");
  MultiTaskModel<float> model(bc, model_seed);

  const std::size_t num_tasks = r.count();
  for (std::size_t i = 0; i < num_tasks; ++i) {
    TaskDescriptor d;
    d.name = r.str();
    d.input_dim = r.u64();
    const std::uint8_t kind = r.u8();
    if (kind > static_cast<std::uint8_t>(HeadKind::per_position)) throw FormatError("checkpoint has an unknown head kind");
    d.head.kind = static_cast<HeadKind>(kind);
    d.head.classes = r.u64();
    d.head.outputs = r.u64();
    d.head.seq_len = r.u64();
    d.use_adapter = r.u8() != 0;
    d.loss_weight = r.f64();
    model.add_task(d);
  }

  auto& params = model.params();
  const auto controllers = detail::controller_indices(model);
  const std::size_t num_params = r.count();
  if (num_params != params.size() - controllers.size()) {
    throw FormatError("checkpoint has " + std::to_string(num_params) + " parameters, model expects " +
                      std::to_string(params.size() - controllers.size()));
  }
  std::vector<bool> seen(params.size(), false);
  for (std::size_t i = 0; i < num_params; ++i) {
    const std::string id = r.str();
    const auto idx = params.find(id);
    if (!idx || controllers.contains(*idx)) throw FormatError("checkpoint parameter '" + id + "' does not belong to the model");
    if (seen[*idx]) throw FormatError("checkpoint repeats parameter '" + id + "'");
    seen[*idx] = true;
    auto& p = params[*idx];
    p.trainable = r.u8() != 0;
    p.decay = r.u8() != 0;
    const std::size_t rank = r.count(8);
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    if (shape != p.value.shape()) {
      throw FormatError("checkpoint parameter '" + id + "' has shape " + shape_string(shape) + ", model expects " +
                        shape_string(p.value.shape()));
    }
    for (auto& v : p.value.data()) v = r.f32();
  }

  const std::size_t num_controllers = r.count();
  if (num_controllers != model.tasks().size()) throw FormatError("checkpoint controller table does not match its tasks");
  for (std::size_t t = 0; t < num_controllers; ++t) {
    const std::string name = r.str();
    const TaskBinding& tb = model.tasks()[t];
    if (name != tb.desc.name) throw FormatError("checkpoint controller '" + name + "' out of order");
    const std::uint64_t L = r.u64(), N = r.u64();
    if (L != tb.controller.size() || N != bc.units) throw FormatError("checkpoint controller '" + name + "' has wrong shape");
    for (std::size_t idx : tb.controller)
      for (auto& v : params[idx].value.data()) v = r.f32();
  }

  const std::size_t num_momentum = r.count();
  if (num_momentum != params.size()) throw FormatError("checkpoint optimizer state does not match the parameters");
  for (std::size_t i = 0; i < num_momentum; ++i) {
    const std::string id = r.str();
    if (id != params[i].id) throw FormatError("checkpoint optimizer entry '" + id + "' out of order");
    const std::size_t n = r.count(4);
    if (n != params[i].momentum.size()) throw FormatError("checkpoint optimizer entry '" + id + "' has wrong size");
    for (auto& v : params[i].momentum.data()) v = r.f32();
  }

  if (r.u64() != ck.seed || r.u64() != ck.step) throw FormatError("checkpoint rng state disagrees with its header");
  if (!r.done()) throw FormatError("checkpoint has trailing bytes");
  ck.model = std::move(model);
  return ck;
}

inline void save_checkpoint(const std::string& path, const MultiTaskModel<float>& model, std::size_t step,
                            std::uint64_t seed, const std::string& config_text = {}) {
  const auto bytes = encode_checkpoint(model, step, seed, config_text);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint '" + tmp + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing checkpoint '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("cannot move checkpoint into place at '" + path + "'");
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace legoflow

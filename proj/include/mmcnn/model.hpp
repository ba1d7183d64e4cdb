#pragma once

#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmcnn/rng.hpp"
#include "mmcnn/tensor.hpp"

namespace mmcnn {

inline const std::array<std::string, 3> kClassNames = {"normal", "dryAMD",
                                                       "wetAMD"};

enum class Modality { multimodal, fundus, oct };

inline std::string modality_name(Modality m) {
  switch (m) {
    case Modality::multimodal: return "multimodal";
    case Modality::fundus: return "fundus";
    default: return "oct";
  }
}

inline Modality parse_modality(const std::string& s) {
  if (s == "multimodal") return Modality::multimodal;
  if (s == "fundus") return Modality::fundus;
  if (s == "oct") return Modality::oct;
  throw ConfigError("unknown modality: " + s);
}

// Desk-scale residual backbone configuration. Stage channels are
// {width, 2*width, 4*width} with blocks_per_stage basic blocks each.
struct BranchConfig {
  int width = 16;
  int blocks_per_stage = 2;
  std::array<int, 3> stage_strides = {1, 2, 2};
  int input_size = 64;

  int stride_product() const {
    return stage_strides[0] * stage_strides[1] * stage_strides[2];
  }
  // side length of the final feature maps
  int final_map_side() const { return input_size / stride_product(); }
  // channel count of the final feature maps (the pooled vector width)
  int feature_channels() const { return 4 * width; }

  void validate() const {
    if (width < 1 || blocks_per_stage < 1 || input_size < 1)
      throw ConfigError("BranchConfig: all sizes must be positive");
    for (int s : stage_strides)
      if (s < 1) throw ConfigError("BranchConfig: strides must be >= 1");
    if (input_size % stride_product() != 0)
      throw ConfigError("BranchConfig: input_size must be divisible by the stride product");
  }
};

template <typename T>
struct ConvBN {
  Tensor<T> weight;  // [out, in, kh, kw]
  Tensor<T> gamma, beta;
  BatchNormState<T> bn;
};

// Residual basic block. A stride > 1 downsamples spatially via average
// pooling before the (stride-1) convolutions, on both the main path and the
// shortcut; strided odd-kernel convs cannot produce an exactly divisible
// output size on even inputs.
template <typename T>
struct BasicBlock {
  ConvBN<T> conv1, conv2;
  std::optional<ConvBN<T>> proj;  // 1x1 projection when shape changes
  int stride = 1;
};

template <typename T>
struct Branch {
  ConvBN<T> stem;
  std::vector<BasicBlock<T>> blocks;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T>* tensor;
};

// Two-branch model with post-GAP concat fusion and a bias-free head.
// Single-modal baselines reuse the same struct with one branch absent and
// fusion_weights of width C instead of 2C.
template <typename T>
struct TwoStreamModel {
  BranchConfig cfg;
  int num_classes = 3;
  Modality modality = Modality::multimodal;
  std::optional<Branch<T>> fundus_branch;
  std::optional<Branch<T>> oct_branch;
  Tensor<T> fusion_weights;  // [K, 2C] multimodal, [K, C] single-modal
};

namespace detail {

template <typename T>
ConvBN<T> make_conv_bn(int out_ch, int in_ch, int k, RngStream& rng) {
  ConvBN<T> c;
  c.weight = Tensor<T>({out_ch, in_ch, k, k});
  double std_dev = std::sqrt(2.0 / (double(in_ch) * k * k));  // Kaiming fan-in
  for (auto& v : c.weight.data()) v = T(rng.normal() * std_dev);
  c.gamma = Tensor<T>({out_ch}, T(1));
  c.beta = Tensor<T>({out_ch}, T(0));
  c.bn = BatchNormState<T>(out_ch);
  return c;
}

template <typename T>
Branch<T> make_branch(const BranchConfig& cfg, RngStream& rng) {
  Branch<T> b;
  b.stem = make_conv_bn<T>(cfg.width, 3, 3, rng);
  int in_ch = cfg.width;
  for (int stage = 0; stage < 3; ++stage) {
    int out_ch = cfg.width << stage;
    for (int blk = 0; blk < cfg.blocks_per_stage; ++blk) {
      int stride = (blk == 0) ? cfg.stage_strides[std::size_t(stage)] : 1;
      BasicBlock<T> block;
      block.stride = stride;
      block.conv1 = make_conv_bn<T>(out_ch, in_ch, 3, rng);
      block.conv2 = make_conv_bn<T>(out_ch, out_ch, 3, rng);
      if (stride != 1 || in_ch != out_ch)
        block.proj = make_conv_bn<T>(out_ch, in_ch, 1, rng);
      b.blocks.push_back(std::move(block));
      in_ch = out_ch;
    }
  }
  return b;
}

template <typename T>
void collect_branch(Branch<T>& b, const std::string& prefix, bool with_state,
                    std::vector<NamedTensor<T>>& out) {
  auto add_cbn = [&](ConvBN<T>& c, const std::string& p) {
    out.push_back({p + ".weight", &c.weight});
    out.push_back({p + ".bn.gamma", &c.gamma});
    out.push_back({p + ".bn.beta", &c.beta});
    if (with_state) {
      out.push_back({p + ".bn.running_mean", &c.bn.running_mean});
      out.push_back({p + ".bn.running_var", &c.bn.running_var});
    }
  };
  add_cbn(b.stem, prefix + ".stem");
  for (std::size_t i = 0; i < b.blocks.size(); ++i) {
    std::string bp = prefix + ".block" + std::to_string(i);
    add_cbn(b.blocks[i].conv1, bp + ".conv1");
    add_cbn(b.blocks[i].conv2, bp + ".conv2");
    if (b.blocks[i].proj) add_cbn(*b.blocks[i].proj, bp + ".proj");
  }
}

}  // namespace detail

template <typename T>
TwoStreamModel<T> build_model(const BranchConfig& cfg, int num_classes,
                              std::uint64_t seed) {
  cfg.validate();
  if (num_classes < 2) throw ConfigError("build_model: num_classes must be >= 2");
  TwoStreamModel<T> m;
  m.cfg = cfg;
  m.num_classes = num_classes;
  m.modality = Modality::multimodal;
  RngStream rf{seed, 1};
  RngStream ro{seed, 2};
  RngStream rh{seed, 3};
  m.fundus_branch = detail::make_branch<T>(cfg, rf);
  m.oct_branch = detail::make_branch<T>(cfg, ro);
  int c = cfg.feature_channels();
  m.fusion_weights = Tensor<T>({num_classes, 2 * c});
  for (auto& v : m.fusion_weights.data()) v = T(rh.normal() * 0.1);
  return m;
}

template <typename T>
TwoStreamModel<T> build_single_modal(const BranchConfig& cfg, int num_classes,
                                     std::uint64_t seed, Modality modality) {
  cfg.validate();
  if (num_classes < 2)
    throw ConfigError("build_single_modal: num_classes must be >= 2");
  if (modality == Modality::multimodal)
    throw ConfigError("build_single_modal: expected a single modality");
  TwoStreamModel<T> m;
  m.cfg = cfg;
  m.num_classes = num_classes;
  m.modality = modality;
  RngStream rb{seed, modality == Modality::fundus ? std::uint64_t(1)
                                                  : std::uint64_t(2)};
  RngStream rh{seed, 3};
  if (modality == Modality::fundus)
    m.fundus_branch = detail::make_branch<T>(cfg, rb);
  else
    m.oct_branch = detail::make_branch<T>(cfg, rb);
  int c = cfg.feature_channels();
  m.fusion_weights = Tensor<T>({num_classes, c});
  for (auto& v : m.fusion_weights.data()) v = T(rh.normal() * 0.1);
  return m;
}

// Trainable parameters, in a fixed declaration order.
template <typename T>
std::vector<NamedTensor<T>> parameters(TwoStreamModel<T>& m) {
  std::vector<NamedTensor<T>> out;
  if (m.fundus_branch) detail::collect_branch(*m.fundus_branch, "fundus", false, out);
  if (m.oct_branch) detail::collect_branch(*m.oct_branch, "oct", false, out);
  out.push_back({"fusion.weight", &m.fusion_weights});
  return out;
}

// Parameters plus batch-norm running statistics (checkpoint contents).
template <typename T>
std::vector<NamedTensor<T>> state_tensors(TwoStreamModel<T>& m) {
  std::vector<NamedTensor<T>> out;
  if (m.fundus_branch) detail::collect_branch(*m.fundus_branch, "fundus", true, out);
  if (m.oct_branch) detail::collect_branch(*m.oct_branch, "oct", true, out);
  out.push_back({"fusion.weight", &m.fusion_weights});
  return out;
}

template <typename T>
struct BranchOutput {
  Tensor<T> maps;    // [N, C, m, m] pre-GAP feature maps
  Tensor<T> pooled;  // [N, C]
};

namespace detail {

template <typename T>
Tensor<T> conv_bn_relu(const Tensor<T>& x, ConvBN<T>& c, int pad, bool training,
                       Tape<T>* tape, bool with_relu) {
  Tensor<T> y = conv2d(x, c.weight, 1, pad, tape);
  y = batch_norm(y, c.gamma, c.beta, c.bn, training, tape);
  return with_relu ? relu(y, tape) : y;
}

}  // namespace detail

template <typename T>
BranchOutput<T> forward_branch(Branch<T>& branch, const BranchConfig& cfg,
                               const Tensor<T>& image, bool training,
                               Tape<T>* tape) {
  if (image.shape.size() != 4 || image.dim(1) != 3 ||
      image.dim(2) != cfg.input_size || image.dim(3) != cfg.input_size)
    throw DimensionError("forward_branch: expected [N,3,S,S] input");
  Tensor<T> x = detail::conv_bn_relu(image, branch.stem, 1, training, tape, true);
  for (auto& block : branch.blocks) {
    if (block.stride > 1) x = avg_pool2d(x, block.stride, tape);
    Tensor<T> shortcut = x;
    if (block.proj)
      shortcut = detail::conv_bn_relu(x, *block.proj, 0, training, tape, false);
    Tensor<T> y = detail::conv_bn_relu(x, block.conv1, 1, training, tape, true);
    y = detail::conv_bn_relu(y, block.conv2, 1, training, tape, false);
    x = relu(add(y, shortcut, tape), tape);
  }
  BranchOutput<T> out;
  out.maps = x;
  out.pooled = global_avg_pool(x, tape);
  return out;
}

template <typename T>
struct ForwardResult {
  Tensor<T> scores;  // [N, K]
  BranchOutput<T> fundus;
  BranchOutput<T> oct;
};

template <typename T>
ForwardResult<T> forward_multimodal(TwoStreamModel<T>& m, const Tensor<T>& i_f,
                                    const Tensor<T>& i_o, bool training,
                                    Tape<T>* tape) {
  if (m.modality != Modality::multimodal)
    throw ConfigError("forward_multimodal: model is single-modal");
  if (i_f.dim(0) != i_o.dim(0))
    throw DimensionError("forward_multimodal: batch size mismatch");
  ForwardResult<T> r;
  r.fundus = forward_branch(*m.fundus_branch, m.cfg, i_f, training, tape);
  r.oct = forward_branch(*m.oct_branch, m.cfg, i_o, training, tape);
  Tensor<T> fused = concat(r.fundus.pooled, r.oct.pooled, tape);
  r.scores = linear(fused, m.fusion_weights, nullptr, tape);
  return r;
}

template <typename T>
ForwardResult<T> forward_single(TwoStreamModel<T>& m, const Tensor<T>& image,
                                bool training, Tape<T>* tape) {
  if (m.modality == Modality::multimodal)
    throw ConfigError("forward_single: model is multimodal");
  ForwardResult<T> r;
  Branch<T>& b = m.fundus_branch ? *m.fundus_branch : *m.oct_branch;
  BranchOutput<T> out = forward_branch(b, m.cfg, image, training, tape);
  if (m.modality == Modality::fundus)
    r.fundus = out;
  else
    r.oct = out;
  r.scores = linear(out.pooled, m.fusion_weights, nullptr, tape);
  return r;
}

// Argmax per row; ties resolve to the lowest class index.
template <typename T>
std::vector<int> argmax_scores(const Tensor<T>& scores) {
  int n = scores.dim(0), k = scores.dim(1);
  std::vector<int> out(std::size_t(n), 0);
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (scores[std::size_t(i) * k + j] > scores[std::size_t(i) * k + best])
        best = j;
    out[std::size_t(i)] = best;
  }
  return out;
}

template <typename T>
std::vector<int> predict(TwoStreamModel<T>& m, const Tensor<T>& i_f,
                         const Tensor<T>& i_o) {
  return argmax_scores(forward_multimodal(m, i_f, i_o, false, static_cast<Tape<T>*>(nullptr)).scores);
}

// ---- checkpoint format ----
// magic "MMCK", u32 version=1, u32 tensor count; per tensor: u16 name length,
// name bytes, u8 dtype (0 = f32), u8 ndim, u32 dims, raw little-endian
// values; then u32 length + UTF-8 JSON config blob.

namespace detail {

inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(char(v & 0xFF));
  s.push_back(char(v >> 8));
}
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xFF));
}

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;
  explicit ByteReader(const std::string& b) : buf(b) {}
  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw FormatError(std::string("checkpoint truncated while reading ") + what, pos);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return std::uint8_t(buf[pos++]);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = std::uint16_t(std::uint8_t(buf[pos])) |
                      std::uint16_t(std::uint8_t(buf[pos + 1])) << 8;
    pos += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= std::uint32_t(std::uint8_t(buf[pos + std::size_t(i)])) << (8 * i);
    pos += 4;
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

inline nlohmann::json model_config_json(const TwoStreamModel<float>& m) {
  nlohmann::json j;
  j["width"] = m.cfg.width;
  j["blocks_per_stage"] = m.cfg.blocks_per_stage;
  j["stage_strides"] = m.cfg.stage_strides;
  j["input_size"] = m.cfg.input_size;
  j["num_classes"] = m.num_classes;
  j["modality"] = modality_name(m.modality);
  j["class_names"] = kClassNames;
  return j;
}

inline std::string serialize_checkpoint(TwoStreamModel<float>& m) {
  std::string out = "MMCK";
  detail::put_u32(out, 1);  // version
  auto tensors = state_tensors(m);
  detail::put_u32(out, std::uint32_t(tensors.size()));
  for (auto& nt : tensors) {
    detail::put_u16(out, std::uint16_t(nt.name.size()));
    out += nt.name;
    out.push_back(char(0));  // dtype f32
    out.push_back(char(nt.tensor->shape.size()));
    for (int d : nt.tensor->shape) detail::put_u32(out, std::uint32_t(d));
    const auto& vals = nt.tensor->data();
    std::size_t nbytes = vals.size() * sizeof(float);
    std::size_t off = out.size();
    out.resize(off + nbytes);
    std::memcpy(out.data() + off, vals.data(), nbytes);
  }
  std::string cfg = model_config_json(m).dump();
  detail::put_u32(out, std::uint32_t(cfg.size()));
  out += cfg;
  return out;
}

inline void save_checkpoint(TwoStreamModel<float>& m, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint for writing: " + path);
  std::string bytes = serialize_checkpoint(m);
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw IoError("failed writing checkpoint: " + path);
}

inline TwoStreamModel<float> deserialize_checkpoint(const std::string& buf) {
  detail::ByteReader r(buf);
  if (r.bytes(4, "magic") != "MMCK")
    throw FormatError("bad checkpoint magic", 0);
  std::uint32_t version = r.u32("version");
  if (version != 1)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  std::uint32_t count = r.u32("tensor count");

  struct Raw {
    std::vector<int> shape;
    std::vector<float> vals;
  };
  std::map<std::string, Raw> raw;
  for (std::uint32_t t = 0; t < count; ++t) {
    std::uint16_t nlen = r.u16("name length");
    std::string name = r.bytes(nlen, "tensor name");
    std::uint8_t dtype = r.u8("dtype");
    if (dtype != 0) throw FormatError("unsupported dtype for " + name, r.pos - 1);
    std::uint8_t ndim = r.u8("ndim");
    Raw rt;
    long long n = 1;
    for (int i = 0; i < ndim; ++i) {
      std::uint32_t d = r.u32("dim");
      rt.shape.push_back(int(d));
      n *= d;
    }
    std::string vals = r.bytes(std::size_t(n) * sizeof(float), "tensor values");
    rt.vals.resize(std::size_t(n));
    std::memcpy(rt.vals.data(), vals.data(), vals.size());
    raw.emplace(std::move(name), std::move(rt));
  }
  std::uint32_t cfg_len = r.u32("config length");
  std::string cfg_str = r.bytes(cfg_len, "config blob");
  if (r.pos != buf.size())
    throw FormatError("trailing bytes after checkpoint config", r.pos);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(cfg_str);
  } catch (const nlohmann::json::parse_error&) {
    throw FormatError("invalid checkpoint config JSON", buf.size() - cfg_len);
  }

  BranchConfig cfg;
  cfg.width = j.at("width").get<int>();
  cfg.blocks_per_stage = j.at("blocks_per_stage").get<int>();
  auto strides = j.at("stage_strides").get<std::vector<int>>();
  if (strides.size() != 3) throw FormatError("bad stage_strides in config", 0);
  std::copy(strides.begin(), strides.end(), cfg.stage_strides.begin());
  cfg.input_size = j.at("input_size").get<int>();
  int num_classes = j.at("num_classes").get<int>();
  Modality modality = parse_modality(j.at("modality").get<std::string>());

  TwoStreamModel<float> m =
      modality == Modality::multimodal
          ? build_model<float>(cfg, num_classes, 0)
          : build_single_modal<float>(cfg, num_classes, 0, modality);
  for (auto& nt : state_tensors(m)) {
    auto it = raw.find(nt.name);
    if (it == raw.end())
      throw FormatError("checkpoint missing tensor " + nt.name, buf.size());
    if (it->second.shape != nt.tensor->shape)
      throw FormatError("checkpoint shape mismatch for " + nt.name, buf.size());
    nt.tensor->data() = it->second.vals;
    raw.erase(it);
  }
  if (!raw.empty())
    throw FormatError("checkpoint has unexpected tensor " + raw.begin()->first,
                      buf.size());
  return m;
}

inline TwoStreamModel<float> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace mmcnn

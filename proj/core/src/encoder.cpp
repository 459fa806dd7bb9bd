#include "hembed/encoder.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "hembed/errors.hpp"

namespace hembed::encoder {

std::string_view pooling_name(Pooling p) {
  switch (p) {
    case Pooling::cls: return "cls";
    case Pooling::mean: return "mean";
    case Pooling::max: return "max";
    case Pooling::attention: return "attention";
    case Pooling::weighted: return "weighted";
  }
  return "weighted";
}

Pooling parse_pooling(std::string_view name) {
  for (Pooling p : {Pooling::cls, Pooling::mean, Pooling::max, Pooling::attention, Pooling::weighted}) {
    if (pooling_name(p) == name) return p;
  }
  throw ConfigError("unknown pooling strategy '" + std::string(name) + "'");
}

std::size_t EncoderConfig::ffn_hidden() const {
  const double raw = ffn_mult * static_cast<double>(dim);
  const auto blocks = static_cast<std::size_t>(std::llround(raw / 8.0));
  return std::max<std::size_t>(1, blocks) * 8;
}

void EncoderConfig::validate() const {
  if (vocab_size == 0 || dim == 0 || n_heads == 0) throw ConfigError("encoder: vocab_size, dim and n_heads must be positive");
  if (dim % n_heads != 0) throw ConfigError("encoder: dim must be divisible by n_heads");
  if (head_dim() % 2 != 0) throw ConfigError("encoder: head_dim must be even for rotary positions");
  if (max_seq_len == 0) throw ConfigError("encoder: max_seq_len must be at least 1");
  if (!(ffn_mult > 0.0)) throw ConfigError("encoder: ffn_mult must be positive");
  if (!(rope_base > 1.0)) throw ConfigError("encoder: rope_base must exceed 1");
}

EncoderConfig large_config(std::size_t vocab_size) {
  EncoderConfig c;
  c.vocab_size = vocab_size;
  c.dim = 768;
  c.n_layers = 12;
  c.n_heads = 12;
  c.max_seq_len = 512;
  return c;
}

EncoderWeights EncoderWeights::zeros(const EncoderConfig& c) {
  c.validate();
  const auto d = static_cast<Eigen::Index>(c.dim);
  const auto h = static_cast<Eigen::Index>(c.ffn_hidden());
  EncoderWeights w;
  w.token_embedding = Mat::Zero(static_cast<Eigen::Index>(c.vocab_size), d);
  w.layers.resize(c.n_layers);
  for (auto& L : w.layers) {
    L.ln1_scale = Mat::Zero(1, d);
    L.ln1_shift = Mat::Zero(1, d);
    L.wq = Mat::Zero(d, d);
    L.wk = Mat::Zero(d, d);
    L.wv = Mat::Zero(d, d);
    L.wo = Mat::Zero(d, d);
    L.ln2_scale = Mat::Zero(1, d);
    L.ln2_shift = Mat::Zero(1, d);
    L.w_gate = Mat::Zero(d, h);
    L.w_up = Mat::Zero(d, h);
    L.w_down = Mat::Zero(h, d);
  }
  w.final_scale = Mat::Zero(1, d);
  w.final_shift = Mat::Zero(1, d);
  w.pooling.weight = Mat::Zero(1, d);
  w.pooling.bias = Mat::Zero(1, 1);
  w.pooling.query = Mat::Zero(1, d);
  return w;
}

EncoderWeights EncoderWeights::init(const EncoderConfig& c, std::uint64_t seed) {
  EncoderWeights w = zeros(c);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  auto fill = [&](Mat& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  };
  fill(w.token_embedding);
  for (auto& L : w.layers) {
    L.ln1_scale.setOnes();
    L.ln2_scale.setOnes();
    fill(L.wq);
    fill(L.wk);
    fill(L.wv);
    fill(L.wo);
    fill(L.w_gate);
    fill(L.w_up);
    fill(L.w_down);
  }
  w.final_scale.setOnes();
  return w;
}

std::size_t EncoderWeights::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Mat& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

void EncoderWeights::set_zero() {
  for_each([](const std::string&, Mat& m) { m.setZero(); });
}

namespace {

void check_inputs(const EncoderConfig& c, std::span<const int> ids, std::span<const std::uint8_t> mask) {
  if (ids.size() != mask.size()) throw DataError("forward: ids and mask lengths differ");
  if (ids.empty()) throw DataError("forward: empty sequence");
  if (ids.size() > c.max_seq_len) {
    throw DataError("forward: sequence length " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                    std::to_string(c.max_seq_len));
  }
  bool any = false;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= c.vocab_size) {
      throw DataError("forward: token id out of range: " + std::to_string(ids[i]));
    }
    any = any || mask[i];
  }
  if (!any) throw DataError("empty sequence");
}

}  // namespace

ad::Var forward_on_tape(ad::Tape& tape, const EncoderConfig& c, const EncoderWeights& w, EncoderWeights* g,
                        std::span<const int> ids, std::span<const std::uint8_t> mask) {
  check_inputs(c, ids, mask);
  const int heads = static_cast<int>(c.n_heads);
  auto ref = [](const Mat& v, Mat* gr) { return ad::ParamRef{&v, gr}; };

  ad::Var x = tape.gather_rows(ref(w.token_embedding, g ? &g->token_embedding : nullptr), ids);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const LayerWeights& L = w.layers[l];
    LayerWeights* G = g ? &g->layers[l] : nullptr;
    auto R = [&](Mat LayerWeights::*m) { return ad::ParamRef{&(L.*m), G ? &(G->*m) : nullptr}; };

    ad::Var h = tape.layer_norm(x, R(&LayerWeights::ln1_scale), R(&LayerWeights::ln1_shift));
    ad::Var q = tape.rope(tape.matmul(h, R(&LayerWeights::wq)), heads, c.rope_base);
    ad::Var k = tape.rope(tape.matmul(h, R(&LayerWeights::wk)), heads, c.rope_base);
    ad::Var v = tape.matmul(h, R(&LayerWeights::wv));
    ad::Var a = tape.attention(q, k, v, heads, mask);
    x = tape.add(x, tape.matmul(a, R(&LayerWeights::wo)));

    ad::Var h2 = tape.layer_norm(x, R(&LayerWeights::ln2_scale), R(&LayerWeights::ln2_shift));
    ad::Var gate = tape.silu(tape.matmul(h2, R(&LayerWeights::w_gate)));
    ad::Var up = tape.matmul(h2, R(&LayerWeights::w_up));
    x = tape.add(x, tape.matmul(tape.mul(gate, up), R(&LayerWeights::w_down)));
  }
  return tape.layer_norm(x, ref(w.final_scale, g ? &g->final_scale : nullptr),
                         ref(w.final_shift, g ? &g->final_shift : nullptr));
}

ad::Var embed_on_tape(ad::Tape& tape, const EncoderConfig& c, const EncoderWeights& w, EncoderWeights* g,
                      std::span<const int> ids, std::span<const std::uint8_t> mask) {
  ad::Var e = forward_on_tape(tape, c, w, g, ids, mask);
  auto ref = [](const Mat& v, Mat* gr) { return ad::ParamRef{&v, gr}; };
  ad::Var s;
  switch (c.pooling) {
    case Pooling::cls:
      if (!mask[0]) throw DataError("cls pooling: position 0 is masked");
      s = tape.pool_first(e);
      break;
    case Pooling::mean:
      s = tape.pool_mean(e, mask);
      break;
    case Pooling::max:
      s = tape.pool_max(e, mask);
      break;
    case Pooling::attention:
      s = tape.pool_attention(e, mask, ref(w.pooling.query, g ? &g->pooling.query : nullptr));
      break;
    case Pooling::weighted:
      s = tape.pool_weighted(e, mask, ref(w.pooling.weight, g ? &g->pooling.weight : nullptr),
                             ref(w.pooling.bias, g ? &g->pooling.bias : nullptr));
      break;
  }
  return tape.l2_normalize(s);
}

Mat forward(const EncoderConfig& c, const EncoderWeights& w, std::span<const int> ids,
            std::span<const std::uint8_t> mask) {
  ad::Tape tape(false);
  return tape.value(forward_on_tape(tape, c, w, nullptr, ids, mask));
}

RowVec pool(const Mat& e, std::span<const std::uint8_t> mask, Pooling strategy, const nn::PoolingHead& head) {
  return nn::pool(e, mask, strategy, head);
}

RowVec embed_ids(const EncoderConfig& c, const EncoderWeights& w, std::span<const int> ids) {
  const std::vector<std::uint8_t> mask(ids.size(), 1);
  const Mat e = forward(c, w, ids, mask);
  return nn::pool(e, mask, c.pooling, w.pooling);
}

namespace {

constexpr char kMagic[8] = {'H', 'E', 'M', 'B', 'W', 'G', 'T', '\0'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }
void put_f64(std::string& out, double f) { put_u64(out, std::bit_cast<std::uint64_t>(f)); }

class Reader {
 public:
  explicit Reader(std::string_view b) : bytes_(b) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    const std::uint64_t hi = u32();
    return lo | (hi << 32);
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw ModelError("weights file truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_weights(const EncoderConfig& c, const EncoderWeights& w) {
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kWeightsFileVersion);
  put_u32(out, static_cast<std::uint32_t>(c.vocab_size));
  put_u32(out, static_cast<std::uint32_t>(c.dim));
  put_u32(out, static_cast<std::uint32_t>(c.n_layers));
  put_u32(out, static_cast<std::uint32_t>(c.n_heads));
  put_u32(out, static_cast<std::uint32_t>(c.ffn_hidden()));
  put_u32(out, static_cast<std::uint32_t>(c.max_seq_len));
  put_u32(out, static_cast<std::uint32_t>(c.pooling));
  put_f64(out, c.ffn_mult);
  put_f64(out, c.rope_base);
  std::uint32_t count = 0;
  w.for_each([&](const std::string&, const Mat&) { ++count; });
  put_u32(out, count);
  w.for_each([&](const std::string&, const Mat& m) {
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) put_f32(out, static_cast<float>(m.data()[i]));
  });
  return out;
}

void save_weights(const std::filesystem::path& path, const EncoderConfig& c, const EncoderWeights& w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  const std::string bytes = serialize_weights(c, w);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void deserialize_weights(std::string_view bytes, EncoderConfig& c, EncoderWeights& w) {
  Reader r(bytes);
  if (r.take(sizeof kMagic) != std::string_view(kMagic, sizeof kMagic)) throw ModelError("not an encoder weights file");
  const auto version = r.u32();
  if (version != kWeightsFileVersion) throw ModelError("unsupported weights version " + std::to_string(version));
  EncoderConfig cfg;
  cfg.vocab_size = r.u32();
  cfg.dim = r.u32();
  cfg.n_layers = r.u32();
  cfg.n_heads = r.u32();
  const std::size_t hidden = r.u32();
  cfg.max_seq_len = r.u32();
  const auto pooling = r.u32();
  if (pooling > static_cast<std::uint32_t>(Pooling::weighted)) throw ModelError("weights: bad pooling tag");
  cfg.pooling = static_cast<Pooling>(pooling);
  cfg.ffn_mult = r.f64();
  cfg.rope_base = r.f64();
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ModelError(std::string("weights: ") + e.what());
  }
  if (cfg.ffn_hidden() != hidden) throw ModelError("weights: ffn hidden size inconsistent with ffn_mult");
  EncoderWeights loaded = EncoderWeights::zeros(cfg);
  std::uint32_t expected = 0;
  loaded.for_each([&](const std::string&, const Mat&) { ++expected; });
  if (r.u32() != expected) throw ModelError("weights: unexpected tensor count");
  loaded.for_each([&](const std::string& name, Mat& m) {
    const auto rows = r.u32();
    const auto cols = r.u32();
    if (rows != m.rows() || cols != m.cols()) throw ModelError("weights: shape mismatch for " + name);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const float f = r.f32();
      if (!std::isfinite(f)) throw ModelError("weights: non-finite value in " + name);
      m.data()[i] = f;
    }
  });
  if (!r.done()) throw ModelError("weights: trailing bytes");
  c = cfg;
  w = std::move(loaded);
}

void load_weights(const std::filesystem::path& path, EncoderConfig& c, EncoderWeights& w) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelError("cannot read weights " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  deserialize_weights(ss.str(), c, w);
}

}  // namespace hembed::encoder

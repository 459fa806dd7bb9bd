#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hembed/autograd.hpp"
#include "hembed/nn.hpp"
#include "hembed/tensor.hpp"

namespace hembed::encoder {

using nn::Pooling;

std::string_view pooling_name(Pooling p);
Pooling parse_pooling(std::string_view name);

struct EncoderConfig {
  std::size_t vocab_size = 2008;  // token ids, special tokens included
  std::size_t dim = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  double ffn_mult = 8.0 / 3.0;
  std::size_t max_seq_len = 128;
  double rope_base = 10000.0;
  Pooling pooling = Pooling::weighted;

  // ffn_mult * dim rounded to the nearest multiple of 8 (at least 8)
  std::size_t ffn_hidden() const;
  std::size_t head_dim() const { return dim / n_heads; }
  // Throws ConfigError unless dim % n_heads == 0, head_dim is even and the sizes are positive.
  void validate() const;
};

// 768-dim, 12 layers, 12 heads.
EncoderConfig large_config(std::size_t vocab_size);

struct LayerWeights {
  Mat ln1_scale, ln1_shift;  // 1 x dim
  Mat wq, wk, wv, wo;        // dim x dim
  Mat ln2_scale, ln2_shift;  // 1 x dim
  Mat w_gate, w_up;          // dim x hidden
  Mat w_down;                // hidden x dim
};

struct EncoderWeights {
  Mat token_embedding;  // vocab x dim
  std::vector<LayerWeights> layers;
  Mat final_scale, final_shift;
  nn::PoolingHead pooling;

  static EncoderWeights zeros(const EncoderConfig& config);
  // N(0, 0.02) embeddings and projections, unit LN scale, zero LN shift and pooling head.
  static EncoderWeights init(const EncoderConfig& config, std::uint64_t seed);

  // Visits every tensor in file order with a stable name.
  template <typename Fn>
  void for_each(Fn&& fn) { visit(*this, fn); }
  template <typename Fn>
  void for_each(Fn&& fn) const { visit(*this, fn); }

  std::size_t parameter_count() const;
  void set_zero();

 private:
  template <typename Self, typename Fn>
  static void visit(Self& w, Fn& fn) {
    fn(std::string("token_embedding"), w.token_embedding);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      auto& L = w.layers[l];
      fn(p + "ln1_scale", L.ln1_scale);
      fn(p + "ln1_shift", L.ln1_shift);
      fn(p + "wq", L.wq);
      fn(p + "wk", L.wk);
      fn(p + "wv", L.wv);
      fn(p + "wo", L.wo);
      fn(p + "ln2_scale", L.ln2_scale);
      fn(p + "ln2_shift", L.ln2_shift);
      fn(p + "w_gate", L.w_gate);
      fn(p + "w_up", L.w_up);
      fn(p + "w_down", L.w_down);
    }
    fn(std::string("final_scale"), w.final_scale);
    fn(std::string("final_shift"), w.final_shift);
    fn(std::string("pool_weight"), w.pooling.weight);
    fn(std::string("pool_bias"), w.pooling.bias);
    fn(std::string("pool_query"), w.pooling.query);
  }
};

// Token embeddings E (n x dim). Precondition: ids < vocab_size, n <= max_seq_len,
// at least one unmasked position; violations throw DataError.
Mat forward(const EncoderConfig& config, const EncoderWeights& weights, std::span<const int> ids,
            std::span<const std::uint8_t> mask);

RowVec pool(const Mat& e, std::span<const std::uint8_t> mask, Pooling strategy, const nn::PoolingHead& head);

// forward + pool with every position unmasked.
RowVec embed_ids(const EncoderConfig& config, const EncoderWeights& weights, std::span<const int> ids);

// Same computation recorded on a tape. With grads != nullptr every weight
// gradient is accumulated into the matching tensor of *grads.
ad::Var forward_on_tape(ad::Tape& tape, const EncoderConfig& config, const EncoderWeights& weights,
                        EncoderWeights* grads, std::span<const int> ids, std::span<const std::uint8_t> mask);
// forward_on_tape + pooling + L2 normalization (1 x dim).
ad::Var embed_on_tape(ad::Tape& tape, const EncoderConfig& config, const EncoderWeights& weights,
                      EncoderWeights* grads, std::span<const int> ids, std::span<const std::uint8_t> mask);

inline constexpr std::uint32_t kWeightsFileVersion = 1;

// Little-endian binary: magic "HEMBWGT\0", u32 version, config header, u32
// tensor count, then per tensor (in for_each order) u32 rows, u32 cols and
// rows*cols float32 values, row-major.
void save_weights(const std::filesystem::path& path, const EncoderConfig& config, const EncoderWeights& weights);
std::string serialize_weights(const EncoderConfig& config, const EncoderWeights& weights);
void load_weights(const std::filesystem::path& path, EncoderConfig& config, EncoderWeights& weights);
void deserialize_weights(std::string_view bytes, EncoderConfig& config, EncoderWeights& weights);

}  // namespace hembed::encoder

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ima/tensor.hpp"
#include "ima/vocab.hpp"

namespace ima {

// Architecture hyperparameters. The corpus-scale defaults below keep every
// check fast; the full-size values (d_model 512, 8 heads, ff 1024,
// attn2d_channels 4, cnn_channels 64) remain reachable through config.
struct ModelConfig {
  std::size_t feature_dim = 8;   // features per input frame
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t ff_dim = 128;
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 2;
  double dropout_p = 0.1;
  std::size_t max_decode_len = 64;
  std::size_t cnn_channels = 16;    // front-end conv channels and 2D-attention output channels
  std::size_t attn2d_channels = 4;  // q/k/v channels inside 2D attention (one head per channel)
  std::string symbols;              // target alphabet; ids follow the reserved 4

  std::size_t vocab_size() const { return kNumSpecialIds + symbols.size(); }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Encoder output for one audio segment.
struct EncodedSegment {
  Tensor states;       // [length x d_model]
  std::size_t length;  // ceil(ceil(N/2)/2) for an N-frame input
};

// Deep copy of everything a training step can touch: parameters plus
// normalization statistics, in registration order.
struct ParameterImage {
  ModelConfig config;
  std::vector<std::pair<std::string, std::vector<double>>> blobs;
};

// scores[i][j] - log|i-j| off the diagonal; the diagonal is left unchanged.
Tensor distance_penalty(const Tensor& scores);

// Factored-axis attention passes used by the 2D-attention layers. Planes are
// [T x F]; the time variant attends across rows, the frequency variant across
// columns. Both return {out, attn} so the normalization is observable in
// tests; out always has the plane's shape.
std::pair<Tensor, Tensor> axis_attention(const Tensor& q, const Tensor& k, const Tensor& v);
std::pair<Tensor, Tensor> freq_axis_attention(const Tensor& q, const Tensor& k, const Tensor& v);

namespace layers {

struct Conv2d {
  Tensor weight;  // [c_out, c_in, 3, 3]
};

struct BatchNorm {
  Tensor gamma, beta;
  Tensor running_mean, running_var, num_updates;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

struct LayerNorm {
  Tensor gamma, beta;
};

struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
};

struct Attention2d {
  Conv2d q, k, v;
  BatchNorm bn_q, bn_k, bn_v;
  Conv2d out;
  BatchNorm bn_out;
};

struct EncoderLayer {
  MultiHeadAttention attn;
  LayerNorm ln_attn, ln_ff;
  Linear ff_in, ff_out;
};

struct DecoderLayer {
  MultiHeadAttention self_attn, cross_attn;
  LayerNorm ln_self, ln_cross, ln_ff;
  Linear ff_in, ff_out;
};

}  // namespace layers

// S-Transformer-lite encoder-decoder: strided 2D-CNN front-end, factored
// 2D self-attention, distance-penalized Transformer encoder, autoregressive
// character-level decoder.
class STModel {
 public:
  STModel(ModelConfig config, std::uint64_t seed);

  STModel(STModel&&) = default;
  STModel& operator=(STModel&&) = default;
  STModel(const STModel&) = delete;
  STModel& operator=(const STModel&) = delete;

  STModel clone() const;

  const ModelConfig& config() const { return cfg_; }
  void set_train(bool train) { train_ = train; }
  bool is_train() const { return train_; }
  void reseed(std::uint64_t seed) { rng_ = Rng(seed); }
  Rng& rng() { return rng_; }

  // Trainable parameters, stable registration order.
  const std::vector<Tensor>& parameters() const { return trainable_; }
  // Parameters plus batch-norm statistics, stable order, unique names.
  const std::vector<std::pair<std::string, Tensor>>& named_state() const { return named_state_; }

  // Front-end only: two strided conv stages plus the 2D-attention stack,
  // flattened and projected to d_model. Exposed for shape tests.
  Tensor cnn_frontend(const Tensor& spectrogram);

  EncodedSegment encode(const Tensor& spectrogram);

  // Teacher-forced loss over a BOS...EOS id sequence.
  Tensor decoder_loss(const EncodedSegment& enc, std::span<const int> target_ids,
                      double label_smoothing = 0.1, Reduction reduction = Reduction::Sum);
  Tensor sequence_loss(const Tensor& spectrogram, std::span<const int> target_ids,
                       double label_smoothing = 0.1, Reduction reduction = Reduction::Sum);

  // Argmax decoding from BOS until EOS or max_decode_len. Requires eval mode.
  std::string greedy_decode(const EncodedSegment& enc);

  // Eval-mode, tape-free encode + greedy decode.
  std::string translate(const Tensor& spectrogram);

  ParameterImage snapshot() const;
  void restore(const ParameterImage& image);

  static std::size_t downsampled_length(std::size_t frames) { return (((frames - 1) / 2) / 2) + 1; }

 private:
  void build(std::uint64_t seed);
  Tensor decoder_logits(const EncodedSegment& enc, std::span<const int> input_ids);
  Tensor attention_block(layers::MultiHeadAttention& mha, const Tensor& queries,
                         const Tensor& keys_values, bool use_distance_penalty, bool causal);
  Tensor attention2d_block(layers::Attention2d& layer, const Tensor& x);
  Tensor norm_act(layers::BatchNorm& bn, const Tensor& x);

  ModelConfig cfg_;
  bool train_ = true;
  Rng rng_{0};

  layers::Conv2d conv1_, conv2_;
  layers::BatchNorm bn1_, bn2_;
  std::vector<layers::Attention2d> attn2d_;
  layers::Linear input_proj_;
  std::vector<layers::EncoderLayer> encoder_;
  Tensor embedding_;
  std::vector<layers::DecoderLayer> decoder_;
  layers::Linear output_proj_;

  std::vector<Tensor> trainable_;
  std::vector<std::pair<std::string, Tensor>> named_state_;
};

}  // namespace ima

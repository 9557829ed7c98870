#include "ima/model.hpp"

#include <cmath>

namespace ima {

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    fail(ErrorKind::Config, "d_model must be a positive multiple of n_heads");
  }
  if (vocab_size() < 4) fail(ErrorKind::Config, "vocab_size must be at least 4");
  if (feature_dim == 0 || ff_dim == 0 || cnn_channels == 0 || attn2d_channels == 0) {
    fail(ErrorKind::Config, "model dimensions must be positive");
  }
  if (n_enc_layers == 0 || n_dec_layers == 0) {
    fail(ErrorKind::Config, "need at least one encoder and one decoder layer");
  }
  if (dropout_p < 0.0 || dropout_p > 1.0) fail(ErrorKind::Config, "dropout_p outside [0,1]");
  if (max_decode_len == 0) fail(ErrorKind::Config, "max_decode_len must be positive");
}

Tensor distance_penalty(const Tensor& scores) {
  if (scores.rank() != 2 || scores.extent(0) != scores.extent(1)) {
    fail(ErrorKind::ShapeMismatch, "distance_penalty: scores must be square, got " + shape_str(scores.shape()));
  }
  const std::size_t t = scores.extent(0);
  Tensor penalty(Shape{t, t});
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < t; ++j) {
      if (i == j) continue;  // pen(i,i) := 0
      const double d = static_cast<double>(i > j ? i - j : j - i);
      penalty.data()[i * t + j] = -std::log(d);
    }
  }
  return add(scores, penalty);
}

std::pair<Tensor, Tensor> axis_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.extent(1)));
  Tensor attn = softmax_rows(scale(matmul_nt(q, k), inv_sqrt));
  return {matmul(attn, v), attn};
}

std::pair<Tensor, Tensor> freq_axis_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.extent(0)));
  Tensor attn = softmax_rows(scale(matmul_tn(q, k), inv_sqrt));
  // out[t][f] = sum_g attn[f][g] * v[t][g]
  return {matmul_nt(v, attn), attn};
}

// ---- construction ---------------------------------------------------------

namespace {

Tensor xavier(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::uniform(std::move(shape), rng, -limit, limit);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

STModel::STModel(ModelConfig config, std::uint64_t seed) : cfg_(std::move(config)) {
  cfg_.validate();
  build(seed);
}

void STModel::build(std::uint64_t seed) {
  Rng init(mix_seed(seed, 0x57315731ull));
  const std::size_t d = cfg_.d_model;
  const std::size_t v = cfg_.vocab_size();
  const std::size_t cc = cfg_.cnn_channels;
  const std::size_t ac = cfg_.attn2d_channels;

  auto param = [&](const std::string& name, Tensor t) {
    named_state_.emplace_back(name, t);
    trainable_.push_back(t);
    return t;
  };
  auto buffer = [&](const std::string& name, Tensor t) {
    named_state_.emplace_back(name, t);
    return t;
  };
  auto make_bn = [&](const std::string& prefix, std::size_t channels) {
    layers::BatchNorm bn;
    bn.gamma = param(prefix + ".gamma", Tensor(Shape{channels}, 1.0).set_requires_grad(true));
    bn.beta = param(prefix + ".beta", Tensor(Shape{channels}, 0.0).set_requires_grad(true));
    bn.running_mean = buffer(prefix + ".running_mean", Tensor(Shape{channels}, 0.0));
    bn.running_var = buffer(prefix + ".running_var", Tensor(Shape{channels}, 1.0));
    bn.num_updates = buffer(prefix + ".num_updates", Tensor(Shape{1}, 0.0));
    return bn;
  };
  auto make_linear = [&](const std::string& prefix, std::size_t in, std::size_t out) {
    layers::Linear lin;
    lin.weight = param(prefix + ".weight", xavier(Shape{in, out}, in, out, init));
    lin.bias = param(prefix + ".bias", Tensor(Shape{out}, 0.0).set_requires_grad(true));
    return lin;
  };
  auto make_conv = [&](const std::string& prefix, std::size_t c_in, std::size_t c_out) {
    layers::Conv2d conv;
    conv.weight = param(prefix + ".weight", xavier(Shape{c_out, c_in, 3, 3}, c_in * 9, c_out * 9, init));
    return conv;
  };
  auto make_ln = [&](const std::string& prefix) {
    layers::LayerNorm ln;
    ln.gamma = param(prefix + ".gamma", Tensor(Shape{d}, 1.0).set_requires_grad(true));
    ln.beta = param(prefix + ".beta", Tensor(Shape{d}, 0.0).set_requires_grad(true));
    return ln;
  };
  auto make_mha = [&](const std::string& prefix) {
    layers::MultiHeadAttention mha;
    mha.wq = make_linear(prefix + ".wq", d, d);
    mha.wk = make_linear(prefix + ".wk", d, d);
    mha.wv = make_linear(prefix + ".wv", d, d);
    mha.wo = make_linear(prefix + ".wo", d, d);
    return mha;
  };

  conv1_ = make_conv("frontend.conv1", 1, cc);
  bn1_ = make_bn("frontend.bn1", cc);
  conv2_ = make_conv("frontend.conv2", cc, cc);
  bn2_ = make_bn("frontend.bn2", cc);

  attn2d_.clear();
  for (std::size_t i = 0; i < 2; ++i) {
    const std::string p = "attn2d." + std::to_string(i);
    layers::Attention2d layer;
    layer.q = make_conv(p + ".q", cc, ac);
    layer.bn_q = make_bn(p + ".bn_q", ac);
    layer.k = make_conv(p + ".k", cc, ac);
    layer.bn_k = make_bn(p + ".bn_k", ac);
    layer.v = make_conv(p + ".v", cc, ac);
    layer.bn_v = make_bn(p + ".bn_v", ac);
    layer.out = make_conv(p + ".out", 2 * ac, cc);
    layer.bn_out = make_bn(p + ".bn_out", cc);
    attn2d_.push_back(std::move(layer));
  }

  const std::size_t freq_down = downsampled_length(cfg_.feature_dim);
  input_proj_ = make_linear("frontend.proj", cc * freq_down, d);

  encoder_.clear();
  for (std::size_t i = 0; i < cfg_.n_enc_layers; ++i) {
    const std::string p = "encoder." + std::to_string(i);
    layers::EncoderLayer layer;
    layer.attn = make_mha(p + ".attn");
    layer.ln_attn = make_ln(p + ".ln_attn");
    layer.ff_in = make_linear(p + ".ff_in", d, cfg_.ff_dim);
    layer.ff_out = make_linear(p + ".ff_out", cfg_.ff_dim, d);
    layer.ln_ff = make_ln(p + ".ln_ff");
    encoder_.push_back(std::move(layer));
  }

  embedding_ = param("decoder.embedding", Tensor::uniform(Shape{v, d}, init, -0.1, 0.1).set_requires_grad(true));

  decoder_.clear();
  for (std::size_t i = 0; i < cfg_.n_dec_layers; ++i) {
    const std::string p = "decoder." + std::to_string(i);
    layers::DecoderLayer layer;
    layer.self_attn = make_mha(p + ".self_attn");
    layer.ln_self = make_ln(p + ".ln_self");
    layer.cross_attn = make_mha(p + ".cross_attn");
    layer.ln_cross = make_ln(p + ".ln_cross");
    layer.ff_in = make_linear(p + ".ff_in", d, cfg_.ff_dim);
    layer.ff_out = make_linear(p + ".ff_out", cfg_.ff_dim, d);
    layer.ln_ff = make_ln(p + ".ln_ff");
    decoder_.push_back(std::move(layer));
  }

  output_proj_ = make_linear("decoder.proj", d, v);

  rng_ = Rng(mix_seed(seed, 0xd201ull));
}

STModel STModel::clone() const {
  STModel copy(cfg_, 0);
  copy.restore(snapshot());
  copy.train_ = train_;
  return copy;
}

// ---- forward ---------------------------------------------------------------

Tensor STModel::norm_act(layers::BatchNorm& bn, const Tensor& x) {
  return relu(batchnorm(x, bn.gamma, bn.beta, bn.running_mean, bn.running_var, bn.num_updates, train_));
}

Tensor STModel::attention_block(layers::MultiHeadAttention& mha, const Tensor& queries,
                                const Tensor& keys_values, bool use_distance_penalty, bool causal) {
  const std::size_t d = cfg_.d_model;
  const std::size_t head_dim = d / cfg_.n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Tensor q = linear(queries, mha.wq.weight, mha.wq.bias);
  Tensor k = linear(keys_values, mha.wk.weight, mha.wk.bias);
  Tensor v = linear(keys_values, mha.wv.weight, mha.wv.bias);

  Tensor mask;
  if (causal) mask = causal_mask(queries.extent(0));

  std::vector<Tensor> heads;
  heads.reserve(cfg_.n_heads);
  for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
    Tensor qh = slice_cols(q, h * head_dim, head_dim);
    Tensor kh = slice_cols(k, h * head_dim, head_dim);
    Tensor vh = slice_cols(v, h * head_dim, head_dim);
    Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt);
    if (use_distance_penalty) scores = distance_penalty(scores);
    if (causal) scores = add(scores, mask);
    heads.push_back(matmul(softmax_rows(scores), vh));
  }
  return linear(concat_cols(heads), mha.wo.weight, mha.wo.bias);
}

Tensor STModel::attention2d_block(layers::Attention2d& layer, const Tensor& x) {
  Tensor q = norm_act(layer.bn_q, conv2d(x, layer.q.weight, {1, 1}));
  Tensor k = norm_act(layer.bn_k, conv2d(x, layer.k.weight, {1, 1}));
  Tensor v = norm_act(layer.bn_v, conv2d(x, layer.v.weight, {1, 1}));

  // One attention head per q/k/v channel, along each spectrogram axis.
  std::vector<Tensor> planes;
  planes.reserve(2 * cfg_.attn2d_channels);
  for (std::size_t c = 0; c < cfg_.attn2d_channels; ++c) {
    Tensor qc = channel_plane(q, c);
    Tensor kc = channel_plane(k, c);
    Tensor vc = channel_plane(v, c);
    planes.push_back(axis_attention(qc, kc, vc).first);
    planes.push_back(freq_axis_attention(qc, kc, vc).first);
  }
  return norm_act(layer.bn_out, conv2d(stack_planes(planes), layer.out.weight, {1, 1}));
}

Tensor STModel::cnn_frontend(const Tensor& spectrogram) {
  if (spectrogram.rank() != 2 || spectrogram.extent(1) != cfg_.feature_dim) {
    fail(ErrorKind::ShapeMismatch,
         "expected [N x " + std::to_string(cfg_.feature_dim) + "] features, got " + shape_str(spectrogram.shape()));
  }
  if (spectrogram.extent(0) < 4) {
    fail(ErrorKind::Contract,
         "segment too short: " + std::to_string(spectrogram.extent(0)) + " frames, need at least 4");
  }
  Tensor h = reshape(spectrogram, Shape{1, spectrogram.extent(0), cfg_.feature_dim});
  h = norm_act(bn1_, conv2d(h, conv1_.weight, {2, 2}));
  h = norm_act(bn2_, conv2d(h, conv2_.weight, {2, 2}));
  return linear(time_major_flatten(h), input_proj_.weight, input_proj_.bias);
}

EncodedSegment STModel::encode(const Tensor& spectrogram) {
  if (spectrogram.rank() != 2 || spectrogram.extent(1) != cfg_.feature_dim) {
    fail(ErrorKind::ShapeMismatch,
         "expected [N x " + std::to_string(cfg_.feature_dim) + "] features, got " + shape_str(spectrogram.shape()));
  }
  if (spectrogram.extent(0) < 4) {
    fail(ErrorKind::Contract,
         "segment too short: " + std::to_string(spectrogram.extent(0)) + " frames, need at least 4");
  }
  Tensor h = reshape(spectrogram, Shape{1, spectrogram.extent(0), cfg_.feature_dim});
  h = norm_act(bn1_, conv2d(h, conv1_.weight, {2, 2}));
  h = norm_act(bn2_, conv2d(h, conv2_.weight, {2, 2}));
  for (auto& layer : attn2d_) h = attention2d_block(layer, h);

  Tensor m = linear(time_major_flatten(h), input_proj_.weight, input_proj_.bias);
  const std::size_t t = m.extent(0);
  m = add(m, sinusoidal_positions(t, cfg_.d_model));
  m = dropout(m, cfg_.dropout_p, train_, rng_);

  for (auto& layer : encoder_) {
    Tensor a = attention_block(layer.attn, m, m, /*use_distance_penalty=*/true, /*causal=*/false);
    m = layer_norm(add(m, dropout(a, cfg_.dropout_p, train_, rng_)), layer.ln_attn.gamma, layer.ln_attn.beta);
    Tensor f = linear(relu(linear(m, layer.ff_in.weight, layer.ff_in.bias)), layer.ff_out.weight, layer.ff_out.bias);
    m = layer_norm(add(m, dropout(f, cfg_.dropout_p, train_, rng_)), layer.ln_ff.gamma, layer.ln_ff.beta);
  }
  return EncodedSegment{m, t};
}

Tensor STModel::decoder_logits(const EncodedSegment& enc, std::span<const int> input_ids) {
  Tensor x = embedding(input_ids, embedding_);
  x = scale(x, std::sqrt(static_cast<double>(cfg_.d_model)));
  x = add(x, sinusoidal_positions(input_ids.size(), cfg_.d_model));
  x = dropout(x, cfg_.dropout_p, train_, rng_);

  for (auto& layer : decoder_) {
    Tensor a = attention_block(layer.self_attn, x, x, /*use_distance_penalty=*/false, /*causal=*/true);
    x = layer_norm(add(x, dropout(a, cfg_.dropout_p, train_, rng_)), layer.ln_self.gamma, layer.ln_self.beta);
    Tensor c = attention_block(layer.cross_attn, x, enc.states, false, false);
    x = layer_norm(add(x, dropout(c, cfg_.dropout_p, train_, rng_)), layer.ln_cross.gamma, layer.ln_cross.beta);
    Tensor f = linear(relu(linear(x, layer.ff_in.weight, layer.ff_in.bias)), layer.ff_out.weight, layer.ff_out.bias);
    x = layer_norm(add(x, dropout(f, cfg_.dropout_p, train_, rng_)), layer.ln_ff.gamma, layer.ln_ff.beta);
  }
  return linear(x, output_proj_.weight, output_proj_.bias);
}

Tensor STModel::decoder_loss(const EncodedSegment& enc, std::span<const int> target_ids,
                             double label_smoothing, Reduction reduction) {
  if (target_ids.size() < 2) {
    fail(ErrorKind::Contract, "decoder_loss: need BOS-prefixed, EOS-terminated targets");
  }
  const std::span<const int> input = target_ids.subspan(0, target_ids.size() - 1);
  const std::span<const int> predict = target_ids.subspan(1);
  Tensor logits = decoder_logits(enc, input);
  return cross_entropy_label_smoothed(logits, predict, label_smoothing, kPadId, reduction);
}

Tensor STModel::sequence_loss(const Tensor& spectrogram, std::span<const int> target_ids,
                              double label_smoothing, Reduction reduction) {
  return decoder_loss(encode(spectrogram), target_ids, label_smoothing, reduction);
}

std::string STModel::greedy_decode(const EncodedSegment& enc) {
  if (train_) fail(ErrorKind::State, "greedy_decode requires eval mode");
  TapeSuspend no_tape;
  std::vector<int> ids{kBosId};
  while (ids.size() - 1 < cfg_.max_decode_len) {
    Tensor logits = decoder_logits(enc, ids);
    const std::size_t v = cfg_.vocab_size();
    const double* last = logits.data() + (logits.extent(0) - 1) * v;
    int best = 0;
    for (std::size_t c = 1; c < v; ++c) {
      if (last[c] > last[best]) best = static_cast<int>(c);
    }
    if (best == kEosId) break;
    ids.push_back(best);
  }
  return decode_ids(ids, cfg_.symbols);
}

std::string STModel::translate(const Tensor& spectrogram) {
  if (train_) fail(ErrorKind::State, "translate requires eval mode");
  TapeSuspend no_tape;
  return greedy_decode(encode(spectrogram));
}

// ---- snapshot / restore ---------------------------------------------------

ParameterImage STModel::snapshot() const {
  ParameterImage image;
  image.config = cfg_;
  image.blobs.reserve(named_state_.size());
  for (const auto& [name, tensor] : named_state_) {
    image.blobs.emplace_back(name, tensor.values());
  }
  return image;
}

void STModel::restore(const ParameterImage& image) {
  if (!(image.config == cfg_)) {
    fail(ErrorKind::Incompatible, "restore: parameter image was taken from a different configuration");
  }
  if (image.blobs.size() != named_state_.size()) {
    fail(ErrorKind::Incompatible, "restore: parameter image has a different state layout");
  }
  for (std::size_t i = 0; i < named_state_.size(); ++i) {
    const auto& [name, values] = image.blobs[i];
    auto& [own_name, tensor] = named_state_[i];
    if (name != own_name || values.size() != tensor.size()) {
      fail(ErrorKind::Incompatible, "restore: mismatched state entry '" + name + "'");
    }
    tensor.values() = values;
  }
}

}  // namespace ima

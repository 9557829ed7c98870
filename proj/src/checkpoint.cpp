#include "ima/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ima/binio.hpp"

namespace ima {

namespace {
constexpr std::uint32_t kFormatVersion = 1;
}

std::string model_config_to_json(const ModelConfig& config) {
  nlohmann::json j{
      {"feature_dim", config.feature_dim},
      {"d_model", config.d_model},
      {"n_heads", config.n_heads},
      {"ff_dim", config.ff_dim},
      {"n_enc_layers", config.n_enc_layers},
      {"n_dec_layers", config.n_dec_layers},
      {"dropout_p", config.dropout_p},
      {"max_decode_len", config.max_decode_len},
      {"cnn_channels", config.cnn_channels},
      {"attn2d_channels", config.attn2d_channels},
      {"vocab_size", config.vocab_size()},
      {"symbols", config.symbols},
  };
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Io, std::string("model config is not valid JSON: ") + e.what());
  }
  ModelConfig cfg;
  try {
    cfg.feature_dim = j.value("feature_dim", cfg.feature_dim);
    cfg.d_model = j.value("d_model", cfg.d_model);
    cfg.n_heads = j.value("n_heads", cfg.n_heads);
    cfg.ff_dim = j.value("ff_dim", cfg.ff_dim);
    cfg.n_enc_layers = j.value("n_enc_layers", cfg.n_enc_layers);
    cfg.n_dec_layers = j.value("n_dec_layers", cfg.n_dec_layers);
    cfg.dropout_p = j.value("dropout_p", cfg.dropout_p);
    cfg.max_decode_len = j.value("max_decode_len", cfg.max_decode_len);
    cfg.cnn_channels = j.value("cnn_channels", cfg.cnn_channels);
    cfg.attn2d_channels = j.value("attn2d_channels", cfg.attn2d_channels);
    cfg.symbols = j.value("symbols", cfg.symbols);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, std::string("bad model config field: ") + e.what());
  }
  if (j.contains("vocab_size") && j["vocab_size"].get<std::size_t>() != cfg.vocab_size()) {
    fail(ErrorKind::Config, "vocab_size does not match the symbol table");
  }
  return cfg;
}

void save_checkpoint(std::ostream& os, const STModel& model) {
  os.write("STMC", 4);
  binio::write_u32(os, kFormatVersion);
  binio::write_string(os, model_config_to_json(model.config()));
  for (const auto& [name, tensor] : model.named_state()) {
    binio::write_string(os, name);
    const Shape& shape = tensor.shape();
    binio::write_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (const std::size_t e : shape) binio::write_u32(os, static_cast<std::uint32_t>(e));
    binio::write_f64_span(os, tensor.values());
  }
}

void save_checkpoint(const std::string& path, const STModel& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::Io, "cannot open checkpoint for writing: " + path);
  save_checkpoint(os, model);
  if (!os) fail(ErrorKind::Io, "failed writing checkpoint: " + path);
}

STModel load_checkpoint(std::istream& is) {
  binio::expect_magic(is, "STMC", "model checkpoint");
  const std::uint32_t version = binio::read_u32(is, "checkpoint version");
  if (version != kFormatVersion) {
    fail(ErrorKind::Incompatible, "unsupported checkpoint version " + std::to_string(version));
  }
  const ModelConfig cfg = model_config_from_json(binio::read_string(is, "checkpoint config"));

  STModel model(cfg, 0);
  for (const auto& [name, tensor] : model.named_state()) {
    const std::string block_name = binio::read_string(is, "checkpoint block name");
    if (block_name != name) {
      fail(ErrorKind::Incompatible, "checkpoint block '" + block_name + "' where '" + name + "' was expected");
    }
    const std::uint32_t rank = binio::read_u32(is, "checkpoint block rank");
    Shape shape(rank);
    for (auto& e : shape) e = binio::read_u32(is, "checkpoint block extent");
    if (shape != tensor.shape()) {
      fail(ErrorKind::Incompatible, "checkpoint block '" + name + "' has unexpected shape");
    }
    Tensor target = tensor;  // shared handle into the model
    binio::read_f64_span(is, target.values(), "checkpoint block payload");
  }
  model.set_train(false);
  return model;
}

STModel load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot open checkpoint: " + path);
  return load_checkpoint(is);
}

std::string serialize_state(const STModel& model) {
  std::ostringstream os(std::ios::binary);
  save_checkpoint(os, model);
  return os.str();
}

}  // namespace ima

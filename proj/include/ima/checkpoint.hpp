#pragma once

#include <iosfwd>
#include <string>

#include "ima/model.hpp"

namespace ima {

// Checkpoint container: magic "STMC", format version u32, config JSON
// (u32 length + bytes), then one block per state tensor: name (u32 length +
// bytes), extent count u32, extents u32[], payload as little-endian f64.

void save_checkpoint(std::ostream& os, const STModel& model);
void save_checkpoint(const std::string& path, const STModel& model);

// Loaded models start in eval mode.
STModel load_checkpoint(std::istream& is);
STModel load_checkpoint(const std::string& path);

// Checkpoint bytes in memory; used to compare model state bit for bit.
std::string serialize_state(const STModel& model);

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace ima

#pragma once

#include <string>
#include <vector>

#include "cf/trainer.hpp"

namespace cf {

// Plain `key = value` config files: one pair per line, `#` starts a
// comment, unknown keys are rejected by name. Overrides are `key=value`
// strings applied after the file.
PipelineConfig load_config(const std::string& path,
                           const std::vector<std::string>& overrides);

// Parse just the override list over the built-in defaults ("" path).
PipelineConfig default_config();

// Architecture strings: whitespace- or comma-separated tokens
//   conv:OUT[:K[:S[:P]]]  norm  relu  maxpool[:W]  avgpool[:W]
//   flatten  dense:UNITS
std::vector<LayerSpec> parse_arch(const std::string& text);
std::string arch_to_string(const std::vector<LayerSpec>& specs);

// "CxHxW" triple, e.g. "3x32x32".
InputShape parse_input_shape(const std::string& text);

}  // namespace cf

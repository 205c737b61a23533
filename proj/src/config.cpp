#include "cf/config.hpp"

#include <fstream>
#include <sstream>

#include "cf/error.hpp"

namespace cf {
namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string token;
  std::istringstream is(s);
  while (std::getline(is, token, sep)) out.push_back(token);
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t consumed = 0;
    const double v = std::stod(value, &consumed);
    if (consumed != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' expects a number, got '" + value + "'");
  }
}

long parse_long(const std::string& key, const std::string& value) {
  try {
    std::size_t consumed = 0;
    const long v = std::stol(value, &consumed);
    if (consumed != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' expects an integer, got '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError("key '" + key + "' expects a boolean, got '" + value + "'");
}

std::vector<double> parse_doubles(const std::string& key,
                                  const std::string& value) {
  std::vector<double> out;
  for (const std::string& part : split(value, ',')) {
    out.push_back(parse_double(key, trim(part)));
  }
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  const long v = parse_long(key, value);
  if (v < 0) throw ConfigError("key '" + key + "' must be >= 0");
  return static_cast<std::size_t>(v);
}

void apply_key(PipelineConfig& c, const std::string& key,
               const std::string& value) {
  if (key == "lambda") c.weights.lambda = parse_double(key, value);
  else if (key == "alpha") c.weights.alpha = parse_double(key, value);
  else if (key == "beta") c.weights.beta = parse_double(key, value);
  else if (key == "eta") c.weights.eta = parse_double(key, value);
  else if (key == "tau") c.weights.tau = parse_double(key, value);
  else if (key == "confidence_tau") c.confidence_tau = parse_double(key, value);
  else if (key == "prune_fraction") c.prune_fraction = parse_double(key, value);
  else if (key == "iterations_sparse") c.iterations_sparse = parse_long(key, value);
  else if (key == "iterations_finetune") c.iterations_finetune = parse_long(key, value);
  else if (key == "lr_sparse") c.lr_sparse = parse_double(key, value);
  else if (key == "lr_finetune") c.lr_finetune = parse_double(key, value);
  else if (key == "lr_discriminator") c.lr_discriminator = parse_double(key, value);
  else if (key == "lr_schedule") {
    if (value == "halves-drop-0.1") c.lr_schedule = LrSchedule::kHalvesDrop01;
    else if (value == "milestones-40-70-90-drop-0.3") c.lr_schedule = LrSchedule::kMilestonesDrop03;
    else throw ConfigError("unknown lr_schedule '" + value + "'");
  } else if (key == "momentum") c.momentum = parse_double(key, value);
  else if (key == "weight_decay") c.weight_decay = parse_double(key, value);
  else if (key == "batch_labeled") c.batch_labeled = parse_long(key, value);
  else if (key == "batch_unlabeled") c.batch_unlabeled = parse_long(key, value);
  else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_long(key, value));
  else if (key == "balance") c.balance = parse_double(key, value);
  else if (key == "distill_on_labeled") c.distill_on_labeled = parse_bool(key, value);
  else if (key == "literal_eq10_aligner") c.literal_eq10_aligner = parse_bool(key, value);
  else if (key == "confidence_weighting") c.confidence_weighting = parse_bool(key, value);
  else if (key == "adversarial") c.adversarial = parse_bool(key, value);
  else if (key == "rademacher") c.rademacher = parse_bool(key, value);
  else if (key == "finetune_supervision_only") c.finetune_supervision_only = parse_bool(key, value);
  else if (key == "augment") c.augment = parse_bool(key, value);
  else if (key == "eval_every") c.eval_every = parse_long(key, value);
  else if (key == "arch") c.arch = parse_arch(value);
  else if (key == "input_shape") c.input = parse_input_shape(value);
  else if (key == "classes") c.classes = static_cast<int>(parse_long(key, value));
  else if (key == "split_index") c.split_index = parse_long(key, value);
  else if (key == "teacher") c.teacher_path = value;
  else if (key == "metrics") c.metrics_path = value;
  else if (key == "synth_seed") c.synth.seed = static_cast<std::uint64_t>(parse_long(key, value));
  else if (key == "synth_labeled") c.synth.n_labeled = parse_size(key, value);
  else if (key == "synth_unlabeled") c.synth.n_unlabeled = parse_size(key, value);
  else if (key == "synth_test") c.synth.n_test = parse_size(key, value);
  else if (key == "bias_shift") c.synth.bias_shift = parse_double(key, value);
  else if (key == "junk_fraction") c.synth.junk_fraction = parse_double(key, value);
  else if (key == "norm_mode") {
    if (value != "auto" && value != "none" && value != "explicit") {
      throw ConfigError("norm_mode must be auto, none or explicit");
    }
    c.norm_mode = value;
  } else if (key == "norm_mean") c.norm_mean = parse_doubles(key, value);
  else if (key == "norm_std") c.norm_std = parse_doubles(key, value);
  else throw ConfigError("unknown config key '" + key + "'");
}

void apply_line(PipelineConfig& c, const std::string& raw_line,
                const std::string& where) {
  std::string line = raw_line;
  const auto hash = line.find('#');
  if (hash != std::string::npos) line = line.substr(0, hash);
  line = trim(line);
  if (line.empty()) return;
  const auto eq = line.find('=');
  if (eq == std::string::npos) {
    throw ConfigError(where + ": expected key = value, got '" + line + "'");
  }
  const std::string key = trim(line.substr(0, eq));
  const std::string value = trim(line.substr(eq + 1));
  if (key.empty()) throw ConfigError(where + ": empty key");
  apply_key(c, key, value);
}

}  // namespace

std::vector<LayerSpec> parse_arch(const std::string& text) {
  std::vector<LayerSpec> specs;
  std::string normalized = text;
  for (char& ch : normalized) {
    if (ch == ',') ch = ' ';
  }
  std::istringstream is(normalized);
  std::string token;
  while (is >> token) {
    const auto fields = split(token, ':');
    const std::string& kind = fields[0];
    auto field = [&](std::size_t i, std::size_t fallback) -> std::size_t {
      if (i >= fields.size()) return fallback;
      return parse_size("arch", fields[i]);
    };
    LayerSpec s;
    if (kind == "conv") {
      if (fields.size() < 2) throw ConfigError("conv needs a channel count");
      s.kind = LayerSpec::Kind::kConv;
      s.channels = field(1, 0);
      s.kernel = field(2, 3);
      s.stride = field(3, 1);
      s.padding = field(4, s.kernel / 2);
    } else if (kind == "norm") {
      s.kind = LayerSpec::Kind::kScaledNorm;
    } else if (kind == "relu") {
      s.kind = LayerSpec::Kind::kRelu;
    } else if (kind == "maxpool") {
      s.kind = LayerSpec::Kind::kMaxPool;
      s.window = field(1, 2);
    } else if (kind == "avgpool") {
      s.kind = LayerSpec::Kind::kAvgPool;
      s.window = field(1, 2);
    } else if (kind == "flatten") {
      s.kind = LayerSpec::Kind::kFlatten;
    } else if (kind == "dense") {
      if (fields.size() < 2) throw ConfigError("dense needs a unit count");
      s.kind = LayerSpec::Kind::kDense;
      s.channels = field(1, 0);
    } else {
      throw ConfigError("unknown arch token '" + token + "'");
    }
    specs.push_back(s);
  }
  if (specs.empty()) throw ConfigError("arch string is empty");
  return specs;
}

std::string arch_to_string(const std::vector<LayerSpec>& specs) {
  std::ostringstream os;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (i > 0) os << " ";
    const LayerSpec& s = specs[i];
    switch (s.kind) {
      case LayerSpec::Kind::kConv:
        os << "conv:" << s.channels << ":" << s.kernel << ":" << s.stride << ":"
           << s.padding;
        break;
      case LayerSpec::Kind::kDense: os << "dense:" << s.channels; break;
      case LayerSpec::Kind::kScaledNorm: os << "norm"; break;
      case LayerSpec::Kind::kRelu: os << "relu"; break;
      case LayerSpec::Kind::kMaxPool: os << "maxpool:" << s.window; break;
      case LayerSpec::Kind::kAvgPool: os << "avgpool:" << s.window; break;
      case LayerSpec::Kind::kFlatten: os << "flatten"; break;
    }
  }
  return os.str();
}

InputShape parse_input_shape(const std::string& text) {
  const auto parts = split(text, 'x');
  if (parts.size() != 3) {
    throw ConfigError("input_shape expects CxHxW, got '" + text + "'");
  }
  InputShape shape;
  shape.channels = parse_size("input_shape", parts[0]);
  shape.height = parse_size("input_shape", parts[1]);
  shape.width = parse_size("input_shape", parts[2]);
  if (shape.channels == 0 || shape.height == 0 || shape.width == 0) {
    throw ConfigError("input_shape dimensions must be positive");
  }
  return shape;
}

PipelineConfig load_config(const std::string& path,
                           const std::vector<std::string>& overrides) {
  PipelineConfig config;  // arch left empty until the class count is known
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      apply_line(config, line, path + ":" + std::to_string(line_no));
    }
  }
  for (const std::string& override_kv : overrides) {
    apply_line(config, override_kv, "override");
  }
  if (config.arch.empty()) {
    config.arch = parse_arch(
        "conv:8 norm relu maxpool conv:16 norm relu maxpool conv:32 norm relu "
        "maxpool flatten dense:" +
        std::to_string(config.classes));
  }
  validate(config);
  return config;
}

PipelineConfig default_config() { return load_config("", {}); }

}  // namespace cf

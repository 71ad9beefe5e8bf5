#pragma once

// Text checkpoints: a `dktlab-ckpt v1` header, then named sections holding
// full-precision decimal arrays. Text keeps checkpoints diff-able and
// portable; shortest round-trip formatting makes load(save(m)) bit-exact.

#include <charconv>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dkt/backbone.hpp"
#include "dkt/kernels.hpp"
#include "dkt/tasks.hpp"

namespace dkt {

struct Checkpoint {
  int version = 1;
  std::string experiment;  // sine-regression | synth-classification
  std::string method;      // dkt | feature-transfer
  std::string kernel_family;
  int feature_dim = 0;
  int mixtures = 4;
  std::vector<std::pair<std::string, Tensor>> kernel_arrays;
  bool has_backbone = false;
  MlpConfig backbone_config;
  std::vector<double> backbone_flat;
  std::vector<std::pair<std::string, std::string>> train_echo;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::string checkpoint_digest(std::uint64_t seed) {
  Rng rng = Rng::keyed(seed, rng_stream::kInit, 0xD16E57);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(rng.next_u64()));
  return std::string(buf);
}

inline void write_array(std::ostream& out, const std::string& name, int rows, int cols,
                        std::span<const double> values) {
  out << "array " << name << " " << rows << " " << cols;
  for (double v : values) out << " " << format_double(v);
  out << "\n";
}

}  // namespace detail

inline Checkpoint make_checkpoint(std::string experiment, std::string method,
                                  const KernelSpec* kernel, const Backbone* backbone,
                                  std::vector<std::pair<std::string, std::string>> train_echo,
                                  std::uint64_t seed) {
  Checkpoint ckpt;
  ckpt.experiment = std::move(experiment);
  ckpt.method = std::move(method);
  ckpt.train_echo = std::move(train_echo);
  ckpt.seed = seed;
  if (kernel) {
    ckpt.kernel_family = kernel_family_name(kernel->family);
    ckpt.feature_dim = kernel->feature_dim;
    ckpt.mixtures = kernel->mixtures;
    for (const auto& [name, tensor] : kernel->named_params())
      ckpt.kernel_arrays.emplace_back(name, tensor.detached());
  }
  if (backbone) {
    ckpt.has_backbone = true;
    ckpt.backbone_config = backbone->config;
    ckpt.backbone_flat = flatten_params(backbone->params);
  }
  return ckpt;
}

inline KernelSpec checkpoint_kernel(const Checkpoint& ckpt) {
  if (ckpt.kernel_family.empty())
    throw std::invalid_argument("checkpoint has no kernel section");
  KernelSpec spec = KernelSpec::make(kernel_family_from_name(ckpt.kernel_family),
                                     ckpt.feature_dim, ckpt.has_backbone, ckpt.mixtures);
  for (const auto& [name, tensor] : ckpt.kernel_arrays) {
    Tensor restored = tensor.clone(true);
    if (name == "raw_variance") spec.raw_variance = restored;
    else if (name == "raw_lengthscale") spec.raw_lengthscale = restored;
    else if (name == "offset") spec.offset = restored;
    else if (name == "raw_weights") spec.raw_weights = restored;
    else if (name == "raw_means") spec.raw_means = restored;
    else if (name == "raw_scales") spec.raw_scales = restored;
    else if (name == "raw_noise") spec.raw_noise = restored;
    else throw parse_error("unknown kernel array '" + name + "'");
  }
  return spec;
}

inline Backbone checkpoint_backbone(const Checkpoint& ckpt) {
  if (!ckpt.has_backbone) throw std::invalid_argument("checkpoint has no backbone section");
  return {ckpt.backbone_config, unflatten_params(ckpt.backbone_config, ckpt.backbone_flat)};
}

// ---------------------------------------------------------------------------
// save / load
// ---------------------------------------------------------------------------

inline void save_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out << "dktlab-ckpt v" << ckpt.version << "\n";
  out << "experiment " << ckpt.experiment << "\n";
  out << "method " << ckpt.method << "\n";
  if (!ckpt.kernel_family.empty()) {
    out << "section kernel\n";
    out << "family " << ckpt.kernel_family << "\n";
    out << "feature_dim " << ckpt.feature_dim << "\n";
    out << "mixtures " << ckpt.mixtures << "\n";
    for (const auto& [name, tensor] : ckpt.kernel_arrays)
      detail::write_array(out, name, tensor.rows(), tensor.cols(), tensor.values());
  }
  if (ckpt.has_backbone) {
    const MlpConfig& cfg = ckpt.backbone_config;
    out << "section backbone\n";
    out << "input_dim " << cfg.input_dim << "\n";
    out << "hidden";
    for (int h : cfg.hidden_dims) out << " " << h;
    out << "\n";
    out << "output_dim " << cfg.output_dim << "\n";
    out << "activation " << activation_name(cfg.activation) << "\n";
    detail::write_array(out, "weights", 1, static_cast<int>(ckpt.backbone_flat.size()),
                        ckpt.backbone_flat);
  }
  out << "section train\n";
  for (const auto& [key, value] : ckpt.train_echo) out << "set " << key << " " << value << "\n";
  out << "section rng\n";
  out << "seed " << ckpt.seed << "\n";
  out << "digest " << detail::checkpoint_digest(ckpt.seed) << "\n";
  out << "end\n";
}

inline Checkpoint load_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw parse_error("empty checkpoint file");
  if (line != "dktlab-ckpt v1") {
    if (line.rfind("dktlab-ckpt v", 0) == 0)
      throw parse_error("unsupported checkpoint version '" + line.substr(13) + "'");
    throw parse_error("not a dktlab checkpoint (bad magic line)");
  }
  Checkpoint ckpt;
  std::string section = "header";
  bool finished = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "end") {
      finished = true;
      break;
    }
    if (key == "section") {
      ls >> section;
      continue;
    }
    auto want = [&](const std::string& in_section) {
      if (section != in_section)
        throw parse_error("field '" + key + "' outside section " + in_section);
    };
    if (key == "experiment") want("header"), ls >> ckpt.experiment;
    else if (key == "method") want("header"), ls >> ckpt.method;
    else if (key == "family") want("kernel"), ls >> ckpt.kernel_family;
    else if (key == "feature_dim") want("kernel"), ls >> ckpt.feature_dim;
    else if (key == "mixtures") want("kernel"), ls >> ckpt.mixtures;
    else if (key == "input_dim") want("backbone"), ls >> ckpt.backbone_config.input_dim;
    else if (key == "hidden") {
      want("backbone");
      ckpt.backbone_config.hidden_dims.clear();
      int h;
      while (ls >> h) ckpt.backbone_config.hidden_dims.push_back(h);
    } else if (key == "output_dim") {
      want("backbone");
      ls >> ckpt.backbone_config.output_dim;
    } else if (key == "activation") {
      want("backbone");
      std::string a;
      ls >> a;
      ckpt.backbone_config.activation = activation_from_name(a);
    } else if (key == "set") {
      want("train");
      std::string k, v;
      ls >> k;
      std::getline(ls, v);
      if (!v.empty() && v[0] == ' ') v.erase(0, 1);
      ckpt.train_echo.emplace_back(k, v);
    } else if (key == "seed") {
      want("rng");
      ls >> ckpt.seed;
    } else if (key == "digest") {
      // provenance only; nothing to restore
    } else if (key == "array") {
      std::string name;
      int rows = 0, cols = 0;
      ls >> name >> rows >> cols;
      if (name.empty() || rows < 0 || cols < 0)
        throw parse_error("section " + section + ": malformed array header");
      const std::size_t expected = static_cast<std::size_t>(rows) * cols;
      std::vector<double> values;
      values.reserve(expected);
      std::string tok;
      while (values.size() < expected && ls >> tok) values.push_back(detail::parse_double(tok));
      if (values.size() != expected)
        throw parse_error("section " + section + ": array '" + name + "' expected " +
                          std::to_string(expected) + " values, got " +
                          std::to_string(values.size()) + " (truncated?)");
      if (section == "kernel") {
        ckpt.kernel_arrays.emplace_back(name, Tensor::from(rows, cols, std::move(values)));
      } else if (section == "backbone" && name == "weights") {
        ckpt.has_backbone = true;
        ckpt.backbone_flat = std::move(values);
      } else {
        throw parse_error("section " + section + ": unexpected array '" + name + "'");
      }
    } else {
      throw parse_error("section " + section + ": unknown field '" + key + "'");
    }
  }
  if (!finished) throw parse_error("checkpoint truncated: missing 'end' marker");
  return ckpt;
}

}  // namespace dkt

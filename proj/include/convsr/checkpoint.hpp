// Versioned binary container for model parameters:
//   "CVSRCKPT" | u32 version | u64 meta length | meta JSON |
//   u64 tensor count | per tensor: u64 name length, name, u64 count, f64[count]
// All integers and floats little-endian; values round-trip bit-exactly.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "convsr/params.hpp"

namespace convsr {

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, std::vector<double>>> tensors;

  void add(const std::string& name, std::span<const double> values);
  void add(const ParameterList& params);
  const std::vector<double>& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
  // Copies every tensor named in `params`; sizes must match.
  void restore(const ParameterList& params) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace convsr

#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "core/tensor.hpp"

namespace trompt {

// On-disk parameter bundle: a JSON header manifest followed by one flat
// blob of little-endian 32-bit floats, parameters in manifest order.
// The `meta` block carries whatever the producer wants next to the
// weights (model config, schema hash).
struct Checkpoint {
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<float> values;
  };
  std::vector<Entry> entries;
  nlohmann::json meta;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace trompt

#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mora/tensor.hpp"

namespace mora {

/// Ordered name → matrix map. Adapter entries are keyed
/// `mora.<block>.<projection>.{A,B_img,B_txt}` or `lora.<block>.<projection>.{A,B}`.
struct Checkpoint {
  std::vector<std::pair<std::string, Matrix>> entries;

  const Matrix* find(const std::string& name) const;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// Binary layout, little-endian:
///   "MORACKPT" u32 version=1 u64 count
///   count × { u32 name_len, name bytes, u64 rows, u64 cols, rows·cols f64 row-major }
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mora

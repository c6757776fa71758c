#pragma once

// Little-endian binary containers shared by checkpoints and corpus files.
//
// Parameter table ("RPPPARAM"):
//   magic[8] u32 version
//   u32 n_meta   { u32 len, key bytes, u32 len, value bytes } * n_meta
//   u32 n_param  { u32 len, name bytes, u32 rank, u64 dims[rank], f64 data[prod(dims)] } * n_param
//
// Array bundle ("RPPCORPS"):
//   magic[8] u32 version
//   u32 n_meta   (as above)
//   u32 n_array  { u32 len, name bytes, u64 count, i32 data[count] } * n_array

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rpp/tensor.hpp"

namespace rpp {

inline constexpr std::uint32_t kParamFileVersion = 1;
inline constexpr std::uint32_t kArrayFileVersion = 1;

struct ParamFile {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> params;

  // Throws kIo naming the missing key.
  const std::string& get(const std::string& key) const;
  const Tensor& param(const std::string& name) const;
};

struct ArrayFile {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, std::vector<int>>> arrays;

  const std::string& get(const std::string& key) const;
  const std::vector<int>& array(const std::string& name) const;
};

std::string serialize(const ParamFile& file);
ParamFile deserialize_params(const std::string& bytes);
std::string serialize(const ArrayFile& file);
ArrayFile deserialize_arrays(const std::string& bytes);

void write_file(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

void save_params(const std::string& path, const ParamFile& file);
ParamFile load_params(const std::string& path);
void save_arrays(const std::string& path, const ArrayFile& file);
ArrayFile load_arrays(const std::string& path);

// FNV-1a 64, hex encoded.
std::string content_hash(std::span<const char> bytes);
std::string content_hash(const std::string& bytes);
// Hash over values of a set of tensors (in the given order).
std::string tensors_hash(const std::vector<std::pair<std::string, Tensor>>& named);

// Copies values from `file` into same-named tensors; shapes must match.
void assign_params(const ParamFile& file, const std::vector<std::pair<std::string, Tensor>>& targets);

}  // namespace rpp

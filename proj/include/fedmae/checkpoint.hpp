#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "fedmae/layers.hpp"
#include "fedmae/mae.hpp"

namespace fedmae {

// Checkpoint file layout:
//
//   fedmae-checkpoint 1
//   <key>=<value>                              metadata, one per line
//   param <name> <ndim> <d0> ... <offset> <count>
//   ...
//   end
//   <blob>
//
// The blob is little-endian float32, one contiguous section per parameter in
// name order; offsets are bytes from the start of the blob. Values are
// rounded to float32 on save, so save -> load -> save is byte-identical.
struct Checkpoint {
  std::map<std::string, std::string> metadata;
  ParamStore params;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void save_mae(const std::filesystem::path& path, const MaeModel& model);
MaeModel load_mae(const std::filesystem::path& path);

// Metadata helpers shared by model-specific wrappers.
void put_geometry(std::map<std::string, std::string>& meta, const ImageGeometry& geo);
ImageGeometry get_geometry(const std::map<std::string, std::string>& meta);
std::size_t meta_size(const std::map<std::string, std::string>& meta, const std::string& key);

}  // namespace fedmae

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kil/perception.hpp"
#include "kil/worldsim.hpp"

namespace kil::io {

// Demonstration dataset on disk: metadata.json plus episodes.jsonl (one step
// per line: episode, t, proprio[7], action[10], kp_world[K][3], scene).
void save_demonstrations(const std::string& dir, const sim::TaskSpec& task,
                         const std::vector<sim::Demonstration>& demos,
                         std::uint64_t seed);

std::vector<sim::Demonstration> load_demonstrations(const std::string& dir,
                                                    const sim::TaskAssets& assets);

// Task name recorded in a dataset's metadata.json.
std::string dataset_task_name(const std::string& dir);

// FNV-1a over the file bytes.
std::uint64_t file_checksum(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

// Debug dump of a rendered field: flat row-major binaries (descriptors and
// depth as f64, visibility as i32) plus a JSON index describing dims, dtype
// and layout.
void dump_descriptor_field(const std::string& dir, int frame_index,
                           const percep::DescriptorField& field);

}  // namespace kil::io

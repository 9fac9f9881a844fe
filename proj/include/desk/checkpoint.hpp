#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "desk/nn.hpp"

namespace desk {

// Checkpoints are a JSON manifest (spec, seed, tensor names/shapes/offsets)
// referencing a sibling binary blob of little-endian doubles in declaration
// order (ascending layer index, weights then bias). load(save(p)) == p
// bit-exactly.

void save_network(const std::string& json_path, const NetworkSpec& spec,
                  const NetworkParams& params, uint64_t seed);

struct LoadedNetwork {
    NetworkSpec spec;
    NetworkParams params;
    uint64_t seed = 0;
};

LoadedNetwork load_network(const std::string& json_path);

// Blob-level helpers shared with the siamese checkpoint format.
namespace checkpoint_detail {

nlohmann::json manifest_entries(const NetworkParams& params, const std::string& part,
                                size_t& offset_bytes);
void append_blob(std::vector<char>& blob, const NetworkParams& params);
NetworkParams params_from_blob(const std::vector<char>& blob, const nlohmann::json& entries,
                               const std::string& part);
void write_file(const std::string& path, const std::vector<char>& bytes);
std::vector<char> read_file(const std::string& path);
std::string sibling_blob_path(const std::string& json_path);

}  // namespace checkpoint_detail

}  // namespace desk

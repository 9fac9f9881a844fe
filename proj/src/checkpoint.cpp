#include "desk/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts need byte swaps");

namespace desk {

using nlohmann::json;

namespace checkpoint_detail {

json manifest_entries(const NetworkParams& params, const std::string& part,
                      size_t& offset_bytes) {
    json entries = json::array();
    // weights then bias, ascending layer index
    for (const auto& [idx, lp] : params.layers) {
        entries.push_back(json{{"part", part},
                               {"layer", idx},
                               {"name", "w"},
                               {"shape", lp.w.shape()},
                               {"offset", offset_bytes}});
        offset_bytes += static_cast<size_t>(lp.w.size()) * sizeof(double);
        entries.push_back(json{{"part", part},
                               {"layer", idx},
                               {"name", "b"},
                               {"shape", lp.b.shape()},
                               {"offset", offset_bytes}});
        offset_bytes += static_cast<size_t>(lp.b.size()) * sizeof(double);
    }
    return entries;
}

void append_blob(std::vector<char>& blob, const NetworkParams& params) {
    auto append = [&blob](const Tensor& t) {
        const size_t bytes = static_cast<size_t>(t.size()) * sizeof(double);
        const size_t at = blob.size();
        blob.resize(at + bytes);
        std::memcpy(blob.data() + at, t.data(), bytes);
    };
    for (const auto& [idx, lp] : params.layers) {
        (void)idx;
        append(lp.w);
        append(lp.b);
    }
}

NetworkParams params_from_blob(const std::vector<char>& blob, const json& entries,
                               const std::string& part) {
    NetworkParams params;
    for (const auto& e : entries) {
        if (e.at("part").get<std::string>() != part) continue;
        const int layer = e.at("layer").get<int>();
        const auto shape = e.at("shape").get<std::vector<int>>();
        const size_t offset = e.at("offset").get<size_t>();
        Tensor t(shape);
        const size_t bytes = static_cast<size_t>(t.size()) * sizeof(double);
        if (offset + bytes > blob.size())
            throw DataError("checkpoint blob truncated: need " + std::to_string(offset + bytes) +
                            " bytes, have " + std::to_string(blob.size()));
        std::memcpy(t.data(), blob.data() + offset, bytes);
        auto& lp = params.layers[layer];
        if (e.at("name").get<std::string>() == "w")
            lp.w = std::move(t);
        else
            lp.b = std::move(t);
    }
    return params;
}

void write_file(const std::string& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + path);
}

std::vector<char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    in.seekg(0, std::ios::end);
    std::vector<char> bytes(static_cast<size_t>(in.tellg()));
    in.seekg(0);
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<size_t>(in.gcount()) != bytes.size()) throw DataError("short read of " + path);
    return bytes;
}

std::string sibling_blob_path(const std::string& json_path) {
    if (json_path.size() >= 5 && json_path.substr(json_path.size() - 5) == ".json")
        return json_path.substr(0, json_path.size() - 5) + ".bin";
    return json_path + ".bin";
}

}  // namespace checkpoint_detail

void save_network(const std::string& json_path, const NetworkSpec& spec,
                  const NetworkParams& params, uint64_t seed) {
    namespace cd = checkpoint_detail;
    const std::string blob_path = cd::sibling_blob_path(json_path);

    size_t offset = 0;
    json manifest{{"format", "desk-net"},
                  {"version", 1},
                  {"seed", seed},
                  {"spec", spec.to_json()},
                  {"blob", blob_path.substr(blob_path.find_last_of('/') + 1)},
                  {"tensors", cd::manifest_entries(params, "net", offset)}};

    std::vector<char> blob;
    blob.reserve(offset);
    cd::append_blob(blob, params);

    std::ofstream out(json_path);
    if (!out) throw DataError("cannot write " + json_path);
    out << manifest.dump(2) << "\n";
    cd::write_file(blob_path, blob);
}

LoadedNetwork load_network(const std::string& json_path) {
    namespace cd = checkpoint_detail;
    std::ifstream in(json_path);
    if (!in) throw DataError("cannot open " + json_path);
    json manifest;
    try {
        in >> manifest;
    } catch (const json::exception& e) {
        throw DataError("malformed checkpoint manifest " + json_path + ": " + e.what());
    }
    if (manifest.value("format", "") != "desk-net")
        throw DataError(json_path + " is not a network checkpoint");

    const std::string dir = json_path.find('/') == std::string::npos
                                ? ""
                                : json_path.substr(0, json_path.find_last_of('/') + 1);
    const std::vector<char> blob =
        cd::read_file(dir + manifest.at("blob").get<std::string>());

    LoadedNetwork net;
    net.spec = NetworkSpec::from_json(manifest.at("spec"));
    net.params = cd::params_from_blob(blob, manifest.at("tensors"), "net");
    net.seed = manifest.at("seed").get<uint64_t>();
    return net;
}

}  // namespace desk

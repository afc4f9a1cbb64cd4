#pragma once

// Named-tensor container file shared by checkpoints, image sidecars and
// feature exports.
//
// Layout (all integers little-endian):
//   bytes 0..7    magic "PMGTENS1"
//   bytes 8..15   uint64 header length N
//   next N bytes  UTF-8 JSON: {"tensors": [{"name", "shape", "offset"}, ...], "metadata": {...}}
//   remainder     float32 payload; "offset" counts bytes from payload start

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pmg/tensor.hpp"

namespace pmg {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct TensorFile {
    std::vector<NamedTensor> tensors;
    std::map<std::string, std::string> metadata;

    const Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const;
    void put(std::string name, Tensor tensor);
};

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path);

// Values round-tripped through the on-disk float32 representation.
Tensor round_to_float32(Tensor t);

}  // namespace pmg

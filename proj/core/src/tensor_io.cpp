#include "pmg/tensor_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "pmg/errors.hpp"

namespace pmg {
namespace {

constexpr char kMagic[8] = {'P', 'M', 'G', 'T', 'E', 'N', 'S', '1'};

static_assert(std::endian::native == std::endian::little,
              "tensor files are written with native little-endian layout");

void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

}  // namespace

const Tensor& TensorFile::get(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t.tensor;
    throw InputError("tensor file has no entry named '" + name + "'");
}

bool TensorFile::contains(const std::string& name) const {
    return std::any_of(tensors.begin(), tensors.end(),
                       [&](const NamedTensor& t) { return t.name == name; });
}

void TensorFile::put(std::string name, Tensor tensor) {
    for (auto& t : tensors) {
        if (t.name == name) {
            t.tensor = std::move(tensor);
            return;
        }
    }
    tensors.push_back({std::move(name), std::move(tensor)});
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
    nlohmann::json header;
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& t : file.tensors) {
        header["tensors"].push_back({{"name", t.name}, {"shape", t.tensor.shape}, {"offset", offset}});
        offset += t.tensor.size() * sizeof(float);
    }
    header["metadata"] = file.metadata;
    const std::string text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw InputError("cannot open '" + path.string() + "' for writing");
    os.write(kMagic, sizeof kMagic);
    write_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : file.tensors) {
        std::vector<float> buf(t.tensor.data.begin(), t.tensor.data.end());
        os.write(reinterpret_cast<const char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!os) throw InputError("failed writing '" + path.string() + "'");
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open tensor file '" + path.string() + "'");
    char magic[8];
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw InputError("'" + path.string() + "' is not a tensor file (bad magic)");
    const std::uint64_t header_len = read_u64(is);
    std::string text(header_len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(header_len));
    if (!is) throw InputError("'" + path.string() + "': truncated header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw InputError("'" + path.string() + "': malformed header: " + e.what());
    }
    std::vector<char> payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

    TensorFile file;
    if (header.contains("metadata"))
        file.metadata = header["metadata"].get<std::map<std::string, std::string>>();
    for (const auto& entry : header.at("tensors")) {
        Shape shape = entry.at("shape").get<Shape>();
        const auto offset = entry.at("offset").get<std::uint64_t>();
        Tensor t(shape);
        const std::size_t bytes = t.size() * sizeof(float);
        if (offset + bytes > payload.size())
            throw InputError("'" + path.string() + "': tensor '" +
                             entry.at("name").get<std::string>() + "' exceeds payload");
        std::vector<float> buf(t.size());
        std::memcpy(buf.data(), payload.data() + offset, bytes);
        std::copy(buf.begin(), buf.end(), t.data.begin());
        file.tensors.push_back({entry.at("name").get<std::string>(), std::move(t)});
    }
    return file;
}

Tensor round_to_float32(Tensor t) {
    for (double& v : t.data) v = static_cast<double>(static_cast<float>(v));
    return t;
}

}  // namespace pmg

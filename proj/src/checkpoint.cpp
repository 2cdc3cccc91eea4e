#include "crgan/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

#include "crgan/core.hpp"

namespace crgan {

namespace {

constexpr const char* kFormat = "crgan-checkpoint/1";

std::string file_name_for(const std::string& tensor_name)
{
    std::string out = tensor_name;
    for (char& c : out) {
        if (c == '/') {
            c = '.';
        }
    }
    return out + ".f32";
}

std::string shape_string(const torch::Tensor& t)
{
    if (t.dim() == 0) {
        return "-";
    }
    std::string s;
    for (int64_t d = 0; d < t.dim(); ++d) {
        if (d > 0) {
            s += 'x';
        }
        s += std::to_string(t.size(d));
    }
    return s;
}

std::vector<int64_t> parse_shape(const std::string& s)
{
    std::vector<int64_t> dims;
    if (s == "-") {
        return dims;
    }
    std::stringstream in(s);
    std::string part;
    while (std::getline(in, part, 'x')) {
        dims.push_back(std::stoll(part));
    }
    return dims;
}

void write_floats_le(const std::filesystem::path& path, const torch::Tensor& t)
{
    auto c = t.detach().to(torch::kFloat32).contiguous();
    const auto* p = c.data_ptr<float>();
    std::vector<unsigned char> bytes(static_cast<std::size_t>(c.numel()) * 4);
    for (int64_t i = 0; i < c.numel(); ++i) {
        std::uint32_t u = std::bit_cast<std::uint32_t>(p[i]);
        for (int b = 0; b < 4; ++b) {
            bytes[static_cast<std::size_t>(i) * 4 + b] = static_cast<unsigned char>((u >> (8 * b)) & 0xffu);
        }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
}

torch::Tensor read_floats_le(const std::filesystem::path& path, const std::vector<int64_t>& shape)
{
    int64_t n = 1;
    for (int64_t d : shape) {
        n *= d;
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("missing tensor file " + path.string());
    }
    std::vector<unsigned char> bytes(static_cast<std::size_t>(n) * 4);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()) || in.peek() != std::char_traits<char>::eof()) {
        throw ConfigError("tensor file " + path.string() + " does not match its recorded shape");
    }
    auto t = torch::empty(shape, torch::kFloat32);
    auto* p = t.data_ptr<float>();
    for (int64_t i = 0; i < n; ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) {
            u |= static_cast<std::uint32_t>(bytes[static_cast<std::size_t>(i) * 4 + b]) << (8 * b);
        }
        p[i] = std::bit_cast<float>(u);
    }
    return t;
}

} // namespace

std::string hex64(std::uint64_t value)
{
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << value;
    return os.str();
}

std::uint64_t parse_hex64(const std::string& text)
{
    return std::stoull(text, nullptr, 16);
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    std::ostringstream manifest;
    manifest << "format = " << kFormat << "\n";
    manifest << "step = " << checkpoint.step << "\n";
    manifest << "fingerprint = " << hex64(checkpoint.fingerprint) << "\n";
    for (const auto& [key, value] : checkpoint.meta) {
        manifest << "meta." << key << " = " << value << "\n";
    }
    for (const auto& [name, tensor] : checkpoint.tensors) {
        const auto file = file_name_for(name);
        write_floats_le(dir / file, tensor);
        manifest << "tensor." << name << " = " << file << " " << shape_string(tensor) << "\n";
    }
    std::ofstream out(dir / "manifest.txt", std::ios::trunc);
    out << manifest.str();
    if (!out) {
        throw std::runtime_error("cannot write checkpoint manifest in " + dir.string());
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& dir, std::optional<std::uint64_t> expected_fingerprint)
{
    std::ifstream in(dir / "manifest.txt");
    if (!in) {
        throw ConfigError("no checkpoint manifest in " + dir.string());
    }
    Checkpoint ckpt;
    bool format_ok = false;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) {
            throw ConfigError("malformed checkpoint manifest line: " + line);
        }
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 3);
        if (key == "format") {
            format_ok = value == kFormat;
        } else if (key == "step") {
            ckpt.step = std::stoll(value);
        } else if (key == "fingerprint") {
            ckpt.fingerprint = parse_hex64(value);
        } else if (key.starts_with("meta.")) {
            ckpt.meta[key.substr(5)] = value;
        } else if (key.starts_with("tensor.")) {
            const auto space = value.find(' ');
            if (space == std::string::npos) {
                throw ConfigError("malformed tensor entry: " + line);
            }
            ckpt.tensors[key.substr(7)] = read_floats_le(dir / value.substr(0, space), parse_shape(value.substr(space + 1)));
        } else {
            throw ConfigError("unknown checkpoint manifest key: " + key);
        }
    }
    if (!format_ok) {
        throw ConfigError("unrecognized checkpoint format in " + dir.string());
    }
    if (expected_fingerprint && *expected_fingerprint != ckpt.fingerprint) {
        throw ConfigError("checkpoint fingerprint " + hex64(ckpt.fingerprint) + " does not match config fingerprint "
                          + hex64(*expected_fingerprint));
    }
    return ckpt;
}

void store_module(Checkpoint& checkpoint, const std::string& prefix, const torch::nn::Module& module)
{
    for (const auto& item : module.named_parameters(true)) {
        checkpoint.tensors[prefix + "/" + item.key()] = item.value().detach().clone();
    }
}

void restore_module(const Checkpoint& checkpoint, const std::string& prefix, torch::nn::Module& module)
{
    torch::NoGradGuard no_grad;
    for (auto& item : module.named_parameters(true)) {
        const auto it = checkpoint.tensors.find(prefix + "/" + item.key());
        if (it == checkpoint.tensors.end()) {
            throw ConfigError("checkpoint lacks tensor " + prefix + "/" + item.key());
        }
        if (!it->second.sizes().equals(item.value().sizes())) {
            throw ConfigError("shape mismatch for " + prefix + "/" + item.key());
        }
        item.value().copy_(it->second);
    }
}

} // namespace crgan

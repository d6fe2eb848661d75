#include "pointrel/params.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace pointrel {

namespace {

constexpr char kMagic[4] = {'P', 'R', 'A', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_f64(std::string& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(out, bits);
}

struct Reader {
    std::ifstream in;
    std::string path;

    bool read_exact(char* dst, std::size_t n) {
        in.read(dst, static_cast<std::streamsize>(n));
        return static_cast<std::size_t>(in.gcount()) == n;
    }
    std::uint32_t u32() {
        unsigned char b[4];
        if (!read_exact(reinterpret_cast<char*>(b), 4))
            throw ConfigError(path + ": truncated parameter file");
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }
    std::uint64_t u64() {
        unsigned char b[8];
        if (!read_exact(reinterpret_cast<char*>(b), 8))
            throw ConfigError(path + ": truncated parameter file");
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    }
};

}  // namespace

TP ParameterStore::create(const std::string& name, std::vector<std::size_t> shape, bool track) {
    if (entries_.count(name))
        throw ContractError("ParameterStore: duplicate parameter name '" + name + "'");
    TP t = make_tensor(std::move(shape), track, name);
    entries_[name] = t;
    return t;
}

void ParameterStore::adopt(const std::string& name, const TP& t) {
    if (entries_.count(name))
        throw ContractError("ParameterStore: duplicate parameter name '" + name + "'");
    t->name = name;
    entries_[name] = t;
}

TP ParameterStore::get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("ParameterStore: unknown parameter '" + name + "'");
    return it->second;
}

std::vector<TP> ParameterStore::trainable() const {
    std::vector<TP> out;
    for (const auto& [name, t] : entries_)
        if (t->track) out.push_back(t);
    return out;
}

void ParameterStore::zero_grads() {
    for (auto& [name, t] : entries_)
        if (t->track) {
            t->ensure_grad();
            t->zero_grad();
        }
}

std::size_t ParameterStore::total_parameters() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_)
        if (t->track) n += t->numel();
    return n;
}

void ParameterStore::save(const std::string& path) const {
    std::string buf;
    buf.append(kMagic, 4);
    put_u32(buf, kVersion);
    for (const auto& [name, t] : entries_) {
        put_u32(buf, static_cast<std::uint32_t>(name.size()));
        buf.append(name);
        put_u32(buf, static_cast<std::uint32_t>(t->shape.size()));
        for (std::size_t e : t->shape) put_u64(buf, e);
        for (double d : t->v) put_f64(buf, d);
    }
    atomic_write_text(path, buf);
}

ParameterStore ParameterStore::read(const std::string& path) {
    Reader r;
    r.path = path;
    r.in.open(path, std::ios::binary);
    if (!r.in) throw ConfigError("cannot open parameter file: " + path);
    char magic[4];
    if (!r.read_exact(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw ConfigError(path + ": not a parameter file (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw ConfigError(path + ": unsupported parameter-file version " + std::to_string(version));

    ParameterStore store;
    while (true) {
        // Peek one byte to detect a clean EOF between entries.
        const int c = r.in.peek();
        if (c == std::char_traits<char>::eof()) break;
        const std::uint32_t name_len = r.u32();
        std::string name(name_len, '\0');
        if (!r.read_exact(name.data(), name_len))
            throw ConfigError(path + ": truncated parameter name");
        const std::uint32_t rank = r.u32();
        if (rank == 0 || rank > 8) throw ConfigError(path + ": implausible rank for '" + name + "'");
        std::vector<std::size_t> shape(rank);
        std::size_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            shape[i] = static_cast<std::size_t>(r.u64());
            numel *= shape[i];
        }
        std::vector<double> values(numel);
        for (std::size_t i = 0; i < numel; ++i) values[i] = r.f64();
        store.adopt(name, make_tensor(shape, std::move(values), false, name));
    }
    return store;
}

void ParameterStore::load(const std::string& path) {
    ParameterStore file = read(path);
    for (const auto& [name, t] : entries_) {
        auto it = file.entries_.find(name);
        if (it == file.entries_.end())
            throw ConfigError(path + ": checkpoint is missing parameter '" + name + "'");
        if (it->second->shape != t->shape) {
            std::ostringstream os;
            os << path << ": shape mismatch for '" << name << "'";
            throw ConfigError(os.str());
        }
        t->v = it->second->v;
    }
    for (const auto& [name, t] : file.entries_)
        if (!entries_.count(name))
            throw ConfigError(path + ": checkpoint has unknown parameter '" + name + "'");
}

}  // namespace pointrel

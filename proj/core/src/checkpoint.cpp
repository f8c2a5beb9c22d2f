#include "gka/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

#include "gka/errors.hpp"

namespace gka {

namespace {

constexpr char kMagic[] = "GKACKPT1";

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

template <typename T>
const char* dtype_name() {
    return sizeof(T) == 8 ? "f64" : "f32";
}

const char* kind_name(ParamKind k) {
    switch (k) {
        case ParamKind::weight: return "weight";
        case ParamKind::bias: return "bias";
        case ParamKind::norm: return "norm";
        case ParamKind::log_sigma: return "log_sigma";
        case ParamKind::position: return "position";
        case ParamKind::cls: return "cls";
        case ParamKind::embedding: return "embedding";
    }
    return "weight";
}

struct Entry {
    std::string dtype;
    Shape shape;
    std::size_t offset = 0;  // bytes from the start of the data section
};

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model,
                     const std::map<std::string, std::string>& meta) {
    std::ostringstream index;
    index << "version " << kCheckpointVersion << '\n';
    std::istringstream cfg(format_config(model.config));
    for (std::string line; std::getline(cfg, line);) index << "config " << line << '\n';
    for (const auto& [k, v] : meta) {
        if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
            throw InputError("checkpoint metadata keys may not contain spaces or newlines: '" + k + "'");
        }
        index << "meta " << k << ' ' << v << '\n';
    }
    std::size_t offset = 0;
    visit_params(model, [&](const std::string& name, const Tensor<T>& t, ParamKind kind) {
        index << "tensor " << name << ' ' << kind_name(kind) << ' ' << dtype_name<T>() << ' ' << offset << ' '
              << t.rank();
        for (std::size_t d : t.shape()) index << ' ' << d;
        index << '\n';
        offset += t.size() * sizeof(T);
    });
    const std::string text = index.str();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot write checkpoint " + path.string());
    f.write(kMagic, 8);
    const std::uint64_t len = text.size();
    f.write(reinterpret_cast<const char*>(&len), sizeof len);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    visit_params(model, [&](const std::string&, const Tensor<T>& t, ParamKind) {
        f.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    });
    if (!f) throw InputError("failed writing checkpoint " + path.string());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("checkpoint not found: " + path.string());
    const std::string where = "checkpoint " + path.string() + ": ";
    char magic[8];
    std::uint64_t len = 0;
    if (!f.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw InputError(where + "bad magic");
    if (!f.read(reinterpret_cast<char*>(&len), sizeof len) || len > (1u << 30)) {
        throw InputError(where + "bad index length");
    }
    std::string text(len, '\0');
    if (!f.read(text.data(), static_cast<std::streamsize>(len))) throw InputError(where + "truncated index");
    const std::streamoff data_start = f.tellg();

    std::string config_text;
    std::map<std::string, Entry> entries;
    Checkpoint<T> ck;
    int version = -1;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "version") {
            ls >> version;
        } else if (tag == "config") {
            config_text += line.substr(std::min(line.size(), std::size_t{7})) + '\n';
        } else if (tag == "meta") {
            std::string k, v;
            ls >> k;
            std::getline(ls >> std::ws, v);
            ck.meta[k] = v;
        } else if (tag == "tensor") {
            std::string name, kind;
            Entry e;
            std::size_t rank = 0;
            ls >> name >> kind >> e.dtype >> e.offset >> rank;
            e.shape.resize(rank);
            for (auto& d : e.shape) ls >> d;
            if (!ls || (e.dtype != "f32" && e.dtype != "f64")) throw InputError(where + "bad tensor line '" + line + "'");
            entries[name] = std::move(e);
        } else if (!tag.empty()) {
            throw InputError(where + "unknown index line '" + line + "'");
        }
    }
    if (version != kCheckpointVersion) {
        throw InputError(where + "unsupported version " + std::to_string(version));
    }
    ck.model = init_model<T>(parse_config(config_text), 0);

    std::size_t found = 0;
    visit_params(ck.model, [&](const std::string& name, Tensor<T>& t, ParamKind) {
        auto it = entries.find(name);
        if (it == entries.end()) throw InputError(where + "missing tensor '" + name + "'");
        const Entry& e = it->second;
        if (e.shape != t.shape()) {
            throw InputError(where + "tensor '" + name + "' has shape " + shape_str(e.shape) + ", expected " +
                             shape_str(t.shape()));
        }
        f.seekg(data_start + static_cast<std::streamoff>(e.offset));
        if (e.dtype == "f64") {
            std::vector<double> buf(t.size());
            if (!f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 8))) {
                throw InputError(where + "truncated data for '" + name + "'");
            }
            for (std::size_t i = 0; i < buf.size(); ++i) t[i] = static_cast<T>(buf[i]);
        } else {
            std::vector<float> buf(t.size());
            if (!f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4))) {
                throw InputError(where + "truncated data for '" + name + "'");
            }
            for (std::size_t i = 0; i < buf.size(); ++i) t[i] = static_cast<T>(buf[i]);
        }
        ++found;
    });
    if (found != entries.size()) throw InputError(where + "contains tensors the model does not have");
    return ck;
}

template void save_checkpoint(const std::filesystem::path&, const Model<float>&,
                              const std::map<std::string, std::string>&);
template void save_checkpoint(const std::filesystem::path&, const Model<double>&,
                              const std::map<std::string, std::string>&);
template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace gka

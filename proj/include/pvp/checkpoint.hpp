#pragma once

// Checkpoint container:
//   8 bytes  magic "PVPCKPT\0"
//   u32      header length N
//   N bytes  JSON header {format_version, config, digest, tensors:[{name, shape}]}
//   float32 little-endian tensors in declared order
// The digest is sha-256 over the tensor bytes.

#include <filesystem>
#include <string>

#include "pvp/model.hpp"

namespace pvp {

inline constexpr std::string_view kCheckpointMagic{"PVPCKPT\0", 8};
inline constexpr int kCheckpointVersion = 1;

inline std::string checkpoint_bytes(const Params<float>& p) {
    std::string tensors;
    tensors.reserve(p.data.size() * 4);
    put_f32s(tensors, p.data);
    json shapes = json::array();
    for (const auto& t : p.layout.tensors) {
        shapes.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}});
    }
    const json header{{"format_version", kCheckpointVersion},
                      {"config", p.config},
                      {"digest", sha256_hex(tensors)},
                      {"tensors", shapes}};
    const std::string h = header.dump();
    std::string out(kCheckpointMagic);
    put_u32(out, static_cast<std::uint32_t>(h.size()));
    out += h;
    out += tensors;
    return out;
}

inline void checkpoint_save(const Params<float>& p, const std::filesystem::path& path) {
    write_file_atomic(path, checkpoint_bytes(p));
}

inline Params<float> checkpoint_from_bytes(std::string_view bytes, const std::string& what) {
    ByteReader r(bytes, what);
    require(r.take(kCheckpointMagic.size()) == kCheckpointMagic, ErrorKind::load, what + ": not a checkpoint file");
    const auto hlen = r.u32();
    json header;
    ModelConfig cfg;
    try {
        header = json::parse(r.take(hlen));
        require(header.at("format_version").get<int>() == kCheckpointVersion, ErrorKind::load,
                what + ": unsupported checkpoint version");
        header.at("config").get_to(cfg);
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        fail(ErrorKind::load, what + ": bad header: " + e.what());
    }
    validate(cfg);
    Params<float> p(cfg);
    const auto& shapes = header.at("tensors");
    require(shapes.size() == p.layout.tensors.size(), ErrorKind::load, what + ": tensor list does not match config");
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        const auto& t = p.layout.tensors[i];
        require(shapes[i].at("name").get<std::string>() == t.name &&
                    shapes[i].at("shape") == json({t.rows, t.cols}),
                ErrorKind::load, what + ": tensor " + t.name + " has unexpected name or shape");
    }
    require(r.remaining() == p.data.size() * 4, ErrorKind::load,
            what + ": expected " + std::to_string(p.data.size() * 4) + " tensor bytes, found " +
                std::to_string(r.remaining()));
    const auto tensor_bytes = bytes.substr(bytes.size() - r.remaining());
    const auto digest = sha256_hex(tensor_bytes);
    require(digest == header.at("digest").get<std::string>(), ErrorKind::integrity,
            what + ": parameter digest mismatch");
    r.f32s(p.data);
    return p;
}

inline Params<float> checkpoint_load(const std::filesystem::path& path) {
    return checkpoint_from_bytes(read_file(path), path.string());
}

}  // namespace pvp

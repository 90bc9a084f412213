#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mesh4d/autograd.hpp"
#include "mesh4d/common.hpp"
#include "mesh4d/mesh.hpp"
#include "mesh4d/skeleton.hpp"
#include "mesh4d/tensor.hpp"

namespace mesh4d {

namespace io_detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    MESH4D_CHECK(static_cast<bool>(is), "truncated file while reading " + what);
    return v;
}

inline void write_f32(std::ostream& os, double v) { write_pod<float>(os, static_cast<float>(v)); }

}  // namespace io_detail

// ---------------------------------------------------------------------------
// .m4ds mesh-sequence container
// ---------------------------------------------------------------------------

struct M4dsContent {
    MeshSequence sequence;
    bool has_skeleton = false;
    Skeleton skeleton;               // padded to kDefaultMaxBones in memory
    SkinningWeights vertex_weights;  // per vertex, padded
};

// Little-endian binary container: magic "M4DS", version, T, N_v, N_f, flags
// (bit 0 = skeleton present); faces; T vertex blocks (f32); optionally B,
// T blocks of Bx6 bone endpoints and N_v x B skinning weights.
inline void write_m4ds(const std::string& path, const MeshSequence& seq, const Skeleton* skeleton = nullptr,
                       const SkinningWeights* weights = nullptr) {
    seq.validate();
    MESH4D_CHECK((skeleton == nullptr) == (weights == nullptr), "write_m4ds: skeleton and weights travel together");
    std::ofstream os(path, std::ios::binary);
    MESH4D_CHECK(static_cast<bool>(os), "write_m4ds: cannot open " + path);
    os.write("M4DS", 4);
    io_detail::write_pod<uint32_t>(os, 1);
    io_detail::write_pod<uint32_t>(os, static_cast<uint32_t>(seq.frame_count()));
    io_detail::write_pod<uint32_t>(os, static_cast<uint32_t>(seq.vertex_count()));
    io_detail::write_pod<uint32_t>(os, static_cast<uint32_t>(seq.faces.size()));
    io_detail::write_pod<uint32_t>(os, skeleton ? 1u : 0u);
    for (const Face& f : seq.faces)
        for (uint32_t idx : f) io_detail::write_pod<uint32_t>(os, idx);
    for (const auto& frame : seq.frames)
        for (const Vec3& v : frame) {
            io_detail::write_f32(os, v.x);
            io_detail::write_f32(os, v.y);
            io_detail::write_f32(os, v.z);
        }
    if (skeleton) {
        skeleton->validate();
        MESH4D_CHECK(skeleton->frame_count() == seq.frame_count(), "write_m4ds: skeleton frame count mismatch");
        MESH4D_CHECK(weights->count() == seq.vertex_count(), "write_m4ds: weight row count mismatch");
        const uint32_t B = static_cast<uint32_t>(skeleton->active_bones);
        io_detail::write_pod<uint32_t>(os, B);
        for (std::size_t t = 0; t < skeleton->frame_count(); ++t)
            for (uint32_t b = 0; b < B; ++b) {
                io_detail::write_f32(os, skeleton->heads[t][b].x);
                io_detail::write_f32(os, skeleton->heads[t][b].y);
                io_detail::write_f32(os, skeleton->heads[t][b].z);
                io_detail::write_f32(os, skeleton->tails[t][b].x);
                io_detail::write_f32(os, skeleton->tails[t][b].y);
                io_detail::write_f32(os, skeleton->tails[t][b].z);
            }
        for (const auto& row : weights->weights)
            for (uint32_t b = 0; b < B; ++b) io_detail::write_f32(os, row[b]);
    }
    MESH4D_CHECK(static_cast<bool>(os), "write_m4ds: write failed for " + path);
}

inline M4dsContent read_m4ds(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    MESH4D_CHECK(static_cast<bool>(is), "read_m4ds: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    MESH4D_CHECK(static_cast<bool>(is) && std::memcmp(magic, "M4DS", 4) == 0, "read_m4ds: bad magic in " + path);
    const uint32_t version = io_detail::read_pod<uint32_t>(is, "version");
    MESH4D_CHECK(version == 1, "read_m4ds: unsupported version in " + path);
    const uint32_t T = io_detail::read_pod<uint32_t>(is, "frame count");
    const uint32_t Nv = io_detail::read_pod<uint32_t>(is, "vertex count");
    const uint32_t Nf = io_detail::read_pod<uint32_t>(is, "face count");
    const uint32_t flags = io_detail::read_pod<uint32_t>(is, "flags");

    M4dsContent c;
    c.sequence.faces.resize(Nf);
    for (Face& f : c.sequence.faces)
        for (uint32_t& idx : f) idx = io_detail::read_pod<uint32_t>(is, "face index");
    c.sequence.frames.assign(T, std::vector<Vec3>(Nv));
    for (auto& frame : c.sequence.frames)
        for (Vec3& v : frame) {
            v.x = io_detail::read_pod<float>(is, "vertex");
            v.y = io_detail::read_pod<float>(is, "vertex");
            v.z = io_detail::read_pod<float>(is, "vertex");
        }
    if (flags & 1u) {
        c.has_skeleton = true;
        const uint32_t B = io_detail::read_pod<uint32_t>(is, "bone count");
        MESH4D_CHECK(B <= kDefaultMaxBones, "read_m4ds: bone count exceeds padding limit");
        c.skeleton.active_bones = B;
        c.skeleton.heads.assign(T, std::vector<Vec3>(kDefaultMaxBones));
        c.skeleton.tails.assign(T, std::vector<Vec3>(kDefaultMaxBones));
        for (uint32_t t = 0; t < T; ++t)
            for (uint32_t b = 0; b < B; ++b) {
                c.skeleton.heads[t][b].x = io_detail::read_pod<float>(is, "bone");
                c.skeleton.heads[t][b].y = io_detail::read_pod<float>(is, "bone");
                c.skeleton.heads[t][b].z = io_detail::read_pod<float>(is, "bone");
                c.skeleton.tails[t][b].x = io_detail::read_pod<float>(is, "bone");
                c.skeleton.tails[t][b].y = io_detail::read_pod<float>(is, "bone");
                c.skeleton.tails[t][b].z = io_detail::read_pod<float>(is, "bone");
            }
        c.vertex_weights.weights.assign(Nv, std::vector<double>(kDefaultMaxBones, 0.0));
        for (uint32_t v = 0; v < Nv; ++v)
            for (uint32_t b = 0; b < B; ++b)
                c.vertex_weights.weights[v][b] = io_detail::read_pod<float>(is, "skinning weight");
    }
    c.sequence.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Wavefront OBJ directory with JSON manifest
// ---------------------------------------------------------------------------

inline void write_obj_sequence(const std::string& dir, const MeshSequence& seq, double fps = 24.0) {
    seq.validate();
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["fps"] = fps;
    manifest["frames"] = nlohmann::json::array();
    for (std::size_t t = 0; t < seq.frame_count(); ++t) {
        std::ostringstream name;
        name << "frame_" << std::setw(4) << std::setfill('0') << t << ".obj";
        manifest["frames"].push_back(name.str());
        std::ofstream os(std::filesystem::path(dir) / name.str());
        MESH4D_CHECK(static_cast<bool>(os), "write_obj_sequence: cannot open frame file");
        os << std::setprecision(9);
        for (const Vec3& v : seq.frames[t]) os << "v " << v.x << " " << v.y << " " << v.z << "\n";
        for (const Face& f : seq.faces) os << "f " << f[0] + 1 << " " << f[1] + 1 << " " << f[2] + 1 << "\n";
    }
    std::ofstream ms(std::filesystem::path(dir) / "manifest.json");
    ms << manifest.dump(2) << "\n";
}

inline MeshSequence read_obj_sequence(const std::string& dir) {
    std::ifstream ms(std::filesystem::path(dir) / "manifest.json");
    MESH4D_CHECK(static_cast<bool>(ms), "read_obj_sequence: missing manifest.json in " + dir);
    nlohmann::json manifest = nlohmann::json::parse(ms);
    MeshSequence seq;
    for (const auto& frame_name : manifest.at("frames")) {
        std::ifstream is(std::filesystem::path(dir) / frame_name.get<std::string>());
        MESH4D_CHECK(static_cast<bool>(is), "read_obj_sequence: missing frame file");
        std::vector<Vec3> verts;
        std::vector<Face> faces;
        std::string line;
        while (std::getline(is, line)) {
            std::istringstream ls(line);
            std::string tag;
            ls >> tag;
            if (tag == "v") {
                Vec3 v;
                ls >> v.x >> v.y >> v.z;
                verts.push_back(v);
            } else if (tag == "f") {
                Face f;
                for (int k = 0; k < 3; ++k) {
                    std::string tok;
                    ls >> tok;
                    f[k] = static_cast<uint32_t>(std::stoul(tok.substr(0, tok.find('/')))) - 1;
                }
                faces.push_back(f);
            }
        }
        if (seq.frames.empty()) seq.faces = faces;
        seq.frames.push_back(std::move(verts));
    }
    seq.validate();
    return seq;
}

// ---------------------------------------------------------------------------
// PGM (P5) binary images
// ---------------------------------------------------------------------------

inline void write_pgm(const std::string& path, const std::vector<uint8_t>& img, std::size_t resolution) {
    MESH4D_CHECK(img.size() == resolution * resolution, "write_pgm: size mismatch");
    std::ofstream os(path, std::ios::binary);
    MESH4D_CHECK(static_cast<bool>(os), "write_pgm: cannot open " + path);
    os << "P5\n" << resolution << " " << resolution << "\n255\n";
    for (uint8_t p : img) os.put(p ? static_cast<char>(255) : 0);
}

// Returns a binary silhouette (threshold at 128) plus its resolution.
inline std::pair<std::vector<uint8_t>, std::size_t> read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    MESH4D_CHECK(static_cast<bool>(is), "read_pgm: cannot open " + path);
    std::string magic;
    is >> magic;
    MESH4D_CHECK(magic == "P5", "read_pgm: not a binary PGM: " + path);
    std::size_t w = 0, h = 0;
    int maxval = 0;
    is >> w >> h >> maxval;
    MESH4D_CHECK(w == h && w > 0, "read_pgm: image must be square: " + path);
    MESH4D_CHECK(maxval > 0 && maxval < 256, "read_pgm: unsupported maxval");
    is.get();
    std::vector<uint8_t> img(w * h);
    is.read(reinterpret_cast<char*>(img.data()), static_cast<std::streamsize>(img.size()));
    MESH4D_CHECK(static_cast<bool>(is), "read_pgm: truncated " + path);
    for (uint8_t& p : img) p = p >= 128 ? 1 : 0;
    return {std::move(img), w};
}

// ---------------------------------------------------------------------------
// Deformation latent file
// ---------------------------------------------------------------------------

struct DeformationLatent {
    DenseArray<double> mean;          // (T*N) x c_o
    DenseArray<double> log_variance;  // (T*N) x c_o
    DenseArray<double> sample;        // (T*N) x c_o
    DenseArray<double> fps_positions;  // N x 3, frame-1 surface points
    std::size_t T = 0, N = 0, c_o = 0;
};

inline void write_latent(const std::string& path, const DeformationLatent& latent) {
    std::ofstream os(path, std::ios::binary);
    MESH4D_CHECK(static_cast<bool>(os), "write_latent: cannot open " + path);
    os.write("M4DL", 4);
    io_detail::write_pod<uint32_t>(os, 1);
    io_detail::write_pod<uint32_t>(os, static_cast<uint32_t>(latent.T));
    io_detail::write_pod<uint32_t>(os, static_cast<uint32_t>(latent.N));
    io_detail::write_pod<uint32_t>(os, static_cast<uint32_t>(latent.c_o));
    for (const DenseArray<double>* a : {&latent.mean, &latent.log_variance, &latent.sample, &latent.fps_positions})
        for (double x : a->v) io_detail::write_pod<double>(os, x);
    nlohmann::json sidecar;
    sidecar["T"] = latent.T;
    sidecar["N"] = latent.N;
    sidecar["c_o"] = latent.c_o;
    sidecar["dtype"] = "f64";
    std::ofstream js(path + ".json");
    js << sidecar.dump(2) << "\n";
}

inline DeformationLatent read_latent(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    MESH4D_CHECK(static_cast<bool>(is), "read_latent: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    MESH4D_CHECK(static_cast<bool>(is) && std::memcmp(magic, "M4DL", 4) == 0, "read_latent: bad magic in " + path);
    MESH4D_CHECK(io_detail::read_pod<uint32_t>(is, "version") == 1, "read_latent: unsupported version");
    DeformationLatent l;
    l.T = io_detail::read_pod<uint32_t>(is, "T");
    l.N = io_detail::read_pod<uint32_t>(is, "N");
    l.c_o = io_detail::read_pod<uint32_t>(is, "c_o");
    l.mean = DenseArray<double>({l.T * l.N, l.c_o});
    l.log_variance = DenseArray<double>({l.T * l.N, l.c_o});
    l.sample = DenseArray<double>({l.T * l.N, l.c_o});
    l.fps_positions = DenseArray<double>({l.N, 3});
    for (DenseArray<double>* a : {&l.mean, &l.log_variance, &l.sample, &l.fps_positions})
        for (double& x : a->v) x = io_detail::read_pod<double>(is, "latent payload");
    return l;
}

// ---------------------------------------------------------------------------
// Parameter checkpoints: flat binary blob + JSON index
// ---------------------------------------------------------------------------

template <typename T>
void save_checkpoint(const std::string& path, const ParameterSet<T>& ps,
                     const nlohmann::json& extra = nlohmann::json::object()) {
    std::ofstream os(path, std::ios::binary);
    MESH4D_CHECK(static_cast<bool>(os), "save_checkpoint: cannot open " + path);
    nlohmann::json index;
    index["version"] = 1;
    index["dtype"] = sizeof(T) == 4 ? "f32" : "f64";
    index["step"] = ps.step;
    index["extra"] = extra;
    index["params"] = nlohmann::json::object();
    uint64_t offset = 0;
    auto dump = [&](const std::string& name, const DenseArray<T>& a) {
        nlohmann::json rec;
        rec["offset"] = offset;
        rec["shape"] = a.shape;
        index["params"][name] = rec;
        os.write(reinterpret_cast<const char*>(a.v.data()), static_cast<std::streamsize>(a.v.size() * sizeof(T)));
        offset += a.v.size() * sizeof(T);
    };
    for (const auto& [name, e] : ps.entries) {
        dump(name, e.value);
        dump("adam_m/" + name, e.m);
        dump("adam_v/" + name, e.v);
    }
    MESH4D_CHECK(static_cast<bool>(os), "save_checkpoint: write failed for " + path);
    std::ofstream js(path + ".json");
    js << index.dump(2) << "\n";
}

template <typename T>
ParameterSet<T> load_checkpoint(const std::string& path) {
    std::ifstream js(path + ".json");
    MESH4D_CHECK(static_cast<bool>(js), "load_checkpoint: missing index " + path + ".json");
    nlohmann::json index = nlohmann::json::parse(js);
    MESH4D_CHECK(index.at("version") == 1, "load_checkpoint: unsupported version in " + path);
    const std::string dtype = index.at("dtype");
    const std::size_t word = dtype == "f32" ? 4 : 8;
    std::ifstream is(path, std::ios::binary);
    MESH4D_CHECK(static_cast<bool>(is), "load_checkpoint: cannot open " + path);

    ParameterSet<T> ps;
    ps.step = index.at("step").get<int64_t>();
    auto read_array = [&](const nlohmann::json& rec) {
        std::vector<std::size_t> shape = rec.at("shape").get<std::vector<std::size_t>>();
        DenseArray<T> a(shape);
        is.seekg(static_cast<std::streamoff>(rec.at("offset").get<uint64_t>()));
        for (auto& x : a.v) {
            if (word == 4)
                x = static_cast<T>(io_detail::read_pod<float>(is, "checkpoint payload"));
            else
                x = static_cast<T>(io_detail::read_pod<double>(is, "checkpoint payload"));
        }
        return a;
    };
    for (auto& [name, rec] : index.at("params").items()) {
        if (name.rfind("adam_m/", 0) == 0 || name.rfind("adam_v/", 0) == 0) continue;
        typename ParameterSet<T>::Entry e;
        e.value = read_array(rec);
        e.m = read_array(index.at("params").at("adam_m/" + name));
        e.v = read_array(index.at("params").at("adam_v/" + name));
        ps.entries.emplace(name, std::move(e));
    }
    return ps;
}

inline nlohmann::json checkpoint_extra(const std::string& path) {
    std::ifstream js(path + ".json");
    MESH4D_CHECK(static_cast<bool>(js), "checkpoint_extra: missing index " + path + ".json");
    nlohmann::json index = nlohmann::json::parse(js);
    return index.value("extra", nlohmann::json::object());
}

// ---------------------------------------------------------------------------
// Misc: key-value config files, file hashing
// ---------------------------------------------------------------------------

inline std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::ifstream is(path);
    MESH4D_CHECK(static_cast<bool>(is), "parse_config_file: cannot open " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(is, line)) {
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (!key.empty()) kv[key] = value;
    }
    return kv;
}

inline uint64_t hash_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    MESH4D_CHECK(static_cast<bool>(is), "hash_file: cannot open " + path);
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[4096];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        for (std::streamsize i = 0; i < is.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
        if (!is) break;
    }
    return h;
}

}  // namespace mesh4d

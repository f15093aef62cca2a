// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#include "voxfuse/training.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <iterator>
#include <sstream>

namespace voxfuse {

namespace {

constexpr char kMagic[4] = {'V', 'X', 'F', 'U'};
constexpr char kGridMagic[4] = {'V', 'X', 'G', 'R'};

std::uint64_t fnv1a64(const std::uint8_t *data, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Writer {
  public:
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string &s) {
        u64(s.size());
        bytes.insert(bytes.end(), s.begin(), s.end());
    }
    void raw(const std::vector<std::uint8_t> &b) { bytes.insert(bytes.end(), b.begin(), b.end()); }
    void tensor(const Tensor &t) {
        u32(static_cast<std::uint32_t>(t.rows));
        u32(static_cast<std::uint32_t>(t.cols));
        for (double v : t.data) {
            f64(v);
        }
    }
    void tensor_map(const std::map<std::string, Tensor> &m) {
        u64(m.size());
        for (const auto &[name, t] : m) {
            str(name);
            tensor(t);
        }
    }

    std::vector<std::uint8_t> bytes;

  private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) {
            bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
        }
    }
};

class Reader {
  public:
    Reader(const std::uint8_t *data, std::size_t n) : data_(data), n_(n) {}

    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() { return chars(u64()); }
    Tensor tensor() {
        const std::uint32_t r = u32();
        const std::uint32_t c = u32();
        const std::uint64_t count = static_cast<std::uint64_t>(r) * c;
        need(count * 8);
        Tensor t(static_cast<int>(r), static_cast<int>(c));
        for (double &v : t.data) {
            v = f64();
        }
        return t;
    }
    std::map<std::string, Tensor> tensor_map() {
        std::map<std::string, Tensor> m;
        const std::uint64_t n = u64();
        for (std::uint64_t i = 0; i < n; ++i) {
            std::string name = str();
            m.emplace(std::move(name), tensor());
        }
        return m;
    }
    std::string chars(std::uint64_t len) {
        need(len);
        std::string s(reinterpret_cast<const char *>(data_ + pos_), len);
        pos_ += len;
        return s;
    }
    bool done() const { return pos_ == n_; }

  private:
    void need(std::uint64_t k) const {
        if (k > n_ - pos_) {
            throw CheckpointError("checkpoint is truncated");
        }
    }
    std::uint64_t get(int k) {
        need(static_cast<std::uint64_t>(k));
        std::uint64_t v = 0;
        for (int i = 0; i < k; ++i) {
            v |= static_cast<std::uint64_t>(data_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
        }
        pos_ += static_cast<std::size_t>(k);
        return v;
    }

    const std::uint8_t *data_;
    std::size_t n_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> section_config(const Checkpoint &c) {
    const std::string text = nlohmann::json{{"model", c.model}, {"train", c.config}}.dump();
    return {text.begin(), text.end()};
}

std::vector<std::uint8_t> section_params(const Checkpoint &c) {
    Writer w;
    w.u64(c.params.seed);
    w.tensor_map(c.params.all());
    return w.bytes;
}

std::vector<std::uint8_t> section_adam(const Checkpoint &c) {
    Writer w;
    w.f64(c.adam.lr);
    w.f64(c.adam.beta1);
    w.f64(c.adam.beta2);
    w.f64(c.adam.eps);
    w.u64(static_cast<std::uint64_t>(c.adam.step));
    w.tensor_map(c.adam.first_moment);
    w.tensor_map(c.adam.second_moment);
    return w.bytes;
}

std::vector<std::uint8_t> section_grid(const SparseVoxelGrid &g) {
    Writer w;
    const Lattice &lat = g.index->lattice();
    for (int i = 0; i < 3; ++i) {
        w.f64(lat.origin(i));
    }
    w.f64(lat.voxel_size);
    w.u64(g.index->size());
    for (const VoxelCoord &c : g.index->coords()) {
        w.i32(c.x);
        w.i32(c.y);
        w.i32(c.z);
    }
    w.tensor(g.features);
    return w.bytes;
}

SparseVoxelGrid read_grid(Reader &gr) {
    Lattice lat;
    for (int i = 0; i < 3; ++i) {
        lat.origin(i) = gr.f64();
    }
    lat.voxel_size = gr.f64();
    const std::uint64_t n = gr.u64();
    std::vector<VoxelCoord> coords;
    for (std::uint64_t i = 0; i < n; ++i) {
        const std::int32_t x = gr.i32();
        const std::int32_t y = gr.i32();
        const std::int32_t z = gr.i32();
        coords.push_back({x, y, z});
    }
    Tensor features = gr.tensor();
    if (features.rows != static_cast<int>(n)) {
        throw CheckpointError("grid features do not match its voxel count");
    }
    return SparseVoxelGrid(make_index(lat, std::move(coords)), std::move(features));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path &path, const std::vector<std::uint8_t> &bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw CheckpointError("cannot write " + path.string());
    }
}

std::vector<std::uint8_t> section_rng(const Checkpoint &c) {
    std::ostringstream os;
    os << c.rng;
    const std::string text = os.str();
    return {text.begin(), text.end()};
}

} // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint &c) {
    std::vector<std::pair<std::string, std::vector<std::uint8_t>>> sections = {
        {"config", section_config(c)}, {"params", section_params(c)}, {"adam", section_adam(c)}};
    if (c.grid) {
        sections.emplace_back("grid", section_grid(*c.grid));
    }
    sections.emplace_back("rng", section_rng(c));

    Writer w;
    w.bytes.insert(w.bytes.end(), std::begin(kMagic), std::end(kMagic));
    w.u32(Checkpoint::kVersion);
    w.u32(static_cast<std::uint32_t>(sections.size()));
    for (const auto &[name, payload] : sections) {
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.bytes.insert(w.bytes.end(), name.begin(), name.end());
        w.u64(payload.size());
        w.raw(payload);
    }
    w.u64(fnv1a64(w.bytes.data(), w.bytes.size()));
    return w.bytes;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t> &bytes) {
    if (bytes.size() < 4 + 4 + 4 + 8 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
        throw CheckpointError("not a voxfuse checkpoint (bad magic)");
    }
    const std::size_t body = bytes.size() - 8;
    Reader tail(bytes.data() + body, 8);
    if (tail.u64() != fnv1a64(bytes.data(), body)) {
        throw CheckpointError("checkpoint checksum mismatch");
    }
    Reader r(bytes.data() + 4, body - 4);
    const std::uint32_t version = r.u32();
    if (version != Checkpoint::kVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t count = r.u32();
    std::map<std::string, std::string> sections;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32();
        std::string name = r.chars(name_len);
        sections[name] = r.str();
    }
    if (!r.done()) {
        throw CheckpointError("trailing bytes after the last section");
    }
    for (const char *required : {"config", "params", "adam", "rng"}) {
        if (sections.count(required) == 0) {
            throw CheckpointError(std::string("checkpoint lacks the ") + required + " section");
        }
    }
    auto reader = [&](const std::string &name) {
        const std::string &s = sections.at(name);
        return Reader(reinterpret_cast<const std::uint8_t *>(s.data()), s.size());
    };

    Checkpoint c;
    try {
        const nlohmann::json cfg = nlohmann::json::parse(sections.at("config"));
        c.model = cfg.at("model").get<ModelConfig>();
        c.config = cfg.at("train").get<TrainConfig>();
    } catch (const nlohmann::json::exception &e) {
        throw CheckpointError(std::string("checkpoint config is malformed: ") + e.what());
    }

    Reader pr = reader("params");
    c.params.seed = pr.u64();
    for (auto &[name, t] : pr.tensor_map()) {
        c.params.add(name, std::move(t));
    }

    Reader ar = reader("adam");
    c.adam.lr = ar.f64();
    c.adam.beta1 = ar.f64();
    c.adam.beta2 = ar.f64();
    c.adam.eps = ar.f64();
    c.adam.step = static_cast<std::int64_t>(ar.u64());
    c.adam.first_moment = ar.tensor_map();
    c.adam.second_moment = ar.tensor_map();

    if (sections.count("grid") != 0) {
        Reader gr = reader("grid");
        c.grid = read_grid(gr);
    }

    std::istringstream is(sections.at("rng"));
    is >> c.rng;
    if (!is) {
        throw CheckpointError("checkpoint rng state is malformed");
    }
    return c;
}

void save_checkpoint(const Checkpoint &c, const std::filesystem::path &path) {
    write_file(path, serialize_checkpoint(c));
}

Checkpoint load_checkpoint(const std::filesystem::path &path) { return deserialize_checkpoint(read_file(path)); }

void save_grid(const SparseVoxelGrid &grid, const std::filesystem::path &path) {
    Writer w;
    w.bytes.insert(w.bytes.end(), std::begin(kGridMagic), std::end(kGridMagic));
    w.u32(Checkpoint::kVersion);
    w.raw(section_grid(grid));
    w.u64(fnv1a64(w.bytes.data(), w.bytes.size()));
    write_file(path, w.bytes);
}

SparseVoxelGrid load_grid(const std::filesystem::path &path) {
    const std::vector<std::uint8_t> bytes = read_file(path);
    if (bytes.size() < 16 || !std::equal(std::begin(kGridMagic), std::end(kGridMagic), bytes.begin())) {
        throw CheckpointError(path.string() + " is not a voxfuse grid file");
    }
    const std::size_t body = bytes.size() - 8;
    Reader tail(bytes.data() + body, 8);
    if (tail.u64() != fnv1a64(bytes.data(), body)) {
        throw CheckpointError(path.string() + ": checksum mismatch");
    }
    Reader r(bytes.data() + 4, body - 4);
    if (r.u32() != Checkpoint::kVersion) {
        throw CheckpointError(path.string() + ": unsupported grid version");
    }
    SparseVoxelGrid g = read_grid(r);
    if (!r.done()) {
        throw CheckpointError(path.string() + ": trailing bytes");
    }
    return g;
}

} // namespace voxfuse

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mobi/bench/config.hpp"
#include "mobi/bitplane.hpp"
#include "mobi/common.hpp"
#include "mobi/router.hpp"
#include "mobi/slicer.hpp"

// Binary checkpoint container: magic "MOBI", version u32, then a section table
// of (8-byte tag, offset u64, length u64) entries, all little-endian. One
// GLOBAL section echoes the run configuration; one LAYERnnn section per layer
// carries the merged-code bit planes, group scales/zeros, clipping gammas,
// router weights and the calibrated threshold. Round-trips are bit-identical;
// a version mismatch is rejected, never coerced.
namespace mobi::bench {

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& msg) : std::runtime_error("checkpoint: " + msg) {}
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'M', 'O', 'B', 'I'};

struct LayerRecord {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t group_size = 0;
    std::vector<int> slice_bits;
    std::vector<double> base_scale;
    std::vector<double> base_zero;
    qcore::ClipParams clip;
    router::RouterState rs;
    bitplane::PackedPlanes planes;  // merged codes over all slices

    qcore::QuantParams base_params() const {
        qcore::QuantParams qp;
        qp.rows = rows;
        qp.cols = cols;
        qp.group_size = group_size;
        qp.bits = slice_bits[0];
        qp.scale = base_scale;
        qp.zero = base_zero;
        return qp;
    }

    // Rebuilds the slice stack by splitting the merged codes back into slice
    // codes; truncation preserves coarse codes, so this is exact.
    slicer::SliceStack stack() const {
        slicer::SliceStack st;
        st.slice_bits = slice_bits;
        st.base = base_params();
        st.clamp_mask = Codes(rows, cols, 0);
        st.clamp_counts.assign(slice_bits.size(), 0);
        Codes merged = bitplane::unpack(planes);
        int total = 0;
        for (int b : slice_bits) total += b;
        int shift = total;
        for (std::size_t e = 0; e < slice_bits.size(); ++e) {
            shift -= slice_bits[e];
            unsigned mask = (1u << slice_bits[e]) - 1u;
            Codes slice(rows, cols);
            for (std::size_t i = 0; i < merged.size(); ++i)
                slice[i] = static_cast<std::uint8_t>((merged[i] >> shift) & mask);
            st.slices.push_back(std::move(slice));
        }
        return st;
    }
};

struct Checkpoint {
    RunConfig config;
    std::vector<LayerRecord> layers;
};

namespace detail {

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void vec_f64(const std::vector<double>& v) {
        u64(v.size());
        for (double x : v) f64(x);
    }
    void vec_u64(const std::vector<std::uint64_t>& v) {
        u64(v.size());
        for (auto x : v) u64(x);
    }
    void vec_i32(const std::vector<int>& v) {
        u64(v.size());
        for (int x : v) u32(static_cast<std::uint32_t>(x));
    }
    void str(const std::string& s) {
        u64(s.size());
        for (char c : s) buf_.push_back(static_cast<std::uint8_t>(c));
    }
    const std::vector<std::uint8_t>& bytes() const { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

    std::uint8_t u8() {
        need(1);
        return data_[pos_++];
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
        return v;
    }
    double f64() {
        std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::vector<double> vec_f64() {
        std::uint64_t n = u64();
        std::vector<double> v(n);
        for (auto& x : v) x = f64();
        return v;
    }
    std::vector<std::uint64_t> vec_u64() {
        std::uint64_t n = u64();
        std::vector<std::uint64_t> v(n);
        for (auto& x : v) x = u64();
        return v;
    }
    std::vector<int> vec_i32() {
        std::uint64_t n = u64();
        std::vector<int> v(n);
        for (auto& x : v) x = static_cast<int>(u32());
        return v;
    }
    std::string str() {
        std::uint64_t n = u64();
        need(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == size_; }

private:
    void need(std::size_t n) {
        if (pos_ + n > size_) throw CheckpointError("section truncated");
    }
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

inline void write_global(ByteWriter& w, const RunConfig& c) {
    w.u64(c.model_dim);
    w.u64(c.model_depth);
    w.u64(c.group_size);
    w.f64(c.weight_scale);
    w.u64(c.nsamples);
    w.u64(c.seqlen);
    w.f64(c.outlier_frac);
    w.f64(c.outlier_scale);
    w.vec_i32(c.slice_bits);
    w.u64(c.epochs);
    w.u64(c.batch_size);
    w.f64(c.lr_clip);
    w.f64(c.lr_router);
    w.f64(c.weight_decay);
    w.f64(c.gamma_init);
    w.u8(c.stage1_warmup_only ? 1 : 0);
    w.f64(c.b_init);
    w.f64(c.b_target);
    w.u8(static_cast<std::uint8_t>(c.shape));
    w.f64(c.reg_weight);
    w.vec_f64(c.target_bits);
    w.f64(c.target_ratio);
    w.f64(c.top_frac);
    w.u64(c.seed);
    // out_dir is a property of the run, not of the model; not persisted.
}

inline RunConfig read_global(ByteReader& r) {
    RunConfig c;
    c.model_dim = r.u64();
    c.model_depth = r.u64();
    c.group_size = r.u64();
    c.weight_scale = r.f64();
    c.nsamples = r.u64();
    c.seqlen = r.u64();
    c.outlier_frac = r.f64();
    c.outlier_scale = r.f64();
    c.slice_bits = r.vec_i32();
    c.epochs = r.u64();
    c.batch_size = r.u64();
    c.lr_clip = r.f64();
    c.lr_router = r.f64();
    c.weight_decay = r.f64();
    c.gamma_init = r.f64();
    c.stage1_warmup_only = r.u8() != 0;
    c.b_init = r.f64();
    c.b_target = r.f64();
    c.shape = static_cast<trainer::ScheduleShape>(r.u8());
    c.reg_weight = r.f64();
    c.target_bits = r.vec_f64();
    c.target_ratio = r.f64();
    c.top_frac = r.f64();
    c.seed = r.u64();
    c.out_dir = ".";
    return c;
}

inline void write_layer(ByteWriter& w, const LayerRecord& l) {
    w.u64(l.rows);
    w.u64(l.cols);
    w.u64(l.group_size);
    w.vec_i32(l.slice_bits);
    w.vec_f64(l.base_scale);
    w.vec_f64(l.base_zero);
    w.vec_f64(l.clip.gamma_lo);
    w.vec_f64(l.clip.gamma_hi);
    w.u64(l.rs.w1.rows());
    w.u64(l.rs.w1.cols());
    w.u64(l.rs.w2.cols());
    w.u64(l.rs.step);
    w.u64(l.rs.total_steps);
    w.f64(l.rs.threshold);
    w.vec_f64(l.rs.w1.vec());
    w.vec_f64(l.rs.b1);
    w.vec_f64(l.rs.w2.vec());
    w.vec_f64(l.rs.b2);
    w.u32(static_cast<std::uint32_t>(l.planes.bits));
    w.u64(l.planes.out);
    w.u64(l.planes.in);
    w.u64(l.planes.words_per_row);
    for (const auto& plane : l.planes.planes) w.vec_u64(plane);
}

inline LayerRecord read_layer(ByteReader& r) {
    LayerRecord l;
    l.rows = r.u64();
    l.cols = r.u64();
    l.group_size = r.u64();
    l.slice_bits = r.vec_i32();
    l.base_scale = r.vec_f64();
    l.base_zero = r.vec_f64();
    l.clip.gamma_lo = r.vec_f64();
    l.clip.gamma_hi = r.vec_f64();
    std::size_t d = r.u64();
    std::size_t h = r.u64();
    std::size_t nr = r.u64();
    l.rs.step = r.u64();
    l.rs.total_steps = r.u64();
    l.rs.threshold = r.f64();
    std::vector<double> w1 = r.vec_f64();
    if (w1.size() != d * h) throw CheckpointError("router w1 size mismatch");
    l.rs.w1 = Matrix(d, h);
    l.rs.w1.vec() = w1;
    l.rs.b1 = r.vec_f64();
    std::vector<double> w2 = r.vec_f64();
    if (w2.size() != h * nr) throw CheckpointError("router w2 size mismatch");
    l.rs.w2 = Matrix(h, nr);
    l.rs.w2.vec() = w2;
    l.rs.b2 = r.vec_f64();
    l.planes.bits = static_cast<int>(r.u32());
    l.planes.out = r.u64();
    l.planes.in = r.u64();
    l.planes.words_per_row = r.u64();
    l.planes.planes.clear();
    for (int p = 0; p < l.planes.bits; ++p) {
        auto plane = r.vec_u64();
        if (plane.size() != l.planes.out * l.planes.words_per_row)
            throw CheckpointError("plane size mismatch");
        l.planes.planes.push_back(std::move(plane));
    }
    return l;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    using detail::ByteWriter;
    std::vector<std::pair<std::string, std::vector<std::uint8_t>>> sections;
    {
        ByteWriter w;
        detail::write_global(w, ckpt.config);
        sections.emplace_back("GLOBAL", w.bytes());
    }
    for (std::size_t i = 0; i < ckpt.layers.size(); ++i) {
        ByteWriter w;
        detail::write_layer(w, ckpt.layers[i]);
        char tag[16];
        std::snprintf(tag, sizeof(tag), "LAYER%03zu", i);
        sections.emplace_back(tag, w.bytes());
    }

    std::ofstream out(path, std::ios::binary);
    MOBI_CHECK(out.good(), "save_checkpoint: cannot open " << path);
    out.write(kCheckpointMagic, 4);
    ByteWriter header;
    header.u32(kCheckpointVersion);
    header.u32(static_cast<std::uint32_t>(sections.size()));
    std::uint64_t offset = 4 + 8 + sections.size() * 24;
    for (const auto& [tag, bytes] : sections) {
        char t8[8] = {};
        std::memcpy(t8, tag.data(), std::min<std::size_t>(8, tag.size()));
        for (char c : t8) header.u8(static_cast<std::uint8_t>(c));
        header.u64(offset);
        header.u64(bytes.size());
        offset += bytes.size();
    }
    out.write(reinterpret_cast<const char*>(header.bytes().data()),
              static_cast<std::streamsize>(header.bytes().size()));
    for (const auto& [tag, bytes] : sections)
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    MOBI_CHECK(out.good(), "save_checkpoint: write failed for " << path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path);
    std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (data.size() < 12) throw CheckpointError("file too small");
    if (std::memcmp(data.data(), kCheckpointMagic, 4) != 0) throw CheckpointError("bad magic");
    detail::ByteReader head(data.data() + 4, data.size() - 4);
    std::uint32_t version = head.u32();
    if (version != kCheckpointVersion)
        throw CheckpointError("version mismatch: file has " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
    std::uint32_t n_sections = head.u32();
    struct Entry {
        std::string tag;
        std::uint64_t offset;
        std::uint64_t length;
    };
    std::vector<Entry> entries;
    for (std::uint32_t i = 0; i < n_sections; ++i) {
        char tag[9] = {};
        for (int j = 0; j < 8; ++j) tag[j] = static_cast<char>(head.u8());
        std::string t(tag);
        std::uint64_t off = head.u64();
        std::uint64_t len = head.u64();
        if (off + len > data.size()) throw CheckpointError("section '" + t + "' out of bounds");
        entries.push_back({t, off, len});
    }

    Checkpoint ckpt;
    bool have_global = false;
    for (const auto& e : entries) {
        detail::ByteReader r(data.data() + e.offset, e.length);
        if (e.tag == "GLOBAL") {
            ckpt.config = detail::read_global(r);
            have_global = true;
        } else if (e.tag.rfind("LAYER", 0) == 0) {
            ckpt.layers.push_back(detail::read_layer(r));
        } else {
            throw CheckpointError("unknown section tag '" + e.tag + "'");
        }
    }
    if (!have_global) throw CheckpointError("missing GLOBAL section");
    return ckpt;
}

}  // namespace mobi::bench

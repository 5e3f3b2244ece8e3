// SPDX-License-Identifier: Apache-2.0
#include "pqlr/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace pqlr {

std::uint32_t crc32(const std::uint8_t* data, std::size_t len, std::uint32_t seed) {
    static std::uint32_t table[256];
    static bool init = false;
    if (!init) {
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            table[i] = c;
        }
        init = true;
    }
    std::uint32_t c = seed ^ 0xffffffffu;
    for (std::size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xffu] ^ (c >> 8);
    return c ^ 0xffffffffu;
}

namespace {

constexpr char kMagic[4] = {'P', 'Q', 'L', 'R'};
constexpr std::uint32_t kVersion = 1;

enum EntryKind : std::uint8_t { kDense = 0, kQuant = 1 };

class Writer {
public:
    std::vector<std::uint8_t> buf;
    void u8(std::uint8_t v) { buf.push_back(v); }
    void u16(std::uint16_t v) {
        for (int i = 0; i < 2; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void str(const std::string& s) {
        u16(static_cast<std::uint16_t>(s.size()));
        buf.insert(buf.end(), s.begin(), s.end());
    }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf.insert(buf.end(), b, b + n);
    }
};

class Reader {
public:
    Reader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
    void need(std::size_t n) const {
        if (pos_ + n > n_) throw DataError("checkpoint: truncated file");
    }
    std::uint8_t u8() {
        need(1);
        return p_[pos_++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(p_[pos_++]) << (8 * i);
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[pos_++]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p_[pos_++]) << (8 * i);
        return v;
    }
    float f32() {
        const std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string str() {
        const std::uint16_t n = u16();
        need(n);
        std::string s(reinterpret_cast<const char*>(p_ + pos_), n);
        pos_ += n;
        return s;
    }
    void bytes(void* out, std::size_t n) {
        need(n);
        std::memcpy(out, p_ + pos_, n);
        pos_ += n;
    }
    std::size_t pos() const { return pos_; }

private:
    const std::uint8_t* p_;
    std::size_t n_;
    std::size_t pos_ = 0;
};

void write_dense_payload(Writer& w, const Tensor& t) {
    for (float v : t.data) w.f32(v);
}

void write_quant_payload(Writer& w, const QuantizedTensor& q) {
    w.bytes(q.codes.data(), q.codes.size());
    if (q.dq) {
        w.u64(q.dq->codes.size());
        w.u64(q.dq->offsets.size());
        for (float v : q.dq->offsets) w.f32(v);
        for (float v : q.dq->second_scales) w.f32(v);
        w.bytes(q.dq->codes.data(), q.dq->codes.size());
    } else {
        w.u64(q.scales.size());
        for (float v : q.scales) w.f32(v);
    }
}

void write_shape(Writer& w, const std::vector<std::size_t>& shape) {
    w.u8(static_cast<std::uint8_t>(shape.size()));
    for (std::size_t d : shape) w.u64(d);
}

std::vector<std::size_t> read_shape(Reader& r) {
    const std::uint8_t rank = r.u8();
    if (rank > 4) throw DataError("checkpoint: implausible tensor rank");
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
        d = r.u64();
        n *= d;
        if (n > (1ull << 32)) throw DataError("checkpoint: implausible tensor size");
    }
    return shape;
}

} // namespace

std::size_t quantized_payload_bytes(const QuantizedTensor& q) {
    std::size_t n = q.codes.size();
    if (q.dq) {
        n += 16 + 4 * q.dq->offsets.size() + 4 * q.dq->second_scales.size() + q.dq->codes.size();
    } else {
        n += 8 + 4 * q.scales.size();
    }
    return n;
}

void save_checkpoint(const ModelState& state, const std::string& path) {
    Writer body; // everything after magic+version, CRC'd
    body.str(state.stage_label);
    body.u32(static_cast<std::uint32_t>(state.cfg.vocab_size));
    body.u32(static_cast<std::uint32_t>(state.cfg.d_model));
    body.u32(static_cast<std::uint32_t>(state.cfg.n_layers));
    body.u32(static_cast<std::uint32_t>(state.cfg.n_heads));
    body.u32(static_cast<std::uint32_t>(state.cfg.d_ff));
    body.u32(static_cast<std::uint32_t>(state.cfg.max_seq_len));
    body.u8(state.cfg.tie_embeddings ? 1 : 0);
    body.u8(state.is_quantized ? 1 : 0);
    body.u32(static_cast<std::uint32_t>(state.lora_rank));
    body.f32(state.lora_alpha);

    // Gather entries: (name, kind, payload writer).
    Writer payload;
    struct DirEntry {
        std::string name;
        std::uint8_t kind;
        const Tensor* dense = nullptr;
        const QuantizedTensor* quant = nullptr;
        std::uint64_t offset = 0, nbytes = 0;
    };
    std::vector<DirEntry> entries;
    auto add_dense = [&](const std::string& name, const Tensor& t) {
        DirEntry e{name, kDense, &t, nullptr, payload.buf.size(), 0};
        write_dense_payload(payload, t);
        e.nbytes = payload.buf.size() - e.offset;
        entries.push_back(std::move(e));
    };
    if (state.is_quantized) {
        for (const auto& [name, t] : state.quant.rest) add_dense(name, t);
        for (const auto& [name, q] : state.quant.qweights) {
            DirEntry e{name, kQuant, nullptr, &q, payload.buf.size(), 0};
            write_quant_payload(payload, q);
            e.nbytes = payload.buf.size() - e.offset;
            entries.push_back(std::move(e));
        }
        for (const auto& [name, a] : state.adapters) {
            add_dense("lora." + name + ".A", a.A);
            add_dense("lora." + name + ".B", a.B);
        }
    } else {
        for (const auto& [name, t] : state.dense) add_dense(name, t);
    }

    body.u32(static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        body.str(e.name);
        body.u8(e.kind);
        if (e.kind == kDense) {
            body.u8(0); // dtype f32
            write_shape(body, e.dense->shape);
        } else {
            body.u8(static_cast<std::uint8_t>(e.quant->codebook_id));
            body.u32(static_cast<std::uint32_t>(e.quant->block_size));
            body.u8(e.quant->dq ? 1 : 0);
            body.u32(static_cast<std::uint32_t>(e.quant->dq ? e.quant->dq->chunk_size : 0));
            write_shape(body, e.quant->shape);
        }
        body.u64(e.offset);
        body.u64(e.nbytes);
    }
    body.bytes(payload.buf.data(), payload.buf.size());

    Writer file;
    file.bytes(kMagic, 4);
    file.u32(kVersion);
    file.bytes(body.buf.data(), body.buf.size());
    file.u32(crc32(body.buf.data(), body.buf.size()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open checkpoint for writing: " + path);
    out.write(reinterpret_cast<const char*>(file.buf.data()),
              static_cast<std::streamsize>(file.buf.size()));
    if (!out) throw DataError("short write to checkpoint: " + path);
}

ModelState load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint file not found: " + path);
    std::vector<std::uint8_t> file((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    if (file.size() < 12) throw DataError("checkpoint: truncated file");
    if (std::memcmp(file.data(), kMagic, 4) != 0) throw DataError("checkpoint: bad magic");
    std::uint32_t version = 0;
    std::memcpy(&version, file.data() + 4, 4);
    if (version != kVersion)
        throw DataError("checkpoint: unsupported version " + std::to_string(version));
    const std::size_t body_len = file.size() - 12;
    std::uint32_t stored_crc = 0;
    for (int i = 0; i < 4; ++i)
        stored_crc |= static_cast<std::uint32_t>(file[file.size() - 4 + static_cast<std::size_t>(i)])
                      << (8 * i);
    if (crc32(file.data() + 8, body_len) != stored_crc)
        throw DataError("checkpoint: checksum mismatch");

    Reader r(file.data() + 8, body_len);
    ModelState st;
    st.stage_label = r.str();
    st.cfg.vocab_size = static_cast<int>(r.u32());
    st.cfg.d_model = static_cast<int>(r.u32());
    st.cfg.n_layers = static_cast<int>(r.u32());
    st.cfg.n_heads = static_cast<int>(r.u32());
    st.cfg.d_ff = static_cast<int>(r.u32());
    st.cfg.max_seq_len = static_cast<int>(r.u32());
    st.cfg.tie_embeddings = r.u8() != 0;
    st.is_quantized = r.u8() != 0;
    st.lora_rank = static_cast<int>(r.u32());
    st.lora_alpha = r.f32();

    struct Dir {
        std::string name;
        std::uint8_t kind;
        std::uint8_t cb_or_dtype = 0;
        std::uint32_t block_size = 0;
        bool dq = false;
        std::uint32_t chunk = 0;
        std::vector<std::size_t> shape;
        std::uint64_t offset = 0, nbytes = 0;
    };
    const std::uint32_t count = r.u32();
    if (count > 100000) throw DataError("checkpoint: implausible entry count");
    std::vector<Dir> dirs(count);
    for (auto& d : dirs) {
        d.name = r.str();
        d.kind = r.u8();
        if (d.kind == kDense) {
            d.cb_or_dtype = r.u8();
            if (d.cb_or_dtype != 0) throw DataError("checkpoint: unsupported dtype");
            d.shape = read_shape(r);
        } else if (d.kind == kQuant) {
            d.cb_or_dtype = r.u8();
            if (d.cb_or_dtype > 1) throw DataError("checkpoint: unknown codebook id");
            d.block_size = r.u32();
            if (d.block_size == 0) throw DataError("checkpoint: zero block size");
            d.dq = r.u8() != 0;
            d.chunk = r.u32();
            if (d.dq && d.chunk == 0) throw DataError("checkpoint: zero chunk size");
            d.shape = read_shape(r);
        } else {
            throw DataError("checkpoint: unknown entry kind");
        }
        d.offset = r.u64();
        d.nbytes = r.u64();
    }
    const std::size_t payload_start = r.pos();
    const std::size_t payload_len = body_len - payload_start;

    for (const auto& d : dirs) {
        if (d.offset + d.nbytes > payload_len) throw DataError("checkpoint: entry out of bounds");
        Reader pr(file.data() + 8 + payload_start + d.offset, d.nbytes);
        if (d.kind == kDense) {
            const std::size_t n = Tensor::numel(d.shape);
            if (d.nbytes != n * 4) throw DataError("checkpoint: dense entry size mismatch");
            Tensor t = Tensor::zeros(d.shape);
            for (auto& v : t.data) v = pr.f32();
            if (d.name.rfind("lora.", 0) == 0) {
                const bool is_a = d.name.size() > 2 && d.name.substr(d.name.size() - 2) == ".A";
                const std::string target = d.name.substr(5, d.name.size() - 7);
                LoraAdapter& a = st.adapters[target];
                a.target = target;
                a.rank = st.lora_rank;
                a.alpha = st.lora_alpha;
                if (is_a)
                    a.A = std::move(t);
                else
                    a.B = std::move(t);
            } else if (st.is_quantized) {
                st.quant.rest[d.name] = std::move(t);
            } else {
                st.dense[d.name] = std::move(t);
            }
        } else {
            QuantizedTensor q;
            q.shape = d.shape;
            q.block_size = static_cast<int>(d.block_size);
            q.codebook_id = static_cast<CodebookId>(d.cb_or_dtype);
            const std::size_t n = q.numel();
            q.codes.resize((n + 1) / 2);
            pr.bytes(q.codes.data(), q.codes.size());
            if (d.dq) {
                DoubleQuantScales dq;
                dq.chunk_size = static_cast<int>(d.chunk);
                const std::uint64_t nscales = pr.u64();
                const std::uint64_t nchunks = pr.u64();
                if (nscales != q.num_blocks()) throw DataError("checkpoint: scale count mismatch");
                dq.offsets.resize(nchunks);
                dq.second_scales.resize(nchunks);
                for (auto& v : dq.offsets) v = pr.f32();
                for (auto& v : dq.second_scales) v = pr.f32();
                dq.codes.resize(nscales);
                pr.bytes(dq.codes.data(), dq.codes.size());
                q.dq = std::move(dq);
            } else {
                const std::uint64_t nscales = pr.u64();
                if (nscales != q.num_blocks()) throw DataError("checkpoint: scale count mismatch");
                q.scales.resize(nscales);
                for (auto& v : q.scales) v = pr.f32();
            }
            st.quant.qweights[d.name] = std::move(q);
        }
    }
    if (st.is_quantized) st.quant.stage_label = st.stage_label;
    return st;
}

std::unique_ptr<ResolvedModel<float>> resolve_state(const ModelState& state) {
    if (state.is_quantized) return resolve_qlora<float>(state.quant, state.adapters, state.cfg);
    return resolve_dense<float>(state.dense, state.cfg);
}

} // namespace pqlr

// Checkpoint binary format: roundtrips, CRC, corruption handling.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "pqlr/checkpoint.hpp"

using namespace pqlr;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("pqlr_ckpt_test_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 23;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 24;
    cfg.max_seq_len = 12;
    return cfg;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

TokenBatch probe_batch() {
    TokenBatch b;
    b.tokens = {{3, 7, 11, 2, 5}};
    b.targets = {{-1, -1, -1, -1, -1}};
    return b;
}

} // namespace

TEST_CASE("crc32 matches the standard check value") {
    const char* s = "123456789";
    CHECK(crc32(reinterpret_cast<const std::uint8_t*>(s), 9) == 0xcbf43926u);
    CHECK(crc32(nullptr, 0) == 0u);
}

TEST_CASE("dense checkpoint roundtrips bit-exactly") {
    TempDir td;
    ModelConfig cfg = tiny_config();
    Rng rng(3);
    Parameters params = init_parameters<float>(cfg, rng);
    ModelState st = ModelState::from_dense(params, cfg, "SFT-16bit");
    const std::string path = (td.path / "dense.pqlr").string();
    save_checkpoint(st, path);
    ModelState back = load_checkpoint(path);
    CHECK(back.stage_label == "SFT-16bit");
    CHECK_FALSE(back.is_quantized);
    CHECK(back.cfg.d_model == cfg.d_model);
    CHECK(back.cfg.tie_embeddings == cfg.tie_embeddings);
    REQUIRE(back.dense.size() == params.size());
    for (const auto& [k, v] : params) {
        REQUIRE(back.dense.count(k) == 1);
        const auto& w = back.dense.at(k);
        REQUIRE(w.shape == v.shape);
        CHECK(std::memcmp(w.data.data(), v.data.data(), v.size() * sizeof(float)) == 0);
    }
    // Saving the loaded state again produces identical bytes.
    const std::string path2 = (td.path / "dense2.pqlr").string();
    save_checkpoint(back, path2);
    CHECK(read_file(path) == read_file(path2));
}

TEST_CASE("quantized + adapter checkpoint roundtrips with identical logits") {
    TempDir td;
    ModelConfig cfg = tiny_config();
    Rng rng(5);
    Parameters params = init_parameters<float>(cfg, rng, 0.05);
    QuantConfig qc;
    QuantizedModel qm = quantize_model(params, cfg, QuantMethod::bnb_nf4, qc, nullptr);
    Rng lr(6);
    AdapterMap adapters = init_lora(cfg, linear_param_names(cfg), 4, 16.0f, lr);
    Rng br(7);
    for (auto& [k, a] : adapters)
        for (auto& v : a.B.data) v = static_cast<float>(br.normal(0.0, 0.05));

    ModelState st = ModelState::from_quantized(qm, cfg, adapters, 4, 16.0f);
    CHECK(st.stage_label == "PTQ-BNB-4bit+QLoRA");
    const std::string path = (td.path / "q.pqlr").string();
    save_checkpoint(st, path);
    ModelState back = load_checkpoint(path);
    CHECK(back.is_quantized);
    CHECK(back.lora_rank == 4);
    CHECK(back.stage_label == "PTQ-BNB-4bit+QLoRA");
    REQUIRE(back.quant.qweights.size() == qm.qweights.size());
    for (const auto& [k, q] : qm.qweights) {
        const auto& bq = back.quant.qweights.at(k);
        CHECK(bq.codes == q.codes);
        CHECK(bq.block_size == q.block_size);
        CHECK(bq.effective_scales() == q.effective_scales());
    }
    REQUIRE(back.adapters.size() == adapters.size());

    auto rm1 = resolve_state(st);
    auto rm2 = resolve_state(back);
    TokenBatch b = probe_batch();
    Tensor l1 = transformer_forward<float>(rm1->weights, cfg, b, nullptr);
    Tensor l2 = transformer_forward<float>(rm2->weights, cfg, b, nullptr);
    CHECK(std::memcmp(l1.data.data(), l2.data.data(), l1.size() * sizeof(float)) == 0);
}

TEST_CASE("corrupted checkpoints are rejected with the documented errors") {
    TempDir td;
    ModelConfig cfg = tiny_config();
    Rng rng(9);
    Parameters params = init_parameters<float>(cfg, rng);
    const std::string path = (td.path / "c.pqlr").string();
    save_checkpoint(ModelState::from_dense(params, cfg, "SFT-16bit"), path);
    const auto good = read_file(path);
    const std::string mut = (td.path / "mut.pqlr").string();

    SUBCASE("bad magic") {
        auto bytes = good;
        bytes[0] ^= 0xff;
        write_file(mut, bytes);
        CHECK_THROWS_AS(load_checkpoint(mut), DataError);
    }
    SUBCASE("unsupported version") {
        auto bytes = good;
        bytes[4] = 0x7f;
        write_file(mut, bytes);
        CHECK_THROWS_AS(load_checkpoint(mut), DataError);
    }
    SUBCASE("truncation at every interesting prefix") {
        for (std::size_t keep : {0ul, 3ul, 8ul, 20ul, good.size() / 2, good.size() - 1}) {
            write_file(mut, {good.begin(), good.begin() + static_cast<long>(keep)});
            CHECK_THROWS_AS(load_checkpoint(mut), DataError);
        }
    }
    SUBCASE("payload bit flips fail the checksum") {
        Rng r(33);
        for (int trial = 0; trial < 40; ++trial) {
            auto bytes = good;
            const std::size_t pos = 8 + r.below(bytes.size() - 8);
            bytes[pos] ^= static_cast<std::uint8_t>(1u << r.below(8));
            write_file(mut, bytes);
            CHECK_THROWS_AS(load_checkpoint(mut), DataError);
        }
    }
    SUBCASE("missing file") { CHECK_THROWS_AS(load_checkpoint((td.path / "nope").string()), DataError); }
}

TEST_CASE("serialized quantized section size agrees with the density formula") {
    ModelConfig cfg = tiny_config();
    cfg.d_model = 64; // make tensors big enough for full dq chunks
    cfg.d_ff = 64;
    Rng rng(13);
    Parameters params = init_parameters<float>(cfg, rng);
    QuantConfig qc;
    QuantizedModel qm = quantize_model(params, cfg, QuantMethod::bnb_nf4, qc, nullptr);
    for (const auto& [k, q] : qm.qweights) {
        const double from_formula = bits_per_weight(q);
        const double from_bytes =
            8.0 * static_cast<double>(quantized_payload_bytes(q)) / static_cast<double>(q.numel());
        CHECK(from_bytes == doctest::Approx(from_formula).epsilon(0.01));
    }
}

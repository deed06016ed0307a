#include "storyviz/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "json.hpp"

namespace storyviz {

namespace {

constexpr char kMagic[4] = {'S', 'V', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const unsigned char* p) {
    return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}

uint64_t get_u64(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = v << 8 | p[i];
    return v;
}

uint32_t container_crc(const std::string& bytes, size_t len) {
    return uint32_t(
        crc32(0L, reinterpret_cast<const unsigned char*>(bytes.data()), uInt(len)));
}

}  // namespace

void save_checkpoint(const CheckpointState& state, const std::string& path) {
    nlohmann::json header;
    header["schema_version"] = state.schema_version;
    header["stage"] = state.stage;
    header["config"] = state.config_echo;
    header["vocab"] = state.vocab;
    header["roster"] = state.roster;
    header["rng_state"] = state.rng_state;
    auto& index = header["params"] = nlohmann::json::array();
    for (const auto& p : state.params)
        index.push_back({{"name", p.name}, {"rows", p.rows}, {"cols", p.cols}});
    const std::string header_text = header.dump();

    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u64(out, header_text.size());
    out += header_text;
    for (const auto& p : state.params) {
        put_u64(out, uint64_t(p.data.size()) * 4);
        for (float f : p.data) put_u32(out, std::bit_cast<uint32_t>(f));
    }
    put_u32(out, container_crc(out, out.size()));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write checkpoint file '" + path + "'");
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) throw DataError("write failed for checkpoint file '" + path + "'");
}

CheckpointState load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint file '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw DataError("'" + path + "' is not a checkpoint file (bad magic)");
    if (bytes.size() < 20) throw DataError("checkpoint file truncated");
    const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
    const uint32_t version = get_u32(u + 4);
    if (version != kVersion)
        throw DataError("checkpoint schema version mismatch: file has " +
                        std::to_string(version) + ", this build expects " +
                        std::to_string(kVersion));
    const uint32_t stored_crc = get_u32(u + bytes.size() - 4);
    if (container_crc(bytes, bytes.size() - 4) != stored_crc)
        throw DataError("checkpoint integrity check failed (CRC mismatch)");

    const uint64_t header_len = get_u64(u + 8);
    size_t pos = 16;
    if (pos + header_len + 4 > bytes.size()) throw DataError("checkpoint file truncated");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(pos, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint header is corrupt: ") + e.what());
    }
    pos += header_len;

    CheckpointState state;
    try {
        state.schema_version = header.at("schema_version").get<int>();
        state.stage = header.at("stage").get<std::string>();
        state.config_echo = header.at("config").get<std::string>();
        state.vocab = header.at("vocab").get<std::vector<std::string>>();
        state.roster = header.at("roster").get<std::vector<std::string>>();
        state.rng_state = header.at("rng_state").get<std::string>();
        for (const auto& e : header.at("params")) {
            CheckpointParam p;
            p.name = e.at("name").get<std::string>();
            p.rows = e.at("rows").get<int>();
            p.cols = e.at("cols").get<int>();
            state.params.push_back(std::move(p));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint header is corrupt: ") + e.what());
    }
    if (state.stage != "stage1" && state.stage != "stage2")
        throw DataError("checkpoint carries unknown stage tag '" + state.stage + "'");

    for (auto& p : state.params) {
        if (p.rows < 0 || p.cols < 0)
            throw DataError("checkpoint header is corrupt: negative shape for '" + p.name + "'");
        if (pos + 8 > bytes.size() - 4) throw DataError("checkpoint file truncated");
        const uint64_t blob_len = get_u64(u + pos);
        pos += 8;
        const uint64_t want = uint64_t(p.rows) * uint64_t(p.cols) * 4;
        if (blob_len != want)
            throw DataError("parameter blob size mismatch for '" + p.name + "'");
        if (pos + blob_len > bytes.size() - 4) throw DataError("checkpoint file truncated");
        p.data.resize(size_t(p.rows) * size_t(p.cols));
        for (size_t i = 0; i < p.data.size(); ++i)
            p.data[i] = std::bit_cast<float>(get_u32(u + pos + i * 4));
        pos += blob_len;
    }
    if (pos + 4 != bytes.size())
        throw DataError("checkpoint file carries trailing bytes after the parameter blobs");
    return state;
}

std::string checkpoint_stage(const std::string& path) { return load_checkpoint(path).stage; }

void collect_params(const ParamStore<float>& store, CheckpointState& state) {
    for (size_t i = 0; i < store.size(); ++i) {
        const auto& p = store.at(i);
        CheckpointParam cp;
        cp.name = p.name;
        cp.rows = p.value.rows;
        cp.cols = p.value.cols;
        cp.data = p.value.data;
        state.params.push_back(std::move(cp));
    }
}

void apply_params(ParamStore<float>& store, const CheckpointState& state) {
    std::map<std::string, const CheckpointParam*> by_name;
    for (const auto& p : state.params) by_name[p.name] = &p;
    for (size_t i = 0; i < store.size(); ++i) {
        auto& p = store.at(i);
        const auto it = by_name.find(p.name);
        if (it == by_name.end())
            throw DataError("checkpoint is missing parameter '" + p.name + "'");
        const auto& cp = *it->second;
        if (cp.rows != p.value.rows || cp.cols != p.value.cols)
            throw DataError("checkpoint parameter '" + p.name + "' has shape " +
                            std::to_string(cp.rows) + "x" + std::to_string(cp.cols) +
                            ", the model expects " + std::to_string(p.value.rows) + "x" +
                            std::to_string(p.value.cols));
        p.value.data = cp.data;
        by_name.erase(it);
    }
    if (!by_name.empty())
        throw DataError("checkpoint carries unknown parameter '" + by_name.begin()->first + "'");
}

namespace {

void fill_identity(const Tokenizer& tok, CheckpointState& state) {
    state.vocab = tok.vocabulary();
    state.roster = tok.roster_names();
}

void check_vocab(const Tokenizer& tok, const CheckpointState& state) {
    if (state.vocab != tok.vocabulary())
        throw DataError("checkpoint vocabulary does not match the model tokenizer");
}

}  // namespace

CheckpointState checkpoint_from_stage1(const Stage1Model<float>& model,
                                       const std::string& config_echo,
                                       const std::string& rng_state) {
    CheckpointState state;
    state.stage = "stage1";
    state.config_echo = config_echo;
    state.rng_state = rng_state;
    fill_identity(model.tokenizer, state);
    collect_params(model.store, state);
    return state;
}

CheckpointState checkpoint_from_stage2(const Stage1Model<float>& stage1,
                                       const Stage2Model<float>& stage2,
                                       const std::string& config_echo,
                                       const std::string& rng_state) {
    CheckpointState state;
    state.stage = "stage2";
    state.config_echo = config_echo;
    state.rng_state = rng_state;
    fill_identity(stage2.tokenizer, state);
    collect_params(stage1.store, state);
    collect_params(stage2.store, state);
    return state;
}

void restore_stage1(Stage1Model<float>& model, const CheckpointState& state) {
    if (state.stage != "stage1")
        throw StageError("checkpoint is tagged '" + state.stage +
                         "'; a stage-1 checkpoint is required here");
    check_vocab(model.tokenizer, state);
    apply_params(model.store, state);
    model.trained = true;
}

void restore_stage2(Stage1Model<float>& stage1, Stage2Model<float>& stage2,
                    const CheckpointState& state) {
    if (state.stage != "stage2")
        throw StageError("checkpoint is tagged '" + state.stage +
                         "'; a stage-2 checkpoint is required here");
    check_vocab(stage2.tokenizer, state);
    CheckpointState s1, s2;
    for (const auto& p : state.params) {
        const bool lm_side = p.name.rfind("lm.", 0) == 0 || p.name.rfind("mapper.", 0) == 0;
        (lm_side ? s2 : s1).params.push_back(p);
    }
    apply_params(stage1.store, s1);
    apply_params(stage2.store, s2);
    stage1.trained = true;
    stage2.pretrained = true;
    stage2.trained = true;
}

}  // namespace storyviz

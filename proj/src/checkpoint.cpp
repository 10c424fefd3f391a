#include "copelab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace copelab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts need byte swaps");

namespace {

constexpr char kMagic[4] = {'C', 'P', 'L', 'B'};
constexpr uint32_t kVersion = 1;
constexpr uint8_t kDtypeF64 = 1;

void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t get_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
uint64_t get_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

void put_tensor(std::ostream& os, const std::string& name, const std::vector<int>& shape,
                const std::vector<double>& data) {
    put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(kDtypeF64));
    put_u32(os, static_cast<uint32_t>(shape.size()));
    for (int d : shape) put_u32(os, static_cast<uint32_t>(d));
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(double)));
}

struct RawTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<double> data;
};

RawTensor get_tensor(std::istream& is) {
    RawTensor t;
    uint32_t name_len = get_u32(is);
    t.name.resize(name_len);
    is.read(t.name.data(), name_len);
    uint8_t dtype = static_cast<uint8_t>(is.get());
    if (dtype != kDtypeF64) {
        throw std::runtime_error("checkpoint: tensor '" + t.name + "' has unknown dtype tag " +
                                 std::to_string(dtype));
    }
    uint32_t rank = get_u32(is);
    size_t numel = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        int d = static_cast<int>(get_u32(is));
        t.shape.push_back(d);
        numel *= static_cast<size_t>(d);
    }
    t.data.resize(numel);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(numel * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor '" + t.name + "'");
    return t;
}

}  // namespace

void save_checkpoint(const std::string& path, const RunConfig& cfg, const TransformerParams& params,
                     const AdamW* opt, int64_t step, uint64_t run_seed) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    std::string cfg_text = serialize_config(cfg);
    put_u32(os, static_cast<uint32_t>(cfg_text.size()));
    os.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
    put_u64(os, static_cast<uint64_t>(step));
    put_u64(os, opt ? static_cast<uint64_t>(const_cast<AdamW*>(opt)->step_count()) : 0);
    put_u64(os, run_seed);
    put_u32(os, static_cast<uint32_t>(cfg.model.vocab_size));

    // an optimizer that has not stepped yet has no moments to persist
    bool with_moments = opt && !const_cast<AdamW*>(opt)->moments_m().empty();
    if (with_moments &&
        const_cast<AdamW*>(opt)->moments_m().size() != params.named().size()) {
        throw std::runtime_error("checkpoint: optimizer moments do not match parameter count");
    }
    uint32_t n_tensors = static_cast<uint32_t>(params.named().size());
    if (with_moments) n_tensors *= 3;
    put_u32(os, n_tensors);
    for (const auto& [name, v] : params.named()) {
        put_tensor(os, name, v->val.shape, v->val.data);
    }
    if (with_moments) {
        auto& m = const_cast<AdamW*>(opt)->moments_m();
        auto& v = const_cast<AdamW*>(opt)->moments_v();
        for (size_t i = 0; i < params.named().size(); ++i) {
            const auto& [name, p] = params.named()[i];
            put_tensor(os, "opt.m." + name, p->val.shape, m[i]);
            put_tensor(os, "opt.v." + name, p->val.shape, v[i]);
        }
    }
    if (!os) throw std::runtime_error("write failure on " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error(path + " is not a checkpoint (bad magic)");
    }
    uint32_t version = get_u32(is);
    if (version != kVersion) {
        throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
    }
    uint32_t cfg_len = get_u32(is);
    std::string cfg_text(cfg_len, '\0');
    is.read(cfg_text.data(), cfg_len);

    Checkpoint ck;
    ck.config = parse_config_text(cfg_text, {});
    ck.step = static_cast<int64_t>(get_u64(is));
    ck.opt_step = static_cast<int64_t>(get_u64(is));
    ck.run_seed = get_u64(is);
    uint32_t vocab = get_u32(is);
    if (ck.config.task == TaskKind::charlm) {
        ck.config.model.vocab_size = static_cast<int>(vocab);
    } else if (vocab != static_cast<uint32_t>(ck.config.model.vocab_size)) {
        throw std::runtime_error(path + ": stored vocab disagrees with the task vocabulary");
    }
    ck.config.model.validate();

    ck.params = TransformerParams::init(ck.config.model, /*seed=*/0);
    size_t n_params = ck.params.named().size();
    ck.opt_m.assign(n_params, {});
    ck.opt_v.assign(n_params, {});

    uint32_t n_tensors = get_u32(is);
    bool has_moments = false;
    for (uint32_t i = 0; i < n_tensors; ++i) {
        RawTensor t = get_tensor(is);
        std::string base = t.name;
        std::vector<std::vector<double>>* side = nullptr;
        if (base.rfind("opt.m.", 0) == 0) {
            side = &ck.opt_m;
            base = base.substr(6);
        } else if (base.rfind("opt.v.", 0) == 0) {
            side = &ck.opt_v;
            base = base.substr(6);
        }
        VarPtr p = ck.params.find(base);
        if (!p) {
            throw std::runtime_error(path + ": unexpected tensor '" + t.name +
                                     "' for this model configuration");
        }
        if (p->val.shape != t.shape) {
            throw std::runtime_error(path + ": tensor '" + t.name + "' has shape " +
                                     Tensor::shape_str(t.shape) + " but the model expects " +
                                     p->val.shape_str());
        }
        if (side) {
            size_t idx = 0;
            for (; idx < n_params; ++idx) {
                if (ck.params.named()[idx].first == base) break;
            }
            (*side)[idx] = std::move(t.data);
            has_moments = true;
        } else {
            p->val.data = std::move(t.data);
        }
    }
    if (!has_moments) {
        ck.opt_m.clear();
        ck.opt_v.clear();
    }
    return ck;
}

}  // namespace copelab

#include "copelab/model.hpp"

#include <cmath>
#include <stdexcept>

namespace copelab {

void ModelConfig::validate() const {
    if (vocab_size < 1) throw std::invalid_argument("model: vocab_size must be positive");
    if (d_model < 1 || n_heads < 1 || n_layers < 1) {
        throw std::invalid_argument("model: d_model, n_heads and n_layers must be positive");
    }
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("model: d_model " + std::to_string(d_model) +
                                    " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (context_T < 1) throw std::invalid_argument("model: context_T must be >= 1");
    if (pe.uses_rope() && d_head() % 2 != 0) {
        throw std::invalid_argument("model: rope needs an even head dimension, got " +
                                    std::to_string(d_head()));
    }
    if (pe.uses_cope() && pe.cope.p_max < 1) {
        throw std::invalid_argument("model: pe.p_max must be >= 1");
    }
    if (pe.kind == PEKind::relative_capped && pe.rel_cap < 1) {
        throw std::invalid_argument("model: relative_capped needs pe.cap >= 1");
    }
    if (pe.kind == PEKind::cope_alibi && !pe.cope.alibi_learned &&
        !pe.cope.alibi_slopes.empty() &&
        pe.cope.alibi_slopes.size() != static_cast<size_t>(n_heads)) {
        throw std::invalid_argument("model: " + std::to_string(pe.cope.alibi_slopes.size()) +
                                    " alibi slopes for " + std::to_string(n_heads) + " heads");
    }
    if (pe.combine_with != CombineWith::none && pe.kind != PEKind::cope) {
        throw std::invalid_argument("model: pe.combine_with is only valid with pe.kind=cope");
    }
}

VarPtr TransformerParams::reg(const std::string& name, Tensor t) {
    auto v = make_var(std::move(t), true);
    named_.push_back({name, v});
    return v;
}

TransformerParams TransformerParams::init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    TransformerParams p;
    RngStream rng = make_stream(seed, /*purpose=*/0x9a7a, 0);
    auto normal = [&rng](std::vector<int> shape) {
        Tensor t(std::move(shape));
        for (auto& v : t.data) v = 0.02 * rng.next_gaussian();
        return t;
    };
    auto zeros = [](std::vector<int> shape) { return Tensor(std::move(shape)); };
    auto ones = [](std::vector<int> shape) {
        Tensor t(std::move(shape));
        std::fill(t.data.begin(), t.data.end(), 1.0);
        return t;
    };

    int d = cfg.d_model;
    int dh = cfg.d_head();
    p.tok_emb = p.reg("tok_emb", normal({cfg.vocab_size, d}));
    if (cfg.pe.kind == PEKind::absolute) {
        p.abs_table = p.reg("abs_table", zeros({cfg.context_T, d}));
    }
    if (cfg.pe.kind == PEKind::cope && cfg.pe.cope.share_across_layers) {
        p.shared_cope_table = p.reg("cope_table", zeros({cfg.pe.cope.p_max, dh}));
    }
    for (int l = 0; l < cfg.n_layers; ++l) {
        Layer layer;
        std::string pre = "layers." + std::to_string(l) + ".";
        layer.ln1_g = p.reg(pre + "ln1.g", ones({d}));
        layer.ln1_b = p.reg(pre + "ln1.b", zeros({d}));
        layer.wq = p.reg(pre + "attn.wq", normal({d, d}));
        layer.bq = p.reg(pre + "attn.bq", zeros({d}));
        layer.wk = p.reg(pre + "attn.wk", normal({d, d}));
        layer.bk = p.reg(pre + "attn.bk", zeros({d}));
        layer.wv = p.reg(pre + "attn.wv", normal({d, d}));
        layer.bv = p.reg(pre + "attn.bv", zeros({d}));
        layer.wo = p.reg(pre + "attn.wo", normal({d, d}));
        layer.bo = p.reg(pre + "attn.bo", zeros({d}));
        if (cfg.pe.uses_cope() && cfg.pe.cope.gate_source == GateSource::sep_keys) {
            layer.wg = p.reg(pre + "attn.wg", normal({d, d}));
        }
        if (cfg.pe.kind == PEKind::cope && !cfg.pe.cope.share_across_layers) {
            layer.cope_table = p.reg(pre + "attn.cope_table", zeros({cfg.pe.cope.p_max, dh}));
        }
        if (cfg.pe.uses_relative()) {
            int rows = cfg.pe.kind == PEKind::relative_capped ? cfg.pe.rel_cap : cfg.context_T;
            layer.rel_table = p.reg(pre + "attn.rel_table", zeros({rows, dh}));
        }
        if (cfg.pe.kind == PEKind::cope_alibi && cfg.pe.cope.alibi_learned) {
            layer.alibi_m = p.reg(pre + "attn.alibi_m", zeros({cfg.n_heads}));
        }
        layer.ln2_g = p.reg(pre + "ln2.g", ones({d}));
        layer.ln2_b = p.reg(pre + "ln2.b", zeros({d}));
        layer.w1 = p.reg(pre + "ffn.w1", normal({d, cfg.d_ffn()}));
        layer.b1 = p.reg(pre + "ffn.b1", zeros({cfg.d_ffn()}));
        layer.w2 = p.reg(pre + "ffn.w2", normal({cfg.d_ffn(), d}));
        layer.b2 = p.reg(pre + "ffn.b2", zeros({d}));
        p.layers.push_back(std::move(layer));
    }
    p.lnf_g = p.reg("lnf.g", ones({d}));
    p.lnf_b = p.reg("lnf.b", zeros({d}));
    if (!cfg.tie_head) {
        p.head_w = p.reg("head.w", normal({d, cfg.vocab_size}));
    }
    p.head_b = p.reg("head.b", zeros({cfg.vocab_size}));
    return p;
}

std::vector<VarPtr> TransformerParams::all() const {
    std::vector<VarPtr> out;
    out.reserve(named_.size());
    for (const auto& [name, v] : named_) out.push_back(v);
    return out;
}

VarPtr TransformerParams::find(const std::string& name) const {
    for (const auto& [n, v] : named_) {
        if (n == name) return v;
    }
    return nullptr;
}

void TransformerParams::zero_grads() const {
    for (const auto& [n, v] : named_) v->val.zero_grad();
}

size_t TransformerParams::count_scalars() const {
    size_t n = 0;
    for (const auto& [name, v] : named_) n += v->numel();
    return n;
}

PETables TransformerParams::tables_for_layer(int layer, const ModelConfig& cfg) const {
    PETables t;
    const Layer& l = layers[static_cast<size_t>(layer)];
    t.cope_table = cfg.pe.cope.share_across_layers ? shared_cope_table : l.cope_table;
    t.rel_table = l.rel_table;
    if (cfg.pe.kind == PEKind::cope_alibi) {
        if (cfg.pe.cope.alibi_learned) {
            t.alibi_m = l.alibi_m;
        } else {
            // fixed slopes: default geometric 1/2^h per head
            Tensor m({cfg.n_heads});
            for (int h = 0; h < cfg.n_heads; ++h) {
                m.data[h] = cfg.pe.cope.alibi_slopes.empty() ? std::pow(2.0, -h)
                                                             : cfg.pe.cope.alibi_slopes[h];
            }
            t.alibi_m = make_const(std::move(m));
        }
    }
    return t;
}

VarPtr attention_layer(const TransformerParams& params, const ModelConfig& cfg, int layer,
                       const VarPtr& h, const std::vector<uint8_t>& mask, AttentionTrace* trace) {
    const auto& l = params.layers[static_cast<size_t>(layer)];
    VarPtr q = split_heads(add_bias(matmul(h, l.wq), l.bq), cfg.n_heads);
    VarPtr k = split_heads(add_bias(matmul(h, l.wk), l.bk), cfg.n_heads);
    VarPtr v = split_heads(add_bias(matmul(h, l.wv), l.bv), cfg.n_heads);
    VarPtr gate_aux = nullptr;
    if (l.wg) gate_aux = split_heads(matmul(h, l.wg), cfg.n_heads);

    VarPtr logits = pe_attention_logits(cfg.pe, params.tables_for_layer(layer, cfg), q, k, v,
                                        gate_aux, mask, trace, layer);
    VarPtr attn = masked_softmax_rows(logits, mask, mask.size());
    VarPtr ctx = merge_heads(matmul(attn, v));
    return add_bias(matmul(ctx, l.wo), l.bo);
}

VarPtr model_logits(const TransformerParams& params, const ModelConfig& cfg,
                    const std::vector<int>& tokens, int batch, int t, AttentionTrace* trace) {
    if (t > cfg.context_T) {
        throw std::invalid_argument("model: sequence length " + std::to_string(t) +
                                    " exceeds context_T " + std::to_string(cfg.context_T));
    }
    if (tokens.size() != static_cast<size_t>(batch) * t) {
        throw std::invalid_argument("model: token count does not match batch x T");
    }
    if (trace) {
        trace->n_layers = cfg.n_layers;
        trace->n_heads = cfg.n_heads;
        trace->t = t;
        size_t n = static_cast<size_t>(cfg.n_layers) * cfg.n_heads;
        trace->gates.assign(n, Tensor());
        trace->positions.assign(n, Tensor());
        trace->pos_logits.assign(n, Tensor());
    }
    std::vector<uint8_t> mask = causal_mask(t);
    VarPtr x = reshape(embedding(params.tok_emb, tokens), {batch, t, cfg.d_model});
    if (cfg.pe.kind == PEKind::absolute) {
        x = absolute_pe_add(x, params.abs_table);
    }
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& lp = params.layers[static_cast<size_t>(l)];
        VarPtr attn_in = layer_norm(x, lp.ln1_g, lp.ln1_b);
        x = add(x, attention_layer(params, cfg, l, attn_in, mask, trace));
        VarPtr ffn_in = layer_norm(x, lp.ln2_g, lp.ln2_b);
        VarPtr ffn = add_bias(matmul(gelu(add_bias(matmul(ffn_in, lp.w1), lp.b1)), lp.w2), lp.b2);
        x = add(x, ffn);
    }
    x = layer_norm(x, params.lnf_g, params.lnf_b);
    VarPtr logits = cfg.tie_head ? matmul_nt(x, params.tok_emb) : matmul(x, params.head_w);
    return add_bias(logits, params.head_b);
}

ForwardResult model_forward_loss(const TransformerParams& params, const ModelConfig& cfg,
                                 const std::vector<int>& tokens, const std::vector<int>& targets,
                                 const std::vector<uint8_t>& loss_mask, int batch, int t) {
    VarPtr logits = model_logits(params, cfg, tokens, batch, t);
    VarPtr loss = cross_entropy_masked(logits, targets, loss_mask);
    return {loss, logits};
}

}  // namespace copelab

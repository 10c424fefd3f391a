#include "copelab/pe.hpp"

#include <cmath>
#include <stdexcept>

namespace copelab {

std::string to_string(PEKind k) {
    switch (k) {
        case PEKind::none: return "none";
        case PEKind::absolute: return "absolute";
        case PEKind::relative: return "relative";
        case PEKind::relative_capped: return "relative_capped";
        case PEKind::rope: return "rope";
        case PEKind::cope: return "cope";
        case PEKind::cope_alibi: return "cope_alibi";
    }
    return "?";
}

std::string to_string(GateSource g) {
    switch (g) {
        case GateSource::attn_keys: return "attn_keys";
        case GateSource::sep_keys: return "sep_keys";
        case GateSource::val_gates: return "val_gates";
    }
    return "?";
}

PEKind pe_kind_from_string(const std::string& s) {
    if (s == "none") return PEKind::none;
    if (s == "absolute") return PEKind::absolute;
    if (s == "relative") return PEKind::relative;
    if (s == "relative_capped") return PEKind::relative_capped;
    if (s == "rope") return PEKind::rope;
    if (s == "cope") return PEKind::cope;
    if (s == "cope_alibi") return PEKind::cope_alibi;
    throw std::invalid_argument("unknown pe kind '" + s + "'");
}

GateSource gate_source_from_string(const std::string& s) {
    if (s == "attn_keys") return GateSource::attn_keys;
    if (s == "sep_keys") return GateSource::sep_keys;
    if (s == "val_gates") return GateSource::val_gates;
    throw std::invalid_argument("unknown gate source '" + s + "'");
}

std::vector<uint8_t> causal_mask(int t) {
    std::vector<uint8_t> m(static_cast<size_t>(t) * t, 0);
    for (int i = 0; i < t; ++i) {
        for (int j = 0; j <= i; ++j) m[static_cast<size_t>(i) * t + j] = 1;
    }
    return m;
}

VarPtr scaled_masked_logits(const VarPtr& q, const VarPtr& k, const std::vector<uint8_t>& mask) {
    int dh = q->val.dim(-1);
    VarPtr logits = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
    return add_causal_mask(logits, mask, mask.size());
}

VarPtr compute_gates(const VarPtr& scaled_masked, const VarPtr& aux, const CopeConfig& config,
                     const std::vector<uint8_t>& mask) {
    if (config.gate_override.has_value()) {
        // constant gates on the causal triangle, no gradient
        Tensor g(scaled_masked->shape());
        size_t blocks = g.numel() / mask.size();
        for (size_t b = 0; b < blocks; ++b) {
            for (size_t i = 0; i < mask.size(); ++i) {
                g.data[b * mask.size() + i] = mask[i] ? *config.gate_override : 0.0;
            }
        }
        return make_const(std::move(g));
    }
    if (config.gate_source == GateSource::attn_keys) {
        return sigmoid(scaled_masked);
    }
    if (!aux) {
        throw std::invalid_argument("compute_gates: gate source " + to_string(config.gate_source) +
                                    " needs auxiliary gate logits");
    }
    return sigmoid(aux);
}

VarPtr compute_positions(const VarPtr& gates, int p_max) {
    if (p_max < 1) {
        throw std::invalid_argument("compute_positions: p_max must be >= 1, got " + std::to_string(p_max));
    }
    return clamp_max(reversed_cumsum(gates), static_cast<double>(p_max - 1));
}

VarPtr position_logits(const VarPtr& q, const VarPtr& table, const VarPtr& positions) {
    return interp_gather(matmul_nt(q, table), positions);
}

namespace {

VarPtr gate_aux_logits(const VarPtr& q, const VarPtr& v, const VarPtr& gate_keys,
                       const std::vector<uint8_t>& mask, const CopeConfig& config) {
    if (config.gate_source == GateSource::sep_keys) {
        if (!gate_keys) {
            throw std::invalid_argument("cope: sep_keys gate source needs the gate-key projection");
        }
        return scaled_masked_logits(q, gate_keys, mask);
    }
    if (config.gate_source == GateSource::val_gates) {
        return scaled_masked_logits(q, v, mask);
    }
    return nullptr;
}

}  // namespace

VarPtr cope_attention_logits(const VarPtr& q, const VarPtr& k, const VarPtr& v,
                             const VarPtr& gate_keys, const std::vector<uint8_t>& mask,
                             const VarPtr& table, const CopeConfig& config) {
    VarPtr sm = scaled_masked_logits(q, k, mask);
    VarPtr aux = gate_aux_logits(q, v, gate_keys, mask, config);
    VarPtr gates = compute_gates(sm, aux, config, mask);
    VarPtr pos = compute_positions(gates, config.p_max);
    return add(sm, position_logits(q, table, pos));
}

namespace {

std::vector<int> offset_index(int t, int table_rows, bool capped) {
    if (!capped && table_rows < t) {
        throw std::invalid_argument("relative_pe_logits: table of " + std::to_string(table_rows) +
                                    " offsets cannot cover T=" + std::to_string(t));
    }
    std::vector<int> idx(static_cast<size_t>(t) * t, 0);
    for (int i = 0; i < t; ++i) {
        for (int j = 0; j <= i; ++j) {
            int off = i - j;
            if (capped) off = std::min(off, table_rows - 1);
            idx[static_cast<size_t>(i) * t + j] = off;
        }
        // j > i stays 0; those pairs are masked
    }
    return idx;
}

int mask_side(const std::vector<uint8_t>& mask) {
    int t = static_cast<int>(std::lround(std::sqrt(static_cast<double>(mask.size()))));
    if (static_cast<size_t>(t) * t != mask.size()) {
        throw std::invalid_argument("pe: mask is not a square matrix");
    }
    return t;
}

}  // namespace

VarPtr relative_pe_logits(const VarPtr& q, const VarPtr& k, const VarPtr& rel_table,
                          const std::vector<uint8_t>& mask) {
    int t = mask_side(mask);
    VarPtr sm = scaled_masked_logits(q, k, mask);
    VarPtr z = matmul_nt(q, rel_table);
    return add(sm, gather_per_row(z, offset_index(t, rel_table->val.dim(0), false), t));
}

VarPtr relative_capped_logits(const VarPtr& q, const VarPtr& k, const VarPtr& rel_table,
                              const std::vector<uint8_t>& mask) {
    int t = mask_side(mask);
    if (rel_table->val.dim(0) < 1) {
        throw std::invalid_argument("relative_capped_logits: empty offset table");
    }
    VarPtr sm = scaled_masked_logits(q, k, mask);
    VarPtr z = matmul_nt(q, rel_table);
    return add(sm, gather_per_row(z, offset_index(t, rel_table->val.dim(0), true), t));
}

VarPtr cope_alibi_logits(const VarPtr& q, const VarPtr& k, const VarPtr& gate_aux,
                         const std::vector<uint8_t>& mask, const VarPtr& slopes,
                         const CopeConfig& config) {
    if (slopes->val.rank() != 1 || slopes->val.dim(0) != q->val.dim(-3)) {
        throw std::invalid_argument("cope_alibi_logits: slope count " + slopes->val.shape_str() +
                                    " does not match " + std::to_string(q->val.dim(-3)) + " heads");
    }
    VarPtr sm = scaled_masked_logits(q, k, mask);
    VarPtr gates = compute_gates(sm, gate_aux, config, mask);
    VarPtr pos = compute_positions(gates, config.p_max);
    return add(sm, per_head_scale(pos, slopes));
}

VarPtr absolute_pe_add(const VarPtr& h, const VarPtr& table) {
    if (h->val.rank() != 3 || table->val.rank() != 2 || h->val.dim(2) != table->val.dim(1)) {
        throw std::invalid_argument("absolute_pe_add: expected h [B,T,d] and table [T_max,d], got " +
                                    h->val.shape_str() + " and " + table->val.shape_str());
    }
    int b = h->val.dim(0), t = h->val.dim(1), d = h->val.dim(2);
    if (t > table->val.dim(0)) {
        throw std::invalid_argument("absolute_pe_add: sequence of " + std::to_string(t) +
                                    " exceeds position table of " + std::to_string(table->val.dim(0)));
    }
    std::vector<int> ids(static_cast<size_t>(b) * t);
    for (int bb = 0; bb < b; ++bb) {
        for (int tt = 0; tt < t; ++tt) ids[static_cast<size_t>(bb) * t + tt] = tt;
    }
    return add(h, reshape(embedding(table, ids), {b, t, d}));
}

namespace {

void record_trace(AttentionTrace* trace, int layer, int n_heads, int t, const VarPtr& gates,
                  const VarPtr& pos, const VarPtr& pos_term) {
    if (!trace) return;
    size_t blk = static_cast<size_t>(t) * t;
    for (int h = 0; h < n_heads; ++h) {
        auto slice = [&](const VarPtr& v) {
            Tensor m({t, t});
            std::copy(v->val.data.begin() + h * blk, v->val.data.begin() + (h + 1) * blk, m.data.begin());
            return m;
        };
        trace->gates[static_cast<size_t>(layer) * n_heads + h] = slice(gates);
        trace->positions[static_cast<size_t>(layer) * n_heads + h] = slice(pos);
        if (pos_term) trace->pos_logits[static_cast<size_t>(layer) * n_heads + h] = slice(pos_term);
    }
}

}  // namespace

VarPtr pe_attention_logits(const PEVariant& pe, const PETables& tables, const VarPtr& q,
                           const VarPtr& k, const VarPtr& v, const VarPtr& gate_aux,
                           const std::vector<uint8_t>& mask, AttentionTrace* trace, int layer) {
    int t = mask_side(mask);
    int n_heads = q->val.dim(-3);
    if (trace && q->val.dim(0) != 1) {
        throw std::invalid_argument("pe_attention_logits: trace capture needs batch size 1");
    }

    VarPtr qq = q, kk = k;
    if (pe.uses_rope()) {
        qq = rope_apply(qq, pe.rope_base);
        kk = rope_apply(kk, pe.rope_base);
    }
    VarPtr sm = scaled_masked_logits(qq, kk, mask);

    VarPtr logits = sm;
    if (pe.uses_cope()) {
        VarPtr aux = gate_aux_logits(qq, v, gate_aux, mask, pe.cope);
        VarPtr gates = compute_gates(sm, aux, pe.cope, mask);
        VarPtr pos = compute_positions(gates, pe.cope.p_max);
        if (pe.kind == PEKind::cope) {
            VarPtr term = position_logits(qq, tables.cope_table, pos);
            logits = add(logits, term);
            record_trace(trace, layer, n_heads, t, gates, pos, term);
        } else {
            VarPtr term = per_head_scale(pos, tables.alibi_m);
            logits = add(logits, term);
            record_trace(trace, layer, n_heads, t, gates, pos, term);
        }
    }
    if (pe.uses_relative()) {
        bool capped = pe.kind == PEKind::relative_capped;
        VarPtr z = matmul_nt(qq, tables.rel_table);
        logits = add(logits, gather_per_row(z, offset_index(t, tables.rel_table->val.dim(0), capped), t));
    }
    return logits;
}

}  // namespace copelab

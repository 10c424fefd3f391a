#pragma once

#include <optional>
#include <string>
#include <vector>

#include "copelab/autograd.hpp"

namespace copelab {

enum class PEKind { none, absolute, relative, relative_capped, rope, cope, cope_alibi };
enum class GateSource { attn_keys, sep_keys, val_gates };
enum class CombineWith { none, relative, rope };

std::string to_string(PEKind k);
std::string to_string(GateSource g);
PEKind pe_kind_from_string(const std::string& s);
GateSource gate_source_from_string(const std::string& s);

struct CopeConfig {
    int p_max = 64;
    GateSource gate_source = GateSource::attn_keys;
    bool share_across_layers = false;
    std::vector<double> alibi_slopes;  // cope_alibi: fixed per-head slopes
    bool alibi_learned = false;        // cope_alibi: slopes are parameters, init 0
    // test-only hook for the reduction/degenerate-gate properties; not
    // reachable from config files
    std::optional<double> gate_override;
};

struct PEVariant {
    PEKind kind = PEKind::none;
    CombineWith combine_with = CombineWith::none;
    CopeConfig cope;
    int rel_cap = 0;           // relative_capped: table rows
    double rope_base = 10000.0;

    bool uses_cope() const { return kind == PEKind::cope || kind == PEKind::cope_alibi; }
    bool uses_rope() const { return kind == PEKind::rope || combine_with == CombineWith::rope; }
    bool uses_relative() const {
        return kind == PEKind::relative || kind == PEKind::relative_capped ||
               combine_with == CombineWith::relative;
    }
};

// Per-head maps captured during a forward pass for the analysis dumps.
// Entry (layer*n_heads + head) is a row-major T x T matrix.
struct AttentionTrace {
    int n_layers = 0;
    int n_heads = 0;
    int t = 0;
    std::vector<Tensor> gates;       // g_ij, exactly 0 above the diagonal
    std::vector<Tensor> positions;   // p_ij after clamping
    std::vector<Tensor> pos_logits;  // additive positional term z_i[p_ij]
};

// Parameter handles one attention layer needs for its PE variant; unused
// entries stay null.
struct PETables {
    VarPtr cope_table;  // [p_max, d_head]
    VarPtr rel_table;   // [rows, d_head], rows = context or cap
    VarPtr alibi_m;     // [H] (learned slopes or fixed constants)
};

// lower-triangular (j <= i) boolean mask, row-major T x T
std::vector<uint8_t> causal_mask(int t);

// (q k^T) / sqrt(d_head) with masked pairs pushed to kMaskedLogit
VarPtr scaled_masked_logits(const VarPtr& q, const VarPtr& k, const std::vector<uint8_t>& mask);

// sigma of the selected logits; exactly 0 at masked pairs. `aux` carries
// the alternative gate logits for sep_keys / val_gates (already scaled and
// masked) and must be null for attn_keys.
VarPtr compute_gates(const VarPtr& scaled_masked, const VarPtr& aux, const CopeConfig& config,
                     const std::vector<uint8_t>& mask);

// p_ij = sum_{k=j..i} g_ik via reversed cumulative sum, clamped to p_max-1
VarPtr compute_positions(const VarPtr& gates, int p_max);

// interpolated q_i . e[p] term (Eqs. z_i[p] then lerp)
VarPtr position_logits(const VarPtr& q, const VarPtr& table, const VarPtr& positions);

// Full CoPE pre-softmax logits: scaled masked q k^T plus the interpolated
// positional term. `gate_keys` carries the sep-keys projection of the
// hidden states (per head); null unless gate_source = sep_keys.
VarPtr cope_attention_logits(const VarPtr& q, const VarPtr& k, const VarPtr& v,
                             const VarPtr& gate_keys, const std::vector<uint8_t>& mask,
                             const VarPtr& table, const CopeConfig& config);

// scaled masked q k^T + q_i . e[i-j]
VarPtr relative_pe_logits(const VarPtr& q, const VarPtr& k, const VarPtr& rel_table,
                          const std::vector<uint8_t>& mask);
// lookup index min(i-j, cap-1)
VarPtr relative_capped_logits(const VarPtr& q, const VarPtr& k, const VarPtr& rel_table,
                              const std::vector<uint8_t>& mask);

// scaled masked q k^T + m_h * p_ij (no embedding table)
VarPtr cope_alibi_logits(const VarPtr& q, const VarPtr& k, const VarPtr& gate_aux,
                         const std::vector<uint8_t>& mask, const VarPtr& slopes,
                         const CopeConfig& config);

// h_j + P(j) at the embedding layer; errors when T exceeds the table
VarPtr absolute_pe_add(const VarPtr& h, const VarPtr& table);

// Dispatch for one attention layer: returns pre-softmax logits [B,H,T,T].
// q/k/v: [B,H,T,dh]. When `trace` is non-null (B must be 1) the CoPE gate,
// position and positional-term maps are recorded per head.
VarPtr pe_attention_logits(const PEVariant& pe, const PETables& tables, const VarPtr& q,
                           const VarPtr& k, const VarPtr& v, const VarPtr& gate_aux,
                           const std::vector<uint8_t>& mask, AttentionTrace* trace = nullptr,
                           int layer = 0);

}  // namespace copelab

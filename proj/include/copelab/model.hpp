#pragma once

#include <string>
#include <vector>

#include "copelab/adamw.hpp"
#include "copelab/pe.hpp"
#include "copelab/rng.hpp"

namespace copelab {

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 64;
    int n_heads = 2;
    int n_layers = 2;
    int context_T = 64;
    double ffn_mult = 4.0;
    bool tie_head = false;
    PEVariant pe;

    int d_head() const { return d_model / n_heads; }
    int d_ffn() const { return static_cast<int>(ffn_mult * d_model); }
    void validate() const;
};

// All model parameters, each with a stable name used by checkpoints.
class TransformerParams {
  public:
    struct Layer {
        VarPtr wq, wk, wv, wo;
        VarPtr bq, bk, bv, bo;
        VarPtr wg;  // sep-keys gate projection (optional)
        VarPtr ln1_g, ln1_b, ln2_g, ln2_b;
        VarPtr w1, b1, w2, b2;
        VarPtr cope_table;  // null when shared across layers
        VarPtr rel_table;
        VarPtr alibi_m;  // learned slopes only
    };

    VarPtr tok_emb;
    VarPtr abs_table;
    VarPtr shared_cope_table;
    std::vector<Layer> layers;
    VarPtr lnf_g, lnf_b;
    VarPtr head_w;  // null when tied to tok_emb
    VarPtr head_b;

    static TransformerParams init(const ModelConfig& cfg, uint64_t seed);

    const std::vector<std::pair<std::string, VarPtr>>& named() const { return named_; }
    std::vector<VarPtr> all() const;
    VarPtr find(const std::string& name) const;
    void zero_grads() const;
    size_t count_scalars() const;

    // tables the PE dispatch needs for a given layer
    PETables tables_for_layer(int layer, const ModelConfig& cfg) const;

  private:
    std::vector<std::pair<std::string, VarPtr>> named_;
    VarPtr reg(const std::string& name, Tensor t);
};

// logits over the vocabulary for every position, shape [B,T,V]
VarPtr model_logits(const TransformerParams& params, const ModelConfig& cfg,
                    const std::vector<int>& tokens, int batch, int t,
                    AttentionTrace* trace = nullptr);

struct ForwardResult {
    VarPtr loss;    // scalar
    VarPtr logits;  // [B,T,V]
};

// mean masked cross-entropy over answer positions
ForwardResult model_forward_loss(const TransformerParams& params, const ModelConfig& cfg,
                                 const std::vector<int>& tokens, const std::vector<int>& targets,
                                 const std::vector<uint8_t>& loss_mask, int batch, int t);

// One pre-norm attention block (without the residual), exposed for tests:
// h [B,T,d_model] already normalized -> attention output [B,T,d_model].
VarPtr attention_layer(const TransformerParams& params, const ModelConfig& cfg, int layer,
                       const VarPtr& h, const std::vector<uint8_t>& mask,
                       AttentionTrace* trace = nullptr);

}  // namespace copelab

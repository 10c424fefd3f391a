#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "copelab/tensor.hpp"

namespace copelab {

// Additive constant standing in for -inf on masked attention logits.
// Low enough that sigmoid/softmax saturate to exactly 0 in double
// precision, high enough that adding finite terms never overflows.
inline constexpr double kMaskedLogit = -1e30;

// Node in the reverse-mode graph. `val.grad` is the cotangent buffer;
// `pull` reads it and accumulates into the parents' buffers.
struct Var;
using VarPtr = std::shared_ptr<Var>;

struct Var {
    Tensor val;
    bool requires_grad = true;
    std::vector<VarPtr> parents;
    std::function<void(Var&)> pull;

    size_t numel() const { return val.numel(); }
    const std::vector<int>& shape() const { return val.shape; }
};

VarPtr make_var(Tensor t, bool requires_grad = true);
VarPtr make_const(Tensor t);

// Runs reverse-mode accumulation from a scalar root (seeds grad = 1).
void backward(const VarPtr& root);

// Scoped switch that stops ops from recording the graph (evaluation passes).
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// ----- elementwise / shape ops -----
VarPtr add(const VarPtr& a, const VarPtr& b);
VarPtr mul(const VarPtr& a, const VarPtr& b);
VarPtr scale(const VarPtr& x, double c);
VarPtr add_bias(const VarPtr& x, const VarPtr& b);  // [...,n] + [n]
VarPtr sigmoid(const VarPtr& x);
VarPtr tanh_op(const VarPtr& x);
VarPtr gelu(const VarPtr& x);
VarPtr sum(const VarPtr& x);  // -> scalar [1]
VarPtr reshape(const VarPtr& x, std::vector<int> shape);

// ----- matrix products -----
// a: [...,m,k], b: [k,n] (shared) or [...,k,n] (same leading dims)
VarPtr matmul(const VarPtr& a, const VarPtr& b);
// a: [...,m,k], b: [n,k] or [...,n,k]; returns a * b^T = [...,m,n]
VarPtr matmul_nt(const VarPtr& a, const VarPtr& b);

// ----- attention plumbing -----
// mask has the trailing shape of x and is broadcast over leading dims;
// true = keep. Masked entries get kMaskedLogit added.
VarPtr add_causal_mask(const VarPtr& x, const std::vector<uint8_t>& mask, size_t mask_len);
// Softmax over the last dim restricted to unmasked entries; masked
// outputs are exactly 0. A fully masked row is a domain error.
VarPtr masked_softmax_rows(const VarPtr& x, const std::vector<uint8_t>& mask, size_t mask_len);
// out[..., j] = sum_{t >= j} x[..., t]
VarPtr reversed_cumsum(const VarPtr& x);
VarPtr clamp_max(const VarPtr& x, double cap);
// z: [...,P], pos: [...,T] with values in [0, P-1];
// out[...,t] = lerp(z[...,floor(p)], z[...,ceil(p)], frac(p)), p = pos[...,t].
// Gradients flow into both z and pos (floor/ceil indices held fixed).
VarPtr interp_gather(const VarPtr& z, const VarPtr& pos);
// z: [...,T,P], idx: [T*T] row-major ints in [0,P); out[...,i,j] = z[...,i,idx[i,j]]
VarPtr gather_per_row(const VarPtr& z, const std::vector<int>& idx, int t_rows);
// x: [...,H,T,T] scaled per head h by m[h] (m: [H])
VarPtr per_head_scale(const VarPtr& x, const VarPtr& m);
// rotary encoding over the last dim (pairs of coords), position = index in dim -2
VarPtr rope_apply(const VarPtr& x, double base);

// ----- layers -----
VarPtr layer_norm(const VarPtr& x, const VarPtr& gain, const VarPtr& bias, double eps = 1e-5);
// table: [V,d], ids row-major, len = product(out leading dims)
VarPtr embedding(const VarPtr& table, const std::vector<int>& ids);
// [B,T,H*dh] -> [B,H,T,dh]
VarPtr split_heads(const VarPtr& x, int n_heads);
// [B,H,T,dh] -> [B,T,H*dh]
VarPtr merge_heads(const VarPtr& x);
// mean over masked positions of -log softmax(logits)[target].
// logits: [...,V]; targets/mask flat over leading dims. Empty mask is a
// domain error.
VarPtr cross_entropy_masked(const VarPtr& logits, const std::vector<int>& targets,
                            const std::vector<uint8_t>& mask);

}  // namespace copelab

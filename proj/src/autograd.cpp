#include "copelab/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace copelab {

namespace {

bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

bool tracking(const std::initializer_list<VarPtr>& parents) {
    if (!grad_mode_flag()) return false;
    for (const auto& p : parents) {
        if (p && p->requires_grad) return true;
    }
    return false;
}

VarPtr make_node(Tensor t, std::initializer_list<VarPtr> parents, std::function<void(Var&)> pull) {
    auto v = std::make_shared<Var>();
    v->val = std::move(t);
    if (tracking(parents)) {
        v->requires_grad = true;
        v->parents.assign(parents);
        v->pull = std::move(pull);
    } else {
        v->requires_grad = false;
    }
    return v;
}

// leading-dims bookkeeping for ops that act on trailing blocks
size_t lead_count(const Tensor& t, size_t block) { return t.numel() / block; }

void check_last_dim(const Tensor& t, const char* op) {
    if (t.rank() < 1) throw std::invalid_argument(std::string(op) + ": tensor has no dimensions");
}

}  // namespace

bool grad_enabled() { return grad_mode_flag(); }

NoGradGuard::NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
NoGradGuard::~NoGradGuard() { grad_mode_flag() = prev_; }

VarPtr make_var(Tensor t, bool requires_grad) {
    auto v = std::make_shared<Var>();
    v->val = std::move(t);
    v->requires_grad = requires_grad;
    return v;
}

VarPtr make_const(Tensor t) { return make_var(std::move(t), false); }

void backward(const VarPtr& root) {
    if (root->numel() != 1) {
        throw std::invalid_argument("backward: root must be a scalar, got " + root->val.shape_str());
    }
    // iterative post-order topological sort
    std::vector<Var*> order;
    std::unordered_set<Var*> done;
    std::vector<std::pair<Var*, size_t>> stack;
    stack.push_back({root.get(), 0});
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (done.count(node)) {
            stack.pop_back();
            continue;
        }
        if (next < node->parents.size()) {
            Var* p = node->parents[next].get();
            ++next;
            if (p->requires_grad && !done.count(p)) {
                stack.push_back({p, 0});
            }
        } else {
            done.insert(node);
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Var* v : order) v->val.ensure_grad();
    root->val.grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Var* v = *it;
        if (v->pull) v->pull(*v);
    }
}

// ----------------------------- elementwise -----------------------------

VarPtr add(const VarPtr& a, const VarPtr& b) {
    if (!same_shape(a->val, b->val)) {
        throw std::invalid_argument("add: shape mismatch " + a->val.shape_str() + " vs " + b->val.shape_str());
    }
    Tensor out(a->shape());
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] = a->val.data[i] + b->val.data[i];
    return make_node(std::move(out), {a, b}, [a, b](Var& self) {
        for (size_t i = 0; i < self.numel(); ++i) {
            double g = self.val.grad[i];
            if (a->requires_grad) a->val.grad[i] += g;
            if (b->requires_grad) b->val.grad[i] += g;
        }
    });
}

VarPtr mul(const VarPtr& a, const VarPtr& b) {
    if (!same_shape(a->val, b->val)) {
        throw std::invalid_argument("mul: shape mismatch " + a->val.shape_str() + " vs " + b->val.shape_str());
    }
    Tensor out(a->shape());
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] = a->val.data[i] * b->val.data[i];
    return make_node(std::move(out), {a, b}, [a, b](Var& self) {
        for (size_t i = 0; i < self.numel(); ++i) {
            double g = self.val.grad[i];
            if (a->requires_grad) a->val.grad[i] += g * b->val.data[i];
            if (b->requires_grad) b->val.grad[i] += g * a->val.data[i];
        }
    });
}

VarPtr scale(const VarPtr& x, double c) {
    Tensor out(x->shape());
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] = x->val.data[i] * c;
    return make_node(std::move(out), {x}, [x, c](Var& self) {
        for (size_t i = 0; i < self.numel(); ++i) x->val.grad[i] += self.val.grad[i] * c;
    });
}

VarPtr add_bias(const VarPtr& x, const VarPtr& b) {
    check_last_dim(x->val, "add_bias");
    int n = x->val.dim(-1);
    if (b->val.rank() != 1 || b->val.dim(0) != n) {
        throw std::invalid_argument("add_bias: bias " + b->val.shape_str() + " does not match last dim of " +
                                    x->val.shape_str());
    }
    Tensor out(x->shape());
    size_t rows = lead_count(x->val, static_cast<size_t>(n));
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = x->val.data.data() + r * n;
        double* sr = out.data.data() + r * n;
        for (int j = 0; j < n; ++j) sr[j] = xr[j] + b->val.data[j];
    }
    return make_node(std::move(out), {x, b}, [x, b, rows, n](Var& self) {
        for (size_t r = 0; r < rows; ++r) {
            const double* g = self.val.grad.data() + r * n;
            if (x->requires_grad) {
                double* xg = x->val.grad.data() + r * n;
                for (int j = 0; j < n; ++j) xg[j] += g[j];
            }
            if (b->requires_grad) {
                for (int j = 0; j < n; ++j) b->val.grad[j] += g[j];
            }
        }
    });
}

VarPtr sigmoid(const VarPtr& x) {
    Tensor out(x->shape());
    for (size_t i = 0; i < out.numel(); ++i) {
        double v = x->val.data[i];
        // branch keeps both tails exact: sigma(-1e30) == 0, sigma(1e30) == 1
        if (v >= 0) {
            out.data[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
            double e = std::exp(v);
            out.data[i] = e / (1.0 + e);
        }
    }
    return make_node(std::move(out), {x}, [x](Var& self) {
        for (size_t i = 0; i < self.numel(); ++i) {
            double s = self.val.data[i];
            x->val.grad[i] += self.val.grad[i] * s * (1.0 - s);
        }
    });
}

VarPtr tanh_op(const VarPtr& x) {
    Tensor out(x->shape());
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] = std::tanh(x->val.data[i]);
    return make_node(std::move(out), {x}, [x](Var& self) {
        for (size_t i = 0; i < self.numel(); ++i) {
            double t = self.val.data[i];
            x->val.grad[i] += self.val.grad[i] * (1.0 - t * t);
        }
    });
}

VarPtr gelu(const VarPtr& x) {
    // exact erf form
    Tensor out(x->shape());
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (size_t i = 0; i < out.numel(); ++i) {
        double v = x->val.data[i];
        out.data[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    return make_node(std::move(out), {x}, [x](Var& self) {
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        for (size_t i = 0; i < self.numel(); ++i) {
            double v = x->val.data[i];
            double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            x->val.grad[i] += self.val.grad[i] * (cdf + v * pdf);
        }
    });
}

VarPtr sum(const VarPtr& x) {
    Tensor out({1});
    double acc = 0.0;
    for (double v : x->val.data) acc += v;
    out.data[0] = acc;
    return make_node(std::move(out), {x}, [x](Var& self) {
        double g = self.val.grad[0];
        for (size_t i = 0; i < x->numel(); ++i) x->val.grad[i] += g;
    });
}

VarPtr reshape(const VarPtr& x, std::vector<int> shape) {
    if (Tensor::numel_of(shape) != x->numel()) {
        throw std::invalid_argument("reshape: cannot view " + x->val.shape_str() + " as " +
                                    Tensor::shape_str(shape));
    }
    Tensor out(std::move(shape), x->val.data);
    return make_node(std::move(out), {x}, [x](Var& self) {
        for (size_t i = 0; i < self.numel(); ++i) x->val.grad[i] += self.val.grad[i];
    });
}

// ----------------------------- matrix products -----------------------------

namespace {

struct MatDims {
    size_t lead;  // product of leading dims
    int m, k, n;
    bool b_shared;  // b has rank 2 and is shared across leading dims
};

MatDims matmul_dims(const Tensor& a, const Tensor& b, bool b_transposed, const char* op) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw std::invalid_argument(std::string(op) + ": need rank >= 2, got " + a.shape_str() + " and " +
                                    b.shape_str());
    }
    MatDims d{};
    d.m = a.dim(-2);
    d.k = a.dim(-1);
    int bk = b_transposed ? b.dim(-1) : b.dim(-2);
    d.n = b_transposed ? b.dim(-2) : b.dim(-1);
    if (bk != d.k) {
        throw std::invalid_argument(std::string(op) + ": inner dimensions disagree: " + a.shape_str() + " vs " +
                                    b.shape_str());
    }
    d.lead = a.numel() / (static_cast<size_t>(d.m) * d.k);
    d.b_shared = (b.rank() == 2);
    if (!d.b_shared) {
        size_t b_lead = b.numel() / (static_cast<size_t>(bk) * d.n);
        if (b_lead != d.lead || b.rank() != a.rank()) {
            throw std::invalid_argument(std::string(op) + ": leading dims disagree: " + a.shape_str() + " vs " +
                                        b.shape_str());
        }
    }
    return d;
}

std::vector<int> matmul_out_shape(const Tensor& a, int m, int n) {
    std::vector<int> s(a.shape.begin(), a.shape.end() - 2);
    s.push_back(m);
    s.push_back(n);
    return s;
}

}  // namespace

VarPtr matmul(const VarPtr& a, const VarPtr& b) {
    MatDims d = matmul_dims(a->val, b->val, false, "matmul");
    Tensor out(matmul_out_shape(a->val, d.m, d.n));
    const size_t a_blk = static_cast<size_t>(d.m) * d.k;
    const size_t b_blk = static_cast<size_t>(d.k) * d.n;
    const size_t c_blk = static_cast<size_t>(d.m) * d.n;
    for (size_t l = 0; l < d.lead; ++l) {
        const double* A = a->val.data.data() + l * a_blk;
        const double* B = b->val.data.data() + (d.b_shared ? 0 : l * b_blk);
        double* C = out.data.data() + l * c_blk;
        for (int i = 0; i < d.m; ++i) {
            double* crow = C + static_cast<size_t>(i) * d.n;
            for (int kk = 0; kk < d.k; ++kk) {
                double av = A[static_cast<size_t>(i) * d.k + kk];
                const double* brow = B + static_cast<size_t>(kk) * d.n;
                for (int j = 0; j < d.n; ++j) crow[j] += av * brow[j];
            }
        }
    }
    return make_node(std::move(out), {a, b}, [a, b, d, a_blk, b_blk, c_blk](Var& self) {
        for (size_t l = 0; l < d.lead; ++l) {
            const double* A = a->val.data.data() + l * a_blk;
            const double* B = b->val.data.data() + (d.b_shared ? 0 : l * b_blk);
            const double* G = self.val.grad.data() + l * c_blk;
            if (a->requires_grad) {
                double* dA = a->val.grad.data() + l * a_blk;
                // dA = G * B^T
                for (int i = 0; i < d.m; ++i) {
                    const double* grow = G + static_cast<size_t>(i) * d.n;
                    for (int kk = 0; kk < d.k; ++kk) {
                        const double* brow = B + static_cast<size_t>(kk) * d.n;
                        double acc = 0.0;
                        for (int j = 0; j < d.n; ++j) acc += grow[j] * brow[j];
                        dA[static_cast<size_t>(i) * d.k + kk] += acc;
                    }
                }
            }
            if (b->requires_grad) {
                double* dB = b->val.grad.data() + (d.b_shared ? 0 : l * b_blk);
                // dB += A^T * G
                for (int i = 0; i < d.m; ++i) {
                    const double* grow = G + static_cast<size_t>(i) * d.n;
                    for (int kk = 0; kk < d.k; ++kk) {
                        double av = A[static_cast<size_t>(i) * d.k + kk];
                        double* dbrow = dB + static_cast<size_t>(kk) * d.n;
                        for (int j = 0; j < d.n; ++j) dbrow[j] += av * grow[j];
                    }
                }
            }
        }
    });
}

VarPtr matmul_nt(const VarPtr& a, const VarPtr& b) {
    MatDims d = matmul_dims(a->val, b->val, true, "matmul_nt");
    Tensor out(matmul_out_shape(a->val, d.m, d.n));
    const size_t a_blk = static_cast<size_t>(d.m) * d.k;
    const size_t b_blk = static_cast<size_t>(d.n) * d.k;
    const size_t c_blk = static_cast<size_t>(d.m) * d.n;
    for (size_t l = 0; l < d.lead; ++l) {
        const double* A = a->val.data.data() + l * a_blk;
        const double* B = b->val.data.data() + (d.b_shared ? 0 : l * b_blk);
        double* C = out.data.data() + l * c_blk;
        for (int i = 0; i < d.m; ++i) {
            const double* arow = A + static_cast<size_t>(i) * d.k;
            double* crow = C + static_cast<size_t>(i) * d.n;
            for (int j = 0; j < d.n; ++j) {
                const double* brow = B + static_cast<size_t>(j) * d.k;
                double acc = 0.0;
                for (int kk = 0; kk < d.k; ++kk) acc += arow[kk] * brow[kk];
                crow[j] = acc;
            }
        }
    }
    return make_node(std::move(out), {a, b}, [a, b, d, a_blk, b_blk, c_blk](Var& self) {
        for (size_t l = 0; l < d.lead; ++l) {
            const double* A = a->val.data.data() + l * a_blk;
            const double* B = b->val.data.data() + (d.b_shared ? 0 : l * b_blk);
            const double* G = self.val.grad.data() + l * c_blk;
            if (a->requires_grad) {
                double* dA = a->val.grad.data() + l * a_blk;
                // dA += G * B
                for (int i = 0; i < d.m; ++i) {
                    const double* grow = G + static_cast<size_t>(i) * d.n;
                    double* darow = dA + static_cast<size_t>(i) * d.k;
                    for (int j = 0; j < d.n; ++j) {
                        double gv = grow[j];
                        const double* brow = B + static_cast<size_t>(j) * d.k;
                        for (int kk = 0; kk < d.k; ++kk) darow[kk] += gv * brow[kk];
                    }
                }
            }
            if (b->requires_grad) {
                double* dB = b->val.grad.data() + (d.b_shared ? 0 : l * b_blk);
                // dB += G^T * A
                for (int i = 0; i < d.m; ++i) {
                    const double* grow = G + static_cast<size_t>(i) * d.n;
                    const double* arow = A + static_cast<size_t>(i) * d.k;
                    for (int j = 0; j < d.n; ++j) {
                        double gv = grow[j];
                        double* dbrow = dB + static_cast<size_t>(j) * d.k;
                        for (int kk = 0; kk < d.k; ++kk) dbrow[kk] += gv * arow[kk];
                    }
                }
            }
        }
    });
}

// ----------------------------- attention plumbing -----------------------------

VarPtr add_causal_mask(const VarPtr& x, const std::vector<uint8_t>& mask, size_t mask_len) {
    if (mask.size() != mask_len || mask_len == 0 || x->numel() % mask_len != 0) {
        throw std::invalid_argument("add_causal_mask: mask length " + std::to_string(mask.size()) +
                                    " does not tile " + x->val.shape_str());
    }
    Tensor out(x->shape());
    size_t blocks = x->numel() / mask_len;
    for (size_t b = 0; b < blocks; ++b) {
        const double* xr = x->val.data.data() + b * mask_len;
        double* sr = out.data.data() + b * mask_len;
        for (size_t i = 0; i < mask_len; ++i) sr[i] = mask[i] ? xr[i] : xr[i] + kMaskedLogit;
    }
    return make_node(std::move(out), {x}, [x](Var& self) {
        for (size_t i = 0; i < self.numel(); ++i) x->val.grad[i] += self.val.grad[i];
    });
}

VarPtr masked_softmax_rows(const VarPtr& x, const std::vector<uint8_t>& mask, size_t mask_len) {
    check_last_dim(x->val, "masked_softmax_rows");
    int n = x->val.dim(-1);
    if (mask.size() != mask_len || mask_len % n != 0 || x->numel() % mask_len != 0) {
        throw std::invalid_argument("masked_softmax_rows: mask length " + std::to_string(mask.size()) +
                                    " does not tile " + x->val.shape_str());
    }
    Tensor out(x->shape());
    size_t rows = lead_count(x->val, static_cast<size_t>(n));
    size_t mask_rows = mask_len / n;
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = x->val.data.data() + r * n;
        const uint8_t* mr = mask.data() + (r % mask_rows) * n;
        double* yr = out.data.data() + r * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j) {
            if (mr[j] && xr[j] > mx) mx = xr[j];
        }
        if (!std::isfinite(mx)) {
            throw std::domain_error("masked_softmax_rows: fully masked row " + std::to_string(r));
        }
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            if (mr[j]) {
                yr[j] = std::exp(xr[j] - mx);
                z += yr[j];
            } else {
                yr[j] = 0.0;
            }
        }
        for (int j = 0; j < n; ++j) {
            if (mr[j]) yr[j] /= z;
        }
    }
    auto mask_copy = std::make_shared<std::vector<uint8_t>>(mask);
    return make_node(std::move(out), {x}, [x, rows, mask_rows, n, mask_copy](Var& self) {
        for (size_t r = 0; r < rows; ++r) {
            const double* y = self.val.data.data() + r * n;
            const double* g = self.val.grad.data() + r * n;
            const uint8_t* mr = mask_copy->data() + (r % mask_rows) * n;
            double dot = 0.0;
            for (int j = 0; j < n; ++j) {
                if (mr[j]) dot += g[j] * y[j];
            }
            double* xg = x->val.grad.data() + r * n;
            for (int j = 0; j < n; ++j) {
                if (mr[j]) xg[j] += y[j] * (g[j] - dot);
            }
        }
    });
}

VarPtr reversed_cumsum(const VarPtr& x) {
    check_last_dim(x->val, "reversed_cumsum");
    int n = x->val.dim(-1);
    Tensor out(x->shape());
    size_t rows = lead_count(x->val, static_cast<size_t>(n));
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = x->val.data.data() + r * n;
        double* yr = out.data.data() + r * n;
        double acc = 0.0;
        for (int j = n - 1; j >= 0; --j) {
            acc += xr[j];
            yr[j] = acc;
        }
    }
    // adjoint of a reversed cumulative sum is the forward cumulative sum
    return make_node(std::move(out), {x}, [x, rows, n](Var& self) {
        for (size_t r = 0; r < rows; ++r) {
            const double* g = self.val.grad.data() + r * n;
            double* xg = x->val.grad.data() + r * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) {
                acc += g[j];
                xg[j] += acc;
            }
        }
    });
}

VarPtr clamp_max(const VarPtr& x, double cap) {
    Tensor out(x->shape());
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] = std::min(x->val.data[i], cap);
    return make_node(std::move(out), {x}, [x, cap](Var& self) {
        for (size_t i = 0; i < self.numel(); ++i) {
            if (x->val.data[i] <= cap) x->val.grad[i] += self.val.grad[i];
        }
    });
}

VarPtr interp_gather(const VarPtr& z, const VarPtr& pos) {
    check_last_dim(z->val, "interp_gather");
    check_last_dim(pos->val, "interp_gather");
    int p_count = z->val.dim(-1);
    int t = pos->val.dim(-1);
    size_t lead = lead_count(z->val, static_cast<size_t>(p_count));
    if (lead_count(pos->val, static_cast<size_t>(t)) != lead) {
        throw std::invalid_argument("interp_gather: leading dims disagree: " + z->val.shape_str() + " vs " +
                                    pos->val.shape_str());
    }
    Tensor out(pos->shape());
    for (size_t l = 0; l < lead; ++l) {
        const double* zr = z->val.data.data() + l * p_count;
        const double* pr = pos->val.data.data() + l * t;
        double* yr = out.data.data() + l * t;
        for (int j = 0; j < t; ++j) {
            double p = pr[j];
            if (p < 0.0 || p > p_count - 1) {
                throw std::logic_error("interp_gather: position " + std::to_string(p) +
                                       " outside [0, " + std::to_string(p_count - 1) + "]");
            }
            int fl = static_cast<int>(std::floor(p));
            int ce = static_cast<int>(std::ceil(p));
            double w = p - fl;
            yr[j] = w * zr[ce] + (1.0 - w) * zr[fl];
        }
    }
    return make_node(std::move(out), {z, pos}, [z, pos, lead, p_count, t](Var& self) {
        for (size_t l = 0; l < lead; ++l) {
            const double* zr = z->val.data.data() + l * p_count;
            const double* pr = pos->val.data.data() + l * t;
            const double* g = self.val.grad.data() + l * t;
            for (int j = 0; j < t; ++j) {
                double p = pr[j];
                int fl = static_cast<int>(std::floor(p));
                int ce = static_cast<int>(std::ceil(p));
                double w = p - fl;
                if (z->requires_grad) {
                    double* zg = z->val.grad.data() + l * p_count;
                    zg[ce] += g[j] * w;
                    zg[fl] += g[j] * (1.0 - w);
                }
                if (pos->requires_grad) {
                    pos->val.grad[l * t + j] += g[j] * (zr[ce] - zr[fl]);
                }
            }
        }
    });
}

VarPtr gather_per_row(const VarPtr& z, const std::vector<int>& idx, int t_rows) {
    if (z->val.rank() < 2) {
        throw std::invalid_argument("gather_per_row: need rank >= 2, got " + z->val.shape_str());
    }
    int p_count = z->val.dim(-1);
    if (z->val.dim(-2) != t_rows || idx.size() != static_cast<size_t>(t_rows) * t_rows) {
        throw std::invalid_argument("gather_per_row: index table does not match " + z->val.shape_str());
    }
    for (int v : idx) {
        if (v < 0 || v >= p_count) {
            throw std::invalid_argument("gather_per_row: index " + std::to_string(v) + " outside table of " +
                                        std::to_string(p_count) + " entries");
        }
    }
    size_t lead = z->numel() / (static_cast<size_t>(t_rows) * p_count);
    std::vector<int> out_shape(z->val.shape.begin(), z->val.shape.end() - 1);
    out_shape.push_back(t_rows);
    Tensor out(out_shape);
    for (size_t l = 0; l < lead; ++l) {
        const double* zb = z->val.data.data() + l * t_rows * p_count;
        double* yb = out.data.data() + l * t_rows * t_rows;
        for (int i = 0; i < t_rows; ++i) {
            for (int j = 0; j < t_rows; ++j) {
                yb[static_cast<size_t>(i) * t_rows + j] =
                    zb[static_cast<size_t>(i) * p_count + idx[static_cast<size_t>(i) * t_rows + j]];
            }
        }
    }
    auto idx_copy = std::make_shared<std::vector<int>>(idx);
    return make_node(std::move(out), {z}, [z, idx_copy, lead, t_rows, p_count](Var& self) {
        for (size_t l = 0; l < lead; ++l) {
            double* zg = z->val.grad.data() + l * t_rows * p_count;
            const double* g = self.val.grad.data() + l * t_rows * t_rows;
            for (int i = 0; i < t_rows; ++i) {
                for (int j = 0; j < t_rows; ++j) {
                    zg[static_cast<size_t>(i) * p_count + (*idx_copy)[static_cast<size_t>(i) * t_rows + j]] +=
                        g[static_cast<size_t>(i) * t_rows + j];
                }
            }
        }
    });
}

VarPtr per_head_scale(const VarPtr& x, const VarPtr& m) {
    if (x->val.rank() < 3 || m->val.rank() != 1) {
        throw std::invalid_argument("per_head_scale: need x rank >= 3 and m rank 1, got " + x->val.shape_str() +
                                    " and " + m->val.shape_str());
    }
    int h = x->val.dim(-3);
    if (m->val.dim(0) != h) {
        throw std::invalid_argument("per_head_scale: slope count " + std::to_string(m->val.dim(0)) +
                                    " does not match head count " + std::to_string(h));
    }
    size_t blk = static_cast<size_t>(x->val.dim(-2)) * x->val.dim(-1);
    size_t lead = x->numel() / (blk * h);
    Tensor out(x->shape());
    for (size_t l = 0; l < lead; ++l) {
        for (int hh = 0; hh < h; ++hh) {
            double mv = m->val.data[hh];
            const double* xr = x->val.data.data() + (l * h + hh) * blk;
            double* yr = out.data.data() + (l * h + hh) * blk;
            for (size_t i = 0; i < blk; ++i) yr[i] = mv * xr[i];
        }
    }
    return make_node(std::move(out), {x, m}, [x, m, lead, h, blk](Var& self) {
        for (size_t l = 0; l < lead; ++l) {
            for (int hh = 0; hh < h; ++hh) {
                double mv = m->val.data[hh];
                const double* xr = x->val.data.data() + (l * h + hh) * blk;
                const double* g = self.val.grad.data() + (l * h + hh) * blk;
                if (x->requires_grad) {
                    double* xg = x->val.grad.data() + (l * h + hh) * blk;
                    for (size_t i = 0; i < blk; ++i) xg[i] += g[i] * mv;
                }
                if (m->requires_grad) {
                    double acc = 0.0;
                    for (size_t i = 0; i < blk; ++i) acc += g[i] * xr[i];
                    m->val.grad[hh] += acc;
                }
            }
        }
    });
}

VarPtr rope_apply(const VarPtr& x, double base) {
    if (x->val.rank() < 2) {
        throw std::invalid_argument("rope_apply: need rank >= 2, got " + x->val.shape_str());
    }
    int d = x->val.dim(-1);
    int t = x->val.dim(-2);
    if (d % 2 != 0) {
        throw std::invalid_argument("rope_apply: head dim must be even, got " + std::to_string(d));
    }
    size_t lead = x->numel() / (static_cast<size_t>(t) * d);
    // angle(pos, pair m) = pos * base^(-2m/d)
    std::vector<double> cs(static_cast<size_t>(t) * (d / 2)), sn(static_cast<size_t>(t) * (d / 2));
    for (int p = 0; p < t; ++p) {
        for (int m2 = 0; m2 < d / 2; ++m2) {
            double theta = p * std::pow(base, -2.0 * m2 / d);
            cs[static_cast<size_t>(p) * (d / 2) + m2] = std::cos(theta);
            sn[static_cast<size_t>(p) * (d / 2) + m2] = std::sin(theta);
        }
    }
    Tensor out(x->shape());
    for (size_t l = 0; l < lead; ++l) {
        for (int p = 0; p < t; ++p) {
            const double* xr = x->val.data.data() + (l * t + p) * d;
            double* yr = out.data.data() + (l * t + p) * d;
            for (int m2 = 0; m2 < d / 2; ++m2) {
                double c = cs[static_cast<size_t>(p) * (d / 2) + m2];
                double s = sn[static_cast<size_t>(p) * (d / 2) + m2];
                double a = xr[2 * m2], b = xr[2 * m2 + 1];
                yr[2 * m2] = a * c - b * s;
                yr[2 * m2 + 1] = a * s + b * c;
            }
        }
    }
    return make_node(std::move(out), {x}, [x, lead, t, d, cs = std::move(cs), sn = std::move(sn)](Var& self) {
        for (size_t l = 0; l < lead; ++l) {
            for (int p = 0; p < t; ++p) {
                const double* g = self.val.grad.data() + (l * t + p) * d;
                double* xg = x->val.grad.data() + (l * t + p) * d;
                for (int m2 = 0; m2 < d / 2; ++m2) {
                    double c = cs[static_cast<size_t>(p) * (d / 2) + m2];
                    double s = sn[static_cast<size_t>(p) * (d / 2) + m2];
                    double ga = g[2 * m2], gb = g[2 * m2 + 1];
                    xg[2 * m2] += ga * c + gb * s;
                    xg[2 * m2 + 1] += -ga * s + gb * c;
                }
            }
        }
    });
}

// ----------------------------- layers -----------------------------

VarPtr layer_norm(const VarPtr& x, const VarPtr& gain, const VarPtr& bias, double eps) {
    check_last_dim(x->val, "layer_norm");
    int n = x->val.dim(-1);
    if (gain->val.rank() != 1 || gain->val.dim(0) != n || bias->val.rank() != 1 || bias->val.dim(0) != n) {
        throw std::invalid_argument("layer_norm: gain/bias do not match last dim of " + x->val.shape_str());
    }
    size_t rows = lead_count(x->val, static_cast<size_t>(n));
    Tensor out(x->shape());
    // cache normalized values and 1/sigma per row for the backward pass
    auto xhat = std::make_shared<std::vector<double>>(x->numel());
    auto rstd = std::make_shared<std::vector<double>>(rows);
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = x->val.data.data() + r * n;
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += xr[j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= n;
        double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        double* hr = xhat->data() + r * n;
        double* yr = out.data.data() + r * n;
        for (int j = 0; j < n; ++j) {
            hr[j] = (xr[j] - mean) * rs;
            yr[j] = hr[j] * gain->val.data[j] + bias->val.data[j];
        }
    }
    return make_node(std::move(out), {x, gain, bias}, [x, gain, bias, rows, n, xhat, rstd](Var& self) {
        for (size_t r = 0; r < rows; ++r) {
            const double* g = self.val.grad.data() + r * n;
            const double* hr = xhat->data() + r * n;
            if (gain->requires_grad) {
                for (int j = 0; j < n; ++j) gain->val.grad[j] += g[j] * hr[j];
            }
            if (bias->requires_grad) {
                for (int j = 0; j < n; ++j) bias->val.grad[j] += g[j];
            }
            if (x->requires_grad) {
                double gmean = 0.0, ghmean = 0.0;
                for (int j = 0; j < n; ++j) {
                    double gg = g[j] * gain->val.data[j];
                    gmean += gg;
                    ghmean += gg * hr[j];
                }
                gmean /= n;
                ghmean /= n;
                double* xg = x->val.grad.data() + r * n;
                double rs = (*rstd)[r];
                for (int j = 0; j < n; ++j) {
                    double gg = g[j] * gain->val.data[j];
                    xg[j] += (gg - gmean - hr[j] * ghmean) * rs;
                }
            }
        }
    });
}

VarPtr embedding(const VarPtr& table, const std::vector<int>& ids) {
    if (table->val.rank() != 2) {
        throw std::invalid_argument("embedding: table must be rank 2, got " + table->val.shape_str());
    }
    int v = table->val.dim(0);
    int d = table->val.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= v) {
            throw std::invalid_argument("embedding: id " + std::to_string(id) + " outside vocab of " +
                                        std::to_string(v));
        }
    }
    Tensor out({static_cast<int>(ids.size()), d});
    for (size_t r = 0; r < ids.size(); ++r) {
        const double* src = table->val.data.data() + static_cast<size_t>(ids[r]) * d;
        std::copy(src, src + d, out.data.data() + r * d);
    }
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    return make_node(std::move(out), {table}, [table, ids_copy, d](Var& self) {
        for (size_t r = 0; r < ids_copy->size(); ++r) {
            const double* g = self.val.grad.data() + r * d;
            double* tg = table->val.grad.data() + static_cast<size_t>((*ids_copy)[r]) * d;
            for (int j = 0; j < d; ++j) tg[j] += g[j];
        }
    });
}

VarPtr split_heads(const VarPtr& x, int n_heads) {
    if (x->val.rank() != 3 || x->val.dim(2) % n_heads != 0) {
        throw std::invalid_argument("split_heads: cannot split " + x->val.shape_str() + " into " +
                                    std::to_string(n_heads) + " heads");
    }
    int b = x->val.dim(0), t = x->val.dim(1), dm = x->val.dim(2);
    int dh = dm / n_heads;
    Tensor out({b, n_heads, t, dh});
    for (int bb = 0; bb < b; ++bb) {
        for (int tt = 0; tt < t; ++tt) {
            const double* src = x->val.data.data() + (static_cast<size_t>(bb) * t + tt) * dm;
            for (int h = 0; h < n_heads; ++h) {
                double* dst = out.data.data() +
                              ((static_cast<size_t>(bb) * n_heads + h) * t + tt) * dh;
                std::copy(src + static_cast<size_t>(h) * dh, src + static_cast<size_t>(h + 1) * dh, dst);
            }
        }
    }
    return make_node(std::move(out), {x}, [x, b, t, dm, dh, n_heads](Var& self) {
        for (int bb = 0; bb < b; ++bb) {
            for (int tt = 0; tt < t; ++tt) {
                double* dst = x->val.grad.data() + (static_cast<size_t>(bb) * t + tt) * dm;
                for (int h = 0; h < n_heads; ++h) {
                    const double* g = self.val.grad.data() +
                                      ((static_cast<size_t>(bb) * n_heads + h) * t + tt) * dh;
                    for (int j = 0; j < dh; ++j) dst[static_cast<size_t>(h) * dh + j] += g[j];
                }
            }
        }
    });
}

VarPtr merge_heads(const VarPtr& x) {
    if (x->val.rank() != 4) {
        throw std::invalid_argument("merge_heads: need rank 4, got " + x->val.shape_str());
    }
    int b = x->val.dim(0), h = x->val.dim(1), t = x->val.dim(2), dh = x->val.dim(3);
    Tensor out({b, t, h * dh});
    for (int bb = 0; bb < b; ++bb) {
        for (int hh = 0; hh < h; ++hh) {
            for (int tt = 0; tt < t; ++tt) {
                const double* src = x->val.data.data() +
                                    ((static_cast<size_t>(bb) * h + hh) * t + tt) * dh;
                double* dst = out.data.data() + (static_cast<size_t>(bb) * t + tt) * (h * dh) +
                              static_cast<size_t>(hh) * dh;
                std::copy(src, src + dh, dst);
            }
        }
    }
    return make_node(std::move(out), {x}, [x, b, h, t, dh](Var& self) {
        for (int bb = 0; bb < b; ++bb) {
            for (int hh = 0; hh < h; ++hh) {
                for (int tt = 0; tt < t; ++tt) {
                    double* dst = x->val.grad.data() +
                                  ((static_cast<size_t>(bb) * h + hh) * t + tt) * dh;
                    const double* g = self.val.grad.data() +
                                      (static_cast<size_t>(bb) * t + tt) * (h * dh) +
                                      static_cast<size_t>(hh) * dh;
                    for (int j = 0; j < dh; ++j) dst[j] += g[j];
                }
            }
        }
    });
}

VarPtr cross_entropy_masked(const VarPtr& logits, const std::vector<int>& targets,
                            const std::vector<uint8_t>& mask) {
    check_last_dim(logits->val, "cross_entropy_masked");
    int v = logits->val.dim(-1);
    size_t rows = lead_count(logits->val, static_cast<size_t>(v));
    if (targets.size() != rows || mask.size() != rows) {
        throw std::invalid_argument("cross_entropy_masked: targets/mask do not match " +
                                    logits->val.shape_str());
    }
    size_t n_masked = 0;
    for (uint8_t m : mask) n_masked += m ? 1 : 0;
    if (n_masked == 0) {
        throw std::domain_error("cross_entropy_masked: loss mask selects no positions");
    }
    double total = 0.0;
    for (size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        int tgt = targets[r];
        if (tgt < 0 || tgt >= v) {
            throw std::invalid_argument("cross_entropy_masked: target " + std::to_string(tgt) +
                                        " outside vocab of " + std::to_string(v));
        }
        const double* lr = logits->val.data.data() + r * v;
        double mx = lr[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, lr[j]);
        double z = 0.0;
        for (int j = 0; j < v; ++j) z += std::exp(lr[j] - mx);
        total += std::log(z) + mx - lr[tgt];
    }
    Tensor out({1});
    out.data[0] = total / static_cast<double>(n_masked);
    auto targets_copy = std::make_shared<std::vector<int>>(targets);
    auto mask_copy = std::make_shared<std::vector<uint8_t>>(mask);
    return make_node(std::move(out), {logits},
                     [logits, targets_copy, mask_copy, rows, v, n_masked](Var& self) {
        double g = self.val.grad[0] / static_cast<double>(n_masked);
        for (size_t r = 0; r < rows; ++r) {
            if (!(*mask_copy)[r]) continue;
            const double* lr = logits->val.data.data() + r * v;
            double* lg = logits->val.grad.data() + r * v;
            double mx = lr[0];
            for (int j = 1; j < v; ++j) mx = std::max(mx, lr[j]);
            double z = 0.0;
            for (int j = 0; j < v; ++j) z += std::exp(lr[j] - mx);
            for (int j = 0; j < v; ++j) {
                double p = std::exp(lr[j] - mx) / z;
                lg[j] += g * (p - (j == (*targets_copy)[r] ? 1.0 : 0.0));
            }
        }
    });
}

}  // namespace copelab

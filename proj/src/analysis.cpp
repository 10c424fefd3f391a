#include "copelab/analysis.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

namespace copelab::analysis {

namespace {

AttentionTrace traced_forward(const Checkpoint& ck, const std::vector<int>& tokens, int layer,
                              int head) {
    if (!ck.config.model.pe.uses_cope()) {
        throw std::invalid_argument("dump: checkpoint uses pe.kind=" +
                                    to_string(ck.config.model.pe.kind) +
                                    ", gates and positions exist only for cope variants");
    }
    if (layer < 0 || layer >= ck.config.model.n_layers || head < 0 ||
        head >= ck.config.model.n_heads) {
        throw std::invalid_argument("dump: layer/head outside the model");
    }
    NoGradGuard ng;
    AttentionTrace trace;
    model_logits(ck.params, ck.config.model, tokens, 1, static_cast<int>(tokens.size()), &trace);
    return trace;
}

}  // namespace

DumpResult position_attention_map(const Checkpoint& ck, const std::vector<int>& tokens, int layer,
                                  int head) {
    AttentionTrace trace = traced_forward(ck, tokens, layer, head);
    const Tensor& term = trace.pos_logits[static_cast<size_t>(layer) * trace.n_heads + head];
    int t = trace.t;
    DumpResult d;
    d.t = t;
    d.layer = layer;
    d.head = head;
    d.mode = "position";
    d.tokens = tokens;
    d.rows.assign(static_cast<size_t>(t) * t, 0.0);
    for (int i = 0; i < t; ++i) {
        // softmax over the causal row of the positional term alone
        double mx = term.data[static_cast<size_t>(i) * t];
        for (int j = 1; j <= i; ++j) mx = std::max(mx, term.data[static_cast<size_t>(i) * t + j]);
        double z = 0.0;
        for (int j = 0; j <= i; ++j) {
            double e = std::exp(term.data[static_cast<size_t>(i) * t + j] - mx);
            d.rows[static_cast<size_t>(i) * t + j] = e;
            z += e;
        }
        double peak = 0.0;
        for (int j = 0; j <= i; ++j) {
            d.rows[static_cast<size_t>(i) * t + j] /= z;
            peak = std::max(peak, d.rows[static_cast<size_t>(i) * t + j]);
        }
        for (int j = 0; j <= i; ++j) d.rows[static_cast<size_t>(i) * t + j] /= peak;
    }
    return d;
}

DumpResult gate_map(const Checkpoint& ck, const std::vector<int>& tokens, int layer, int head) {
    AttentionTrace trace = traced_forward(ck, tokens, layer, head);
    const Tensor& gates = trace.gates[static_cast<size_t>(layer) * trace.n_heads + head];
    DumpResult d;
    d.t = trace.t;
    d.layer = layer;
    d.head = head;
    d.mode = "gates";
    d.tokens = tokens;
    d.rows = gates.data;
    return d;
}

void write_dump(std::ostream& os, const DumpResult& d) {
    os << "# mode=" << d.mode << " layer=" << d.layer << " head=" << d.head << " T=" << d.t
       << " masking=causal_before_softmax\n";
    os << "query token";
    for (int j = 0; j < d.t; ++j) os << " v" << j;
    os << "\n";
    char buf[32];
    for (int i = 0; i < d.t; ++i) {
        os << i << " " << d.tokens[static_cast<size_t>(i)];
        for (int j = 0; j < d.t; ++j) {
            std::snprintf(buf, sizeof(buf), " %.6g", d.rows[static_cast<size_t>(i) * d.t + j]);
            os << buf;
        }
        os << "\n";
    }
}

std::vector<BoundRow> relative_pe_bound_demo(double delta, double ddelta, int i_max) {
    if (delta <= 0.0 || ddelta <= 0.0) {
        throw std::invalid_argument("bound demo: delta and ddelta must be positive");
    }
    // q.k_x = delta, q.k_y = 0, q.e[i] = -i*ddelta
    std::vector<BoundRow> rows;
    rows.reserve(static_cast<size_t>(i_max));
    for (int i = 1; i <= i_max; ++i) {
        double logit_x = delta - static_cast<double>(i) * ddelta;  // q.k_x + q.e[i]
        double logit_y = 0.0;                                      // q.k_y + q.e[0]
        double ratio = std::exp(logit_x - logit_y);
        rows.push_back({i, ratio, ratio > 1.0});
    }
    return rows;
}

int bound_threshold_index(double delta, double ddelta) {
    // first integer i with delta - i*ddelta < 0
    return static_cast<int>(std::floor(delta / ddelta)) + 1;
}

}  // namespace copelab::analysis

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "copelab/checkpoint.hpp"

namespace copelab::analysis {

// One per-query map for a single (layer, head): row-major T x T values
// plus the input token ids for alignment.
struct DumpResult {
    int t = 0;
    int layer = 0;
    int head = 0;
    std::string mode;  // "position" or "gates"
    std::vector<int> tokens;
    std::vector<double> rows;
};

// Softmax of the positional logit term alone (context term excluded),
// causally masked, then each query row scaled so its maximum is 1.
// Requires a CoPE-variant checkpoint.
DumpResult position_attention_map(const Checkpoint& ck, const std::vector<int>& tokens, int layer,
                                  int head);

// Raw gate values g_ij over the causal triangle (masked pairs are 0).
DumpResult gate_map(const Checkpoint& ck, const std::vector<int>& tokens, int layer, int head);

// One metadata comment, one header line naming fields, then one line per
// query row of space-separated decimals (6 significant digits).
void write_dump(std::ostream& os, const DumpResult& d);

// ----------------------------- token-position bound -----------------------------
// Scalar construction with q.k_x = q.k_y + delta and
// q.e[0] - q.e[i] = i*ddelta; the attention ratio a_x[i] / a_y[0]
// equals exp(delta - i*ddelta).
struct BoundRow {
    int i = 0;
    double ratio = 0.0;
    bool attends_x = false;
};

std::vector<BoundRow> relative_pe_bound_demo(double delta, double ddelta, int i_max);

// smallest i at which y at position 0 wins over x at position i
int bound_threshold_index(double delta, double ddelta);

}  // namespace copelab::analysis

#pragma once

#include <string>
#include <vector>

#include "copelab/rng.hpp"
#include "copelab/tensor.hpp"

namespace copelab::tasks {

// Rectangular batch of sequences with aligned next-token targets and a
// loss mask selecting the answer positions.
struct LabeledBatch {
    int b = 0;
    int l = 0;
    std::vector<int> tokens;
    std::vector<int> targets;
    std::vector<uint8_t> loss_mask;

    size_t at(int seq, int pos) const { return static_cast<size_t>(seq) * l + pos; }
};

// ----------------------------- flip-flop -----------------------------
// vocabulary: w i r 0 1
namespace ff {
constexpr int W = 0, I = 1, R = 2, BIT0 = 3, BIT1 = 4;
constexpr int kVocab = 5;
}  // namespace ff

struct FlipFlopConfig {
    int n_pairs = 256;
    double p_ignore_train = 0.8;
    double p_ignore_ood = 0.98;
    bool loss_all_positions = false;  // default: loss at read answers only

    int seq_len() const { return 2 * n_pairs; }
};

LabeledBatch gen_flipflop(const FlipFlopConfig& cfg, double p_ignore, int n_sequences,
                          const RngStream& rng);
// brute-force simulation: memory after each prefix; returns the expected
// bit token for every read position (index = position of the r token)
std::vector<std::pair<int, int>> flipflop_read_answers(const std::vector<int>& seq_tokens);

// ----------------------------- selective copy -----------------------------
// vocabulary: 14 content tokens, blank, separator
namespace sc {
constexpr int kAlphabet = 14;
constexpr int BLANK = 14, SEP = 15;
constexpr int kVocab = 16;
}  // namespace sc

struct SelectiveCopyConfig {
    int n_content = 256;
    int n_blanks = 256;        // train / in-dist
    int n_blanks_dense = 128;  // OOD dense
    int n_blanks_sparse = 512; // OOD sparse

    int seq_len(int blanks) const { return n_content + blanks + 1 + n_content; }
    int max_seq_len() const {
        return seq_len(std::max(n_blanks, std::max(n_blanks_dense, n_blanks_sparse)));
    }
};

LabeledBatch gen_selective_copy(const SelectiveCopyConfig& cfg, int n_blanks, int n_sequences,
                                const RngStream& rng);
// filter oracle: the non-blank tokens of the input region in order
std::vector<int> selective_copy_expected(const std::vector<int>& seq_tokens);

// ----------------------------- counting -----------------------------
// vocabulary: digits 0..10, variables a..e, = ++ pass print
namespace ct {
constexpr int kMaxValue = 10;
constexpr int VAR_BASE = 11;  // a..e = 11..15
constexpr int SET = 16, INCR = 17, PASS = 18, PRINT = 19;
constexpr int kVocab = 20;
constexpr int kMaxVars = 5;
}  // namespace ct

struct CountingConfig {
    int n_vars = 1;
    double w_set = 1.0;
    double w_incr = 7.0;
    double w_pass = 50.0;
    double w_pass_ood_long = 100.0;
    double w_pass_ood_short = 10.0;
    int max_value = ct::kMaxValue;
    int max_ops = 512;  // token budget of the operation region
    int min_ops = -1;   // lower bound of the per-sequence budget; -1 = max_ops/2
    int train_pool = 10000;

    // rows are padded past the print with inert pass tokens
    int seq_len() const { return max_ops + 3; }
    int resolved_min_ops() const { return min_ops < 0 ? max_ops / 2 : min_ops; }
};

LabeledBatch gen_counting(const CountingConfig& cfg, double w_pass, int n_sequences,
                          const RngStream& rng);
// interpreter oracle: replays the operation region and returns the value
// of the printed variable
int counting_interpret(const std::vector<int>& seq_tokens);

// ----------------------------- metric -----------------------------
// fraction of masked positions where argmax(logits) != target; argmax ties
// break toward the lowest token id
double masked_token_error(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<uint8_t>& loss_mask);

// ----------------------------- record stream -----------------------------
// Per sequence: [u32 length][length x i32 tokens][length x i32 targets]
// [length x i32 mask], all little-endian.
void write_batch_records(const std::string& path, const LabeledBatch& batch);
LabeledBatch read_batch_records(const std::string& path);

// ----------------------------- char-level LM -----------------------------
struct CharLMData {
    std::vector<int> train_ids;
    std::vector<int> val_ids;
    std::vector<char> id_to_char;
    int vocab_size() const { return static_cast<int>(id_to_char.size()); }
};

CharLMData load_charlm_corpus(const std::string& path, double val_frac);
LabeledBatch gen_charlm(const CharLMData& data, bool val_split, int t, int n_sequences,
                        const RngStream& rng);

}  // namespace copelab::tasks

#include "copelab/tasks.hpp"

#include <algorithm>
#include <cassert>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

namespace copelab::tasks {

// ----------------------------- flip-flop -----------------------------

LabeledBatch gen_flipflop(const FlipFlopConfig& cfg, double p_ignore, int n_sequences,
                          const RngStream& rng) {
    if (cfg.n_pairs < 2) {
        throw std::invalid_argument("flipflop: n_pairs must be >= 2");
    }
    if (p_ignore < 0.0 || p_ignore >= 1.0) {
        throw std::invalid_argument("flipflop: p_ignore must be in [0, 1)");
    }
    LabeledBatch batch;
    batch.b = n_sequences;
    batch.l = cfg.seq_len();
    batch.tokens.assign(static_cast<size_t>(batch.b) * batch.l, 0);
    batch.targets.assign(batch.tokens.size(), 0);
    batch.loss_mask.assign(batch.tokens.size(), 0);
    for (int s = 0; s < n_sequences; ++s) {
        RngStream rs = substream(rng, static_cast<uint64_t>(s));
        int memory = 0;
        for (int p = 0; p < cfg.n_pairs; ++p) {
            int instr;
            if (p == 0) {
                instr = ff::W;
            } else if (p == cfg.n_pairs - 1) {
                instr = ff::R;
            } else if (rs.next_bernoulli(p_ignore)) {
                instr = ff::I;
            } else {
                instr = rs.next_int(2) == 0 ? ff::W : ff::R;
            }
            int bit;
            if (instr == ff::R) {
                bit = memory;  // recall
            } else {
                bit = rs.next_int(2);
                if (instr == ff::W) memory = bit;
            }
            size_t base = batch.at(s, 2 * p);
            batch.tokens[base] = instr;
            batch.tokens[base + 1] = ff::BIT0 + bit;
        }
        for (int t = 0; t + 1 < batch.l; ++t) {
            batch.targets[batch.at(s, t)] = batch.tokens[batch.at(s, t + 1)];
            if (cfg.loss_all_positions) {
                batch.loss_mask[batch.at(s, t)] = 1;
            } else if (batch.tokens[batch.at(s, t)] == ff::R) {
                batch.loss_mask[batch.at(s, t)] = 1;
            }
        }
#ifndef NDEBUG
        std::vector<int> seq(batch.tokens.begin() + batch.at(s, 0),
                             batch.tokens.begin() + batch.at(s, 0) + batch.l);
        for (auto [pos, bit] : flipflop_read_answers(seq)) {
            assert(batch.targets[batch.at(s, pos)] == bit);
        }
#endif
    }
    return batch;
}

std::vector<std::pair<int, int>> flipflop_read_answers(const std::vector<int>& seq_tokens) {
    std::vector<std::pair<int, int>> out;
    int memory = ff::BIT0;
    for (size_t t = 0; t + 1 < seq_tokens.size(); t += 2) {
        int instr = seq_tokens[t];
        int bit = seq_tokens[t + 1];
        if (instr == ff::W) {
            memory = bit;
        } else if (instr == ff::R) {
            out.push_back({static_cast<int>(t), memory});
        }
    }
    return out;
}

// ----------------------------- selective copy -----------------------------

LabeledBatch gen_selective_copy(const SelectiveCopyConfig& cfg, int n_blanks, int n_sequences,
                                const RngStream& rng) {
    if (cfg.n_content < 1 || n_blanks < 0) {
        throw std::invalid_argument("selective_copy: need n_content >= 1 and n_blanks >= 0");
    }
    if (sc::kAlphabet < 1) {
        throw std::invalid_argument("selective_copy: vocabulary too small for content alphabet");
    }
    int n_in = cfg.n_content + n_blanks;
    LabeledBatch batch;
    batch.b = n_sequences;
    batch.l = cfg.seq_len(n_blanks);
    batch.tokens.assign(static_cast<size_t>(batch.b) * batch.l, 0);
    batch.targets.assign(batch.tokens.size(), 0);
    batch.loss_mask.assign(batch.tokens.size(), 0);
    for (int s = 0; s < n_sequences; ++s) {
        RngStream rs = substream(rng, static_cast<uint64_t>(s));
        // sample content, then shuffle blank slots into the input region
        std::vector<int> input(static_cast<size_t>(n_in));
        for (int j = 0; j < cfg.n_content; ++j) input[j] = rs.next_int(sc::kAlphabet);
        for (int j = cfg.n_content; j < n_in; ++j) input[j] = sc::BLANK;
        for (int j = n_in - 1; j > 0; --j) {
            std::swap(input[j], input[rs.next_int(j + 1)]);
        }
        std::vector<int> content;
        content.reserve(cfg.n_content);
        for (int v : input) {
            if (v != sc::BLANK) content.push_back(v);
        }
        size_t base = batch.at(s, 0);
        std::copy(input.begin(), input.end(), batch.tokens.begin() + base);
        batch.tokens[base + n_in] = sc::SEP;
        std::copy(content.begin(), content.end(), batch.tokens.begin() + base + n_in + 1);
        for (int t = 0; t + 1 < batch.l; ++t) {
            batch.targets[batch.at(s, t)] = batch.tokens[batch.at(s, t + 1)];
        }
        for (int t = n_in; t < n_in + cfg.n_content; ++t) {
            batch.loss_mask[batch.at(s, t)] = 1;
        }
#ifndef NDEBUG
        std::vector<int> seq(batch.tokens.begin() + base, batch.tokens.begin() + base + batch.l);
        assert(selective_copy_expected(seq) == content);
#endif
    }
    return batch;
}

std::vector<int> selective_copy_expected(const std::vector<int>& seq_tokens) {
    std::vector<int> out;
    for (int v : seq_tokens) {
        if (v == sc::SEP) break;
        if (v != sc::BLANK) out.push_back(v);
    }
    return out;
}

// ----------------------------- counting -----------------------------

LabeledBatch gen_counting(const CountingConfig& cfg, double w_pass, int n_sequences,
                          const RngStream& rng) {
    if (cfg.max_ops < 2) {
        throw std::invalid_argument("counting: max_ops must be >= 2");
    }
    if (cfg.n_vars < 1 || cfg.n_vars > ct::kMaxVars) {
        throw std::invalid_argument("counting: n_vars must be in [1, " +
                                    std::to_string(ct::kMaxVars) + "], got " +
                                    std::to_string(cfg.n_vars));
    }
    if (cfg.max_value < 0 || cfg.max_value > ct::kMaxValue) {
        throw std::invalid_argument("counting: max_value must be in [0, 10]");
    }
    if (cfg.resolved_min_ops() < 2 || cfg.resolved_min_ops() > cfg.max_ops) {
        throw std::invalid_argument("counting: min_ops must lie in [2, max_ops]");
    }
    LabeledBatch batch;
    batch.b = n_sequences;
    batch.l = cfg.seq_len();
    batch.tokens.assign(static_cast<size_t>(batch.b) * batch.l, 0);
    batch.targets.assign(batch.tokens.size(), 0);
    batch.loss_mask.assign(batch.tokens.size(), 0);
    enum { OP_SET = 0, OP_INCR = 1, OP_PASS = 2 };
    for (int s = 0; s < n_sequences; ++s) {
        RngStream rs = substream(rng, static_cast<uint64_t>(s));
        // per-sequence budget: the print position varies between sequences
        int budget = cfg.resolved_min_ops() +
                     rs.next_int(cfg.max_ops - cfg.resolved_min_ops() + 1);
        std::vector<int> values(static_cast<size_t>(cfg.n_vars), 0);
        std::vector<int> toks;
        toks.reserve(static_cast<size_t>(batch.l));
        while (static_cast<int>(toks.size()) < budget) {
            int remaining = budget - static_cast<int>(toks.size());
            double weights[3] = {cfg.w_set, cfg.w_incr, w_pass};
            int op = rs.next_weighted(weights, 3);
            int var = (op == OP_PASS) ? 0 : rs.next_int(cfg.n_vars);
            // redraw ops that would exceed max_value or the token budget
            if (op == OP_SET && remaining < 3) continue;
            if (op == OP_INCR && (remaining < 2 || values[var] >= cfg.max_value)) continue;
            if (op == OP_SET) {
                toks.push_back(ct::VAR_BASE + var);
                toks.push_back(ct::SET);
                toks.push_back(0);  // digit 0
                values[var] = 0;
            } else if (op == OP_INCR) {
                toks.push_back(ct::VAR_BASE + var);
                toks.push_back(ct::INCR);
                values[var] += 1;
            } else {
                toks.push_back(ct::PASS);
            }
        }
        int print_var = rs.next_int(cfg.n_vars);
        toks.push_back(ct::PRINT);
        toks.push_back(ct::VAR_BASE + print_var);
        toks.push_back(values[print_var]);  // answer digit token
        int answer_pos = static_cast<int>(toks.size()) - 2;
        // inert fill keeps rows rectangular; it sits after the answer and
        // carries no loss
        while (static_cast<int>(toks.size()) < batch.l) toks.push_back(ct::PASS);
        size_t base = batch.at(s, 0);
        std::copy(toks.begin(), toks.end(), batch.tokens.begin() + base);
        for (int t = 0; t + 1 < batch.l; ++t) {
            batch.targets[batch.at(s, t)] = batch.tokens[batch.at(s, t + 1)];
        }
        batch.loss_mask[batch.at(s, answer_pos)] = 1;  // predict the answer digit
#ifndef NDEBUG
        assert(counting_interpret(toks) == values[print_var]);
        assert(batch.targets[batch.at(s, answer_pos)] == values[print_var]);
#endif
    }
    return batch;
}

int counting_interpret(const std::vector<int>& seq_tokens) {
    int values[ct::kMaxVars] = {0, 0, 0, 0, 0};
    size_t t = 0;
    while (t < seq_tokens.size()) {
        int tok = seq_tokens[t];
        if (tok == ct::PASS) {
            t += 1;
        } else if (tok == ct::PRINT) {
            if (t + 1 >= seq_tokens.size()) break;
            return values[seq_tokens[t + 1] - ct::VAR_BASE];
        } else if (tok >= ct::VAR_BASE && tok < ct::VAR_BASE + ct::kMaxVars) {
            int var = tok - ct::VAR_BASE;
            if (t + 1 >= seq_tokens.size()) break;
            if (seq_tokens[t + 1] == ct::SET) {
                values[var] = 0;
                t += 3;  // var = 0
            } else if (seq_tokens[t + 1] == ct::INCR) {
                values[var] += 1;
                t += 2;
            } else {
                throw std::invalid_argument("counting_interpret: malformed operation");
            }
        } else {
            throw std::invalid_argument("counting_interpret: unexpected token " + std::to_string(tok));
        }
    }
    throw std::invalid_argument("counting_interpret: sequence has no print");
}

// ----------------------------- metric -----------------------------

double masked_token_error(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<uint8_t>& loss_mask) {
    if (logits.rank() < 1) {
        throw std::invalid_argument("masked_token_error: logits must have a vocab dimension");
    }
    int v = logits.dim(-1);
    size_t rows = logits.numel() / static_cast<size_t>(v);
    if (targets.size() != rows || loss_mask.size() != rows) {
        throw std::invalid_argument("masked_token_error: targets/mask do not match logits");
    }
    size_t n_masked = 0, n_wrong = 0;
    for (size_t r = 0; r < rows; ++r) {
        if (!loss_mask[r]) continue;
        n_masked += 1;
        const double* lr = logits.data.data() + r * v;
        int best = 0;
        for (int j = 1; j < v; ++j) {
            if (lr[j] > lr[best]) best = j;  // ties keep the lowest id
        }
        if (best != targets[r]) n_wrong += 1;
    }
    if (n_masked == 0) {
        throw std::domain_error("masked_token_error: loss mask selects no positions");
    }
    return static_cast<double>(n_wrong) / static_cast<double>(n_masked);
}

// ----------------------------- record stream -----------------------------

namespace {

void put_u32(std::ostream& os, uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void write_batch_records(const std::string& path, const LabeledBatch& batch) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    for (int s = 0; s < batch.b; ++s) {
        put_u32(os, static_cast<uint32_t>(batch.l));
        for (int t = 0; t < batch.l; ++t) put_u32(os, static_cast<uint32_t>(batch.tokens[batch.at(s, t)]));
        for (int t = 0; t < batch.l; ++t) put_u32(os, static_cast<uint32_t>(batch.targets[batch.at(s, t)]));
        for (int t = 0; t < batch.l; ++t) put_u32(os, batch.loss_mask[batch.at(s, t)] ? 1u : 0u);
    }
    if (!os) throw std::runtime_error("write failure on " + path);
}

LabeledBatch read_batch_records(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    LabeledBatch batch;
    while (true) {
        uint32_t len = get_u32(is);
        if (is.eof()) break;
        if (!is) throw std::runtime_error("read failure on " + path);
        if (batch.b == 0) {
            batch.l = static_cast<int>(len);
        } else if (static_cast<int>(len) != batch.l) {
            throw std::runtime_error(path + ": records have mixed lengths");
        }
        auto read_ints = [&](std::vector<int>& dst) {
            for (uint32_t t = 0; t < len; ++t) dst.push_back(static_cast<int32_t>(get_u32(is)));
        };
        read_ints(batch.tokens);
        read_ints(batch.targets);
        for (uint32_t t = 0; t < len; ++t) batch.loss_mask.push_back(get_u32(is) ? 1 : 0);
        if (!is) throw std::runtime_error("truncated record in " + path);
        batch.b += 1;
    }
    return batch;
}

// ----------------------------- char-level LM -----------------------------

CharLMData load_charlm_corpus(const std::string& path, double val_frac) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open corpus " + path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (text.size() < 64) throw std::runtime_error("corpus " + path + " is too small");
    std::set<char> chars(text.begin(), text.end());
    CharLMData data;
    data.id_to_char.assign(chars.begin(), chars.end());
    int char_to_id[256];
    std::fill(std::begin(char_to_id), std::end(char_to_id), -1);
    for (size_t i = 0; i < data.id_to_char.size(); ++i) {
        char_to_id[static_cast<unsigned char>(data.id_to_char[i])] = static_cast<int>(i);
    }
    size_t n_val = static_cast<size_t>(val_frac * static_cast<double>(text.size()));
    size_t n_train = text.size() - n_val;
    for (size_t i = 0; i < text.size(); ++i) {
        int id = char_to_id[static_cast<unsigned char>(text[i])];
        (i < n_train ? data.train_ids : data.val_ids).push_back(id);
    }
    return data;
}

LabeledBatch gen_charlm(const CharLMData& data, bool val_split, int t, int n_sequences,
                        const RngStream& rng) {
    const std::vector<int>& ids = val_split ? data.val_ids : data.train_ids;
    if (static_cast<int>(ids.size()) < t + 1) {
        throw std::invalid_argument("charlm: split smaller than one window");
    }
    LabeledBatch batch;
    batch.b = n_sequences;
    batch.l = t;
    batch.tokens.reserve(static_cast<size_t>(n_sequences) * t);
    batch.targets.reserve(batch.tokens.capacity());
    batch.loss_mask.assign(static_cast<size_t>(n_sequences) * t, 1);
    RngStream rs = rng;
    int max_start = static_cast<int>(ids.size()) - t - 1;
    for (int s = 0; s < n_sequences; ++s) {
        // validation uses fixed evenly spaced windows, training random crops
        int start = val_split ? static_cast<int>((static_cast<int64_t>(s) * std::max(1, max_start)) /
                                                 std::max(1, n_sequences))
                              : rs.next_int(max_start + 1);
        for (int j = 0; j < t; ++j) {
            batch.tokens.push_back(ids[static_cast<size_t>(start) + j]);
            batch.targets.push_back(ids[static_cast<size_t>(start) + j + 1]);
        }
    }
    return batch;
}

}  // namespace copelab::tasks

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "copelab/tasks.hpp"

using namespace copelab;
using namespace copelab::tasks;

TEST_CASE("flip-flop worked example") {
    // w0 i1 r0 w1 i0 i1 i1 r_ : the final read recalls the bit after the last w
    std::vector<int> seq = {ff::W, ff::BIT0, ff::I, ff::BIT1, ff::R, ff::BIT0,
                            ff::W, ff::BIT1, ff::I, ff::BIT0, ff::I, ff::BIT1,
                            ff::I, ff::BIT1, ff::R, ff::BIT1};
    auto answers = flipflop_read_answers(seq);
    REQUIRE(answers.size() == 2);
    CHECK(answers[0] == std::pair<int, int>{4, ff::BIT0});   // first read: memory is 0
    CHECK(answers[1] == std::pair<int, int>{14, ff::BIT1});  // final read: 1

    std::vector<int> tiny = {ff::W, ff::BIT1, ff::R, ff::BIT1};
    auto one = flipflop_read_answers(tiny);
    REQUIRE(one.size() == 1);
    CHECK(one[0].second == ff::BIT1);
}

TEST_CASE("flip-flop generator agrees with the simulation oracle") {
    FlipFlopConfig cfg;
    cfg.n_pairs = 12;
    LabeledBatch batch = gen_flipflop(cfg, 0.8, 1000, make_stream(1, 100, 0));
    CHECK(batch.l == 24);
    int masked_total = 0;
    for (int s = 0; s < batch.b; ++s) {
        std::vector<int> seq(batch.tokens.begin() + batch.at(s, 0),
                             batch.tokens.begin() + batch.at(s, 0) + batch.l);
        CHECK(seq[0] == ff::W);
        CHECK(seq[batch.l - 2] == ff::R);
        auto answers = flipflop_read_answers(seq);
        size_t found = 0;
        for (int t = 0; t + 1 < batch.l; ++t) {
            if (batch.loss_mask[batch.at(s, t)]) {
                REQUIRE(found < answers.size());
                CHECK(t == answers[found].first);
                CHECK(batch.targets[batch.at(s, t)] == answers[found].second);
                ++found;
                ++masked_total;
            }
        }
        CHECK(found == answers.size());
    }
    CHECK(masked_total >= batch.b);  // at least the final read per sequence
}

TEST_CASE("flip-flop generation is reproducible and knob-stable") {
    FlipFlopConfig cfg;
    cfg.n_pairs = 8;
    auto a = gen_flipflop(cfg, 0.8, 32, make_stream(7, 100, 0));
    auto b = gen_flipflop(cfg, 0.8, 32, make_stream(7, 100, 0));
    CHECK(a.tokens == b.tokens);
    CHECK(a.targets == b.targets);
    CHECK(a.loss_mask == b.loss_mask);
    // OOD changes only the instruction mix, not length or vocabulary
    auto ood = gen_flipflop(cfg, 0.98, 32, make_stream(7, 100, 0));
    CHECK(ood.l == a.l);
    int ign_a = 0, ign_ood = 0;
    for (int v : a.tokens) ign_a += v == ff::I;
    for (int v : ood.tokens) ign_ood += v == ff::I;
    CHECK(ign_ood > ign_a);
}

TEST_CASE("flip-flop can train on all positions instead of reads only") {
    FlipFlopConfig cfg;
    cfg.n_pairs = 8;
    cfg.loss_all_positions = true;
    LabeledBatch batch = gen_flipflop(cfg, 0.5, 4, make_stream(8, 100, 0));
    for (int s = 0; s < batch.b; ++s) {
        for (int t = 0; t < batch.l; ++t) {
            CHECK(static_cast<bool>(batch.loss_mask[batch.at(s, t)]) == (t + 1 < batch.l));
        }
    }
    CHECK_THROWS_AS(gen_flipflop(cfg, 1.0, 1, make_stream(8, 100, 0)), std::invalid_argument);
    cfg.n_pairs = 1;
    CHECK_THROWS_AS(gen_flipflop(cfg, 0.5, 1, make_stream(8, 100, 0)), std::invalid_argument);
}

TEST_CASE("selective copy worked example") {
    // D B B C F B F B E with B blank -> D C F F E
    const int D = 3, C = 2, F = 5, E = 4;
    std::vector<int> seq = {D, sc::BLANK, sc::BLANK, C, F, sc::BLANK, F, sc::BLANK, E, sc::SEP};
    CHECK(selective_copy_expected(seq) == std::vector<int>{D, C, F, F, E});
}

TEST_CASE("selective copy generator agrees with the filter oracle") {
    SelectiveCopyConfig cfg;
    cfg.n_content = 16;
    LabeledBatch batch = gen_selective_copy(cfg, 8, 200, make_stream(2, 101, 0));
    int n_in = 16 + 8;
    CHECK(batch.l == n_in + 1 + 16);
    for (int s = 0; s < batch.b; ++s) {
        std::vector<int> seq(batch.tokens.begin() + batch.at(s, 0),
                             batch.tokens.begin() + batch.at(s, 0) + batch.l);
        CHECK(seq[static_cast<size_t>(n_in)] == sc::SEP);
        auto expected = selective_copy_expected(seq);
        REQUIRE(expected.size() == 16);
        for (int j = 0; j < 16; ++j) {
            CHECK(seq[static_cast<size_t>(n_in) + 1 + j] == expected[j]);
            CHECK(batch.loss_mask[batch.at(s, n_in + j)]);
            CHECK(batch.targets[batch.at(s, n_in + j)] == expected[j]);
            CHECK(expected[j] != sc::BLANK);
        }
        for (int t = 0; t < n_in; ++t) CHECK(!batch.loss_mask[batch.at(s, t)]);
    }
}

TEST_CASE("selective copy with zero blanks is the identity") {
    SelectiveCopyConfig cfg;
    cfg.n_content = 10;
    LabeledBatch batch = gen_selective_copy(cfg, 0, 20, make_stream(3, 101, 0));
    for (int s = 0; s < batch.b; ++s) {
        for (int j = 0; j < 10; ++j) {
            CHECK(batch.tokens[batch.at(s, j)] == batch.tokens[batch.at(s, 11 + j)]);
        }
    }
}

TEST_CASE("counting worked examples") {
    // pass pass a=0 pass a++ pass pass a++ print a -> 2
    std::vector<int> seq = {ct::PASS, ct::PASS, ct::VAR_BASE, ct::SET, 0,
                            ct::PASS, ct::VAR_BASE, ct::INCR, ct::PASS, ct::PASS,
                            ct::VAR_BASE, ct::INCR, ct::PRINT, ct::VAR_BASE, 2};
    CHECK(counting_interpret(seq) == 2);
    // a=0 print a -> 0
    std::vector<int> zero = {ct::VAR_BASE, ct::SET, 0, ct::PRINT, ct::VAR_BASE, 0};
    CHECK(counting_interpret(zero) == 0);
}

TEST_CASE("counting generator agrees with the interpreter oracle") {
    CountingConfig cfg;
    cfg.n_vars = 3;
    cfg.max_ops = 48;
    LabeledBatch batch = gen_counting(cfg, 50.0, 1000, make_stream(4, 102, 0));
    CHECK(batch.l == 51);
    int min_print = batch.l, max_print = 0;
    for (int s = 0; s < batch.b; ++s) {
        std::vector<int> seq(batch.tokens.begin() + batch.at(s, 0),
                             batch.tokens.begin() + batch.at(s, 0) + batch.l);
        int print_pos = -1;
        for (int t = 0; t < batch.l; ++t) {
            if (seq[static_cast<size_t>(t)] == ct::PRINT) {
                print_pos = t;
                break;
            }
        }
        REQUIRE(print_pos >= 0);
        min_print = std::min(min_print, print_pos);
        max_print = std::max(max_print, print_pos);
        CHECK(print_pos >= cfg.resolved_min_ops());
        CHECK(print_pos <= cfg.max_ops);
        int answer = counting_interpret(seq);
        CHECK(answer >= 0);
        CHECK(answer <= cfg.max_value);
        CHECK(seq[static_cast<size_t>(print_pos) + 2] == answer);
        // everything after the answer digit is inert fill
        for (int t = print_pos + 3; t < batch.l; ++t) CHECK(seq[static_cast<size_t>(t)] == ct::PASS);
        // only the answer digit is loss-masked
        for (int t = 0; t + 1 < batch.l; ++t) {
            bool is_answer_pos = t == print_pos + 1;
            CHECK(static_cast<bool>(batch.loss_mask[batch.at(s, t)]) == is_answer_pos);
        }
        CHECK(batch.targets[batch.at(s, print_pos + 1)] == answer);
    }
    CHECK(min_print < max_print);  // the answer position varies across sequences
}

TEST_CASE("counting respects the value cap and variable count") {
    CountingConfig cfg;
    cfg.n_vars = 1;
    cfg.max_ops = 200;
    LabeledBatch batch = gen_counting(cfg, 1.0, 100, make_stream(5, 102, 0));  // incr-heavy
    for (int s = 0; s < batch.b; ++s) {
        std::vector<int> seq(batch.tokens.begin() + batch.at(s, 0),
                             batch.tokens.begin() + batch.at(s, 0) + batch.l);
        // replay and track the running value
        int value = 0;
        for (size_t t = 0; t < seq.size();) {
            if (seq[t] == ct::PASS) {
                t += 1;
            } else if (seq[t] == ct::PRINT) {
                break;
            } else if (seq[t + 1] == ct::SET) {
                value = 0;
                t += 3;
            } else {
                value += 1;
                CHECK(value <= cfg.max_value);
                t += 2;
            }
        }
    }
    CHECK_THROWS_AS(gen_counting(CountingConfig{.n_vars = 6}, 50.0, 1, make_stream(1, 1, 0)),
                    std::invalid_argument);
}

TEST_CASE("masked token error") {
    Tensor logits({3, 4});
    // row 0: one-hot on 2; row 1: one-hot on 0; row 2: uniform ties -> 0
    logits.data = {0, 0, 1, 0, 1, 0, 0, 0, 0, 0, 0, 0};
    std::vector<int> targets = {2, 1, 0};
    std::vector<uint8_t> mask = {1, 1, 1};
    CHECK(masked_token_error(logits, targets, mask) == doctest::Approx(1.0 / 3));
    // ties break toward the lowest id: row 2 predicts 0 and is correct
    std::vector<uint8_t> last_only = {0, 0, 1};
    CHECK(masked_token_error(logits, targets, last_only) == 0.0);
    std::vector<uint8_t> none = {0, 0, 0};
    CHECK_THROWS_AS(masked_token_error(logits, targets, none), std::domain_error);

    // loop oracle on random logits
    RngStream rng = make_stream(6, 103, 0);
    Tensor rl({50, 5});
    for (auto& v : rl.data) v = rng.next_gaussian();
    std::vector<int> tg(50);
    std::vector<uint8_t> ms(50, 1);
    for (auto& t : tg) t = rng.next_int(5);
    int wrong = 0;
    for (int r = 0; r < 50; ++r) {
        int best = 0;
        for (int j = 1; j < 5; ++j) {
            if (rl.data[static_cast<size_t>(r) * 5 + j] > rl.data[static_cast<size_t>(r) * 5 + best]) best = j;
        }
        wrong += best != tg[static_cast<size_t>(r)];
    }
    CHECK(masked_token_error(rl, tg, ms) == doctest::Approx(wrong / 50.0));
}

TEST_CASE("batch record stream round-trips") {
    CountingConfig cfg;
    cfg.max_ops = 12;
    LabeledBatch batch = gen_counting(cfg, 10.0, 17, make_stream(7, 104, 0));
    std::string path = (std::filesystem::temp_directory_path() / "copelab_records.bin").string();
    write_batch_records(path, batch);
    LabeledBatch back = read_batch_records(path);
    CHECK(back.b == batch.b);
    CHECK(back.l == batch.l);
    CHECK(back.tokens == batch.tokens);
    CHECK(back.targets == batch.targets);
    CHECK(back.loss_mask == batch.loss_mask);
    std::remove(path.c_str());
}

TEST_CASE("charlm corpus loading and batching") {
    std::string path = (std::filesystem::temp_directory_path() / "copelab_text.txt").string();
    {
        std::string text;
        for (int i = 0; i < 40; ++i) text += "the quick brown fox jumps over the lazy dog.\n";
        std::ofstream os(path);
        os << text;
    }
    CharLMData data = load_charlm_corpus(path, 0.25);
    CHECK(data.vocab_size() > 10);
    CHECK(data.val_ids.size() > 100);
    LabeledBatch train = gen_charlm(data, false, 16, 4, make_stream(8, 105, 0));
    CHECK(train.l == 16);
    for (size_t i = 0; i < train.tokens.size(); ++i) {
        CHECK(train.loss_mask[i] == 1);
        CHECK(train.tokens[i] >= 0);
        CHECK(train.tokens[i] < data.vocab_size());
    }
    LabeledBatch v1 = gen_charlm(data, true, 16, 4, make_stream(9, 105, 0));
    LabeledBatch v2 = gen_charlm(data, true, 16, 4, make_stream(10, 106, 0));
    CHECK(v1.tokens == v2.tokens);  // validation windows are fixed
    std::remove(path.c_str());
}

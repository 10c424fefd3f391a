#include <doctest.h>

#include <cmath>

#include "copelab/gradcheck.hpp"
#include "copelab/pe.hpp"
#include "copelab/rng.hpp"

using namespace copelab;

namespace {

Tensor randn(std::vector<int> shape, RngStream& rng, double scl = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = scl * rng.next_gaussian();
    return t;
}

double sigma(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("compute_gates basics") {
    std::vector<uint8_t> mask = causal_mask(2);
    Tensor logits({1, 1, 2, 2});
    logits.data = {0.0, kMaskedLogit, 2.0, 0.0};
    CopeConfig cc;
    auto gates = compute_gates(make_var(logits), nullptr, cc, mask);
    CHECK(gates->val.data[0] == 0.5);                                               // sigma(0)
    CHECK(gates->val.data[1] == 0.0);                                               // masked pair
    CHECK(gates->val.data[2] == doctest::Approx(0.8807970779).epsilon(1e-9));       // sigma(2)
    CHECK(gates->val.data[3] == 0.5);

    CopeConfig sep;
    sep.gate_source = GateSource::sep_keys;
    CHECK_THROWS_AS(compute_gates(make_var(logits), nullptr, sep, mask), std::invalid_argument);
}

TEST_CASE("compute_positions reproduces the sentence-counting worked example") {
    // gates of the final query over a 12-token context; two sentence breaks
    const int t = 12;
    std::vector<double> final_row = {0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0};
    Tensor gates({1, 1, t, t});
    for (int j = 0; j < t; ++j) gates.data[static_cast<size_t>(t - 1) * t + j] = final_row[j];
    auto pos = compute_positions(make_var(gates), 4);
    std::vector<double> expect = {2, 2, 2, 2, 1, 1, 1, 1, 0, 0, 0, 0};
    for (int j = 0; j < t; ++j) {
        CHECK(pos->val.data[static_cast<size_t>(t - 1) * t + j] == expect[j]);
    }
}

TEST_CASE("all-ones gates recover token-based relative positions") {
    const int t = 5;
    Tensor gates({1, 1, t, t});
    std::vector<uint8_t> mask = causal_mask(t);
    for (int i = 0; i < t; ++i) {
        for (int j = 0; j <= i; ++j) gates.data[static_cast<size_t>(i) * t + j] = 1.0;
    }
    auto pos = compute_positions(make_var(gates), t + 2);
    for (int i = 0; i < t; ++i) {
        for (int j = 0; j <= i; ++j) {
            CHECK(pos->val.data[static_cast<size_t>(i) * t + j] == static_cast<double>(i - j + 1));
        }
    }
    // clamped variant: p_max = 4 caps i-j+1 = 10 at 3
    const int t2 = 10;
    Tensor g2({1, 1, t2, t2});
    for (int j = 0; j < t2; ++j) g2.data[static_cast<size_t>(t2 - 1) * t2 + j] = 1.0;
    auto pos2 = compute_positions(make_var(g2), 4);
    CHECK(pos2->val.data[static_cast<size_t>(t2 - 1) * t2 + 0] == 3.0);
}

TEST_CASE("positions are monotone and bounded by the diagonal gate") {
    RngStream rng = make_stream(11, 2, 0);
    const int t = 8;
    std::vector<uint8_t> mask = causal_mask(t);
    Tensor logits = randn({2, 2, t, t}, rng);
    auto masked = add_causal_mask(make_var(logits), mask, mask.size());
    CopeConfig cc;
    auto gates = compute_gates(masked, nullptr, cc, mask);
    for (double g : gates->val.data) {
        CHECK(g >= 0.0);
        CHECK(g <= 1.0);
    }
    auto pos = compute_positions(gates, t + 1);
    for (size_t blk = 0; blk < 4; ++blk) {
        const double* p = pos->val.data.data() + blk * t * t;
        const double* g = gates->val.data.data() + blk * t * t;
        for (int i = 0; i < t; ++i) {
            for (int j = 0; j + 1 <= i; ++j) {
                CHECK(p[i * t + j] >= p[i * t + j + 1]);
            }
            CHECK(p[i * t + i] == g[i * t + i]);
            CHECK(p[i * t + i] >= 0.0);
            CHECK(p[i * t + i] < 1.0);
        }
    }
}

TEST_CASE("position_logits interpolation matches embedding-space evaluation") {
    RngStream rng = make_stream(12, 2, 0);
    const int p_max = 5, dh = 4;
    auto q = make_var(randn({1, 1, 1, dh}, rng));
    auto table = make_var(randn({p_max, dh}, rng));

    auto at = [&](double p) {
        Tensor pos({1, 1, 1, 1});
        pos.data[0] = p;
        return position_logits(q, table, make_var(pos))->val.data[0];
    };
    auto qdote = [&](int idx) {
        double acc = 0.0;
        for (int c = 0; c < dh; ++c) acc += q->val.data[c] * table->val.data[idx * dh + c];
        return acc;
    };
    CHECK(at(2.0) == qdote(2));  // integer position is exact
    CHECK(at(1.5) == doctest::Approx(0.5 * qdote(1) + 0.5 * qdote(2)).epsilon(1e-12));
    // embedding-space oracle at p = 0.25: q . (0.25 e[1] + 0.75 e[0])
    double expect = 0.0;
    for (int c = 0; c < dh; ++c) {
        expect += q->val.data[c] * (0.25 * table->val.data[dh + c] + 0.75 * table->val.data[c]);
    }
    CHECK(at(0.25) == doctest::Approx(expect).epsilon(1e-6));

    // interpolation consistency over random positions
    for (int trial = 0; trial < 20; ++trial) {
        double p = (p_max - 1) * rng.next_double();
        int fl = static_cast<int>(std::floor(p));
        int ce = static_cast<int>(std::ceil(p));
        double w = p - fl;
        double emb_space = 0.0;
        for (int c = 0; c < dh; ++c) {
            emb_space += q->val.data[c] *
                         (w * table->val.data[ce * dh + c] + (1 - w) * table->val.data[fl * dh + c]);
        }
        CHECK(at(p) == doctest::Approx(emb_space).epsilon(1e-6));
    }

    Tensor bad({1, 1, 1, 1});
    bad.data[0] = static_cast<double>(p_max);  // outside [0, p_max-1]
    CHECK_THROWS_AS(position_logits(q, table, make_var(bad)), std::logic_error);
}

TEST_CASE("cope_attention_logits hand trace at T=1") {
    RngStream rng = make_stream(13, 2, 0);
    const int dh = 4;
    auto q = make_var(randn({1, 1, 1, dh}, rng));
    auto k = make_var(randn({1, 1, 1, dh}, rng));
    auto v = make_var(randn({1, 1, 1, dh}, rng));
    auto table = make_var(randn({3, dh}, rng));
    std::vector<uint8_t> mask = {1};
    CopeConfig cc;
    cc.p_max = 3;
    auto out = cope_attention_logits(q, k, v, nullptr, mask, table, cc);

    double qk = 0.0;
    for (int c = 0; c < dh; ++c) qk += q->val.data[c] * k->val.data[c];
    qk /= std::sqrt(static_cast<double>(dh));
    double g = sigma(qk);
    double z0 = 0.0, z1 = 0.0;
    for (int c = 0; c < dh; ++c) {
        z0 += q->val.data[c] * table->val.data[c];
        z1 += q->val.data[c] * table->val.data[dh + c];
    }
    double expect = qk + (g * z1 + (1 - g) * z0);
    CHECK(out->val.data[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("zero gates leave softmax attention unchanged") {
    RngStream rng = make_stream(14, 2, 0);
    const int t = 5, dh = 4;
    auto q = make_var(randn({1, 2, t, dh}, rng));
    auto k = make_var(randn({1, 2, t, dh}, rng));
    auto v = make_var(randn({1, 2, t, dh}, rng));
    auto table = make_var(randn({4, dh}, rng));
    std::vector<uint8_t> mask = causal_mask(t);

    CopeConfig cc;
    cc.p_max = 4;
    cc.gate_override = 0.0;
    auto cope = masked_softmax_rows(cope_attention_logits(q, k, v, nullptr, mask, table, cc), mask,
                                    mask.size());
    auto plain = masked_softmax_rows(scaled_masked_logits(q, k, mask), mask, mask.size());
    for (size_t i = 0; i < cope->numel(); ++i) {
        CHECK(cope->val.data[i] == doctest::Approx(plain->val.data[i]).epsilon(1e-12));
    }
}

TEST_CASE("cope logits match a straight-line transcription on small integers") {
    // T=3, d=2, integer-valued q, k, e
    const int t = 3, dh = 2, p_max = 3;
    Tensor qt({1, 1, t, dh}), kt({1, 1, t, dh}), et({p_max, dh});
    qt.data = {1, 0, 2, 1, 0, 1};
    kt.data = {1, 1, 1, 2, 2, 0};
    et.data = {1, 2, 0, 1, 3, 1};
    auto q = make_var(qt), k = make_var(kt), table = make_var(et);
    auto v = make_var(Tensor({1, 1, t, dh}));
    std::vector<uint8_t> mask = causal_mask(t);
    CopeConfig cc;
    cc.p_max = p_max;
    auto out = cope_attention_logits(q, k, v, nullptr, mask, table, cc);

    // independent transcription: logits, scale, mask, sigmoid, reversed
    // cumsum, clamp, interpolate, add
    double scale = 1.0 / std::sqrt(2.0);
    for (int i = 0; i < t; ++i) {
        double logits[3], gates[3], pos[3];
        for (int j = 0; j < t; ++j) {
            double qk = qt.data[i * dh] * kt.data[j * dh] + qt.data[i * dh + 1] * kt.data[j * dh + 1];
            logits[j] = qk * scale + (j <= i ? 0.0 : kMaskedLogit);
            gates[j] = sigma(logits[j]);
        }
        double acc = 0.0;
        for (int j = t - 1; j >= 0; --j) {
            acc += gates[j];
            pos[j] = std::min(acc, static_cast<double>(p_max - 1));
        }
        for (int j = 0; j < t; ++j) {
            int fl = static_cast<int>(std::floor(pos[j]));
            int ce = static_cast<int>(std::ceil(pos[j]));
            double w = pos[j] - fl;
            double zf = qt.data[i * dh] * et.data[fl * dh] + qt.data[i * dh + 1] * et.data[fl * dh + 1];
            double zc = qt.data[i * dh] * et.data[ce * dh] + qt.data[i * dh + 1] * et.data[ce * dh + 1];
            double expect = logits[j] + (w * zc + (1 - w) * zf);
            CHECK(out->val.data[static_cast<size_t>(i) * t + j] ==
                  doctest::Approx(expect).epsilon(1e-12));
        }
    }
}

TEST_CASE("relative pe logits against the double-loop oracle") {
    RngStream rng = make_stream(15, 2, 0);
    const int t = 6, dh = 4;
    auto q = make_var(randn({1, 2, t, dh}, rng));
    auto k = make_var(randn({1, 2, t, dh}, rng));
    std::vector<uint8_t> mask = causal_mask(t);

    // zero table reduces to plain attention
    auto zero_table = make_var(Tensor({t, dh}));
    auto with_zero = relative_pe_logits(q, k, zero_table, mask);
    auto plain = scaled_masked_logits(q, k, mask);
    for (size_t i = 0; i < plain->numel(); ++i) {
        CHECK(with_zero->val.data[i] == plain->val.data[i]);
    }

    auto table = make_var(randn({t, dh}, rng));
    auto out = relative_pe_logits(q, k, table, mask);
    for (int h = 0; h < 2; ++h) {
        for (int i = 0; i < t; ++i) {
            for (int j = 0; j <= i; ++j) {
                double qk = 0.0, qe = 0.0;
                for (int c = 0; c < dh; ++c) {
                    double qv = q->val.data[((static_cast<size_t>(h) * t) + i) * dh + c];
                    qk += qv * k->val.data[((static_cast<size_t>(h) * t) + j) * dh + c];
                    qe += qv * table->val.data[static_cast<size_t>(i - j) * dh + c];
                }
                double expect = qk / std::sqrt(static_cast<double>(dh)) + qe;
                CHECK(out->val.data[((static_cast<size_t>(h) * t) + i) * t + j] ==
                      doctest::Approx(expect).epsilon(1e-6));
            }
        }
    }

    auto small = make_var(randn({t - 1, dh}, rng));
    CHECK_THROWS_AS(relative_pe_logits(q, k, small, mask), std::invalid_argument);
}

TEST_CASE("relative capped reuses the last offset embedding") {
    RngStream rng = make_stream(16, 2, 0);
    const int cap = 3, t = 2 * cap, dh = 4;
    auto q = make_var(randn({1, 1, t, dh}, rng));
    auto k = make_var(randn({1, 1, t, dh}, rng));
    std::vector<uint8_t> mask = causal_mask(t);
    auto table = make_var(randn({cap, dh}, rng));
    auto capped = relative_capped_logits(q, k, table, mask);

    auto full_table = make_var(randn({t, dh}, rng));
    // below the cap both variants agree when tables agree there
    for (int o = 0; o < cap; ++o) {
        for (int c = 0; c < dh; ++c) {
            full_table->val.data[static_cast<size_t>(o) * dh + c] =
                table->val.data[static_cast<size_t>(o) * dh + c];
        }
    }
    auto uncapped = relative_pe_logits(q, k, full_table, mask);
    for (int i = 0; i < t; ++i) {
        for (int j = 0; j <= i; ++j) {
            if (i - j < cap) {
                CHECK(capped->val.data[static_cast<size_t>(i) * t + j] ==
                      uncapped->val.data[static_cast<size_t>(i) * t + j]);
            } else {
                // beyond the cap: index cap-1
                double qk = 0.0, qe = 0.0;
                for (int c = 0; c < dh; ++c) {
                    qk += q->val.data[static_cast<size_t>(i) * dh + c] *
                          k->val.data[static_cast<size_t>(j) * dh + c];
                    qe += q->val.data[static_cast<size_t>(i) * dh + c] *
                          table->val.data[static_cast<size_t>(cap - 1) * dh + c];
                }
                CHECK(capped->val.data[static_cast<size_t>(i) * t + j] ==
                      doctest::Approx(qk / 2.0 + qe).epsilon(1e-9));
            }
        }
    }
}

TEST_CASE("rope basics") {
    RngStream rng = make_stream(17, 2, 0);
    const int t = 20, dh = 8;
    Tensor xt = randn({1, 1, t, dh}, rng);
    auto x = make_var(xt);
    auto y = rope_apply(x, 10000.0);
    // position 0 is the identity
    for (int c = 0; c < dh; ++c) CHECK(y->val.data[c] == xt.data[c]);
    // norm preservation
    for (int p = 0; p < t; ++p) {
        double n0 = 0.0, n1 = 0.0;
        for (int c = 0; c < dh; ++c) {
            n0 += xt.data[static_cast<size_t>(p) * dh + c] * xt.data[static_cast<size_t>(p) * dh + c];
            n1 += y->val.data[static_cast<size_t>(p) * dh + c] *
                  y->val.data[static_cast<size_t>(p) * dh + c];
        }
        CHECK(std::sqrt(n1) == doctest::Approx(std::sqrt(n0)).epsilon(1e-6));
    }
    // logits depend only on the relative offset: plant the same q content at
    // positions i and i+5, same k content at j and j+5
    Tensor qt({1, 1, t, dh}), kt({1, 1, t, dh});
    std::vector<double> qvec(dh), kvec(dh);
    for (int c = 0; c < dh; ++c) {
        qvec[c] = rng.next_gaussian();
        kvec[c] = rng.next_gaussian();
    }
    int i = 7, j = 3, shift = 5;
    for (int c = 0; c < dh; ++c) {
        qt.data[static_cast<size_t>(i) * dh + c] = qvec[c];
        qt.data[static_cast<size_t>(i + shift) * dh + c] = qvec[c];
        kt.data[static_cast<size_t>(j) * dh + c] = kvec[c];
        kt.data[static_cast<size_t>(j + shift) * dh + c] = kvec[c];
    }
    auto qr = rope_apply(make_var(qt), 10000.0);
    auto kr = rope_apply(make_var(kt), 10000.0);
    auto dot = [&](int qi, int kj) {
        double acc = 0.0;
        for (int c = 0; c < dh; ++c) {
            acc += qr->val.data[static_cast<size_t>(qi) * dh + c] *
                   kr->val.data[static_cast<size_t>(kj) * dh + c];
        }
        return acc;
    };
    CHECK(dot(i, j) == doctest::Approx(dot(i + shift, j + shift)).epsilon(1e-5));

    CHECK_THROWS_AS(rope_apply(make_var(Tensor({1, 2, 3})), 10000.0), std::invalid_argument);
}

TEST_CASE("cope alibi logits") {
    RngStream rng = make_stream(18, 2, 0);
    const int t = 5, dh = 4, h = 2;
    auto q = make_var(randn({1, h, t, dh}, rng));
    auto k = make_var(randn({1, h, t, dh}, rng));
    std::vector<uint8_t> mask = causal_mask(t);
    CopeConfig cc;
    cc.p_max = t + 2;

    // zero slopes reduce to plain attention
    auto zero_m = make_var(Tensor({h}));
    auto out0 = cope_alibi_logits(q, k, nullptr, mask, zero_m, cc);
    auto plain = scaled_masked_logits(q, k, mask);
    for (size_t i = 0; i < plain->numel(); ++i) CHECK(out0->val.data[i] == plain->val.data[i]);

    // all-ones gates, slope 0.5, offset i-j+1 = 4 -> bias 2.0
    CopeConfig forced = cc;
    forced.gate_override = 1.0;
    Tensor half({h});
    half.data = {0.5, 0.5};
    auto out1 = cope_alibi_logits(q, k, nullptr, mask, make_var(half), forced);
    int i = 4, j = 1;
    double bias = out1->val.data[static_cast<size_t>(i) * t + j] -
                  plain->val.data[static_cast<size_t>(i) * t + j];
    CHECK(bias == doctest::Approx(2.0).epsilon(1e-12));

    // learned slopes carry gradients
    auto m = make_var(randn({h}, rng, 0.1));
    auto v = make_var(randn({1, h, t, dh}, rng));
    auto fn = [&] {
        auto logits = cope_alibi_logits(q, k, nullptr, mask, m, cc);
        auto attn = masked_softmax_rows(logits, mask, mask.size());
        auto r = matmul(attn, v);
        Tensor w(r->shape());
        for (size_t idx = 0; idx < w.data.size(); ++idx) w.data[idx] = 0.3 + std::sin(0.9 * idx);
        return sum(mul(r, make_const(std::move(w))));
    };
    CHECK(finite_difference_check(fn, {m}) < 1e-4);

    Tensor bad({h + 1});
    CHECK_THROWS_AS(cope_alibi_logits(q, k, nullptr, mask, make_var(bad), cc),
                    std::invalid_argument);
}

TEST_CASE("absolute pe add") {
    RngStream rng = make_stream(19, 2, 0);
    const int b = 2, t = 4, d = 3;
    Tensor ht = randn({b, t, d}, rng);
    auto h = make_var(ht);

    auto zero = make_var(Tensor({t + 2, d}));
    auto same = absolute_pe_add(h, zero);
    CHECK(same->val.data == ht.data);

    Tensor onehot({t + 2, d});
    onehot.data[static_cast<size_t>(1) * d + 2] = 1.0;  // position 1, coord 2
    auto shifted = absolute_pe_add(h, make_var(onehot));
    for (int bb = 0; bb < b; ++bb) {
        for (int tt = 0; tt < t; ++tt) {
            for (int c = 0; c < d; ++c) {
                size_t idx = (static_cast<size_t>(bb) * t + tt) * d + c;
                double delta = shifted->val.data[idx] - ht.data[idx];
                if (tt == 1 && c == 2) {
                    CHECK(delta == doctest::Approx(1.0).epsilon(1e-12));
                } else {
                    CHECK(delta == 0.0);
                }
            }
        }
    }

    // subtraction oracle (up to one rounding of the addition)
    Tensor table = randn({t, d}, rng);
    auto out = absolute_pe_add(h, make_var(table));
    for (int bb = 0; bb < b; ++bb) {
        for (int tt = 0; tt < t; ++tt) {
            for (int c = 0; c < d; ++c) {
                size_t idx = (static_cast<size_t>(bb) * t + tt) * d + c;
                CHECK(out->val.data[idx] - ht.data[idx] ==
                      doctest::Approx(table.data[static_cast<size_t>(tt) * d + c]).epsilon(1e-12));
            }
        }
    }

    auto short_table = make_var(Tensor({t - 1, d}));
    CHECK_THROWS_AS(absolute_pe_add(h, short_table), std::invalid_argument);
}

TEST_CASE("forced unit gates make cope equal relative pe at offset i-j+1") {
    RngStream rng = make_stream(20, 2, 0);
    const int t = 6, dh = 4, h = 2;
    auto q = make_var(randn({1, h, t, dh}, rng));
    auto k = make_var(randn({1, h, t, dh}, rng));
    auto v = make_var(randn({1, h, t, dh}, rng));
    std::vector<uint8_t> mask = causal_mask(t);

    auto cope_table = make_var(randn({t + 2, dh}, rng));  // p_max >= T+1
    CopeConfig cc;
    cc.p_max = t + 2;
    cc.gate_override = 1.0;
    auto cope = cope_attention_logits(q, k, v, nullptr, mask, cope_table, cc);

    // relative table shifted by one: row o = cope row o+1
    Tensor shifted({t, dh});
    for (int o = 0; o < t; ++o) {
        for (int c = 0; c < dh; ++c) {
            shifted.data[static_cast<size_t>(o) * dh + c] =
                cope_table->val.data[static_cast<size_t>(o + 1) * dh + c];
        }
    }
    auto rel = relative_pe_logits(q, k, make_var(shifted), mask);
    for (int hh = 0; hh < h; ++hh) {
        for (int i = 0; i < t; ++i) {
            for (int j = 0; j <= i; ++j) {
                size_t idx = (static_cast<size_t>(hh) * t + i) * t + j;
                CHECK(std::abs(cope->val.data[idx] - rel->val.data[idx]) <= 1e-12);
            }
        }
    }
}

TEST_CASE("permuting heads permutes per-head outputs with no cross-talk") {
    RngStream rng = make_stream(21, 2, 0);
    const int t = 4, dh = 3, h = 3;
    Tensor qt = randn({1, h, t, dh}, rng), kt = randn({1, h, t, dh}, rng),
           vt = randn({1, h, t, dh}, rng);
    std::vector<uint8_t> mask = causal_mask(t);
    auto table = make_var(randn({4, dh}, rng));
    PEVariant pe;
    pe.kind = PEKind::cope;
    pe.cope.p_max = 4;
    PETables tables;
    tables.cope_table = table;

    auto out = pe_attention_logits(pe, tables, make_var(qt), make_var(kt), make_var(vt), nullptr,
                                   mask);
    // swap heads 0 and 2 in the inputs
    auto swap_heads = [&](const Tensor& src) {
        Tensor dst = src;
        size_t blk = static_cast<size_t>(t) * dh;
        std::copy(src.data.begin(), src.data.begin() + blk, dst.data.begin() + 2 * blk);
        std::copy(src.data.begin() + 2 * blk, src.data.begin() + 3 * blk, dst.data.begin());
        return dst;
    };
    auto out2 = pe_attention_logits(pe, tables, make_var(swap_heads(qt)), make_var(swap_heads(kt)),
                                    make_var(swap_heads(vt)), nullptr, mask);
    size_t blk = static_cast<size_t>(t) * t;
    for (size_t i = 0; i < blk; ++i) {
        CHECK(out->val.data[i] == out2->val.data[2 * blk + i]);
        CHECK(out->val.data[2 * blk + i] == out2->val.data[i]);
        CHECK(out->val.data[blk + i] == out2->val.data[blk + i]);
    }
}

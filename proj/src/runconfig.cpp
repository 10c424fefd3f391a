#include "copelab/runconfig.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>

namespace copelab {

std::string to_string(TaskKind t) {
    switch (t) {
        case TaskKind::flipflop: return "flipflop";
        case TaskKind::selective_copy: return "selective_copy";
        case TaskKind::counting: return "counting";
        case TaskKind::charlm: return "charlm";
    }
    return "?";
}

TaskKind task_from_string(const std::string& s) {
    if (s == "flipflop") return TaskKind::flipflop;
    if (s == "selective_copy") return TaskKind::selective_copy;
    if (s == "counting") return TaskKind::counting;
    if (s == "charlm") return TaskKind::charlm;
    throw std::invalid_argument("unknown task '" + s + "'");
}

void RunConfig::finalize() {
    switch (task) {
        case TaskKind::flipflop:
            model.vocab_size = tasks::ff::kVocab;
            model.context_T = flipflop.seq_len();
            break;
        case TaskKind::selective_copy:
            model.vocab_size = tasks::sc::kVocab;
            model.context_T = copy.max_seq_len();
            break;
        case TaskKind::counting:
            model.vocab_size = tasks::ct::kVocab;
            model.context_T = counting.seq_len();
            break;
        case TaskKind::charlm:
            model.context_T = charlm_context;
            break;  // vocab_size comes from the corpus
    }
    if (model.pe.uses_cope() && model.pe.cope.p_max == -1) {
        // unset: cope defaults to 64 positions, the alibi variant to the
        // unclamped full range
        model.pe.cope.p_max = model.pe.kind == PEKind::cope
                                  ? std::min(64, model.context_T + 1)
                                  : model.context_T + 1;
    }
}

namespace {

// ----------------------------- value parsing -----------------------------

int parse_int(const std::string& key, const std::string& v) {
    int out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw std::invalid_argument(key + ": expected an integer, got '" + v + "'");
    }
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument("");
        return out;
    } catch (...) {
        throw std::invalid_argument(key + ": expected a number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument(key + ": expected true/false, got '" + v + "'");
}

std::vector<std::string> split_commas(const std::string& v) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : v) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

// ----------------------------- key registry -----------------------------

struct KeyEntry {
    const char* name;
    std::function<void(RunConfig&, const std::string&)> apply;
    std::function<std::string(const RunConfig&)> render;
};

// pe.* keys that only make sense for certain kinds; used both to reject
// misconfigured files and to keep serialized configs round-trippable
struct Applicability {
    const char* key;
    bool (*pred)(const RunConfig&);
    const char* why;
};

const Applicability kPEKeyRules[] = {
    {"pe.p_max", [](const RunConfig& c) { return c.model.pe.uses_cope(); },
     "only cope variants have a position limit"},
    {"pe.gate_source", [](const RunConfig& c) { return c.model.pe.uses_cope(); },
     "gates exist only for cope variants"},
    {"pe.share_across_layers", [](const RunConfig& c) { return c.model.pe.kind == PEKind::cope; },
     "only cope has embedding tables to share"},
    {"pe.alibi_slopes", [](const RunConfig& c) { return c.model.pe.kind == PEKind::cope_alibi; },
     "slopes exist only for cope_alibi"},
    {"pe.cap", [](const RunConfig& c) { return c.model.pe.kind == PEKind::relative_capped; },
     "cap applies only to relative_capped"},
    {"pe.rope_base", [](const RunConfig& c) { return c.model.pe.uses_rope(); },
     "no rotary component in this pe.kind"},
    {"pe.combine_with", [](const RunConfig& c) { return c.model.pe.kind == PEKind::cope; },
     "combinations are defined for cope only"},
};

bool key_applicable(const std::string& name, const RunConfig& cfg) {
    for (const auto& rule : kPEKeyRules) {
        if (name == rule.key) return rule.pred(cfg);
    }
    return true;
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

const std::vector<KeyEntry>& registry() {
    auto int_key = [](const char* name, auto getter) {
        return KeyEntry{
            name,
            [name, getter](RunConfig& c, const std::string& v) { getter(c) = parse_int(name, v); },
            [getter](const RunConfig& c) { return std::to_string(getter(const_cast<RunConfig&>(c))); }};
    };
    auto dbl_key = [](const char* name, auto getter) {
        return KeyEntry{
            name,
            [name, getter](RunConfig& c, const std::string& v) { getter(c) = parse_double(name, v); },
            [getter](const RunConfig& c) { return fmt_double(getter(const_cast<RunConfig&>(c))); }};
    };
    auto bool_key = [](const char* name, auto getter) {
        return KeyEntry{
            name,
            [name, getter](RunConfig& c, const std::string& v) { getter(c) = parse_bool(name, v); },
            [getter](const RunConfig& c) {
                return getter(const_cast<RunConfig&>(c)) ? std::string("true") : std::string("false");
            }};
    };
    auto str_key = [](const char* name, auto getter) {
        return KeyEntry{name, [getter](RunConfig& c, const std::string& v) { getter(c) = v; },
                        [getter](const RunConfig& c) { return getter(const_cast<RunConfig&>(c)); }};
    };

    static const std::vector<KeyEntry> keys = {
        {"task", [](RunConfig& c, const std::string& v) { c.task = task_from_string(v); },
         [](const RunConfig& c) { return to_string(c.task); }},
        {"seeds",
         [](RunConfig& c, const std::string& v) {
             c.seeds.clear();
             for (const auto& s : split_commas(v)) c.seeds.push_back(parse_int("seeds", s));
             if (c.seeds.empty()) throw std::invalid_argument("seeds: need at least one seed");
         },
         [](const RunConfig& c) {
             std::string out;
             for (size_t i = 0; i < c.seeds.size(); ++i) {
                 if (i) out += ",";
                 out += std::to_string(c.seeds[i]);
             }
             return out;
         }},
        str_key("out_dir", [](RunConfig& c) -> std::string& { return c.out_dir; }),

        int_key("model.d_model", [](RunConfig& c) -> int& { return c.model.d_model; }),
        int_key("model.n_heads", [](RunConfig& c) -> int& { return c.model.n_heads; }),
        int_key("model.n_layers", [](RunConfig& c) -> int& { return c.model.n_layers; }),
        dbl_key("model.ffn_mult", [](RunConfig& c) -> double& { return c.model.ffn_mult; }),
        bool_key("model.tie_head", [](RunConfig& c) -> bool& { return c.model.tie_head; }),

        {"pe.kind", [](RunConfig& c, const std::string& v) { c.model.pe.kind = pe_kind_from_string(v); },
         [](const RunConfig& c) { return to_string(c.model.pe.kind); }},
        {"pe.combine_with",
         [](RunConfig& c, const std::string& v) {
             if (v == "relative") {
                 c.model.pe.combine_with = CombineWith::relative;
             } else if (v == "rope") {
                 c.model.pe.combine_with = CombineWith::rope;
             } else if (v == "none") {
                 c.model.pe.combine_with = CombineWith::none;
             } else {
                 throw std::invalid_argument("pe.combine_with: expected relative/rope/none, got '" + v + "'");
             }
         },
         [](const RunConfig& c) {
             switch (c.model.pe.combine_with) {
                 case CombineWith::relative: return std::string("relative");
                 case CombineWith::rope: return std::string("rope");
                 default: return std::string("none");
             }
         }},
        int_key("pe.p_max", [](RunConfig& c) -> int& { return c.model.pe.cope.p_max; }),
        {"pe.gate_source",
         [](RunConfig& c, const std::string& v) { c.model.pe.cope.gate_source = gate_source_from_string(v); },
         [](const RunConfig& c) { return to_string(c.model.pe.cope.gate_source); }},
        bool_key("pe.share_across_layers",
                 [](RunConfig& c) -> bool& { return c.model.pe.cope.share_across_layers; }),
        {"pe.alibi_slopes",
         [](RunConfig& c, const std::string& v) {
             c.model.pe.cope.alibi_slopes.clear();
             c.model.pe.cope.alibi_learned = false;
             if (v == "learned") {
                 c.model.pe.cope.alibi_learned = true;
             } else {
                 for (const auto& s : split_commas(v)) {
                     c.model.pe.cope.alibi_slopes.push_back(parse_double("pe.alibi_slopes", s));
                 }
             }
         },
         [](const RunConfig& c) {
             if (c.model.pe.cope.alibi_learned) return std::string("learned");
             std::string out;
             for (size_t i = 0; i < c.model.pe.cope.alibi_slopes.size(); ++i) {
                 if (i) out += ",";
                 out += fmt_double(c.model.pe.cope.alibi_slopes[i]);
             }
             return out;
         }},
        int_key("pe.cap", [](RunConfig& c) -> int& { return c.model.pe.rel_cap; }),
        dbl_key("pe.rope_base", [](RunConfig& c) -> double& { return c.model.pe.rope_base; }),

        dbl_key("opt.lr", [](RunConfig& c) -> double& { return c.opt.lr; }),
        dbl_key("opt.beta1", [](RunConfig& c) -> double& { return c.opt.beta1; }),
        dbl_key("opt.beta2", [](RunConfig& c) -> double& { return c.opt.beta2; }),
        dbl_key("opt.eps", [](RunConfig& c) -> double& { return c.opt.eps; }),
        dbl_key("opt.weight_decay", [](RunConfig& c) -> double& { return c.opt.weight_decay; }),
        bool_key("opt.lr_decay", [](RunConfig& c) -> bool& { return c.lr_decay; }),
        dbl_key("opt.grad_clip", [](RunConfig& c) -> double& { return c.grad_clip; }),

        int_key("train.batch_size", [](RunConfig& c) -> int& { return c.batch_size; }),
        int_key("train.total_steps", [](RunConfig& c) -> int& { return c.total_steps; }),
        int_key("train.stop_after", [](RunConfig& c) -> int& { return c.stop_after; }),
        int_key("train.eval_every", [](RunConfig& c) -> int& { return c.eval_every; }),
        int_key("train.eval_size", [](RunConfig& c) -> int& { return c.eval_size; }),
        bool_key("train.early_stop_zero", [](RunConfig& c) -> bool& { return c.early_stop_zero; }),

        int_key("flipflop.n_pairs", [](RunConfig& c) -> int& { return c.flipflop.n_pairs; }),
        dbl_key("flipflop.p_ignore_train", [](RunConfig& c) -> double& { return c.flipflop.p_ignore_train; }),
        dbl_key("flipflop.p_ignore_ood", [](RunConfig& c) -> double& { return c.flipflop.p_ignore_ood; }),
        {"flipflop.loss",
         [](RunConfig& c, const std::string& v) {
             if (v == "read_only") {
                 c.flipflop.loss_all_positions = false;
             } else if (v == "all") {
                 c.flipflop.loss_all_positions = true;
             } else {
                 throw std::invalid_argument("flipflop.loss: expected read_only/all, got '" + v + "'");
             }
         },
         [](const RunConfig& c) {
             return c.flipflop.loss_all_positions ? std::string("all") : std::string("read_only");
         }},

        int_key("copy.n_content", [](RunConfig& c) -> int& { return c.copy.n_content; }),
        int_key("copy.n_blanks", [](RunConfig& c) -> int& { return c.copy.n_blanks; }),
        int_key("copy.n_blanks_dense", [](RunConfig& c) -> int& { return c.copy.n_blanks_dense; }),
        int_key("copy.n_blanks_sparse", [](RunConfig& c) -> int& { return c.copy.n_blanks_sparse; }),

        int_key("counting.n_vars", [](RunConfig& c) -> int& { return c.counting.n_vars; }),
        dbl_key("counting.w_set", [](RunConfig& c) -> double& { return c.counting.w_set; }),
        dbl_key("counting.w_incr", [](RunConfig& c) -> double& { return c.counting.w_incr; }),
        dbl_key("counting.w_pass", [](RunConfig& c) -> double& { return c.counting.w_pass; }),
        dbl_key("counting.w_pass_ood_long",
                [](RunConfig& c) -> double& { return c.counting.w_pass_ood_long; }),
        dbl_key("counting.w_pass_ood_short",
                [](RunConfig& c) -> double& { return c.counting.w_pass_ood_short; }),
        int_key("counting.max_value", [](RunConfig& c) -> int& { return c.counting.max_value; }),
        int_key("counting.max_ops", [](RunConfig& c) -> int& { return c.counting.max_ops; }),
        int_key("counting.min_ops", [](RunConfig& c) -> int& { return c.counting.min_ops; }),
        int_key("counting.train_pool", [](RunConfig& c) -> int& { return c.counting.train_pool; }),

        str_key("charlm.text", [](RunConfig& c) -> std::string& { return c.charlm_text; }),
        dbl_key("charlm.val_frac", [](RunConfig& c) -> double& { return c.charlm_val_frac; }),
        int_key("charlm.context", [](RunConfig& c) -> int& { return c.charlm_context; }),
    };
    return keys;
}

size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<size_t> row(b.size() + 1);
    for (size_t j = 0; j <= b.size(); ++j) row[j] = j;
    for (size_t i = 1; i <= a.size(); ++i) {
        size_t diag = row[0];
        row[0] = i;
        for (size_t j = 1; j <= b.size(); ++j) {
            size_t next = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] != b[j - 1] ? 1 : 0)});
            diag = row[j];
            row[j] = next;
        }
    }
    return row[b.size()];
}

const KeyEntry* find_key(const std::string& name) {
    for (const auto& e : registry()) {
        if (name == e.name) return &e;
    }
    return nullptr;
}

[[noreturn]] void unknown_key(const std::string& name) {
    const KeyEntry* best = nullptr;
    size_t best_d = static_cast<size_t>(-1);
    for (const auto& e : registry()) {
        size_t d = edit_distance(name, e.name);
        if (d < best_d) {
            best_d = d;
            best = &e;
        }
    }
    throw std::invalid_argument("unknown config key '" + name + "' (did you mean '" +
                                (best ? best->name : "?") + "'?)");
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

// keys whose presence is only meaningful for specific pe kinds
void validate_keys(const RunConfig& cfg, const std::set<std::string>& set_keys) {
    for (const auto& rule : kPEKeyRules) {
        if (set_keys.count(rule.key) && !rule.pred(cfg)) {
            throw std::invalid_argument(std::string(rule.key) + " is not applicable with pe.kind=" +
                                        to_string(cfg.model.pe.kind) + ": " + rule.why);
        }
    }
    if (cfg.task == TaskKind::charlm && cfg.charlm_text.empty()) {
        throw std::invalid_argument("charlm.text is required for task=charlm");
    }
}

RunConfig parse_lines(const std::string& text,
                      const std::vector<std::pair<std::string, std::string>>& overrides) {
    RunConfig cfg;
    cfg.model.pe.cope.p_max = -1;  // sentinel: resolved by finalize() if left unset
    std::set<std::string> set_keys;
    auto apply = [&](const std::string& key, const std::string& value) {
        const KeyEntry* e = find_key(key);
        if (!e) unknown_key(key);
        e->apply(cfg, value);
        set_keys.insert(key);
    };
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        std::string s = trim(line);
        if (s.empty() || s[0] == '#') continue;
        size_t eq = s.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        ": expected key=value, got '" + s + "'");
        }
        apply(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
    for (const auto& [k, v] : overrides) apply(k, v);
    validate_keys(cfg, set_keys);
    cfg.finalize();
    if (cfg.task != TaskKind::charlm) {
        cfg.model.validate();  // charlm vocab comes from the corpus later
    }
    return cfg;
}

}  // namespace

RunConfig parse_config_text(const std::string& text,
                            const std::vector<std::pair<std::string, std::string>>& overrides) {
    return parse_lines(text, overrides);
}

RunConfig parse_config(const std::string& path,
                       const std::vector<std::pair<std::string, std::string>>& overrides) {
    std::string text;
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("cannot open config file " + path);
        text.assign((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    }
    return parse_lines(text, overrides);
}

std::string serialize_config(const RunConfig& cfg) {
    std::string out;
    for (const auto& e : registry()) {
        if (!key_applicable(e.name, cfg)) continue;
        std::string v = e.render(cfg);
        // skip empty list/string values; parsing them back would fail
        if (v.empty()) continue;
        out += e.name;
        out += " = ";
        out += v;
        out += "\n";
    }
    return out;
}

}  // namespace copelab

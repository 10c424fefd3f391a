// Command-line driver: train / eval / gradcheck / dump-attn / sweep.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "copelab/analysis.hpp"
#include "copelab/trainer.hpp"

namespace {

using copelab::Checkpoint;
using copelab::RunConfig;

void usage(std::ostream& os) {
    os << "usage: copelab <command> [options]\n"
          "\n"
          "commands:\n"
          "  train     --config FILE [--resume CKPT] [--KEY VALUE ...]\n"
          "  eval      --ckpt FILE [--KEY VALUE ...]\n"
          "  gradcheck\n"
          "  dump-attn --ckpt FILE --layer L --head H --mode position|gates\n"
          "            --input-file TOKENS.txt --out ROWS.txt\n"
          "  sweep     --config FILE --sizes N1,N2,... [--pe cope,relative]\n"
          "            [--out sweep.csv] [--KEY VALUE ...]\n"
          "\n"
          "Any --KEY VALUE pair whose KEY is a config key (e.g. pe.kind,\n"
          "counting.w_pass) overrides the config file.\n";
}

struct Args {
    // reserved options pulled out of the argv stream
    std::string config, resume, ckpt, mode, input_file, out;
    std::string sizes, pe_list;
    int layer = 0, head = 0;
    std::vector<std::pair<std::string, std::string>> overrides;
};

Args parse_args(int argc, char** argv, int first) {
    Args a;
    for (int i = first; i < argc; ++i) {
        std::string key = argv[i];
        if (key.rfind("--", 0) != 0) {
            throw std::invalid_argument("expected --key, got '" + key + "'");
        }
        key = key.substr(2);
        if (i + 1 >= argc) {
            throw std::invalid_argument("--" + key + " needs a value");
        }
        std::string value = argv[++i];
        if (key == "config") {
            a.config = value;
        } else if (key == "resume") {
            a.resume = value;
        } else if (key == "ckpt") {
            a.ckpt = value;
        } else if (key == "mode") {
            a.mode = value;
        } else if (key == "input-file") {
            a.input_file = value;
        } else if (key == "out") {
            a.out = value;
        } else if (key == "layer") {
            a.layer = std::stoi(value);
        } else if (key == "head") {
            a.head = std::stoi(value);
        } else if (key == "sizes") {
            a.sizes = value;
        } else if (key == "pe") {
            a.pe_list = value;
        } else {
            a.overrides.push_back({key, value});
        }
    }
    return a;
}

std::vector<int> read_token_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open token file " + path);
    std::vector<int> tokens;
    int v;
    while (is >> v) tokens.push_back(v);
    if (tokens.empty()) throw std::runtime_error(path + " contains no token ids");
    return tokens;
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
    return out;
}

int cmd_train(const Args& a) {
    if (!a.resume.empty()) {
        Checkpoint ck = copelab::load_checkpoint(a.resume);
        RunConfig cfg = a.config.empty() ? ck.config : copelab::parse_config(a.config, a.overrides);
        std::string dir = cfg.out_dir + "/seed_" + std::to_string(ck.run_seed);
        copelab::train_one_seed(cfg, ck.run_seed, dir, &std::cout, &ck);
        return 0;
    }
    RunConfig cfg = copelab::parse_config(a.config, a.overrides);
    copelab::run_train(cfg, &std::cout);
    return 0;
}

int cmd_eval(const Args& a) {
    if (a.ckpt.empty()) throw std::invalid_argument("eval needs --ckpt");
    Checkpoint ck = copelab::load_checkpoint(a.ckpt);
    RunConfig cfg = ck.config;
    if (!a.overrides.empty()) {
        // re-parse the stored config with the overrides applied on top
        cfg = copelab::parse_config_text(copelab::serialize_config(ck.config), a.overrides);
        cfg.model.vocab_size = ck.config.model.vocab_size;
    }
    copelab::run_eval(ck, cfg, &std::cout);
    return 0;
}

int cmd_dump(const Args& a) {
    if (a.ckpt.empty() || a.mode.empty() || a.input_file.empty() || a.out.empty()) {
        throw std::invalid_argument("dump-attn needs --ckpt, --mode, --input-file and --out");
    }
    Checkpoint ck = copelab::load_checkpoint(a.ckpt);
    std::vector<int> tokens = read_token_file(a.input_file);
    copelab::analysis::DumpResult d;
    if (a.mode == "position") {
        d = copelab::analysis::position_attention_map(ck, tokens, a.layer, a.head);
    } else if (a.mode == "gates") {
        d = copelab::analysis::gate_map(ck, tokens, a.layer, a.head);
    } else {
        throw std::invalid_argument("dump-attn: --mode must be position or gates");
    }
    std::ofstream os(a.out);
    if (!os) throw std::runtime_error("cannot open " + a.out + " for writing");
    copelab::analysis::write_dump(os, d);
    std::cout << "wrote " << d.mode << " map (layer " << d.layer << ", head " << d.head << ") to "
              << a.out << "\n";
    return 0;
}

int cmd_sweep(const Args& a) {
    RunConfig cfg = copelab::parse_config(a.config, a.overrides);
    if (a.sizes.empty()) throw std::invalid_argument("sweep needs --sizes N1,N2,...");
    std::vector<copelab::PEKind> kinds;
    if (a.pe_list.empty()) {
        kinds.push_back(cfg.model.pe.kind);
    } else {
        std::stringstream ss(a.pe_list);
        std::string item;
        while (std::getline(ss, item, ',')) kinds.push_back(copelab::pe_kind_from_string(item));
    }
    std::string out = a.out.empty() ? cfg.out_dir + "/sweep.csv" : a.out;
    copelab::run_sweep(cfg, parse_int_list(a.sizes), kinds, out, &std::cout);
    std::cout << "wrote " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        usage(std::cerr);
        return 2;
    }
    std::string cmd = argv[1];
    try {
        Args a = parse_args(argc, argv, 2);
        if (cmd == "train") return cmd_train(a);
        if (cmd == "eval") return cmd_eval(a);
        if (cmd == "gradcheck") return copelab::run_gradcheck_suite(std::cout) ? 0 : 1;
        if (cmd == "dump-attn") return cmd_dump(a);
        if (cmd == "sweep") return cmd_sweep(a);
        if (cmd == "help" || cmd == "--help" || cmd == "-h") {
            usage(std::cout);
            return 0;
        }
        std::cerr << "unknown command '" << cmd << "'\n";
        usage(std::cerr);
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

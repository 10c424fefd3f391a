#pragma once

#include <cstdint>
#include <string>

#include "copelab/model.hpp"
#include "copelab/runconfig.hpp"

namespace copelab {

// Versioned container: magic + version, the run-config text, training
// counters, then every named tensor (parameters first, optimizer moments
// after) as name / dtype / dims / little-endian doubles.
struct Checkpoint {
    RunConfig config;
    TransformerParams params;
    std::vector<std::vector<double>> opt_m, opt_v;  // in parameter order; may be empty
    int64_t opt_step = 0;
    int64_t step = 0;
    uint64_t run_seed = 0;
};

void save_checkpoint(const std::string& path, const RunConfig& cfg, const TransformerParams& params,
                     const AdamW* opt, int64_t step, uint64_t run_seed);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace copelab

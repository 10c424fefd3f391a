#pragma once

#include <string>
#include <vector>

#include "copelab/model.hpp"
#include "copelab/tasks.hpp"

namespace copelab {

enum class TaskKind { flipflop, selective_copy, counting, charlm };

std::string to_string(TaskKind t);
TaskKind task_from_string(const std::string& s);

// Everything a run needs, parsed from a flat key=value file plus CLI
// overrides and serialized verbatim into checkpoints and metrics for
// provenance.
struct RunConfig {
    TaskKind task = TaskKind::counting;
    std::vector<uint64_t> seeds = {1};
    std::string out_dir = "runs/out";

    ModelConfig model;  // vocab_size / context_T are derived, not parsed

    AdamWConfig opt;
    bool lr_decay = true;
    double grad_clip = 1.0;

    int batch_size = 16;
    int total_steps = 10000;
    int stop_after = 0;  // pause the run at this step (schedule still spans total_steps)
    int eval_every = 1000;
    int eval_size = 1000;
    bool early_stop_zero = false;

    tasks::FlipFlopConfig flipflop;
    tasks::SelectiveCopyConfig copy;
    tasks::CountingConfig counting;
    std::string charlm_text;
    double charlm_val_frac = 0.1;
    int charlm_context = 128;

    // task-derived model dimensions; charlm vocab is filled at load time
    void finalize();
};

// `overrides` are --key value pairs from the CLI; `path` may be empty to
// start from defaults. Unknown keys are rejected with the nearest known
// key suggested.
RunConfig parse_config(const std::string& path,
                       const std::vector<std::pair<std::string, std::string>>& overrides);
RunConfig parse_config_text(const std::string& text,
                            const std::vector<std::pair<std::string, std::string>>& overrides);

// canonical text form (one key=value per line, fixed order); parsing it
// back yields an identical config
std::string serialize_config(const RunConfig& cfg);

}  // namespace copelab

#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "copelab/checkpoint.hpp"
#include "copelab/runconfig.hpp"

namespace copelab {

struct MetricsRecord {
    int64_t step = 0;
    std::string split;
    double loss = 0.0;
    double error = 0.0;
    uint64_t seed = 0;
};

// one self-describing line per record; byte-stable across identical runs
std::string format_metrics_line(const MetricsRecord& r);

// Per-run data plumbing: fresh batches for the infinite-data tasks, a
// fixed 10K pool for counting, random crops for the char LM, and cached
// held-out eval sets per split (dedicated eval streams, shared by seeds).
class TaskRuntime {
  public:
    TaskRuntime(RunConfig& cfg, uint64_t seed);

    const std::vector<std::string>& split_names() const { return splits_; }
    tasks::LabeledBatch train_batch(int64_t step, int batch_size);
    const tasks::LabeledBatch& eval_set(const std::string& split, int size);

  private:
    RunConfig* cfg_;
    uint64_t seed_;
    tasks::CharLMData charlm_;
    tasks::LabeledBatch pool_;
    std::vector<std::string> splits_;
    std::map<std::string, tasks::LabeledBatch> eval_cache_;
};

struct EvalResult {
    double loss = 0.0;
    double error = 0.0;
};

// deterministic batched evaluation (no gradients)
EvalResult evaluate(const TransformerParams& params, const ModelConfig& cfg,
                    const tasks::LabeledBatch& set, int batch_size);

struct SeedOutcome {
    uint64_t seed = 0;
    int64_t steps_run = 0;
    std::string checkpoint_path;
    std::map<std::string, EvalResult> final_evals;
};

// Trains one seed (optionally resuming), writing metrics.txt and
// checkpoint.bin under run_dir.
SeedOutcome train_one_seed(const RunConfig& cfg, uint64_t seed, const std::string& run_dir,
                           std::ostream* console, const Checkpoint* resume = nullptr);

struct TrainSummary {
    std::vector<SeedOutcome> per_seed;
    // split -> (mean, stddev) of final error across seeds
    std::map<std::string, std::pair<double, double>> error_stats;
};

TrainSummary run_train(const RunConfig& cfg, std::ostream* console);

// evaluation splits of `cfg` applied to a loaded checkpoint
std::vector<MetricsRecord> run_eval(Checkpoint& ck, RunConfig cfg, std::ostream* console);

// finite-difference suite behind the `gradcheck` subcommand; prints one
// line per check, returns false if any exceeds the 1e-4 bound
bool run_gradcheck_suite(std::ostream& out);

// training-set-size sweep (counting task) emitting CSV rows
void run_sweep(const RunConfig& base, const std::vector<int>& pool_sizes,
               const std::vector<PEKind>& kinds, const std::string& csv_path, std::ostream* console);

}  // namespace copelab

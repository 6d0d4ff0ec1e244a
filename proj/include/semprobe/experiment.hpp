#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "semprobe/episodes.hpp"
#include "semprobe/synth_data.hpp"

namespace semprobe {

/// Complete description of one batch run: the episodic protocol, the
/// tuning arm (mode / rectification / loss), the schedule constants, the
/// seed list, and the data generator spec. Round-trips through flat JSON
/// with a `data` subobject; parsing rejects unknown keys so typos cannot
/// silently fall back to defaults.
struct ExperimentConfig {
    std::string label = "baseline";
    std::string mode = "lora";      // frozen | lora | prompt
    bool ear_on = true;
    std::string ear_layers = "4-4"; // "first-last", 1-based encoder layers
    double alpha = 0.8;             // rectification blend
    std::string loss = "bas";       // i2t_only | clip | bas | fixed_beta
    double w = 7.0;                 // schedule ceiling
    double k = 5.0;                 // schedule steepness
    double T = 3.5;                 // schedule threshold
    double fixed_beta = 0.0;        // weight used by loss = fixed_beta
    double tau = 0.07;              // contrastive temperature
    double lr = 0.1;
    std::size_t epochs = 100;
    std::size_t n_way = 5;
    std::size_t k_shot = 5;
    std::size_t m_query = 15;
    std::size_t u_prompts = 30;
    std::size_t episodes_count = 50;
    std::size_t workers = 1;
    std::vector<std::uint64_t> seeds = {0};
    SynthDomainSpec data;

    void validate() const; // throws naming the offending field
};

/// The built-in defaults (also what `--print-defaults` emits).
ExperimentConfig default_config();

/// Pretty-printed JSON with a stable key order; parse of the output
/// reproduces the config exactly.
std::string config_to_json(const ExperimentConfig& cfg);

/// Parses and validates. Errors name the offending field.
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::string& path);

/// Encoder realization for a config: paper-scale defaults with the input
/// geometry (patch width, patch count, vocabulary) taken from the data
/// spec and the rectification range from `ear_layers`.
EncoderConfig encoder_config_for(const ExperimentConfig& cfg);

/// Evaluation options for one seed of the config's seed list.
EvalOptions eval_options_for(const ExperimentConfig& cfg, std::uint64_t seed);

struct SeedOutcome {
    std::uint64_t seed = 0;
    RunResult result;
};

/// One finished run: per-seed results plus statistics pooled over every
/// episode of every seed. `final_mean` averages the last trace row across
/// seeds (the numbers comparison tables report).
struct ExperimentOutcome {
    ExperimentConfig config;
    std::vector<SeedOutcome> per_seed;
    double pooled_mean = 0.0;
    double pooled_ci = 0.0;
    std::size_t pooled_episodes = 0;
    EpochRecord final_mean;
};

/// Generates the dataset once from `cfg.data`, then runs one evaluation
/// per seed (seed s drives the model init and the episode sampling).
/// Deterministic for a given config; independent of worker count.
ExperimentOutcome run_experiment(const ExperimentConfig& cfg);

/// Writes result.json, trace.csv (first seed's episode-0 trace), and
/// summary.txt into `out_dir`, creating it if needed.
void write_run_artifacts(const ExperimentOutcome& outcome,
                         const std::string& out_dir);

/// Schema constants for the trace CSV.
extern const char* const kTraceVersionLine; // "# semprobe-trace v1"
extern const char* const kTraceHeaderLine;  // the pinned column list

/// One row of a comparison table, read back from a run directory.
struct CompareRow {
    std::string dir;
    std::string label;
    double mean_accuracy = 0.0;
    double ci_half_width = 0.0;
    double align_score = 0.0;
    double modality_gap = 0.0;
    double ch_image = 0.0;
    double ch_text = 0.0;
    double entropy_cls = 0.0;
    double entropy_rectified = 0.0;
};

/// Reads `dir`/result.json. Throws with the path on any problem.
CompareRow load_run_dir(const std::string& dir);

/// Rows sorted by label (directory as tie-break), rendered as a
/// fixed-width text table / as CSV.
std::string compare_table(std::vector<CompareRow> rows);
std::string compare_csv(std::vector<CompareRow> rows);

/// Splits a comma-separated value list; throws if the list or any entry
/// is empty.
std::vector<std::string> split_value_list(const std::string& csv);

/// Command layer the CLI delegates to; each returns a process exit code
/// (0 success, 1 aborted run with partial trace preserved, 2 invalid
/// config or arguments) and reports through the given streams.
int cmd_run(const std::string& config_path, const std::string& out_dir,
            std::optional<std::size_t> workers,
            std::optional<std::uint64_t> seed, std::ostream& out,
            std::ostream& err);
int cmd_compare(const std::vector<std::string>& dirs,
                const std::string& csv_path, std::ostream& out,
                std::ostream& err);
int cmd_sweep(const std::string& config_path, const std::string& param,
              const std::string& values_csv, const std::string& out_dir,
              std::optional<std::size_t> workers, std::ostream& out,
              std::ostream& err);
int cmd_print_defaults(std::ostream& out);

} // namespace semprobe

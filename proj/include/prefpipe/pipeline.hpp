#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "prefpipe/annotate.hpp"
#include "prefpipe/dpo.hpp"
#include "prefpipe/pool.hpp"
#include "prefpipe/prefs.hpp"
#include "prefpipe/record_io.hpp"

namespace prefpipe {

// Optional per-task subsampling applied at ingest.
struct SampleRule {
    std::string key;  // "source", "category", or "id-prefix"
    std::size_t n = 0;
};

struct PipelinePaths {
    std::filesystem::path corpus;       // raw instruction records (input)
    std::filesystem::path manifest;     // canonical manifest written by ingest
    std::filesystem::path responses;
    std::filesystem::path annotations;
    std::filesystem::path pairs;
    std::filesystem::path checkpoint;
    std::filesystem::path history;
    std::filesystem::path reports;      // directory for reports and the run log
};

struct PoolConfig {
    std::vector<GeneratorSpec> registry;
    std::size_t k_min = 4;
    std::size_t max_attempts = 3;
    std::uint64_t backoff_base_ms = 250;
    double failure_budget = 0.5;  // abort (exit 2) past this failed fraction
};

struct JudgeConfig {
    std::string endpoint = "mock";
    std::string annotator_id = "judge";
    std::size_t retries = 2;
    std::size_t transport_attempts = 3;
    std::uint64_t backoff_base_ms = 250;
    double failure_budget = 0.5;
    bool shuffle_responses = false;
};

struct TrainSection {
    DpoConfig dpo;
    double validation_fraction = 0.1;  // seeded holdout from the pair store
};

struct PipelineConfig {
    std::uint64_t seed = 0;
    std::size_t parallelism = 1;
    PipelinePaths paths;
    PoolConfig pool;
    JudgeConfig judge;
    AspectWeights aspect_weights;
    std::optional<bool> ingest_train_only;  // default true
    std::optional<SampleRule> ingest_sample;
    TrainSection train;

    std::string config_hash;  // canonical hash of the loaded JSON

    // Parses and validates a config file. The seed must be explicit and
    // every path declared; there are no wall-clock defaults anywhere.
    static PipelineConfig load(const std::filesystem::path& path);

    // Re-serializes the canonical form (used for hashing and run logs).
    json to_json() const;
};

struct CommandContext {
    PipelineConfig config;
    bool dry_run = false;
    std::ostream* out = nullptr;  // defaults to std::cout when null
};

struct IngestReport {
    std::size_t lines_read = 0;
    std::size_t redteam_test_excluded = 0;
    std::size_t test_split_filtered = 0;
    std::size_t sampled_out = 0;
    std::size_t written = 0;
};

struct DecodeReport {
    std::size_t instructions = 0;
    std::size_t responses = 0;
    std::size_t failed = 0;
};

struct AnnotateCmdReport {
    std::size_t instructions = 0;
    std::size_t annotated = 0;
    std::size_t excluded = 0;
    std::size_t skipped_failed_responses = 0;
    std::size_t parse_retries = 0;
    double estimated_cost = 0.0;
};

struct PairsReport {
    std::size_t instructions = 0;
    std::size_t comparisons = 0;  // K(K-1)/2 summed over instructions
    std::size_t pairs = 0;
    std::size_t ties_dropped = 0;
};

struct StatsReport {
    std::filesystem::path report_path;
    std::filesystem::path histogram_path;
};

struct TrainReport {
    std::size_t contexts = 0;
    std::size_t outcomes = 0;
    std::size_t steps = 0;
    double final_train_loss = 0.0;
    std::optional<double> final_val_loss;
};

struct EvalReport {
    std::size_t pairs = 0;
    double accuracy = 0.0;
    double mean_margin = 0.0;
};

IngestReport cmd_ingest(const CommandContext& ctx);
DecodeReport cmd_decode(const CommandContext& ctx);
AnnotateCmdReport cmd_annotate(const CommandContext& ctx);
PairsReport cmd_build_pairs(const CommandContext& ctx);
StatsReport cmd_stats(const CommandContext& ctx);
TrainReport cmd_train(const CommandContext& ctx);
EvalReport cmd_eval(const CommandContext& ctx);

}  // namespace prefpipe

#include <array>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "prefpipe/errors.hpp"
#include "prefpipe/pipeline.hpp"
#include "prefpipe/record_io.hpp"

namespace {

int dispatch(const std::string& command, const prefpipe::CommandContext& ctx) {
    if (command == "ingest") {
        prefpipe::cmd_ingest(ctx);
    } else if (command == "decode") {
        prefpipe::cmd_decode(ctx);
    } else if (command == "annotate") {
        prefpipe::cmd_annotate(ctx);
    } else if (command == "build-pairs") {
        prefpipe::cmd_build_pairs(ctx);
    } else if (command == "stats") {
        prefpipe::cmd_stats(ctx);
    } else if (command == "train") {
        prefpipe::cmd_train(ctx);
    } else if (command == "eval") {
        prefpipe::cmd_eval(ctx);
    } else {
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"preference pipeline: ingest, decode, annotate, pair, train, evaluate"};
    app.fallthrough();
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed_override;
    std::optional<std::size_t> parallelism_override;
    bool dry_run = false;

    app.add_option("--config", config_path, "pipeline configuration file")->required();
    app.add_option("--seed", seed_override, "override the run seed (training included)");
    app.add_option("--parallelism", parallelism_override, "override the worker count");
    app.add_flag("--dry-run", dry_run, "validate and report without writing anything");

    const std::array<const char*, 7> commands = {
        "ingest", "decode", "annotate", "build-pairs", "stats", "train", "eval",
    };
    const std::array<const char*, 7> descriptions = {
        "load, filter, and sample the instruction corpus into a canonical manifest",
        "decode every instruction with a sampled subset of the model registry",
        "collect multi-aspect judge ratings for the decoded responses",
        "turn annotations into preference pairs, dropping exact ties",
        "report score histograms, per-model means, and pair statistics",
        "fit the tabular policy on the preference pairs",
        "score the trained checkpoint against the pair store",
    };
    for (std::size_t i = 0; i < commands.size(); ++i) {
        app.add_subcommand(commands[i], descriptions[i]);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        prefpipe::CommandContext ctx;
        ctx.config = prefpipe::PipelineConfig::load(config_path);
        if (seed_override) {
            ctx.config.seed = *seed_override;
            ctx.config.train.dpo.seed = *seed_override;
        }
        if (parallelism_override) {
            if (*parallelism_override == 0) {
                throw prefpipe::ConfigError("parallelism must be positive");
            }
            ctx.config.parallelism = *parallelism_override;
        }
        if (seed_override || parallelism_override) {
            ctx.config.config_hash = prefpipe::canonical_hash(ctx.config.to_json());
        }
        ctx.dry_run = dry_run;

        for (const auto* name : commands) {
            if (app.got_subcommand(name)) {
                return dispatch(name, ctx);
            }
        }
        std::cerr << "error: no subcommand given\n";
        return 1;
    } catch (const prefpipe::TransportError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const prefpipe::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

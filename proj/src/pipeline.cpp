#include "prefpipe/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "prefpipe/errors.hpp"
#include "prefpipe/rng.hpp"

namespace prefpipe {

namespace {

constexpr double kPricePerAspectResponse = 0.0003;

std::ostream& out_of(const CommandContext& ctx) {
    return ctx.out ? *ctx.out : std::cout;
}

const json* find_section(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end()) return nullptr;
    if (!it->is_object()) {
        throw ConfigError(std::string("config section '") + key + "' must be an object");
    }
    return &*it;
}

void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                         const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key())) {
            throw ConfigError("unknown config key '" + it.key() + "' in " + where);
        }
    }
}

std::string config_string(const json& j, const char* key, const std::string& where) {
    auto it = j.find(key);
    if (it == j.end()) {
        throw ConfigError("missing config key '" + std::string(key) + "' in " + where);
    }
    if (!it->is_string()) {
        throw ConfigError("config key '" + std::string(key) + "' in " + where +
                          " must be a string");
    }
    return it->get<std::string>();
}

std::uint64_t config_uint(const json& j, const char* key, const std::string& where,
                          std::uint64_t fallback, bool required = false) {
    auto it = j.find(key);
    if (it == j.end()) {
        if (required) {
            throw ConfigError("missing config key '" + std::string(key) + "' in " + where);
        }
        return fallback;
    }
    if (!it->is_number_integer() || it->get<std::int64_t>() < 0) {
        throw ConfigError("config key '" + std::string(key) + "' in " + where +
                          " must be a nonnegative integer");
    }
    return it->get<std::uint64_t>();
}

double config_double(const json& j, const char* key, const std::string& where, double fallback) {
    auto it = j.find(key);
    if (it == j.end()) return fallback;
    if (!it->is_number()) {
        throw ConfigError("config key '" + std::string(key) + "' in " + where +
                          " must be a number");
    }
    return it->get<double>();
}

bool config_bool(const json& j, const char* key, const std::string& where, bool fallback) {
    auto it = j.find(key);
    if (it == j.end()) return fallback;
    if (!it->is_boolean()) {
        throw ConfigError("config key '" + std::string(key) + "' in " + where +
                          " must be a boolean");
    }
    return it->get<bool>();
}

}  // namespace

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file " + path.string());
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) {
        throw ConfigError("config file must hold a JSON object");
    }
    reject_unknown_keys(j, {"seed", "parallelism", "paths", "pool", "judge", "aspect_weights",
                            "ingest", "train"},
                        "the top level");

    PipelineConfig cfg;
    if (!j.contains("seed")) {
        throw ConfigError("config must declare an explicit seed");
    }
    cfg.seed = config_uint(j, "seed", "the top level", 0, true);
    cfg.parallelism = static_cast<std::size_t>(config_uint(j, "parallelism", "the top level", 1));
    if (cfg.parallelism == 0) {
        throw ConfigError("parallelism must be positive");
    }

    const json* paths = find_section(j, "paths");
    if (!paths) {
        throw ConfigError("config must declare a 'paths' section");
    }
    reject_unknown_keys(*paths,
                        {"corpus", "manifest", "responses", "annotations", "pairs", "checkpoint",
                         "history", "reports"},
                        "'paths'");
    cfg.paths.corpus = config_string(*paths, "corpus", "'paths'");
    cfg.paths.manifest = config_string(*paths, "manifest", "'paths'");
    cfg.paths.responses = config_string(*paths, "responses", "'paths'");
    cfg.paths.annotations = config_string(*paths, "annotations", "'paths'");
    cfg.paths.pairs = config_string(*paths, "pairs", "'paths'");
    cfg.paths.checkpoint = config_string(*paths, "checkpoint", "'paths'");
    cfg.paths.history = config_string(*paths, "history", "'paths'");
    cfg.paths.reports = config_string(*paths, "reports", "'paths'");

    if (const json* pool = find_section(j, "pool")) {
        reject_unknown_keys(*pool,
                            {"registry", "k_min", "max_attempts", "backoff_base_ms",
                             "failure_budget"},
                            "'pool'");
        if (auto it = pool->find("registry"); it != pool->end()) {
            if (!it->is_array()) {
                throw ConfigError("'pool.registry' must be an array");
            }
            std::set<std::string> ids;
            for (const auto& entry : *it) {
                if (!entry.is_object()) {
                    throw ConfigError("'pool.registry' entries must be objects");
                }
                reject_unknown_keys(entry, {"model_id", "endpoint", "decoding_params"},
                                    "'pool.registry'");
                GeneratorSpec spec;
                spec.model_id = config_string(entry, "model_id", "'pool.registry'");
                spec.endpoint = config_string(entry, "endpoint", "'pool.registry'");
                if (spec.model_id.empty()) {
                    throw ConfigError("registry model_id must be nonempty");
                }
                if (!ids.insert(spec.model_id).second) {
                    throw ConfigError("duplicate registry model_id '" + spec.model_id + "'");
                }
                if (auto dp = entry.find("decoding_params"); dp != entry.end()) {
                    if (!dp->is_object()) {
                        throw ConfigError("'decoding_params' must be an object of numbers");
                    }
                    for (auto p = dp->begin(); p != dp->end(); ++p) {
                        if (!p.value().is_number()) {
                            throw ConfigError("'decoding_params." + p.key() +
                                              "' must be a number");
                        }
                        spec.decoding_params[p.key()] = p.value().get<double>();
                    }
                }
                cfg.pool.registry.push_back(std::move(spec));
            }
        }
        cfg.pool.k_min = static_cast<std::size_t>(config_uint(*pool, "k_min", "'pool'", 4));
        cfg.pool.max_attempts =
            static_cast<std::size_t>(config_uint(*pool, "max_attempts", "'pool'", 3));
        cfg.pool.backoff_base_ms = config_uint(*pool, "backoff_base_ms", "'pool'", 250);
        cfg.pool.failure_budget = config_double(*pool, "failure_budget", "'pool'", 0.5);
        if (cfg.pool.k_min == 0 || cfg.pool.max_attempts == 0) {
            throw ConfigError("'pool.k_min' and 'pool.max_attempts' must be positive");
        }
        if (cfg.pool.failure_budget < 0 || cfg.pool.failure_budget > 1) {
            throw ConfigError("'pool.failure_budget' must lie in [0, 1]");
        }
    }

    if (const json* judge = find_section(j, "judge")) {
        reject_unknown_keys(*judge,
                            {"endpoint", "annotator_id", "retries", "transport_attempts",
                             "backoff_base_ms", "failure_budget", "shuffle_responses"},
                            "'judge'");
        if (judge->contains("endpoint")) {
            cfg.judge.endpoint = config_string(*judge, "endpoint", "'judge'");
        }
        if (judge->contains("annotator_id")) {
            cfg.judge.annotator_id = config_string(*judge, "annotator_id", "'judge'");
        }
        cfg.judge.retries = static_cast<std::size_t>(config_uint(*judge, "retries", "'judge'", 2));
        cfg.judge.transport_attempts =
            static_cast<std::size_t>(config_uint(*judge, "transport_attempts", "'judge'", 3));
        cfg.judge.backoff_base_ms = config_uint(*judge, "backoff_base_ms", "'judge'", 250);
        cfg.judge.failure_budget = config_double(*judge, "failure_budget", "'judge'", 0.5);
        cfg.judge.shuffle_responses =
            config_bool(*judge, "shuffle_responses", "'judge'", false);
        if (cfg.judge.transport_attempts == 0) {
            throw ConfigError("'judge.transport_attempts' must be positive");
        }
        if (cfg.judge.failure_budget < 0 || cfg.judge.failure_budget > 1) {
            throw ConfigError("'judge.failure_budget' must lie in [0, 1]");
        }
    }

    if (const json* weights = find_section(j, "aspect_weights")) {
        reject_unknown_keys(*weights, {"helpfulness", "visual_faithfulness", "ethical"},
                            "'aspect_weights'");
        cfg.aspect_weights.helpfulness = static_cast<int>(
            config_uint(*weights, "helpfulness", "'aspect_weights'", 1));
        cfg.aspect_weights.visual_faithfulness = static_cast<int>(
            config_uint(*weights, "visual_faithfulness", "'aspect_weights'", 1));
        cfg.aspect_weights.ethical =
            static_cast<int>(config_uint(*weights, "ethical", "'aspect_weights'", 1));
        if (cfg.aspect_weights.total() <= 0) {
            throw ConfigError("aspect weights must have a positive total");
        }
    }

    if (const json* ingest = find_section(j, "ingest")) {
        reject_unknown_keys(*ingest, {"train_only", "sample"}, "'ingest'");
        if (ingest->contains("train_only")) {
            cfg.ingest_train_only = config_bool(*ingest, "train_only", "'ingest'", true);
        }
        if (const json* sample = find_section(*ingest, "sample")) {
            reject_unknown_keys(*sample, {"key", "n"}, "'ingest.sample'");
            SampleRule rule;
            rule.key = config_string(*sample, "key", "'ingest.sample'");
            rule.n = static_cast<std::size_t>(config_uint(*sample, "n", "'ingest.sample'", 0, true));
            if (rule.key != "source" && rule.key != "category" && rule.key != "id-prefix") {
                throw ConfigError("'ingest.sample.key' must be source, category, or id-prefix");
            }
            if (rule.n == 0) {
                throw ConfigError("'ingest.sample.n' must be positive");
            }
            cfg.ingest_sample = rule;
        }
    }

    cfg.train.dpo.seed = cfg.seed;
    if (const json* train = find_section(j, "train")) {
        reject_unknown_keys(*train,
                            {"beta", "peak_lr", "warmup_ratio", "epochs", "weight_decay",
                             "adam_beta1", "adam_beta2", "adam_eps", "batch_size", "eval_every",
                             "seed", "validation_fraction"},
                            "'train'");
        DpoConfig& d = cfg.train.dpo;
        d.beta = config_double(*train, "beta", "'train'", d.beta);
        d.peak_lr = config_double(*train, "peak_lr", "'train'", d.peak_lr);
        d.warmup_ratio = config_double(*train, "warmup_ratio", "'train'", d.warmup_ratio);
        d.epochs = static_cast<std::size_t>(config_uint(*train, "epochs", "'train'", d.epochs));
        d.weight_decay = config_double(*train, "weight_decay", "'train'", d.weight_decay);
        d.adam_beta1 = config_double(*train, "adam_beta1", "'train'", d.adam_beta1);
        d.adam_beta2 = config_double(*train, "adam_beta2", "'train'", d.adam_beta2);
        d.adam_eps = config_double(*train, "adam_eps", "'train'", d.adam_eps);
        d.batch_size =
            static_cast<std::size_t>(config_uint(*train, "batch_size", "'train'", d.batch_size));
        d.eval_every =
            static_cast<std::size_t>(config_uint(*train, "eval_every", "'train'", d.eval_every));
        d.seed = config_uint(*train, "seed", "'train'", d.seed);
        cfg.train.validation_fraction =
            config_double(*train, "validation_fraction", "'train'", 0.1);
        if (cfg.train.validation_fraction < 0 || cfg.train.validation_fraction >= 1) {
            throw ConfigError("'train.validation_fraction' must lie in [0, 1)");
        }
        d.validate();
    }

    cfg.config_hash = canonical_hash(cfg.to_json());
    return cfg;
}

json PipelineConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["parallelism"] = parallelism;
    json p;
    p["corpus"] = paths.corpus.string();
    p["manifest"] = paths.manifest.string();
    p["responses"] = paths.responses.string();
    p["annotations"] = paths.annotations.string();
    p["pairs"] = paths.pairs.string();
    p["checkpoint"] = paths.checkpoint.string();
    p["history"] = paths.history.string();
    p["reports"] = paths.reports.string();
    j["paths"] = p;

    json pl;
    pl["registry"] = json::array();
    for (const auto& spec : pool.registry) {
        json s;
        s["model_id"] = spec.model_id;
        s["endpoint"] = spec.endpoint;
        s["decoding_params"] = spec.decoding_params;
        pl["registry"].push_back(s);
    }
    pl["k_min"] = pool.k_min;
    pl["max_attempts"] = pool.max_attempts;
    pl["backoff_base_ms"] = pool.backoff_base_ms;
    pl["failure_budget"] = pool.failure_budget;
    j["pool"] = pl;

    json jd;
    jd["endpoint"] = judge.endpoint;
    jd["annotator_id"] = judge.annotator_id;
    jd["retries"] = judge.retries;
    jd["transport_attempts"] = judge.transport_attempts;
    jd["backoff_base_ms"] = judge.backoff_base_ms;
    jd["failure_budget"] = judge.failure_budget;
    jd["shuffle_responses"] = judge.shuffle_responses;
    j["judge"] = jd;

    json w;
    w["helpfulness"] = aspect_weights.helpfulness;
    w["visual_faithfulness"] = aspect_weights.visual_faithfulness;
    w["ethical"] = aspect_weights.ethical;
    j["aspect_weights"] = w;

    json ing;
    ing["train_only"] = ingest_train_only.value_or(true);
    if (ingest_sample) {
        json s;
        s["key"] = ingest_sample->key;
        s["n"] = ingest_sample->n;
        ing["sample"] = s;
    }
    j["ingest"] = ing;

    json t;
    t["beta"] = train.dpo.beta;
    t["peak_lr"] = train.dpo.peak_lr;
    t["warmup_ratio"] = train.dpo.warmup_ratio;
    t["epochs"] = train.dpo.epochs;
    t["weight_decay"] = train.dpo.weight_decay;
    t["adam_beta1"] = train.dpo.adam_beta1;
    t["adam_beta2"] = train.dpo.adam_beta2;
    t["adam_eps"] = train.dpo.adam_eps;
    t["batch_size"] = train.dpo.batch_size;
    t["eval_every"] = train.dpo.eval_every;
    t["seed"] = train.dpo.seed;
    t["validation_fraction"] = train.validation_fraction;
    j["train"] = t;
    return j;
}

namespace {

void write_run_log(const CommandContext& ctx, const std::string& command, const json& extra) {
    if (ctx.dry_run) return;
    std::filesystem::create_directories(ctx.config.paths.reports);
    json log;
    log["command"] = command;
    log["config_hash"] = ctx.config.config_hash;
    log["details"] = extra;
    std::ofstream out(ctx.config.paths.reports / ("run-" + command + ".json"),
                      std::ios::binary | std::ios::trunc);
    out << canonical_dump(log) << '\n';
}

void check_store_hash(const StoreContents& store, const CommandContext& ctx,
                      const std::filesystem::path& path) {
    if (store.header.config_hash != ctx.config.config_hash) {
        throw ValidationError(path.string() + " was written under config " +
                              store.header.config_hash + ", current config is " +
                              ctx.config.config_hash);
    }
}

json response_to_json(const Response& r) {
    json j;
    j["instruction_id"] = r.instruction_id;
    j["model_id"] = r.model_id;
    j["text"] = r.text;
    j["latency_ms"] = r.latency_ms;
    j["truncated"] = r.truncated;
    j["failed"] = r.failed;
    j["error"] = r.error;
    return j;
}

Response response_from_json(const json& j, std::size_t line) {
    Response r;
    r.instruction_id = require_string(j, "instruction_id", line);
    r.model_id = require_string(j, "model_id", line);
    r.text = require_string(j, "text", line);
    r.latency_ms = static_cast<std::uint64_t>(require_int(j, "latency_ms", line));
    r.truncated = require_bool(j, "truncated", line);
    r.failed = require_bool(j, "failed", line);
    r.error = require_string(j, "error", line);
    return r;
}

json annotation_to_json(const AnnotationRecord& record) {
    json j;
    j["instruction_id"] = record.instruction_id;
    j["annotator_id"] = record.annotator_id;
    json ratings = json::array();
    for (const std::string& model : record.model_ids) {
        for (Aspect aspect : kAspects) {
            const AspectRating& r = record.rating(model, aspect);
            json e;
            e["model_id"] = model;
            e["aspect"] = to_tag(aspect);
            e["score"] = r.score;
            e["rationale"] = r.rationale;
            ratings.push_back(e);
        }
    }
    j["ratings"] = ratings;
    return j;
}

AnnotationRecord annotation_from_json(const json& j, std::size_t line) {
    AnnotationRecord record;
    record.instruction_id = require_string(j, "instruction_id", line);
    record.annotator_id = require_string(j, "annotator_id", line);
    const json& ratings = require_field(j, "ratings", line);
    if (!ratings.is_array()) {
        throw ParseError("field 'ratings' must be an array", line, "ratings");
    }
    for (const auto& e : ratings) {
        std::string model = require_string(e, "model_id", line);
        Aspect aspect = aspect_from_tag(require_string(e, "aspect", line));
        int score = static_cast<int>(require_int(e, "score", line));
        if (score < 1 || score > 5) {
            throw ParseError("score " + std::to_string(score) + " outside [1, 5]", line,
                             "score");
        }
        std::string rationale = require_string(e, "rationale", line);
        if (std::find(record.model_ids.begin(), record.model_ids.end(), model) ==
            record.model_ids.end()) {
            record.model_ids.push_back(model);
        }
        auto key = std::make_pair(model, aspect);
        if (record.ratings.count(key)) {
            throw ParseError("duplicate rating for model '" + model + "'", line, "ratings");
        }
        record.ratings[key] = AspectRating{aspect, score, std::move(rationale)};
    }
    if (record.model_ids.size() != 4 || record.ratings.size() != 12) {
        throw ParseError("annotation record must rate 4 models on 3 aspects", line, "ratings");
    }
    return record;
}

std::vector<Response> read_response_store(const CommandContext& ctx, std::size_t* n_failed) {
    StoreContents store = read_store(ctx.config.paths.responses, "responses");
    check_store_hash(store, ctx, ctx.config.paths.responses);
    std::vector<Response> responses;
    responses.reserve(store.records.size());
    std::size_t line = 1;
    std::size_t failed = 0;
    for (const auto& j : store.records) {
        ++line;
        Response r = response_from_json(j, line);
        if (r.failed) ++failed;
        responses.push_back(std::move(r));
    }
    if (n_failed) *n_failed = failed;
    return responses;
}

std::vector<AnnotationRecord> read_annotation_store(const CommandContext& ctx) {
    StoreContents store = read_store(ctx.config.paths.annotations, "annotations");
    check_store_hash(store, ctx, ctx.config.paths.annotations);
    std::vector<AnnotationRecord> records;
    records.reserve(store.records.size());
    std::size_t line = 1;
    for (const auto& j : store.records) {
        ++line;
        records.push_back(annotation_from_json(j, line));
    }
    return records;
}

struct PairRecord {
    std::string instruction_id;
    std::string chosen_model;
    std::string rejected_model;
    std::string chosen_text;
    std::string rejected_text;
    int margin = 0;
    int chosen_sum = 0;
    int rejected_sum = 0;
};

json pair_to_json(const PairRecord& p) {
    json j;
    j["instruction_id"] = p.instruction_id;
    j["chosen_model"] = p.chosen_model;
    j["rejected_model"] = p.rejected_model;
    j["chosen_text"] = p.chosen_text;
    j["rejected_text"] = p.rejected_text;
    j["margin"] = p.margin;
    j["chosen_sum"] = p.chosen_sum;
    j["rejected_sum"] = p.rejected_sum;
    return j;
}

PairRecord pair_from_json(const json& j, std::size_t line) {
    PairRecord p;
    p.instruction_id = require_string(j, "instruction_id", line);
    p.chosen_model = require_string(j, "chosen_model", line);
    p.rejected_model = require_string(j, "rejected_model", line);
    p.chosen_text = require_string(j, "chosen_text", line);
    p.rejected_text = require_string(j, "rejected_text", line);
    p.margin = static_cast<int>(require_int(j, "margin", line));
    p.chosen_sum = static_cast<int>(require_int(j, "chosen_sum", line));
    p.rejected_sum = static_cast<int>(require_int(j, "rejected_sum", line));
    if (p.margin < 1) {
        throw ParseError("pair margin must be at least 1", line, "margin");
    }
    return p;
}

std::vector<PairRecord> read_pair_store(const CommandContext& ctx) {
    StoreContents store = read_store(ctx.config.paths.pairs, "pairs");
    check_store_hash(store, ctx, ctx.config.paths.pairs);
    std::vector<PairRecord> pairs;
    pairs.reserve(store.records.size());
    std::size_t line = 1;
    for (const auto& j : store.records) {
        ++line;
        pairs.push_back(pair_from_json(j, line));
    }
    return pairs;
}

}  // namespace

IngestReport cmd_ingest(const CommandContext& ctx) {
    std::ostream& out = out_of(ctx);
    LoadStats stats;
    CorpusManifest manifest = load_manifest(ctx.config.paths.corpus, &stats);

    IngestReport report;
    report.lines_read = stats.lines_read;
    report.redteam_test_excluded = stats.redteam_test_excluded;

    std::vector<Instruction> entries = manifest.entries;
    if (ctx.config.ingest_train_only.value_or(true)) {
        std::size_t before = entries.size();
        entries = filter_training_split(entries);
        report.test_split_filtered = before - entries.size();
    }
    if (ctx.config.ingest_sample) {
        TaskKeyFn key;
        if (ctx.config.ingest_sample->key == "source") {
            key = task_by_source();
        } else if (ctx.config.ingest_sample->key == "category") {
            key = task_by_category();
        } else {
            key = task_by_id_prefix();
        }
        std::size_t before = entries.size();
        entries = sample_per_task(entries, key, ctx.config.ingest_sample->n,
                                  substream_seed(ctx.config.seed, "ingest-sample"));
        report.sampled_out = before - entries.size();
    }

    CorpusManifest final_manifest = make_manifest(std::move(entries));
    report.written = final_manifest.entries.size();

    // Per-source counts grouped by category, total last.
    std::map<Category, std::vector<std::pair<Source, std::size_t>>> by_category;
    for (const auto& [source, count] : final_manifest.counts_by_source) {
        by_category[category_of(source)].push_back({source, count});
    }
    out << "category          source       instructions\n";
    for (const auto& [category, sources] : by_category) {
        bool first = true;
        for (const auto& [source, count] : sources) {
            out << std::left << std::setw(18) << (first ? to_tag(category) : "")
                << std::setw(13) << to_tag(source) << count << "\n";
            first = false;
        }
    }
    out << std::left << std::setw(31) << "total" << final_manifest.entries.size() << "\n";
    if (report.redteam_test_excluded > 0) {
        out << "excluded " << report.redteam_test_excluded
            << " red-teaming test-split record(s)\n";
    }

    if (!ctx.dry_run) {
        write_manifest(final_manifest, ctx.config.paths.manifest);
    }
    json log;
    log["lines_read"] = report.lines_read;
    log["redteam_test_excluded"] = report.redteam_test_excluded;
    log["test_split_filtered"] = report.test_split_filtered;
    log["sampled_out"] = report.sampled_out;
    log["written"] = report.written;
    write_run_log(ctx, "ingest", log);
    return report;
}

DecodeReport cmd_decode(const CommandContext& ctx) {
    std::ostream& out = out_of(ctx);
    CorpusManifest manifest = load_manifest(ctx.config.paths.manifest);

    DecodeReport report;
    report.instructions = manifest.entries.size();

    if (ctx.config.pool.registry.size() < ctx.config.pool.k_min) {
        throw ValidationError("model registry has " +
                              std::to_string(ctx.config.pool.registry.size()) +
                              " entries, need at least " +
                              std::to_string(ctx.config.pool.k_min));
    }

    if (ctx.dry_run) {
        report.responses = manifest.entries.size() * ctx.config.pool.k_min;
        out << "would decode " << report.instructions << " instruction(s) x "
            << ctx.config.pool.k_min << " model(s) = " << report.responses << " call(s)\n";
        return report;
    }

    DecodeOptions options;
    options.k_min = ctx.config.pool.k_min;
    options.seed = ctx.config.seed;
    options.parallelism = ctx.config.parallelism;
    options.max_attempts = ctx.config.pool.max_attempts;
    options.backoff_base_ms = ctx.config.pool.backoff_base_ms;
    DecodeResult result = decode_all(manifest.entries, ctx.config.pool.registry, options);

    report.responses = result.responses.size();
    report.failed = result.n_failed;
    if (!result.responses.empty()) {
        double failed_fraction = static_cast<double>(result.n_failed) /
                                 static_cast<double>(result.responses.size());
        if (failed_fraction > ctx.config.pool.failure_budget) {
            throw TransportError(std::to_string(result.n_failed) + " of " +
                                 std::to_string(result.responses.size()) +
                                 " responses failed, over the failure budget");
        }
    }

    StoreWriter writer(ctx.config.paths.responses,
                       StoreHeader{"responses", 1, ctx.config.config_hash});
    for (const auto& r : result.responses) {
        writer.write(response_to_json(r));
    }
    writer.commit();

    out << "decoded " << report.responses << " response(s) for " << report.instructions
        << " instruction(s), " << report.failed << " failed\n";
    json log;
    log["instructions"] = report.instructions;
    log["responses"] = report.responses;
    log["failed"] = report.failed;
    write_run_log(ctx, "decode", log);
    return report;
}

AnnotateCmdReport cmd_annotate(const CommandContext& ctx) {
    std::ostream& out = out_of(ctx);
    CorpusManifest manifest = load_manifest(ctx.config.paths.manifest);
    std::vector<Response> responses = read_response_store(ctx, nullptr);

    std::map<std::string, std::vector<Response>> by_instruction;
    for (auto& r : responses) {
        by_instruction[r.instruction_id].push_back(std::move(r));
    }
    for (const auto& [id, group] : by_instruction) {
        bool known = false;
        for (const auto& ins : manifest.entries) {
            if (ins.id == id) {
                known = true;
                break;
            }
        }
        if (!known) {
            throw ValidationError("response store covers unknown instruction '" + id + "'");
        }
    }

    std::vector<AnnotateItem> items;
    AnnotateCmdReport report;
    for (const auto& ins : manifest.entries) {
        auto it = by_instruction.find(ins.id);
        if (it == by_instruction.end()) {
            throw ValidationError("no responses for instruction '" + ins.id + "'");
        }
        AnnotateItem item;
        item.instruction = ins;
        item.responses = it->second;
        bool any_failed = false;
        for (const auto& r : item.responses) {
            if (r.failed) any_failed = true;
        }
        if (any_failed) {
            ++report.skipped_failed_responses;
        }
        items.push_back(std::move(item));
    }
    report.instructions = items.size();
    report.estimated_cost =
        estimate_cost(items.size() - report.skipped_failed_responses, kPricePerAspectResponse);

    if (ctx.dry_run) {
        out << "would annotate " << (items.size() - report.skipped_failed_responses)
            << " instruction(s), estimated judge cost " << report.estimated_cost << "\n";
        return report;
    }

    auto judge = make_judge_client(ctx.config.judge.endpoint);
    AnnotateOptions options;
    options.annotator_id = ctx.config.judge.annotator_id;
    options.retries = ctx.config.judge.retries;
    options.transport_attempts = ctx.config.judge.transport_attempts;
    options.backoff_base_ms = ctx.config.judge.backoff_base_ms;
    options.parallelism = ctx.config.parallelism;
    options.shuffle_responses = ctx.config.judge.shuffle_responses;
    options.seed = substream_seed(ctx.config.seed, "annotate-shuffle");
    AnnotateReport batch = annotate_batch(items, *judge, options);

    report.annotated = batch.records.size();
    report.excluded = batch.excluded.size();
    report.parse_retries = batch.parse_retries;
    if (!items.empty()) {
        double failure_fraction = static_cast<double>(batch.transport_failures) /
                                  static_cast<double>(items.size());
        if (failure_fraction > ctx.config.judge.failure_budget) {
            throw TransportError(std::to_string(batch.transport_failures) + " of " +
                                 std::to_string(items.size()) +
                                 " judge calls failed, over the failure budget");
        }
    }

    StoreWriter writer(ctx.config.paths.annotations,
                       StoreHeader{"annotations", 1, ctx.config.config_hash});
    for (const auto& record : batch.records) {
        writer.write(annotation_to_json(record));
    }
    writer.commit();

    out << "annotated " << report.annotated << " of " << report.instructions
        << " instruction(s); excluded " << report.excluded << ", parse retries "
        << report.parse_retries << "\n";
    for (const auto& [id, reason] : batch.excluded) {
        out << "excluded " << id << ": " << reason << "\n";
    }
    json log;
    log["instructions"] = report.instructions;
    log["annotated"] = report.annotated;
    log["excluded"] = report.excluded;
    log["parse_retries"] = report.parse_retries;
    write_run_log(ctx, "annotate", log);
    return report;
}

PairsReport cmd_build_pairs(const CommandContext& ctx) {
    std::ostream& out = out_of(ctx);
    std::vector<Response> responses = read_response_store(ctx, nullptr);
    std::vector<AnnotationRecord> records = read_annotation_store(ctx);

    PairsReport report;
    report.instructions = records.size();
    std::vector<PairRecord> out_pairs;
    for (const auto& record : records) {
        std::vector<ScoredResponse> scored =
            score_annotated(record, responses, ctx.config.aspect_weights);
        std::size_t k = scored.size();
        report.comparisons += k * (k - 1) / 2;
        std::vector<PreferencePair> pairs = build_pairs(scored);
        report.ties_dropped += k * (k - 1) / 2 - pairs.size();
        for (const auto& p : pairs) {
            PairRecord rec;
            rec.instruction_id = p.instruction_id;
            rec.chosen_model = p.chosen.model_id;
            rec.rejected_model = p.rejected.model_id;
            rec.chosen_text = p.chosen.text;
            rec.rejected_text = p.rejected.text;
            rec.margin = p.margin;
            rec.chosen_sum = p.chosen_sum;
            rec.rejected_sum = p.rejected_sum;
            out_pairs.push_back(std::move(rec));
        }
    }
    report.pairs = out_pairs.size();

    if (!ctx.dry_run) {
        StoreWriter writer(ctx.config.paths.pairs, StoreHeader{"pairs", 1, ctx.config.config_hash});
        for (const auto& p : out_pairs) {
            writer.write(pair_to_json(p));
        }
        writer.commit();
    }

    out << "built " << report.pairs << " pair(s) from " << report.instructions
        << " annotated instruction(s); " << report.ties_dropped << " tie(s) dropped of "
        << report.comparisons << " comparison(s)\n";
    json log;
    log["instructions"] = report.instructions;
    log["comparisons"] = report.comparisons;
    log["pairs"] = report.pairs;
    log["ties_dropped"] = report.ties_dropped;
    write_run_log(ctx, "build-pairs", log);
    return report;
}

StatsReport cmd_stats(const CommandContext& ctx) {
    std::ostream& out = out_of(ctx);
    std::vector<AnnotationRecord> records = read_annotation_store(ctx);

    StatsReport report;
    report.report_path = ctx.config.paths.reports / "stats.txt";
    report.histogram_path = ctx.config.paths.reports / "histograms.jsonl";

    std::ostringstream text;
    text << "annotated instructions: " << records.size() << "\n\n";
    text << "score histograms (score: count)\n";
    for (Aspect aspect : kAspects) {
        auto counts = score_histogram(records, aspect);
        text << "  " << display_name(aspect) << ":";
        for (std::size_t s = 0; s < counts.size(); ++s) {
            text << " " << (s + 1) << ":" << counts[s];
        }
        text << "\n";
    }
    text << "\nper-model mean scores (helpfulness / visual faithfulness / ethics, n)\n";
    for (const auto& [model, means] : model_mean_scores(records)) {
        text << "  " << model << ": " << means.helpfulness << " / "
             << means.visual_faithfulness << " / " << means.ethical << " (n="
             << means.n_responses << ")\n";
    }

    bool have_pairs = std::filesystem::exists(ctx.config.paths.pairs);
    if (have_pairs) {
        std::vector<PairRecord> pairs = read_pair_store(ctx);
        std::map<int, std::size_t> margin_hist;
        for (const auto& p : pairs) margin_hist[p.margin] += 1;
        text << "\npreference pairs: " << pairs.size() << "\n";
        text << "margin histogram (margin: count)\n ";
        for (const auto& [margin, count] : margin_hist) {
            text << " " << margin << ":" << count;
        }
        text << "\n";
    }

    out << text.str();
    if (!ctx.dry_run) {
        std::filesystem::create_directories(ctx.config.paths.reports);
        std::ofstream report_file(report.report_path, std::ios::binary | std::ios::trunc);
        if (!report_file) {
            throw ValidationError("cannot write " + report.report_path.string());
        }
        report_file << text.str();

        StoreWriter writer(report.histogram_path,
                           StoreHeader{"histograms", 1, ctx.config.config_hash});
        for (Aspect aspect : kAspects) {
            auto counts = score_histogram(records, aspect);
            for (std::size_t s = 0; s < counts.size(); ++s) {
                json rec;
                rec["aspect"] = to_tag(aspect);
                rec["score"] = s + 1;
                rec["count"] = counts[s];
                writer.write(rec);
            }
        }
        writer.commit();
    }
    json log;
    log["annotated"] = records.size();
    write_run_log(ctx, "stats", log);
    return report;
}

namespace {

struct IndexedPairs {
    std::vector<std::string> context_ids;
    std::vector<std::string> outcome_ids;
    std::vector<TrainPair> pairs;
};

IndexedPairs index_pairs(const std::vector<PairRecord>& records) {
    IndexedPairs out;
    std::set<std::string> contexts, outcomes;
    for (const auto& p : records) {
        contexts.insert(p.instruction_id);
        outcomes.insert(p.chosen_model);
        outcomes.insert(p.rejected_model);
    }
    out.context_ids.assign(contexts.begin(), contexts.end());
    out.outcome_ids.assign(outcomes.begin(), outcomes.end());
    std::map<std::string, std::size_t> context_index, outcome_index;
    for (std::size_t i = 0; i < out.context_ids.size(); ++i) {
        context_index[out.context_ids[i]] = i;
    }
    for (std::size_t i = 0; i < out.outcome_ids.size(); ++i) {
        outcome_index[out.outcome_ids[i]] = i;
    }
    out.pairs.reserve(records.size());
    for (const auto& p : records) {
        TrainPair t;
        t.context = context_index[p.instruction_id];
        t.chosen = outcome_index[p.chosen_model];
        t.rejected = outcome_index[p.rejected_model];
        out.pairs.push_back(t);
    }
    return out;
}

}  // namespace

TrainReport cmd_train(const CommandContext& ctx) {
    std::ostream& out = out_of(ctx);
    std::vector<PairRecord> records = read_pair_store(ctx);
    if (records.empty()) {
        throw ValidationError("pair store is empty, nothing to train on");
    }

    IndexedPairs indexed = index_pairs(records);
    TabularPolicy ref = TabularPolicy::uniform(indexed.context_ids.size(),
                                               indexed.outcome_ids.size());

    // Seeded holdout; validation pairs never enter the gradient.
    std::vector<std::size_t> order(indexed.pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(substream_seed(ctx.config.train.dpo.seed, "validation-split"));
    rng.shuffle(order);
    std::size_t n_val = static_cast<std::size_t>(ctx.config.train.validation_fraction *
                                                 static_cast<double>(indexed.pairs.size()));
    if (n_val >= indexed.pairs.size()) n_val = indexed.pairs.size() - 1;
    std::vector<TrainPair> val_pairs, train_pairs;
    for (std::size_t i = 0; i < order.size(); ++i) {
        (i < n_val ? val_pairs : train_pairs).push_back(indexed.pairs[order[i]]);
    }

    const DpoConfig& dpo_cfg = ctx.config.train.dpo;
    std::size_t steps_per_epoch =
        (train_pairs.size() + dpo_cfg.batch_size - 1) / dpo_cfg.batch_size;
    std::size_t total_steps = dpo_cfg.epochs * steps_per_epoch;

    TrainReport report;
    report.contexts = indexed.context_ids.size();
    report.outcomes = indexed.outcome_ids.size();
    report.steps = total_steps;

    if (ctx.dry_run) {
        out << "would train " << report.contexts << " context(s) x " << report.outcomes
            << " outcome(s) for " << total_steps << " step(s) on " << train_pairs.size()
            << " pair(s) (" << val_pairs.size() << " held out)\n";
        return report;
    }

    TrainResult result = train(train_pairs, ref, dpo_cfg, val_pairs);
    if (!result.history.evals.empty()) {
        const auto& last = result.history.evals.back();
        report.final_train_loss = last.train_loss;
        if (!val_pairs.empty()) report.final_val_loss = last.val_loss;
    }

    PolicyCheckpoint cp;
    cp.policy = result.policy;
    cp.beta = dpo_cfg.beta;
    cp.step = total_steps;
    cp.config_hash = ctx.config.config_hash;
    cp.context_ids = indexed.context_ids;
    cp.outcome_ids = indexed.outcome_ids;
    save_checkpoint(cp, ctx.config.paths.checkpoint);
    write_history_csv(result.history, ctx.config.paths.history);

    out << "trained " << report.contexts << " context(s) x " << report.outcomes
        << " outcome(s) over " << total_steps << " step(s); final train loss "
        << report.final_train_loss;
    if (report.final_val_loss) {
        out << ", validation loss " << *report.final_val_loss;
    }
    out << "\n";
    json log;
    log["contexts"] = report.contexts;
    log["outcomes"] = report.outcomes;
    log["steps"] = report.steps;
    write_run_log(ctx, "train", log);
    return report;
}

EvalReport cmd_eval(const CommandContext& ctx) {
    std::ostream& out = out_of(ctx);
    PolicyCheckpoint cp = load_checkpoint(ctx.config.paths.checkpoint);
    if (cp.config_hash != ctx.config.config_hash) {
        throw ValidationError(ctx.config.paths.checkpoint.string() +
                              " was written under config " + cp.config_hash +
                              ", current config is " + ctx.config.config_hash);
    }
    std::vector<PairRecord> records = read_pair_store(ctx);
    if (records.empty()) {
        throw ValidationError("pair store is empty, nothing to evaluate");
    }

    std::map<std::string, std::size_t> context_index, outcome_index;
    for (std::size_t i = 0; i < cp.context_ids.size(); ++i) {
        context_index[cp.context_ids[i]] = i;
    }
    for (std::size_t i = 0; i < cp.outcome_ids.size(); ++i) {
        outcome_index[cp.outcome_ids[i]] = i;
    }
    std::vector<TrainPair> pairs;
    pairs.reserve(records.size());
    for (const auto& p : records) {
        auto c = context_index.find(p.instruction_id);
        auto w = outcome_index.find(p.chosen_model);
        auto l = outcome_index.find(p.rejected_model);
        if (c == context_index.end() || w == outcome_index.end() || l == outcome_index.end()) {
            throw ValidationError("pair store references ids missing from the checkpoint "
                                  "(instruction '" +
                                  p.instruction_id + "')");
        }
        TrainPair t;
        t.context = c->second;
        t.chosen = w->second;
        t.rejected = l->second;
        pairs.push_back(t);
    }

    TabularPolicy ref =
        TabularPolicy::uniform(cp.policy.contexts(), cp.policy.outcomes());
    EvalReport report;
    report.pairs = pairs.size();
    report.accuracy = preference_accuracy(cp.policy, ref, pairs, cp.beta);
    double margin_sum = 0;
    for (const auto& p : pairs) {
        margin_sum += implicit_reward(cp.policy, ref, p.context, p.chosen, cp.beta) -
                      implicit_reward(cp.policy, ref, p.context, p.rejected, cp.beta);
    }
    report.mean_margin = margin_sum / static_cast<double>(pairs.size());

    out << "evaluated " << report.pairs << " pair(s): preference accuracy " << report.accuracy
        << ", mean implicit-reward margin " << report.mean_margin << "\n";
    json log;
    log["pairs"] = report.pairs;
    log["accuracy"] = report.accuracy;
    log["mean_margin"] = report.mean_margin;
    write_run_log(ctx, "eval", log);
    return report;
}

}  // namespace prefpipe

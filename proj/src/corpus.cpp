#include "prefpipe/corpus.hpp"

#include <fstream>
#include <map>
#include <set>
#include <unordered_set>

#include "prefpipe/errors.hpp"
#include "prefpipe/record_io.hpp"
#include "prefpipe/rng.hpp"

namespace prefpipe {

namespace {

struct SourceInfo {
    Source source;
    const char* tag;
    Category category;
};

// Grouping mirrors the published dataset composition table.
constexpr SourceInfo kSources[] = {
    {Source::SVIT, "svit", Category::General},
    {Source::LLaVA, "llava", Category::General},
    {Source::LRV, "lrv", Category::Robustness},
    {Source::ComVint, "comvint", Category::Robustness},
    {Source::LLaVAR, "llavar", Category::DomainSpecific},
    {Source::LLaVAMed, "llava_med", Category::DomainSpecific},
    {Source::PMC_VQA, "pmc_vqa", Category::DomainSpecific},
    {Source::PCA_EVAL, "pca_eval", Category::DomainSpecific},
    {Source::RTVLM, "rtvlm", Category::RedTeaming},
    {Source::M3IT, "m3it", Category::Academic},
};

const SourceInfo& info_of(Source s) {
    for (const auto& info : kSources) {
        if (info.source == s) return info;
    }
    throw ValidationError("unknown source enum value");
}

Instruction parse_instruction(const json& j, std::size_t line) {
    Instruction ins;
    ins.id = require_string(j, "id", line);
    ins.prompt = require_string(j, "prompt", line);
    const json& images = require_field(j, "images", line);
    if (!images.is_array()) {
        throw ParseError("field 'images' must be an array", line, "images");
    }
    for (const auto& img : images) {
        if (!img.is_string()) {
            throw ParseError("field 'images' must contain strings", line, "images");
        }
        ins.image_refs.push_back(img.get<std::string>());
    }
    ins.source = source_from_tag(require_string(j, "source", line));
    ins.split = split_from_tag(require_string(j, "split", line));
    static const std::set<std::string> known = {"id", "prompt", "images", "source", "split"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key())) {
            throw ParseError("unknown field '" + it.key() + "'", line, it.key().c_str());
        }
    }
    return ins;
}

}  // namespace

Category category_of(Source source) { return info_of(source).category; }

const char* to_tag(Source source) { return info_of(source).tag; }

const char* to_tag(Category category) {
    switch (category) {
        case Category::General: return "general";
        case Category::Robustness: return "robustness";
        case Category::DomainSpecific: return "domain_specific";
        case Category::RedTeaming: return "red_teaming";
        case Category::Academic: return "academic";
    }
    throw ValidationError("unknown category enum value");
}

const char* to_tag(Split split) {
    switch (split) {
        case Split::Train: return "train";
        case Split::Test: return "test";
    }
    throw ValidationError("unknown split enum value");
}

Source source_from_tag(const std::string& tag) {
    for (const auto& info : kSources) {
        if (tag == info.tag) return info.source;
    }
    throw ValidationError("unknown source tag '" + tag + "'");
}

Split split_from_tag(const std::string& tag) {
    if (tag == "train") return Split::Train;
    if (tag == "test") return Split::Test;
    throw ValidationError("unknown split tag '" + tag + "'");
}

CorpusManifest make_manifest(std::vector<Instruction> entries) {
    CorpusManifest manifest;
    std::unordered_set<std::string> seen;
    seen.reserve(entries.size());
    for (const auto& e : entries) {
        if (e.id.empty()) {
            throw ValidationError("instruction with empty id");
        }
        if (!seen.insert(e.id).second) {
            throw ValidationError("duplicate instruction id '" + e.id + "'");
        }
        if (e.category() == Category::RedTeaming && e.split == Split::Test) {
            throw ValidationError("red-teaming instruction '" + e.id +
                                  "' must not appear in the test split");
        }
        manifest.counts_by_source[e.source] += 1;
    }
    manifest.entries = std::move(entries);
    return manifest;
}

CorpusManifest load_manifest(const std::filesystem::path& path, LoadStats* stats) {
    std::vector<Instruction> entries;
    LoadStats local;
    for_each_record(path, [&](std::size_t line, const json& j) {
        ++local.lines_read;
        Instruction ins = parse_instruction(j, line);
        if (ins.category() == Category::RedTeaming && ins.split == Split::Test) {
            ++local.redteam_test_excluded;
            return;
        }
        entries.push_back(std::move(ins));
    });
    if (stats) *stats = local;
    return make_manifest(std::move(entries));
}

void write_manifest(const CorpusManifest& manifest, const std::filesystem::path& path) {
    // Plain records, no header line: the writer's output is itself a valid
    // input file, so load after write is the identity.
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw ValidationError("cannot write " + tmp.string());
        }
        for (const auto& e : manifest.entries) {
            json j;
            j["id"] = e.id;
            j["prompt"] = e.prompt;
            j["images"] = e.image_refs;
            j["source"] = to_tag(e.source);
            j["split"] = to_tag(e.split);
            out << canonical_dump(j) << '\n';
        }
    }
    std::filesystem::rename(tmp, path);
}

TaskKeyFn task_by_source() {
    return [](const Instruction& ins) { return std::string(to_tag(ins.source)); };
}

TaskKeyFn task_by_category() {
    return [](const Instruction& ins) { return std::string(to_tag(ins.category())); };
}

TaskKeyFn task_by_id_prefix() {
    return [](const Instruction& ins) {
        auto pos = ins.id.rfind('/');
        if (pos == std::string::npos) return ins.id;
        return ins.id.substr(0, pos);
    };
}

std::vector<Instruction> sample_per_task(const std::vector<Instruction>& entries,
                                         const TaskKeyFn& task_key, std::size_t n,
                                         std::uint64_t seed) {
    // Tasks iterate in sorted key order and each task draws from its own
    // substream, so the selection is independent of corpus order between
    // tasks and of how many tasks exist.
    std::map<std::string, std::vector<std::size_t>> by_task;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        by_task[task_key(entries[i])].push_back(i);
    }
    std::vector<bool> keep(entries.size(), false);
    for (const auto& [key, positions] : by_task) {
        Rng rng(substream_seed(seed, key));
        std::size_t take = std::min(n, positions.size());
        for (std::size_t c : rng.sample_indices(positions.size(), take)) {
            keep[positions[c]] = true;
        }
    }
    std::vector<Instruction> out;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (keep[i]) out.push_back(entries[i]);
    }
    return out;
}

std::vector<Instruction> filter_training_split(const std::vector<Instruction>& entries) {
    std::vector<Instruction> out;
    for (const auto& e : entries) {
        if (e.split == Split::Train) out.push_back(e);
    }
    return out;
}

}  // namespace prefpipe

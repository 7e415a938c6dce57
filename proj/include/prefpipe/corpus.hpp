#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace prefpipe {

// The ten instruction source datasets. Each maps to exactly one category;
// the category is derived, never stored, so a manifest cannot disagree
// with the grouping.
enum class Source {
    SVIT,
    LLaVA,
    LRV,
    ComVint,
    LLaVAR,
    LLaVAMed,
    PMC_VQA,
    PCA_EVAL,
    RTVLM,
    M3IT,
};

enum class Category {
    General,
    Robustness,
    DomainSpecific,
    RedTeaming,
    Academic,
};

enum class Split { Train, Test };

Category category_of(Source source);

const char* to_tag(Source source);
const char* to_tag(Category category);
const char* to_tag(Split split);

// Throws ValidationError on an unknown tag.
Source source_from_tag(const std::string& tag);
Split split_from_tag(const std::string& tag);

struct Instruction {
    std::string id;
    std::string prompt;
    std::vector<std::string> image_refs;  // opaque content-addressed references
    Source source = Source::SVIT;
    Split split = Split::Train;

    Category category() const { return category_of(source); }
};

struct CorpusManifest {
    std::vector<Instruction> entries;
    std::map<Source, std::size_t> counts_by_source;
};

struct LoadStats {
    std::size_t lines_read = 0;
    std::size_t redteam_test_excluded = 0;
};

// Builds a manifest from already-parsed instructions, enforcing id
// uniqueness and tallying counts. Red-teaming entries with a test split
// are rejected here; callers that want them dropped instead of rejected
// filter before calling.
CorpusManifest make_manifest(std::vector<Instruction> entries);

// Reads a line-delimited instruction file. Each line must carry exactly
// the fields id, prompt, images, source, split; unknown fields, duplicate
// ids, and unknown tags are errors naming the offending line. Red-teaming
// instructions with split=test are not admitted; they are counted in
// stats instead.
CorpusManifest load_manifest(const std::filesystem::path& path, LoadStats* stats = nullptr);

// Canonical writer; load_manifest(write_manifest(m)) reproduces m and the
// bytes are stable under rewrite.
void write_manifest(const CorpusManifest& manifest, const std::filesystem::path& path);

using TaskKeyFn = std::function<std::string(const Instruction&)>;

// Built-in task selectors for sample_per_task.
TaskKeyFn task_by_source();
TaskKeyFn task_by_category();
// Task = id up to its last '/' (whole id when there is none); matches the
// convention of encoding the task name as an id prefix.
TaskKeyFn task_by_id_prefix();

// For each distinct task key, draws min(n, available) entries without
// replacement. Output preserves the input order of the selected entries;
// deterministic given the seed.
std::vector<Instruction> sample_per_task(const std::vector<Instruction>& entries,
                                         const TaskKeyFn& task_key,
                                         std::size_t n,
                                         std::uint64_t seed);

// Keeps exactly the entries with split=Train, in order.
std::vector<Instruction> filter_training_split(const std::vector<Instruction>& entries);

}  // namespace prefpipe

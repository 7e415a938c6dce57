#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prefpipe/corpus.hpp"
#include "prefpipe/errors.hpp"
#include "prefpipe/pool.hpp"

namespace prefpipe {

enum class Aspect {
    Helpfulness,
    VisualFaithfulness,
    EthicalConsiderations,
};

inline constexpr std::array<Aspect, 3> kAspects = {
    Aspect::Helpfulness,
    Aspect::VisualFaithfulness,
    Aspect::EthicalConsiderations,
};

const char* to_tag(Aspect aspect);           // helpfulness / visual_faithfulness / ethical_considerations
const char* display_name(Aspect aspect);     // Helpfulness / Visual Faithfulness / Ethical Considerations
Aspect aspect_from_tag(const std::string& tag);
std::optional<Aspect> aspect_from_display_name(const std::string& name);

struct AspectRating {
    Aspect aspect = Aspect::Helpfulness;
    int score = 0;  // integer in [1, 5]
    std::string rationale;
};

// One judge reply for one instruction: every annotated response carries all
// three aspects (the full 4x3 cross product).
struct AnnotationRecord {
    std::string instruction_id;
    std::string annotator_id;
    std::vector<std::string> model_ids;  // the order responses were shown to the judge
    std::map<std::pair<std::string, Aspect>, AspectRating> ratings;
    std::string raw_reply;  // kept in memory only, not persisted

    const AspectRating& rating(const std::string& model_id, Aspect aspect) const;
};

// Builds the aggregated judge prompt: the three assessment guidelines, the
// instruction, the four responses numbered in input order, and the reply
// grammar directive. Requires exactly four responses, all answering the
// given instruction.
std::string render_judge_prompt(const Instruction& instruction,
                                std::span<const Response> responses);

class JudgeReplyError : public Error {
public:
    enum class Kind {
        MissingRating,
        DuplicateRating,
        NonIntegerScore,
        OutOfRangeScore,
        MissingRationale,
        ResponseCountMismatch,
        MalformedBlock,
    };

    JudgeReplyError(Kind kind, const std::string& what, int response_index = 0,
                    std::optional<Aspect> aspect = std::nullopt)
        : Error(what), kind_(kind), response_index_(response_index), aspect_(aspect) {}

    Kind kind() const { return kind_; }
    int response_index() const { return response_index_; }  // 1-based, 0 = unknown
    std::optional<Aspect> aspect() const { return aspect_; }

private:
    Kind kind_;
    int response_index_;
    std::optional<Aspect> aspect_;
};

// Extracts the 4x3 ratings from a reply following the grammar. Scores must
// be bare integers in [1, 5]; fractional, out-of-range, missing, or
// duplicated ratings throw JudgeReplyError naming the response and aspect.
AnnotationRecord parse_judge_reply(const std::string& reply,
                                   const std::vector<std::string>& expected_models);

// A preference judge endpoint. Implementations must accept concurrent calls.
class JudgeClient {
public:
    virtual ~JudgeClient() = default;
    // Returns the raw reply text; throws TransportError on failure.
    virtual std::string evaluate(const std::string& prompt,
                                 const std::vector<std::string>& image_payloads) = 0;
};

// Scripted judge used for offline runs and tests. It locates the numbered
// responses inside the rendered prompt and emits a grammar-conformant reply.
// Default mode derives scores from a stable hash of (response text, aspect).
struct MockJudgeOptions {
    std::optional<int> uniform_score;  // every score fixed to this value
    // Scores by (response index 0..3, aspect index); the hidden-table mode.
    std::optional<std::array<std::array<int, 3>, 4>> score_table;
    std::size_t malformed_first = 0;   // first n replies violate the grammar
};

class MockJudge : public JudgeClient {
public:
    explicit MockJudge(MockJudgeOptions options = {});

    std::string evaluate(const std::string& prompt,
                         const std::vector<std::string>& image_payloads) override;

private:
    MockJudgeOptions options_;
    std::atomic<std::size_t> calls_{0};
};

// Resolves an endpoint string to a judge client.
//   http://... / https://...   remote judge speaking the wire contract
//   mock                        deterministic hash-based scores
//   mock:uniform=<s>            every score = s
//   mock:malformed=<n>          first n replies violate the grammar
std::unique_ptr<JudgeClient> make_judge_client(const std::string& endpoint);

struct AnnotateItem {
    Instruction instruction;
    std::vector<Response> responses;  // exactly four
};

struct AnnotateOptions {
    std::string annotator_id = "judge";
    std::size_t retries = 2;            // re-requests after a malformed reply
    std::size_t transport_attempts = 3; // attempts per request on transport failure
    std::uint64_t backoff_base_ms = 250;
    std::size_t parallelism = 1;
    bool shuffle_responses = false;     // counter position bias; default off
    std::uint64_t seed = 0;             // used only when shuffle_responses is set
};

struct AnnotateReport {
    std::vector<AnnotationRecord> records;  // sorted by instruction_id
    std::vector<std::pair<std::string, std::string>> excluded;  // (instruction_id, reason)
    std::size_t parse_retries = 0;
    std::size_t transport_failures = 0;  // instructions lost to transport, subset of excluded
};

// One record per instruction; a reply that keeps failing to parse after
// `retries` re-requests excludes that instruction rather than fabricating
// scores. Per-instruction failures never abort the batch.
AnnotateReport annotate_batch(const std::vector<AnnotateItem>& items,
                              JudgeClient& judge,
                              const AnnotateOptions& options);

// n_instructions x 4 responses x 3 aspects x price.
double estimate_cost(std::size_t n_instructions, double price_per_aspect_response);

}  // namespace prefpipe

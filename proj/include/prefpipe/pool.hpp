#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "prefpipe/corpus.hpp"

namespace prefpipe {

struct GeneratorSpec {
    std::string model_id;
    std::string endpoint;  // URL of a chat-completion endpoint, or a mock:... script
    std::map<std::string, double> decoding_params;
};

struct Response {
    std::string instruction_id;
    std::string model_id;
    std::string text;
    std::uint64_t latency_ms = 0;
    bool truncated = false;
    bool failed = false;    // set when every attempt failed; text is empty then
    std::string error;      // last failure message, empty on success
};

struct GenerationResult {
    std::string text;
    bool truncated = false;
    std::uint64_t latency_ms = 0;  // measured by the client; scripted mocks report 0
};

// One remote (or scripted) response generator. Implementations must accept
// concurrent generate() calls.
class GeneratorClient {
public:
    virtual ~GeneratorClient() = default;
    // Throws TransportError on failure.
    virtual GenerationResult generate(const Instruction& instruction,
                                      const GeneratorSpec& spec) = 0;
};

// Resolves an endpoint string to a client.
//   http://... or https://...  remote endpoint speaking the wire contract
//   mock                       deterministic text derived from ids and prompt
//   mock:echo                  returns the prompt verbatim
//   mock:text=<s>              returns the fixed string s
//   mock:fail                  every call fails
//   mock:fail=<n>              first n calls fail, later calls behave like mock
std::unique_ptr<GeneratorClient> make_generator_client(const std::string& endpoint);

using GeneratorClientFactory =
    std::function<std::unique_ptr<GeneratorClient>(const GeneratorSpec&)>;

// Draws exactly k_min distinct specs uniformly without replacement.
// Throws ValidationError when the registry is smaller than k_min.
std::vector<GeneratorSpec> sample_models(const std::vector<GeneratorSpec>& registry,
                                         std::size_t k_min,
                                         std::uint64_t seed);

struct DecodeOptions {
    std::size_t k_min = 4;
    std::uint64_t seed = 0;
    std::size_t parallelism = 1;
    std::size_t max_attempts = 3;
    std::uint64_t backoff_base_ms = 250;  // doubled after each failed attempt
};

struct DecodeResult {
    std::vector<Response> responses;  // sorted by (instruction_id, model_id)
    std::size_t n_failed = 0;         // responses flagged after exhausting retries
};

// Decodes every instruction with a per-instruction sample of k_min models.
// The model subset for an instruction depends only on (seed, instruction id),
// and failed calls degrade to flagged records, so the output is identical
// at any parallelism level. Only configuration errors throw.
DecodeResult decode_all(const std::vector<Instruction>& instructions,
                        const std::vector<GeneratorSpec>& registry,
                        const DecodeOptions& options,
                        const GeneratorClientFactory& factory = {});

}  // namespace prefpipe

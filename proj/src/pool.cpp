#include "prefpipe/pool.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "prefpipe/errors.hpp"
#include "prefpipe/record_io.hpp"
#include "prefpipe/rng.hpp"

namespace prefpipe {

namespace {

class HttpGeneratorClient : public GeneratorClient {
public:
    explicit HttpGeneratorClient(std::string endpoint) : endpoint_(std::move(endpoint)) {}

    GenerationResult generate(const Instruction& instruction,
                              const GeneratorSpec& spec) override {
        json body;
        body["model_id"] = spec.model_id;
        body["prompt"] = instruction.prompt;
        body["images"] = instruction.image_refs;
        body["decoding_params"] = spec.decoding_params;

        httplib::Client client(endpoint_);
        client.set_connection_timeout(10);
        client.set_read_timeout(60);
        auto start = std::chrono::steady_clock::now();
        auto res = client.Post("/generate", canonical_dump(body), "application/json");
        auto elapsed = std::chrono::steady_clock::now() - start;
        if (!res) {
            throw TransportError("generator endpoint unreachable: " + endpoint_);
        }
        if (res->status != 200) {
            throw TransportError("generator returned status " + std::to_string(res->status));
        }
        json reply;
        try {
            reply = json::parse(res->body);
        } catch (const json::parse_error& e) {
            throw TransportError(std::string("generator reply is not valid JSON: ") + e.what());
        }
        GenerationResult out;
        out.text = require_string(reply, "text", 0);
        out.truncated = require_bool(reply, "truncated", 0);
        out.latency_ms = static_cast<std::uint64_t>(
            std::chrono::duration_cast<std::chrono::milliseconds>(elapsed).count());
        return out;
    }

private:
    std::string endpoint_;
};

// Scripted generator; see make_generator_client for the endpoint grammar.
class MockGeneratorClient : public GeneratorClient {
public:
    enum class Mode { Derived, Echo, Fixed, Fail };

    MockGeneratorClient(Mode mode, std::string fixed_text, std::size_t fail_first)
        : mode_(mode), fixed_text_(std::move(fixed_text)), fail_budget_(fail_first) {}

    GenerationResult generate(const Instruction& instruction,
                              const GeneratorSpec& spec) override {
        if (mode_ == Mode::Fail) {
            throw TransportError("scripted failure for " + spec.model_id);
        }
        std::size_t budget = fail_budget_.load();
        while (budget > 0) {
            if (fail_budget_.compare_exchange_weak(budget, budget - 1)) {
                throw TransportError("scripted transient failure for " + spec.model_id);
            }
        }
        GenerationResult out;
        switch (mode_) {
            case Mode::Echo:
                out.text = instruction.prompt;
                break;
            case Mode::Fixed:
                out.text = fixed_text_;
                break;
            default: {
                // Stable function of (model, instruction, prompt) so different
                // models disagree and reruns reproduce the same text.
                std::uint64_t h =
                    fnv1a64(spec.model_id + "\x1f" + instruction.id + "\x1f" + instruction.prompt);
                out.text = "[" + spec.model_id + "] reply " + std::to_string(h % 100000) +
                           " to: " + instruction.prompt;
                break;
            }
        }
        return out;
    }

private:
    Mode mode_;
    std::string fixed_text_;
    std::atomic<std::size_t> fail_budget_;
};

}  // namespace

std::unique_ptr<GeneratorClient> make_generator_client(const std::string& endpoint) {
    if (endpoint.rfind("http://", 0) == 0 || endpoint.rfind("https://", 0) == 0) {
        return std::make_unique<HttpGeneratorClient>(endpoint);
    }
    if (endpoint == "mock") {
        return std::make_unique<MockGeneratorClient>(MockGeneratorClient::Mode::Derived, "", 0);
    }
    if (endpoint == "mock:echo") {
        return std::make_unique<MockGeneratorClient>(MockGeneratorClient::Mode::Echo, "", 0);
    }
    if (endpoint.rfind("mock:text=", 0) == 0) {
        return std::make_unique<MockGeneratorClient>(MockGeneratorClient::Mode::Fixed,
                                                     endpoint.substr(10), 0);
    }
    if (endpoint == "mock:fail") {
        return std::make_unique<MockGeneratorClient>(MockGeneratorClient::Mode::Fail, "", 0);
    }
    if (endpoint.rfind("mock:fail=", 0) == 0) {
        std::size_t n = 0;
        const std::string arg = endpoint.substr(10);
        try {
            n = std::stoul(arg);
        } catch (const std::exception&) {
            throw ConfigError("bad mock:fail count '" + arg + "'");
        }
        return std::make_unique<MockGeneratorClient>(MockGeneratorClient::Mode::Derived, "", n);
    }
    throw ConfigError("unknown generator endpoint '" + endpoint + "'");
}

std::vector<GeneratorSpec> sample_models(const std::vector<GeneratorSpec>& registry,
                                         std::size_t k_min, std::uint64_t seed) {
    if (registry.size() < k_min) {
        throw ValidationError("model registry has " + std::to_string(registry.size()) +
                              " entries, need at least " + std::to_string(k_min));
    }
    Rng rng(seed);
    std::vector<GeneratorSpec> out;
    out.reserve(k_min);
    for (std::size_t i : rng.sample_indices(registry.size(), k_min)) {
        out.push_back(registry[i]);
    }
    return out;
}

namespace {

Response decode_one(const Instruction& instruction, const GeneratorSpec& spec,
                    GeneratorClient& client, const DecodeOptions& options) {
    Response r;
    r.instruction_id = instruction.id;
    r.model_id = spec.model_id;
    std::uint64_t backoff = options.backoff_base_ms;
    for (std::size_t attempt = 1;; ++attempt) {
        try {
            GenerationResult gen = client.generate(instruction, spec);
            r.text = std::move(gen.text);
            r.truncated = gen.truncated;
            r.latency_ms = gen.latency_ms;
            return r;
        } catch (const TransportError& e) {
            if (attempt >= options.max_attempts) {
                r.failed = true;
                r.error = e.what();
                return r;
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
            backoff *= 2;
        }
    }
}

}  // namespace

DecodeResult decode_all(const std::vector<Instruction>& instructions,
                        const std::vector<GeneratorSpec>& registry,
                        const DecodeOptions& options, const GeneratorClientFactory& factory) {
    if (options.k_min == 0) {
        throw ConfigError("k_min must be positive");
    }
    if (registry.size() < options.k_min) {
        throw ValidationError("model registry has " + std::to_string(registry.size()) +
                              " entries, need at least " + std::to_string(options.k_min));
    }

    GeneratorClientFactory make = factory;
    if (!make) {
        make = [](const GeneratorSpec& spec) { return make_generator_client(spec.endpoint); };
    }

    // One client per registry entry, shared across instructions and threads.
    std::vector<std::unique_ptr<GeneratorClient>> clients;
    clients.reserve(registry.size());
    for (const auto& spec : registry) {
        clients.push_back(make(spec));
    }

    // Work is partitioned by instruction index; each slot is written by
    // exactly one worker, so no locking is needed, and the model subset for
    // an instruction is a pure function of (seed, instruction id). Both
    // together make the result independent of the thread count.
    std::vector<std::vector<Response>> per_instruction(instructions.size());
    std::atomic<std::size_t> cursor{0};
    auto worker = [&]() {
        for (;;) {
            std::size_t i = cursor.fetch_add(1);
            if (i >= instructions.size()) return;
            const Instruction& ins = instructions[i];
            Rng rng(substream_seed(options.seed, ins.id));
            auto chosen = rng.sample_indices(registry.size(), options.k_min);
            for (std::size_t m : chosen) {
                per_instruction[i].push_back(
                    decode_one(ins, registry[m], *clients[m], options));
            }
        }
    };

    std::size_t n_threads = std::max<std::size_t>(1, options.parallelism);
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        threads.reserve(n_threads);
        for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }

    DecodeResult result;
    for (auto& group : per_instruction) {
        for (auto& r : group) {
            if (r.failed) ++result.n_failed;
            result.responses.push_back(std::move(r));
        }
    }
    std::sort(result.responses.begin(), result.responses.end(),
              [](const Response& a, const Response& b) {
                  if (a.instruction_id != b.instruction_id) {
                      return a.instruction_id < b.instruction_id;
                  }
                  return a.model_id < b.model_id;
              });
    return result;
}

}  // namespace prefpipe

#include <doctest.h>

#include <httplib.h>

#include <atomic>
#include <map>
#include <set>
#include <thread>

#include <json.hpp>

#include "prefpipe/errors.hpp"
#include "prefpipe/pool.hpp"

using namespace prefpipe;

namespace {

Instruction make_ins(const std::string& id, const std::string& prompt = "describe this") {
    Instruction ins;
    ins.id = id;
    ins.prompt = prompt;
    ins.image_refs = {"img/" + id};
    ins.source = Source::SVIT;
    ins.split = Split::Train;
    return ins;
}

std::vector<GeneratorSpec> make_registry(std::size_t n, const std::string& endpoint = "mock") {
    std::vector<GeneratorSpec> registry;
    for (std::size_t i = 0; i < n; ++i) {
        GeneratorSpec spec;
        spec.model_id = "model-" + std::string(1, static_cast<char>('a' + i));
        spec.endpoint = endpoint;
        registry.push_back(spec);
    }
    return registry;
}

std::map<std::string, std::set<std::string>> models_by_instruction(
    const std::vector<Response>& responses) {
    std::map<std::string, std::set<std::string>> out;
    for (const auto& r : responses) out[r.instruction_id].insert(r.model_id);
    return out;
}

}  // namespace

TEST_CASE("sample_models draws distinct specs deterministically") {
    auto registry = make_registry(6);
    auto picked = sample_models(registry, 4, 7);
    REQUIRE(picked.size() == 4);
    std::set<std::string> ids;
    for (const auto& s : picked) ids.insert(s.model_id);
    CHECK(ids.size() == 4);

    auto again = sample_models(registry, 4, 7);
    for (std::size_t i = 0; i < picked.size(); ++i) {
        CHECK(again[i].model_id == picked[i].model_id);
    }
    CHECK_THROWS_AS(sample_models(make_registry(3), 4, 7), ValidationError);
}

TEST_CASE("mock endpoint grammar") {
    GeneratorSpec spec;
    spec.model_id = "m";
    Instruction ins = make_ins("i1", "hello there");

    auto derived = make_generator_client("mock");
    auto r1 = derived->generate(ins, spec);
    auto r2 = derived->generate(ins, spec);
    CHECK(r1.text == r2.text);
    CHECK(r1.text.find("[m]") == 0);
    CHECK_FALSE(r1.truncated);
    CHECK(r1.latency_ms == 0);

    auto echo = make_generator_client("mock:echo");
    CHECK(echo->generate(ins, spec).text == "hello there");

    auto fixed = make_generator_client("mock:text=canned");
    CHECK(fixed->generate(ins, spec).text == "canned");

    auto fail = make_generator_client("mock:fail");
    CHECK_THROWS_AS(fail->generate(ins, spec), TransportError);

    auto transient = make_generator_client("mock:fail=2");
    CHECK_THROWS_AS(transient->generate(ins, spec), TransportError);
    CHECK_THROWS_AS(transient->generate(ins, spec), TransportError);
    CHECK(transient->generate(ins, spec).text == derived->generate(ins, spec).text);

    CHECK_THROWS_AS(make_generator_client("ftp://host"), ConfigError);
    CHECK_THROWS_AS(make_generator_client("mock:fail=two"), ConfigError);
}

TEST_CASE("mock text depends on model, instruction, and prompt") {
    Instruction ins = make_ins("i1", "p");
    GeneratorSpec a, b;
    a.model_id = "a";
    b.model_id = "b";
    auto client = make_generator_client("mock");
    CHECK(client->generate(ins, a).text != client->generate(ins, b).text);
    CHECK(client->generate(ins, a).text != client->generate(make_ins("i2", "p"), a).text);
}

TEST_CASE("decode_all yields k_min sorted responses per instruction") {
    std::vector<Instruction> instructions;
    for (int i = 0; i < 10; ++i) instructions.push_back(make_ins("ins-" + std::to_string(i)));
    auto registry = make_registry(6);
    DecodeOptions options;
    options.k_min = 4;
    options.seed = 11;

    auto result = decode_all(instructions, registry, options);
    CHECK(result.n_failed == 0);
    REQUIRE(result.responses.size() == 40);
    for (std::size_t i = 1; i < result.responses.size(); ++i) {
        const auto& p = result.responses[i - 1];
        const auto& q = result.responses[i];
        CHECK(std::tie(p.instruction_id, p.model_id) < std::tie(q.instruction_id, q.model_id));
    }
    for (const auto& [id, models] : models_by_instruction(result.responses)) {
        CHECK(models.size() == 4);
    }
}

TEST_CASE("decode output is invariant to parallelism and moved by seed") {
    std::vector<Instruction> instructions;
    for (int i = 0; i < 12; ++i) instructions.push_back(make_ins("ins-" + std::to_string(i)));
    auto registry = make_registry(6);
    DecodeOptions serial;
    serial.k_min = 4;
    serial.seed = 3;
    serial.parallelism = 1;
    DecodeOptions wide = serial;
    wide.parallelism = 4;

    auto a = decode_all(instructions, registry, serial);
    auto b = decode_all(instructions, registry, wide);
    REQUIRE(a.responses.size() == b.responses.size());
    for (std::size_t i = 0; i < a.responses.size(); ++i) {
        CHECK(a.responses[i].instruction_id == b.responses[i].instruction_id);
        CHECK(a.responses[i].model_id == b.responses[i].model_id);
        CHECK(a.responses[i].text == b.responses[i].text);
    }

    DecodeOptions reseeded = serial;
    reseeded.seed = 4;
    auto c = decode_all(instructions, registry, reseeded);
    CHECK(models_by_instruction(a.responses) != models_by_instruction(c.responses));
}

TEST_CASE("failing model degrades to flagged responses") {
    std::vector<Instruction> instructions;
    for (int i = 0; i < 8; ++i) instructions.push_back(make_ins("ins-" + std::to_string(i)));
    auto registry = make_registry(4);
    registry[1].endpoint = "mock:fail";
    DecodeOptions options;
    options.k_min = 4;
    options.seed = 5;
    options.max_attempts = 2;
    options.backoff_base_ms = 1;

    auto result = decode_all(instructions, registry, options);
    REQUIRE(result.responses.size() == 32);
    std::size_t flagged = 0;
    for (const auto& r : result.responses) {
        if (r.model_id == registry[1].model_id) {
            CHECK(r.failed);
            CHECK(r.text.empty());
            CHECK_FALSE(r.error.empty());
            ++flagged;
        } else {
            CHECK_FALSE(r.failed);
            CHECK(r.error.empty());
        }
    }
    CHECK(flagged == 8);
    CHECK(result.n_failed == 8);
}

TEST_CASE("transient failures recover within the retry budget") {
    std::vector<Instruction> instructions = {make_ins("only")};
    auto registry = make_registry(4);
    registry[0].endpoint = "mock:fail=2";
    DecodeOptions options;
    options.k_min = 4;
    options.seed = 1;
    options.max_attempts = 3;
    options.backoff_base_ms = 1;

    auto result = decode_all(instructions, registry, options);
    CHECK(result.n_failed == 0);
    for (const auto& r : result.responses) CHECK_FALSE(r.failed);
}

TEST_CASE("decode options are validated") {
    auto registry = make_registry(3);
    DecodeOptions options;
    options.k_min = 4;
    CHECK_THROWS_AS(decode_all({make_ins("a")}, registry, options), ValidationError);
    options.k_min = 0;
    CHECK_THROWS_AS(decode_all({make_ins("a")}, registry, options), ConfigError);
    options.k_min = 3;
    CHECK(decode_all({}, registry, options).responses.empty());
}

TEST_CASE("http client speaks the generate wire contract") {
    httplib::Server server;
    std::atomic<int> hits{0};
    server.Post("/generate", [&](const httplib::Request& req, httplib::Response& res) {
        auto body = nlohmann::json::parse(req.body);
        if (body.at("prompt") == "boom") {
            res.status = 500;
            return;
        }
        CHECK(body.at("model_id") == "m1");
        CHECK(body.at("prompt") == "describe this");
        CHECK(body.at("images").size() == 1);
        CHECK(body.at("decoding_params").at("temperature") == 0.7);
        ++hits;
        nlohmann::json reply = {{"text", "remote says hi"}, {"truncated", true}};
        res.set_content(reply.dump(), "application/json");
    });
    int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread server_thread([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    GeneratorSpec spec;
    spec.model_id = "m1";
    spec.endpoint = "http://127.0.0.1:" + std::to_string(port);
    spec.decoding_params = {{"temperature", 0.7}};
    auto client = make_generator_client(spec.endpoint);
    auto result = client->generate(make_ins("wire"), spec);
    CHECK(result.text == "remote says hi");
    CHECK(result.truncated);
    CHECK(hits == 1);
    CHECK_THROWS_AS(client->generate(make_ins("wire", "boom"), spec), TransportError);

    server.stop();
    server_thread.join();

    CHECK_THROWS_AS(client->generate(make_ins("wire"), spec), TransportError);
}

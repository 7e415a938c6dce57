#include <doctest.h>

#include "prefpipe/errors.hpp"
#include "prefpipe/record_io.hpp"
#include "test_util.hpp"

using namespace prefpipe;
using prefpipe::testing::TempDir;
using prefpipe::testing::read_file;
using prefpipe::testing::write_file;

TEST_CASE("canonical_dump sorts keys and strips whitespace") {
    json j;
    j["zebra"] = 1;
    j["alpha"] = 2;
    j["mid"] = json{{"y", 1}, {"x", 2}};
    CHECK(canonical_dump(j) == R"({"alpha":2,"mid":{"x":2,"y":1},"zebra":1})");
}

TEST_CASE("canonical_hash ignores key order") {
    json a = json::parse(R"({"x": 1, "y": 2})");
    json b = json::parse(R"({"y": 2, "x": 1})");
    CHECK(canonical_hash(a) == canonical_hash(b));
    CHECK(canonical_hash(a).size() == 16);
    json c = json::parse(R"({"x": 1, "y": 3})");
    CHECK(canonical_hash(a) != canonical_hash(c));
}

TEST_CASE("for_each_record reports 1-based line numbers") {
    TempDir dir("recio");
    write_file(dir.file("ok.jsonl"), "{\"a\":1}\n\n{\"a\":2}\n");
    std::vector<std::size_t> lines;
    for_each_record(dir.file("ok.jsonl"), [&](std::size_t line, const json&) {
        lines.push_back(line);
    });
    CHECK(lines == std::vector<std::size_t>{1, 3});

    write_file(dir.file("bad.jsonl"), "{\"a\":1}\nnot json\n");
    CHECK_THROWS_AS(for_each_record(dir.file("bad.jsonl"), [](std::size_t, const json&) {}),
                    ParseError);
    try {
        for_each_record(dir.file("bad.jsonl"), [](std::size_t, const json&) {});
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }
}

TEST_CASE("for_each_record rejects a missing file") {
    CHECK_THROWS_AS(for_each_record("/nonexistent/zzz.jsonl", [](std::size_t, const json&) {}),
                    ValidationError);
}

TEST_CASE("store round trip preserves header and records") {
    TempDir dir("store");
    auto path = dir.file("data.jsonl");
    {
        StoreWriter writer(path, StoreHeader{"responses", 1, "abc123"});
        writer.write(json{{"k", 1}});
        writer.write(json{{"k", 2}});
        writer.commit();
    }
    StoreContents got = read_store(path, "responses");
    CHECK(got.header.kind == "responses");
    CHECK(got.header.version == 1);
    CHECK(got.header.config_hash == "abc123");
    REQUIRE(got.records.size() == 2);
    CHECK(got.records[1]["k"] == 2);
}

TEST_CASE("read_store rejects a mismatched kind") {
    TempDir dir("store");
    auto path = dir.file("data.jsonl");
    StoreWriter writer(path, StoreHeader{"responses", 1, "h"});
    writer.commit();
    CHECK_THROWS_AS(read_store(path, "annotations"), ValidationError);
}

TEST_CASE("read_store rejects an empty file and a future version") {
    TempDir dir("store");
    write_file(dir.file("empty.jsonl"), "");
    CHECK_THROWS_AS(read_store(dir.file("empty.jsonl"), "x"), ValidationError);
    write_file(dir.file("v2.jsonl"), R"({"store":"x","version":2,"config_hash":""})"
                                     "\n");
    CHECK_THROWS_AS(read_store(dir.file("v2.jsonl"), "x"), ValidationError);
}

TEST_CASE("uncommitted writer leaves no file behind") {
    TempDir dir("store");
    auto path = dir.file("data.jsonl");
    {
        StoreWriter writer(path, StoreHeader{"x", 1, ""});
        writer.write(json{{"k", 1}});
    }
    CHECK_FALSE(std::filesystem::exists(path));
    CHECK_FALSE(std::filesystem::exists(path.string() + ".tmp"));
}

TEST_CASE("store bytes are stable under rewrite") {
    TempDir dir("store");
    auto a = dir.file("a.jsonl");
    auto b = dir.file("b.jsonl");
    for (const auto& path : {a, b}) {
        StoreWriter writer(path, StoreHeader{"pairs", 1, "same"});
        writer.write(json{{"z", 1}, {"a", 2}});
        writer.commit();
    }
    CHECK(read_file(a) == read_file(b));
}

TEST_CASE("require_ helpers name the field and line") {
    json j = json::parse(R"({"s":"v","b":true,"i":3,"f":1.5})");
    CHECK(require_string(j, "s", 4) == "v");
    CHECK(require_bool(j, "b", 4));
    CHECK(require_int(j, "i", 4) == 3);
    CHECK_THROWS_AS(require_string(j, "missing", 4), ParseError);
    CHECK_THROWS_AS(require_int(j, "f", 4), ParseError);
    CHECK_THROWS_AS(require_bool(j, "i", 4), ParseError);
    try {
        require_string(j, "missing", 4);
    } catch (const ParseError& e) {
        CHECK(e.line() == 4);
        CHECK(e.field() == "missing");
    }
}

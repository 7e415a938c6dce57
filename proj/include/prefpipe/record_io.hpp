#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

namespace prefpipe {

using json = nlohmann::ordered_json;

// Canonical serialization used everywhere records are written: keys sorted,
// no whitespace, one record per line. Two equal values always produce equal
// bytes, which is what the store-level determinism guarantees rest on.
std::string canonical_dump(const json& value);

// 16-hex-digit FNV-1a hash of the canonical serialization.
std::string canonical_hash(const json& value);

// Reads a whole line-delimited file, invoking fn(line_number, parsed_json)
// for every non-empty line. Parse failures throw ParseError carrying the
// 1-based line number.
void for_each_record(const std::filesystem::path& path,
                     const std::function<void(std::size_t, const json&)>& fn);

// Header line stamped at the top of every pipeline store (responses,
// annotations, pairs). Readers reject unknown kinds and future versions;
// mixing inputs produced under different configs is detected by comparing
// config_hash values.
struct StoreHeader {
    std::string kind;
    int version = 1;
    std::string config_hash;

    json to_json() const;
    static StoreHeader from_json(const json& j, std::size_t line);
};

class StoreWriter {
public:
    StoreWriter(const std::filesystem::path& path, const StoreHeader& header);
    ~StoreWriter();

    StoreWriter(const StoreWriter&) = delete;
    StoreWriter& operator=(const StoreWriter&) = delete;

    void write(const json& record);
    // Atomically moves the temp file into place. Nothing is visible at the
    // target path until commit() succeeds.
    void commit();

private:
    std::filesystem::path path_;
    std::filesystem::path tmp_path_;
    std::string buffer_;
    bool committed_ = false;
};

struct StoreContents {
    StoreHeader header;
    std::vector<json> records;
};

// Loads a store written by StoreWriter, validating kind and version.
StoreContents read_store(const std::filesystem::path& path, const std::string& expected_kind);

// Field accessors that fail with ParseError naming the line and field.
std::string require_string(const json& j, const char* field, std::size_t line);
bool require_bool(const json& j, const char* field, std::size_t line);
std::int64_t require_int(const json& j, const char* field, std::size_t line);
const json& require_field(const json& j, const char* field, std::size_t line);

}  // namespace prefpipe

#include "prefpipe/record_io.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "prefpipe/errors.hpp"
#include "prefpipe/rng.hpp"

namespace prefpipe {

std::string canonical_dump(const json& value) {
    // nlohmann::json (the non-ordered alias) stores object keys sorted, so
    // converting through it canonicalizes key order.
    nlohmann::json sorted = value;
    return sorted.dump();
}

std::string canonical_hash(const json& value) {
    std::uint64_t h = fnv1a64(canonical_dump(value));
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

void for_each_record(const std::filesystem::path& path,
                     const std::function<void(std::size_t, const json&)>& fn) {
    std::ifstream in(path);
    if (!in) {
        throw ValidationError("cannot open " + path.string());
    }
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json parsed;
        try {
            parsed = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("invalid record: ") + e.what(), line_no);
        }
        fn(line_no, parsed);
    }
}

json StoreHeader::to_json() const {
    return json{{"store", kind}, {"version", version}, {"config_hash", config_hash}};
}

StoreHeader StoreHeader::from_json(const json& j, std::size_t line) {
    StoreHeader h;
    h.kind = require_string(j, "store", line);
    h.version = static_cast<int>(require_int(j, "version", line));
    h.config_hash = require_string(j, "config_hash", line);
    return h;
}

StoreWriter::StoreWriter(const std::filesystem::path& path, const StoreHeader& header)
    : path_(path), tmp_path_(path.string() + ".tmp") {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    buffer_ = canonical_dump(header.to_json());
    buffer_ += '\n';
}

StoreWriter::~StoreWriter() {
    if (!committed_) {
        std::error_code ec;
        std::filesystem::remove(tmp_path_, ec);
    }
}

void StoreWriter::write(const json& record) {
    buffer_ += canonical_dump(record);
    buffer_ += '\n';
}

void StoreWriter::commit() {
    {
        std::ofstream out(tmp_path_, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw ValidationError("cannot write " + tmp_path_.string());
        }
        out << buffer_;
    }
    std::filesystem::rename(tmp_path_, path_);
    committed_ = true;
}

StoreContents read_store(const std::filesystem::path& path, const std::string& expected_kind) {
    StoreContents contents;
    bool saw_header = false;
    for_each_record(path, [&](std::size_t line, const json& j) {
        if (!saw_header) {
            if (!j.contains("store")) {
                throw ParseError("missing store header", line, "store");
            }
            contents.header = StoreHeader::from_json(j, line);
            if (contents.header.kind != expected_kind) {
                throw ValidationError(path.string() + ": expected a '" + expected_kind +
                                      "' store, found '" + contents.header.kind + "'");
            }
            if (contents.header.version != 1) {
                throw ValidationError(path.string() + ": unsupported store version " +
                                      std::to_string(contents.header.version));
            }
            saw_header = true;
            return;
        }
        contents.records.push_back(j);
    });
    if (!saw_header) {
        throw ValidationError(path.string() + ": empty file, no store header");
    }
    return contents;
}

const json& require_field(const json& j, const char* field, std::size_t line) {
    auto it = j.find(field);
    if (it == j.end()) {
        throw ParseError(std::string("missing field '") + field + "'", line, field);
    }
    return *it;
}

std::string require_string(const json& j, const char* field, std::size_t line) {
    const json& v = require_field(j, field, line);
    if (!v.is_string()) {
        throw ParseError(std::string("field '") + field + "' must be a string", line, field);
    }
    return v.get<std::string>();
}

bool require_bool(const json& j, const char* field, std::size_t line) {
    const json& v = require_field(j, field, line);
    if (!v.is_boolean()) {
        throw ParseError(std::string("field '") + field + "' must be a boolean", line, field);
    }
    return v.get<bool>();
}

std::int64_t require_int(const json& j, const char* field, std::size_t line) {
    const json& v = require_field(j, field, line);
    if (!v.is_number_integer()) {
        throw ParseError(std::string("field '") + field + "' must be an integer", line, field);
    }
    return v.get<std::int64_t>();
}

}  // namespace prefpipe

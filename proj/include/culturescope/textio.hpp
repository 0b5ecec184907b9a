#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "culturescope/error.hpp"

namespace culturescope {

using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Error::Kind::io, "cannot open file: " + path.string());
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

inline void write_file(const std::filesystem::path& path, const std::string& data) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Error::Kind::io, "cannot write file: " + path.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw Error(Error::Kind::io, "short write: " + path.string());
}

// Shortest round-trip decimal form; deterministic across runs.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------------------
// JSONL: first line is a header object {"format_version":1,"kind":"..."},
// remaining lines are one record each.
// ---------------------------------------------------------------------------

class JsonlWriter {
public:
    JsonlWriter(const std::filesystem::path& path, const std::string& kind) {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        out_.open(path, std::ios::binary | std::ios::trunc);
        if (!out_) throw Error(Error::Kind::io, "cannot write file: " + path.string());
        json header;
        header["format_version"] = kFormatVersion;
        header["kind"] = kind;
        out_ << header.dump() << "\n";
    }

    void write(const json& record) { out_ << record.dump() << "\n"; }

private:
    std::ofstream out_;
};

inline std::vector<json> read_jsonl(const std::filesystem::path& path, const std::string& expected_kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Error::Kind::io, "cannot open file: " + path.string());
    std::string line;
    std::vector<json> records;
    bool saw_header = false;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const std::exception& e) {
            throw Error(Error::Kind::parse,
                        path.string() + ":" + std::to_string(lineno) + ": bad JSON: " + e.what());
        }
        if (!saw_header) {
            if (!j.contains("format_version"))
                throw Error(Error::Kind::parse, path.string() + ": missing format_version header line");
            if (!expected_kind.empty() && j.value("kind", "") != expected_kind)
                throw Error(Error::Kind::parse, path.string() + ": expected kind '" + expected_kind +
                                                     "', got '" + j.value("kind", "") + "'");
            saw_header = true;
            continue;
        }
        records.push_back(std::move(j));
    }
    if (!saw_header) throw Error(Error::Kind::parse, path.string() + ": empty file (no header line)");
    return records;
}

// ---------------------------------------------------------------------------
// CSV: first line "# culturescope <kind> v<version>", second line the column
// header, then data rows. Fields with commas/quotes are quoted.
// ---------------------------------------------------------------------------

inline std::string csv_escape(const std::string& field) {
    if (field.find_first_of(",\"\n") == std::string::npos) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out += "\"";
    return out;
}

class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const std::string& kind,
              const std::vector<std::string>& columns) {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        out_.open(path, std::ios::binary | std::ios::trunc);
        if (!out_) throw Error(Error::Kind::io, "cannot write file: " + path.string());
        out_ << "# culturescope " << kind << " v" << kFormatVersion << "\n";
        write_row_(columns);
    }

    void row(const std::vector<std::string>& fields) { write_row_(fields); }

private:
    void write_row_(const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) out_ << ",";
            out_ << csv_escape(fields[i]);
        }
        out_ << "\n";
    }

    std::ofstream out_;
};

}  // namespace culturescope

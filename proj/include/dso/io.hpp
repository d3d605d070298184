#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dso/rng.hpp"
#include "dso/util.hpp"

namespace dso {

// Decimal text with 17 significant digits: round-trips every double exactly.
inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline double parse_double(std::string_view s) {
    std::string tmp(s);
    char* end = nullptr;
    const double v = std::strtod(tmp.c_str(), &end);
    if (end == tmp.c_str() || *end != '\0')
        throw CorruptionError("bad numeric field: " + tmp);
    return v;
}

inline long long parse_int(std::string_view s) {
    std::string tmp(s);
    char* end = nullptr;
    const long long v = std::strtoll(tmp.c_str(), &end, 10);
    if (end == tmp.c_str() || *end != '\0')
        throw CorruptionError("bad integer field: " + tmp);
    return v;
}

inline std::string join_values(const std::vector<double>& vs) {
    std::string out;
    for (std::size_t i = 0; i < vs.size(); ++i) {
        if (i) out += ',';
        out += fmt17(vs[i]);
    }
    return out;
}

inline std::vector<double> split_values(std::string_view s) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        const std::size_t next = s.find(',', pos);
        const std::string_view tok =
            s.substr(pos, next == std::string_view::npos ? next : next - pos);
        out.push_back(parse_double(tok));
        if (next == std::string_view::npos) break;
        pos = next + 1;
    }
    return out;
}

inline std::vector<std::string> split_ws(std::string_view s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
        std::size_t j = i;
        while (j < s.size() && s[j] != ' ' && s[j] != '\t') ++j;
        if (j > i) out.emplace_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

// "key=value" token; the value may itself contain '='.
inline std::pair<std::string, std::string> split_kv(std::string_view tok) {
    const std::size_t eq = tok.find('=');
    if (eq == std::string_view::npos)
        throw CorruptionError("expected key=value, got: " + std::string(tok));
    return {std::string(tok.substr(0, eq)), std::string(tok.substr(eq + 1))};
}

inline std::string hash_hex(std::uint64_t h) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// Versioned line-delimited artifact:
//   <kind> v<version>
//   hash <fnv1a64 of everything after this line>
//   <body lines...>
// The hash is verified on load; a mismatch is treated as corruption.
inline void write_text_artifact(const std::filesystem::path& path,
                                std::string_view kind, int version,
                                const std::string& body) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open for write: " + path.string());
    f << kind << " v" << version << "\n";
    f << "hash " << hash_hex(fnv1a64(body)) << "\n";
    f << body;
    if (!f) throw InputError("write failed: " + path.string());
}

struct TextArtifact {
    std::string kind;
    int version = 0;
    std::vector<std::string> lines;  // body lines, no trailing newline
};

inline TextArtifact read_text_artifact(const std::filesystem::path& path,
                                       std::string_view expect_kind,
                                       int expect_version) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open for read: " + path.string());
    std::string header, hash_line;
    if (!std::getline(f, header) || !std::getline(f, hash_line))
        throw CorruptionError("truncated artifact: " + path.string());

    TextArtifact art;
    {
        const auto toks = split_ws(header);
        if (toks.size() != 2 || toks[1].size() < 2 || toks[1][0] != 'v')
            throw CorruptionError("bad artifact header: " + header);
        art.kind = toks[0];
        art.version = static_cast<int>(parse_int(toks[1].substr(1)));
    }
    if (art.kind != expect_kind)
        throw CorruptionError("expected artifact kind '" +
                              std::string(expect_kind) + "', got '" + art.kind +
                              "' in " + path.string());
    if (art.version != expect_version)
        throw VersionError("unsupported " + art.kind + " version v" +
                           std::to_string(art.version) + " (supported: v" +
                           std::to_string(expect_version) + ")");

    const auto hs = split_ws(hash_line);
    if (hs.size() != 2 || hs[0] != "hash")
        throw CorruptionError("missing hash line in " + path.string());

    std::stringstream rest;
    rest << f.rdbuf();
    const std::string body = rest.str();
    if (hash_hex(fnv1a64(body)) != hs[1])
        throw CorruptionError("content hash mismatch in " + path.string());

    std::size_t pos = 0;
    while (pos < body.size()) {
        std::size_t nl = body.find('\n', pos);
        if (nl == std::string::npos) nl = body.size();
        art.lines.emplace_back(body.substr(pos, nl - pos));
        pos = nl + 1;
    }
    return art;
}

}  // namespace dso

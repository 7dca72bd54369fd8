#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "config.hpp"
#include "errors.hpp"
#include "model.hpp"

namespace simcgnn {

// Text checkpoint layout, one record per line:
//
//   simcgnn-checkpoint <version>
//   vocabulary <16 hex digits>
//   config <line count>
//   <config file lines>
//   tensor <name> <rank> <dims...>
//   <values as C99 hexfloats, space separated, one line per tensor>
//   ...
//   end
//
// Hexfloats make the round trip bit-exact.
inline constexpr int checkpoint_version = 1;

struct checkpoint {
    parameter_store params;
    config cfg;
    std::uint64_t vocabulary_fingerprint = 0;
};

namespace detail {
inline std::string hexfloat(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%a", v);
    return buf;
}

inline double parse_hexfloat(const std::string& s, std::size_t line) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0') throw parse_error(line, "bad number '" + s + "'");
    return v;
}

inline std::string hex64(std::uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}
} // namespace detail

inline void write_checkpoint(std::ostream& out, const checkpoint& c) {
    out << "simcgnn-checkpoint " << checkpoint_version << '\n';
    out << "vocabulary " << detail::hex64(c.vocabulary_fingerprint) << '\n';
    const std::string cfg = format_config(c.cfg);
    std::size_t lines = 0;
    for (char ch : cfg) lines += ch == '\n' ? 1 : 0;
    out << "config " << lines << '\n' << cfg;
    for (const auto& [name, t] : c.params.named()) {
        out << "tensor " << name << ' ' << t->rank();
        for (std::size_t d : t->shape()) out << ' ' << d;
        out << '\n';
        bool first = true;
        for (double v : t->data()) {
            if (!first) out << ' ';
            out << detail::hexfloat(v);
            first = false;
        }
        out << '\n';
    }
    out << "end\n";
}

inline checkpoint read_checkpoint(std::istream& in) {
    std::string line;
    std::size_t lineno = 0;
    auto next = [&]() -> std::istringstream {
        if (!std::getline(in, line)) throw parse_error(lineno + 1, "unexpected end of checkpoint");
        ++lineno;
        return std::istringstream(line);
    };

    checkpoint c;
    {
        auto is = next();
        std::string magic;
        int version = 0;
        is >> magic >> version;
        if (magic != "simcgnn-checkpoint") throw parse_error(lineno, "not a checkpoint");
        if (version != checkpoint_version)
            throw compatibility_error("checkpoint format version " + std::to_string(version) + ", expected " +
                                      std::to_string(checkpoint_version));
    }
    {
        auto is = next();
        std::string tag, hex;
        is >> tag >> hex;
        if (tag != "vocabulary") throw parse_error(lineno, "expected vocabulary fingerprint");
        c.vocabulary_fingerprint = std::stoull(hex, nullptr, 16);
    }
    {
        auto is = next();
        std::string tag;
        std::size_t n = 0;
        is >> tag >> n;
        if (tag != "config") throw parse_error(lineno, "expected config block");
        std::string text;
        for (std::size_t i = 0; i < n; ++i) {
            next();
            text += line + '\n';
        }
        std::istringstream cs(text);
        c.cfg = parse_config(cs);
    }
    for (auto& [name, t] : c.params.named()) {
        auto is = next();
        std::string tag, got;
        std::size_t rank = 0;
        is >> tag >> got >> rank;
        if (tag != "tensor" || got != name)
            throw parse_error(lineno, "expected tensor " + name + ", found '" + line + "'");
        shape_t shape(rank);
        for (auto& d : shape) is >> d;
        if (!is) throw parse_error(lineno, "bad shape header for " + name);
        *t = tensor(shape);
        auto vs = next();
        std::string tok;
        std::size_t k = 0;
        auto data = t->data();
        while (vs >> tok) {
            if (k == data.size()) throw parse_error(lineno, "too many values for " + name);
            data[k++] = detail::parse_hexfloat(tok, lineno);
        }
        if (k != data.size())
            throw parse_error(lineno, name + ": " + std::to_string(k) + " values, expected " +
                                          std::to_string(data.size()));
    }
    auto is = next();
    if (line != "end") throw parse_error(lineno, "expected end marker");
    return c;
}

inline void save_checkpoint(const std::string& path, const checkpoint& c) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path);
    write_checkpoint(out, c);
}

inline checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path);
    return read_checkpoint(in);
}

} // namespace simcgnn

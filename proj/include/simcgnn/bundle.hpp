#pragma once

#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "data.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace simcgnn {

// Dataset bundle, plain text:
//
//   simcgnn-bundle 1
//   stats clicks=<n> train_sessions=<n> test_sessions=<n> items=<n> avg_length=<x>
//   dropped_test_sessions <n>
//   vocabulary <m> <raw ids in index order...>
//   train <count>
//   <item> <item> ... <label>        one line per session, label last
//   test <count>
//   ...
//
// Sessions are stored as written by build_dataset (already augmented).
inline constexpr int bundle_version = 1;

namespace detail {
inline void write_sessions(std::ostream& out, const char* tag, const std::vector<session>& ss) {
    out << tag << ' ' << ss.size() << '\n';
    for (const auto& s : ss) {
        for (item_index i : s.items) out << i << ' ';
        out << s.label << '\n';
    }
}
} // namespace detail

inline void write_bundle(std::ostream& out, const dataset& ds) {
    out << "simcgnn-bundle " << bundle_version << '\n';
    std::ostringstream avg;
    avg.precision(17);
    avg << ds.stats.avg_length;
    out << "stats clicks=" << ds.stats.clicks << " train_sessions=" << ds.stats.train_sessions
        << " test_sessions=" << ds.stats.test_sessions << " items=" << ds.stats.items
        << " avg_length=" << avg.str() << '\n';
    out << "dropped_test_sessions " << ds.stats.dropped_test_sessions << '\n';
    out << "vocabulary " << ds.vocab.size();
    for (std::size_t i = 1; i <= ds.vocab.size(); ++i) out << ' ' << ds.vocab.decode(i);
    out << '\n';
    detail::write_sessions(out, "train", ds.train);
    detail::write_sessions(out, "test", ds.test);
}

inline std::string bundle_text(const dataset& ds) {
    std::ostringstream os;
    write_bundle(os, ds);
    return os.str();
}

// Content hash of the serialized bundle.
inline std::uint64_t dataset_fingerprint(const dataset& ds) { return fnv1a(bundle_text(ds)); }

inline dataset read_bundle(std::istream& in) {
    std::string line;
    std::size_t lineno = 0;
    auto next = [&]() -> std::istringstream {
        if (!std::getline(in, line)) throw parse_error(lineno + 1, "unexpected end of bundle");
        ++lineno;
        return std::istringstream(line);
    };

    dataset ds;
    {
        auto is = next();
        std::string magic;
        int version = 0;
        is >> magic >> version;
        if (magic != "simcgnn-bundle") throw parse_error(lineno, "not a dataset bundle");
        if (version != bundle_version)
            throw compatibility_error("bundle format version " + std::to_string(version));
    }
    {
        auto is = next();
        std::string tag, field;
        is >> tag;
        if (tag != "stats") throw parse_error(lineno, "expected stats block");
        while (is >> field) {
            const auto eq = field.find('=');
            if (eq == std::string::npos) throw parse_error(lineno, "bad stats field '" + field + "'");
            const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
            if (key == "clicks") ds.stats.clicks = std::stoull(value);
            else if (key == "train_sessions") ds.stats.train_sessions = std::stoull(value);
            else if (key == "test_sessions") ds.stats.test_sessions = std::stoull(value);
            else if (key == "items") ds.stats.items = std::stoull(value);
            else if (key == "avg_length") ds.stats.avg_length = std::stod(value);
            else throw parse_error(lineno, "unknown stats field '" + key + "'");
        }
    }
    {
        auto is = next();
        std::string tag;
        is >> tag >> ds.stats.dropped_test_sessions;
        if (tag != "dropped_test_sessions" || !is) throw parse_error(lineno, "expected dropped_test_sessions");
    }
    {
        auto is = next();
        std::string tag;
        std::size_t m = 0;
        is >> tag >> m;
        if (tag != "vocabulary") throw parse_error(lineno, "expected vocabulary");
        for (std::size_t i = 0; i < m; ++i) {
            raw_id id = 0;
            if (!(is >> id)) throw parse_error(lineno, "vocabulary shorter than declared");
            ds.vocab.add(id);
        }
        if (ds.vocab.size() != m) throw parse_error(lineno, "duplicate vocabulary ids");
    }
    for (auto [tag, target] : {std::pair{"train", &ds.train}, std::pair{"test", &ds.test}}) {
        auto is = next();
        std::string got;
        std::size_t n = 0;
        is >> got >> n;
        if (got != tag) throw parse_error(lineno, std::string("expected ") + tag + " block");
        target->reserve(n);
        for (std::size_t k = 0; k < n; ++k) {
            auto ss = next();
            session s;
            item_index i = 0;
            while (ss >> i) s.items.push_back(i);
            if (s.items.size() < 2) throw parse_error(lineno, "session needs at least one item and a label");
            s.label = s.items.back();
            s.items.pop_back();
            for (item_index x : s.items)
                if (x == padding_index || x > ds.vocab.size()) throw parse_error(lineno, "item outside vocabulary");
            if (s.label == padding_index || s.label > ds.vocab.size())
                throw parse_error(lineno, "label outside vocabulary");
            target->push_back(std::move(s));
        }
    }
    return ds;
}

inline void save_bundle(const std::string& path, const dataset& ds) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write bundle " + path);
    write_bundle(out, ds);
}

inline dataset load_bundle(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open bundle " + path);
    return read_bundle(in);
}

} // namespace simcgnn

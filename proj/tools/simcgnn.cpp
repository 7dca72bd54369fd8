// simcgnn: prepare, train, eval, analyze.
//
// Exit codes: 0 ok, 1 unexpected failure, 2 usage or config error,
// 3 data or compatibility error, 4 numerical divergence.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include <simcgnn/simcgnn.hpp>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace simcgnn;

namespace {

enum exit_code : int { ok = 0, internal = 1, usage = 2, data = 3, divergence = 4 };

struct usage_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct data_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string hex(std::uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void write_json(const fs::path& p, const json& j) {
    std::ofstream out(p);
    if (!out) throw data_error("cannot write " + p.string());
    out << j.dump(2) << '\n';
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw data_error("cannot open " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw data_error(p.string() + ": " + e.what());
    }
}

template <class F>
auto with_file_context(const std::string& path, F&& f) {
    try {
        return f();
    } catch (const parse_error& e) {
        throw data_error(path + ":" + std::to_string(e.line()) + ": " + e.what());
    }
}

json stats_json(const dataset_stats& s) {
    return {{"clicks", s.clicks},
            {"train_sessions", s.train_sessions},
            {"test_sessions", s.test_sessions},
            {"items", s.items},
            {"avg_length", s.avg_length}};
}

json config_json(const config& c) {
    json j = json::object();
    for (const auto& [k, v] : config_entries(c)) j[k] = v;
    return j;
}

config config_from_json(const json& j) {
    config c;
    for (const auto& [k, v] : j.items()) set_config_value(c, k, v.get<std::string>());
    return c;
}

json epoch_json(const epoch_record& e) {
    json j{{"type", "epoch"},        {"epoch", e.epoch},
           {"lr", e.lr},             {"loss", e.loss},
           {"loss_pred", e.loss_pred}, {"loss_con", e.loss_con},
           {"loss_median", e.loss_median}};
    j["valid_recall"] = e.valid_recall ? json(*e.valid_recall) : json(nullptr);
    j["valid_mrr"] = e.valid_mrr ? json(*e.valid_mrr) : json(nullptr);
    j["steps"] = e.steps;
    j["fallback_draws"] = e.fallback_draws;
    j["skipped_anchors"] = e.skipped_anchors;
    j["clamped_probs"] = e.clamped_probs;
    j["seconds"] = e.seconds;
    return j;
}

json metrics_json(const metrics_report& r) {
    return {{"method", r.method}, {"k", r.k}, {"recall", r.recall}, {"mrr", r.mrr}, {"arp", r.arp},
            {"sessions", r.sessions}};
}

// ------------------------------------------------------------------ prepare

struct prepare_args {
    std::string input, format = "yoochoose", out;
    char delimiter = ',';
    bool header = false;
    std::size_t session_col = 0, item_col = 1;
    long order_col = 2;
    std::size_t min_item_count = 5, min_session_len = 2, max_len = 50;
    double test_fraction = 0.2, recent_fraction = 1.0;
    std::optional<double> test_days;

    bool synthetic = false, whole_sessions = false;
    std::size_t items = 1000, sessions = 10000;
    double exponent = 1.0, collision = 0.2, repeat = 0.0;
    std::uint64_t seed = 0;
};

int cmd_prepare(const prepare_args& a) {
    dataset ds;
    json source;
    if (a.synthetic) {
        synthetic_options so;
        so.repeat_probability = a.repeat;
        so.test_fraction = a.test_fraction;
        ds = generate_synthetic(a.items, a.sessions, a.exponent, a.collision, a.seed, so);
        if (!a.whole_sessions) {
            ds.train = augment_all(ds.train, a.max_len);
            ds.test = augment_all(ds.test, a.max_len);
            ds.stats.train_sessions = ds.train.size();
            ds.stats.test_sessions = ds.test.size();
        }
        source = {{"kind", "synthetic"},      {"items", a.items},       {"sessions", a.sessions},
                  {"exponent", a.exponent},  {"collision", a.collision}, {"repeat_probability", a.repeat},
                  {"seed", a.seed},          {"test_fraction", a.test_fraction},
                  {"augmented", !a.whole_sessions}, {"max_len", a.max_len}};
    } else {
        if (a.input.empty()) throw usage_error("prepare: --input or --synthetic is required");
        format_descriptor fmt;
        if (a.format == "yoochoose") fmt = format_descriptor::yoochoose();
        else if (a.format == "diginetica") fmt = format_descriptor::diginetica();
        else if (a.format == "custom") {
            fmt.delimiter = a.delimiter;
            fmt.header = a.header;
            fmt.session_column = a.session_col;
            fmt.item_column = a.item_col;
            fmt.order_column = a.order_col < 0 ? std::nullopt : std::optional<std::size_t>(a.order_col);
        } else
            throw usage_error("prepare: unknown --format '" + a.format + "'");
        const auto log = with_file_context(a.input, [&] { return load_sessions(a.input, fmt); });
        const auto pre = preprocess(log, {a.min_item_count, a.min_session_len});
        split_options so;
        so.test_fraction = a.test_fraction;
        so.test_days = a.test_days;
        so.recent_train_fraction = a.recent_fraction;
        so.max_session_len = a.max_len;
        ds = build_dataset(pre.log, so);
        source = {{"kind", "file"},
                  {"input", a.input},
                  {"format", a.format},
                  {"min_item_count", a.min_item_count},
                  {"min_session_len", a.min_session_len},
                  {"test_fraction", a.test_fraction},
                  {"test_days", a.test_days ? json(*a.test_days) : json(nullptr)},
                  {"recent_train_fraction", a.recent_fraction},
                  {"max_len", a.max_len}};
    }

    fs::create_directories(a.out);
    save_bundle((fs::path(a.out) / "bundle.txt").string(), ds);
    json stats = stats_json(ds.stats);
    write_json(fs::path(a.out) / "stats.json", {{"stats", stats},
                                                 {"dropped_test_sessions", ds.stats.dropped_test_sessions},
                                                 {"fingerprint", hex(dataset_fingerprint(ds))},
                                                 {"source", source},
                                                 {"version", version}});
    std::cout << json{{"bundle", (fs::path(a.out) / "bundle.txt").string()}, {"stats", stats}}.dump() << '\n';
    return ok;
}

// -------------------------------------------------------------------- train

struct train_args {
    std::string bundle, config_path, run_dir, from_manifest;
    std::vector<std::string> overrides, ablations;
    std::optional<std::uint64_t> seed;
};

void apply_assignment(config& c, const std::string& kv, std::set<std::string>& touched, const char* flag) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw usage_error(std::string(flag) + " expects key=value, got '" + kv + "'");
    set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1), &touched);
}

dataset load_bundle_checked(const std::string& path) {
    return with_file_context(path, [&] { return load_bundle(path); });
}

int cmd_train(train_args a) {
    config cfg;
    std::set<std::string> touched;
    if (!a.from_manifest.empty()) {
        const json m = read_json(a.from_manifest);
        cfg = config_from_json(m.at("config"));
        for (const auto& [k, v] : config_entries(cfg)) touched.insert(k);
        if (a.bundle.empty()) a.bundle = m.at("bundle").get<std::string>();
        const auto ds = load_bundle_checked(a.bundle);
        if (hex(dataset_fingerprint(ds)) != m.at("dataset_fingerprint").get<std::string>())
            throw compatibility_error("bundle " + a.bundle + " does not match the manifest fingerprint");
    } else if (!a.config_path.empty()) {
        cfg = with_file_context(a.config_path, [&] { return load_config(a.config_path, {}, &touched); });
    }
    for (const auto& kv : a.overrides) apply_assignment(cfg, kv, touched, "--set");
    for (const auto& kv : a.ablations) {
        static const std::set<std::string> allowed{"contrast", "norm", "pe", "weakneg"};
        if (!allowed.count(kv.substr(0, kv.find('='))))
            throw usage_error("--ablation accepts contrast, norm, pe, weakneg; got '" + kv + "'");
        apply_assignment(cfg, kv, touched, "--ablation");
    }
    if (a.seed) {
        cfg.train.seed = *a.seed;
        touched.insert("train.seed");
    }
    if (a.bundle.empty()) throw usage_error("train: --bundle is required");
    try {
        cfg.validate();
    } catch (const contract_error& e) {
        throw usage_error(e.what());
    }

    const dataset ds = load_bundle_checked(a.bundle);
    const fs::path dir(a.run_dir);
    fs::create_directories(dir);
    const fs::path manifest = dir / "manifest.json", ckpt = dir / "checkpoint.txt", report = dir / "report.jsonl";

    json defaulted = json::array();
    for (const auto& [k, v] : config_entries(cfg))
        if (!touched.count(k)) defaulted.push_back(k);
    write_json(manifest, {{"version", version},
                          {"command", "train"},
                          {"bundle", fs::absolute(a.bundle).string()},
                          {"dataset_fingerprint", hex(dataset_fingerprint(ds))},
                          {"vocabulary_fingerprint", hex(ds.vocab.fingerprint())},
                          {"seed", cfg.train.seed},
                          {"config", config_json(cfg)},
                          {"defaulted_keys", defaulted},
                          {"artifacts", {{"checkpoint", ckpt.string()}, {"report", report.string()}}}});

    std::ofstream rep(report);
    if (!rep) throw data_error("cannot write " + report.string());
    const auto res = train(ds, cfg, [&](const epoch_record& e, const parameter_store&) {
        rep << epoch_json(e).dump() << '\n' << std::flush;
        std::cerr << "epoch " << e.epoch << " loss " << e.loss << '\n';
    });
    const auto& r = res.report;
    json summary{{"type", "summary"},
                 {"epochs", r.epochs.size()},
                 {"train_sessions", r.train_sessions},
                 {"valid_sessions", r.valid_sessions},
                 {"steps", r.steps},
                 {"eval_k", r.eval_k},
                 {"diverged", r.diverged},
                 {"divergence", r.divergence},
                 {"paths",
                  {{"forward_passes", r.paths.forward_passes},
                   {"contrastive_terms", r.paths.contrastive_terms},
                   {"cosine_scoring", r.paths.cosine_scoring},
                   {"inner_product_scoring", r.paths.inner_product_scoring},
                   {"positional_terms", r.paths.positional_terms},
                   {"same_last_item_draws", r.paths.same_last_item_draws},
                   {"random_draws", r.paths.random_draws}}}};
    rep << summary.dump() << '\n';
    save_checkpoint(ckpt.string(), {res.params, cfg, ds.vocab.fingerprint()});
    if (r.diverged) {
        std::cerr << "simcgnn: training diverged: " << r.divergence << '\n';
        return divergence;
    }
    return ok;
}

// --------------------------------------------------------------------- eval

struct model_source {
    checkpoint ckpt;
    dataset ds;
};

model_source load_compatible(const std::string& ckpt_path, const std::string& bundle_path) {
    model_source s{with_file_context(ckpt_path, [&] { return load_checkpoint(ckpt_path); }),
                   load_bundle_checked(bundle_path)};
    if (s.ckpt.vocabulary_fingerprint != s.ds.vocab.fingerprint())
        throw compatibility_error("checkpoint " + ckpt_path + " was trained on a different vocabulary than " +
                                  bundle_path);
    if (s.ckpt.params.num_items() != s.ds.vocab.size())
        throw compatibility_error("checkpoint item count differs from bundle vocabulary");
    return s;
}

std::vector<baseline_kind> parse_baselines(const std::vector<std::string>& names) {
    std::vector<baseline_kind> out;
    for (const auto& n : names) {
        if (n == "pop") out.push_back(baseline_kind::pop);
        else if (n == "spop") out.push_back(baseline_kind::spop);
        else if (n == "itemknn") out.push_back(baseline_kind::itemknn);
        else throw usage_error("unknown baseline '" + n + "' (pop, spop, itemknn)");
    }
    return out;
}

struct eval_args {
    std::string checkpoint, bundle, out;
    std::size_t k = 20;
    std::vector<std::string> baselines;
    bool exclude_seen = false;
};

int cmd_eval(const eval_args& a) {
    if (a.k < 1) throw usage_error("--k must be >= 1");
    const auto kinds = parse_baselines(a.baselines);
    const auto src = load_compatible(a.checkpoint, a.bundle);
    const auto& ds = src.ds;
    if (ds.test.empty()) throw data_error("bundle has no test sessions");
    const auto phi = item_popularity(ds.train, ds.vocab.size());

    std::vector<metrics_report> rows;
    rows.push_back(summarize("SimCGNN", model_rankings(src.ckpt.params, src.ckpt.cfg.model, ds.test, a.k, a.exclude_seen),
                             ds.test, phi, a.k));
    if (!kinds.empty()) {
        const baseline_stats stats(ds.train, ds.vocab.size());
        for (auto kind : kinds)
            rows.push_back(
                summarize(baseline_name(kind), stats.rank_all(kind, ds.test, a.k, a.exclude_seen), ds.test, phi, a.k));
    }
    std::ofstream file;
    if (!a.out.empty()) {
        file.open(a.out);
        if (!file) throw data_error("cannot write " + a.out);
    }
    std::ostream& out = a.out.empty() ? std::cout : file;
    for (const auto& r : rows) out << metrics_json(r).dump() << '\n';
    return ok;
}

// ------------------------------------------------------------------ analyze

struct analyze_args {
    std::string checkpoint, bundle, compare, out_dir, last_item = "auto";
    std::size_t k = 20;
};

void write_confusion_csv(const fs::path& p, const confusion_report& rep, const vocabulary& v) {
    std::ofstream out(p);
    if (!out) throw data_error("cannot write " + p.string());
    out << "item_id,count,rank\n";
    for (const auto& r : rep.rows) out << v.decode(r.item) << ',' << r.count << ',' << r.rank << '\n';
}

int cmd_analyze(const analyze_args& a) {
    if (a.k < 1) throw usage_error("--k must be >= 1");
    const auto src = load_compatible(a.checkpoint, a.bundle);
    const auto& ds = src.ds;
    if (ds.test.empty()) throw data_error("bundle has no test sessions");

    item_index last = 0;
    if (a.last_item == "auto") {
        last = most_frequent_last_item(ds.test);
    } else {
        raw_id raw = 0;
        try {
            raw = static_cast<raw_id>(std::stoll(a.last_item));
        } catch (const std::exception&) {
            throw usage_error("--last-item expects an item id or 'auto'");
        }
        if (!ds.vocab.contains(raw)) throw usage_error("--last-item " + a.last_item + " is not in the vocabulary");
        last = ds.vocab.encode(raw);
    }
    const auto cohort = sessions_ending_in(ds.test, last);
    if (cohort.size() < 2)
        throw usage_error("cohort ending in item " + std::to_string(ds.vocab.decode(last)) + " has " +
                          std::to_string(cohort.size()) + " session(s); need at least 2");

    const auto phi = item_popularity(ds.train, ds.vocab.size());
    auto describe = [&](const checkpoint& c, const std::string& path) {
        const auto lists = model_rankings(c.params, c.cfg.model, cohort, a.k);
        const auto rep = confusion_analysis(lists, a.k);
        const auto test_lists = model_rankings(c.params, c.cfg.model, ds.test, a.k);
        return std::pair{rep, json{{"checkpoint", path},
                                   {"distinct_items", rep.distinct_items},
                                   {"cohort_arp", arp(lists, phi, a.k)},
                                   {"test_arp", arp(test_lists, phi, a.k)}}};
    };

    const fs::path dir(a.out_dir);
    fs::create_directories(dir);
    auto [primary, primary_json] = describe(src.ckpt, a.checkpoint);
    write_confusion_csv(dir / "confusion.csv", primary, ds.vocab);
    json summary{{"last_item", ds.vocab.decode(last)}, {"cohort_sessions", cohort.size()}, {"k", a.k},
                 {"model", primary_json}};

    if (!a.compare.empty()) {
        const auto other = load_compatible(a.compare, a.bundle);
        auto [second, second_json] = describe(other.ckpt, a.compare);
        write_confusion_csv(dir / "confusion_compare.csv", second, ds.vocab);
        // side by side on the union of items; absent items get count 0 and no rank
        std::map<item_index, std::pair<const confusion_row*, const confusion_row*>> joined;
        for (const auto& r : primary.rows) joined[r.item].first = &r;
        for (const auto& r : second.rows) joined[r.item].second = &r;
        std::ofstream out(dir / "confusion_side_by_side.csv");
        out << "item_id,count,rank,compare_count,compare_rank\n";
        for (const auto& [item, rows] : joined) {
            out << ds.vocab.decode(item) << ',' << (rows.first ? rows.first->count : 0) << ',';
            if (rows.first) out << rows.first->rank;
            out << ',' << (rows.second ? rows.second->count : 0) << ',';
            if (rows.second) out << rows.second->rank;
            out << '\n';
        }
        summary["compare"] = second_json;
    }
    write_json(dir / "analysis.json", summary);
    std::cout << summary.dump() << '\n';
    return ok;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"SimCGNN session-based recommendation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", version);

    prepare_args pa;
    auto* prep = app.add_subcommand("prepare", "Build a dataset bundle from a click log or the synthetic generator");
    prep->add_option("--input", pa.input, "Click log path");
    prep->add_option("--format", pa.format, "yoochoose, diginetica or custom")->capture_default_str();
    prep->add_option("--delimiter", pa.delimiter, "Field delimiter (custom format)");
    prep->add_flag("--header", pa.header, "Skip a header line (custom format)");
    prep->add_option("--session-col", pa.session_col, "0-based session column (custom format)");
    prep->add_option("--item-col", pa.item_col, "0-based item column (custom format)");
    prep->add_option("--order-col", pa.order_col, "0-based order column, -1 for file order (custom format)");
    prep->add_option("--min-item-count", pa.min_item_count)->capture_default_str();
    prep->add_option("--min-session-len", pa.min_session_len)->capture_default_str();
    prep->add_option("--max-len", pa.max_len, "Keep the last N items of long sessions")->capture_default_str();
    prep->add_option("--test-fraction", pa.test_fraction)->capture_default_str();
    prep->add_option("--test-days", pa.test_days, "Sessions ending in the last N days form the test split");
    prep->add_option("--recent-fraction", pa.recent_fraction, "Keep the most recent fraction of training sessions")
        ->capture_default_str();
    prep->add_flag("--synthetic", pa.synthetic, "Use the synthetic generator instead of --input");
    prep->add_option("--items", pa.items)->capture_default_str();
    prep->add_option("--sessions", pa.sessions)->capture_default_str();
    prep->add_option("--exponent", pa.exponent, "Popularity exponent")->capture_default_str();
    prep->add_option("--collision", pa.collision, "Same-last-item collision rate")->capture_default_str();
    prep->add_option("--repeat", pa.repeat, "Probability of repeating an in-session item")->capture_default_str();
    prep->add_option("--seed", pa.seed)->capture_default_str();
    prep->add_flag("--whole-sessions", pa.whole_sessions, "Skip prefix augmentation of synthetic sessions");
    prep->add_option("--out", pa.out, "Output directory")->required();

    train_args ta;
    auto* tr = app.add_subcommand("train", "Train a model; writes manifest, checkpoint and report to --run-dir");
    tr->add_option("--bundle", ta.bundle, "Dataset bundle");
    tr->add_option("--config", ta.config_path, "Config file");
    tr->add_option("--set", ta.overrides, "Config override key=value (repeatable)");
    tr->add_option("--ablation", ta.ablations, "contrast|norm|pe|weakneg=on|off (repeatable)");
    tr->add_option("--seed", ta.seed, "Seed for all randomness");
    tr->add_option("--from-manifest", ta.from_manifest, "Re-run the training recorded in a manifest");
    tr->add_option("--run-dir", ta.run_dir, "Run directory")->required();

    eval_args ea;
    auto* ev = app.add_subcommand("eval", "Recall@K, MRR@K and ARP on the test split");
    ev->add_option("--checkpoint", ea.checkpoint)->required();
    ev->add_option("--bundle", ea.bundle)->required();
    ev->add_option("--k", ea.k)->capture_default_str();
    ev->add_option("--baselines", ea.baselines, "pop,spop,itemknn")->delimiter(',');
    ev->add_flag("--exclude-seen", ea.exclude_seen, "Drop the session's own items from every ranking");
    ev->add_option("--out", ea.out, "Write JSON lines here instead of stdout");

    analyze_args aa;
    auto* an = app.add_subcommand("analyze", "Same-last-item confusion histogram and ARP");
    an->add_option("--checkpoint", aa.checkpoint)->required();
    an->add_option("--bundle", aa.bundle)->required();
    an->add_option("--last-item", aa.last_item, "Raw item id or 'auto'")->capture_default_str();
    an->add_option("--k", aa.k)->capture_default_str();
    an->add_option("--compare", aa.compare, "Second checkpoint for a side-by-side histogram");
    an->add_option("--out-dir", aa.out_dir, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? ok : usage;
    }

    try {
        if (*prep) return cmd_prepare(pa);
        if (*tr) return cmd_train(ta);
        if (*ev) return cmd_eval(ea);
        if (*an) return cmd_analyze(aa);
    } catch (const usage_error& e) {
        std::cerr << "simcgnn: " << e.what() << '\n';
        return usage;
    } catch (const config_error& e) {
        std::cerr << "simcgnn: config: " << e.what() << '\n';
        return usage;
    } catch (const contract_error& e) {
        std::cerr << "simcgnn: " << e.what() << '\n';
        return usage;
    } catch (const json::exception& e) {
        std::cerr << "simcgnn: manifest: " << e.what() << '\n';
        return data;
    } catch (const std::exception& e) {
        // parse, empty-input, empty-dataset, compatibility and I/O errors
        std::cerr << "simcgnn: " << e.what() << '\n';
        return data;
    }
    return internal;
}

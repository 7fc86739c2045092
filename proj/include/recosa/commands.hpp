#pragma once

// Subcommand implementations behind the CLI binary. Kept free of argument
// parsing so tests can drive them in-process; every output file is written
// atomically, so a failed command never leaves a partial artifact.

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "recosa/config.hpp"
#include "recosa/corpus.hpp"
#include "recosa/heatmap.hpp"
#include "recosa/inference.hpp"
#include "recosa/metrics.hpp"
#include "recosa/model.hpp"
#include "recosa/trainer.hpp"

namespace recosa {

inline std::vector<EncodedSession> encode_corpus(const std::vector<Session>& sessions, const Vocab& vocab,
                                                 const ModelConfig& mc) {
    std::vector<EncodedSession> out;
    out.reserve(sessions.size());
    for (const Session& s : sessions) out.push_back(encode_session(s, vocab, mc.max_turns, mc.max_sent_len));
    return out;
}

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail_runtime("cannot create directory " + dir + ": " + ec.message());
}

inline ReCoSaModel model_from_checkpoint(const Checkpoint& ckpt) {
    ReCoSaModel model(ckpt.config);
    ParamStore& ps = model.params();
    if (static_cast<int>(ckpt.params.size()) != ps.count())
        fail_data("checkpoint holds " + std::to_string(ckpt.params.size()) + " tensors, model expects " +
                  std::to_string(ps.count()));
    for (int i = 0; i < ps.count(); ++i) {
        const auto& [name, arr] = ckpt.params[static_cast<std::size_t>(i)];
        if (name != ps.name(i)) fail_data("checkpoint tensor '" + name + "' does not match '" + ps.name(i) + "'");
        if (!(arr.shape == ps.value(i).shape)) fail_data("checkpoint tensor '" + name + "' has wrong shape");
        ps.value(i) = arr;
    }
    return model;
}

inline Vocab vocab_for_checkpoint(const std::string& vocab_path, const Checkpoint& ckpt) {
    if (vocab_path.empty()) fail_usage("a vocab file is required (--vocab)");
    Vocab vocab = Vocab::load(vocab_path);
    if (vocab.hash() != ckpt.vocab_hash) fail_data("vocab file " + vocab_path + " does not match the checkpoint");
    if (vocab.size() != ckpt.config.V)
        fail_data("vocab size " + std::to_string(vocab.size()) + " does not match checkpoint vocab_size " +
                  std::to_string(ckpt.config.V));
    return vocab;
}

inline std::string join_decoded(const std::vector<int>& ids, const Vocab& vocab) {
    std::string text;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) text += ' ';
        text += vocab.decode(ids[i]);
    }
    return text;
}

inline std::string format_metric_value(double v) { return ModelConfig::format_double(v); }

// ----------------------------------------------------------------- prep

struct PrepArgs {
    std::string config;
    std::vector<std::pair<std::string, std::string>> overrides;
    std::string train_path;
    std::string valid_path;
    std::string labels_path;
    std::string out_dir;
    int vocab_cap = 10000;
};

inline int cmd_prep(const PrepArgs& a, std::ostream& out) {
    if (a.train_path.empty()) fail_usage("prep: --train is required");
    if (a.out_dir.empty()) fail_usage("prep: --out is required");
    RunConfig rc = load_run_config(a.config, a.overrides);

    auto sessions = load_corpus(a.train_path);
    if (!a.labels_path.empty()) load_labels(a.labels_path, sessions);
    Vocab vocab = Vocab::build(sessions, a.vocab_cap);

    rc.model.V = vocab.size();
    rc.model.validate();
    rc.train_data = a.train_path;
    rc.valid_data = a.valid_path;
    rc.labels_file = a.labels_path;
    rc.out_dir = a.out_dir;
    rc.train.ckpt_dir = a.out_dir;
    rc.vocab_file = (std::filesystem::path(a.out_dir) / "vocab.tsv").string();

    // Encoding both splits up front surfaces data problems at prep time.
    auto encoded = encode_corpus(sessions, vocab, rc.model);
    std::size_t valid_count = 0;
    if (!a.valid_path.empty()) {
        auto valid_sessions = load_corpus(a.valid_path);
        encode_corpus(valid_sessions, vocab, rc.model);
        valid_count = valid_sessions.size();
    }

    ensure_dir(a.out_dir);
    write_text_atomic(rc.vocab_file, vocab.serialize());
    write_text_atomic((std::filesystem::path(a.out_dir) / "config.cfg").string(), serialize_run_config(rc));

    long turns = 0;
    for (const EncodedSession& e : encoded) turns += static_cast<long>(e.ctx_ids.size());
    out << "prep: " << sessions.size() << " train sessions (" << turns << " context turns)";
    if (valid_count) out << ", " << valid_count << " valid sessions";
    out << ", vocab " << vocab.size() << "\n";
    return 0;
}

// ----------------------------------------------------------------- train

struct TrainArgs {
    std::string config;
    std::vector<std::pair<std::string, std::string>> overrides;
    std::string resume;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
    RunConfig rc = load_run_config(a.config, a.overrides);
    if (rc.train_data.empty()) fail_usage("train: train_data must be set");
    if (rc.vocab_file.empty()) fail_usage("train: vocab must be set");
    if (rc.out_dir.empty()) fail_usage("train: out_dir must be set");

    Vocab vocab = Vocab::load(rc.vocab_file);
    if (rc.model.V == 0)
        rc.model.V = vocab.size();
    else if (rc.model.V != vocab.size())
        fail_data("config vocab_size " + std::to_string(rc.model.V) + " does not match vocab file size " +
                  std::to_string(vocab.size()));
    rc.model.validate();
    rc.train.validate();

    auto train_enc = encode_corpus(load_corpus(rc.train_data), vocab, rc.model);
    std::vector<EncodedSession> valid_enc;
    if (!rc.valid_data.empty()) valid_enc = encode_corpus(load_corpus(rc.valid_data), vocab, rc.model);

    ensure_dir(rc.out_dir);
    ReCoSaModel model(rc.model);
    Trainer trainer(model, rc.train, vocab.hash());

    std::ostringstream log;
    if (!a.resume.empty()) {
        trainer.restore(load_checkpoint(a.resume));
        const std::string log_path = (std::filesystem::path(rc.out_dir) / "metrics.csv").string();
        std::ifstream prev(log_path, std::ios::binary);
        if (prev) log << prev.rdbuf();  // keep the earlier rows of a resumed run
    }
    write_text_atomic((std::filesystem::path(rc.out_dir) / "config.cfg").string(), serialize_run_config(rc));

    const std::string metrics_path = (std::filesystem::path(rc.out_dir) / "metrics.csv").string();
    TrainResult res;
    try {
        res = trainer.train(train_enc, valid_enc, &log);
    } catch (...) {
        if (!log.str().empty()) write_text_atomic(metrics_path, log.str());
        throw;
    }
    const double train_ppl = trainer.evaluate_ppl(train_enc);
    log << res.steps << ",train,ppl," << format_metric_value(train_ppl) << "\n";
    write_text_atomic(metrics_path, log.str());

    out << "train: " << res.steps << " steps, final loss " << format_metric_value(res.final_train_loss)
        << ", train ppl " << format_metric_value(train_ppl);
    if (!valid_enc.empty()) out << ", best valid ppl " << format_metric_value(res.best_val_ppl);
    out << "\n";
    return 0;
}

// ----------------------------------------------------------------- eval

struct EvalArgs {
    std::string ckpt;
    std::string data;
    std::string vocab;
    std::string out_dir;  // optional: also writes eval.csv there
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
    if (a.ckpt.empty()) fail_usage("eval: --ckpt is required");
    if (a.data.empty()) fail_usage("eval: --data is required");
    Checkpoint ckpt = load_checkpoint(a.ckpt);
    Vocab vocab = vocab_for_checkpoint(a.vocab, ckpt);
    ReCoSaModel model = model_from_checkpoint(ckpt);

    auto enc = encode_corpus(load_corpus(a.data), vocab, model.config());
    const double ppl = perplexity(model, enc);

    std::vector<TokenSeq> hyps, refs;
    for (const EncodedSession& e : enc) {
        GreedyResult g = generate_greedy(model, e.ctx_ids, model.config().max_sent_len);
        TokenSeq h, r;
        for (int id : g.tokens) h.push_back(vocab.decode(id));
        for (int id : e.resp_out)
            if (id != EOS_ID) r.push_back(vocab.decode(id));
        hyps.push_back(std::move(h));
        refs.push_back(std::move(r));
    }

    std::ostringstream csv;
    csv << "# ppl: exp(mean per-token negative log-likelihood), teacher-forced\n";
    csv << "# bleu: corpus-level, n-grams 1..4, add-one smoothing only for zero counts at n>=2, "
           "brevity penalty, x100\n";
    csv << "# distinct-n: distinct n-grams / total n-grams over greedy responses, x100\n";
    csv << "metric,k,value\n";
    csv << "ppl,," << format_metric_value(ppl) << "\n";
    csv << "bleu,," << format_metric_value(bleu(hyps, refs)) << "\n";
    csv << "distinct,1," << format_metric_value(100.0 * distinct_n(hyps, 1)) << "\n";
    csv << "distinct,2," << format_metric_value(100.0 * distinct_n(hyps, 2)) << "\n";

    out << csv.str();
    if (!a.out_dir.empty()) {
        ensure_dir(a.out_dir);
        write_text_atomic((std::filesystem::path(a.out_dir) / "eval.csv").string(), csv.str());
    }
    return 0;
}

// ----------------------------------------------------------------- generate

struct GenerateArgs {
    std::string ckpt;
    std::string data;
    std::string vocab;
    std::string out_dir;
    int max_len = 0;  // 0: model's max_sent_len
};

inline int cmd_generate(const GenerateArgs& a, std::ostream& out) {
    if (a.ckpt.empty()) fail_usage("generate: --ckpt is required");
    if (a.data.empty()) fail_usage("generate: --data is required");
    if (a.out_dir.empty()) fail_usage("generate: --out is required");
    Checkpoint ckpt = load_checkpoint(a.ckpt);
    Vocab vocab = vocab_for_checkpoint(a.vocab, ckpt);
    ReCoSaModel model = model_from_checkpoint(ckpt);
    const int max_len = a.max_len > 0 ? a.max_len : model.config().max_sent_len;

    auto enc = encode_corpus(load_corpus(a.data), vocab, model.config());
    std::string responses;
    std::vector<AttentionRecord> recs;
    for (const EncodedSession& e : enc) {
        GreedyResult g = generate_greedy(model, e.ctx_ids, max_len);
        responses += join_decoded(g.tokens, vocab);
        responses += '\n';
        recs.push_back(std::move(g.record));
    }

    ensure_dir(a.out_dir);
    write_text_atomic((std::filesystem::path(a.out_dir) / "responses.txt").string(), responses);
    write_text_atomic((std::filesystem::path(a.out_dir) / "attention.csv").string(), attention_to_csv(recs));
    out << "generate: " << enc.size() << " responses\n";
    return 0;
}

// ----------------------------------------------------------------- chat

// REPL turn loop. Both sides of the dialogue enter the rolling context
// window, truncated to the newest max_turns sentences; an empty model reply
// is printed but not added (an empty sentence cannot be encoded).
inline void run_chat(const ReCoSaModel& model, const Vocab& vocab, std::istream& in, std::ostream& out,
                     const std::function<void(const std::vector<std::vector<int>>&)>& on_window = {}) {
    const int max_turns = model.config().max_turns;
    std::vector<std::vector<int>> window;
    std::string line;
    out << "> " << std::flush;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line == "/quit") break;
        std::vector<int> ids = vocab.encode_all(line);
        if (ids.empty()) {
            out << "(say something)\n> " << std::flush;
            continue;
        }
        window.push_back(std::move(ids));
        if (static_cast<int>(window.size()) > max_turns)
            window.erase(window.begin(), window.end() - max_turns);
        if (on_window) on_window(window);
        GreedyResult g = generate_greedy(model, window, model.config().max_sent_len);
        out << join_decoded(g.tokens, vocab) << "\n> " << std::flush;
        if (!g.tokens.empty()) {
            window.push_back(g.tokens);
            if (static_cast<int>(window.size()) > max_turns)
                window.erase(window.begin(), window.end() - max_turns);
        }
    }
    out << "\n";
}

struct ChatArgs {
    std::string ckpt;
    std::string vocab;
};

inline int cmd_chat(const ChatArgs& a, std::istream& in, std::ostream& out) {
    if (a.ckpt.empty()) fail_usage("chat: --ckpt is required");
    Checkpoint ckpt = load_checkpoint(a.ckpt);
    Vocab vocab = vocab_for_checkpoint(a.vocab, ckpt);
    ReCoSaModel model = model_from_checkpoint(ckpt);
    run_chat(model, vocab, in, out);
    return 0;
}

// ----------------------------------------------------------------- analyze

struct AnalyzeArgs {
    std::string attention;
    std::string labels;   // optional: enables ranking metrics
    std::string out_dir;
    std::string format = "svg";  // heatmap format: svg or csv-grid
    bool exclude_post = false;   // drop the final context before ranking
    int session = 1;             // 1-based session whose heatmaps are exported
};

namespace detail {

inline std::vector<std::vector<int>> load_label_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail_data("cannot open label file: " + path);
    std::vector<std::vector<int>> all;
    std::string line;
    long lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::vector<int> labels;
        for (const std::string& tok : split_tokens(line)) {
            if (tok != "0" && tok != "1")
                fail_data(path + ": line " + std::to_string(lineno) + ": label must be 0 or 1, got '" +
                          tok + "'");
            labels.push_back(tok == "1" ? 1 : 0);
        }
        if (labels.empty()) fail_data(path + ": line " + std::to_string(lineno) + ": no labels");
        all.push_back(std::move(labels));
    }
    return all;
}

// Mean over steps and heads: one weight per context slot, renormalized.
inline std::vector<double> aggregate_attention(const AttentionRecord& rec) {
    std::vector<double> agg(static_cast<std::size_t>(rec.contexts), 0.0);
    double total = 0.0;
    for (int h = 0; h < rec.heads; ++h) {
        std::vector<double> m = step_mean_scores(rec, h);
        for (int i = 0; i < rec.contexts; ++i) {
            agg[static_cast<std::size_t>(i)] += m[static_cast<std::size_t>(i)];
            total += m[static_cast<std::size_t>(i)];
        }
    }
    if (total <= 0.0) fail_data("attention record carries no weight");
    for (double& x : agg) x /= total;
    return agg;
}

}  // namespace detail

inline int cmd_analyze(const AnalyzeArgs& a, std::ostream& out) {
    if (a.attention.empty()) fail_usage("analyze: --attention is required");
    if (a.out_dir.empty()) fail_usage("analyze: --out is required");
    std::ifstream af(a.attention, std::ios::binary);
    if (!af) fail_data("cannot open attention file: " + a.attention);
    auto recs = parse_attention_csv(af, a.attention);
    if (a.session < 1 || a.session > static_cast<int>(recs.size()))
        fail_usage("analyze: session " + std::to_string(a.session) + " out of range (have " +
                   std::to_string(recs.size()) + ")");

    std::ostringstream csv;
    csv << "metric,k,value\n";
    csv << "sessions,," << recs.size() << "\n";

    // Attention aggregated over heads and steps drives dis2resp.
    double dis_sum = 0.0;
    for (const AttentionRecord& rec : recs) {
        std::vector<double> agg = detail::aggregate_attention(rec);
        if (a.exclude_post) {
            if (agg.size() < 2) fail_data("cannot exclude the post from a single-context session");
            agg.pop_back();
            double s = 0.0;
            for (double x : agg) s += x;
            if (s <= 0.0) fail_data("all attention on the post; nothing to rank");
            for (double& x : agg) x /= s;
        }
        dis_sum += dis2resp(agg);
    }
    csv << "dis2resp,," << format_metric_value(dis_sum / static_cast<double>(recs.size())) << "\n";

    if (!a.labels.empty()) {
        auto labels = detail::load_label_lines(a.labels);
        if (labels.size() != recs.size())
            fail_data(a.labels + ": " + std::to_string(labels.size()) + " label lines for " +
                      std::to_string(recs.size()) + " attention sessions");
        for (std::size_t s = 0; s < recs.size(); ++s)
            if (static_cast<int>(labels[s].size()) != recs[s].contexts)
                fail_data(a.labels + ": line " + std::to_string(s + 1) + ": " +
                          std::to_string(labels[s].size()) + " labels for " +
                          std::to_string(recs[s].contexts) + " contexts");
        if (a.exclude_post)
            for (auto& l : labels) {
                if (l.size() < 2) fail_data("cannot exclude the post from a single-context session");
                l.pop_back();
            }

        const std::vector<int> ks = {1, 3, 5, 10};
        csv << "all_relevant_error_rate,,"
            << format_metric_value(all_relevant_error_rate(labels)) << "\n";

        const int heads = recs.front().heads;
        int best_head = 0;
        double best_p1 = -1.0;
        std::vector<RankingReport> reports;
        for (int h = 0; h < heads; ++h) {
            std::vector<std::vector<double>> scores;
            for (const AttentionRecord& rec : recs) {
                std::vector<double> m = step_mean_scores(rec, h);
                if (a.exclude_post) m.pop_back();
                scores.push_back(std::move(m));
            }
            reports.push_back(relevance_ranking(scores, labels, ks));
            if (reports.back().at_k.at(1).p > best_p1) {
                best_p1 = reports.back().at_k.at(1).p;
                best_head = h;
            }
        }
        for (int h = 0; h < heads; ++h)
            for (int k : ks) {
                const RankingScores& sc = reports[static_cast<std::size_t>(h)].at_k.at(k);
                const std::string tag = "head" + std::to_string(h + 1);
                csv << tag << "_p," << k << "," << format_metric_value(sc.p) << "\n";
                csv << tag << "_r," << k << "," << format_metric_value(sc.r) << "\n";
                csv << tag << "_f1," << k << "," << format_metric_value(sc.f1) << "\n";
            }
        csv << "best_head,," << best_head + 1 << "\n";
        for (int k : ks) {
            const RankingScores& sc = reports[static_cast<std::size_t>(best_head)].at_k.at(k);
            csv << "best_p," << k << "," << format_metric_value(sc.p) << "\n";
            csv << "best_r," << k << "," << format_metric_value(sc.r) << "\n";
            csv << "best_f1," << k << "," << format_metric_value(sc.f1) << "\n";
        }
        csv << "skipped_examples,," << reports.front().skipped << "\n";
    }

    ensure_dir(a.out_dir);
    write_text_atomic((std::filesystem::path(a.out_dir) / "report.csv").string(), csv.str());
    export_heatmaps(recs[static_cast<std::size_t>(a.session - 1)],
                    (std::filesystem::path(a.out_dir) / "heatmap").string(), a.format);
    out << csv.str();
    return 0;
}

}  // namespace recosa

#pragma once

// Quantitative evaluation: perplexity, corpus BLEU, distinct-n, relevance
// ranking P/R/F1@k, attention distance to the response.
//
// Definitions are fixed here and tested against independent oracles:
//   ppl        exp(mean per-token NLL)
//   bleu       corpus-level, n-grams 1..4, brevity penalty, x100; add-one
//              smoothing only for n >= 2 with zero matches, so zero unigram
//              overlap scores exactly 0
//   distinct-n (#distinct n-grams) / (#total n-grams) across the corpus
//   dis2resp   sum_i (N-i+1)/(N+1) * w_i over 1-based context positions

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "recosa/model.hpp"

namespace recosa {

inline double perplexity(const ReCoSaModel& model, const std::vector<EncodedSession>& data) {
    if (data.empty()) fail_data("perplexity: empty dataset");
    double nll = 0.0;
    long tokens = 0;
    for (const EncodedSession& e : data) {
        Tape tape;
        BoundParams bp = bind_params(model.params(), tape, false);
        auto out = model.forward_session(bp, e.ctx_ids, e.resp_in);
        nll += session_nll_sum(out.probs, e.resp_out).scalar();
        tokens += static_cast<long>(e.resp_out.size());
    }
    return std::exp(nll / static_cast<double>(tokens));
}

using TokenSeq = std::vector<std::string>;

inline double bleu(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs) {
    if (hyps.empty()) fail_data("bleu: empty corpus");
    if (hyps.size() != refs.size()) fail_data("bleu: hypothesis/reference count mismatch");

    long hyp_len = 0, ref_len = 0;
    long matched[5] = {0, 0, 0, 0, 0}, total[5] = {0, 0, 0, 0, 0};
    for (std::size_t i = 0; i < hyps.size(); ++i) {
        const TokenSeq& h = hyps[i];
        const TokenSeq& r = refs[i];
        hyp_len += static_cast<long>(h.size());
        ref_len += static_cast<long>(r.size());
        for (int n = 1; n <= 4; ++n) {
            std::map<std::vector<std::string>, long> ref_counts;
            for (std::size_t j = 0; j + static_cast<std::size_t>(n) <= r.size(); ++j)
                ++ref_counts[std::vector<std::string>(r.begin() + static_cast<long>(j),
                                                      r.begin() + static_cast<long>(j) + n)];
            for (std::size_t j = 0; j + static_cast<std::size_t>(n) <= h.size(); ++j) {
                std::vector<std::string> gram(h.begin() + static_cast<long>(j),
                                              h.begin() + static_cast<long>(j) + n);
                ++total[n];
                auto it = ref_counts.find(gram);
                if (it != ref_counts.end() && it->second > 0) {
                    ++matched[n];
                    --it->second;  // clipping
                }
            }
        }
    }
    if (hyp_len == 0) return 0.0;

    double log_sum = 0.0;
    for (int n = 1; n <= 4; ++n) {
        double p;
        if (n == 1) {
            if (matched[1] == 0) return 0.0;  // zero unigram overlap
            p = static_cast<double>(matched[1]) / static_cast<double>(total[1]);
        } else if (matched[n] == 0) {
            p = 1.0 / static_cast<double>(total[n] + 1);  // add-one smoothing
        } else {
            p = static_cast<double>(matched[n]) / static_cast<double>(total[n]);
        }
        log_sum += std::log(p) / 4.0;
    }
    const double bp =
        hyp_len >= ref_len ? 1.0
                           : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
    return 100.0 * bp * std::exp(log_sum);
}

inline double distinct_n(const std::vector<TokenSeq>& hyps, int n) {
    if (n != 1 && n != 2) fail_usage("distinct_n: n must be 1 or 2");
    if (hyps.empty()) fail_data("distinct_n: empty corpus");
    std::map<std::vector<std::string>, long> seen;
    long total = 0;
    for (const TokenSeq& h : hyps)
        for (std::size_t j = 0; j + static_cast<std::size_t>(n) <= h.size(); ++j) {
            ++seen[std::vector<std::string>(h.begin() + static_cast<long>(j),
                                            h.begin() + static_cast<long>(j) + n)];
            ++total;
        }
    if (total == 0)
        fail_data("distinct_n: no " + std::to_string(n) + "-grams (all hypotheses too short)");
    return static_cast<double>(seen.size()) / static_cast<double>(total);
}

struct RankingScores {
    double p = 0.0, r = 0.0, f1 = 0.0;
};

struct RankingReport {
    std::map<int, RankingScores> at_k;  // macro-averaged over used examples
    long used = 0;
    long skipped = 0;  // examples without a positive label
};

// Contexts ranked by score descending, ties resolved to the earlier context;
// k' = min(k, N); macro-average over examples with >= 1 positive label.
inline RankingReport relevance_ranking(const std::vector<std::vector<double>>& scores,
                                       const std::vector<std::vector<int>>& labels,
                                       const std::vector<int>& ks = {1, 3, 5, 10}) {
    if (scores.size() != labels.size()) fail_data("relevance_ranking: scores/labels count mismatch");
    RankingReport rep;
    for (int k : ks) {
        if (k < 1) fail_usage("relevance_ranking: k must be positive");
        rep.at_k[k] = {};
    }
    for (std::size_t e = 0; e < scores.size(); ++e) {
        const auto& s = scores[e];
        const auto& l = labels[e];
        if (s.size() != l.size()) fail_data("relevance_ranking: example " + std::to_string(e + 1) +
                                            ": score/label length mismatch");
        const int n = static_cast<int>(s.size());
        const long positives = std::count(l.begin(), l.end(), 1);
        if (positives == 0) {
            ++rep.skipped;
            continue;
        }
        std::vector<int> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return s[static_cast<std::size_t>(a)] > s[static_cast<std::size_t>(b)];
        });
        for (int k : ks) {
            const int kp = std::min(k, n);
            long hits = 0;
            for (int j = 0; j < kp; ++j) hits += l[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])];
            const double p = static_cast<double>(hits) / static_cast<double>(kp);
            const double r = static_cast<double>(hits) / static_cast<double>(positives);
            const double f1 = (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
            rep.at_k[k].p += p;
            rep.at_k[k].r += r;
            rep.at_k[k].f1 += f1;
        }
        ++rep.used;
    }
    if (rep.used > 0)
        for (auto& [k, sc] : rep.at_k) {
            sc.p /= static_cast<double>(rep.used);
            sc.r /= static_cast<double>(rep.used);
            sc.f1 /= static_cast<double>(rep.used);
        }
    return rep;
}

// w[0] is the earliest context (i = 1), w[N-1] the post (i = N). Larger
// scores mean more attention far from the response.
//
// Computed as num1 / (num1 + num2) with num1 = sum (N-i+1) w_i and
// num2 = sum i w_i, both accumulated in descending coefficient order:
// num1 + num2 = (N+1) sum(w), so the ratio renormalizes implicitly, and
// uniform weights make the two sums bitwise equal, giving exactly 0.5.
inline double dis2resp(const std::vector<double>& w) {
    const int n = static_cast<int>(w.size());
    if (n < 1) fail_data("dis2resp: empty weight vector");
    double sum = 0.0;
    for (double x : w) {
        if (x < 0.0) fail_data("dis2resp: negative weight");
        sum += x;
    }
    if (std::fabs(sum - 1.0) > 1e-6)
        fail_data("dis2resp: weights sum to " + std::to_string(sum) + ", expected 1");
    double num1 = 0.0, num2 = 0.0;
    for (int i = 0; i < n; ++i)
        num1 += static_cast<double>(n - i) * w[static_cast<std::size_t>(i)];
    for (int i = n - 1; i >= 0; --i)
        num2 += static_cast<double>(i + 1) * w[static_cast<std::size_t>(i)];
    return num1 / (num1 + num2);
}

// Fraction of examples in which NOT every context is labeled relevant.
inline double all_relevant_error_rate(const std::vector<std::vector<int>>& labels) {
    if (labels.empty()) fail_data("all_relevant_error_rate: no labelled examples");
    long not_all = 0;
    for (const auto& l : labels) {
        if (l.empty()) fail_data("all_relevant_error_rate: example without labels");
        if (std::count(l.begin(), l.end(), 1) != static_cast<long>(l.size())) ++not_all;
    }
    return static_cast<double>(not_all) / static_cast<double>(labels.size());
}

}  // namespace recosa

#pragma once

// Autoregressive generation and attention-weight extraction.
//
// Greedy decoding re-encodes the generated prefix at every step, so the
// step-t distribution is exactly the teacher-forced distribution given the
// same prefix. Cross-attention weights are recorded at every emitted step,
// including the one that produces EOS.

#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "recosa/model.hpp"

namespace recosa {

struct AttentionRecord {
    int heads = 0;
    int contexts = 0;        // N real context slots
    std::vector<int> tokens; // response ids, EOS excluded
    std::vector<std::vector<std::vector<double>>> w;  // [heads][steps][contexts]

    int steps() const { return heads == 0 ? 0 : static_cast<int>(w[0].size()); }

    // Every row is a distribution over the real contexts.
    void validate() const {
        for (const auto& head : w) {
            for (const auto& row : head) {
                if (static_cast<int>(row.size()) != contexts)
                    fail_runtime("attention record row width does not match context count");
                double s = 0.0;
                for (double x : row) {
                    if (x < 0.0) fail_runtime("negative attention weight");
                    s += x;
                }
                if (std::fabs(s - 1.0) > 1e-9) fail_runtime("attention row does not sum to 1");
            }
        }
    }
};

namespace detail {

inline AttentionRecord record_from(const std::vector<Tensor>& head_weights,
                                   const std::vector<int>& tokens) {
    AttentionRecord rec;
    rec.heads = static_cast<int>(head_weights.size());
    rec.contexts = head_weights.empty() ? 0 : head_weights[0].shape()[1];
    rec.tokens = tokens;
    for (const Tensor& hw : head_weights) {
        const Array& a = hw.value();
        std::vector<std::vector<double>> rows;
        for (int t = 0; t < a.rows(); ++t) {
            std::vector<double> row(static_cast<std::size_t>(a.cols()));
            for (int n = 0; n < a.cols(); ++n) row[static_cast<std::size_t>(n)] = a.at(t, n);
            rows.push_back(std::move(row));
        }
        rec.w.push_back(std::move(rows));
    }
    return rec;
}

}  // namespace detail

// Teacher-forced pass over a known response; returns the full per-head
// cross-attention grid (one query row per prefix position, incl. the row
// that predicts EOS).
inline AttentionRecord extract_attention(const ReCoSaModel& model,
                                         const std::vector<std::vector<int>>& ctx_ids,
                                         const std::vector<int>& response) {
    if (response.empty()) fail_runtime("extract_attention: empty response");
    std::vector<int> resp_in{SOS_ID};
    resp_in.insert(resp_in.end(), response.begin(), response.end());
    Tape tape;
    BoundParams bp = bind_params(model.params(), tape, false);
    auto out = model.forward_session(bp, ctx_ids, resp_in);
    return detail::record_from(out.cross_weights, response);
}

struct GreedyResult {
    std::vector<int> tokens;  // EOS excluded; empty if EOS came first
    AttentionRecord record;   // one step per emitted token, incl. the EOS step
};

// Argmax decoding from SOS; ties resolve to the lowest token id; stops at
// EOS or after max_len tokens.
inline GreedyResult generate_greedy(const ReCoSaModel& model,
                                    const std::vector<std::vector<int>>& ctx_ids, int max_len) {
    if (max_len < 1 || max_len > model.config().max_sent_len)
        fail_usage("max_len must lie in [1, max_sent_len]");
    GreedyResult res;
    res.record.heads = model.config().H;
    res.record.contexts = static_cast<int>(ctx_ids.size());
    res.record.w.assign(static_cast<std::size_t>(res.record.heads), {});
    std::vector<int> prefix{SOS_ID};
    for (int step = 0; step < max_len; ++step) {
        Tape tape;
        BoundParams bp = bind_params(model.params(), tape, false);
        auto out = model.forward_session(bp, ctx_ids, prefix);
        const Array& probs = out.probs.value();
        const int last = probs.rows() - 1;
        int best = 0;
        for (int vtok = 1; vtok < probs.cols(); ++vtok)
            if (probs.at(last, vtok) > probs.at(last, best)) best = vtok;
        for (int h = 0; h < res.record.heads; ++h) {
            const Array& hw = out.cross_weights[static_cast<std::size_t>(h)].value();
            std::vector<double> row(static_cast<std::size_t>(hw.cols()));
            for (int n = 0; n < hw.cols(); ++n) row[static_cast<std::size_t>(n)] = hw.at(last, n);
            res.record.w[static_cast<std::size_t>(h)].push_back(std::move(row));
        }
        if (best == EOS_ID) break;
        res.tokens.push_back(best);
        prefix.push_back(best);
    }
    res.record.tokens = res.tokens;
    return res;
}

// Per-context scalar score for one head: mean over decoding steps.
inline std::vector<double> step_mean_scores(const AttentionRecord& rec, int head) {
    if (head < 0 || head >= rec.heads) fail_usage("head index out of range");
    const auto& rows = rec.w[static_cast<std::size_t>(head)];
    if (rows.empty()) fail_runtime("attention record has no steps");
    std::vector<double> mean(static_cast<std::size_t>(rec.contexts), 0.0);
    for (const auto& row : rows)
        for (int n = 0; n < rec.contexts; ++n) mean[static_cast<std::size_t>(n)] += row[static_cast<std::size_t>(n)];
    for (double& m : mean) m /= static_cast<double>(rows.size());
    return mean;
}

// ------------------------------------------------------------------- CSV

// Single record: "head,step,ctx_index,weight". A series of records gets a
// leading session column; both forms are detected on read. Indices 1-based.
inline std::string attention_to_csv(const std::vector<AttentionRecord>& recs) {
    std::ostringstream out;
    const bool multi = recs.size() != 1;
    out << (multi ? "session,head,step,ctx_index,weight\n" : "head,step,ctx_index,weight\n");
    out.precision(17);
    for (std::size_t s = 0; s < recs.size(); ++s) {
        const AttentionRecord& rec = recs[s];
        for (int h = 0; h < rec.heads; ++h)
            for (int t = 0; t < rec.steps(); ++t)
                for (int n = 0; n < rec.contexts; ++n) {
                    if (multi) out << (s + 1) << ",";
                    out << (h + 1) << "," << (t + 1) << "," << (n + 1) << ","
                        << rec.w[static_cast<std::size_t>(h)][static_cast<std::size_t>(t)][static_cast<std::size_t>(n)]
                        << "\n";
                }
    }
    return out.str();
}

inline std::vector<AttentionRecord> parse_attention_csv(std::istream& in, const std::string& name) {
    std::string line;
    if (!std::getline(in, line)) fail_data(name + ": empty attention CSV");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    bool multi = false;
    if (line == "session,head,step,ctx_index,weight")
        multi = true;
    else if (line != "head,step,ctx_index,weight")
        fail_data(name + ": row 1: unrecognized attention CSV header '" + line + "'");

    struct Cell {
        long session, head, step, ctx;
        double weight;
    };
    std::vector<Cell> cells;
    long s_max = 0, row_no = 1;
    while (std::getline(in, line)) {
        ++row_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ls, field, ',')) fields.push_back(field);
        const std::size_t expect = multi ? 5 : 4;
        if (fields.size() != expect)
            fail_data(name + ": row " + std::to_string(row_no) + ": expected " + std::to_string(expect) +
                      " fields, got " + std::to_string(fields.size()));
        Cell c{1, 0, 0, 0, 0.0};
        try {
            std::size_t f = 0;
            if (multi) c.session = std::stol(fields[f++]);
            c.head = std::stol(fields[f++]);
            c.step = std::stol(fields[f++]);
            c.ctx = std::stol(fields[f++]);
            c.weight = std::stod(fields[f]);
        } catch (const std::exception&) {
            fail_data(name + ": row " + std::to_string(row_no) + ": malformed numeric field");
        }
        if (c.session < 1 || c.head < 1 || c.step < 1 || c.ctx < 1)
            fail_data(name + ": row " + std::to_string(row_no) + ": indices must be positive");
        if (!std::isfinite(c.weight) || c.weight < 0.0)
            fail_data(name + ": row " + std::to_string(row_no) + ": weight must be finite and >= 0");
        s_max = std::max(s_max, c.session);
        cells.push_back(c);
    }
    if (cells.empty()) fail_data(name + ": attention CSV has no data rows");

    std::vector<AttentionRecord> recs(static_cast<std::size_t>(s_max));
    for (const Cell& c : cells) {
        AttentionRecord& r = recs[static_cast<std::size_t>(c.session - 1)];
        r.heads = std::max(r.heads, static_cast<int>(c.head));
        r.contexts = std::max(r.contexts, static_cast<int>(c.ctx));
    }
    const double hole = std::numeric_limits<double>::quiet_NaN();
    std::vector<long> steps_per(static_cast<std::size_t>(s_max), 0);
    for (const Cell& c : cells)
        steps_per[static_cast<std::size_t>(c.session - 1)] =
            std::max(steps_per[static_cast<std::size_t>(c.session - 1)], c.step);
    for (long s = 0; s < s_max; ++s) {
        AttentionRecord& r = recs[static_cast<std::size_t>(s)];
        if (r.heads == 0) fail_data(name + ": session " + std::to_string(s + 1) + " has no rows");
        r.w.assign(static_cast<std::size_t>(r.heads),
                   std::vector<std::vector<double>>(
                       static_cast<std::size_t>(steps_per[static_cast<std::size_t>(s)]),
                       std::vector<double>(static_cast<std::size_t>(r.contexts), hole)));
    }
    for (const Cell& c : cells) {
        AttentionRecord& r = recs[static_cast<std::size_t>(c.session - 1)];
        double& slot = r.w[static_cast<std::size_t>(c.head - 1)][static_cast<std::size_t>(c.step - 1)]
                          [static_cast<std::size_t>(c.ctx - 1)];
        if (!std::isnan(slot)) fail_data(name + ": duplicate cell for head " + std::to_string(c.head) +
                                         " step " + std::to_string(c.step) + " ctx " +
                                         std::to_string(c.ctx));
        slot = c.weight;
    }
    for (std::size_t s = 0; s < recs.size(); ++s)
        for (const auto& head : recs[s].w)
            for (const auto& row : head)
                for (double x : row)
                    if (std::isnan(x))
                        fail_data(name + ": session " + std::to_string(s + 1) +
                                  " is missing cells (grid not dense)");
    return recs;
}

}  // namespace recosa

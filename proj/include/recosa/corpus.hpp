#pragma once

// Dialogue corpus handling: session files, vocabulary, encoding, batching.
//
// Wire format: UTF-8, one session per line, utterances TAB-separated, the
// last field is the response, tokens space-separated. Relevance labels ride
// in a sidecar file with the same line order, space-separated 0/1 flags,
// one per context utterance.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "recosa/common.hpp"

namespace recosa {

inline constexpr int PAD_ID = 0;
inline constexpr int UNK_ID = 1;
inline constexpr int SOS_ID = 2;
inline constexpr int EOS_ID = 3;
inline constexpr int RESERVED_TOKENS = 4;

inline std::vector<std::string> split_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (c == ' ') {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

struct Session {
    std::vector<std::string> contexts;  // the post is the last context
    std::string response;
    std::vector<int> relevance_labels;  // empty when no sidecar was loaded
};

inline std::vector<Session> load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail_data("cannot open corpus file: " + path);
    std::vector<Session> sessions;
    std::string line;
    long lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::vector<std::string> fields;
        std::string field;
        std::istringstream ls(line);
        while (std::getline(ls, field, '\t')) fields.push_back(field);
        if (fields.size() < 2)
            fail_data(path + ": line " + std::to_string(lineno) +
                      ": expected at least 2 TAB-separated utterances, got " +
                      std::to_string(fields.size()));
        Session s;
        for (std::size_t i = 0; i + 1 < fields.size(); ++i) {
            if (split_tokens(fields[i]).empty())
                fail_data(path + ": line " + std::to_string(lineno) + ": empty context utterance " +
                          std::to_string(i + 1));
            s.contexts.push_back(fields[i]);
        }
        if (split_tokens(fields.back()).empty())
            fail_data(path + ": line " + std::to_string(lineno) + ": empty response");
        s.response = fields.back();
        sessions.push_back(std::move(s));
    }
    return sessions;
}

// Sidecar: one line per session, space-separated 0/1, one flag per context.
inline void load_labels(const std::string& path, std::vector<Session>& sessions) {
    std::ifstream in(path);
    if (!in) fail_data("cannot open label file: " + path);
    std::string line;
    long lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (lineno > static_cast<long>(sessions.size()))
            fail_data(path + ": more label lines than sessions");
        std::vector<int> labels;
        for (const std::string& tok : split_tokens(line)) {
            if (tok != "0" && tok != "1")
                fail_data(path + ": line " + std::to_string(lineno) + ": label must be 0 or 1, got '" +
                          tok + "'");
            labels.push_back(tok == "1" ? 1 : 0);
        }
        Session& s = sessions[static_cast<std::size_t>(lineno - 1)];
        if (labels.size() != s.contexts.size())
            fail_data(path + ": line " + std::to_string(lineno) + ": " + std::to_string(labels.size()) +
                      " labels for " + std::to_string(s.contexts.size()) + " contexts");
        s.relevance_labels = std::move(labels);
    }
    if (lineno != static_cast<long>(sessions.size()))
        fail_data(path + ": " + std::to_string(lineno) + " label lines for " +
                  std::to_string(sessions.size()) + " sessions");
}

class Vocab {
public:
    Vocab() : id_to_token_{"<pad>", "<unk>", "<sos>", "<eos>"} {
        for (int i = 0; i < RESERVED_TOKENS; ++i) token_to_id_[id_to_token_[i]] = i;
    }

    // Tokens ranked by frequency, ties broken lexicographically; the top
    // (cap - 4) get ids after the reserved block, everything else encodes
    // to <unk>.
    static Vocab build(const std::vector<Session>& sessions, int cap) {
        if (cap < RESERVED_TOKENS + 1) fail_usage("vocab cap must be at least 5");
        std::map<std::string, long> freq;
        for (const Session& s : sessions) {
            for (const std::string& c : s.contexts)
                for (const std::string& t : split_tokens(c)) ++freq[t];
            for (const std::string& t : split_tokens(s.response)) ++freq[t];
        }
        std::vector<std::pair<std::string, long>> ranked(freq.begin(), freq.end());
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        Vocab v;
        for (const auto& [tok, n] : ranked) {
            if (v.size() >= cap) break;
            if (v.token_to_id_.count(tok)) continue;  // literal reserved spelling
            v.token_to_id_[tok] = v.size();
            v.id_to_token_.push_back(tok);
        }
        return v;
    }

    int size() const { return static_cast<int>(id_to_token_.size()); }

    int encode(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? UNK_ID : it->second;
    }

    std::vector<int> encode_all(const std::string& text) const {
        std::vector<int> ids;
        for (const std::string& t : split_tokens(text)) ids.push_back(encode(t));
        return ids;
    }

    const std::string& decode(int id) const {
        if (id < 0 || id >= size()) fail_runtime("token id out of range: " + std::to_string(id));
        return id_to_token_[static_cast<std::size_t>(id)];
    }

    // Serialized form: "token<TAB>id" lines sorted by id.
    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) fail_data("cannot write vocab file: " + path);
        out << serialize();
        if (!out) fail_data("short write on vocab file: " + path);
    }

    static Vocab load(const std::string& path) {
        std::ifstream in(path);
        if (!in) fail_data("cannot open vocab file: " + path);
        Vocab v;
        std::string line;
        long lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            auto tab = line.find('\t');
            if (tab == std::string::npos)
                fail_data(path + ": line " + std::to_string(lineno) + ": expected token<TAB>id");
            const std::string tok = line.substr(0, tab);
            int id = 0;
            try {
                id = std::stoi(line.substr(tab + 1));
            } catch (const std::exception&) {
                fail_data(path + ": line " + std::to_string(lineno) + ": bad id");
            }
            if (id != lineno - 1)
                fail_data(path + ": line " + std::to_string(lineno) + ": ids must be dense and sorted");
            if (id < RESERVED_TOKENS) {
                if (tok != v.id_to_token_[static_cast<std::size_t>(id)])
                    fail_data(path + ": reserved id " + std::to_string(id) + " renamed to '" + tok + "'");
            } else {
                if (v.token_to_id_.count(tok))
                    fail_data(path + ": duplicate token '" + tok + "'");
                v.token_to_id_[tok] = id;
                v.id_to_token_.push_back(tok);
            }
        }
        if (lineno < RESERVED_TOKENS) fail_data(path + ": vocab file lacks the reserved block");
        return v;
    }

    std::string serialize() const {
        std::ostringstream out;
        for (int i = 0; i < size(); ++i) out << id_to_token_[static_cast<std::size_t>(i)] << '\t' << i << '\n';
        return out.str();
    }

    std::uint64_t hash() const { return fnv1a64(serialize()); }

private:
    std::unordered_map<std::string, int> token_to_id_;
    std::vector<std::string> id_to_token_;
};

struct EncodedSession {
    std::vector<std::vector<int>> ctx_ids;  // N sequences, each <= max_sent_len
    std::vector<int> resp_in;               // SOS, y_1..y_T
    std::vector<int> resp_out;              // y_1..y_T, EOS
    std::vector<int> relevance_labels;      // truncated in step with contexts
};

inline EncodedSession encode_session(const Session& s, const Vocab& v, int max_turns = 15,
                                     int max_sent_len = 50) {
    if (s.contexts.empty()) fail_data("session has no contexts");
    EncodedSession e;
    // Keep the most recent turns so the post always survives truncation.
    std::size_t first = 0;
    if (s.contexts.size() > static_cast<std::size_t>(max_turns))
        first = s.contexts.size() - static_cast<std::size_t>(max_turns);
    for (std::size_t i = first; i < s.contexts.size(); ++i) {
        std::vector<int> ids = v.encode_all(s.contexts[i]);
        if (ids.size() > static_cast<std::size_t>(max_sent_len))
            ids.resize(static_cast<std::size_t>(max_sent_len));
        e.ctx_ids.push_back(std::move(ids));
    }
    if (!s.relevance_labels.empty()) {
        if (s.relevance_labels.size() != s.contexts.size())
            fail_data("relevance labels do not match context count");
        e.relevance_labels.assign(s.relevance_labels.begin() + static_cast<long>(first),
                                  s.relevance_labels.end());
    }
    std::vector<int> resp = v.encode_all(s.response);
    if (resp.size() > static_cast<std::size_t>(max_sent_len - 1))
        resp.resize(static_cast<std::size_t>(max_sent_len - 1));
    if (resp.empty()) fail_data("response empty after truncation");
    e.resp_in.push_back(SOS_ID);
    e.resp_in.insert(e.resp_in.end(), resp.begin(), resp.end());
    e.resp_out = resp;
    e.resp_out.push_back(EOS_ID);
    return e;
}

// Right-padded batch; padding never extends beyond this batch's own maxima.
struct Batch {
    std::vector<std::vector<std::vector<int>>> ctx_tokens;  // [B][N_max][M_max], PAD-filled
    std::vector<std::vector<int>> ctx_len;                  // [B][N_max], 0 on padded slots
    std::vector<int> ctx_count;                             // [B]
    std::vector<std::vector<int>> resp_in;                  // [B][T_max]
    std::vector<std::vector<int>> resp_out;                 // [B][T_max]
    std::vector<std::vector<double>> resp_mask;             // [B][T_max], 1 on real tokens incl. EOS

    int size() const { return static_cast<int>(ctx_count.size()); }
    int n_max() const { return ctx_tokens.empty() ? 0 : static_cast<int>(ctx_tokens[0].size()); }
    int t_max() const { return resp_in.empty() ? 0 : static_cast<int>(resp_in[0].size()); }
};

inline Batch make_batch(const std::vector<EncodedSession>& encoded, int batch_cap) {
    if (encoded.empty()) fail_runtime("make_batch: empty batch");
    if (static_cast<int>(encoded.size()) > batch_cap)
        fail_runtime("make_batch: " + std::to_string(encoded.size()) + " sessions exceed batch size " +
                     std::to_string(batch_cap));
    std::size_t n_max = 0, m_max = 0, t_max = 0;
    for (const EncodedSession& e : encoded) {
        n_max = std::max(n_max, e.ctx_ids.size());
        for (const auto& c : e.ctx_ids) m_max = std::max(m_max, c.size());
        t_max = std::max(t_max, e.resp_in.size());
    }
    Batch b;
    for (const EncodedSession& e : encoded) {
        std::vector<std::vector<int>> ctx(n_max, std::vector<int>(m_max, PAD_ID));
        std::vector<int> lens(n_max, 0);
        for (std::size_t i = 0; i < e.ctx_ids.size(); ++i) {
            lens[i] = static_cast<int>(e.ctx_ids[i].size());
            std::copy(e.ctx_ids[i].begin(), e.ctx_ids[i].end(), ctx[i].begin());
        }
        b.ctx_tokens.push_back(std::move(ctx));
        b.ctx_len.push_back(std::move(lens));
        b.ctx_count.push_back(static_cast<int>(e.ctx_ids.size()));
        std::vector<int> rin(t_max, PAD_ID), rout(t_max, PAD_ID);
        std::vector<double> rmask(t_max, 0.0);
        std::copy(e.resp_in.begin(), e.resp_in.end(), rin.begin());
        std::copy(e.resp_out.begin(), e.resp_out.end(), rout.begin());
        std::fill(rmask.begin(), rmask.begin() + static_cast<long>(e.resp_out.size()), 1.0);
        b.resp_in.push_back(std::move(rin));
        b.resp_out.push_back(std::move(rout));
        b.resp_mask.push_back(std::move(rmask));
    }
    return b;
}

}  // namespace recosa

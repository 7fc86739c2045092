#pragma once

// The full architecture: word-level LSTM context encoder with positioned
// sentence representations and self-attention, causally masked response
// self-attention, context-response cross-attention, softmax word output.
//
// Sessions are processed as ragged 2D tensors: only real context slots and
// real response prefixes are ever materialized, so padding in a Batch is
// transparent by construction (padded cells are never read).

#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "recosa/corpus.hpp"
#include "recosa/layers.hpp"

namespace recosa {

struct ModelConfig {
    int d = 64;   // model width
    int H = 4;    // attention heads; must divide d
    int d_w = 64; // word embedding dim; must equal d (response side adds positions)
    int d_h = 64; // LSTM hidden dim
    int V = 0;    // vocab size, fixed after prep
    int max_turns = 15;
    int max_sent_len = 50;
    bool layernorm = true;
    double dropout = 0.0;
    std::uint64_t seed = 1;

    void validate() const {
        if (d < 1 || H < 1 || d_w < 1 || d_h < 1) fail_usage("model dims must be positive");
        if (d % H != 0)
            fail_usage("model dim " + std::to_string(d) + " not divisible by " + std::to_string(H) +
                       " heads");
        if (d_w != d)
            fail_usage("word embedding dim must equal model dim (response adds positions to words)");
        if (V < RESERVED_TOKENS + 1) fail_usage("vocab size must be at least 5, got " + std::to_string(V));
        if (max_turns < 1) fail_usage("max_turns must be positive");
        if (max_sent_len < 2) fail_usage("max_sent_len must be at least 2");
        if (dropout < 0.0 || dropout >= 1.0) fail_usage("dropout must lie in [0, 1)");
    }

    std::map<std::string, std::string> to_kv() const {
        return {{"d", std::to_string(d)},
                {"heads", std::to_string(H)},
                {"d_w", std::to_string(d_w)},
                {"d_h", std::to_string(d_h)},
                {"vocab_size", std::to_string(V)},
                {"max_turns", std::to_string(max_turns)},
                {"max_sent_len", std::to_string(max_sent_len)},
                {"layernorm", layernorm ? "1" : "0"},
                {"dropout", format_double(dropout)},
                {"seed", std::to_string(seed)}};
    }

    static ModelConfig from_kv(const std::map<std::string, std::string>& kv) {
        ModelConfig c;
        c.d = parse_int(kv, "d", c.d);
        c.H = parse_int(kv, "heads", c.H);
        c.d_w = parse_int(kv, "d_w", c.d);  // defaults follow d when absent
        c.d_h = parse_int(kv, "d_h", c.d);
        c.V = parse_int(kv, "vocab_size", c.V);
        c.max_turns = parse_int(kv, "max_turns", c.max_turns);
        c.max_sent_len = parse_int(kv, "max_sent_len", c.max_sent_len);
        c.layernorm = parse_int(kv, "layernorm", c.layernorm ? 1 : 0) != 0;
        c.dropout = parse_double(kv, "dropout", c.dropout);
        c.seed = parse_u64(kv, "seed", c.seed);
        return c;
    }

    static std::string format_double(double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    }
    static int parse_int(const std::map<std::string, std::string>& kv, const std::string& key, int dflt) {
        auto it = kv.find(key);
        if (it == kv.end()) return dflt;
        try {
            return std::stoi(it->second);
        } catch (const std::exception&) {
            fail_data("bad integer for '" + key + "': " + it->second);
        }
    }
    static double parse_double(const std::map<std::string, std::string>& kv, const std::string& key,
                               double dflt) {
        auto it = kv.find(key);
        if (it == kv.end()) return dflt;
        try {
            return std::stod(it->second);
        } catch (const std::exception&) {
            fail_data("bad number for '" + key + "': " + it->second);
        }
    }
    static std::uint64_t parse_u64(const std::map<std::string, std::string>& kv, const std::string& key,
                                   std::uint64_t dflt) {
        auto it = kv.find(key);
        if (it == kv.end()) return dflt;
        try {
            return std::stoull(it->second);
        } catch (const std::exception&) {
            fail_data("bad integer for '" + key + "': " + it->second);
        }
    }
};

inline Tensor session_nll_sum(Tensor probs, const std::vector<int>& targets);

class ReCoSaModel {
public:
    explicit ReCoSaModel(ModelConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(cfg_.seed);
        word_emb_ = ps_.add("word_emb", uniform_init({cfg_.V, cfg_.d_w}, rng, 0.08));
        lstm_ = LSTMParams(ps_, "lstm", cfg_.d_w, cfg_.d_h, rng);
        ctx_pos_ = ContextPositionParams(ps_, "ctx_pos", cfg_.max_turns, cfg_.d_h, cfg_.d, rng);
        resp_pos_ = PositionTable(ps_, "resp_pos", cfg_.max_sent_len + 1, cfg_.d, rng);
        ctx_self_ = MultiHeadParams(ps_, "ctx_self", cfg_.d, cfg_.H, rng);
        ctx_ffn_ = FFNParams(ps_, "ctx_ffn", cfg_.d, 2 * cfg_.d, rng);
        ln_ctx_att_ = LayerNormParams(ps_, "ln_ctx_att", cfg_.d);
        ln_ctx_ffn_ = LayerNormParams(ps_, "ln_ctx_ffn", cfg_.d);
        resp_self_ = MultiHeadParams(ps_, "resp_self", cfg_.d, cfg_.H, rng);
        ln_resp_att_ = LayerNormParams(ps_, "ln_resp_att", cfg_.d);
        cross_ = MultiHeadParams(ps_, "cross", cfg_.d, cfg_.H, rng);
        dec_ffn_ = FFNParams(ps_, "dec_ffn", cfg_.d, 2 * cfg_.d, rng);
        ln_dec_att_ = LayerNormParams(ps_, "ln_dec_att", cfg_.d);
        ln_dec_ffn_ = LayerNormParams(ps_, "ln_dec_ffn", cfg_.d);
        out_proj_ = proj_affine(ps_, "out", cfg_.d, cfg_.V, rng);
    }

    const ModelConfig& config() const { return cfg_; }

    // Adopt a checkpoint's config wholesale; the architecture must agree
    // with what this model was constructed with.
    void adopt_config(const ModelConfig& c) {
        c.validate();
        if (c.d != cfg_.d || c.H != cfg_.H || c.d_w != cfg_.d_w || c.d_h != cfg_.d_h ||
            c.V != cfg_.V || c.max_turns != cfg_.max_turns || c.max_sent_len != cfg_.max_sent_len)
            fail_data("checkpoint architecture does not match the constructed model");
        cfg_ = c;
    }

    ParamStore& params() { return ps_; }
    const ParamStore& params() const { return ps_; }
    const Affine& out_proj() const { return out_proj_; }

    // Contexts (real slots only) -> O_s^f [N, d].
    Tensor encode_contexts(const BoundParams& bp, const std::vector<std::vector<int>>& ctx_ids,
                           Rng* drop = nullptr) const {
        const int N = static_cast<int>(ctx_ids.size());
        if (N < 1) fail_runtime("encode_contexts: no contexts");
        if (N > cfg_.max_turns) fail_runtime("encode_contexts: more contexts than max_turns");
        std::vector<Tensor> reps;
        for (const std::vector<int>& sent : ctx_ids) {
            Tensor words = embed_rows(bp[word_emb_], sent);
            reps.push_back(lstm_encode(bp, lstm_, words));
        }
        Tensor h = N == 1 ? reps[0] : concat_rows(reps);
        Tensor x = maybe_drop(add_context_positions(bp, ctx_pos_, h), drop);
        MultiHeadOut att = multi_head(bp, ctx_self_, x, x, x);
        Tensor y = add(x, maybe_drop(att.output, drop));
        if (cfg_.layernorm) y = ln_ctx_att_.apply(bp, y);
        Tensor o = feed_forward(bp, ctx_ffn_, y);
        if (cfg_.layernorm) o = ln_ctx_ffn_.apply(bp, o);
        return o;
    }

    // Response prefix (SOS, y_1, ...) -> O_r [T, d]; step t sees only <= t.
    Tensor encode_response(const BoundParams& bp, const std::vector<int>& resp_in,
                           Rng* drop = nullptr) const {
        const int T = static_cast<int>(resp_in.size());
        if (T < 1) fail_runtime("encode_response: empty response prefix");
        Tensor emb = embed_rows(bp[word_emb_], resp_in);
        Tensor x = maybe_drop(add(emb, resp_pos_.first(bp, T)), drop);
        Array mask = causal_mask(T);
        MultiHeadOut att = multi_head(bp, resp_self_, x, x, x, &mask);
        Tensor y = add(x, maybe_drop(att.output, drop));
        if (cfg_.layernorm) y = ln_resp_att_.apply(bp, y);
        return y;
    }

    struct CrossOut {
        Tensor o_d_f;                 // [T, d]
        std::vector<Tensor> weights;  // H x [T, N]
    };

    // Query = O_r, key/value = O_s^f.
    CrossOut cross_attend(const BoundParams& bp, Tensor o_s_f, Tensor o_r, Rng* drop = nullptr) const {
        MultiHeadOut att = multi_head(bp, cross_, o_r, o_s_f, o_s_f);
        Tensor y = add(o_r, maybe_drop(att.output, drop));
        if (cfg_.layernorm) y = ln_dec_att_.apply(bp, y);
        Tensor o = feed_forward(bp, dec_ffn_, y);
        if (cfg_.layernorm) o = ln_dec_ffn_.apply(bp, o);
        return {o, att.head_weights};
    }

    // [T, d] -> per-step vocabulary distribution [T, V].
    Tensor word_distribution(const BoundParams& bp, Tensor o_d_f) const {
        return softmax(out_proj_.apply(bp, o_d_f), 1);
    }

    struct SessionOut {
        Tensor probs;                       // [T, V]
        std::vector<Tensor> cross_weights;  // H x [T, N]
    };

    SessionOut forward_session(const BoundParams& bp, const std::vector<std::vector<int>>& ctx_ids,
                               const std::vector<int>& resp_in, Rng* drop = nullptr) const {
        Tensor o_s_f = encode_contexts(bp, ctx_ids, drop);
        Tensor o_r = encode_response(bp, resp_in, drop);
        CrossOut cx = cross_attend(bp, o_s_f, o_r, drop);
        return {word_distribution(bp, cx.o_d_f), cx.weights};
    }

    // Mean NLL per real target token over the whole batch.
    Tensor batch_nll(const BoundParams& bp, const Batch& batch, Rng* drop = nullptr) const {
        Tensor total;
        long tokens = 0;
        bool first = true;
        for (int i = 0; i < batch.size(); ++i) {
            auto [ctx, resp_in, resp_out] = real_views(batch, i);
            SessionOut out = forward_session(bp, ctx, resp_in, drop);
            Tensor s = session_nll_sum(out.probs, resp_out);
            total = first ? s : add(total, s);
            first = false;
            tokens += static_cast<long>(resp_out.size());
        }
        if (tokens == 0) fail_runtime("batch_nll: no unmasked target tokens");
        return scale(total, 1.0 / static_cast<double>(tokens));
    }

    // Real (unpadded) views into a batch row.
    static std::tuple<std::vector<std::vector<int>>, std::vector<int>, std::vector<int>> real_views(
        const Batch& batch, int i) {
        const auto iu = static_cast<std::size_t>(i);
        std::vector<std::vector<int>> ctx;
        for (int s = 0; s < batch.ctx_count[iu]; ++s) {
            const auto su = static_cast<std::size_t>(s);
            const int len = batch.ctx_len[iu][su];
            ctx.emplace_back(batch.ctx_tokens[iu][su].begin(), batch.ctx_tokens[iu][su].begin() + len);
        }
        long T = 0;
        for (double m : batch.resp_mask[iu]) T += (m != 0.0) ? 1 : 0;
        std::vector<int> resp_in(batch.resp_in[iu].begin(), batch.resp_in[iu].begin() + T);
        std::vector<int> resp_out(batch.resp_out[iu].begin(), batch.resp_out[iu].begin() + T);
        return {std::move(ctx), std::move(resp_in), std::move(resp_out)};
    }

private:
    // Dropout only when a training rng is supplied; eval passes nullptr.
    Tensor maybe_drop(Tensor t, Rng* drop_rng) const {
        if (drop_rng == nullptr || cfg_.dropout <= 0.0) return t;
        return dropout(t, cfg_.dropout, *drop_rng);
    }

    ModelConfig cfg_;
    ParamStore ps_;
    int word_emb_ = -1;
    LSTMParams lstm_;
    ContextPositionParams ctx_pos_;
    PositionTable resp_pos_;
    MultiHeadParams ctx_self_, resp_self_, cross_;
    FFNParams ctx_ffn_, dec_ffn_;
    LayerNormParams ln_ctx_att_, ln_ctx_ffn_, ln_resp_att_, ln_dec_att_, ln_dec_ffn_;
    Affine out_proj_;
};

// Sum of -log prob(target) over the steps of one session.
inline Tensor session_nll_sum(Tensor probs, const std::vector<int>& targets) {
    if (static_cast<int>(targets.size()) != probs.shape()[0])
        fail_runtime("session_nll_sum: target count does not match steps");
    Tensor picked = pick_cols(probs, targets);
    return scale(sum(log(picked)), -1.0);
}

}  // namespace recosa

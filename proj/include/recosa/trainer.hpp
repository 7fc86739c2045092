#pragma once

// Optimization loop, checkpointing, metric logging.
//
// Determinism contract: (seed, config, data) fully determine every logged
// number and every checkpoint byte. Epoch shuffles and per-step dropout
// streams are derived statelessly from (seed, epoch) and (seed, step), so a
// resumed run continues bit-exactly where the original left off.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "recosa/adam.hpp"
#include "recosa/model.hpp"

namespace recosa {

struct TrainConfig {
    int batch_size = 32;
    double lr = 1e-4;
    long max_steps = 0;  // 0: no step bound (epochs must then be set)
    int epochs = 0;      // 0: no epoch bound
    long eval_interval = 100;
    std::string ckpt_dir;
    std::uint64_t seed = 1;
    double clip_norm = 5.0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    void validate() const {
        if (batch_size < 1) fail_usage("batch_size must be positive");
        if (lr < 0.0) fail_usage("lr must be non-negative");
        if (max_steps < 0 || epochs < 0) fail_usage("step/epoch bounds must be non-negative");
        if (max_steps == 0 && epochs == 0) fail_usage("set max_steps or epochs to bound training");
        if (eval_interval < 1) fail_usage("eval_interval must be positive");
        if (clip_norm <= 0.0) fail_usage("clip_norm must be positive");
    }

    AdamHyper adam() const {
        AdamHyper h;
        h.lr = lr;
        h.beta1 = beta1;
        h.beta2 = beta2;
        h.eps = eps;
        return h;
    }
};

// ------------------------------------------------------------- checkpoints

inline constexpr const char* CKPT_MAGIC = "RECOSA-CKPT v1";

struct Checkpoint {
    ModelConfig config;
    long step = 0;
    std::uint64_t vocab_hash = 0;
    std::vector<std::pair<std::string, Array>> params;
    std::vector<AdamState> adam;  // parallel to params
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "raw f64 payloads assume little-endian");

inline void write_array(std::ostream& out, const std::string& name, const Array& a) {
    out << "tensor " << name << " " << a.shape.size();
    for (int d : a.shape) out << " " << d;
    out << "\n";
    out.write(reinterpret_cast<const char*>(a.data.data()),
              static_cast<std::streamsize>(a.data.size() * sizeof(double)));
}

inline Array read_array(std::istream& in, const std::string& path, std::string* name_out) {
    std::string line;
    if (!std::getline(in, line)) fail_data(path + ": truncated checkpoint (missing tensor header)");
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag != "tensor") fail_data(path + ": expected tensor header, got '" + line + "'");
    std::string name;
    int rank = -1;
    ls >> name >> rank;
    if (name.empty() || rank < 0 || rank > 8) fail_data(path + ": malformed tensor header '" + line + "'");
    Shape shape;
    for (int i = 0; i < rank; ++i) {
        int d = -1;
        ls >> d;
        if (d < 0) fail_data(path + ": malformed tensor dims in '" + line + "'");
        shape.push_back(d);
    }
    Array a(shape);
    in.read(reinterpret_cast<char*>(a.data.data()),
            static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(a.data.size() * sizeof(double)))
        fail_data(path + ": truncated payload for tensor '" + name + "'");
    if (name_out) *name_out = name;
    return a;
}

}  // namespace detail

// Atomic: writes a temp file in the same directory, then renames over path.
inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    namespace fs = std::filesystem;
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) fail_data("cannot write checkpoint: " + tmp);
        out << CKPT_MAGIC << "\n";
        out << "step " << ckpt.step << "\n";
        out << "vocab_hash " << std::hex << ckpt.vocab_hash << std::dec << "\n";
        out << "config_begin\n";
        for (const auto& [k, v] : ckpt.config.to_kv()) out << k << " " << v << "\n";
        out << "config_end\n";
        out << "tensors " << ckpt.params.size() << "\n";
        for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
            const auto& [name, value] = ckpt.params[i];
            detail::write_array(out, "param/" + name, value);
            detail::write_array(out, "adam_m/" + name, ckpt.adam[i].m);
            detail::write_array(out, "adam_v/" + name, ckpt.adam[i].v);
            out << "adam_t " << ckpt.adam[i].t << "\n";
        }
        if (!out) fail_data("short write on checkpoint: " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) fail_data("cannot move checkpoint into place: " + path + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail_data("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(in, line) || line != CKPT_MAGIC)
        fail_data(path + ": not a checkpoint of this format version");
    Checkpoint ckpt;
    if (!std::getline(in, line) || line.rfind("step ", 0) != 0) fail_data(path + ": missing step");
    ckpt.step = std::stol(line.substr(5));
    if (!std::getline(in, line) || line.rfind("vocab_hash ", 0) != 0)
        fail_data(path + ": missing vocab hash");
    ckpt.vocab_hash = std::stoull(line.substr(11), nullptr, 16);
    if (!std::getline(in, line) || line != "config_begin") fail_data(path + ": missing config block");
    std::map<std::string, std::string> kv;
    while (std::getline(in, line) && line != "config_end") {
        auto sp = line.find(' ');
        if (sp == std::string::npos) fail_data(path + ": malformed config line '" + line + "'");
        kv[line.substr(0, sp)] = line.substr(sp + 1);
    }
    if (line != "config_end") fail_data(path + ": unterminated config block");
    ckpt.config = ModelConfig::from_kv(kv);
    if (!std::getline(in, line) || line.rfind("tensors ", 0) != 0)
        fail_data(path + ": missing tensor count");
    const long n = std::stol(line.substr(8));
    for (long i = 0; i < n; ++i) {
        std::string pname, mname, vname;
        Array p = detail::read_array(in, path, &pname);
        Array m = detail::read_array(in, path, &mname);
        Array v = detail::read_array(in, path, &vname);
        if (pname.rfind("param/", 0) != 0 || mname.rfind("adam_m/", 0) != 0 ||
            vname.rfind("adam_v/", 0) != 0)
            fail_data(path + ": tensor records out of order near '" + pname + "'");
        const std::string base = pname.substr(6);
        if (mname.substr(7) != base || vname.substr(7) != base)
            fail_data(path + ": optimizer tensors do not match parameter '" + base + "'");
        if (!std::getline(in, line) || line.rfind("adam_t ", 0) != 0)
            fail_data(path + ": missing adam_t for '" + base + "'");
        AdamState st(p.shape);
        st.m = std::move(m);
        st.v = std::move(v);
        st.t = std::stol(line.substr(7));
        if (st.m.shape != p.shape || st.v.shape != p.shape)
            fail_data(path + ": optimizer shape mismatch for '" + base + "'");
        ckpt.params.emplace_back(base, std::move(p));
        ckpt.adam.push_back(std::move(st));
    }
    if (in.peek() != std::char_traits<char>::eof()) fail_data(path + ": trailing bytes after payload");
    return ckpt;
}

// ------------------------------------------------------------------ trainer

struct TrainResult {
    long steps = 0;
    double final_train_loss = 0.0;
    double best_val_ppl = std::numeric_limits<double>::infinity();
    std::vector<double> step_losses;  // one entry per optimizer step
};

class Trainer {
public:
    Trainer(ReCoSaModel& model, TrainConfig cfg, std::uint64_t vocab_hash)
        : model_(model), cfg_(cfg), vocab_hash_(vocab_hash) {
        cfg_.validate();
        for (int i = 0; i < model_.params().count(); ++i)
            adam_.emplace_back(model_.params().value(i).shape);
    }

    long step() const { return step_; }
    const std::vector<AdamState>& adam_states() const { return adam_; }

    Checkpoint snapshot() const {
        Checkpoint ckpt;
        ckpt.config = model_.config();
        ckpt.step = step_;
        ckpt.vocab_hash = vocab_hash_;
        const ParamStore& ps = model_.params();
        for (int i = 0; i < ps.count(); ++i) ckpt.params.emplace_back(ps.name(i), ps.value(i));
        ckpt.adam = adam_;
        return ckpt;
    }

    // Load config, parameters and optimizer state; training continues from
    // ckpt.step as if never interrupted.
    void restore(const Checkpoint& ckpt) {
        if (ckpt.vocab_hash != vocab_hash_)
            fail_data("checkpoint vocabulary does not match the current vocab (hash mismatch)");
        model_.adopt_config(ckpt.config);
        ParamStore& ps = model_.params();
        if (static_cast<int>(ckpt.params.size()) != ps.count())
            fail_data("checkpoint holds " + std::to_string(ckpt.params.size()) + " tensors, model has " +
                      std::to_string(ps.count()));
        for (int i = 0; i < ps.count(); ++i) {
            const auto& [name, value] = ckpt.params[static_cast<std::size_t>(i)];
            if (name != ps.name(i))
                fail_data("checkpoint tensor '" + name + "' does not match model tensor '" + ps.name(i) +
                          "'");
            if (value.shape != ps.value(i).shape)
                fail_data("checkpoint shape mismatch for '" + name + "'");
            ps.value(i) = value;
        }
        adam_ = ckpt.adam;
        step_ = ckpt.step;
    }

    // One forward/backward/clip/update over the batch; returns the loss.
    double train_step(const Batch& batch) {
        double loss_value = 0.0;
        try {
            Tape tape;
            BoundParams bp = bind_params(model_.params(), tape, true);
            Rng drop_rng(mix_seed(mix_seed(cfg_.seed, 0xd20u), static_cast<std::uint64_t>(step_)));
            Rng* drop = model_.config().dropout > 0.0 ? &drop_rng : nullptr;
            Tensor loss = model_.batch_nll(bp, batch, drop);
            loss_value = loss.scalar();
            tape.backward(loss);
            std::vector<Array> grads;
            for (int i = 0; i < model_.params().count(); ++i) grads.push_back(tape.grad(bp[i]));
            clip_global_norm(grads, cfg_.clip_norm);
            const AdamHyper hyper = cfg_.adam();
            for (int i = 0; i < model_.params().count(); ++i)
                adam_step(model_.params().value(i), grads[static_cast<std::size_t>(i)],
                          adam_[static_cast<std::size_t>(i)], hyper, model_.params().name(i));
        } catch (const Error& e) {
            fail_runtime("training aborted at step " + std::to_string(step_ + 1) + ": " + e.what() +
                         " (last saved checkpoint is intact)");
        }
        ++step_;
        return loss_value;
    }

    // exp(mean per-token NLL) over a dataset, parameters frozen.
    double evaluate_ppl(const std::vector<EncodedSession>& data) const {
        if (data.empty()) fail_data("evaluate_ppl: empty dataset");
        double nll = 0.0;
        long tokens = 0;
        for (const EncodedSession& e : data) {
            Tape tape;
            BoundParams bp = bind_params(model_.params(), tape, false);
            auto out = model_.forward_session(bp, e.ctx_ids, e.resp_in);
            nll += session_nll_sum(out.probs, e.resp_out).scalar();
            tokens += static_cast<long>(e.resp_out.size());
        }
        return std::exp(nll / static_cast<double>(tokens));
    }

    // Full training run. Logs CSV rows "step,split,metric,value" when log is
    // given; writes last.ckpt (+ best.ckpt on validation improvement) when
    // cfg.ckpt_dir is set.
    TrainResult train(const std::vector<EncodedSession>& train_data,
                      const std::vector<EncodedSession>& valid_data, std::ostream* log = nullptr) {
        if (train_data.empty()) fail_data("train: empty training data");
        if (log && step_ == 0) *log << "step,split,metric,value\n";
        TrainResult res;
        const long n = static_cast<long>(train_data.size());
        const long batches_per_epoch = (n + cfg_.batch_size - 1) / cfg_.batch_size;

        auto epoch_order = [&](long epoch) {
            std::vector<long> idx(static_cast<std::size_t>(n));
            for (long i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
            Rng rng(mix_seed(cfg_.seed, static_cast<std::uint64_t>(epoch)));
            // Fisher-Yates
            for (long i = n - 1; i > 0; --i) {
                const long j = static_cast<long>(rng.next_below(static_cast<std::uint64_t>(i + 1)));
                std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
            }
            return idx;
        };

        auto done = [&]() {
            if (cfg_.max_steps > 0 && step_ >= cfg_.max_steps) return true;
            if (cfg_.epochs > 0 && step_ >= static_cast<long>(cfg_.epochs) * batches_per_epoch)
                return true;
            return false;
        };

        double last_loss = 0.0;
        while (!done()) {
            const long epoch = step_ / batches_per_epoch;
            const long offset = step_ % batches_per_epoch;
            std::vector<long> order = epoch_order(epoch);
            for (long b = offset; b < batches_per_epoch && !done(); ++b) {
                std::vector<EncodedSession> chunk;
                for (long i = b * cfg_.batch_size; i < std::min(n, (b + 1) * cfg_.batch_size); ++i)
                    chunk.push_back(train_data[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
                last_loss = train_step(make_batch(chunk, cfg_.batch_size));
                res.step_losses.push_back(last_loss);
                const bool at_interval = step_ % cfg_.eval_interval == 0;
                if (at_interval || done()) {
                    if (log) log_row(*log, step_, "train", "loss", last_loss);
                    if (!valid_data.empty()) {
                        const double ppl = evaluate_ppl(valid_data);
                        if (log) log_row(*log, step_, "valid", "ppl", ppl);
                        if (!cfg_.ckpt_dir.empty() && ppl < res.best_val_ppl)
                            save_checkpoint(snapshot(), ckpt_path("best.ckpt"));
                        res.best_val_ppl = std::min(res.best_val_ppl, ppl);
                    }
                    if (!cfg_.ckpt_dir.empty()) save_checkpoint(snapshot(), ckpt_path("last.ckpt"));
                }
            }
        }
        res.steps = step_;
        res.final_train_loss = last_loss;
        return res;
    }

    std::string ckpt_path(const std::string& name) const {
        return (std::filesystem::path(cfg_.ckpt_dir) / name).string();
    }

private:
    static void log_row(std::ostream& log, long step, const char* split, const char* metric,
                        double value) {
        log << step << "," << split << "," << metric << "," << std::setprecision(17) << value << "\n";
        log.flush();
    }

    ReCoSaModel& model_;
    TrainConfig cfg_;
    std::uint64_t vocab_hash_ = 0;
    std::vector<AdamState> adam_;
    long step_ = 0;
};

}  // namespace recosa

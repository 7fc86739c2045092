#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "recosa/commands.hpp"
#include "support/tmpdir.hpp"

using namespace recosa;
using testsupport::TmpDir;

namespace {

const char* kMicroCorpus =
    "q0 x\tt a\te w0\n"
    "q1 x\tt b\te w1\n"
    "q2 x\tt a\te w2\n"
    "q3 x\tt b\te w3\n";

const char* kMicroConfig =
    "d = 8\n"
    "heads = 2\n"
    "max_turns = 4\n"
    "max_sent_len = 6\n"
    "seed = 5\n"
    "batch_size = 2\n"
    "lr = 0.01\n"
    "max_steps = 6\n"
    "eval_interval = 3\n";

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// prep + train on the micro corpus; returns the run directory.
std::string train_micro(TmpDir& tmp, const std::string& run_name,
                        const std::vector<std::pair<std::string, std::string>>& extra = {}) {
    PrepArgs prep;
    prep.train_path = tmp.file("train.txt", kMicroCorpus);
    prep.valid_path = prep.train_path;
    prep.out_dir = tmp.path(run_name);
    prep.config = tmp.file("base.cfg", kMicroConfig);
    std::ostringstream out;
    REQUIRE(cmd_prep(prep, out) == 0);

    TrainArgs train;
    train.config = tmp.path(run_name) + "/config.cfg";
    train.overrides = extra;
    std::ostringstream tout;
    REQUIRE(cmd_train(train, tout) == 0);
    return tmp.path(run_name);
}

}  // namespace

TEST_CASE("prep writes a loadable vocab and a complete config echo") {
    TmpDir tmp;
    PrepArgs a;
    a.train_path = tmp.file("train.txt", kMicroCorpus);
    a.labels_path = tmp.file("labels.txt", "1 0\n0 1\n1 0\n0 1\n");
    a.out_dir = tmp.path("run");
    a.config = tmp.file("base.cfg", kMicroConfig);
    std::ostringstream out;
    REQUIRE(cmd_prep(a, out) == 0);
    REQUIRE(out.str().find("4 train sessions") != std::string::npos);
    REQUIRE(out.str().find("vocab 17") != std::string::npos);

    Vocab vocab = Vocab::load(tmp.path("run") + "/vocab.tsv");
    REQUIRE(vocab.size() == 17);

    RunConfig rc = load_run_config(tmp.path("run") + "/config.cfg");
    REQUIRE(rc.model.V == 17);
    REQUIRE(rc.model.d == 8);
    REQUIRE(rc.train_data == a.train_path);
    REQUIRE(rc.labels_file == a.labels_path);
    REQUIRE(rc.vocab_file == tmp.path("run") + "/vocab.tsv");
    REQUIRE(rc.out_dir == tmp.path("run"));
}

TEST_CASE("prep rejects missing arguments and bad data") {
    TmpDir tmp;
    std::ostringstream out;
    PrepArgs a;
    a.out_dir = tmp.path("run");
    try {
        cmd_prep(a, out);
        FAIL("expected error");
    } catch (const Error& e) {
        REQUIRE(e.kind() == ErrorKind::usage);
    }
    a.train_path = tmp.file("bad.txt", "only_one_field\n");
    try {
        cmd_prep(a, out);
        FAIL("expected error");
    } catch (const Error& e) {
        REQUIRE(e.kind() == ErrorKind::data);
    }
    a.train_path = tmp.file("train.txt", kMicroCorpus);
    a.labels_path = tmp.file("short.txt", "1 0\n");
    REQUIRE_THROWS_AS(cmd_prep(a, out), Error);
}

TEST_CASE("train leaves checkpoints, a metric log, and a config echo") {
    TmpDir tmp;
    const std::string run = train_micro(tmp, "run");
    REQUIRE(std::ifstream(run + "/last.ckpt").good());
    REQUIRE(std::ifstream(run + "/best.ckpt").good());
    const std::string log = slurp(run + "/metrics.csv");
    REQUIRE(log.rfind("step,split,metric,value\n", 0) == 0);
    REQUIRE(log.find("3,train,loss,") != std::string::npos);
    REQUIRE(log.find("6,valid,ppl,") != std::string::npos);
    REQUIRE(log.find("6,train,ppl,") != std::string::npos);

    Checkpoint ckpt = load_checkpoint(run + "/last.ckpt");
    REQUIRE(ckpt.step == 6);
    REQUIRE(ckpt.config.V == 17);
}

TEST_CASE("the echoed config reproduces a run bit-exactly") {
    TmpDir tmp;
    const std::string run1 = train_micro(tmp, "run1");

    TrainArgs again;
    again.config = run1 + "/config.cfg";
    again.overrides = {{"out_dir", tmp.path("run2")}};
    std::ostringstream out;
    REQUIRE(cmd_train(again, out) == 0);

    const bool same_ckpt = slurp(run1 + "/last.ckpt") == slurp(tmp.path("run2") + "/last.ckpt");
    REQUIRE(same_ckpt);
}

TEST_CASE("train resumes from a checkpoint to the same bytes") {
    TmpDir tmp;
    const std::string full = train_micro(tmp, "full");

    const std::string split = train_micro(tmp, "split", {{"max_steps", "3"}});
    TrainArgs second;
    second.config = split + "/config.cfg";
    second.overrides = {{"max_steps", "6"}};
    second.resume = split + "/last.ckpt";
    std::ostringstream out;
    REQUIRE(cmd_train(second, out) == 0);

    const bool same = slurp(full + "/last.ckpt") == slurp(split + "/last.ckpt");
    REQUIRE(same);
    // the resumed log keeps the first leg's rows and exactly one header
    const std::string log = slurp(split + "/metrics.csv");
    REQUIRE(log.rfind("step,split,metric,value\n", 0) == 0);
    REQUIRE(log.find("step,split,metric,value\n", 1) == std::string::npos);
    REQUIRE(log.find("3,train,loss,") != std::string::npos);
    REQUIRE(log.find("6,train,ppl,") != std::string::npos);
}

TEST_CASE("eval prints the metric quartet and mirrors it to disk") {
    TmpDir tmp;
    const std::string run = train_micro(tmp, "run");
    EvalArgs a;
    a.ckpt = run + "/last.ckpt";
    a.data = tmp.path("train.txt");
    a.vocab = run + "/vocab.tsv";
    a.out_dir = tmp.path("evaldir");
    std::ostringstream out;
    REQUIRE(cmd_eval(a, out) == 0);
    const std::string text = out.str();
    REQUIRE(text.find("metric,k,value\n") != std::string::npos);
    REQUIRE(text.find("ppl,,") != std::string::npos);
    REQUIRE(text.find("bleu,,") != std::string::npos);
    REQUIRE(text.find("distinct,1,") != std::string::npos);
    REQUIRE(text.find("distinct,2,") != std::string::npos);
    REQUIRE(slurp(tmp.path("evaldir") + "/eval.csv") == text);
}

TEST_CASE("eval refuses a vocab that does not match the checkpoint") {
    TmpDir tmp;
    const std::string run = train_micro(tmp, "run");
    Vocab other = Vocab::build({Session{{"zz yy"}, "xx", {}}}, 10);
    const std::string other_path = tmp.path("other.tsv");
    write_text_atomic(other_path, other.serialize());

    EvalArgs a;
    a.ckpt = run + "/last.ckpt";
    a.data = tmp.path("train.txt");
    a.vocab = other_path;
    std::ostringstream out;
    try {
        cmd_eval(a, out);
        FAIL("expected error");
    } catch (const Error& e) {
        REQUIRE(e.kind() == ErrorKind::data);
        REQUIRE(std::string(e.what()).find("does not match") != std::string::npos);
    }
}

TEST_CASE("generate writes one response per session and parseable attention") {
    TmpDir tmp;
    const std::string run = train_micro(tmp, "run");
    GenerateArgs a;
    a.ckpt = run + "/last.ckpt";
    a.data = tmp.path("train.txt");
    a.vocab = run + "/vocab.tsv";
    a.out_dir = tmp.path("gen");
    std::ostringstream out;
    REQUIRE(cmd_generate(a, out) == 0);

    const std::string responses = slurp(tmp.path("gen") + "/responses.txt");
    REQUIRE(std::count(responses.begin(), responses.end(), '\n') == 4);

    std::ifstream af(tmp.path("gen") + "/attention.csv");
    auto recs = parse_attention_csv(af, "attention.csv");
    REQUIRE(recs.size() == 4);
    for (const auto& rec : recs) {
        REQUIRE(rec.heads == 2);
        REQUIRE(rec.contexts == 2);
        rec.validate();
    }

    GenerateArgs capped = a;
    capped.out_dir = tmp.path("gen2");
    capped.max_len = 1;
    REQUIRE(cmd_generate(capped, out) == 0);
    std::istringstream lines(slurp(tmp.path("gen2") + "/responses.txt"));
    std::string line;
    while (std::getline(lines, line))
        REQUIRE(std::count(line.begin(), line.end(), ' ') == 0);  // at most one token

    capped.max_len = 99;  // above max_sent_len
    REQUIRE_THROWS_AS(cmd_generate(capped, out), Error);
}

TEST_CASE("chat rolls both sides of the dialogue through a bounded window") {
    TmpDir tmp;
    PrepArgs prep;
    prep.train_path = tmp.file("train.txt", kMicroCorpus);
    prep.out_dir = tmp.path("run");
    std::ostringstream pout;
    REQUIRE(cmd_prep(prep, pout) == 0);
    Vocab vocab = Vocab::load(tmp.path("run") + "/vocab.tsv");

    ModelConfig mc;
    mc.d = 8;
    mc.H = 2;
    mc.d_w = 8;
    mc.d_h = 8;
    mc.V = vocab.size();
    mc.max_turns = 3;
    mc.max_sent_len = 4;
    mc.seed = 11;
    ReCoSaModel model(mc);
    // Pin the argmax to one token and keep EOS out of reach, so every reply
    // is the same deterministic non-empty sentence.
    ParamStore& ps = model.params();
    ps.value(model.out_proj().w) = Array(Shape{mc.d, mc.V}, 0.0);
    Array bias(Shape{mc.V}, -1.0);
    bias[4] = 2.0;
    bias[EOS_ID] = -9.0;
    ps.value(model.out_proj().b) = bias;
    const std::vector<int> reply = {4, 4, 4, 4};

    std::vector<std::vector<std::vector<int>>> windows;
    std::istringstream in("q0 x\n\nq1 x\nq2 x\n/quit\nq3 x\n");
    std::ostringstream out;
    run_chat(model, vocab, in, out,
             [&](const std::vector<std::vector<int>>& w) { windows.push_back(w); });

    const std::vector<int> u1 = vocab.encode_all("q0 x");
    const std::vector<int> u2 = vocab.encode_all("q1 x");
    const std::vector<int> u3 = vocab.encode_all("q2 x");
    REQUIRE(windows.size() == 3);  // the blank line and post-quit input never reach the model
    const bool w1 = windows[0] == std::vector<std::vector<int>>{u1};
    REQUIRE(w1);
    const bool w2 = windows[1] == std::vector<std::vector<int>>{u1, reply, u2};
    REQUIRE(w2);
    // max_turns = 3 keeps only the newest three turns
    const bool w3 = windows[2] == std::vector<std::vector<int>>{u2, reply, u3};
    REQUIRE(w3);
    REQUIRE(out.str().find("(say something)") != std::string::npos);
}

TEST_CASE("analyze ranks heads, reports dis2resp, and writes heatmaps") {
    TmpDir tmp;
    // Two sessions, two heads: head 1 attends only the second context,
    // head 2 is uniform; the second context is the labeled one.
    AttentionRecord rec;
    rec.heads = 2;
    rec.contexts = 2;
    rec.tokens = {7, 8};
    rec.w = {{{0.0, 1.0}, {0.0, 1.0}}, {{0.5, 0.5}, {0.5, 0.5}}};
    const std::string att_path = tmp.path("att.csv");
    write_text_atomic(att_path, attention_to_csv({rec, rec}));
    const std::string labels_path = tmp.file("labels.txt", "0 1\n0 1\n");

    AnalyzeArgs a;
    a.attention = att_path;
    a.labels = labels_path;
    a.out_dir = tmp.path("analysis");
    std::ostringstream out;
    REQUIRE(cmd_analyze(a, out) == 0);
    const std::string report = slurp(tmp.path("analysis") + "/report.csv");
    REQUIRE(report == out.str());
    REQUIRE(report.find("sessions,,2\n") != std::string::npos);
    REQUIRE(report.find("head1_p,1,1\n") != std::string::npos);
    REQUIRE(report.find("head2_p,1,0\n") != std::string::npos);  // tie resolves to the earlier context
    REQUIRE(report.find("best_head,,1\n") != std::string::npos);
    REQUIRE(report.find("best_p,1,1\n") != std::string::npos);
    REQUIRE(report.find("all_relevant_error_rate,,1\n") != std::string::npos);  // no session has every context relevant
    REQUIRE(report.find("skipped_examples,,0\n") != std::string::npos);
    // aggregate over heads = {0.25, 0.75}
    const std::string dis = "dis2resp,," + ModelConfig::format_double(dis2resp({0.25, 0.75})) + "\n";
    REQUIRE(report.find(dis) != std::string::npos);
    REQUIRE(std::ifstream(tmp.path("analysis") + "/heatmap_head1.svg").good());
    REQUIRE(std::ifstream(tmp.path("analysis") + "/heatmap_head2.svg").good());

    AnalyzeArgs grid = a;
    grid.out_dir = tmp.path("analysis2");
    grid.format = "csv-grid";
    grid.session = 2;
    REQUIRE(cmd_analyze(grid, out) == 0);
    REQUIRE(std::ifstream(tmp.path("analysis2") + "/heatmap_head2.csv").good());

    AnalyzeArgs bad = a;
    bad.session = 3;
    REQUIRE_THROWS_AS(cmd_analyze(bad, out), Error);
}

TEST_CASE("analyze can exclude the post from ranking") {
    TmpDir tmp;
    AttentionRecord rec;
    rec.heads = 1;
    rec.contexts = 2;
    rec.tokens = {7, 8};
    rec.w = {{{0.25, 0.75}, {0.25, 0.75}}};
    write_text_atomic(tmp.path("att.csv"), attention_to_csv({rec}));

    AnalyzeArgs a;
    a.attention = tmp.path("att.csv");
    a.labels = tmp.file("labels.txt", "1 0\n");
    a.out_dir = tmp.path("analysis");
    a.exclude_post = true;
    std::ostringstream out;
    REQUIRE(cmd_analyze(a, out) == 0);
    const std::string report = out.str();
    // with the post dropped only the labeled first context remains
    REQUIRE(report.find("head1_p,1,1\n") != std::string::npos);
    REQUIRE(report.find("dis2resp,,0.5\n") != std::string::npos);  // single remaining slot
}

TEST_CASE("analyze propagates attention parse errors as data errors") {
    TmpDir tmp;
    AnalyzeArgs a;
    a.attention = tmp.file("att.csv", "head,step,ctx_index,weight\n1,1,1,not_a_number\n");
    a.out_dir = tmp.path("analysis");
    std::ostringstream out;
    try {
        cmd_analyze(a, out);
        FAIL("expected error");
    } catch (const Error& e) {
        REQUIRE(e.kind() == ErrorKind::data);
    }
    a.attention = tmp.path("absent.csv");
    REQUIRE_THROWS_AS(cmd_analyze(a, out), Error);
}

TEST_CASE("the installed binary maps errors to exit codes") {
    TmpDir tmp;
    const std::string cli = RECOSA_CLI_PATH;
    auto run = [&](const std::string& args) {
        const int raw = std::system((cli + " " + args + " >/dev/null 2>&1").c_str());
        return WEXITSTATUS(raw);
    };
    REQUIRE(run("--help") == 0);
    REQUIRE(run("") == 1);                             // missing subcommand
    REQUIRE(run("prep --out " + tmp.path("x")) == 1);  // missing required flag
    REQUIRE(run("eval --ckpt " + tmp.path("no.ckpt") + " --data d --vocab v") == 2);
    const std::string train = tmp.file("t.txt", kMicroCorpus);
    REQUIRE(run("prep --train " + train + " --out " + tmp.path("run")) == 0);
}

#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "recosa/commands.hpp"

namespace {

std::vector<std::pair<std::string, std::string>> to_overrides(const std::vector<std::string>& raw) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const std::string& s : raw) out.push_back(recosa::parse_override(s));
    return out;
}

int exit_code(recosa::ErrorKind kind) {
    switch (kind) {
        case recosa::ErrorKind::usage: return 1;
        case recosa::ErrorKind::data: return 2;
        case recosa::ErrorKind::runtime: return 3;
    }
    return 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"recosa: relevant-context dialogue model toolchain"};
    app.require_subcommand(1);

    recosa::PrepArgs prep_args;
    std::vector<std::string> prep_set;
    auto* prep = app.add_subcommand("prep", "Build the vocabulary and validate a corpus");
    prep->add_option("--train", prep_args.train_path, "training corpus, one session per line")->required();
    prep->add_option("--valid", prep_args.valid_path, "validation corpus");
    prep->add_option("--labels", prep_args.labels_path, "relevance labels for the training corpus");
    prep->add_option("--out", prep_args.out_dir, "output directory")->required();
    prep->add_option("--vocab-cap", prep_args.vocab_cap, "maximum vocabulary size");
    prep->add_option("--config", prep_args.config, "base config file");
    prep->add_option("--set", prep_set, "config override key=value (repeatable)");

    recosa::TrainArgs train_args;
    std::vector<std::string> train_set;
    auto* train = app.add_subcommand("train", "Train a model");
    train->add_option("--config", train_args.config, "config file, typically prep's echo")->required();
    train->add_option("--set", train_set, "config override key=value (repeatable)");
    train->add_option("--resume", train_args.resume, "checkpoint to resume from");

    recosa::EvalArgs eval_args;
    auto* eval = app.add_subcommand("eval", "Report ppl, bleu, and distinct-n on a dataset");
    eval->add_option("--ckpt", eval_args.ckpt, "model checkpoint")->required();
    eval->add_option("--data", eval_args.data, "evaluation corpus")->required();
    eval->add_option("--vocab", eval_args.vocab, "vocab file")->required();
    eval->add_option("--out", eval_args.out_dir, "directory for eval.csv (also printed)");

    recosa::GenerateArgs gen_args;
    auto* gen = app.add_subcommand("generate", "Greedy-decode responses and record attention");
    gen->add_option("--ckpt", gen_args.ckpt, "model checkpoint")->required();
    gen->add_option("--data", gen_args.data, "corpus whose contexts are answered")->required();
    gen->add_option("--vocab", gen_args.vocab, "vocab file")->required();
    gen->add_option("--out", gen_args.out_dir, "output directory")->required();
    gen->add_option("--max-len", gen_args.max_len, "response length cap (default: max_sent_len)");

    recosa::ChatArgs chat_args;
    auto* chat = app.add_subcommand("chat", "Interactive REPL against a checkpoint");
    chat->add_option("--ckpt", chat_args.ckpt, "model checkpoint")->required();
    chat->add_option("--vocab", chat_args.vocab, "vocab file")->required();

    recosa::AnalyzeArgs an_args;
    auto* analyze = app.add_subcommand("analyze", "Ranking metrics and heatmaps from attention CSV");
    analyze->add_option("--attention", an_args.attention, "attention CSV from generate")->required();
    analyze->add_option("--labels", an_args.labels, "relevance label sidecar");
    analyze->add_option("--out", an_args.out_dir, "output directory")->required();
    analyze->add_option("--format", an_args.format, "heatmap format: svg or csv-grid");
    analyze->add_flag("--exclude-post", an_args.exclude_post, "drop the final context before ranking");
    analyze->add_option("--session", an_args.session, "1-based session whose heatmaps are exported");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (prep->parsed()) {
            prep_args.overrides = to_overrides(prep_set);
            return recosa::cmd_prep(prep_args, std::cout);
        }
        if (train->parsed()) {
            train_args.overrides = to_overrides(train_set);
            return recosa::cmd_train(train_args, std::cout);
        }
        if (eval->parsed()) return recosa::cmd_eval(eval_args, std::cout);
        if (gen->parsed()) return recosa::cmd_generate(gen_args, std::cout);
        if (chat->parsed()) return recosa::cmd_chat(chat_args, std::cin, std::cout);
        if (analyze->parsed()) return recosa::cmd_analyze(an_args, std::cout);
    } catch (const recosa::Error& e) {
        std::cerr << "recosa: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "recosa: " << e.what() << "\n";
        return 3;
    }
    return 1;
}

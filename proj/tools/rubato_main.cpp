// rubato: score-to-performance MIDI pipeline.
//
// Exit codes: 0 success, 1 input/processing error (module error names are
// surfaced verbatim on stderr), 2 usage error. Without an output path, data
// goes to stdout; diagnostics always go to stderr. The resolved seed is
// recorded inside every artifact (text meta event in MIDI files, "# seed"
// header in text files, config field in checkpoints).

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "CLI11.hpp"

#include "rubato/corpus.hpp"
#include "rubato/error.hpp"
#include "rubato/inference.hpp"
#include "rubato/metrics.hpp"
#include "rubato/midi.hpp"
#include "rubato/model.hpp"
#include "rubato/tempo_map.hpp"
#include "rubato/tokenizer.hpp"

namespace fs = std::filesystem;
using namespace rubato;

namespace {

RUBATO_DEFINE_ERROR(InputError);

uint64_t resolve_seed(const CLI::App& app, const CLI::Option* seed_opt, uint64_t value) {
    (void)app;
    if (seed_opt->count() > 0) return value;
    if (const char* env = std::getenv("RUBATO_SEED")) {
        return std::strtoull(env, nullptr, 10);
    }
    return value;
}

std::string seed_header(uint64_t seed) {
    return "# seed: " + std::to_string(seed) + "\n";
}

void emit_text(const std::string& out_path, const std::string& content) {
    if (out_path.empty()) {
        std::cout << content;
        return;
    }
    std::ofstream f(out_path, std::ios::trunc);
    if (!f) throw InputError("cannot open for writing: " + out_path);
    f << content;
}

midi::NormalizeMode parse_mode(const std::string& mode) {
    if (mode == "score") return midi::NormalizeMode::score;
    if (mode == "performance") return midi::NormalizeMode::performance;
    throw CLI::ValidationError("--mode", "must be 'score' or 'performance'");
}

// fixed 120 BPM representation of wall-clock milliseconds
int64_t ms_to_tick_120(double ms, int ppq) {
    return static_cast<int64_t>(std::floor(ms * ppq / 500.0 + 0.5));
}

midi::MidiPiece midi_from_normalized(const midi::NormalizedPiece& piece, int ppq,
                                     uint64_t seed) {
    midi::MidiPiece out;
    out.ppq = ppq;
    out.tempo_events.push_back(midi::TempoEvent{0, midi::kDefaultUsPerQuarter});
    out.text_events.push_back(midi::TextEvent{0, "rubato.seed=" + std::to_string(seed)});
    midi::Track track;
    for (const midi::NormalizedNote& n : piece.notes) {
        int64_t onset = ms_to_tick_120(n.onset_ms, ppq);
        int64_t end = ms_to_tick_120(n.onset_ms + n.duration_ms, ppq);
        track.notes.push_back(midi::NoteEvent{n.pitch, n.velocity, onset,
                                              std::max<int64_t>(1, end - onset)});
    }
    for (const midi::PedalCurve::Point& p : piece.pedal.points) {
        track.controls.push_back(midi::ControlEvent{midi::kSustainController, p.value,
                                                    ms_to_tick_120(p.time_ms, ppq)});
    }
    out.tracks.push_back(std::move(track));
    return out;
}

std::vector<tok::TokenSeq> read_token_lines(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open token file: " + path);
    std::vector<tok::TokenSeq> seqs;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream row(line);
        tok::TokenSeq seq;
        long long id;
        while (row >> id) seq.push_back(static_cast<tok::TokenId>(id));
        if (!seq.empty()) seqs.push_back(std::move(seq));
    }
    return seqs;
}

std::string token_line(const tok::TokenSeq& seq) {
    std::ostringstream out;
    for (size_t i = 0; i < seq.size(); ++i) {
        if (i) out << ' ';
        out << seq[i];
    }
    out << '\n';
    return out.str();
}

std::vector<std::string> list_midi_files(const std::string& dir) {
    if (!fs::is_directory(dir)) throw InputError("not a directory: " + dir);
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string ext = entry.path().extension().string();
        if (ext == ".mid" || ext == ".midi") files.push_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw InputError("no .mid files in directory: " + dir);
    return files;
}

std::vector<tok::TokenSeq> tokenize_dir(const std::string& dir, midi::NormalizeMode mode) {
    std::vector<tok::TokenSeq> seqs;
    for (const std::string& f : list_midi_files(dir)) {
        seqs.push_back(tok::encode(midi::normalize(midi::read_smf_file(f), mode)));
    }
    return seqs;
}

std::unique_ptr<infer::PerformanceModel> make_model(const std::string& spec) {
    if (spec == "stub") return std::make_unique<infer::StubPerformer>();
    return std::make_unique<infer::TransformerPerformer>(model::load_checkpoint(spec));
}

// deterministic toy corpus for the overfit loop
midi::NormalizedPiece toy_piece(int notes) {
    midi::NormalizedPiece piece;
    const uint8_t pitches[4] = {60, 64, 67, 72};
    for (int i = 0; i < notes; ++i) {
        piece.notes.push_back(midi::NormalizedNote{
            pitches[i % 4], static_cast<uint8_t>(70 + 10 * (i % 4)), 250.0 * i, 200.0});
    }
    return piece;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"rubato: score-to-performance MIDI pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    uint64_t seed = 0;
    CLI::Option* seed_opt = app.add_option("--seed", seed, "random seed (env RUBATO_SEED)");

    // --- tokenize ---------------------------------------------------------
    auto* c_tok = app.add_subcommand("tokenize", "MIDI file to a token dump");
    std::string tok_in, tok_out, tok_mode = "score";
    c_tok->add_option("--in", tok_in, "input .mid")->required();
    c_tok->add_option("--out", tok_out, "output token text file (default stdout)");
    c_tok->add_option("--mode", tok_mode, "score|performance normalization");
    c_tok->callback([&] {
        uint64_t s = resolve_seed(app, seed_opt, seed);
        tok::TokenSeq seq =
            tok::encode(midi::normalize(midi::read_smf_file(tok_in), parse_mode(tok_mode)));
        emit_text(tok_out, seed_header(s) + token_line(seq));
    });

    // --- detokenize -------------------------------------------------------
    auto* c_detok = app.add_subcommand("detokenize", "token dump to a 120 BPM MIDI file");
    std::string detok_in, detok_out;
    int detok_ppq = midi::kDefaultPpq;
    c_detok->add_option("--in", detok_in, "token text file")->required();
    c_detok->add_option("--out", detok_out, "output .mid")->required();
    c_detok->add_option("--ppq", detok_ppq, "ticks per quarter");
    c_detok->callback([&] {
        uint64_t s = resolve_seed(app, seed_opt, seed);
        std::vector<tok::TokenSeq> seqs = read_token_lines(detok_in);
        if (seqs.empty()) throw InputError("no token lines in: " + detok_in);
        midi::write_smf_file(detok_out,
                             midi_from_normalized(tok::decode(seqs.front()), detok_ppq, s));
    });

    // --- corrupt ----------------------------------------------------------
    auto* c_corrupt = app.add_subcommand("corrupt", "masked pre-training example from tokens");
    std::string cor_in, cor_out;
    double cor_ratio = 0.3;
    c_corrupt->add_option("--in", cor_in, "token text file")->required();
    c_corrupt->add_option("--ratio", cor_ratio, "masking ratio (default 0.3)");
    c_corrupt->add_option("--out", cor_out, "output file (default stdout)");
    c_corrupt->callback([&] {
        uint64_t s = resolve_seed(app, seed_opt, seed);
        std::vector<tok::TokenSeq> seqs = read_token_lines(cor_in);
        if (seqs.empty()) throw InputError("no token lines in: " + cor_in);
        tok::PretrainExample ex = tok::corrupt_for_pretraining(seqs.front(), cor_ratio, s);
        std::ostringstream out;
        out << seed_header(s);
        out << "# encoder_input\n" << token_line(ex.encoder_input);
        out << "# decoder_target\n" << token_line(ex.decoder_target);
        out << "# loss_mask\n";
        for (size_t i = 0; i < ex.loss_mask.size(); ++i) {
            if (i) out << ' ';
            out << int(ex.loss_mask[i]);
        }
        out << '\n';
        emit_text(cor_out, out.str());
    });

    // --- render -----------------------------------------------------------
    auto* c_render = app.add_subcommand("render", "score MIDI to performance MIDI");
    std::string ren_model = "stub", ren_in, ren_out;
    double ren_temp = 1.0;
    int ren_topk = 32;
    infer::BlockConfig ren_block;
    c_render->add_option("--model", ren_model, "'stub' or a checkpoint path");
    c_render->add_option("--in", ren_in, "score .mid")->required();
    c_render->add_option("--out", ren_out, "performance .mid")->required();
    c_render->add_option("--temperature", ren_temp, "sampling temperature (0 = greedy)");
    c_render->add_option("--top-k", ren_topk, "top-k cutoff");
    c_render->add_option("--window", ren_block.window, "block window in tokens");
    c_render->add_option("--stride", ren_block.stride, "block stride in tokens");
    c_render->add_option("--tail-drop", ren_block.tail_drop_notes, "notes dropped at overlap tail");
    c_render->callback([&] {
        uint64_t s = resolve_seed(app, seed_opt, seed);
        tok::TokenSeq score = tok::encode(
            midi::normalize(midi::read_smf_file(ren_in), midi::NormalizeMode::score));
        auto model = make_model(ren_model);
        infer::SamplingConfig sampling{ren_temp, ren_topk, s};
        tok::TokenSeq perf = infer::blockwise_generate(*model, score, ren_block, sampling);
        midi::write_smf_file(ren_out, midi_from_normalized(tok::decode(perf),
                                                           midi::kDefaultPpq, s));
    });

    // --- tempo-map --------------------------------------------------------
    auto* c_tempo = app.add_subcommand("tempo-map", "DAW-editable MIDI from a score/performance pair");
    std::string tm_score, tm_perf, tm_out;
    int tm_ppq = midi::kDefaultPpq;
    c_tempo->add_option("--score", tm_score, "score .mid")->required();
    c_tempo->add_option("--perf", tm_perf, "performance .mid")->required();
    c_tempo->add_option("--out", tm_out, "output .mid")->required();
    c_tempo->add_option("--ppq", tm_ppq, "ticks per quarter");
    c_tempo->callback([&] {
        uint64_t s = resolve_seed(app, seed_opt, seed);
        tempo::AlignedPair pair = tempo::AlignedPair::make(
            midi::normalize(midi::read_smf_file(tm_score), midi::NormalizeMode::score),
            midi::normalize(midi::read_smf_file(tm_perf), midi::NormalizeMode::performance));
        midi::MidiPiece out = tempo::expressive_tempo_map(pair, tm_ppq);
        out.text_events.push_back(midi::TextEvent{0, "rubato.seed=" + std::to_string(s)});
        midi::write_smf_file(tm_out, out);
    });

    // --- evaluate ---------------------------------------------------------
    auto* c_eval = app.add_subcommand("evaluate", "distribution metrics, candidates vs references");
    std::string ev_cand, ev_ref, ev_out, ev_csv;
    c_eval->add_option("--candidates", ev_cand, "directory of candidate .mid files")->required();
    c_eval->add_option("--references", ev_ref, "directory of reference .mid files")->required();
    c_eval->add_option("--out", ev_out, "text report path (default stdout)");
    c_eval->add_option("--csv", ev_csv, "machine-readable table path");
    c_eval->callback([&] {
        uint64_t s = resolve_seed(app, seed_opt, seed);
        std::vector<tok::TokenSeq> cand = tokenize_dir(ev_cand, midi::NormalizeMode::performance);
        std::vector<tok::TokenSeq> ref = tokenize_dir(ev_ref, midi::NormalizeMode::performance);
        metrics::MetricReport report = metrics::evaluate_testset(cand, ref);
        emit_text(ev_out, seed_header(s) + metrics::report_text(report));
        if (!ev_csv.empty()) emit_text(ev_csv, metrics::report_csv(report));
    });

    // --- human-baseline ---------------------------------------------------
    auto* c_human = app.add_subcommand("human-baseline",
                                       "leave-one-out baseline over per-piece subdirectories");
    std::string hb_dir, hb_out, hb_csv;
    c_human->add_option("--dir", hb_dir, "directory of piece subdirectories")->required();
    c_human->add_option("--out", hb_out, "text report path (default stdout)");
    c_human->add_option("--csv", hb_csv, "machine-readable table path");
    c_human->callback([&] {
        uint64_t s = resolve_seed(app, seed_opt, seed);
        if (!fs::is_directory(hb_dir)) throw InputError("not a directory: " + hb_dir);
        std::vector<std::string> subdirs;
        for (const auto& entry : fs::directory_iterator(hb_dir)) {
            if (entry.is_directory()) subdirs.push_back(entry.path().string());
        }
        std::sort(subdirs.begin(), subdirs.end());
        if (subdirs.empty()) throw InputError("no piece subdirectories in: " + hb_dir);
        std::vector<std::vector<tok::TokenSeq>> groups;
        for (const std::string& d : subdirs) {
            groups.push_back(tokenize_dir(d, midi::NormalizeMode::performance));
        }
        metrics::MetricReport report = metrics::human_baseline(groups);
        emit_text(hb_out, seed_header(s) + metrics::report_text(report));
        if (!hb_csv.empty()) emit_text(hb_csv, metrics::report_csv(report));
    });

    // --- shard ------------------------------------------------------------
    auto* c_shard = app.add_subcommand("shard", "token shards from a directory of MIDI files");
    std::string sh_dir, sh_out, sh_mode = "performance";
    int64_t sh_max = 1 << 20;
    c_shard->add_option("--in", sh_dir, "directory of .mid files")->required();
    c_shard->add_option("--out", sh_out, "shard path prefix")->required();
    c_shard->add_option("--mode", sh_mode, "score|performance normalization");
    c_shard->add_option("--max-tokens", sh_max, "max tokens per shard");
    c_shard->callback([&] {
        uint64_t s = resolve_seed(app, seed_opt, seed);
        std::vector<tok::TokenSeq> seqs = tokenize_dir(sh_dir, parse_mode(sh_mode));
        std::vector<std::string> paths = corpus::write_shards(seqs, sh_out, sh_max);
        std::ostringstream manifest;
        manifest << seed_header(s);
        for (const std::string& p : paths) manifest << p << '\n';
        emit_text(sh_out + ".manifest.txt", manifest.str());
        std::cerr << "wrote " << paths.size() << " shard(s), " << seqs.size()
                  << " sequence(s)\n";
    });

    // --- augment ----------------------------------------------------------
    auto* c_aug = app.add_subcommand("augment", "jitter velocities and timing of one MIDI file");
    std::string aug_in, aug_out, aug_mode = "performance";
    corpus::AugmentParams aug_params;
    c_aug->add_option("--in", aug_in, "input .mid")->required();
    c_aug->add_option("--out", aug_out, "output .mid")->required();
    c_aug->add_option("--mode", aug_mode, "score|performance normalization");
    c_aug->add_option("--velocity-delta", aug_params.velocity_delta, "velocity jitter +-delta");
    c_aug->add_option("--timing-frac", aug_params.timing_fraction, "timing jitter fraction");
    c_aug->callback([&] {
        uint64_t s = resolve_seed(app, seed_opt, seed);
        midi::NormalizedPiece piece =
            midi::normalize(midi::read_smf_file(aug_in), parse_mode(aug_mode));
        midi::write_smf_file(aug_out, midi_from_normalized(corpus::augment(piece, aug_params, s),
                                                           midi::kDefaultPpq, s));
    });

    // --- train-toy --------------------------------------------------------
    auto* c_train = app.add_subcommand("train-toy", "overfit the toy model on a tiny corpus");
    std::string tr_out, tr_trace;
    int tr_steps = 2000, tr_notes = 4;
    double tr_ratio = 0.3, tr_lr = 1e-3;
    c_train->add_option("--out", tr_out, "checkpoint path")->required();
    c_train->add_option("--trace", tr_trace, "loss trace path (default stdout)");
    c_train->add_option("--steps", tr_steps, "training steps");
    c_train->add_option("--notes", tr_notes, "toy corpus note count");
    c_train->add_option("--mask-ratio", tr_ratio, "masking ratio");
    c_train->add_option("--lr", tr_lr, "peak learning rate");
    c_train->callback([&] {
        uint64_t s = resolve_seed(app, seed_opt, seed);
        tok::TokenSeq seq = tok::encode(toy_piece(tr_notes));
        tok::PretrainExample ex = tok::corrupt_for_pretraining(seq, tr_ratio, s);
        auto model = model::Transformer<float>::init(model::ModelConfig::toy(), s);
        model::OptimizerConfig opt;
        opt.peak_lr = tr_lr;
        std::vector<double> trace = model::train_steps(model, {&ex, 1}, opt, tr_steps);
        model::save_checkpoint(tr_out, model);
        std::ostringstream out;
        out << seed_header(s);
        for (size_t i = 0; i < trace.size(); ++i) out << i << ' ' << trace[i] << '\n';
        emit_text(tr_trace, out.str());
        std::cerr << "final loss " << trace.back() << " after " << tr_steps << " steps\n";
    });

    // --- cost-report ------------------------------------------------------
    auto* c_cost = app.add_subcommand("cost-report", "attention cost and parameter accounting");
    int64_t co_seq = 4096;
    std::string co_out;
    c_cost->add_option("--seq-len", co_seq, "sequence length in tokens");
    c_cost->add_option("--out", co_out, "report path (default stdout)");
    c_cost->callback([&] {
        uint64_t s = resolve_seed(app, seed_opt, seed);
        model::ModelConfig full = model::ModelConfig::full();
        int64_t plain = model::attention_cost(co_seq, full.encoder_layers, false,
                                              full.heads(), full.head_dim);
        int64_t packed = model::attention_cost(co_seq, full.encoder_layers, true,
                                               full.heads(), full.head_dim);
        std::ostringstream out;
        out << seed_header(s);
        out << "seq_len: " << co_seq << "\n";
        out << "encoder_self_attention_macs_uncompressed: " << plain << "\n";
        out << "encoder_self_attention_macs_compressed: " << packed << "\n";
        out << "compression_ratio: " << (plain / packed) << "\n";
        out << "decoder_layer_cost_ratio_6_vs_2: "
            << (model::attention_cost(co_seq, 6, false, full.heads(), full.head_dim) /
                model::attention_cost(co_seq, 2, false, full.heads(), full.head_dim))
            << "\n\n";
        out << "parameters_total: " << model::count_parameters(full) << "\n";
        out << model::parameter_breakdown(full);
        emit_text(co_out, out.str());
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << e.name() << ": " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

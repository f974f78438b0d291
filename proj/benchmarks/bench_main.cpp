#include <benchmark/benchmark.h>

#include "rubato/inference.hpp"
#include "rubato/metrics.hpp"
#include "rubato/midi.hpp"
#include "rubato/model.hpp"
#include "rubato/rng.hpp"
#include "rubato/tokenizer.hpp"

using namespace rubato;

namespace {

midi::NormalizedPiece synth_piece(int notes) {
    Rng rng(42);
    midi::NormalizedPiece piece;
    double onset = 0.0;
    for (int i = 0; i < notes; ++i) {
        piece.notes.push_back({uint8_t(rng.range(21, 108)), uint8_t(rng.range(1, 127)), onset,
                               double(rng.range(50, 900))});
        onset += double(rng.range(20, 400));
    }
    piece.pedal.add_point(0.0, 90);
    return piece;
}

tok::TokenSeq synth_score(int notes) {
    Rng rng(43);
    tok::TokenSeq seq;
    for (int i = 0; i < notes; ++i) {
        seq.push_back(tok::pitch_token(int(rng.range(21, 108))));
        seq.push_back(tok::timing_token(int(rng.range(0, 400))));
        seq.push_back(tok::velocity_token(64));
        seq.push_back(tok::timing_token(int(rng.range(1, 900))));
        for (int p = 0; p < 4; ++p) seq.push_back(tok::pedal_token(0));
    }
    return seq;
}

void bm_encode(benchmark::State& state) {
    midi::NormalizedPiece piece = synth_piece(int(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(tok::encode(piece));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(bm_encode)->Arg(64)->Arg(512);

void bm_decode(benchmark::State& state) {
    tok::TokenSeq seq = tok::encode(synth_piece(int(state.range(0))));
    for (auto _ : state) benchmark::DoNotOptimize(tok::decode(seq));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(bm_decode)->Arg(64)->Arg(512);

void bm_toy_forward(benchmark::State& state) {
    auto m = model::Transformer<float>::init(model::ModelConfig::toy(), 7);
    tok::TokenSeq enc = synth_score(int(state.range(0)));
    tok::TokenSeq dec = {tok::kBos};
    dec.insert(dec.end(), enc.begin(), enc.end());
    for (auto _ : state) benchmark::DoNotOptimize(m.forward(enc, dec));
}
BENCHMARK(bm_toy_forward)->Arg(4)->Arg(16);

void bm_toy_gradients(benchmark::State& state) {
    auto m = model::Transformer<float>::init(model::ModelConfig::toy(), 7);
    tok::PretrainExample ex =
        tok::corrupt_for_pretraining(synth_score(int(state.range(0))), 0.3, 11);
    std::vector<float> grads;
    for (auto _ : state) benchmark::DoNotOptimize(m.loss_and_gradients(ex, &grads));
}
BENCHMARK(bm_toy_gradients)->Arg(4)->Arg(16);

void bm_blockwise_stub(benchmark::State& state) {
    infer::StubPerformer stub;
    tok::TokenSeq score = synth_score(int(state.range(0)));
    infer::BlockConfig block;
    infer::SamplingConfig greedy;
    greedy.temperature = 0.0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(infer::blockwise_generate(stub, score, block, greedy));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(bm_blockwise_stub)->Arg(128)->Arg(700);

void bm_js_divergence(benchmark::State& state) {
    Rng rng(9);
    metrics::Distribution p, q;
    p.p.resize(5000);
    q.p.resize(5000);
    double sp = 0.0, sq = 0.0;
    for (int i = 0; i < 5000; ++i) {
        p.p[i] = rng.uniform();
        q.p[i] = rng.uniform();
        sp += p.p[i];
        sq += q.p[i];
    }
    for (int i = 0; i < 5000; ++i) {
        p.p[i] /= sp;
        q.p[i] /= sq;
    }
    p.samples = q.samples = 5000;
    for (auto _ : state) benchmark::DoNotOptimize(metrics::js_divergence(p, q));
}
BENCHMARK(bm_js_divergence);

} // namespace

BENCHMARK_MAIN();

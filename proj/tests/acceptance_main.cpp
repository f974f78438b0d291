// Acceptance runner: one line per criterion, nonzero exit if any fail.
// Tolerances are pinned here and nowhere looser.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "generators.hpp"
#include "rubato/inference.hpp"
#include "rubato/metrics.hpp"
#include "rubato/midi.hpp"
#include "rubato/model.hpp"
#include "rubato/rng.hpp"
#include "rubato/tempo_map.hpp"
#include "rubato/tokenizer.hpp"

using namespace rubato;

namespace {

constexpr double kGradRelTol = 1e-4;    // analytic vs central differences
constexpr double kLossTol = 1e-6;       // uniform-logit NLL vs ln(5389)
constexpr double kMetricTol = 1e-12;    // js/intersection vs brute force
constexpr double kOverfitTarget = 0.1;  // masked loss after <= 5000 steps
constexpr double kOnsetFloorMs = 2.0;   // tempo round-trip floor

struct Outcome {
    bool pass;
    std::string detail;
};

tok::TokenId reassemble(const tok::TokenInfo& info) {
    switch (info.kind) {
    case tok::TokenKind::special: return info.value;
    case tok::TokenKind::pitch: return tok::pitch_token(info.value);
    case tok::TokenKind::velocity: return tok::velocity_token(info.value);
    case tok::TokenKind::timing: return tok::timing_token(info.value);
    case tok::TokenKind::pedal: return tok::pedal_token(info.value);
    }
    return -1;
}

Outcome criterion_vocabulary() {
    if (tok::kVocabSize != 5389) return {false, "vocab size is not 5389"};
    if (128 + 128 + 5000 + 128 + 5 != tok::kVocabSize) {
        return {false, "block sizes do not sum to 5389"};
    }
    for (tok::TokenId id = 0; id < tok::kVocabSize; ++id) {
        if (reassemble(tok::describe(id)) != id) {
            return {false, "id " + std::to_string(id) + " is not bijective"};
        }
    }
    return {true, "5389 ids, all bijective"};
}

Outcome criterion_tokenizer_roundtrip() {
    Rng rng(10001);
    for (int iter = 0; iter < 1000; ++iter) {
        midi::NormalizedPiece piece = testgen::random_piece(rng, int(rng.range(1, 40)));
        tok::TokenSeq seq = tok::encode(piece);
        midi::NormalizedPiece back = tok::decode(seq);
        if (back.notes != piece.notes) {
            return {false, "note mismatch at iteration " + std::to_string(iter)};
        }
        for (double t : testgen::pedal_sample_times(piece)) {
            if (back.pedal.value_at(t) != piece.pedal.value_at(t)) {
                return {false, "pedal mismatch at iteration " + std::to_string(iter)};
            }
        }
    }
    return {true, "1000 pieces round-tripped exactly"};
}

Outcome criterion_compression_cost() {
    for (int64_t n : {int64_t(64), int64_t(1024), int64_t(4096)}) {
        int64_t full = model::attention_cost(n, 10, false);
        int64_t packed = model::attention_cost(n, 10, true);
        if (full != packed * 64) {
            return {false, "ratio at N=" + std::to_string(n) + " is " +
                               std::to_string(double(full) / double(packed))};
        }
    }
    return {true, "uncompressed/compressed == 64 for N in {64, 1024, 4096}"};
}

Outcome criterion_gradients() {
    model::ModelConfig toy = model::ModelConfig::toy();
    auto m = model::Transformer<double>::init(toy, 10002);
    Rng seq_rng(10003);
    tok::TokenSeq body = testgen::random_score_tokens(seq_rng, 2);
    tok::PretrainExample ex = tok::corrupt_for_pretraining(body, 0.3, 10004);

    std::vector<double> grads;
    m.loss_and_gradients(ex, &grads);

    Rng rng(10005);
    double h = 1e-4;
    double worst = 0.0;
    int checked = 0;
    for (const model::TensorSpec& spec : model::parameter_layout(toy)) {
        for (int pick = 0; pick < 5; ++pick) {
            size_t idx = size_t(spec.offset) + size_t(rng.bounded(uint64_t(spec.size())));
            double saved = m.params()[idx];
            m.params()[idx] = saved + h;
            double up = m.loss_and_gradients(ex, nullptr).loss;
            m.params()[idx] = saved - h;
            double down = m.loss_and_gradients(ex, nullptr).loss;
            m.params()[idx] = saved;
            double fd = (up - down) / (2.0 * h);
            double a = grads[idx];
            ++checked;
            if (std::abs(a) < 1e-8 && std::abs(fd) < 1e-8) continue;
            double rel = std::abs(a - fd) / std::max(std::abs(a), std::abs(fd));
            worst = std::max(worst, rel);
            if (rel > kGradRelTol) {
                return {false, spec.name + "[" + std::to_string(idx - size_t(spec.offset)) +
                                   "] relative error " + std::to_string(rel)};
            }
        }
    }
    std::ostringstream detail;
    detail << checked << " parameters, worst relative error " << worst;
    return {checked >= 200, detail.str()};
}

Outcome criterion_loss_wiring() {
    size_t vocab = size_t(tok::kVocabSize);
    std::vector<tok::TokenId> targets = {10, 400, 2000, 5300};
    std::vector<uint8_t> mask = {1, 0, 1, 0};
    std::vector<double> logits(targets.size() * vocab, 0.0);

    model::LossReport uniform = model::compute_loss(logits, vocab, targets, mask);
    double want = std::log(5389.0);
    if (std::abs(uniform.loss - want) > kLossTol) {
        return {false, "uniform loss " + std::to_string(uniform.loss) + " != ln(5389)"};
    }

    Rng rng(10006);
    std::vector<double> tweaked = logits;
    for (size_t t = 0; t < targets.size(); ++t) {
        if (mask[t]) continue;
        for (size_t v = 0; v < vocab; ++v) tweaked[t * vocab + v] = rng.uniform(-5.0, 5.0);
    }
    model::LossReport perturbed = model::compute_loss(tweaked, vocab, targets, mask);
    if (perturbed.loss != uniform.loss) {
        return {false, "loss depends on logits at unmasked positions"};
    }
    return {true, "masked-position mean NLL == ln(5389), unmasked logits inert"};
}

Outcome criterion_overfit() {
    Rng rng(10007);
    midi::NormalizedPiece piece = testgen::random_piece(rng, 4);
    tok::TokenSeq body = tok::encode(piece);
    tok::PretrainExample ex = tok::corrupt_for_pretraining(body, 0.3, 10008);

    model::OptimizerConfig opt;
    opt.peak_lr = 1e-3;
    opt.warmup_steps = 50;
    auto m1 = model::Transformer<float>::init(model::ModelConfig::toy(), 10009);
    std::vector<double> trace1 = model::train_steps(m1, std::vector{ex}, opt, 5000);
    auto m2 = model::Transformer<float>::init(model::ModelConfig::toy(), 10009);
    std::vector<double> trace2 = model::train_steps(m2, std::vector{ex}, opt, 5000);

    if (trace1 != trace2) return {false, "loss trace is not deterministic per seed"};
    double final_loss = trace1.back();
    std::ostringstream detail;
    detail << "final masked loss " << final_loss << " after 5000 steps";
    return {final_loss < kOverfitTarget, detail.str()};
}

Outcome criterion_tempo_roundtrip() {
    midi::NormalizedPiece score;
    for (int i = 0; i < 4; ++i) score.notes.push_back({60, 64, 500.0 * i, 400.0});
    tempo::TempoCurve identity =
        tempo::estimate_tempo_curve(tempo::AlignedPair::make(score, score), 480);
    if (identity.points != std::vector<tempo::TempoCurve::Breakpoint>{{0, 120.0}}) {
        return {false, "identity performance did not give [(0, 120)]"};
    }
    midi::NormalizedPiece half = score;
    for (size_t i = 0; i < half.notes.size(); ++i) half.notes[i].onset_ms *= 2.0;
    tempo::TempoCurve slow =
        tempo::estimate_tempo_curve(tempo::AlignedPair::make(score, half), 480);
    if (slow.points != std::vector<tempo::TempoCurve::Breakpoint>{{0, 60.0}}) {
        return {false, "half-speed performance did not give [(0, 60)]"};
    }

    Rng rng(10010);
    double worst = 0.0;
    for (int iter = 0; iter < 200; ++iter) {
        testgen::RubatoPair pair = testgen::random_rubato_pair(rng, int(rng.range(2, 80)));
        midi::MidiPiece out =
            tempo::expressive_tempo_map(tempo::AlignedPair::make(pair.score, pair.perf), 480);
        for (size_t i = 0; i < pair.perf.notes.size(); ++i) {
            int64_t tick = out.tracks[0].notes[i].onset_tick;
            double back = midi::render_wallclock(tick, out.tempo_events, out.ppq);
            double err = std::abs(back - pair.perf.notes[i].onset_ms);
            int64_t us = midi::kDefaultUsPerQuarter;
            for (const auto& ev : out.tempo_events) {
                if (ev.tick > tick) break;
                us = ev.us_per_quarter;
            }
            double tol = std::max(kOnsetFloorMs, double(us) / 1000.0 / double(out.ppq)) + 1e-6;
            worst = std::max(worst, err);
            if (err > tol) {
                std::ostringstream detail;
                detail << "onset error " << err << " ms > tolerance " << tol << " at iteration "
                       << iter;
                return {false, detail.str()};
            }
        }
    }
    std::ostringstream detail;
    detail << "200 performances, worst onset error " << worst << " ms";
    return {true, detail.str()};
}

Outcome criterion_metric_oracles() {
    Rng rng(10011);
    for (int iter = 0; iter < 1000; ++iter) {
        int support = iter % 2 == 0 ? 16 : 128;
        metrics::Distribution p = testgen::random_distribution(rng, support);
        metrics::Distribution q = testgen::random_distribution(rng, support);
        if (std::abs(metrics::js_divergence(p, q) - testgen::oracle_js(p, q)) > kMetricTol) {
            return {false, "js oracle mismatch at iteration " + std::to_string(iter)};
        }
        double inter = metrics::intersection_area(p, q);
        if (std::abs(inter - testgen::oracle_intersection(p, q)) > kMetricTol) {
            return {false, "intersection oracle mismatch at iteration " + std::to_string(iter)};
        }
        if (std::abs(inter + testgen::total_variation(p, q) - 1.0) > kMetricTol) {
            return {false, "intersection + TV != 1 at iteration " + std::to_string(iter)};
        }
        if (metrics::js_divergence(p, p) != 0.0) {
            return {false, "JS(p, p) != 0 at iteration " + std::to_string(iter)};
        }
    }
    metrics::Distribution a, b;
    a.p = {1.0, 0.0};
    b.p = {0.0, 1.0};
    a.samples = b.samples = 1;
    if (std::abs(metrics::js_divergence(a, b) - 1.0) > kMetricTol) {
        return {false, "disjoint-support JS is not 1"};
    }
    if (metrics::intersection_area(a, b) != 0.0) {
        return {false, "disjoint-support intersection is not 0"};
    }
    return {true, "1000 random pairs match brute force within 1e-12"};
}

Outcome criterion_pitch_and_blocking() {
    infer::StubPerformer stub;
    infer::BlockConfig block;
    infer::SamplingConfig greedy;
    greedy.temperature = 0.0;

    Rng rng(10012);
    int long_scores = 0;
    for (int iter = 0; iter < 100; ++iter) {
        int notes = iter % 4 == 0 ? int(rng.range(520, 900)) : int(rng.range(1, 500));
        if (notes * 8 > 4096) ++long_scores;
        tok::TokenSeq score = testgen::random_score_tokens(rng, notes);

        tok::TokenSeq single = infer::constrained_generate(stub, score, greedy);
        tok::TokenSeq blocked = infer::blockwise_generate(stub, score, block, greedy);
        if (single != blocked) {
            return {false, "blockwise != single-pass at iteration " + std::to_string(iter)};
        }
        if (blocked.size() != score.size()) {
            return {false, "length mismatch at iteration " + std::to_string(iter)};
        }
        for (size_t f = 0; f < score.size() / 8; ++f) {
            if (blocked[f * 8] != score[f * 8]) {
                return {false, "pitch mismatch at iteration " + std::to_string(iter)};
            }
        }
    }
    if (long_scores == 0) return {false, "no scores exceeded the 4096-token window"};

    // Sampled decoding agrees too: the stub's one-hot logits are invariant to
    // the sampling path.
    tok::TokenSeq score = testgen::random_score_tokens(rng, 600);
    infer::SamplingConfig sampled;
    sampled.seed = 10013;
    if (infer::constrained_generate(stub, score, sampled) !=
        infer::blockwise_generate(stub, score, block, sampled)) {
        return {false, "sampled blockwise != single-pass"};
    }
    std::ostringstream detail;
    detail << "100 scores (" << long_scores << " above one window), all pitch-faithful";
    return {true, detail.str()};
}

Outcome criterion_parameter_accounting() {
    model::ModelConfig full = model::ModelConfig::full();
    int64_t n = model::count_parameters(full);
    if (double(n) < 135e6 * 0.9 || double(n) > 135e6 * 1.1) {
        return {false, "count " + std::to_string(n) + " outside 135M +- 10%"};
    }
    std::string breakdown = model::parameter_breakdown(full);
    if (breakdown.find("total: " + std::to_string(n)) == std::string::npos) {
        return {false, "breakdown does not document the total"};
    }
    if (model::attention_cost(4096, 6, true) != 3 * model::attention_cost(4096, 2, true)) {
        return {false, "6-vs-2 layer cost ratio is not 3"};
    }
    return {true, std::to_string(n) + " parameters, 6-vs-2 layer ratio 3"};
}

Outcome criterion_metric_ordering() {
    auto frame = [](int velocity) {
        return tok::TokenSeq{tok::pitch_token(60),       tok::timing_token(100),
                             tok::velocity_token(velocity), tok::timing_token(200),
                             tok::pedal_token(0),        tok::pedal_token(0),
                             tok::pedal_token(0),        tok::pedal_token(0)};
    };
    std::vector<tok::TokenSeq> refs(1);
    std::vector<tok::TokenSeq> stubbed(1);
    for (int v : {30, 50, 90, 110}) {
        tok::TokenSeq f = frame(v);
        refs[0].insert(refs[0].end(), f.begin(), f.end());
        tok::TokenSeq s = frame(64);
        stubbed[0].insert(stubbed[0].end(), s.begin(), s.end());
    }
    metrics::MetricReport copy = metrics::evaluate_testset(refs, refs);
    metrics::MetricReport stub = metrics::evaluate_testset(stubbed, refs);
    if (!(copy.velocity.js < stub.velocity.js)) {
        return {false, "exact copy does not beat the stub on velocity js"};
    }

    Rng rng(10014);
    tok::TokenSeq perf = testgen::random_score_tokens(rng, 30);
    std::vector<std::vector<tok::TokenSeq>> groups = {{perf, perf}, {perf, perf}};
    metrics::MetricReport hb = metrics::human_baseline(groups);
    if (hb.overall.js != 0.0) {
        return {false, "duplicated performances do not give js 0"};
    }
    if (std::abs(hb.overall.intersection - 1.0) > kMetricTol) {
        return {false, "duplicated performances do not give intersection 1"};
    }
    std::ostringstream detail;
    detail << "copy velocity js " << copy.velocity.js << " < stub " << stub.velocity.js
           << "; duplicate baseline js 0";
    return {true, detail.str()};
}

} // namespace

int main() {
    struct Criterion {
        const char* title;
        std::function<Outcome()> run;
    };
    std::vector<Criterion> criteria = {
        {"vocabulary layout and bijectivity", criterion_vocabulary},
        {"tokenizer round-trip on 1000 randomized pieces", criterion_tokenizer_roundtrip},
        {"64-fold self-attention compression", criterion_compression_cost},
        {"analytic gradients vs finite differences", criterion_gradients},
        {"masked-denoising loss wiring", criterion_loss_wiring},
        {"toy overfit below 0.1 within 5000 steps", criterion_overfit},
        {"expressive tempo map round-trip", criterion_tempo_roundtrip},
        {"metric oracles to 1e-12", criterion_metric_oracles},
        {"pitch constraint and block-wise stitching", criterion_pitch_and_blocking},
        {"parameter accounting vs 135M and 6-vs-2 ratio", criterion_parameter_accounting},
        {"metric ordering and leave-one-out baseline", criterion_metric_ordering},
    };

    int failures = 0;
    for (size_t i = 0; i < criteria.size(); ++i) {
        auto start = std::chrono::steady_clock::now();
        Outcome outcome;
        try {
            outcome = criteria[i].run();
        } catch (const std::exception& e) {
            outcome = {false, std::string("exception: ") + e.what()};
        }
        double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("%s %2zu/11 %s (%.2f s): %s\n", outcome.pass ? "PASS" : "FAIL", i + 1,
                    criteria[i].title, seconds, outcome.detail.c_str());
        std::fflush(stdout);
        if (!outcome.pass) ++failures;
    }
    if (failures) std::printf("%d criterion(s) failed\n", failures);
    return failures == 0 ? 0 : 1;
}

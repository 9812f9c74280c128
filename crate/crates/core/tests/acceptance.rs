//! End-to-end acceptance criteria. Runs without the libtest harness so that
//! every criterion prints exactly one PASS/FAIL line.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use m2s_add::binauralizer::{
    binauralize_with_conditioning, enforce_warpfield, warp_read, BinauralizerConfig, BinauralizerParams, Warpfield,
};
use m2s_add::dataio::fixtures::{synth_binaural_pairs, synth_fixture_corpus, FixtureCorpus, FixtureSpec};
use m2s_add::dataio::{ConditioningTrack, Waveform, N_FEATURES};
use m2s_add::evaluation::{compute_eer, score_trials, ScoreFile};
use m2s_add::frontend::{init_frontend, sincnet_forward, FrontendConfig};
use m2s_add::graph_attention::{gat_attention_weights, gat_forward, init_gat};
use m2s_add::model::{detector_logits, init_detector, submodules, M2SAddParams, ModelConfig, Variant};
use m2s_add::ndarray::{Array2, Array3, Axis, IxDyn};
use m2s_add::nn::{Init, Mode, ParamSet, Session};
use m2s_add::seeding::DEFAULT_SEED;
use m2s_add::tensor::{Tape, Tensor, Var};
use m2s_add::training::{
    cache_stereo, cached_eer, pretrain_converter, train, ConverterState, DetectorState, PretrainConfig, TrainConfig,
};
use m2s_add::config::Preset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn noise(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-scale..scale))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

// 1 ---------------------------------------------------------------------------

fn shape_contract() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::full();
    let params = init_detector(&cfg, DEFAULT_SEED).map_err(|e| e.to_string())?;
    let s = Session::inference(&params);
    s.enable_trace();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Var::constant(noise(&mut rng, &[1, 64600], 0.5));
    let y = detector_logits(&s, &cfg, Variant::DualBranch, &x, &x).map_err(|e| e.to_string())?;
    let trace: BTreeMap<String, Vec<usize>> = s.take_trace().into_iter().collect();
    let expected: [(&str, &[usize]); 17] = [
        ("left.sinc_conv", &[70, 64472]),
        ("left.sinc", &[1, 23, 21490]),
        ("left.res1", &[32, 23, 2387]),
        ("left.res5", &[64, 23, 29]),
        ("right.sinc_conv", &[70, 64472]),
        ("right.res5", &[64, 23, 29]),
        ("left.gat", &[32, 23]),
        ("left.pool", &[32, 14]),
        ("left.proj", &[32, 12]),
        ("right.gat", &[32, 29]),
        ("right.pool", &[32, 23]),
        ("right.proj", &[32, 12]),
        ("fusion.input", &[32, 12]),
        ("fusion.gat", &[16, 12]),
        ("fusion.pool", &[16, 7]),
        ("fusion.proj", &[1, 7]),
        ("classifier", &[2]),
    ];
    for (label, shape) in expected {
        let got = trace.get(label).ok_or_else(|| format!("{label} not traced"))?;
        check(got == shape, || format!("{label}: expected {shape:?}, got {got:?}"))?;
    }
    check(y.shape() == [1, 2], || format!("logits {:?}", y.shape()))?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{} shapes exact, {:.1}s", expected.len(), elapsed.as_secs_f64()))
}

// 2 ---------------------------------------------------------------------------

fn attention_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for g in 0..100 {
        let n = 1 + g % 32;
        let d = rng.gen_range(1..40);
        let scale = [0.1, 1.0, 10.0][g % 3];
        let h = Var::constant(noise(&mut rng, &[1, n, d], scale));
        let w = Var::constant(noise(&mut rng, &[d], 1.0));
        let alpha = gat_attention_weights(&h, &w);
        for col in alpha.value().index_axis(Axis(0), 0).columns() {
            worst = worst.max((col.sum() - 1.0).abs());
        }
    }
    check(worst <= 1e-6, || format!("column sum off by {worst:e}"))?;
    Ok(format!("100 graphs, max |sum - 1| = {worst:.1e}"))
}

// 3 ---------------------------------------------------------------------------

/// Central differences on `picks` scalars of `name`, compared with the
/// session gradient of `loss`.
fn fd_params(
    params: &ParamSet,
    name: &str,
    picks: usize,
    eps: f64,
    rng: &mut ChaCha8Rng,
    loss: &dyn Fn(&Session) -> Var,
) -> Result<f64, String> {
    let s = Session::new(params, Some(Tape::new()), Mode::Eval);
    let grads = s.gradients(&loss(&s));
    let n = params.get(name).ok_or_else(|| format!("no parameter {name}"))?.len();
    let mut worst: f64 = 0.0;
    for _ in 0..picks {
        let j = rng.gen_range(0..n);
        let eval = |delta: f64| {
            let mut p = params.clone();
            p.get_mut(name).unwrap().as_slice_mut().unwrap()[j] += delta;
            loss(&Session::inference(&p)).item()
        };
        let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
        let analytic = grads[name].as_slice().unwrap()[j];
        let e = rel_err(analytic, numeric);
        check(e <= 1e-3, || format!("{name}[{j}]: analytic {analytic:e}, numeric {numeric:e}"))?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn weighted_sum(y: &Var, rng_seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = noise(&mut rng, y.shape(), 1.0);
    y.mul(&Var::constant(w)).sum_all()
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut report = Vec::new();

    // sinc cutoffs (Hz-valued parameters)
    let fcfg = FrontendConfig::desk();
    let mut fp = ParamSet::new();
    init_frontend(&mut Init::new(&mut ChaCha8Rng::seed_from_u64(4), &mut fp), "left", &fcfg);
    let x = Var::constant(noise(&mut rng, &[1, fcfg.segment_len], 0.5));
    let sinc_loss = |s: &Session| weighted_sum(&sincnet_forward(s, "left", &fcfg, &x).unwrap(), 5);
    let mut w = 0.0f64;
    for name in ["left.sinc.low", "left.sinc.band"] {
        w = w.max(fd_params(&fp, name, 5, 1e-3, &mut rng, &sinc_loss)?);
    }
    report.push(format!("sinc {w:.1e}"));

    // GAT attention vector and projection
    let mut gp = ParamSet::new();
    init_gat(&mut Init::new(&mut ChaCha8Rng::seed_from_u64(6), &mut gp), "g", 64, 32);
    let h = Var::constant(noise(&mut rng, &[2, 23, 64], 1.0));
    let gat_loss = |s: &Session| weighted_sum(&gat_forward(s, "g", &h), 7);
    let mut w = 0.0f64;
    for name in ["g.att", "g.proj.weight"] {
        w = w.max(fd_params(&gp, name, 5, 1e-6, &mut rng, &gat_loss)?);
    }
    report.push(format!("gat {w:.1e}"));

    // warp application, positions kept off integer sample boundaries
    let len = 300;
    let xs = noise(&mut rng, &[1, len], 1.0);
    let ps = Array3::from_shape_fn((1, 2, len), |(_, e, t)| {
        (t as f64 - 3.0 - 2.0 * e as f64).max(0.0).floor() + 0.1 + 0.8 * ((t * 7 + e) % 11) as f64 / 11.0
    })
    .into_dyn();
    let warp_loss = |x: &Var, p: &Var| weighted_sum(&warp_read(x, p), 8);
    let tape = Tape::new();
    let (xv, pv) = (tape.leaf(xs.clone()), tape.leaf(ps.clone()));
    let grads = tape.backward(&warp_loss(&xv, &pv));
    let (gx, gp_) = (grads.get_or_zeros(&xv), grads.get_or_zeros(&pv));
    let mut w = 0.0f64;
    for which in 0..2 {
        for _ in 0..5 {
            let base = if which == 0 { &xs } else { &ps };
            let j = rng.gen_range(0..base.len());
            let eval = |delta: f64| {
                let mut t = base.clone();
                t.as_slice_mut().unwrap()[j] += delta;
                let (x, p) = if which == 0 { (t, ps.clone()) } else { (xs.clone(), t) };
                warp_loss(&Var::constant(x), &Var::constant(p)).item()
            };
            let numeric = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            let analytic = if which == 0 { &gx } else { &gp_ }.as_slice().unwrap()[j];
            let e = rel_err(analytic, numeric);
            check(e <= 1e-4, || format!("warp input {which} [{j}]: {analytic:e} vs {numeric:e}"))?;
            w = w.max(e);
        }
    }
    report.push(format!("warp {w:.1e}"));

    // full detector, every submodule
    let cfg = ModelConfig::desk();
    let dp = init_detector(&cfg, 9).map_err(|e| e.to_string())?;
    let l = Var::constant(noise(&mut rng, &[1, cfg.frontend.segment_len], 0.5));
    let r = Var::constant(noise(&mut rng, &[1, cfg.frontend.segment_len], 0.5));
    let model_loss = |s: &Session| {
        detector_logits(s, &cfg, Variant::DualBranch, &l, &r)
            .unwrap()
            .mul(&Var::from_vec(&[1, 2], vec![0.7, -1.3]))
            .sum_all()
    };
    let s = Session::new(&dp, Some(Tape::new()), Mode::Eval);
    let grads = s.gradients(&model_loss(&s));
    let mut w = 0.0f64;
    let mut probes = 0;
    for (label, names) in submodules(&dp) {
        for _ in 0..5 {
            let name = &names[rng.gen_range(0..names.len())];
            let j = rng.gen_range(0..dp.get(name).unwrap().len());
            let eps = if name.contains(".sinc.") { 1e-3 } else { 1e-6 };
            let eval = |delta: f64| {
                let mut p = dp.clone();
                p.get_mut(name).unwrap().as_slice_mut().unwrap()[j] += delta;
                model_loss(&Session::inference(&p)).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let analytic = grads[name.as_str()].as_slice().unwrap()[j];
            let e = rel_err(analytic, numeric);
            check(e <= 1e-3, || format!("{label} {name}[{j}]: {analytic:e} vs {numeric:e}"))?;
            w = w.max(e);
            probes += 1;
        }
    }
    report.push(format!("model {w:.1e} over {probes} probes"));
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!("{}, {:.1}s", report.join(", "), elapsed.as_secs_f64()))
}

// 4 ---------------------------------------------------------------------------

fn coincident_track(len: usize) -> ConditioningTrack {
    let mut f = Array2::zeros((N_FEATURES, len));
    f.row_mut(6).fill(1.0);
    f.row_mut(13).fill(1.0);
    ConditioningTrack::new(f, 16000).unwrap()
}

fn warp_physics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..1000 {
        let len = rng.gen_range(1..600);
        let kind = i % 4;
        let spread = rng.gen_range(0.1..200.0);
        let values = Array2::from_shape_fn((2, len), |(_, t)| match kind {
            0 => t as f64 + rng.gen_range(-spread..spread),
            1 => rng.gen_range(-1e3..1e4),
            2 => t as f64 - spread + (t as f64 * 0.05).sin() * spread,
            _ => t as f64 * rng.gen_range(0.0..3.0),
        });
        let p = enforce_warpfield(&Warpfield { values });
        check(p.is_monotone_causal() && p.values.iter().all(|&v| v >= 0.0), || {
            format!("warpfield {i} (kind {kind}, len {len}) violates monotonicity or causality")
        })?;
    }
    let cfg = BinauralizerConfig {
        ear_offset: 0.0,
        ..BinauralizerConfig::desk()
    };
    let params = BinauralizerParams::init(cfg, DEFAULT_SEED).map_err(|e| e.to_string())?;
    let x: Vec<f64> = (0..20000).map(|t| 0.4 * (t as f64 * 0.031).sin() + 0.1 * (t as f64 * 0.27).cos()).collect();
    let wave = Waveform::mono(x.clone(), 16000).unwrap();
    let y = binauralize_with_conditioning(&wave, &coincident_track(20000), &params).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for e in 0..2 {
        for (a, b) in y.channel(e).iter().zip(&x) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-6, || format!("identity converter error {worst:e}"))?;
    Ok(format!("1000 warpfields monotone and causal, identity error {worst:.1e}"))
}

// 5 ---------------------------------------------------------------------------

/// Threshold sweep over every midpoint of adjacent distinct scores, counted
/// directly; first crossing interpolated linearly.
fn brute_force_eer(bona: &[f64], spoof: &[f64]) -> f64 {
    let all: Vec<f64> = bona.iter().chain(spoof).copied().collect();
    let mut thresholds = vec![f64::NEG_INFINITY, f64::INFINITY];
    for &a in &all {
        let above = all.iter().copied().filter(|&b| b > a).fold(f64::INFINITY, f64::min);
        if above.is_finite() {
            let t = a / 2.0 + above / 2.0;
            if !thresholds.contains(&t) {
                thresholds.push(t);
            }
        }
    }
    thresholds.sort_by(f64::total_cmp);
    let rate = |t: f64| {
        let frr = bona.iter().filter(|&&x| x < t).count() as f64 / bona.len() as f64;
        let far = spoof.iter().filter(|&&x| x >= t).count() as f64 / spoof.len() as f64;
        (frr, far)
    };
    let mut prev = rate(thresholds[0]);
    if prev.0 >= prev.1 {
        return prev.0;
    }
    for &t in &thresholds[1..] {
        let cur = rate(t);
        if cur.0 >= cur.1 {
            if cur.0 == cur.1 {
                return cur.0;
            }
            let w = (prev.1 - prev.0) / ((prev.1 - prev.0) + (cur.0 - cur.1));
            return prev.0 + w * (cur.0 - prev.0);
        }
        prev = cur;
    }
    unreachable!("+inf threshold always crosses")
}

fn eer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..500 {
        let nb = rng.gen_range(1..=200);
        let ns = rng.gen_range(1..=200);
        let tied = i % 3 == 0;
        let shift = rng.gen_range(-2.0..2.0);
        let mut draw = |n: usize, s: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let v: f64 = s + rng.gen_range(-3.0..3.0);
                    if tied {
                        v.round()
                    } else {
                        v
                    }
                })
                .collect()
        };
        let bona = draw(nb, shift);
        let spoof = draw(ns, 0.0);
        let got = compute_eer(&bona, &spoof).map_err(|e| e.to_string())?.eer;
        let want = brute_force_eer(&bona, &spoof);
        check(got.to_bits() == want.to_bits(), || {
            format!("instance {i} (nb {nb}, ns {ns}): {got} vs oracle {want}")
        })?;
    }
    let bona: Vec<f64> = (0..50).map(|i| 10.0 + i as f64).collect();
    let spoof: Vec<f64> = (0..70).map(|i| -(i as f64)).collect();
    let perfect = compute_eer(&bona, &spoof).unwrap().eer;
    let inverted = compute_eer(&spoof, &bona).unwrap().eer;
    check(perfect == 0.0 && inverted == 1.0, || format!("separation {perfect}, inversion {inverted}"))?;
    Ok("500 instances bit-identical to the oracle, separation 0, inversion 1".into())
}

// 6 ---------------------------------------------------------------------------

fn fixture(seed: u64, n: usize) -> FixtureCorpus {
    let mut spec = FixtureSpec::new(seed, n, 16000, 0.5);
    spec.n_tracks = 4;
    synth_fixture_corpus(&spec).unwrap()
}

fn frozen_converter(seed: u64) -> BinauralizerParams {
    let mut c = BinauralizerParams::init(BinauralizerConfig::desk(), seed).unwrap();
    c.freeze();
    c
}

fn desk_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        preset: Preset::Desk,
        epochs,
        batch_size: 4,
        learning_rate: 1e-3,
        checkpoint_dir: None,
        ..TrainConfig::default()
    }
}

fn smoke_training() -> Outcome {
    let start = Instant::now();
    let corpus = fixture(DEFAULT_SEED, 12);
    let converter = frozen_converter(DEFAULT_SEED);
    let trials = cache_stereo(&corpus.protocol, &corpus, &corpus.pool, &converter, DEFAULT_SEED)
        .map_err(|e| e.to_string())?;
    let epochs = 40;
    let state = DetectorState::new(desk_config(epochs), converter).map_err(|e| e.to_string())?;
    let state = train(state, &trials, &[], &mut |_| {}).map_err(|e| e.to_string())?;
    let first = state.history[0].train_loss;
    let last = state.history[epochs - 1].train_loss;
    let eer = cached_eer(&state.params, &trials, Variant::DualBranch)
        .map_err(|e| e.to_string())?
        .ok_or("fixture lacks a class")?;
    let elapsed = start.elapsed();
    let detail = format!(
        "{} utterances, {epochs} epochs, loss {first:.4} -> {last:.4}, train EER {eer:.3}, {:.0}s",
        trials.len(),
        elapsed.as_secs_f64()
    );
    check(eer <= 0.05, || format!("train EER too high: {detail}"))?;
    check(last < first, || format!("loss did not decrease: {detail}"))?;
    check(elapsed < Duration::from_secs(600), || format!("too slow: {detail}"))?;
    Ok(detail)
}

// 7 ---------------------------------------------------------------------------

fn ablation_path() -> Outcome {
    let corpus = fixture(DEFAULT_SEED, 6);
    let params = M2SAddParams::init(ModelConfig::desk(), frozen_converter(DEFAULT_SEED), DEFAULT_SEED)
        .map_err(|e| e.to_string())?;
    let score = |variant| score_trials(&params, &corpus.protocol, &corpus, &corpus.pool, DEFAULT_SEED, variant);
    let full = score(Variant::DualBranch);
    let single = score(Variant::SingleBranch);
    check(full.errors.is_empty() && single.errors.is_empty(), || "scoring errors".into())?;
    check(full.scores.rows.len() == corpus.protocol.len(), || "missing rows".into())?;
    for (a, b) in full.scores.rows.iter().zip(&single.scores.rows) {
        check(a.score != b.score, || format!("{}: identical scores {}", a.utterance_id, a.score))?;
    }
    Ok(format!("{} utterances, every ablation score differs", full.scores.rows.len()))
}

// 8 ---------------------------------------------------------------------------

/// Fixture corpus, converter pretraining, detector training and scoring, all
/// from one seed.
fn fixture_pipeline(seed: u64) -> Result<ScoreFile, String> {
    let e = |e: m2s_add::Error| e.to_string();
    let pairs = synth_binaural_pairs(seed, 2, 4000, 16000).map_err(e)?;
    let pcfg = PretrainConfig {
        preset: Preset::Desk,
        epochs: 2,
        batch_size: 2,
        crop_len: 2000,
        seed,
        checkpoint_dir: None,
        ..PretrainConfig::default()
    };
    let mut converter = pretrain_converter(ConverterState::new(pcfg).map_err(e)?, &pairs, &mut |_, _| {})
        .map_err(e)?
        .params;
    converter.freeze();
    let corpus = fixture(seed, 8);
    let trials = cache_stereo(&corpus.protocol, &corpus, &corpus.pool, &converter, seed).map_err(e)?;
    let state = DetectorState::new(TrainConfig { seed, ..desk_config(2) }, converter).map_err(e)?;
    let state = train(state, &trials, &trials, &mut |_| {}).map_err(e)?;
    let outcome = score_trials(&state.params, &corpus.protocol, &corpus, &corpus.pool, seed, Variant::DualBranch);
    check(outcome.errors.is_empty(), || "scoring errors".into())?;
    Ok(outcome.scores)
}

fn determinism() -> Outcome {
    let a = fixture_pipeline(DEFAULT_SEED)?.to_text();
    let b = fixture_pipeline(DEFAULT_SEED)?.to_text();
    check(a == b, || "score files differ".into())?;
    check(!a.is_empty(), || "empty score file".into())?;
    Ok(format!("{} score rows bit-identical", a.lines().count()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("shape contract", shape_contract),
        ("attention normalization", attention_normalization),
        ("gradient checks", gradient_checks),
        ("warp physics", warp_physics),
        ("EER oracle equivalence", eer_oracle),
        ("smoke training", smoke_training),
        ("ablation path", ablation_path),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || id.ends_with(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {id} ({name}): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {id} ({name}): {why}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

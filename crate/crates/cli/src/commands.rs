use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use m2s_add::binauralizer::{binauralize_utterance, BinauralizerParams};
use m2s_add::checkpoint;
use m2s_add::config::{self, KeyValue};
use m2s_add::dataio::fixtures::{synth_binaural_pairs, synth_fixture_corpus, FixtureSpec};
use m2s_add::dataio::{
    load_conditioning, load_paired_corpus, load_waveform, parse_protocol, save_conditioning, write_paired_corpus,
    write_waveform, ConditioningTrack, Subset, WavDir, Waveform,
};
use m2s_add::evaluation::{per_attack_report, roc_points, roc_to_tsv, score_trials};
use m2s_add::persist::write_atomic;
use m2s_add::seeding::utterance_seed;
use m2s_add::spectrogram::{log_spectrogram, StftConfig};
use m2s_add::training::{
    self, cache_stereo, pretrain_converter, ConverterState, DetectorState, PretrainConfig, TrainConfig,
};

use crate::plot::{render_grid, Row};
use crate::RunArgs;

const DEFAULT_RATE: u32 = 16000;

fn layered<T: KeyValue>(base: T, run: &RunArgs) -> Result<T> {
    Ok(config::load(base, run.config.as_deref(), &run.set)?)
}

/// Converter parameters from a converter or detector checkpoint, frozen.
fn load_converter(path: &Path) -> Result<BinauralizerParams> {
    let mut params = match checkpoint::load::<ConverterState>(path) {
        Ok((_, state)) => state.params,
        Err(first) => match checkpoint::load::<DetectorState>(path) {
            Ok((_, state)) => state.params.binauralizer,
            Err(_) => return Err(first).with_context(|| format!("loading converter from {}", path.display())),
        },
    };
    params.freeze();
    Ok(params)
}

fn files_with_ext(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| exts.iter().any(|e| x == *e)))
        .collect();
    out.sort();
    Ok(out)
}

fn load_pool(dir: &Path, sample_rate: u32) -> Result<Vec<ConditioningTrack>> {
    let files = files_with_ext(dir, &["txt", "bin"])?;
    ensure!(!files.is_empty(), "no conditioning tracks (.txt or .bin) in {}", dir.display());
    files
        .iter()
        .map(|p| load_conditioning(p, Some(sample_rate)).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

fn load_mono(path: &Path, sample_rate: u32) -> Result<Waveform> {
    let wave = load_waveform(path, sample_rate).with_context(|| format!("reading {}", path.display()))?;
    Ok(if wave.is_mono() {
        wave
    } else {
        Waveform::mono(wave.downmix().to_vec(), wave.sample_rate())?
    })
}

pub fn pretrain(corpus: &Path, run: &RunArgs) -> Result<()> {
    let mut cfg = layered(PretrainConfig::default(), run)?;
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &run.out {
        cfg.checkpoint_dir = Some(out.clone());
    }
    if cfg.checkpoint_dir.is_none() {
        log::warn!("checkpoint_dir is none: the pretrained converter will not be saved");
    }
    let pairs = load_paired_corpus(corpus, cfg.converter_config().sample_rate)
        .with_context(|| format!("loading paired corpus {}", corpus.display()))?;
    log::info!("pretraining on {} pairs for {} epochs", pairs.len(), cfg.epochs);
    let state = pretrain_converter(ConverterState::new(cfg)?, &pairs, &mut |e, l| {
        log::info!("epoch {e}: loss {l:.6e}");
    })?;
    println!(
        "pretrained converter: {} epochs, final loss {:.6e}, fingerprint {}",
        state.epoch,
        state.losses.last().copied().unwrap_or(f64::NAN),
        state.params.fingerprint()
    );
    if let Some(d) = &state.config.checkpoint_dir {
        println!("checkpoint: {}", d.join(training::LAST_CHECKPOINT).display());
    }
    Ok(())
}

pub fn convert(input: &Path, ckpt: &Path, conditioning: &Path, seed: u64, out: &Path) -> Result<()> {
    let params = load_converter(ckpt)?;
    let sr = params.config.sample_rate;
    let pool = load_pool(conditioning, sr)?;
    let files = files_with_ext(input, &["wav"])?;
    ensure!(!files.is_empty(), "no .wav files in {}", input.display());
    let mut manifest = String::from("id\tsamples\tinput\toutput\n");
    let mut failures = 0;
    for path in &files {
        let id = stem(path);
        let target = out.join(format!("{id}.wav"));
        let result = load_mono(path, sr).and_then(|mono| {
            let stereo = binauralize_utterance(&mono, &pool, &params, utterance_seed(seed, &id))?;
            write_waveform(&target, &stereo)?;
            Ok(stereo.len())
        });
        match result {
            Ok(n) => manifest.push_str(&format!("{id}\t{n}\t{}\t{}\n", path.display(), target.display())),
            Err(e) => {
                failures += 1;
                eprintln!("error: {}: {e:#}", path.display());
            }
        }
    }
    write_atomic(&out.join("manifest.tsv"), manifest.as_bytes())?;
    println!("converted {} of {} files into {}", files.len() - failures, files.len(), out.display());
    if failures > 0 {
        bail!("{failures} file(s) failed to convert");
    }
    Ok(())
}

pub struct TrainInputs<'a> {
    pub protocol: &'a Path,
    pub audio: &'a Path,
    pub conditioning: &'a Path,
    pub converter: Option<&'a Path>,
    pub dev_protocol: Option<&'a Path>,
    pub dev_audio: Option<&'a Path>,
    pub resume: bool,
    pub run: &'a RunArgs,
}

fn apply_run(cfg: &mut TrainConfig, run: &RunArgs) {
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &run.out {
        cfg.checkpoint_dir = Some(out.clone());
    }
}

pub fn train(inp: TrainInputs<'_>) -> Result<()> {
    let state = if inp.resume {
        let mut probe = layered(TrainConfig::default(), inp.run)?;
        apply_run(&mut probe, inp.run);
        let dir = probe
            .checkpoint_dir
            .context("--resume needs --out or checkpoint_dir")?;
        let mut state = training::resume(&dir).with_context(|| format!("resuming from {}", dir.display()))?;
        let mut cfg = layered(state.config.clone(), inp.run)?;
        apply_run(&mut cfg, inp.run);
        cfg.checkpoint_dir = Some(dir);
        ensure!(
            cfg.preset == state.config.preset && cfg.variant == state.config.variant && cfg.seed == state.config.seed,
            "preset, variant and seed cannot change on resume"
        );
        state.config = cfg;
        log::info!("resuming after epoch {}", state.epoch);
        state
    } else {
        let mut cfg = layered(TrainConfig::default(), inp.run)?;
        apply_run(&mut cfg, inp.run);
        let path = inp.converter.context("--converter is required")?;
        DetectorState::new(cfg, load_converter(path)?)?
    };
    let sr = state.params.config.frontend.sample_rate;
    let pool = load_pool(inp.conditioning, sr)?;
    let seed = state.config.seed;
    let load_set = |protocol: &Path, audio: &Path, subset: Subset| -> Result<Vec<training::CachedTrial>> {
        let p = parse_protocol(protocol, subset)?;
        let store = WavDir {
            root: audio.to_path_buf(),
            sample_rate: sr,
        };
        cache_stereo(&p, &store, &pool, &state.params.binauralizer, seed)
            .with_context(|| format!("converting trials of {}", protocol.display()))
    };
    let train_set = load_set(inp.protocol, inp.audio, Subset::Train)?;
    let dev_set = match inp.dev_protocol {
        Some(p) => load_set(p, inp.dev_audio.unwrap_or(inp.audio), Subset::Dev)?,
        None => Vec::new(),
    };
    log::info!(
        "training {} on {} trials ({} dev), {} epochs",
        state.config.variant,
        train_set.len(),
        dev_set.len(),
        state.config.epochs
    );
    let state = training::train(state, &train_set, &dev_set, &mut |r| log::info!("{}", r.to_row()))?;
    if let Some(r) = state.history.last() {
        println!("epoch {} train loss {:.6}", r.epoch, r.train_loss);
    }
    if let Some((e, m)) = state.best {
        println!("best epoch {e} (selection metric {m:.6})");
    }
    if let Some(d) = &state.config.checkpoint_dir {
        println!("checkpoints: {}", d.display());
    }
    Ok(())
}

pub fn eval(ckpt: &Path, protocol: &Path, audio: &Path, conditioning: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let (stored_seed, state) = checkpoint::load::<DetectorState>(ckpt)
        .with_context(|| format!("loading detector checkpoint {}", ckpt.display()))?;
    let seed = seed.unwrap_or(stored_seed);
    let sr = state.params.config.frontend.sample_rate;
    let pool = load_pool(conditioning, sr)?;
    let protocol = parse_protocol(protocol, Subset::Eval)?;
    let store = WavDir {
        root: audio.to_path_buf(),
        sample_rate: sr,
    };
    let outcome = score_trials(&state.params, &protocol, &store, &pool, seed, state.config.variant);
    outcome.scores.write(&out.join("scores.txt"))?;
    for e in &outcome.errors {
        eprintln!("error: {}: {}", e.utterance_id, e.message);
    }
    let report = per_attack_report(&outcome.scores).context("computing EER report")?;
    write_atomic(&out.join("report.txt"), report.to_text().as_bytes())?;
    write_atomic(&out.join("report.tsv"), report.to_tsv().as_bytes())?;
    let (bona, spoof) = outcome.scores.split();
    write_atomic(&out.join("roc.tsv"), roc_to_tsv(&roc_points(&bona, &spoof)?).as_bytes())?;
    print!("{}", report.to_text());
    println!("scores: {}", out.join("scores.txt").display());
    if !outcome.errors.is_empty() {
        bail!("{} of {} trials failed", outcome.errors.len(), protocol.len());
    }
    Ok(())
}

pub struct VisualizeInputs<'a> {
    pub bonafide: &'a Path,
    pub fake: &'a Path,
    pub checkpoint: Option<&'a Path>,
    pub conditioning: Option<&'a Path>,
    pub bonafide_stereo: Option<&'a Path>,
    pub fake_stereo: Option<&'a Path>,
    pub seed: u64,
    pub out: &'a Path,
}

pub fn visualize(inp: VisualizeInputs<'_>) -> Result<()> {
    let converter = match (inp.bonafide_stereo, inp.fake_stereo) {
        (Some(_), Some(_)) => None,
        _ => {
            let ckpt = inp
                .checkpoint
                .context("--checkpoint and --conditioning are needed unless both stereo inputs are given")?;
            let cond = inp.conditioning.context("--conditioning is needed to convert")?;
            let params = load_converter(ckpt)?;
            let pool = load_pool(cond, params.config.sample_rate)?;
            Some((params, pool))
        }
    };
    let sr = converter.as_ref().map_or(DEFAULT_RATE, |(p, _)| p.config.sample_rate);
    let stft = StftConfig::for_rate(sr);
    let mut rows = Vec::new();
    for (title, mono_path, stereo_path) in [
        ("bonafide", inp.bonafide, inp.bonafide_stereo),
        ("fake", inp.fake, inp.fake_stereo),
    ] {
        let mono = load_mono(mono_path, sr)?;
        let stereo = match stereo_path {
            Some(p) => load_waveform(p, sr).with_context(|| format!("reading {}", p.display()))?,
            None => {
                let (params, pool) = converter.as_ref().expect("converter loaded");
                binauralize_utterance(&mono, pool, params, utterance_seed(inp.seed, &stem(mono_path)))?
            }
        };
        ensure!(stereo.channels() == 2, "{title}: stereo input must have 2 channels");
        let panels = [mono.channel(0), stereo.channel(0), stereo.channel(1)]
            .into_iter()
            .map(|x| log_spectrogram(x, stft))
            .collect::<m2s_add::Result<Vec<_>>>()
            .with_context(|| format!("{title} spectrogram"))?;
        rows.push(Row {
            title,
            panels,
            duration_s: mono.len() as f64 / sr as f64,
        });
    }
    let img = render_grid(&["mono", "left", "right"], &rows, sr as f64 / 2.0);
    let mut png = std::io::Cursor::new(Vec::new());
    img.write_to(&mut png, image::ImageFormat::Png)?;
    write_atomic(inp.out, &png.into_inner())?;
    println!("wrote {}", inp.out.display());
    Ok(())
}

pub fn fixtures(seed: u64, utterances: usize, tracks: usize, pairs: usize, pair_len: usize, out: &Path) -> Result<()> {
    let mut spec = FixtureSpec::new(seed, utterances, DEFAULT_RATE, 0.5);
    spec.n_tracks = tracks;
    let corpus = synth_fixture_corpus(&spec)?;
    for (id, wave) in &corpus.waveforms {
        write_waveform(&out.join("audio").join(format!("{id}.wav")), wave)?;
    }
    write_atomic(&out.join("protocol.txt"), corpus.protocol.to_text().as_bytes())?;
    for (i, track) in corpus.pool.iter().enumerate() {
        save_conditioning(&out.join("conditioning").join(format!("track_{i:02}.bin")), track)?;
    }
    let paired = synth_binaural_pairs(seed, pairs, pair_len, DEFAULT_RATE)?;
    write_paired_corpus(&out.join("paired"), &paired)?;
    println!(
        "fixture corpus in {}: {} utterances, {} conditioning tracks, {} paired items",
        out.display(),
        corpus.waveforms.len(),
        corpus.pool.len(),
        paired.len()
    );
    Ok(())
}


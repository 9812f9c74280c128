//! Seeded optimization of the detector (and pretraining of the converter),
//! weighted cross-entropy, per-epoch metrics and checkpoints.
//!
//! The full-scale recipe is the [`TrainConfig`] default: full preset, 400
//! epochs, batch 24, Adam with learning rate 1e-4 and weight decay 1e-4,
//! seed 1234, inverse-frequency class weights.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binauralizer::{binauralize_utterance, pretrain_step, BinauralizerConfig, BinauralizerParams, PretrainItem};
use crate::checkpoint::{self, Checkpointable, Kind};
use crate::config::{parse_bool, parse_num, KeyValue, Preset};
use crate::dataio::fixtures::BinauralPair;
use crate::dataio::{AudioStore, ConditioningTrack, Label, TrialEntry, TrialProtocol, Waveform};
use crate::error::{Error, Result};
use crate::evaluation::{compute_eer, ScoreFile, ScoreRow};
use crate::model::{detector_logits, logits_from_stereo, M2SAddParams, ModelConfig, Variant};
use crate::nn::{Adam, Mode, Session};
use crate::seeding::{derived_rng, utterance_seed, DEFAULT_SEED};
use crate::tensor::{Tape, Var};

pub const LAST_CHECKPOINT: &str = "last.json";
pub const BEST_CHECKPOINT: &str = "best.json";
pub const METRICS_LOG: &str = "metrics.log";
pub const MODEL_CARD: &str = "model_card.txt";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClassWeights {
    /// Inverse class frequency of the training protocol, summing to 2.
    Auto,
    /// `[bonafide, spoof]`.
    Fixed([f64; 2]),
}

impl std::fmt::Display for ClassWeights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClassWeights::Auto => f.write_str("auto"),
            ClassWeights::Fixed([b, s]) => write!(f, "{b},{s}"),
        }
    }
}

impl std::str::FromStr for ClassWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(ClassWeights::Auto);
        }
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 2 {
            return Err(Error::Config(format!("class weights {s:?}: expected auto or bonafide,spoof")));
        }
        Ok(ClassWeights::Fixed([parse_num(parts[0])?, parse_num(parts[1])?]))
    }
}

/// `[bonafide, spoof]` proportional to inverse class frequency, summing to 2.
pub fn inverse_frequency_weights(n_bonafide: usize, n_spoof: usize) -> Result<[f64; 2]> {
    if n_bonafide == 0 || n_spoof == 0 {
        return Err(Error::Validation(format!(
            "class weights need both classes (bonafide {n_bonafide}, spoof {n_spoof})"
        )));
    }
    let total = (n_bonafide + n_spoof) as f64;
    Ok([2.0 * n_spoof as f64 / total, 2.0 * n_bonafide as f64 / total])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub class_weights: ClassWeights,
    /// Only `adam` is supported.
    pub optimizer: String,
    /// `None` keeps everything in memory.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Full,
            variant: Variant::DualBranch,
            epochs: 400,
            batch_size: 24,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            seed: DEFAULT_SEED,
            class_weights: ClassWeights::Auto,
            optimizer: "adam".into(),
            checkpoint_dir: Some(PathBuf::from("checkpoints")),
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        match self.preset {
            Preset::Full => ModelConfig::full(),
            Preset::Desk => ModelConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be positive and weight_decay non-negative".into());
        }
        if let ClassWeights::Fixed(w) = self.class_weights {
            if !w.iter().all(|v| *v > 0.0 && v.is_finite()) {
                return bad(format!("class weights must be positive, got {w:?}"));
            }
        }
        if self.optimizer != "adam" {
            return bad(format!("unsupported optimizer {:?} (only adam)", self.optimizer));
        }
        Ok(())
    }
}

fn path_value(v: &str) -> Option<PathBuf> {
    (v != "none" && !v.is_empty()).then(|| PathBuf::from(v))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

impl KeyValue for TrainConfig {
    const KEYS: &'static [&'static str] = &[
        "preset",
        "variant",
        "epochs",
        "batch_size",
        "learning_rate",
        "weight_decay",
        "seed",
        "class_weights",
        "optimizer",
        "checkpoint_dir",
    ];

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => self.preset = value.parse()?,
            "variant" => self.variant = value.parse()?,
            "epochs" => self.epochs = parse_num(value)?,
            "batch_size" => self.batch_size = parse_num(value)?,
            "learning_rate" => self.learning_rate = parse_num(value)?,
            "weight_decay" => self.weight_decay = parse_num(value)?,
            "seed" => self.seed = parse_num(value)?,
            "class_weights" => self.class_weights = value.parse()?,
            "optimizer" => self.optimizer = value.to_string(),
            "checkpoint_dir" => self.checkpoint_dir = path_value(value),
            _ => unreachable!("key checked by caller"),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("preset", self.preset.to_string()),
            ("variant", self.variant.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("class_weights", self.class_weights.to_string()),
            ("optimizer", self.optimizer.clone()),
            ("checkpoint_dir", path_text(&self.checkpoint_dir)),
        ]
    }
}

/// Mean over the batch of `-w[y] * log softmax(logits)[y]`.
pub fn weighted_ce_loss(logits: &Var, labels: &[usize], weights: [f64; 2]) -> Result<Var> {
    let b = logits.shape()[0];
    if logits.shape() != [b, 2] || labels.len() != b {
        return Err(Error::shape("weighted cross-entropy", &[labels.len(), 2], logits.shape()));
    }
    if let Some(v) = logits.value().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            value: *v,
            context: "logits".into(),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Validation(format!("label index {y} out of range")));
    }
    let mask = Array2::from_shape_fn((b, 2), |(i, c)| if labels[i] == c { weights[c] } else { 0.0 });
    Ok(logits
        .log_softmax(1)
        .mul(&Var::constant(mask.into_dyn()))
        .sum_all()
        .mul_scalar(-1.0 / b as f64))
}

/// A trial with its converted stereo audio.
#[derive(Debug, Clone)]
pub struct CachedTrial {
    pub entry: TrialEntry,
    pub stereo: Waveform,
}

/// Converts every trial once with the frozen converter; the conditioning
/// draw of each trial is seeded from `(seed, utterance id)`.
pub fn cache_stereo(
    protocol: &TrialProtocol,
    store: &dyn AudioStore,
    pool: &[ConditioningTrack],
    converter: &BinauralizerParams,
    seed: u64,
) -> Result<Vec<CachedTrial>> {
    protocol
        .entries
        .iter()
        .map(|e| {
            let mono = store.load(&e.utterance_id)?;
            let stereo = binauralize_utterance(&mono, pool, converter, utterance_seed(seed, &e.utterance_id))?;
            Ok(CachedTrial {
                entry: e.clone(),
                stereo,
            })
        })
        .collect()
}

/// A uniformly chosen `seg_len` window (cyclically padded) of both channels.
pub fn draw_segment(stereo: &Waveform, seg_len: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let len = stereo.len();
    let k = rng.gen_range(0..len.div_ceil(seg_len));
    let cut = |c: usize| {
        let ch = stereo.channel(c);
        (0..seg_len).map(|i| ch[(k * seg_len + i) % len]).collect()
    };
    (cut(0), cut(1))
}

/// Eval-mode scores of cached trials.
pub fn score_cached(params: &M2SAddParams, trials: &[CachedTrial], variant: Variant) -> Result<ScoreFile> {
    let rows = trials
        .iter()
        .map(|t| {
            let logits = logits_from_stereo(&t.stereo, params, variant)?;
            Ok(ScoreRow {
                utterance_id: t.entry.utterance_id.clone(),
                attack_id: t.entry.attack_id.clone(),
                label: t.entry.label,
                score: logits.score(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreFile { rows })
}

/// EER of cached trials, `None` if a class is missing.
pub fn cached_eer(params: &M2SAddParams, trials: &[CachedTrial], variant: Variant) -> Result<Option<f64>> {
    let sf = score_cached(params, trials, variant)?;
    let (b, s) = sf.split();
    if b.is_empty() || s.is_empty() {
        return Ok(None);
    }
    Ok(Some(compute_eer(&b, &s)?.eer))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_eer: Option<f64>,
    /// Seconds since the run (or resumed run) started.
    pub wallclock: f64,
}

impl EpochRecord {
    /// `epoch train_loss dev_eer wallclock`; a missing dev EER prints as `nan`.
    pub fn to_row(&self) -> String {
        format!(
            "{} {:.6} {} {:.2}",
            self.epoch,
            self.train_loss,
            self.dev_eer.map_or("nan".to_string(), |e| format!("{e:.6}")),
            self.wallclock
        )
    }
}

/// Everything needed to resume or evaluate a detector run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub params: M2SAddParams,
    pub optimizer: Adam,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// `(epoch, selection metric)` of the best epoch so far.
    pub best: Option<(usize, f64)>,
}

impl Checkpointable for DetectorState {
    const KIND: Kind = Kind::Detector;
}

impl DetectorState {
    /// Fresh detector seeded from `config.seed` around the frozen converter.
    pub fn new(config: TrainConfig, converter: BinauralizerParams) -> Result<Self> {
        config.validate()?;
        let params = M2SAddParams::init(config.model_config(), converter, config.seed)?;
        Ok(Self {
            optimizer: Adam::new(config.learning_rate, config.weight_decay),
            params,
            config,
            epoch: 0,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn model_card(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        out.push_str("M2S-ADD detector\n");
        out.push_str(&format!("variant: {}\npreset: {}\n", c.variant, c.preset));
        out.push_str(&format!("seed: {}\nepochs completed: {}\n", c.seed, self.epoch));
        out.push_str(&format!(
            "optimizer: adam, learning rate {}, weight decay {}, batch {}\n",
            c.learning_rate, c.weight_decay, c.batch_size
        ));
        out.push_str(&format!("class weights: {}\n", c.class_weights));
        out.push_str(&format!(
            "detector parameters: {} scalars, fingerprint {}\n",
            self.params.detector.num_scalars(),
            self.params.detector.fingerprint()
        ));
        out.push_str(&format!(
            "converter: frozen={}, trained={}, fingerprint {}\n",
            self.params.binauralizer.frozen,
            self.params.binauralizer.trained,
            self.params.binauralizer.fingerprint()
        ));
        if let Some((e, m)) = self.best {
            out.push_str(&format!("best epoch: {e} (selection metric {m:.6})\n"));
        }
        out.push_str(
            "score: bonafide logit minus spoof logit; utterances longer than one segment average segment logits\n",
        );
        out
    }
}

/// One pass over `trials` in a seeded order, one random segment per trial.
/// Returns the mean training loss.
pub fn train_epoch(state: &mut DetectorState, trials: &[CachedTrial], weights: [f64; 2], epoch: usize) -> Result<f64> {
    let cfg = state.config.clone();
    let model_cfg = state.params.config.clone();
    let seg = model_cfg.frontend.segment_len;
    let mut rng = derived_rng(cfg.seed, &format!("epoch/{epoch}"));
    let mut order: Vec<usize> = (0..trials.len()).collect();
    order.shuffle(&mut rng);
    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let b = chunk.len();
        let mut left = Array2::zeros((b, seg));
        let mut right = Array2::zeros((b, seg));
        let mut labels = Vec::with_capacity(b);
        for (row, &i) in chunk.iter().enumerate() {
            let (l, r) = draw_segment(&trials[i].stereo, seg, &mut rng);
            left.row_mut(row).assign(&Array1::from(l));
            right.row_mut(row).assign(&Array1::from(r));
            labels.push(trials[i].entry.label.index());
        }
        let (grads, stats, loss) = {
            let s = Session::new(&state.params.detector, Some(Tape::new()), Mode::Train);
            let logits = detector_logits(
                &s,
                &model_cfg,
                cfg.variant,
                &Var::constant(left.into_dyn()),
                &Var::constant(right.into_dyn()),
            )?;
            let loss = weighted_ce_loss(&logits, &labels, weights)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    value,
                    context: format!("training loss at epoch {epoch}"),
                });
            }
            (s.gradients(&loss), s.take_stats(), value)
        };
        state.optimizer.step(&mut state.params.detector, &grads);
        state.params.detector.update_running_stats(&stats);
        total += loss * b as f64;
    }
    Ok(total / trials.len() as f64)
}

fn append_line(path: &Path, line: &str, truncate: bool) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(!truncate)
        .write(true)
        .truncate(truncate)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains from `state` until `state.config.epochs` epochs are complete.
///
/// The dev EER selects the best epoch; without a usable dev set the training
/// loss does. With a checkpoint directory, `last.json` is rewritten every
/// epoch, `best.json` on improvement, and one row per epoch is appended to
/// `metrics.log`. A non-finite loss aborts the run, leaving the previous
/// epoch's checkpoint in place.
pub fn train(
    mut state: DetectorState,
    train_set: &[CachedTrial],
    dev_set: &[CachedTrial],
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<DetectorState> {
    state.config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if !state.params.binauralizer.frozen {
        return Err(Error::Validation("converter must be frozen before detector training".into()));
    }
    let weights = match state.config.class_weights {
        ClassWeights::Fixed(w) => w,
        ClassWeights::Auto => {
            let n = |l: Label| train_set.iter().filter(|t| t.entry.label == l).count();
            inverse_frequency_weights(n(Label::Bonafide), n(Label::Spoof))?
        }
    };
    let dir = state.config.checkpoint_dir.clone();
    if let Some(d) = &dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        if state.epoch == 0 {
            std::fs::write(d.join(METRICS_LOG), "").map_err(|e| Error::io(d.join(METRICS_LOG), e))?;
        }
    }
    let start = Instant::now();
    while state.epoch < state.config.epochs {
        let epoch = state.epoch + 1;
        let train_loss = train_epoch(&mut state, train_set, weights, epoch)?;
        let dev_eer = if dev_set.is_empty() {
            None
        } else {
            cached_eer(&state.params, dev_set, state.config.variant)?
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            dev_eer,
            wallclock: start.elapsed().as_secs_f64(),
        };
        log::info!("{}", record.to_row());
        let metric = dev_eer.unwrap_or(train_loss);
        let improved = state.best.is_none_or(|(_, m)| metric < m);
        if improved {
            state.best = Some((epoch, metric));
        }
        state.epoch = epoch;
        state.history.push(record.clone());
        if let Some(d) = &dir {
            append_line(&d.join(METRICS_LOG), &record.to_row(), false)?;
            checkpoint::save(&d.join(LAST_CHECKPOINT), state.config.seed, &state)?;
            if improved {
                checkpoint::save(&d.join(BEST_CHECKPOINT), state.config.seed, &state)?;
            }
            crate::persist::write_atomic(&d.join(MODEL_CARD), state.model_card().as_bytes())?;
        }
        on_epoch(&record);
    }
    Ok(state)
}

/// Loads `last.json` from a checkpoint directory for resumption.
pub fn resume(dir: &Path) -> Result<DetectorState> {
    Ok(checkpoint::load::<DetectorState>(&dir.join(LAST_CHECKPOINT))?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub preset: Preset,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Random crop length per item and epoch; 0 uses the converter segment length.
    pub crop_len: usize,
    pub phase_loss: bool,
    pub phase_weight: f64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Full,
            epochs: 100,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: DEFAULT_SEED,
            crop_len: 0,
            phase_loss: false,
            phase_weight: 0.01,
            checkpoint_dir: Some(PathBuf::from("checkpoints/converter")),
        }
    }
}

impl PretrainConfig {
    pub fn converter_config(&self) -> BinauralizerConfig {
        let base = match self.preset {
            Preset::Full => BinauralizerConfig::full(),
            Preset::Desk => BinauralizerConfig::desk(),
        };
        BinauralizerConfig {
            phase_loss: self.phase_loss,
            phase_weight: self.phase_weight,
            ..base
        }
    }

    fn crop(&self) -> usize {
        if self.crop_len == 0 {
            self.converter_config().segment_len
        } else {
            self.crop_len
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.phase_weight >= 0.0) {
            return Err(Error::Config("learning_rate must be positive, phase_weight non-negative".into()));
        }
        self.converter_config().validate()
    }
}

impl KeyValue for PretrainConfig {
    const KEYS: &'static [&'static str] = &[
        "preset",
        "epochs",
        "batch_size",
        "learning_rate",
        "seed",
        "crop_len",
        "phase_loss",
        "phase_weight",
        "checkpoint_dir",
    ];

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => self.preset = value.parse()?,
            "epochs" => self.epochs = parse_num(value)?,
            "batch_size" => self.batch_size = parse_num(value)?,
            "learning_rate" => self.learning_rate = parse_num(value)?,
            "seed" => self.seed = parse_num(value)?,
            "crop_len" => self.crop_len = parse_num(value)?,
            "phase_loss" => self.phase_loss = parse_bool(value)?,
            "phase_weight" => self.phase_weight = parse_num(value)?,
            "checkpoint_dir" => self.checkpoint_dir = path_value(value),
            _ => unreachable!("key checked by caller"),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("preset", self.preset.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("seed", self.seed.to_string()),
            ("crop_len", self.crop_len.to_string()),
            ("phase_loss", self.phase_loss.to_string()),
            ("phase_weight", self.phase_weight.to_string()),
            ("checkpoint_dir", path_text(&self.checkpoint_dir)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConverterState {
    pub params: BinauralizerParams,
    pub optimizer: Adam,
    pub config: PretrainConfig,
    pub epoch: usize,
    /// Mean loss of each completed epoch.
    pub losses: Vec<f64>,
}

impl Checkpointable for ConverterState {
    const KIND: Kind = Kind::Binauralizer;
}

impl ConverterState {
    pub fn new(config: PretrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: BinauralizerParams::init(config.converter_config(), config.seed)?,
            optimizer: Adam::new(config.learning_rate, 0.0),
            config,
            epoch: 0,
            losses: Vec::new(),
        })
    }

    pub fn model_card(&self) -> String {
        let c = &self.params.config;
        format!(
            "M2S converter\npreset: {}\nseed: {}\nepochs completed: {}\nsegment length: {}\nwarpnet: {} layers, kernel {}, {} channels\nconvnet: {} blocks, dilations {:?}, kernel {}, {} channels, receptive field {}\nloss: L2{}\nfinal loss: {}\nfingerprint: {}\n",
            self.config.preset,
            self.config.seed,
            self.epoch,
            c.segment_len,
            c.warpnet_layers,
            c.warpnet_kernel,
            c.warpnet_channels,
            c.convnet_blocks,
            c.convnet_dilations,
            c.convnet_kernel,
            c.convnet_channels,
            c.receptive_field(),
            if c.phase_loss { format!(" + {} * phase", c.phase_weight) } else { String::new() },
            self.losses.last().map_or("n/a".into(), |l| format!("{l:.6e}")),
            self.params.fingerprint()
        )
    }
}

fn crop_item(pair: &BinauralPair, len: usize, rng: &mut impl Rng) -> PretrainItem {
    let n = pair.mono.len();
    let off = rng.gen_range(0..=n - len);
    PretrainItem {
        mono: pair.mono.channel(0).slice(ndarray::s![off..off + len]).to_owned(),
        conditioning: pair.conditioning.window(off, len),
        target: pair.stereo.samples().slice(ndarray::s![.., off..off + len]).to_owned(),
    }
}

/// Pretrains the converter on paired data until `config.epochs` epochs are
/// complete. Writes `last.json`, `model_card.txt` and a `pretrain.log` row
/// (`epoch loss wallclock`) per epoch when a checkpoint directory is set.
pub fn pretrain_converter(
    mut state: ConverterState,
    pairs: &[BinauralPair],
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<ConverterState> {
    state.config.validate()?;
    let crop = state.config.crop();
    if pairs.is_empty() {
        return Err(Error::Validation("pretraining corpus is empty".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.mono.len() < crop || p.conditioning.len() < crop) {
        return Err(Error::Validation(format!(
            "pretraining item of {} samples is shorter than the crop length {crop}",
            p.mono.len()
        )));
    }
    let dir = state.config.checkpoint_dir.clone();
    if let Some(d) = &dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        if state.epoch == 0 {
            std::fs::write(d.join("pretrain.log"), "").map_err(|e| Error::io(d.join("pretrain.log"), e))?;
        }
    }
    let start = Instant::now();
    while state.epoch < state.config.epochs {
        let epoch = state.epoch + 1;
        let mut rng = derived_rng(state.config.seed, &format!("pretrain/{epoch}"));
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(state.config.batch_size) {
            let batch: Vec<PretrainItem> = chunk.iter().map(|&i| crop_item(&pairs[i], crop, &mut rng)).collect();
            total += pretrain_step(&mut state.params, &mut state.optimizer, &batch)? * chunk.len() as f64;
        }
        let loss = total / pairs.len() as f64;
        state.epoch = epoch;
        state.losses.push(loss);
        log::info!("pretrain epoch {epoch} loss {loss:.6e}");
        if let Some(d) = &dir {
            append_line(
                &d.join("pretrain.log"),
                &format!("{epoch} {loss:.9e} {:.2}", start.elapsed().as_secs_f64()),
                false,
            )?;
            checkpoint::save(&d.join(LAST_CHECKPOINT), state.config.seed, &state)?;
            crate::persist::write_atomic(&d.join(MODEL_CARD), state.model_card().as_bytes())?;
        }
        on_epoch(epoch, loss);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::layered;
    use crate::dataio::fixtures::{synth_binaural_pairs, synth_fixture_corpus, FixtureSpec};
    use crate::tensor::Tensor;
    use ndarray::IxDyn;

    fn logits(rows: &[[f64; 2]]) -> Var {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Var::constant(Tensor::from_shape_vec(IxDyn(&[rows.len(), 2]), flat).unwrap())
    }

    #[test]
    fn weighted_ce_hand_values() {
        let ln2 = std::f64::consts::LN_2;
        let l = weighted_ce_loss(&logits(&[[0.0, 0.0]]), &[0], [1.0, 1.0]).unwrap().item();
        assert!((l - ln2).abs() < 1e-12);
        let l = weighted_ce_loss(&logits(&[[0.0, 0.0]]), &[0], [2.0, 1.0]).unwrap().item();
        assert!((l - 2.0 * ln2).abs() < 1e-12);
        // plain batch mean, not normalized by the weight sum
        let l = weighted_ce_loss(&logits(&[[0.0, 0.0], [0.0, 0.0]]), &[0, 1], [2.0, 1.0]).unwrap().item();
        assert!((l - 1.5 * ln2).abs() < 1e-12);
        let l = weighted_ce_loss(&logits(&[[20.0, -20.0], [-20.0, 20.0]]), &[0, 1], [1.0, 1.0]).unwrap().item();
        assert!(l <= 1e-8);
        assert!(weighted_ce_loss(&logits(&[[f64::NAN, 0.0]]), &[0], [1.0, 1.0]).is_err());
        assert!(weighted_ce_loss(&logits(&[[0.0, 0.0]]), &[2], [1.0, 1.0]).is_err());
        assert!(weighted_ce_loss(&logits(&[[0.0, 0.0]]), &[0, 1], [1.0, 1.0]).is_err());
    }

    #[test]
    fn inverse_frequency_weights_sum_to_two() {
        let w = inverse_frequency_weights(2580, 22800).unwrap();
        assert!((w[0] - 2.0 * 22800.0 / 25380.0).abs() < 1e-15);
        assert!((w[1] - 2.0 * 2580.0 / 25380.0).abs() < 1e-15);
        assert!((w[0] + w[1] - 2.0).abs() < 1e-12);
        assert!(inverse_frequency_weights(0, 3).is_err());
    }

    #[test]
    fn config_layers_and_rejects_unknown_keys() {
        let env = |k: &str| (k == "M2S_ADD_EPOCHS").then(|| "5".to_string());
        let cfg = layered(
            TrainConfig::default(),
            None,
            env,
            &["preset=desk".into(), "class_weights=1,3".into(), "checkpoint_dir=none".into()],
        )
        .unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.preset, Preset::Desk);
        assert_eq!(cfg.class_weights, ClassWeights::Fixed([1.0, 3.0]));
        assert_eq!(cfg.checkpoint_dir, None);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.cfg");
        std::fs::write(&p, cfg.to_text()).unwrap();
        let back = layered(TrainConfig::default(), Some(&p), |_| None, &[]).unwrap();
        assert_eq!(back, cfg);
        let err = layered(TrainConfig::default(), None, |_| None, &["lr=1".into()]).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let bad = TrainConfig {
            optimizer: "sgd".into(),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let p = layered(PretrainConfig::default(), None, |_| None, &["phase_loss=yes".into()]).unwrap();
        assert!(p.phase_loss && p.converter_config().phase_loss);
    }

    fn setup(n: usize, seed: u64) -> (Vec<CachedTrial>, BinauralizerParams) {
        let mut spec = FixtureSpec::new(seed, n, 16000, 0.5);
        spec.n_tracks = 2;
        let corpus = synth_fixture_corpus(&spec).unwrap();
        let mut conv = BinauralizerParams::init(BinauralizerConfig::desk(), seed).unwrap();
        conv.freeze();
        let trials = cache_stereo(&corpus.protocol, &corpus, &corpus.pool, &conv, seed).unwrap();
        (trials, conv)
    }

    fn desk(epochs: usize, dir: Option<&Path>) -> TrainConfig {
        TrainConfig {
            preset: Preset::Desk,
            epochs,
            batch_size: 4,
            learning_rate: 1e-3,
            checkpoint_dir: dir.map(Path::to_path_buf),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn runs_are_seeded_and_resume_exactly() {
        let (trials, conv) = setup(4, 7);
        let dir = tempfile::tempdir().unwrap();
        let full = train(
            DetectorState::new(desk(3, Some(dir.path())), conv.clone()).unwrap(),
            &trials,
            &trials,
            &mut |_| {},
        )
        .unwrap();

        let again = train(DetectorState::new(desk(1, None), conv.clone()).unwrap(), &trials, &[], &mut |_| {}).unwrap();
        assert_eq!(again.history[0].train_loss.to_bits(), full.history[0].train_loss.to_bits());
        let other = DetectorState::new(TrainConfig { seed: 8, ..desk(1, None) }, conv.clone()).unwrap();
        assert_ne!(other.params.detector.fingerprint(), again.params.detector.fingerprint());

        // stop after 2 epochs, reload, finish
        let part_dir = tempfile::tempdir().unwrap();
        train(
            DetectorState::new(desk(2, Some(part_dir.path())), conv.clone()).unwrap(),
            &trials,
            &trials,
            &mut |_| {},
        )
        .unwrap();
        let (seed, _) = checkpoint::load::<DetectorState>(&part_dir.path().join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(seed, 1234);
        let mut resumed = resume(part_dir.path()).unwrap();
        assert_eq!(resumed.epoch, 2);
        resumed.config.epochs = 3;
        let resumed = train(resumed, &trials, &trials, &mut |_| {}).unwrap();
        assert_eq!(resumed.history[2].train_loss.to_bits(), full.history[2].train_loss.to_bits());
        assert_eq!(resumed.params.detector.fingerprint(), full.params.detector.fingerprint());

        // the converter never moves
        assert_eq!(full.params.binauralizer.fingerprint(), conv.fingerprint());

        let log = std::fs::read_to_string(dir.path().join(METRICS_LOG)).unwrap();
        let rows: Vec<&str> = log.lines().collect();
        assert_eq!(rows.len(), 3);
        for (i, row) in rows.iter().enumerate() {
            let f: Vec<&str> = row.split_whitespace().collect();
            assert_eq!(f.len(), 4);
            assert_eq!(f[0], (i + 1).to_string());
            assert!(f[1].parse::<f64>().unwrap().is_finite());
        }
        let (_, best) = checkpoint::load::<DetectorState>(&dir.path().join(BEST_CHECKPOINT)).unwrap();
        assert_eq!(Some(best.epoch), full.best.map(|b| b.0));
        assert!(std::fs::read_to_string(dir.path().join(MODEL_CARD)).unwrap().contains("seed: 1234"));
    }

    #[test]
    fn loss_decreases_on_a_small_fixture() {
        let (trials, conv) = setup(4, 3);
        let state = train(DetectorState::new(desk(6, None), conv).unwrap(), &trials, &[], &mut |_| {}).unwrap();
        let losses: Vec<f64> = state.history.iter().map(|r| r.train_loss).collect();
        assert!(losses[5] < losses[0], "{losses:?}");
        assert!(state.history.iter().all(|r| r.dev_eer.is_none()));
    }

    #[test]
    fn unfrozen_converter_is_rejected() {
        let (trials, _) = setup(2, 1);
        let mut state = DetectorState::new(desk(1, None), {
            let mut c = BinauralizerParams::init(BinauralizerConfig::desk(), 1).unwrap();
            c.freeze();
            c
        })
        .unwrap();
        state.params.binauralizer.frozen = false;
        assert!(train(state, &trials, &[], &mut |_| {}).is_err());
    }

    #[test]
    fn pretraining_logs_each_epoch() {
        let pairs = synth_binaural_pairs(5, 3, 4000, 16000).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = PretrainConfig {
            preset: Preset::Desk,
            epochs: 3,
            batch_size: 2,
            crop_len: 2000,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..PretrainConfig::default()
        };
        let mut seen = Vec::new();
        let state = pretrain_converter(ConverterState::new(cfg.clone()).unwrap(), &pairs, &mut |e, l| seen.push((e, l))).unwrap();
        assert_eq!(seen.len(), 3);
        let log = std::fs::read_to_string(dir.path().join("pretrain.log")).unwrap();
        assert_eq!(log.lines().count(), 3);
        let (seed, back) = checkpoint::load::<ConverterState>(&dir.path().join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(seed, 1234);
        assert_eq!(back.params.fingerprint(), state.params.fingerprint());
        let again = pretrain_converter(ConverterState::new(PretrainConfig { checkpoint_dir: None, ..cfg }).unwrap(), &pairs, &mut |_, _| {}).unwrap();
        assert_eq!(again.params.fingerprint(), state.params.fingerprint());
        let too_long = PretrainConfig {
            crop_len: 5000,
            checkpoint_dir: None,
            ..PretrainConfig::default()
        };
        assert!(pretrain_converter(ConverterState::new(too_long).unwrap(), &pairs, &mut |_, _| {}).is_err());
    }
}

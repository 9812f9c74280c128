//! The detector: frozen converter, a spectral-graph branch on the left
//! channel, a temporal-graph branch on the right channel, multiplicative
//! fusion, a fusion graph encoder and a two-way classifier.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binauralizer::{binauralize_utterance, BinauralizerParams};
use crate::dataio::{segment_utterance, ConditioningTrack, Waveform};
use crate::error::{Error, Result};
use crate::frontend::{encode, init_frontend, to_graph_spectral, to_graph_temporal, FrontendConfig};
use crate::graph_attention::{gat_forward, graph_pool, init_gat, init_pool, pooled_count, project_nodes, record_graph, ProjectAxis};
use crate::nn::{Init, ParamSet, Session};
use crate::tensor::Var;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    /// Feature width after the branch GAT layers.
    pub branch_dim: usize,
    /// Feature width after the fusion GAT layer.
    pub fusion_dim: usize,
    /// Node count both branch graphs are projected to before fusion.
    pub proj_nodes: usize,
    pub k_spectral: f64,
    pub k_temporal: f64,
    pub k_fusion: f64,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            frontend: FrontendConfig::full(),
            branch_dim: 32,
            fusion_dim: 16,
            proj_nodes: 12,
            k_spectral: 0.6,
            k_temporal: 0.8,
            k_fusion: 0.58,
        }
    }

    /// Same graph stages on the reduced frontend.
    pub fn desk() -> Self {
        Self {
            frontend: FrontendConfig::desk(),
            ..Self::full()
        }
    }

    pub fn encoder_dim(&self) -> usize {
        self.frontend.output_shape()[0]
    }

    pub fn spectral_nodes(&self) -> usize {
        self.frontend.output_shape()[1]
    }

    pub fn temporal_nodes(&self) -> usize {
        self.frontend.output_shape()[2]
    }

    /// Nodes kept by a branch pool before projection.
    pub fn branch_pooled(&self, branch: Branch) -> usize {
        match branch {
            Branch::Spectral => pooled_count(self.spectral_nodes(), self.k_spectral),
            Branch::Temporal => pooled_count(self.temporal_nodes(), self.k_temporal),
        }
    }

    /// Length of the flattened embedding fed to the classifier.
    pub fn embedding_len(&self) -> usize {
        pooled_count(self.proj_nodes, self.k_fusion)
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.branch_dim == 0 || self.fusion_dim == 0 || self.proj_nodes == 0 {
            return bad("layer widths and projected node count must be positive");
        }
        for k in [self.k_spectral, self.k_temporal, self.k_fusion] {
            if !(k > 0.0 && k <= 1.0) {
                return bad("pooling ratios must lie in (0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    /// Left channel, one node per frequency bin.
    Spectral,
    /// Right channel, one node per time frame.
    Temporal,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Spectral => "left",
            Branch::Temporal => "right",
        }
    }

    fn ratio(self, cfg: &ModelConfig) -> f64 {
        match self {
            Branch::Spectral => cfg.k_spectral,
            Branch::Temporal => cfg.k_temporal,
        }
    }
}

/// Which detector topology to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    DualBranch,
    /// Channel average through the spectral branch, fused with itself.
    SingleBranch,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" | "dual-branch" => Ok(Variant::DualBranch),
            "single" | "single-branch" => Ok(Variant::SingleBranch),
            other => Err(Error::Config(format!("unknown variant {other:?} (expected dual or single)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::DualBranch => "dual",
            Variant::SingleBranch => "single",
        })
    }
}

/// Bonafide and spoof logits of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Logits {
    pub bonafide: f64,
    pub spoof: f64,
}

impl Logits {
    /// Ranking score: bonafide minus spoof logit.
    pub fn score(&self) -> f64 {
        self.bonafide - self.spoof
    }

    fn from_row(row: &[f64]) -> Result<Self> {
        let l = Logits {
            bonafide: row[0],
            spoof: row[1],
        };
        if !(l.bonafide.is_finite() && l.spoof.is_finite()) {
            return Err(Error::NonFinite {
                value: if l.bonafide.is_finite() { l.spoof } else { l.bonafide },
                context: "logits".into(),
            });
        }
        Ok(l)
    }
}

/// Registers every detector parameter: `left.*`, `right.*`, `fusion.*`, `classifier.*`.
pub fn init_detector(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let mut init = Init::new(&mut rng, &mut params);
    let d = cfg.encoder_dim();
    for branch in [Branch::Spectral, Branch::Temporal] {
        let p = branch.prefix();
        init_frontend(&mut init, p, &cfg.frontend);
        init_gat(&mut init, &format!("{p}.gat"), d, cfg.branch_dim);
        init_pool(&mut init, &format!("{p}.pool"), cfg.branch_dim);
        init.linear(&format!("{p}.proj"), cfg.branch_pooled(branch), cfg.proj_nodes);
    }
    init_gat(&mut init, "fusion.gat", cfg.branch_dim, cfg.fusion_dim);
    init_pool(&mut init, "fusion.pool", cfg.fusion_dim);
    init.linear("fusion.proj", cfg.fusion_dim, 1);
    init.linear("classifier", cfg.embedding_len(), 2);
    Ok(params)
}

/// Detector weights plus the frozen converter that feeds them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct M2SAddParams {
    pub config: ModelConfig,
    pub detector: ParamSet,
    pub binauralizer: BinauralizerParams,
}

impl M2SAddParams {
    /// Fresh detector around `binauralizer`, which is frozen here.
    pub fn init(config: ModelConfig, mut binauralizer: BinauralizerParams, seed: u64) -> Result<Self> {
        if binauralizer.config.sample_rate != config.frontend.sample_rate {
            return Err(Error::Config(format!(
                "converter runs at {} Hz but the detector expects {} Hz",
                binauralizer.config.sample_rate, config.frontend.sample_rate
            )));
        }
        let detector = init_detector(&config, seed)?;
        binauralizer.freeze();
        Ok(Self {
            config,
            detector,
            binauralizer,
        })
    }
}

/// One branch: `x [B, T] -> [B, proj_nodes, branch_dim]`.
pub fn branch_forward(s: &Session, cfg: &ModelConfig, branch: Branch, x: &Var) -> Result<Var> {
    let p = branch.prefix();
    let fm = encode(s, p, &cfg.frontend, x)?;
    let expected = Some(cfg.frontend.output_shape());
    let g = match branch {
        Branch::Spectral => to_graph_spectral(&fm, expected)?,
        Branch::Temporal => to_graph_temporal(&fm, expected)?,
    };
    record_graph(s, &format!("{p}.graph"), &g);
    let g = gat_forward(s, &format!("{p}.gat"), &g);
    record_graph(s, &format!("{p}.gat"), &g);
    let g = graph_pool(s, &format!("{p}.pool"), &g, branch.ratio(cfg));
    record_graph(s, &format!("{p}.pool"), &g);
    let g = project_nodes(s, &format!("{p}.proj"), &g, ProjectAxis::Nodes);
    record_graph(s, &format!("{p}.proj"), &g);
    Ok(g)
}

/// Left channel through the spectral branch, right through the temporal one.
pub fn dual_branch_forward(s: &Session, cfg: &ModelConfig, left: &Var, right: &Var) -> Result<(Var, Var)> {
    Ok((
        branch_forward(s, cfg, Branch::Spectral, left)?,
        branch_forward(s, cfg, Branch::Temporal, right)?,
    ))
}

/// Element-wise product of two graphs of identical shape.
pub fn fuse(a: &Var, b: &Var) -> Result<Var> {
    if a.shape() != b.shape() {
        return Err(Error::shape("fusion", a.shape(), b.shape()));
    }
    Ok(a.mul(b))
}

/// `[B, proj_nodes, branch_dim] -> [B, embedding_len, 1]`.
pub fn fusion_encoder_forward(s: &Session, cfg: &ModelConfig, g: &Var) -> Result<Var> {
    let expected = [cfg.proj_nodes, cfg.branch_dim];
    if g.shape().len() != 3 || g.shape()[1..] != expected {
        return Err(Error::shape("fusion encoder input", &expected, &g.shape()[1..]));
    }
    record_graph(s, "fusion.input", g);
    let g = gat_forward(s, "fusion.gat", g);
    record_graph(s, "fusion.gat", &g);
    let g = graph_pool(s, "fusion.pool", &g, cfg.k_fusion);
    record_graph(s, "fusion.pool", &g);
    let g = project_nodes(s, "fusion.proj", &g, ProjectAxis::Features);
    record_graph(s, "fusion.proj", &g);
    Ok(g)
}

/// `[B, n, 1] -> [B, 2]` logits (bonafide, spoof).
pub fn classify(s: &Session, embedding: &Var) -> Var {
    let b = embedding.shape()[0];
    let n: usize = embedding.shape()[1..].iter().product();
    let y = s.linear(&embedding.reshape(&[b, n]), "classifier");
    s.record("classifier", &y);
    y
}

/// Segment batches `left, right [B, T]` -> logits `[B, 2]`.
pub fn detector_logits(s: &Session, cfg: &ModelConfig, variant: Variant, left: &Var, right: &Var) -> Result<Var> {
    let fused = match variant {
        Variant::DualBranch => {
            let (gl, gr) = dual_branch_forward(s, cfg, left, right)?;
            fuse(&gl, &gr)?
        }
        Variant::SingleBranch => {
            let mid = left.add(right).mul_scalar(0.5);
            let g = branch_forward(s, cfg, Branch::Spectral, &mid)?;
            fuse(&g, &g)?
        }
    };
    let emb = fusion_encoder_forward(s, cfg, &fused)?;
    Ok(classify(s, &emb))
}

/// Cuts both channels of a stereo waveform into `[n_segments, seg_len]`
/// batches with the same cyclic tail padding as mono segmentation.
pub fn segment_stereo(stereo: &Waveform, seg_len: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    if stereo.channels() != 2 {
        return Err(Error::Validation(format!(
            "detector expects stereo input, got {} channels",
            stereo.channels()
        )));
    }
    let cut = |c: usize| -> Result<Array2<f64>> {
        let mono = Waveform::mono(stereo.channel(c).to_vec(), stereo.sample_rate())?;
        Ok(segment_utterance("", &mono, seg_len)?.segments)
    };
    Ok((cut(0)?, cut(1)?))
}

/// Logits of a converted utterance: per-segment logits averaged over segments.
pub fn logits_from_stereo(stereo: &Waveform, params: &M2SAddParams, variant: Variant) -> Result<Logits> {
    let cfg = &params.config;
    if stereo.sample_rate() != cfg.frontend.sample_rate {
        return Err(Error::Validation(format!(
            "audio at {} Hz but the detector expects {} Hz",
            stereo.sample_rate(),
            cfg.frontend.sample_rate
        )));
    }
    let (l, r) = segment_stereo(stereo, cfg.frontend.segment_len)?;
    let s = Session::inference(&params.detector);
    let logits = detector_logits(
        &s,
        cfg,
        variant,
        &Var::constant(l.into_dyn()),
        &Var::constant(r.into_dyn()),
    )?;
    let mean = logits.value().mean_axis(Axis(0)).expect("at least one segment");
    Logits::from_row(mean.as_slice().expect("contiguous"))
}

/// Mono utterance through the converter and the chosen detector topology.
pub fn forward_with_variant(
    mono: &Waveform,
    pool: &[ConditioningTrack],
    params: &M2SAddParams,
    seed: u64,
    variant: Variant,
) -> Result<Logits> {
    if !params.binauralizer.frozen {
        return Err(Error::Validation("converter must be frozen inside the detector".into()));
    }
    let stereo = binauralize_utterance(mono, pool, &params.binauralizer, seed)?;
    logits_from_stereo(&stereo, params, variant)
}

/// Mono utterance -> stereo -> per-segment detection -> averaged logits.
pub fn forward(mono: &Waveform, pool: &[ConditioningTrack], params: &M2SAddParams, seed: u64) -> Result<Logits> {
    forward_with_variant(mono, pool, params, seed, Variant::DualBranch)
}

/// Same pipeline with the channel average routed through the spectral branch only.
pub fn forward_ablation_single_branch(
    mono: &Waveform,
    pool: &[ConditioningTrack],
    params: &M2SAddParams,
    seed: u64,
) -> Result<Logits> {
    forward_with_variant(mono, pool, params, seed, Variant::SingleBranch)
}

/// Parameter names grouped by submodule, in a stable order.
pub fn submodules(params: &ParamSet) -> Vec<(&'static str, Vec<String>)> {
    let groups: [(&str, &str, Option<bool>); 6] = [
        ("left.frontend", "left.", Some(true)),
        ("left.graph", "left.", Some(false)),
        ("right.frontend", "right.", Some(true)),
        ("right.graph", "right.", Some(false)),
        ("fusion", "fusion.", None),
        ("classifier", "classifier.", None),
    ];
    let is_frontend = |n: &str| n.contains(".sinc") || n.contains(".res");
    groups
        .iter()
        .map(|&(label, prefix, frontend)| {
            let names = params
                .names()
                .filter(|n| n.starts_with(prefix) && frontend.is_none_or(|f| is_frontend(n) == f))
                .map(str::to_string)
                .collect();
            (label, names)
        })
        .collect()
}

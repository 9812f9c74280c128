//! `m2s-add` command-line driver.

mod commands;
mod font;
mod plot;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

/// Mono-to-stereo audio deepfake detection: converter pretraining, stereo
/// conversion, detector training, scoring and spectrogram plots.
///
/// Config keys can also be set through `M2S_ADD_<KEY>` environment variables
/// (for example `M2S_ADD_EPOCHS=30`). Precedence, lowest first: defaults,
/// `--config` file, environment, `--set`, `--seed`.
#[derive(Parser, Debug)]
#[command(name = "m2s-add", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint and log directory (overrides `checkpoint_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the mono-to-stereo converter on a paired corpus.
    #[command(name = "pretrain-m2s")]
    PretrainM2s {
        /// Paired corpus with mono/, binaural/ and conditioning/ subdirectories.
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Convert a directory of mono WAV files to stereo.
    Convert {
        /// Directory of mono `.wav` files.
        #[arg(long)]
        input: PathBuf,
        /// Converter (or detector) checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of conditioning tracks (`.txt` or `.bin`).
        #[arg(long)]
        conditioning: PathBuf,
        #[arg(long, default_value_t = m2s_add::seeding::DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the detector around a frozen converter.
    Train {
        /// Training protocol (`SPEAKER UTT - ATTACK KEY` rows).
        #[arg(long)]
        protocol: PathBuf,
        /// Directory holding `<utterance id>.wav`.
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        conditioning: PathBuf,
        /// Pretrained converter checkpoint (not needed with --resume).
        #[arg(long, required_unless_present = "resume")]
        converter: Option<PathBuf>,
        /// Development protocol used for best-epoch selection.
        #[arg(long)]
        dev_protocol: Option<PathBuf>,
        /// Audio directory of the development protocol (defaults to --audio).
        #[arg(long)]
        dev_audio: Option<PathBuf>,
        /// Continue from `last.json` in the output directory.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a protocol with a detector checkpoint and report EERs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        protocol: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        conditioning: PathBuf,
        /// Conditioning seed (defaults to the seed stored in the checkpoint).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot mono/left/right spectrograms of a bonafide and a fake utterance.
    Visualize {
        #[arg(long)]
        bonafide: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        /// Converter (or detector) checkpoint; not needed with both stereo inputs.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        conditioning: Option<PathBuf>,
        /// Precomputed stereo version of the bonafide utterance.
        #[arg(long)]
        bonafide_stereo: Option<PathBuf>,
        /// Precomputed stereo version of the fake utterance.
        #[arg(long)]
        fake_stereo: Option<PathBuf>,
        #[arg(long, default_value_t = m2s_add::seeding::DEFAULT_SEED)]
        seed: u64,
        /// Output PNG file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic corpus: utterances, protocol, conditioning tracks and
    /// a paired pretraining set.
    Fixtures {
        #[arg(long, default_value_t = m2s_add::seeding::DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        utterances: usize,
        #[arg(long, default_value_t = 4)]
        tracks: usize,
        #[arg(long, default_value_t = 4)]
        pairs: usize,
        /// Samples per paired item.
        #[arg(long, default_value_t = 16000)]
        pair_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::PretrainM2s { corpus, run } => commands::pretrain(&corpus, &run),
        Command::Convert {
            input,
            checkpoint,
            conditioning,
            seed,
            out,
        } => commands::convert(&input, &checkpoint, &conditioning, seed, &out),
        Command::Train {
            protocol,
            audio,
            conditioning,
            converter,
            dev_protocol,
            dev_audio,
            resume,
            run,
        } => commands::train(commands::TrainInputs {
            protocol: &protocol,
            audio: &audio,
            conditioning: &conditioning,
            converter: converter.as_deref(),
            dev_protocol: dev_protocol.as_deref(),
            dev_audio: dev_audio.as_deref(),
            resume,
            run: &run,
        }),
        Command::Eval {
            checkpoint,
            protocol,
            audio,
            conditioning,
            seed,
            out,
        } => commands::eval(&checkpoint, &protocol, &audio, &conditioning, seed, &out),
        Command::Visualize {
            bonafide,
            fake,
            checkpoint,
            conditioning,
            bonafide_stereo,
            fake_stereo,
            seed,
            out,
        } => commands::visualize(commands::VisualizeInputs {
            bonafide: &bonafide,
            fake: &fake,
            checkpoint: checkpoint.as_deref(),
            conditioning: conditioning.as_deref(),
            bonafide_stereo: bonafide_stereo.as_deref(),
            fake_stereo: fake_stereo.as_deref(),
            seed,
            out: &out,
        }),
        Command::Fixtures {
            seed,
            utterances,
            tracks,
            pairs,
            pair_len,
            out,
        } => commands::fixtures(seed, utterances, tracks, pairs, pair_len, &out),
    }
}

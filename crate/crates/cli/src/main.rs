mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lipcycle::corpus::Split;
use lipcycle::m2s::InputSpace;

use crate::commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "lipcycle", version, about = "Speech-driven facial animation with a mesh-to-speech cycle loss")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Run config (TOML); unset keys take the shipped defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Directory for every artifact of the run.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Corpus directory [default: OUT/corpus].
    #[arg(long, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
}

impl Common {
    pub fn corpus_dir(&self) -> PathBuf {
        self.corpus.clone().unwrap_or_else(|| self.out.join("corpus"))
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus into OUT/corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Refit the speech-unit codebook on the training mels and compare it with the corpus units.
    FitUnits {
        #[command(flatten)]
        common: Common,
    },
    /// Train the mesh-to-speech model; writes OUT/m2s_<space>.ckpt.
    TrainM2s {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "SPACE")]
        input_space: Option<InputSpace>,
    },
    /// Held-out mel L1 and unit accuracy of a trained M2S model.
    EvalM2s {
        #[command(flatten)]
        common: Common,
        /// [default: OUT/m2s_<space>.ckpt]
        #[arg(long, value_name = "PATH")]
        m2s: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Train the diffusion denoiser; writes OUT/thunder.ckpt.
    TrainThunder {
        #[command(flatten)]
        common: Common,
        /// [default: OUT/m2s_<space>.ckpt]
        #[arg(long, value_name = "PATH")]
        m2s: Option<PathBuf>,
        #[arg(long, conflicts_with = "no_m2s")]
        with_m2s: bool,
        #[arg(long)]
        no_m2s: bool,
        #[arg(long, value_name = "W")]
        m2s_weight: Option<f64>,
        #[arg(long, conflicts_with = "train_audio")]
        freeze_audio: bool,
        #[arg(long)]
        train_audio: bool,
    },
    /// Draw expression sequences for one corpus sequence's audio.
    Sample {
        #[command(flatten)]
        common: Common,
        /// [default: OUT/thunder.ckpt]
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        /// Corpus sequence index whose audio drives the samples.
        #[arg(long, value_name = "SEQ_ID")]
        audio: usize,
        #[arg(long, value_name = "S", default_value_t = 1)]
        num_samples: usize,
    },
    /// Score a trained denoiser on the test split; writes OUT/report.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// [default: OUT/thunder.ckpt]
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
    },
    /// Train and score every ablation variant; writes OUT/ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Directory holding m2s_<space>.ckpt files [default: OUT].
        #[arg(long, value_name = "DIR")]
        m2s_dir: Option<PathBuf>,
    },
    /// Recover expressions from held-out audio through a frozen M2S model.
    Abas {
        #[command(flatten)]
        common: Common,
        /// [default: OUT/m2s_<space>.ckpt]
        #[arg(long, value_name = "PATH")]
        m2s: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => f.write_str(m),
            Failure::Run(e) => write!(f, "{e}"),
        }
    }
}

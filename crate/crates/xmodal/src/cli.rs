use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::Config;
use crate::error::{Result, XmodalError};
use crate::formats::ppm;
use crate::fsutil::{self, DirLock};
use crate::pipeline::{parse_split, Direction, Stage, Workspace};

/// Environment variable naming the working directory.
pub const WORKDIR_ENV: &str = "XMODAL_WORKDIR";

#[derive(Debug, Parser)]
#[command(
    name = "xmodal",
    version,
    about = "Train and run unpaired image/text embedding translators on a synthetic corpus",
    after_help = help_footer()
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

fn help_footer() -> String {
    format!(
        "Working directory: current directory, or ${WORKDIR_ENV} when set.\n\
         Exit codes: 0 ok, 2 config, 3 I/O or format, 4 missing prerequisite, 5 divergence.\n\n{}",
        Config::help_text()
    )
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Configuration file of `key = value` lines; defaults apply without one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialization and sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic image/caption dataset.
    Datagen {
        #[command(flatten)]
        common: Common,
    },
    /// Train one stage: image-ae, text-ae, mapper-i2t or mapper-t2i.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: String,
    },
    /// Translate a PPM image to a caption, or a caption file to a PPM image.
    Translate {
        #[command(flatten)]
        common: Common,
        /// image-to-text or text-to-image.
        #[arg(long)]
        direction: String,
        /// Input PPM (image-to-text) or UTF-8 text file whose first line is the caption.
        #[arg(long)]
        input: PathBuf,
        /// Output path; defaults to out/translation.{txt,ppm} in the working directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Sample the conditional augmentation noise instead of using its mean.
        #[arg(long)]
        sample_augmentation: bool,
    },
    /// Evaluate the trained models and write metrics/evaluate_<split>.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// train or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Replace the mapped embeddings with the true gallery (protocol check).
        #[arg(long, hide = true)]
        debug_identity_fakes: bool,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Datagen { common }
            | Command::Train { common, .. }
            | Command::Translate { common, .. }
            | Command::Evaluate { common, .. } => common,
        }
    }
}

pub fn workdir() -> PathBuf {
    std::env::var_os(WORKDIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

/// Runs one command in `root`; returns the text printed on success.
pub fn run(command: &Command, root: &Path) -> Result<String> {
    let common = command.common();
    let config = load_config(common.config.as_deref())?;
    let _lock = DirLock::acquire(root)?;
    let ws = Workspace::new(root, config, common.seed);
    match command {
        Command::Datagen { .. } => {
            ws.datagen()?;
            Ok(format!(
                "dataset written to {}",
                root.join("data").display()
            ))
        }
        Command::Train { stage, .. } => {
            let stage = Stage::parse(stage)?;
            ws.train(stage)?;
            Ok(format!(
                "{stage} checkpoint written to {}",
                ws.checkpoint_path(stage).display()
            ))
        }
        Command::Translate {
            direction,
            input,
            output,
            sample_augmentation,
            ..
        } => match Direction::parse(direction)? {
            Direction::ImageToText => {
                let caption = ws.translate_image(input)?;
                let out = output
                    .clone()
                    .unwrap_or_else(|| ws.output_dir().join("translation.txt"));
                fsutil::write_atomic(&out, format!("{caption}\n").as_bytes())?;
                Ok(caption)
            }
            Direction::TextToImage => {
                let text = std::fs::read_to_string(input).map_err(|e| XmodalError::io(input, e))?;
                let caption = text.lines().next().unwrap_or("").trim().to_string();
                if caption.is_empty() {
                    return Err(XmodalError::format(
                        input,
                        0,
                        "no caption on the first line",
                    ));
                }
                let img = ws.translate_text(&caption, *sample_augmentation)?;
                let out = output
                    .clone()
                    .unwrap_or_else(|| ws.output_dir().join("translation.ppm"));
                ppm::write(&img, &out)?;
                Ok(format!("image written to {}", out.display()))
            }
        },
        Command::Evaluate {
            split,
            debug_identity_fakes,
            ..
        } => {
            let split = parse_split(split)?;
            let report = ws.evaluate(split, *debug_identity_fakes)?;
            Ok(report
                .rows()
                .iter()
                .map(|r| format!("{} = {}", r.metric, r.value))
                .collect::<Vec<_>>()
                .join("\n"))
        }
    }
}

//! `key = value` configuration with namespaced keys. Lines starting with
//! `#` are comments; unknown keys are errors.

use std::path::Path;

use xmodal_core::colorshapes::ColorShapesSpec;
use xmodal_core::image_ae::ImageAeConfig;
use xmodal_core::mapper::{MapperConfig, MapperKind};
use xmodal_core::text_ae::TextAeConfig;

use crate::error::{Result, XmodalError};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub permutations: usize,
    pub bleu_max_n: usize,
    pub decode_max_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            permutations: 500,
            bleu_max_n: 4,
            decode_max_len: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub data: ColorShapesSpec,
    pub image_ae: ImageAeConfig,
    pub text_ae: TextAeConfig,
    pub mapper: MapperConfig,
    pub eval: EvalConfig,
}

trait Value: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
from_str_value!(usize, u64, f64, bool);

impl Value for Vec<String> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let items: Vec<String> = s
            .split(',')
            .map(|x| x.trim().to_string())
            .filter(|x| !x.is_empty())
            .collect();
        if items.is_empty() {
            return Err("expected a comma-separated list".into());
        }
        Ok(items)
    }
    fn render(&self) -> String {
        self.join(",")
    }
}

impl Value for MapperKind {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        MapperKind::parse(s).map_err(|e| e.to_string())
    }
    fn render(&self) -> String {
        self.name().to_string()
    }
}

macro_rules! keys {
    ($( $key:literal => $section:ident . $field:ident : $doc:literal ),* $(,)?) => {
        impl Config {
            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( $key => {
                        self.$section.$field = Value::parse(value).map_err(|e| {
                            XmodalError::Config(format!("invalid value '{value}' for {key}: {e}"))
                        })?;
                    } )*
                    _ => return Err(XmodalError::Config(format!("unknown key '{key}'"))),
                }
                Ok(())
            }

            /// All keys with their current values and descriptions.
            pub fn entries(&self) -> Vec<(&'static str, String, &'static str)> {
                vec![ $( ($key, self.$section.$field.render(), $doc) ),* ]
            }
        }
    };
}

keys! {
    "data.colors" => data.colors: "comma-separated palette colours",
    "data.shapes" => data.shapes: "comma-separated shapes",
    "data.image_size" => data.image_size: "image side length in pixels",
    "data.samples_per_class" => data.samples_per_class: "samples generated per class",
    "data.jitter_position" => data.jitter_position: "maximum centre offset in pixels",
    "data.jitter_scale" => data.jitter_scale: "maximum relative size change",
    "data.test_fraction" => data.test_fraction: "fraction of classes held out",
    "image_ae.base_resolution" => image_ae.base_resolution: "first generator branch resolution",
    "image_ae.branches" => image_ae.branches: "number of generator branches",
    "image_ae.embed_dim" => image_ae.embed_dim: "image embedding dimension",
    "image_ae.cond_dim" => image_ae.cond_dim: "conditioning vector dimension",
    "image_ae.noise_dim" => image_ae.noise_dim: "generator noise dimension",
    "image_ae.gen_channels" => image_ae.gen_channels: "generator feature channels",
    "image_ae.enc_channels" => image_ae.enc_channels: "encoder base channels",
    "image_ae.disc_channels" => image_ae.disc_channels: "discriminator base channels",
    "image_ae.lambda_kl" => image_ae.lambda_kl: "weight of the KL term",
    "image_ae.lambda_rec" => image_ae.lambda_rec: "weight of the L1 reconstruction term",
    "image_ae.lr" => image_ae.lr: "Adam learning rate",
    "image_ae.beta1" => image_ae.beta1: "Adam first-moment decay",
    "image_ae.beta2" => image_ae.beta2: "Adam second-moment decay",
    "image_ae.batch_size" => image_ae.batch_size: "images per step",
    "image_ae.epochs" => image_ae.epochs: "passes over the training images",
    "text_ae.embed_dim" => text_ae.embed_dim: "word embedding dimension",
    "text_ae.hidden" => text_ae.hidden: "encoder hidden size per direction",
    "text_ae.decoder_hidden" => text_ae.decoder_hidden: "decoder hidden size",
    "text_ae.max_len" => text_ae.max_len: "maximum caption length in tokens",
    "text_ae.lr" => text_ae.lr: "Adam learning rate",
    "text_ae.batch_size" => text_ae.batch_size: "captions per step",
    "text_ae.epochs" => text_ae.epochs: "passes over the training captions",
    "text_ae.clip_norm" => text_ae.clip_norm: "gradient norm clip",
    "mapper.kind" => mapper.kind: "gan or mmd",
    "mapper.hidden" => mapper.hidden: "generator hidden width",
    "mapper.disc_hidden" => mapper.disc_hidden: "discriminator hidden width",
    "mapper.critic_dim" => mapper.critic_dim: "critic feature dimension",
    "mapper.clip" => mapper.clip: "critic weight clip bound",
    "mapper.lambda_ae" => mapper.lambda_ae: "critic reconstruction penalty weight",
    "mapper.n_critic" => mapper.n_critic: "critic updates per generator update",
    "mapper.fixed_kernel" => mapper.fixed_kernel: "skip critic learning and use the raw embeddings",
    "mapper.batch_size" => mapper.batch_size: "embeddings per batch",
    "mapper.lr_gen" => mapper.lr_gen: "generator learning rate",
    "mapper.lr_critic" => mapper.lr_critic: "critic or discriminator learning rate",
    "mapper.beta1" => mapper.beta1: "Adam first-moment decay",
    "mapper.beta2" => mapper.beta2: "Adam second-moment decay",
    "mapper.steps" => mapper.steps: "generator updates",
    "eval.permutations" => eval.permutations: "two-sample test permutations",
    "eval.bleu_max_n" => eval.bleu_max_n: "largest BLEU n-gram order reported",
    "eval.decode_max_len" => eval.decode_max_len: "greedy decoding length limit",
}

impl Config {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| XmodalError::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                detail: format!("expected key = value, got '{line}'"),
            })?;
            config.set(key.trim(), value.trim()).map_err(|e| match e {
                XmodalError::Config(msg) => {
                    XmodalError::Config(format!("{}:{}: {msg}", origin.display(), i + 1))
                }
                other => other,
            })?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| XmodalError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: xmodal_core::Result<()>| r.map_err(|e| XmodalError::Config(e.to_string()));
        wrap(self.data.validate())?;
        wrap(self.image_ae.validate())?;
        wrap(self.text_ae.validate())?;
        wrap(self.mapper.validate())?;
        if self.image_ae.top_resolution() != self.data.image_size {
            return Err(XmodalError::Config(format!(
                "image_ae top resolution {} must equal data.image_size {}",
                self.image_ae.top_resolution(),
                self.data.image_size
            )));
        }
        if self.eval.permutations == 0 || self.eval.bleu_max_n == 0 || self.eval.decode_max_len == 0
        {
            return Err(XmodalError::Config(
                "eval.permutations, eval.bleu_max_n and eval.decode_max_len must be positive"
                    .into(),
            ));
        }
        Ok(())
    }

    /// `key = value` lines that parse back to this configuration.
    pub fn render(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v, _)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Key listing with defaults, for `--help`.
    pub fn help_text() -> String {
        let mut out = String::from("Configuration keys (key = value, '#' comments):\n");
        for (k, v, doc) in Config::default().entries() {
            out.push_str(&format!("  {k:<26} {doc} [default: {v}]\n"));
        }
        out
    }
}

//! End-to-end pipeline over a working directory:
//!
//! ```text
//! data/{train,test}/captions.tsv     class_id<TAB>caption, one per sample
//! data/{train,test}/images/NNNN.ppm  image of line NNNN of captions.tsv
//! ckpt/image_ae.ckpt, ckpt/text_ae.ckpt, ckpt/text_ae.vocab
//! ckpt/mapper_i2t.ckpt, ckpt/mapper_t2i.ckpt
//! emb/{split}_{image,text}.emb
//! metrics/*.csv
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xmodal_core::autodiff::Tensor;
use xmodal_core::colorshapes::{self, ColorShapesSpec, RgbImage, Split};
use xmodal_core::eval::{
    bleu, class_accuracy, rouge_l, two_sample_test, LabeledEmbeddings, MetricReport,
};
use xmodal_core::image_ae::{stack_images, standard_normal, ImageAutoencoder};
use xmodal_core::mapper::{
    median_heuristic, mmd2_unbiased, KernelSpec, MapperGenerator, MapperTrainer,
};
use xmodal_core::optim::shuffled_batches;
use xmodal_core::text_ae::{detokenize, tokenize, TextAutoencoder, Vocabulary};

use crate::config::Config;
use crate::corpus::{self, CaptionRecord};
use crate::error::{Result, XmodalError};
use crate::formats::{ckpt, emb, ppm};
use crate::fsutil;
use crate::report::MetricCsv;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    ImageAe,
    TextAe,
    MapperI2t,
    MapperT2i,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::ImageAe,
        Stage::TextAe,
        Stage::MapperI2t,
        Stage::MapperT2i,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                XmodalError::Config(format!(
                    "unknown stage '{s}', expected image-ae, text-ae, mapper-i2t or mapper-t2i"
                ))
            })
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::ImageAe => "image-ae",
            Stage::TextAe => "text-ae",
            Stage::MapperI2t => "mapper-i2t",
            Stage::MapperT2i => "mapper-t2i",
        }
    }

    fn file_stem(self) -> &'static str {
        match self {
            Stage::ImageAe => "image_ae",
            Stage::TextAe => "text_ae",
            Stage::MapperI2t => "mapper_i2t",
            Stage::MapperT2i => "mapper_t2i",
        }
    }

    /// Random stream of the stage's initialization and training draws.
    pub fn stream(self) -> u64 {
        match self {
            Stage::ImageAe => 1,
            Stage::TextAe => 2,
            Stage::MapperI2t => 3,
            Stage::MapperT2i => 4,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "image-to-text" => Ok(Self::ImageToText),
            "text-to-image" => Ok(Self::TextToImage),
            _ => Err(XmodalError::Config(format!(
                "unknown direction '{s}', expected image-to-text or text-to-image"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ImageToText => "image-to-text",
            Self::TextToImage => "text-to-image",
        }
    }

    pub fn mapper_stage(self) -> Stage {
        match self {
            Self::ImageToText => Stage::MapperI2t,
            Self::TextToImage => Stage::MapperT2i,
        }
    }
}

pub fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(XmodalError::Config(format!(
            "unknown split '{s}', expected train or test"
        ))),
    }
}

/// Generator for one purpose, independent of every other purpose's draws.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One split of the dataset loaded from disk.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub records: Vec<CaptionRecord>,
    pub images: Vec<Tensor>,
}

impl SplitData {
    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.class_id).collect()
    }
}

/// Per-split embeddings from the frozen autoencoders.
#[derive(Debug, Clone)]
pub struct SplitEmbeddings {
    pub image: LabeledEmbeddings,
    pub text: LabeledEmbeddings,
}

pub struct Workspace {
    pub root: PathBuf,
    pub config: Config,
    pub seed: u64,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, config: Config, seed: u64) -> Self {
        Self {
            root: root.into(),
            config,
            seed,
        }
    }

    pub fn data_dir(&self, split: Split) -> PathBuf {
        self.root.join("data").join(split.name())
    }

    pub fn captions_path(&self, split: Split) -> PathBuf {
        self.data_dir(split).join("captions.tsv")
    }

    pub fn image_path(&self, split: Split, index: usize) -> PathBuf {
        self.data_dir(split)
            .join("images")
            .join(format!("{index:04}.ppm"))
    }

    pub fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        self.root
            .join("ckpt")
            .join(format!("{}.ckpt", stage.file_stem()))
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.root.join("ckpt").join("text_ae.vocab")
    }

    pub fn embedding_path(&self, split: Split, modality: &str) -> PathBuf {
        self.root
            .join("emb")
            .join(format!("{}_{modality}.emb", split.name()))
    }

    pub fn metrics_path(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{name}.csv"))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.root.join("out")
    }

    pub fn spec(&self) -> ColorShapesSpec {
        ColorShapesSpec {
            seed: self.seed,
            ..self.config.data.clone()
        }
    }

    /// Checkpoint id for provenance columns: file name and CRC32 of its
    /// bytes.
    pub fn checkpoint_id(&self, stages: &[Stage]) -> Result<String> {
        let mut parts = Vec::new();
        for &s in stages {
            let path = self.checkpoint_path(s);
            let bytes = fsutil::read(&path)?;
            parts.push(format!("{}@{:08x}", s.file_stem(), crc32fast::hash(&bytes)));
        }
        Ok(parts.join("+"))
    }

    fn require(&self, stage: Stage) -> Result<PathBuf> {
        let path = self.checkpoint_path(stage);
        if path.is_file() {
            Ok(path)
        } else {
            Err(XmodalError::MissingDependency {
                stage: stage.name().into(),
                path,
            })
        }
    }

    fn require_data(&self, split: Split) -> Result<PathBuf> {
        let path = self.captions_path(split);
        if path.is_file() {
            Ok(path)
        } else {
            Err(XmodalError::MissingDependency {
                stage: "datagen".into(),
                path,
            })
        }
    }

    // ---- datagen -------------------------------------------------------

    pub fn datagen(&self) -> Result<()> {
        let spec = self.spec();
        let data = colorshapes::generate(&spec).map_err(|e| XmodalError::Config(e.to_string()))?;
        for split in [Split::Train, Split::Test] {
            let samples: Vec<_> = data.split(split).collect();
            let images_dir = self.data_dir(split).join("images");
            if images_dir.exists() {
                std::fs::remove_dir_all(&images_dir)
                    .map_err(|e| XmodalError::io(&images_dir, e))?;
            }
            fsutil::create_dir(&images_dir)?;
            for (i, s) in samples.iter().enumerate() {
                ppm::write(&s.image, &self.image_path(split, i))?;
            }
            let lines: Vec<(usize, &str)> = samples
                .iter()
                .map(|s| (s.class_id, s.caption.as_str()))
                .collect();
            fsutil::write_atomic(
                &self.captions_path(split),
                corpus::render(&lines).as_bytes(),
            )?;
        }
        log::info!(
            "wrote {} samples of {} classes to {}",
            data.samples.len(),
            spec.class_count(),
            self.root.join("data").display()
        );
        Ok(())
    }

    pub fn load_split(&self, split: Split) -> Result<SplitData> {
        let path = self.require_data(split)?;
        let records = corpus::load(&path)?;
        let images = (0..records.len())
            .map(|i| ppm::read_tensor(&self.image_path(split, i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(SplitData { records, images })
    }

    // ---- loading trained models -----------------------------------------

    pub fn load_image_ae(&self) -> Result<ImageAutoencoder> {
        let path = self.require(Stage::ImageAe)?;
        let mut rng = stream_rng(self.seed, Stage::ImageAe.stream());
        let mut model = ImageAutoencoder::new(self.config.image_ae.clone(), &mut rng)?;
        model.import(&ckpt::read(&path)?)?;
        Ok(model)
    }

    pub fn load_text_ae(&self) -> Result<TextAutoencoder> {
        let path = self.require(Stage::TextAe)?;
        let vocab_path = self.vocab_path();
        let text =
            std::fs::read_to_string(&vocab_path).map_err(|e| XmodalError::io(&vocab_path, e))?;
        let vocab = Vocabulary::from_tokens(text.lines().map(str::to_string));
        let mut rng = stream_rng(self.seed, Stage::TextAe.stream());
        let mut model = TextAutoencoder::new(self.config.text_ae.clone(), vocab, &mut rng)?;
        model.import(&ckpt::read(&path)?)?;
        Ok(model)
    }

    fn mapper_dims(&self, stage: Stage) -> (usize, usize) {
        let image = self.config.image_ae.embed_dim;
        let text = 2 * self.config.text_ae.hidden;
        match stage {
            Stage::MapperT2i => (text, image),
            _ => (image, text),
        }
    }

    /// A freshly initialized mapper for `stage` drawn from `rng`.
    pub fn fresh_mapper(&self, stage: Stage, rng: &mut ChaCha8Rng) -> Result<MapperGenerator> {
        let (i, o) = self.mapper_dims(stage);
        Ok(MapperGenerator::new(i, o, self.config.mapper.hidden, rng)?)
    }

    pub fn load_mapper(&self, stage: Stage) -> Result<MapperGenerator> {
        let path = self.require(stage)?;
        let mut rng = stream_rng(self.seed, stage.stream());
        let mut g = self.fresh_mapper(stage, &mut rng)?;
        g.store.import("", &ckpt::read(&path)?)?;
        Ok(g)
    }

    /// Embeds a split with the trained autoencoders.
    pub fn embed_split(
        &self,
        image_ae: &ImageAutoencoder,
        text_ae: &TextAutoencoder,
        data: &SplitData,
    ) -> Result<SplitEmbeddings> {
        let labels = data.labels();
        let mut image_rows = Vec::with_capacity(data.images.len());
        for chunk in data.images.chunks(32) {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let e = image_ae.encode_batch(&stack_images(&refs)?)?;
            for i in 0..chunk.len() {
                image_rows.push(e.row(i).to_vec());
            }
        }
        let text_rows = data
            .records
            .iter()
            .map(|r| text_ae.encode_text(&text_ae.vocab.encode(&r.tokens)))
            .collect::<xmodal_core::Result<Vec<_>>>()?;
        Ok(SplitEmbeddings {
            image: LabeledEmbeddings::new(image_rows, labels.clone())?,
            text: LabeledEmbeddings::new(text_rows, labels)?,
        })
    }

    fn export_embeddings(&self, split: Split, e: &SplitEmbeddings) -> Result<()> {
        emb::write(
            &emb::EmbeddingFile::from_set(&e.image),
            &self.embedding_path(split, "image"),
        )?;
        emb::write(
            &emb::EmbeddingFile::from_set(&e.text),
            &self.embedding_path(split, "text"),
        )
    }

    // ---- training ------------------------------------------------------

    pub fn train(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::ImageAe => self.train_image_ae(),
            Stage::TextAe => self.train_text_ae(),
            Stage::MapperI2t | Stage::MapperT2i => self.train_mapper(stage),
        }
    }

    fn train_image_ae(&self) -> Result<()> {
        let data = self.load_split(Split::Train)?;
        let cfg = &self.config.image_ae;
        let mut rng = stream_rng(self.seed, Stage::ImageAe.stream());
        let mut model = ImageAutoencoder::new(cfg.clone(), &mut rng)?;
        let path = self.checkpoint_path(Stage::ImageAe);
        let mut csv = MetricCsv::create(
            &self.metrics_path("image_ae"),
            &self.config,
            self.seed,
            "train image-ae",
        )?;
        let mut last_good = model.export();
        let mut step = 0usize;
        for epoch in 0..cfg.epochs {
            let mut recon = Vec::new();
            for batch in shuffled_batches(data.images.len(), cfg.batch_size, &mut rng) {
                let refs: Vec<&Tensor> = batch.iter().map(|&i| &data.images[i]).collect();
                let images = stack_images(&refs)?;
                let losses = match model.train_step(&images, &mut rng) {
                    Ok(l) => l,
                    Err(e) => return Err(self.diverged(&path, &last_good, e)),
                };
                step += 1;
                let mut r = MetricReport::new();
                for (name, v) in [
                    ("image_ae.discriminator", losses.discriminator),
                    ("image_ae.generator", losses.generator),
                    ("image_ae.adversarial", losses.adversarial),
                    ("image_ae.kl", losses.kl),
                    ("image_ae.reconstruction", losses.reconstruction),
                ] {
                    r.push(name, v, "train", &format!("step{step}"), self.seed)?;
                }
                csv.append(&r)?;
                recon.push(losses.reconstruction);
            }
            let mean = recon.iter().sum::<f64>() / recon.len() as f64;
            csv.row(
                "image_ae.epoch_reconstruction",
                mean,
                "train",
                &format!("epoch{}", epoch + 1),
                self.seed,
            )?;
            log::info!("image-ae epoch {}: mean L1 {:.4}", epoch + 1, mean);
            last_good = model.export();
        }
        ckpt::write(&last_good, &path)
    }

    fn diverged(
        &self,
        path: &Path,
        last_good: &[(String, Tensor)],
        e: xmodal_core::Error,
    ) -> XmodalError {
        let err = XmodalError::from(e);
        if err.exit_code() == 5 {
            if let Err(w) = ckpt::write(last_good, path) {
                log::error!("could not save the last good state: {w}");
            } else {
                log::warn!("diverged; last good state kept in {}", path.display());
            }
        }
        err
    }

    fn train_text_ae(&self) -> Result<()> {
        let data = corpus::load(&self.require_data(Split::Train)?)?;
        let cfg = &self.config.text_ae;
        let tokens: Vec<Vec<String>> = data.iter().map(|r| r.tokens.clone()).collect();
        if let Some(long) = data
            .iter()
            .find(|r| r.tokens.len() > cfg.max_len || r.tokens.is_empty())
        {
            return Err(XmodalError::Config(format!(
                "caption '{}' has {} tokens, allowed 1..={}",
                long.caption,
                long.tokens.len(),
                cfg.max_len
            )));
        }
        let vocab = Vocabulary::build(&tokens);
        let mut rng = stream_rng(self.seed, Stage::TextAe.stream());
        let mut model = TextAutoencoder::new(cfg.clone(), vocab, &mut rng)?;
        let ids: Vec<Vec<usize>> = tokens.iter().map(|t| model.vocab.encode(t)).collect();
        let path = self.checkpoint_path(Stage::TextAe);
        let mut csv = MetricCsv::create(
            &self.metrics_path("text_ae"),
            &self.config,
            self.seed,
            "train text-ae",
        )?;
        let mut last_good = model.export();
        for epoch in 0..cfg.epochs {
            let loss = match model.train_epoch(&ids, &mut rng) {
                Ok(l) => l,
                Err(e) => return Err(self.diverged(&path, &last_good, e)),
            };
            csv.row(
                "text_ae.epoch_loss",
                loss,
                "train",
                &format!("epoch{}", epoch + 1),
                self.seed,
            )?;
            log::info!("text-ae epoch {}: loss {:.4}", epoch + 1, loss);
            last_good = model.export();
        }
        let mut vocab_text = model.vocab.words().join("\n");
        vocab_text.push('\n');
        fsutil::write_atomic(&self.vocab_path(), vocab_text.as_bytes())?;
        ckpt::write(&last_good, &path)
    }

    /// Train-split embeddings from the frozen autoencoders, also written to
    /// `emb/`.
    pub fn frozen_embeddings(&self, split: Split) -> Result<SplitEmbeddings> {
        let image_ae = self.load_image_ae()?;
        let text_ae = self.load_text_ae()?;
        let data = self.load_split(split)?;
        let e = self.embed_split(&image_ae, &text_ae, &data)?;
        self.export_embeddings(split, &e)?;
        Ok(e)
    }

    fn train_mapper(&self, stage: Stage) -> Result<()> {
        self.require(Stage::ImageAe)?;
        self.require(Stage::TextAe)?;
        let e = self.frozen_embeddings(Split::Train)?;
        let (source, target) = match stage {
            Stage::MapperT2i => (&e.text, &e.image),
            _ => (&e.image, &e.text),
        };
        let mut rng = stream_rng(self.seed, stage.stream());
        let (i, o) = self.mapper_dims(stage);
        let mut trainer = MapperTrainer::new(self.config.mapper.clone(), i, o, &mut rng)?;
        let path = self.checkpoint_path(stage);
        let name = stage.file_stem();
        let mut csv = MetricCsv::create(
            &self.metrics_path(name),
            &self.config,
            self.seed,
            &format!("train {stage}"),
        )?;
        let (xs, xt) = (source.to_tensor()?, target.to_tensor()?);
        let mut last_good = trainer.generator.store.export();
        for _ in 0..self.config.mapper.steps {
            let log = match trainer.step(&xs, &xt, &mut rng) {
                Ok(l) => l,
                Err(e) => return Err(self.diverged(&path, &last_good, e)),
            };
            let mut r = MetricReport::new();
            r.push(
                &format!("{name}.critic"),
                log.critic,
                "train",
                &format!("step{}", log.step),
                self.seed,
            )?;
            r.push(
                &format!("{name}.generator"),
                log.generator,
                "train",
                &format!("step{}", log.step),
                self.seed,
            )?;
            csv.append(&r)?;
            if log.step % 100 == 0 {
                log::info!(
                    "{stage} step {}: critic {:.4} generator {:.4}",
                    log.step,
                    log.critic,
                    log.generator
                );
                last_good = trainer.generator.store.export();
            }
        }
        ckpt::write(&trainer.generator.store.export(), &path)
    }

    // ---- translation ---------------------------------------------------

    /// Image file to caption. Requires the image autoencoder, the image-to-
    /// text mapper and the text autoencoder.
    pub fn translate_image(&self, input: &Path) -> Result<String> {
        let image_ae = self.load_image_ae()?;
        let mapper = self.load_mapper(Stage::MapperI2t)?;
        let text_ae = self.load_text_ae()?;
        let img = ppm::read(input)?;
        self.caption_for_image(&image_ae, &mapper, &text_ae, &img)
    }

    pub fn caption_for_image(
        &self,
        image_ae: &ImageAutoencoder,
        mapper: &MapperGenerator,
        text_ae: &TextAutoencoder,
        img: &RgbImage,
    ) -> Result<String> {
        let size = self.config.data.image_size;
        if img.width != size || img.height != size {
            return Err(XmodalError::Config(format!(
                "image is {}x{}, the model expects {size}x{size}",
                img.width, img.height
            )));
        }
        let t = img.to_tensor();
        let psi = image_ae.encode_batch(&stack_images(&[&t])?)?;
        let s = mapper.map_embedding(psi.row(0))?;
        let ids = text_ae.decode_text(&s, self.config.eval.decode_max_len)?;
        Ok(detokenize(&text_ae.vocab.decode(&ids)))
    }

    /// Caption to top-resolution image. `z` is drawn from the run seed; `ε`
    /// is zero unless `sample_augmentation` is set.
    pub fn translate_text(&self, caption: &str, sample_augmentation: bool) -> Result<RgbImage> {
        let text_ae = self.load_text_ae()?;
        let mapper = self.load_mapper(Stage::MapperT2i)?;
        let image_ae = self.load_image_ae()?;
        self.image_for_caption(
            &text_ae,
            &mapper,
            &image_ae,
            caption,
            sample_augmentation,
            self.seed,
        )
    }

    pub fn image_for_caption(
        &self,
        text_ae: &TextAutoencoder,
        mapper: &MapperGenerator,
        image_ae: &ImageAutoencoder,
        caption: &str,
        sample_augmentation: bool,
        seed: u64,
    ) -> Result<RgbImage> {
        let tokens = tokenize(caption);
        if tokens.is_empty() {
            return Err(XmodalError::Config("empty caption".into()));
        }
        let s = text_ae.encode_text(&text_ae.vocab.encode(&tokens))?;
        let psi = mapper.map_embedding(&s)?;
        let mut rng = stream_rng(seed, 10);
        let (c, _) = if sample_augmentation {
            image_ae.cond_augment(&psi, &mut rng)?
        } else {
            image_ae.cond_augment_with(&psi, None)?
        };
        let z = standard_normal(&[1, self.config.image_ae.noise_dim], &mut rng)?;
        let images = image_ae.generate(&c, z.values())?;
        let top = images.last().expect("at least one branch");
        Ok(RgbImage::from_tensor(top)?)
    }

    // ---- evaluation ----------------------------------------------------

    /// Runs every metric on `split` and writes `metrics/evaluate_<split>.csv`.
    /// With `identity_fakes`, each direction's fake set is the true gallery
    /// itself.
    pub fn evaluate(&self, split: Split, identity_fakes: bool) -> Result<MetricReport> {
        let image_ae = self.load_image_ae()?;
        let text_ae = self.load_text_ae()?;
        let i2t = self.load_mapper(Stage::MapperI2t)?;
        let t2i = self.load_mapper(Stage::MapperT2i)?;
        let train = self.load_split(Split::Train)?;
        let test = self.load_split(Split::Test)?;
        let emb_train = self.embed_split(&image_ae, &text_ae, &train)?;
        let emb_test = self.embed_split(&image_ae, &text_ae, &test)?;
        let (data, queries) = match split {
            Split::Train => (&train, &emb_train),
            Split::Test => (&test, &emb_test),
        };
        let gallery_text = concat(&emb_train.text, &emb_test.text)?;
        let gallery_image = concat(&emb_train.image, &emb_test.image)?;

        let dataset = format!("colorshapes/{}", split.name());
        let mut report = MetricReport::new();
        let mut rng = stream_rng(self.seed, 20);
        for (dir, mapper, source, target, gallery, ckpts) in [
            (
                "image_to_text",
                &i2t,
                &queries.image,
                &queries.text,
                &gallery_text,
                [Stage::ImageAe, Stage::MapperI2t, Stage::TextAe],
            ),
            (
                "text_to_image",
                &t2i,
                &queries.text,
                &queries.image,
                &gallery_image,
                [Stage::TextAe, Stage::MapperT2i, Stage::ImageAe],
            ),
        ] {
            let id = self.checkpoint_id(&ckpts)?;
            let fake = if identity_fakes {
                gallery.clone()
            } else {
                map_set(mapper, source)?
            };
            let m = direction_metrics(
                &fake,
                target,
                gallery,
                self.config.eval.permutations,
                &mut rng,
            )?;
            for (name, value) in [
                ("class_accuracy", m.class_accuracy),
                (
                    "chance_level",
                    100.0 / self.config.data.class_count() as f64,
                ),
                ("mmd2_unbiased", m.mmd2_unbiased),
                ("two_sample_p", m.two_sample_p),
            ] {
                report.push(&format!("{name}.{dir}"), value, &dataset, &id, self.seed)?;
            }
        }

        let id = self.checkpoint_id(&[Stage::TextAe])?;
        let n = self.config.eval.bleu_max_n;
        let (mut b1, mut bn, mut rl, mut exact) = (0.0, 0.0, 0.0, 0usize);
        for r in &data.records {
            let ids = text_ae.vocab.encode(&r.tokens);
            let out = text_ae
                .decode_text(&text_ae.encode_text(&ids)?, self.config.eval.decode_max_len)?;
            let words = text_ae.vocab.decode(&out);
            b1 += bleu(&words, &[&r.tokens], 1);
            bn += bleu(&words, &[&r.tokens], n);
            rl += rouge_l(&words, &r.tokens);
            exact += usize::from(words == r.tokens);
        }
        let count = data.records.len() as f64;
        report.push("text_ae.bleu1", b1 / count, &dataset, &id, self.seed)?;
        report.push(
            &format!("text_ae.bleu{n}"),
            bn / count,
            &dataset,
            &id,
            self.seed,
        )?;
        report.push("text_ae.rouge_l", rl / count, &dataset, &id, self.seed)?;
        report.push(
            "text_ae.exact_round_trip",
            100.0 * exact as f64 / count,
            &dataset,
            &id,
            self.seed,
        )?;

        let mut csv = MetricCsv::create(
            &self.metrics_path(&format!("evaluate_{}", split.name())),
            &self.config,
            self.seed,
            &format!("evaluate --split {}", split.name()),
        )?;
        csv.append(&report)?;
        Ok(report)
    }
}

/// Retrieval and distribution metrics of one fake set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionMetrics {
    pub class_accuracy: f64,
    pub mmd2_unbiased: f64,
    pub two_sample_p: f64,
}

/// Mixture kernel whose base bandwidth is the median heuristic over the
/// target set alone, so every fake set compared against one target is
/// scored with the same kernel.
pub fn target_kernel(target: &LabeledEmbeddings) -> Result<KernelSpec> {
    let t = target.to_tensor()?;
    let n = t.shape()[0];
    if n < 2 {
        return Err(XmodalError::Config(
            "at least two target embeddings are needed to set a bandwidth".into(),
        ));
    }
    let half = n / 2;
    let rows = |r: std::ops::Range<usize>| -> Result<Tensor> {
        let d = t.shape()[1];
        Ok(Tensor::new(
            &[r.len(), d],
            t.values()[r.start * d..r.end * d].to_vec(),
        )?)
    };
    Ok(KernelSpec::mixture(median_heuristic(
        &rows(0..half)?,
        &rows(half..n)?,
    )?)?)
}

/// Class accuracy of `fake` against `gallery`, and unbiased MMD² with its
/// permutation p-value between `fake` and `target` under [`target_kernel`].
pub fn direction_metrics(
    fake: &LabeledEmbeddings,
    target: &LabeledEmbeddings,
    gallery: &LabeledEmbeddings,
    permutations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DirectionMetrics> {
    let kernel = target_kernel(target)?;
    let (xf, xt) = (fake.to_tensor()?, target.to_tensor()?);
    Ok(DirectionMetrics {
        class_accuracy: class_accuracy(gallery, fake)?,
        mmd2_unbiased: mmd2_unbiased(&xf, &xt, &kernel)?,
        two_sample_p: two_sample_test(&xf, &xt, &kernel, permutations, rng)?.p_value,
    })
}

/// Applies a mapper to every embedding of a set, keeping labels.
pub fn map_set(mapper: &MapperGenerator, set: &LabeledEmbeddings) -> Result<LabeledEmbeddings> {
    let mapped = mapper.map_batch(&set.to_tensor()?)?;
    Ok(LabeledEmbeddings::from_tensor(&mapped, set.labels.clone())?)
}

pub fn concat(a: &LabeledEmbeddings, b: &LabeledEmbeddings) -> Result<LabeledEmbeddings> {
    let mut e = a.embeddings.clone();
    e.extend(b.embeddings.iter().cloned());
    let mut l = a.labels.clone();
    l.extend(&b.labels);
    Ok(LabeledEmbeddings::new(e, l)?)
}

/// Runs datagen, all four training stages, both translations of the first
/// held-out sample, and evaluation on the held-out split.
pub fn run_all(ws: &Workspace) -> Result<MetricReport> {
    ws.datagen()?;
    for stage in Stage::ALL {
        ws.train(stage)?;
    }
    translate_and_evaluate(ws)
}

/// The steps of [`run_all`] after training: translations written to `out/`
/// and held-out evaluation.
pub fn translate_and_evaluate(ws: &Workspace) -> Result<MetricReport> {
    let test = corpus::load(&ws.captions_path(Split::Test))?;
    let out = ws.output_dir();
    fsutil::create_dir(&out)?;
    let caption = ws.translate_image(&ws.image_path(Split::Test, 0))?;
    fsutil::write_atomic(
        &out.join("image-to-text.txt"),
        format!("{caption}\n").as_bytes(),
    )?;
    if let Some(first) = test.first() {
        let img = ws.translate_text(&first.caption, false)?;
        ppm::write(&img, &out.join("text-to-image.ppm"))?;
    }
    ws.evaluate(Split::Test, false)
}

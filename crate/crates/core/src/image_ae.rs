//! Image autoencoder: a strided convolutional encoder produces the image
//! embedding ψ, conditional augmentation turns ψ into a conditioning vector ĉ,
//! and a multi-branch generator decodes (ĉ, z) into images at doubling
//! resolutions. Each branch has its own discriminator with an unconditional
//! head and a head conditioned on ĉ.
//!
//! Images are `[3×H×W]` (or batched `[B×3×H×W]`) with values in `[-1, 1]`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
// Unused whenever std ends up linked into the build, since std then supplies
// the float methods inherently.
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Dense, LEAKY_SLOPE};
use crate::optim::Adam;

/// Hyperparameters of the image autoencoder and its training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageAeConfig {
    /// Resolution of the first generator branch.
    pub base_resolution: usize,
    pub branches: usize,
    pub embed_dim: usize,
    pub cond_dim: usize,
    pub noise_dim: usize,
    pub gen_channels: usize,
    pub enc_channels: usize,
    pub disc_channels: usize,
    pub lambda_kl: f64,
    pub lambda_rec: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for ImageAeConfig {
    fn default() -> Self {
        Self {
            base_resolution: 8,
            branches: 3,
            embed_dim: 64,
            cond_dim: 16,
            noise_dim: 16,
            gen_channels: 16,
            enc_channels: 16,
            disc_channels: 16,
            lambda_kl: 1.0,
            lambda_rec: 1.0,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 16,
            epochs: 60,
        }
    }
}

impl ImageAeConfig {
    /// Resolution of the last branch, `base · 2^(branches−1)`.
    pub fn top_resolution(&self) -> usize {
        self.base_resolution << self.branches.saturating_sub(1)
    }

    pub fn branch_resolutions(&self) -> Vec<usize> {
        (0..self.branches)
            .map(|i| self.base_resolution << i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.branches == 0 {
            return bad("image_ae.branches must be at least 1".into());
        }
        if self.base_resolution < 4 || !self.base_resolution.is_multiple_of(4) {
            return bad(format!(
                "image_ae.base_resolution must be a positive multiple of 4, got {}",
                self.base_resolution
            ));
        }
        if !self.top_resolution().is_multiple_of(ENCODER_STRIDE_PRODUCT) {
            return bad(format!(
                "top resolution {} must be divisible by {ENCODER_STRIDE_PRODUCT}",
                self.top_resolution()
            ));
        }
        for (key, v) in [
            ("embed_dim", self.embed_dim),
            ("cond_dim", self.cond_dim),
            ("noise_dim", self.noise_dim),
            ("gen_channels", self.gen_channels),
            ("enc_channels", self.enc_channels),
            ("disc_channels", self.disc_channels),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(format!("image_ae.{key} must be positive"));
            }
        }
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return bad("image_ae optimizer settings out of range".into());
        }
        if !(self.lambda_kl >= 0.0) || !(self.lambda_rec >= 0.0) {
            return bad("image_ae loss weights must be non-negative".into());
        }
        Ok(())
    }
}

const ENCODER_BLOCKS: usize = 4;
const ENCODER_STRIDE_PRODUCT: usize = 1 << ENCODER_BLOCKS;
/// Spatial size at which the discriminator trunk stops downsampling.
const DISC_GRID: usize = 4;

/// KL divergence of `N(μ, diag(exp(logvar)))` from the standard normal.
pub fn kl_closed_form(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
        * 0.5
}

/// Batch-mean KL term on the graph, from `mu[B×d]` and `logvar[B×d]`.
pub fn kl_term(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let batch = g.shape(mu)[0];
    let m2 = g.square(mu);
    let e = g.exp(logvar);
    let a = g.add(m2, e)?;
    let b = g.sub(a, logvar)?;
    let b = g.shift(b, -1.0);
    let s = g.sum(b);
    Ok(g.scale(s, 0.5 / batch as f64))
}

/// `ĉ = μ + exp(½·logvar)⊙ε`.
pub fn reparameterize(g: &mut Graph, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = g.scale(logvar, 0.5);
    let sigma = g.exp(half);
    let noise = g.mul(sigma, eps)?;
    g.add(mu, noise)
}

/// Standard-normal tensor of the given shape.
pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Mean of `-log p` over every element of `p`.
fn neg_log_mean(g: &mut Graph, p: Var) -> Var {
    let l = g.log(p);
    let m = g.mean(l);
    g.neg(m)
}

/// Mean of `-log(1 - p)` over every element of `p`.
fn neg_log_complement_mean(g: &mut Graph, p: Var) -> Var {
    let q = g.one_minus(p);
    neg_log_mean(g, q)
}

/// Discriminator objective for one branch from the four head probabilities:
/// `−E log D(x) − E log(1−D(u)) − E log D(x,c) − E log(1−D(u,c))`.
pub fn discriminator_loss(
    g: &mut Graph,
    real_uncond: Var,
    fake_uncond: Var,
    real_cond: Var,
    fake_cond: Var,
) -> Result<Var> {
    let a = neg_log_mean(g, real_uncond);
    let b = neg_log_complement_mean(g, fake_uncond);
    let c = neg_log_mean(g, real_cond);
    let d = neg_log_complement_mean(g, fake_cond);
    let ab = g.add(a, b)?;
    let cd = g.add(c, d)?;
    g.add(ab, cd)
}

/// Adversarial generator objective for one branch: `−E log D(u) − E log D(u,c)`.
pub fn generator_adversarial_loss(g: &mut Graph, fake_uncond: Var, fake_cond: Var) -> Result<Var> {
    let a = neg_log_mean(g, fake_uncond);
    let b = neg_log_mean(g, fake_cond);
    g.add(a, b)
}

fn flatten(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let rest: usize = s[1..].iter().product();
    g.reshape(x, &[s[0], rest])
}

fn as_batch(g: &mut Graph, x: Var) -> Result<Var> {
    match *g.shape(x) {
        [c, h, w] => g.reshape(x, &[1, c, h, w]),
        [_, _, _, _] => Ok(x),
        ref s => Err(Error::InvalidShape {
            op: "image",
            detail: format!("expected 3×H×W or B×3×H×W, got {s:?}"),
        }),
    }
}

/// Strided convolutional encoder `image → ψ`.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    blocks: Vec<Conv2d>,
    head: Dense,
    resolution: usize,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ImageAeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(ENCODER_BLOCKS);
        let mut channels = 3;
        for i in 0..ENCODER_BLOCKS {
            let out = cfg.enc_channels << i.min(1);
            blocks.push(Conv2d::new(
                store,
                &format!("enc.conv{i}"),
                channels,
                out,
                4,
                2,
                1,
                rng,
            )?);
            channels = out;
        }
        let grid = cfg.top_resolution() / ENCODER_STRIDE_PRODUCT;
        let head = Dense::new(
            store,
            "enc.head",
            channels * grid * grid,
            cfg.embed_dim,
            rng,
        )?;
        Ok(Self {
            blocks,
            head,
            resolution: cfg.top_resolution(),
        })
    }

    /// Embeds a batch `[B×3×H×W]` (or one `[3×H×W]` image) into `[B×D_img]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Result<Var> {
        let x = as_batch(g, images)?;
        let s = g.shape(x);
        if s[1] != 3 || s[2] != self.resolution || s[3] != self.resolution {
            return Err(Error::InvalidShape {
                op: "encode_image",
                detail: format!(
                    "expected 3×{r}×{r} images, got {:?}",
                    &s[1..],
                    r = self.resolution
                ),
            });
        }
        let mut h = x;
        for block in &self.blocks {
            let y = block.forward(g, store, h)?;
            h = g.leaky_relu(y, LEAKY_SLOPE);
        }
        let flat = flatten(g, h)?;
        self.head.forward(g, store, flat)
    }
}

/// Projection `ψ → (μ, logvar)`.
#[derive(Debug, Clone)]
pub struct CondAugment {
    proj: Dense,
    pub cond_dim: usize,
}

impl CondAugment {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ImageAeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            proj: Dense::new(store, "aug.proj", cfg.embed_dim, 2 * cfg.cond_dim, rng)?,
            cond_dim: cfg.cond_dim,
        })
    }

    /// Returns `(μ, logvar)`, each `[B×D_c]`.
    pub fn moments(&self, g: &mut Graph, store: &ParamStore, psi: Var) -> Result<(Var, Var)> {
        let both = self.proj.forward(g, store, psi)?;
        let mu = g.slice(both, 1, 0, self.cond_dim)?;
        let logvar = g.slice(both, 1, self.cond_dim, self.cond_dim)?;
        Ok((mu, logvar))
    }
}

/// Multi-branch generator: `h_0 = Fn_0(c, z)`, `h_i = Fn_i(h_{i−1}, c)`,
/// `u_i = G_i(h_i)`.
#[derive(Debug, Clone)]
pub struct GeneratorStack {
    fc0: Dense,
    conv0: Conv2d,
    refine: Vec<Conv2d>,
    heads: Vec<Conv2d>,
    base: usize,
    channels: usize,
    cond_dim: usize,
    noise_dim: usize,
}

impl GeneratorStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ImageAeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let ch = cfg.gen_channels;
        let seed_side = cfg.base_resolution / 2;
        let fc0 = Dense::new(
            store,
            "gen.fn0.fc",
            cfg.cond_dim + cfg.noise_dim,
            ch * seed_side * seed_side,
            rng,
        )?;
        let conv0 = Conv2d::new(store, "gen.fn0.conv", ch, ch, 3, 1, 1, rng)?;
        let mut refine = Vec::new();
        for i in 1..cfg.branches {
            refine.push(Conv2d::new(
                store,
                &format!("gen.fn{i}.conv"),
                ch + cfg.cond_dim,
                ch,
                3,
                1,
                1,
                rng,
            )?);
        }
        let mut heads = Vec::new();
        for i in 0..cfg.branches {
            heads.push(Conv2d::new(
                store,
                &format!("gen.g{i}"),
                ch,
                3,
                3,
                1,
                1,
                rng,
            )?);
        }
        Ok(Self {
            fc0,
            conv0,
            refine,
            heads,
            base: cfg.base_resolution,
            channels: ch,
            cond_dim: cfg.cond_dim,
            noise_dim: cfg.noise_dim,
        })
    }

    pub fn branches(&self) -> usize {
        self.heads.len()
    }

    /// Images `u_0..u_{n−1}` for `c[B×D_c]` and `z[B×D_z]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, c: Var, z: Var) -> Result<Vec<Var>> {
        let (cs, zs) = (g.shape(c).to_vec(), g.shape(z).to_vec());
        if cs.len() != 2
            || zs.len() != 2
            || cs[0] != zs[0]
            || cs[1] != self.cond_dim
            || zs[1] != self.noise_dim
        {
            return Err(Error::ShapeMismatch {
                op: "generate_stack",
                lhs: cs,
                rhs: zs,
            });
        }
        let batch = cs[0];
        let cz = g.concat(&[c, z], 1)?;
        let seed = self.fc0.forward(g, store, cz)?;
        let seed = g.relu(seed);
        let side = self.base / 2;
        let seed = g.reshape(seed, &[batch, self.channels, side, side])?;
        let up = g.upsample2x(seed)?;
        let h0 = self.conv0.forward(g, store, up)?;
        let mut h = g.relu(h0);
        let mut images = Vec::with_capacity(self.branches());
        let mut side = self.base;
        for (i, head) in self.heads.iter().enumerate() {
            if i > 0 {
                let tiled = g.tile_spatial(c, side, side)?;
                let joined = g.concat(&[h, tiled], 1)?;
                let up = g.upsample2x(joined)?;
                let y = self.refine[i - 1].forward(g, store, up)?;
                h = g.relu(y);
                side *= 2;
            }
            let u = head.forward(g, store, h)?;
            images.push(g.tanh(u));
        }
        Ok(images)
    }
}

/// Per-branch discriminator with a shared trunk and two sigmoid heads.
#[derive(Debug, Clone)]
pub struct BranchDiscriminator {
    trunk: Vec<Conv2d>,
    uncond: Dense,
    cond_conv: Conv2d,
    cond: Dense,
    pub resolution: usize,
}

impl BranchDiscriminator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        resolution: usize,
        cfg: &ImageAeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut trunk = Vec::new();
        let mut channels = 3;
        let mut side = resolution;
        let mut i = 0;
        while side > DISC_GRID {
            let out = cfg.disc_channels << i.min(1);
            trunk.push(Conv2d::new(
                store,
                &format!("{name}.conv{i}"),
                channels,
                out,
                4,
                2,
                1,
                rng,
            )?);
            channels = out;
            side /= 2;
            i += 1;
        }
        let cells = channels * DISC_GRID * DISC_GRID;
        let uncond = Dense::new(store, &format!("{name}.uncond"), cells, 1, rng)?;
        let cond_conv = Conv2d::new(
            store,
            &format!("{name}.cond_conv"),
            channels + cfg.cond_dim,
            channels,
            3,
            1,
            1,
            rng,
        )?;
        let cond = Dense::new(store, &format!("{name}.cond"), cells, 1, rng)?;
        Ok(Self {
            trunk,
            uncond,
            cond_conv,
            cond,
            resolution,
        })
    }

    /// Head probabilities `(D(x), D(x, c))`, each `[B×1]`.
    pub fn heads(&self, g: &mut Graph, store: &ParamStore, x: Var, c: Var) -> Result<(Var, Var)> {
        let x = as_batch(g, x)?;
        if g.shape(x)[2] != self.resolution {
            return Err(Error::InvalidShape {
                op: "discriminator",
                detail: format!(
                    "expected resolution {}, got {:?}",
                    self.resolution,
                    g.shape(x)
                ),
            });
        }
        let mut h = x;
        for conv in &self.trunk {
            let y = conv.forward(g, store, h)?;
            h = g.leaky_relu(y, LEAKY_SLOPE);
        }
        let flat = flatten(g, h)?;
        let u = self.uncond.forward(g, store, flat)?;
        let p_uncond = g.sigmoid(u);
        let tiled = g.tile_spatial(c, DISC_GRID, DISC_GRID)?;
        let joined = g.concat(&[h, tiled], 1)?;
        let y = self.cond_conv.forward(g, store, joined)?;
        let y = g.leaky_relu(y, LEAKY_SLOPE);
        let flat = flatten(g, y)?;
        let v = self.cond.forward(g, store, flat)?;
        Ok((p_uncond, g.sigmoid(v)))
    }
}

/// Graph handles for one generator-side forward pass.
#[derive(Debug, Clone)]
pub struct GeneratorPass {
    pub psi: Var,
    pub mu: Var,
    pub logvar: Var,
    pub c: Var,
    pub kl: Var,
    pub images: Vec<Var>,
}

/// Graph handles for the generator objective.
#[derive(Debug, Clone)]
pub struct GeneratorObjective {
    pub pass: GeneratorPass,
    /// One adversarial term per branch.
    pub adversarial: Vec<Var>,
    pub reconstruction: Var,
    pub total: Var,
}

/// Scalar losses of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageStepLosses {
    pub discriminator: f64,
    pub generator: f64,
    pub adversarial: f64,
    pub kl: f64,
    pub reconstruction: f64,
}

/// Encoder, augmentation and generator share `gen_store`; all discriminators
/// live in `disc_store`.
#[derive(Debug, Clone)]
pub struct ImageAutoencoder {
    pub config: ImageAeConfig,
    pub gen_store: ParamStore,
    pub disc_store: ParamStore,
    pub encoder: ImageEncoder,
    pub augment: CondAugment,
    pub stack: GeneratorStack,
    pub discriminators: Vec<BranchDiscriminator>,
    gen_opt: Adam,
    disc_opt: Adam,
}

impl ImageAutoencoder {
    pub fn new<R: Rng + ?Sized>(config: ImageAeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut gen_store = ParamStore::new();
        let encoder = ImageEncoder::new(&mut gen_store, &config, rng)?;
        let augment = CondAugment::new(&mut gen_store, &config, rng)?;
        let stack = GeneratorStack::new(&mut gen_store, &config, rng)?;
        let mut disc_store = ParamStore::new();
        let mut discriminators = Vec::new();
        for (i, r) in config.branch_resolutions().into_iter().enumerate() {
            discriminators.push(BranchDiscriminator::new(
                &mut disc_store,
                &format!("disc{i}"),
                r,
                &config,
                rng,
            )?);
        }
        let gen_opt = Adam::new(&gen_store, config.lr, config.beta1, config.beta2);
        let disc_opt = Adam::new(&disc_store, config.lr, config.beta1, config.beta2);
        Ok(Self {
            config,
            gen_store,
            disc_store,
            encoder,
            augment,
            stack,
            discriminators,
            gen_opt,
            disc_opt,
        })
    }

    /// Embedding ψ of one image `[3×H×W]`.
    pub fn encode_image(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(self.encode_batch(image)?.into_values())
    }

    /// Embeddings `[B×D_img]` of a batch.
    pub fn encode_batch(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let psi = self.encoder.forward(&mut g, &self.gen_store, x)?;
        Ok(g.value(psi).clone())
    }

    /// Samples `ĉ` for embedding `psi` and reports its KL term.
    pub fn cond_augment<R: Rng + ?Sized>(
        &self,
        psi: &[f64],
        rng: &mut R,
    ) -> Result<(Vec<f64>, f64)> {
        let eps = standard_normal(&[1, self.config.cond_dim], rng)?;
        self.cond_augment_with(psi, Some(&eps))
    }

    /// Conditional augmentation with explicit noise; `None` means `ε = 0`.
    pub fn cond_augment_with(&self, psi: &[f64], eps: Option<&Tensor>) -> Result<(Vec<f64>, f64)> {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(&[1, psi.len()], psi.to_vec())?);
        let (mu, logvar) = self.augment.moments(&mut g, &self.gen_store, p)?;
        if !g.value(mu).is_finite() || !g.value(logvar).is_finite() {
            return Err(Error::Divergence(
                "conditional augmentation produced non-finite moments".into(),
            ));
        }
        let kl = kl_closed_form(g.value(mu).values(), g.value(logvar).values());
        let c = match eps {
            Some(e) => {
                let e = g.constant(e.clone());
                let c = reparameterize(&mut g, mu, logvar, e)?;
                g.value(c).values().to_vec()
            }
            None => g.value(mu).values().to_vec(),
        };
        Ok((c, kl))
    }

    /// Generated images `u_0..u_{n−1}` for one `(ĉ, z)`.
    pub fn generate(&self, c: &[f64], z: &[f64]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let cv = g.constant(Tensor::new(&[1, c.len()], c.to_vec())?);
        let zv = g.constant(Tensor::new(&[1, z.len()], z.to_vec())?);
        let images = self.stack.forward(&mut g, &self.gen_store, cv, zv)?;
        images
            .into_iter()
            .map(|u| {
                let t = g.value(u);
                t.reshaped(&t.shape()[1..])
            })
            .collect()
    }

    /// Encoder → augmentation → generator on the graph.
    pub fn generator_pass(
        &self,
        g: &mut Graph,
        gen: &ParamStore,
        images: Var,
        eps: &Tensor,
        z: &Tensor,
    ) -> Result<GeneratorPass> {
        let psi = self.encoder.forward(g, gen, images)?;
        let (mu, logvar) = self.augment.moments(g, gen, psi)?;
        let kl = kl_term(g, mu, logvar)?;
        let e = g.constant(eps.clone());
        let c = reparameterize(g, mu, logvar, e)?;
        let zv = g.constant(z.clone());
        let out = self.stack.forward(g, gen, c, zv)?;
        Ok(GeneratorPass {
            psi,
            mu,
            logvar,
            c,
            kl,
            images: out,
        })
    }

    /// Real images at every branch resolution, by repeated 2×2 averaging.
    pub fn real_pyramid(&self, g: &mut Graph, images: Var) -> Result<Vec<Var>> {
        let mut levels = Vec::with_capacity(self.config.branches);
        let mut cur = as_batch(g, images)?;
        levels.push(cur);
        for _ in 1..self.config.branches {
            cur = g.avg_pool2x(cur)?;
            levels.push(cur);
        }
        levels.reverse();
        Ok(levels)
    }

    /// Total generator objective: adversarial terms over all branches,
    /// `λ_KL·KL` and `λ_rec·L1(u_{n−1}, x)`.
    pub fn generator_objective(
        &self,
        g: &mut Graph,
        gen: &ParamStore,
        disc: &ParamStore,
        images: Var,
        eps: &Tensor,
        z: &Tensor,
    ) -> Result<GeneratorObjective> {
        let images = as_batch(g, images)?;
        let pass = self.generator_pass(g, gen, images, eps, z)?;
        let mut adversarial = Vec::with_capacity(pass.images.len());
        for (d, &u) in self.discriminators.iter().zip(&pass.images) {
            let (pu, pc) = d.heads(g, disc, u, pass.c)?;
            adversarial.push(generator_adversarial_loss(g, pu, pc)?);
        }
        let last = *pass.images.last().expect("at least one branch");
        let diff = g.sub(last, images)?;
        let abs = g.abs(diff);
        let reconstruction = g.mean(abs);
        let mut total = pass.kl;
        total = g.scale(total, self.config.lambda_kl);
        for &a in &adversarial {
            total = g.add(total, a)?;
        }
        let rec = g.scale(reconstruction, self.config.lambda_rec);
        total = g.add(total, rec)?;
        Ok(GeneratorObjective {
            pass,
            adversarial,
            reconstruction,
            total,
        })
    }

    /// Sum over branches of the discriminator objective, with real images
    /// paired with their own detached conditioning vector.
    pub fn discriminator_objective(
        &self,
        g: &mut Graph,
        gen: &ParamStore,
        disc: &ParamStore,
        images: Var,
        eps: &Tensor,
        z: &Tensor,
    ) -> Result<(Var, Vec<Var>)> {
        let images = as_batch(g, images)?;
        let pass = self.generator_pass(g, gen, images, eps, z)?;
        let c = g.detach(pass.c);
        let reals = self.real_pyramid(g, images)?;
        let mut per_branch = Vec::with_capacity(reals.len());
        for ((d, &u), &x) in self.discriminators.iter().zip(&pass.images).zip(&reals) {
            let fake = g.detach(u);
            let (ru, rc) = d.heads(g, disc, x, c)?;
            let (fu, fc) = d.heads(g, disc, fake, c)?;
            per_branch.push(discriminator_loss(g, ru, fu, rc, fc)?);
        }
        let mut total = per_branch[0];
        for &v in &per_branch[1..] {
            total = g.add(total, v)?;
        }
        Ok((total, per_branch))
    }

    /// One discriminator update (all branches) followed by one update of the
    /// encoder, augmentation and generator. Parameters are left untouched
    /// when a loss is non-finite.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        images: &Tensor,
        rng: &mut R,
    ) -> Result<ImageStepLosses> {
        let batch = images.shape()[0];
        let eps = standard_normal(&[batch, self.config.cond_dim], rng)?;
        let z = standard_normal(&[batch, self.config.noise_dim], rng)?;

        self.gen_store.set_requires_grad(false);
        self.disc_store.set_requires_grad(true);
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let (d_loss, _) =
            self.discriminator_objective(&mut g, &self.gen_store, &self.disc_store, x, &eps, &z)?;
        let d_value = g.value(d_loss).item();
        if !d_value.is_finite() {
            self.gen_store.set_requires_grad(true);
            return Err(Error::Divergence(format!(
                "discriminator loss is {d_value}"
            )));
        }
        g.backward(d_loss)?.accumulate_into(&mut self.disc_store);
        self.disc_opt.step(&mut self.disc_store);

        self.gen_store.set_requires_grad(true);
        self.disc_store.set_requires_grad(false);
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let obj =
            self.generator_objective(&mut g, &self.gen_store, &self.disc_store, x, &eps, &z)?;
        let parts = ImageStepLosses {
            discriminator: d_value,
            generator: g.value(obj.total).item(),
            adversarial: obj.adversarial.iter().map(|&a| g.value(a).item()).sum(),
            kl: g.value(obj.pass.kl).item(),
            reconstruction: g.value(obj.reconstruction).item(),
        };
        self.disc_store.set_requires_grad(true);
        if !parts.generator.is_finite() {
            return Err(Error::Divergence(format!(
                "generator loss is {}",
                parts.generator
            )));
        }
        g.backward(obj.total)?.accumulate_into(&mut self.gen_store);
        self.gen_opt.step(&mut self.gen_store);
        if !self.gen_store.all_finite() || !self.disc_store.all_finite() {
            return Err(Error::Divergence(
                "non-finite parameters after update".into(),
            ));
        }
        Ok(parts)
    }

    /// Mean final-branch L1 reconstruction with `ε = 0` and `z = 0`.
    pub fn reconstruction_l1(&self, images: &Tensor) -> Result<f64> {
        let batch = images.shape()[0];
        let eps = Tensor::zeros(&[batch, self.config.cond_dim])?;
        let z = Tensor::zeros(&[batch, self.config.noise_dim])?;
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let obj =
            self.generator_objective(&mut g, &self.gen_store, &self.disc_store, x, &eps, &z)?;
        Ok(g.value(obj.reconstruction).item())
    }

    /// Named parameter tensors, generator side under `gen/`, discriminators
    /// under `disc/`.
    pub fn export(&self) -> Vec<(String, Tensor)> {
        let tag = |p: &str, v: Vec<(String, Tensor)>| {
            v.into_iter()
                .map(move |(n, t)| (format!("{p}{n}"), t))
                .collect::<Vec<_>>()
        };
        let mut out = tag("gen/", self.gen_store.export());
        out.extend(tag("disc/", self.disc_store.export()));
        out
    }

    pub fn import(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        self.gen_store.import("gen/", named)?;
        self.disc_store.import("disc/", named)?;
        let known = self.gen_store.len() + self.disc_store.len();
        if named.len() != known {
            return Err(Error::ParamMismatch(format!(
                "checkpoint has {} tensors, model expects {known}",
                named.len()
            )));
        }
        Ok(())
    }
}

/// Stacks equally shaped `[3×H×W]` images into `[B×3×H×W]`.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::InvalidShape {
        op: "stack_images",
        detail: "no images".to_string(),
    })?;
    let shape = first.shape().to_vec();
    let mut values = Vec::with_capacity(images.len() * first.numel());
    for im in images {
        if im.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "stack_images",
                lhs: shape,
                rhs: im.shape().to_vec(),
            });
        }
        values.extend_from_slice(im.values());
    }
    let mut full = Vec::with_capacity(shape.len() + 1);
    full.push(images.len());
    full.extend_from_slice(&shape);
    Tensor::new(&full, values)
}

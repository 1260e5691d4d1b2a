//! Unpaired translation between embedding spaces. A generator `g_θ` maps
//! source embeddings into the target space and is trained either against a
//! discriminator or by minimizing the squared MMD between mapped and real
//! target batches, optionally through learned critic features.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
// Unused whenever std ends up linked into the build, since std then supplies
// the float methods inherently.
#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Dense, LEAKY_SLOPE};
use crate::optim::Adam;

/// Multiples of the base bandwidth used by the RBF mixture.
pub const MIXTURE_SCALES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Mixture of RBF kernels `k(x, y) = Σ_q exp(−‖x−y‖² / (2σ_q²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub bandwidths: Vec<f64>,
}

impl KernelSpec {
    pub fn new(bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() || bandwidths.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!(
                "bandwidths must be positive, got {bandwidths:?}"
            )));
        }
        Ok(Self { bandwidths })
    }

    pub fn single(sigma: f64) -> Result<Self> {
        Self::new(vec![sigma])
    }

    /// The five-scale mixture around `sigma0`.
    pub fn mixture(sigma0: f64) -> Result<Self> {
        Self::new(MIXTURE_SCALES.iter().map(|s| s * sigma0).collect())
    }

    pub fn len(&self) -> usize {
        self.bandwidths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bandwidths.is_empty()
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        self.eval_sq_dist(d2)
    }

    pub fn eval_sq_dist(&self, d2: f64) -> f64 {
        self.bandwidths
            .iter()
            .map(|s| (-d2 / (2.0 * s * s)).exp())
            .sum()
    }

    /// Gram matrix `[n×m]` between the rows of `a` and `b` on the graph.
    pub fn gram(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        let d = g.pairwise_sq_dist(a, b)?;
        let mut total: Option<Var> = None;
        for s in &self.bandwidths {
            let scaled = g.scale(d, -1.0 / (2.0 * s * s));
            let e = g.exp(scaled);
            total = Some(match total {
                Some(t) => g.add(t, e)?,
                None => e,
            });
        }
        Ok(total.expect("at least one bandwidth"))
    }

    /// Gram matrix of plain row-major data.
    pub fn gram_matrix(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let k = self.gram(&mut g, av, bv)?;
        Ok(g.value(k).clone())
    }
}

fn check_pair(op: &'static str, g: &Graph, x: Var, y: Var, min: usize) -> Result<(usize, usize)> {
    let (xs, ys) = (g.shape(x), g.shape(y));
    if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[1] {
        return shape_err(op, xs, ys);
    }
    let (n, m) = (xs[0], ys[0]);
    if n < min || m < min {
        return Err(Error::BatchTooSmall {
            op,
            need: min,
            got: n.min(m),
        });
    }
    Ok((n, m))
}

/// V-statistic `mean k(x,x') + mean k(y,y') − 2·mean k(x,y)` on the graph.
pub fn mmd2_biased_var(g: &mut Graph, x: Var, y: Var, kernel: &KernelSpec) -> Result<Var> {
    check_pair("mmd2_biased", g, x, y, 1)?;
    let kxx = kernel.gram(g, x, x)?;
    let kyy = kernel.gram(g, y, y)?;
    let kxy = kernel.gram(g, x, y)?;
    let a = g.mean(kxx);
    let b = g.mean(kyy);
    let c = g.mean(kxy);
    let c2 = g.scale(c, 2.0);
    let ab = g.add(a, b)?;
    g.sub(ab, c2)
}

fn off_diagonal_mean(g: &mut Graph, k: Var, n: usize) -> Result<Var> {
    let mask = g.constant(Tensor::from_fn(&[n, n], |i| {
        if i / n == i % n {
            0.0
        } else {
            1.0
        }
    })?);
    let off = g.mul(k, mask)?;
    let s = g.sum(off);
    Ok(g.scale(s, 1.0 / (n * (n - 1)) as f64))
}

/// U-statistic: within-set means exclude the `i = j` terms.
pub fn mmd2_unbiased_var(g: &mut Graph, x: Var, y: Var, kernel: &KernelSpec) -> Result<Var> {
    let (n, m) = check_pair("mmd2_unbiased", g, x, y, 2)?;
    let kxx = kernel.gram(g, x, x)?;
    let kyy = kernel.gram(g, y, y)?;
    let kxy = kernel.gram(g, x, y)?;
    let a = off_diagonal_mean(g, kxx, n)?;
    let b = off_diagonal_mean(g, kyy, m)?;
    let c = g.mean(kxy);
    let c2 = g.scale(c, 2.0);
    let ab = g.add(a, b)?;
    g.sub(ab, c2)
}

fn with_constants(
    x: &Tensor,
    y: &Tensor,
    f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let out = f(&mut g, xv, yv)?;
    Ok(g.value(out).item())
}

/// Biased squared MMD between the rows of `x` and `y`.
pub fn mmd2_biased(x: &Tensor, y: &Tensor, kernel: &KernelSpec) -> Result<f64> {
    with_constants(x, y, |g, a, b| mmd2_biased_var(g, a, b, kernel))
}

/// Unbiased squared MMD between the rows of `x` and `y`.
pub fn mmd2_unbiased(x: &Tensor, y: &Tensor, kernel: &KernelSpec) -> Result<f64> {
    with_constants(x, y, |g, a, b| mmd2_unbiased_var(g, a, b, kernel))
}

/// Base bandwidth from the pooled rows of `x` and `y`: `σ₀² = median/2` of
/// all pairwise squared distances. Falls back to 1 when every pooled point
/// coincides.
pub fn median_heuristic(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[1] {
        return shape_err("median_heuristic", x.shape(), y.shape());
    }
    let rows: Vec<&[f64]> = (0..x.shape()[0])
        .map(|i| x.row(i))
        .chain((0..y.shape()[0]).map(|i| y.row(i)))
        .collect();
    if rows.len() < 2 {
        return Err(Error::BatchTooSmall {
            op: "median_heuristic",
            need: 2,
            got: rows.len(),
        });
    }
    let mut d2 = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d2.push(
                rows[i]
                    .iter()
                    .zip(rows[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>(),
            );
        }
    }
    d2.sort_unstable_by(f64::total_cmp);
    let k = d2.len();
    let median = if k % 2 == 1 {
        d2[k / 2]
    } else {
        0.5 * (d2[k / 2 - 1] + d2[k / 2])
    };
    if !(median > 0.0) || !median.is_finite() {
        log::warn!("median heuristic on identical points; using bandwidth 1");
        return Ok(1.0);
    }
    Ok((median / 2.0).sqrt())
}

/// Two-hidden-layer perceptron with ReLU activations.
#[derive(Debug, Clone)]
pub struct MapperGenerator {
    pub store: ParamStore,
    layers: [Dense; 3],
    pub input_dim: usize,
    pub output_dim: usize,
}

impl MapperGenerator {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        output_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let layers = [
            Dense::new(&mut store, "g.fc0", input_dim, hidden, rng)?,
            Dense::new(&mut store, "g.fc1", hidden, hidden, rng)?,
            Dense::new(&mut store, "g.fc2", hidden, output_dim, rng)?,
        ];
        Ok(Self {
            store,
            layers,
            input_dim,
            output_dim,
        })
    }

    /// Sets weights so that `g(x) = x` exactly, using `relu(x) − relu(−x)`.
    /// Needs equal input and output sizes and a hidden width of at least
    /// twice that size.
    pub fn set_identity(&mut self) -> Result<()> {
        let d = self.input_dim;
        let h = self.layers[0].output;
        if self.output_dim != d || h < 2 * d {
            return Err(Error::Config(format!(
                "identity mapping needs in = out and hidden ≥ {}, got {d}→{h}→{}",
                2 * d,
                self.output_dim
            )));
        }
        let [l0, l1, l2] = &self.layers;
        let w0 = Tensor::from_fn(&[h, d], |k| {
            let (r, c) = (k / d, k % d);
            if r == c {
                1.0
            } else if r == c + d {
                -1.0
            } else {
                0.0
            }
        })?;
        let w1 = Tensor::from_fn(&[h, h], |k| {
            if k / h == k % h && k / h < 2 * d {
                1.0
            } else {
                0.0
            }
        })?;
        let w2 = Tensor::from_fn(&[d, h], |k| {
            let (r, c) = (k / h, k % h);
            if c == r {
                1.0
            } else if c == r + d {
                -1.0
            } else {
                0.0
            }
        })?;
        for (layer, w) in [(l0, w0), (l1, w1), (l2, w2)] {
            self.store
                .get_mut(layer.weight)
                .values_mut()
                .copy_from_slice(w.values());
            self.store.get_mut(layer.bias).values_mut().fill(0.0);
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Maps a batch `[N×d_source]` to `[N×d_target]`.
    pub fn map_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &self.store, xv)?;
        Ok(g.value(y).clone())
    }

    /// Translates a single embedding.
    pub fn map_embedding(&self, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.input_dim {
            return shape_err("map_embedding", &[e.len()], &[self.input_dim]);
        }
        Ok(self
            .map_batch(&Tensor::new(&[1, e.len()], e.to_vec())?)?
            .into_values())
    }
}

/// Perceptron critic with a sigmoid output.
#[derive(Debug, Clone)]
pub struct MapperDiscriminator {
    pub store: ParamStore,
    layers: [Dense; 3],
}

impl MapperDiscriminator {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let layers = [
            Dense::new(&mut store, "d.fc0", input_dim, hidden, rng)?,
            Dense::new(&mut store, "d.fc1", hidden, hidden, rng)?,
            Dense::new(&mut store, "d.fc2", hidden, 1, rng)?,
        ];
        Ok(Self { store, layers })
    }

    /// Probabilities `[N×1]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(g.sigmoid(h))
    }

    /// Output-layer parameter ids `(weight, bias)`.
    pub fn output_layer(&self) -> (crate::autodiff::ParamId, crate::autodiff::ParamId) {
        (self.layers[2].weight, self.layers[2].bias)
    }
}

/// `−E log D(x) − E log(1 − D(g(z)))`.
pub fn gan_discriminator_loss(g: &mut Graph, p_real: Var, p_fake: Var) -> Result<Var> {
    let lr = g.log(p_real);
    let a = g.mean(lr);
    let q = g.one_minus(p_fake);
    let lq = g.log(q);
    let b = g.mean(lq);
    let s = g.add(a, b)?;
    Ok(g.neg(s))
}

/// Non-saturating generator loss `−E log D(g(z))`.
pub fn gan_generator_loss(g: &mut Graph, p_fake: Var) -> Var {
    let l = g.log(p_fake);
    let m = g.mean(l);
    g.neg(m)
}

/// Learned kernel features `f_φ` with an autoencoding decoder `f'_φ`.
#[derive(Debug, Clone)]
pub struct MmdCritic {
    pub store: ParamStore,
    encoder: [Dense; 2],
    decoder: [Dense; 2],
    pub clip: f64,
}

impl MmdCritic {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        width: usize,
        clip: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = [
            Dense::new(&mut store, "critic.enc0", input_dim, width, rng)?,
            Dense::new(&mut store, "critic.enc1", width, width, rng)?,
        ];
        let decoder = [
            Dense::new(&mut store, "critic.dec0", width, width, rng)?,
            Dense::new(&mut store, "critic.dec1", width, input_dim, rng)?,
        ];
        let mut critic = Self {
            store,
            encoder,
            decoder,
            clip,
        };
        critic.store.clip(clip);
        Ok(critic)
    }

    pub fn features(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.encoder[0].forward(g, store, x)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        self.encoder[1].forward(g, store, h)
    }

    /// Mean squared reconstruction error of `f'_φ(f_φ(x))`.
    pub fn reconstruction(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        features: Var,
    ) -> Result<Var> {
        let h = self.decoder[0].forward(g, store, features)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let r = self.decoder[1].forward(g, store, h)?;
        let d = g.sub(r, x)?;
        let sq = g.square(d);
        Ok(g.mean(sq))
    }

    pub fn max_abs(&self) -> f64 {
        self.store.max_abs()
    }

    /// Makes `f_φ` copy its input into the leading feature coordinates and
    /// zero the rest, ignoring the clip bound. Needs a width of at least
    /// twice the input size.
    pub fn set_identity_features(&mut self) -> Result<()> {
        let d = self.encoder[0].input;
        let w = self.encoder[0].output;
        if w < 2 * d {
            return Err(Error::Config(format!(
                "identity features need width ≥ {}, got {w}",
                2 * d
            )));
        }
        // leaky(x) − leaky(−x) = (1 + slope)·x for either sign of x.
        let gain = 1.0 / (1.0 + LEAKY_SLOPE);
        let w0 = Tensor::from_fn(&[w, d], |k| {
            let (r, c) = (k / d, k % d);
            if r == c {
                1.0
            } else if r == c + d {
                -1.0
            } else {
                0.0
            }
        })?;
        let w1 = Tensor::from_fn(&[w, w], |k| {
            let (r, c) = (k / w, k % w);
            if r < d && c == r {
                gain
            } else if r < d && c == r + d {
                -gain
            } else {
                0.0
            }
        })?;
        for (layer, weights) in [(&self.encoder[0], w0), (&self.encoder[1], w1)] {
            self.store
                .get_mut(layer.weight)
                .values_mut()
                .copy_from_slice(weights.values());
            self.store.get_mut(layer.bias).values_mut().fill(0.0);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapperKind {
    Gan,
    Mmd,
}

impl MapperKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gan" => Ok(Self::Gan),
            "mmd" => Ok(Self::Mmd),
            other => Err(Error::Config(format!(
                "mapper.kind must be gan or mmd, got '{other}'"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Gan => "gan",
            Self::Mmd => "mmd",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperConfig {
    pub kind: MapperKind,
    pub hidden: usize,
    pub disc_hidden: usize,
    pub critic_dim: usize,
    pub clip: f64,
    pub lambda_ae: f64,
    pub n_critic: usize,
    /// Use the identity in place of learned critic features.
    pub fixed_kernel: bool,
    pub batch_size: usize,
    pub lr_gen: f64,
    pub lr_critic: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub steps: usize,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            kind: MapperKind::Mmd,
            hidden: 256,
            disc_hidden: 256,
            critic_dim: 64,
            clip: 0.1,
            lambda_ae: 1.0,
            n_critic: 5,
            fixed_kernel: false,
            batch_size: 64,
            lr_gen: 1e-4,
            lr_critic: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            steps: 2000,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("hidden", self.hidden),
            ("disc_hidden", self.disc_hidden),
            ("critic_dim", self.critic_dim),
            ("n_critic", self.n_critic),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("mapper.{key} must be positive")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("mapper.batch_size must be at least 2".into()));
        }
        if !(self.clip > 0.0)
            || !(self.lambda_ae >= 0.0)
            || !(self.lr_gen > 0.0)
            || !(self.lr_critic > 0.0)
        {
            return Err(Error::Config(
                "mapper rates, clip bound and weights must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("mapper betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Losses recorded for one generator step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapperStepLog {
    pub step: usize,
    /// Discriminator loss (GAN) or critic objective (MMD), from the last
    /// critic update of the step.
    pub critic: f64,
    /// Generator loss; for the MMD mapper this is the squared MMD itself.
    pub generator: f64,
}

enum Adversary {
    Disc(MapperDiscriminator, Adam),
    Critic(MmdCritic, Adam),
    Fixed,
}

/// Alternating trainer for either mapper kind.
pub struct MapperTrainer {
    pub config: MapperConfig,
    pub generator: MapperGenerator,
    gen_opt: Adam,
    adversary: Adversary,
    steps: usize,
}

fn random_batch<R: Rng + ?Sized>(set: &Tensor, size: usize, rng: &mut R) -> Result<Tensor> {
    let n = set.shape()[0];
    let idx = sample(rng, n, size.min(n));
    let d = set.shape()[1];
    let mut values = Vec::with_capacity(idx.len() * d);
    for i in idx.iter() {
        values.extend_from_slice(set.row(i));
    }
    Tensor::new(&[idx.len(), d], values)
}

impl MapperTrainer {
    pub fn new<R: Rng + ?Sized>(
        config: MapperConfig,
        source_dim: usize,
        target_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let generator = MapperGenerator::new(source_dim, target_dim, config.hidden, rng)?;
        let gen_opt = Adam::new(&generator.store, config.lr_gen, config.beta1, config.beta2);
        let adversary = match (config.kind, config.fixed_kernel) {
            (MapperKind::Gan, _) => {
                let d = MapperDiscriminator::new(target_dim, config.disc_hidden, rng)?;
                let opt = Adam::new(&d.store, config.lr_critic, config.beta1, config.beta2);
                Adversary::Disc(d, opt)
            }
            (MapperKind::Mmd, false) => {
                let c = MmdCritic::new(target_dim, config.critic_dim, config.clip, rng)?;
                let opt = Adam::new(&c.store, config.lr_critic, config.beta1, config.beta2);
                Adversary::Critic(c, opt)
            }
            (MapperKind::Mmd, true) => Adversary::Fixed,
        };
        Ok(Self {
            config,
            generator,
            gen_opt,
            adversary,
            steps: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn critic(&self) -> Option<&MmdCritic> {
        match &self.adversary {
            Adversary::Critic(c, _) => Some(c),
            _ => None,
        }
    }

    pub fn discriminator(&self) -> Option<&MapperDiscriminator> {
        match &self.adversary {
            Adversary::Disc(d, _) => Some(d),
            _ => None,
        }
    }

    /// One generator update, preceded by the adversary's updates.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        source: &Tensor,
        target: &Tensor,
        rng: &mut R,
    ) -> Result<MapperStepLog> {
        let (ns, nt) = (source.shape()[0], target.shape()[0]);
        let b = self.config.batch_size.min(ns).min(nt);
        if b < 2 {
            return Err(Error::BatchTooSmall {
                op: "mapper_step",
                need: 2,
                got: b,
            });
        }
        if source.shape()[1] != self.generator.input_dim
            || target.shape()[1] != self.generator.output_dim
        {
            return shape_err("mapper_step", source.shape(), target.shape());
        }
        let mut critic_value = 0.0;
        let rounds = match self.adversary {
            Adversary::Disc(..) => 1,
            Adversary::Critic(..) => self.config.n_critic,
            Adversary::Fixed => 0,
        };
        self.generator.store.set_requires_grad(false);
        for _ in 0..rounds {
            let x = random_batch(target, b, rng)?;
            let z = random_batch(source, b, rng)?;
            critic_value = self.adversary_update(&x, &z)?;
        }
        self.generator.store.set_requires_grad(true);

        let x = random_batch(target, b, rng)?;
        let z = random_batch(source, b, rng)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let zv = g.constant(z);
        let fake = self.generator.forward(&mut g, &self.generator.store, zv)?;
        let loss = match &mut self.adversary {
            Adversary::Disc(d, _) => {
                d.store.set_requires_grad(false);
                let p = d.forward(&mut g, &d.store, fake)?;
                d.store.set_requires_grad(true);
                gan_generator_loss(&mut g, p)
            }
            Adversary::Critic(c, _) => {
                c.store.set_requires_grad(false);
                let fx = c.features(&mut g, &c.store, xv)?;
                let fy = c.features(&mut g, &c.store, fake)?;
                c.store.set_requires_grad(true);
                let k = detached_kernel(&g, fx, fy)?;
                mmd2_unbiased_var(&mut g, fx, fy, &k)?
            }
            Adversary::Fixed => {
                let k = detached_kernel(&g, xv, fake)?;
                mmd2_unbiased_var(&mut g, xv, fake, &k)?
            }
        };
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "mapper generator loss is {value}"
            )));
        }
        g.backward(loss)?.accumulate_into(&mut self.generator.store);
        self.gen_opt.step(&mut self.generator.store);
        if !self.generator.store.all_finite() {
            return Err(Error::Divergence("non-finite mapper parameters".into()));
        }
        self.steps += 1;
        Ok(MapperStepLog {
            step: self.steps,
            critic: critic_value,
            generator: value,
        })
    }

    fn adversary_update(&mut self, x: &Tensor, z: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let zv = g.constant(z.clone());
        let fake = self.generator.forward(&mut g, &self.generator.store, zv)?;
        let fake = g.detach(fake);
        match &mut self.adversary {
            Adversary::Disc(d, opt) => {
                let pr = d.forward(&mut g, &d.store, xv)?;
                let pf = d.forward(&mut g, &d.store, fake)?;
                let loss = gan_discriminator_loss(&mut g, pr, pf)?;
                let value = finite(g.value(loss).item(), "discriminator")?;
                g.backward(loss)?.accumulate_into(&mut d.store);
                opt.step(&mut d.store);
                Ok(value)
            }
            Adversary::Critic(c, opt) => {
                let objective =
                    critic_objective(&mut g, c, &c.store, xv, fake, self.config.lambda_ae)?;
                let value = finite(g.value(objective).item(), "critic")?;
                let loss = g.neg(objective);
                g.backward(loss)?.accumulate_into(&mut c.store);
                opt.step(&mut c.store);
                c.store.clip(c.clip);
                Ok(value)
            }
            Adversary::Fixed => Ok(0.0),
        }
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence(format!("{what} loss is {v}")))
    }
}

/// Mixture kernel with the median-heuristic bandwidth of the current
/// (detached) feature values.
fn detached_kernel(g: &Graph, a: Var, b: Var) -> Result<KernelSpec> {
    KernelSpec::mixture(median_heuristic(g.value(a), g.value(b))?)
}

/// Critic objective `MMD²_u(f(x), f(y)) − λ_AE·(rec(x) + rec(y))`, which the
/// critic maximizes.
pub fn critic_objective(
    g: &mut Graph,
    critic: &MmdCritic,
    store: &ParamStore,
    x: Var,
    y: Var,
    lambda_ae: f64,
) -> Result<Var> {
    let fx = critic.features(g, store, x)?;
    let fy = critic.features(g, store, y)?;
    let k = detached_kernel(g, fx, fy)?;
    let mmd = mmd2_unbiased_var(g, fx, fy, &k)?;
    if lambda_ae == 0.0 {
        return Ok(mmd);
    }
    let rx = critic.reconstruction(g, store, x, fx)?;
    let ry = critic.reconstruction(g, store, y, fy)?;
    let r = g.add(rx, ry)?;
    let r = g.scale(r, lambda_ae);
    g.sub(mmd, r)
}

/// Trains a mapper for `config.steps` steps, reporting each step to `log`.
pub fn train_mapper<R: Rng + ?Sized>(
    config: MapperConfig,
    source: &Tensor,
    target: &Tensor,
    rng: &mut R,
    mut log: impl FnMut(&MapperStepLog),
) -> Result<MapperTrainer> {
    let mut trainer = MapperTrainer::new(config, source.shape()[1], target.shape()[1], rng)?;
    for _ in 0..trainer.config.steps {
        let entry = trainer.step(source, target, rng)?;
        log(&entry);
    }
    Ok(trainer)
}

/// Adversarially trained mapper.
pub fn train_gan_mapper<R: Rng + ?Sized>(
    config: MapperConfig,
    source: &Tensor,
    target: &Tensor,
    rng: &mut R,
    log: impl FnMut(&MapperStepLog),
) -> Result<MapperTrainer> {
    train_mapper(
        MapperConfig {
            kind: MapperKind::Gan,
            ..config
        },
        source,
        target,
        rng,
        log,
    )
}

/// MMD-trained mapper.
pub fn train_mmd_mapper<R: Rng + ?Sized>(
    config: MapperConfig,
    source: &Tensor,
    target: &Tensor,
    rng: &mut R,
    log: impl FnMut(&MapperStepLog),
) -> Result<MapperTrainer> {
    train_mapper(
        MapperConfig {
            kind: MapperKind::Mmd,
            ..config
        },
        source,
        target,
        rng,
        log,
    )
}

/// Convenience for callers that only need a label for a trainer's kind.
pub fn describe(config: &MapperConfig) -> String {
    match (config.kind, config.fixed_kernel) {
        (MapperKind::Gan, _) => "gan".into(),
        (MapperKind::Mmd, false) => "mmd (learned critic)".into(),
        (MapperKind::Mmd, true) => "mmd (fixed kernel)".into(),
    }
}

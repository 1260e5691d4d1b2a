//! Parameterized layers: dense, convolution, LSTM, token embeddings and
//! temporal pooling. Sequences are time-major (`T×batch×dim`).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
// Unused whenever std ends up linked into the build, since std then supplies
// the float methods inherently.
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Reduce, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Slope of the leaky ReLU used in discriminators and critics.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Offset added to padded timesteps before max pooling. Hidden states are
/// bounded by 1 in magnitude, so padded positions never win the max.
const PAD_FILL: f64 = -1.0e4;

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Samples `uniform(-a, a)` with `a` the Glorot bound.
pub fn glorot_uniform<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let a = glorot_bound(fan_in, fan_out);
    Tensor::from_fn(shape, |_| {
        // Open interval: rejects the (measure-zero) lower endpoint.
        loop {
            let v = rng.random_range(-a..a);
            if v != -a {
                return v;
            }
        }
    })
}

fn join(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

/// Fully connected layer, `y = x·Wᵀ + b` with `W[out×in]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            join(name, "weight"),
            glorot_uniform(&[output, input], input, output, rng)?,
        )?;
        let bias = store.add(join(name, "bias"), Tensor::zeros(&[output])?)?;
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.input {
            return shape_err("dense", s, &[self.output, self.input]);
        }
        let w = g.param(store, self.weight);
        let wt = g.transpose(w)?;
        let y = g.matmul(x, wt)?;
        let b = g.param(store, self.bias);
        g.bias_add(y, b, 1)
    }
}

/// 2-D convolution layer with per-channel bias over `N×C×H×W` batches.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        size: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let area = size * size;
        let kernel = store.add(
            join(name, "kernel"),
            glorot_uniform(
                &[out_channels, in_channels, size, size],
                in_channels * area,
                out_channels * area,
                rng,
            )?,
        )?;
        let bias = store.add(join(name, "bias"), Tensor::zeros(&[out_channels])?)?;
        Ok(Self {
            kernel,
            bias,
            in_channels,
            out_channels,
            size,
            stride,
            padding,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernel);
        let y = g.conv2d(x, k, self.stride, self.padding)?;
        let b = g.param(store, self.bias);
        let axis = g.shape(y).len() - 3;
        g.bias_add(y, b, axis)
    }
}

/// Single LSTM cell with separate input/forget/output/candidate gates, each
/// acting on `[x, h]`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub gate_weights: [ParamId; 4],
    pub gate_biases: [ParamId; 4],
    pub input: usize,
    pub hidden: usize,
}

const GATES: [&str; 4] = ["input", "forget", "output", "candidate"];

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut weights = Vec::with_capacity(4);
        let mut biases = Vec::with_capacity(4);
        for gate in GATES {
            weights.push(store.add(
                format!("{name}.{gate}.weight"),
                glorot_uniform(&[hidden, input + hidden], input + hidden, hidden, rng)?,
            )?);
            let init = if gate == "forget" { 1.0 } else { 0.0 };
            biases.push(store.add(
                format!("{name}.{gate}.bias"),
                Tensor::full(&[hidden], init)?,
            )?);
        }
        Ok(Self {
            gate_weights: [weights[0], weights[1], weights[2], weights[3]],
            gate_biases: [biases[0], biases[1], biases[2], biases[3]],
            input,
            hidden,
        })
    }

    fn gate(&self, g: &mut Graph, store: &ParamStore, xh: Var, k: usize) -> Result<Var> {
        let w = g.param(store, self.gate_weights[k]);
        let wt = g.transpose(w)?;
        let z = g.matmul(xh, wt)?;
        let b = g.param(store, self.gate_biases[k]);
        g.bias_add(z, b, 1)
    }

    /// One recurrence step: `x[B×in]`, `h, c[B×hidden]` → `(h_t, c_t)`.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let (xs, hs, cs) = (g.shape(x), g.shape(h), g.shape(c));
        if xs.len() != 2 || xs[1] != self.input {
            return shape_err("lstm input", xs, &[self.input]);
        }
        if hs != [xs[0], self.hidden] || cs != hs {
            return shape_err("lstm state", hs, cs);
        }
        let xh = g.concat(&[x, h], 1)?;
        let i = self.gate(g, store, xh, 0)?;
        let i = g.sigmoid(i);
        let f = self.gate(g, store, xh, 1)?;
        let f = g.sigmoid(f);
        let o = self.gate(g, store, xh, 2)?;
        let o = g.sigmoid(o);
        let cand = self.gate(g, store, xh, 3)?;
        let cand = g.tanh(cand);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_t = g.add(keep, write)?;
        let squashed = g.tanh(c_t);
        let h_t = g.mul(o, squashed)?;
        Ok((h_t, c_t))
    }
}

/// Keeps `prev` where `mask` is 0 and takes `next` where it is 1.
fn carry(g: &mut Graph, prev: Var, next: Var, mask: Var) -> Result<Var> {
    let delta = g.sub(next, prev)?;
    let gated = g.mul(delta, mask)?;
    g.add(prev, gated)
}

fn step_mask(lengths: &[usize], t: usize, hidden: usize) -> Result<Tensor> {
    let mut v = Vec::with_capacity(lengths.len() * hidden);
    for &len in lengths {
        let on = if t < len { 1.0 } else { 0.0 };
        v.extend(core::iter::repeat_n(on, hidden));
    }
    Tensor::new(&[lengths.len(), hidden], v)
}

/// Forward and backward LSTM cells whose per-step states are concatenated.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            forward: LstmCell::new(store, &join(name, "fwd"), input, hidden, rng)?,
            backward: LstmCell::new(store, &join(name, "bwd"), input, hidden, rng)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    /// Encodes `inputs[T×B×D]` into `[T×B×2H]`.
    ///
    /// With `lengths`, sequence `b` occupies timesteps `0..lengths[b]`; both
    /// directions carry their state unchanged through padded steps, so the
    /// backward cell effectively starts at each sequence's own last token.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: Var,
        lengths: Option<&[usize]>,
    ) -> Result<Var> {
        let [t_len, batch, dim] = *g.shape(inputs) else {
            return Err(Error::InvalidShape {
                op: "bilstm_encode",
                detail: format!("expected T×batch×dim, got {:?}", g.shape(inputs)),
            });
        };
        if t_len == 0 {
            return Err(Error::EmptySequence);
        }
        if let Some(l) = lengths {
            if l.len() != batch || l.iter().any(|&n| n == 0 || n > t_len) {
                return Err(Error::InvalidShape {
                    op: "bilstm_encode",
                    detail: format!("lengths {l:?} invalid for T={t_len}, batch={batch}"),
                });
            }
        }
        let mut steps = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let s = g.slice(inputs, 0, t, 1)?;
            steps.push(g.reshape(s, &[batch, dim])?);
        }
        let run = |g: &mut Graph,
                   cell: &LstmCell,
                   order: &mut dyn Iterator<Item = usize>|
         -> Result<Vec<Var>> {
            let mut out = vec![None; t_len];
            let mut h = g.constant(Tensor::zeros(&[batch, cell.hidden])?);
            let mut c = g.constant(Tensor::zeros(&[batch, cell.hidden])?);
            for t in order {
                let (nh, nc) = cell.step(g, store, steps[t], h, c)?;
                match lengths {
                    Some(l) if l.iter().any(|&n| t >= n) => {
                        let m = g.constant(step_mask(l, t, cell.hidden)?);
                        h = carry(g, h, nh, m)?;
                        c = carry(g, c, nc, m)?;
                    }
                    _ => {
                        h = nh;
                        c = nc;
                    }
                }
                out[t] = Some(h);
            }
            Ok(out
                .into_iter()
                .map(|v| v.expect("every step visited"))
                .collect())
        };
        let fwd = run(g, &self.forward, &mut (0..t_len))?;
        let bwd = run(g, &self.backward, &mut (0..t_len).rev())?;
        let width = self.output_dim();
        let mut rows = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let both = g.concat(&[fwd[t], bwd[t]], 1)?;
            rows.push(g.reshape(both, &[1, batch, width])?);
        }
        g.concat(&rows, 0)
    }
}

/// Coordinatewise maximum over the time axis of `h[T×B×d]`.
pub fn max_over_time(g: &mut Graph, h: Var) -> Result<Var> {
    if g.shape(h).len() != 3 {
        return Err(Error::InvalidShape {
            op: "max_over_time",
            detail: format!("expected T×batch×d, got {:?}", g.shape(h)),
        });
    }
    g.reduce(Reduce::Max, h, Some(0))
}

/// [`max_over_time`] restricted to each sequence's first `lengths[b]` steps.
pub fn masked_max_over_time(g: &mut Graph, h: Var, lengths: &[usize]) -> Result<Var> {
    let [t_len, batch, d] = *g.shape(h) else {
        return max_over_time(g, h);
    };
    if lengths.len() != batch {
        return shape_err("masked_max_over_time", g.shape(h), &[lengths.len()]);
    }
    if lengths.iter().all(|&n| n == t_len) {
        return max_over_time(g, h);
    }
    let fill = Tensor::from_fn(&[t_len, batch, d], |i| {
        let (t, b) = (i / (batch * d), (i / d) % batch);
        if t < lengths[b] {
            0.0
        } else {
            PAD_FILL
        }
    })?;
    let fill = g.constant(fill);
    let shifted = g.add(h, fill)?;
    max_over_time(g, shifted)
}

/// Trainable token embedding table `[vocab×dim]`.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = store.add(
            join(name, "table"),
            glorot_uniform(&[vocab, dim], vocab, dim, rng)?,
        )?;
        Ok(Self { table, vocab, dim })
    }

    /// Rows for `ids`, shape `[ids.len()×dim]`.
    pub fn lookup(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let t = g.param(store, self.table);
        g.gather_rows(t, ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_deterministic_and_in_range() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut store = ParamStore::new();
            let d = Dense::new(&mut store, "d", 30, 20, &mut rng).unwrap();
            (store.get(d.weight).values().to_vec(), glorot_bound(30, 20))
        };
        let (a, bound) = build();
        let (b, _) = build();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v > -bound && v < bound));
    }

    #[test]
    fn init_mean_is_centred() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = glorot_uniform(&[100, 100], 100, 100, &mut rng).unwrap();
        let n = t.numel() as f64;
        let mean = t.values().iter().sum::<f64>() / n;
        let a = glorot_bound(100, 100);
        // Uniform(−a, a) has variance a²/3.
        let se = (a * a / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 3, 4, &mut rng).unwrap();
        assert!(store
            .get(cell.gate_biases[1])
            .values()
            .iter()
            .all(|&v| v == 1.0));
        for k in [0, 2, 3] {
            assert!(store
                .get(cell.gate_biases[k])
                .values()
                .iter()
                .all(|&v| v == 0.0));
        }
    }
}

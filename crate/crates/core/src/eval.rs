//! Evaluation metrics: cosine class accuracy against a gallery of true
//! embeddings, unsmoothed BLEU, ROUGE-L, and a permutation two-sample test.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
// Unused whenever std ends up linked into the build, since std then supplies
// the float methods inherently.
#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::mapper::KernelSpec;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return shape_err("cosine_similarity", &[a.len()], &[b.len()]);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity with a zero vector; returning 0");
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Embeddings with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddings {
    pub dim: usize,
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledEmbeddings {
    pub fn new(embeddings: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::InvalidShape {
                op: "labeled_embeddings",
                detail: "empty set".into(),
            });
        }
        if embeddings.len() != labels.len() {
            return shape_err("labeled_embeddings", &[embeddings.len()], &[labels.len()]);
        }
        let dim = embeddings[0].len();
        if let Some(bad) = embeddings.iter().find(|e| e.len() != dim) {
            return shape_err("labeled_embeddings", &[dim], &[bad.len()]);
        }
        Ok(Self {
            dim,
            embeddings,
            labels,
        })
    }

    pub fn from_tensor(t: &Tensor, labels: Vec<usize>) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "labeled_embeddings",
                detail: format!("expected a matrix, got shape {:?}", t.shape()),
            });
        }
        Self::new(
            (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect(),
            labels,
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row-major `[N×dim]` matrix.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(&[self.len(), self.dim], self.embeddings.concat())
    }

    /// The subset whose labels satisfy `keep`.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Option<Self> {
        let (embeddings, labels): (Vec<_>, Vec<_>) = self
            .embeddings
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| keep(l))
            .map(|(e, &l)| (e.clone(), l))
            .unzip();
        Self::new(embeddings, labels).ok()
    }
}

/// Index of the gallery entry most similar to `query`; ties go to the lowest
/// index.
pub fn nearest_by_cosine(gallery: &LabeledEmbeddings, query: &[f64]) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, e) in gallery.embeddings.iter().enumerate() {
        let s = cosine_similarity(e, query)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

/// Percentage of fakes whose most similar true embedding carries the fake's
/// own label.
pub fn class_accuracy(truth: &LabeledEmbeddings, fake: &LabeledEmbeddings) -> Result<f64> {
    if truth.dim != fake.dim {
        return shape_err("class_accuracy", &[truth.dim], &[fake.dim]);
    }
    let mut hits = 0usize;
    for (e, &label) in fake.embeddings.iter().zip(&fake.labels) {
        if truth.labels[nearest_by_cosine(truth, e)?] == label {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / fake.len() as f64)
}

fn ngram_counts<T: Ord + Clone>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU with clipped n-gram precisions up to `max_n`, uniform
/// weights, brevity penalty against the closest reference length, and no
/// smoothing.
pub fn bleu<T: Ord + Clone>(candidate: &[T], references: &[&[T]], max_n: usize) -> f64 {
    if candidate.is_empty() || references.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        if total == 0 {
            return 0.0;
        }
        let ref_counts: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
        let clipped: usize = cand
            .iter()
            .map(|(gram, &c)| {
                let max_ref = ref_counts
                    .iter()
                    .map(|rc| rc.get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                c.min(max_ref)
            })
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = candidate.len();
    // Closest reference length, shorter on ties.
    let r = references
        .iter()
        .map(|x| x.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(c);
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * (log_sum / max_n as f64).exp()
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = prev.clone();
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Balanced LCS F-measure.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoSampleResult {
    pub statistic: f64,
    pub p_value: f64,
}

fn unbiased_from_gram(k: &[f64], n_total: usize, xs: &[usize], ys: &[usize]) -> f64 {
    let within = |idx: &[usize]| {
        let mut s = 0.0;
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                if a != b {
                    s += k[i * n_total + j];
                }
            }
        }
        s / (idx.len() * (idx.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for &i in xs {
        for &j in ys {
            cross += k[i * n_total + j];
        }
    }
    within(xs) + within(ys) - 2.0 * cross / (xs.len() * ys.len()) as f64
}

/// Permutation test on the unbiased squared MMD. The p-value is
/// `(1 + #{permuted ≥ observed}) / (permutations + 1)`.
pub fn two_sample_test<R: Rng + ?Sized>(
    x: &Tensor,
    y: &Tensor,
    kernel: &KernelSpec,
    permutations: usize,
    rng: &mut R,
) -> Result<TwoSampleResult> {
    if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[1] {
        return shape_err("two_sample_test", x.shape(), y.shape());
    }
    let (n, m) = (x.shape()[0], y.shape()[0]);
    if n < 2 || m < 2 {
        return Err(Error::BatchTooSmall {
            op: "two_sample_test",
            need: 2,
            got: n.min(m),
        });
    }
    let mut pooled = x.values().to_vec();
    pooled.extend_from_slice(y.values());
    let pooled = Tensor::new(&[n + m, x.shape()[1]], pooled)?;
    let gram = kernel.gram_matrix(&pooled, &pooled)?;
    let k = gram.values();
    let mut idx: Vec<usize> = (0..n + m).collect();
    let statistic = unbiased_from_gram(k, n + m, &idx[..n], &idx[n..]);
    let mut exceed = 0usize;
    for _ in 0..permutations {
        idx.shuffle(rng);
        if unbiased_from_gram(k, n + m, &idx[..n], &idx[n..]) >= statistic {
            exceed += 1;
        }
    }
    Ok(TwoSampleResult {
        statistic,
        p_value: (1 + exceed) as f64 / (permutations + 1) as f64,
    })
}

/// One measurement in a report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub dataset: String,
    pub checkpoint: String,
    pub seed: u64,
}

/// Append-only list of finite measurements.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    rows: Vec<MetricRow>,
}

pub const REPORT_HEADER: &str = "metric,value,dataset,checkpoint,seed";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        metric: &str,
        value: f64,
        dataset: &str,
        checkpoint: &str,
        seed: u64,
    ) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Divergence(format!("metric {metric} is {value}")));
        }
        self.rows.push(MetricRow {
            metric: metric.into(),
            value,
            dataset: dataset.into(),
            checkpoint: checkpoint.into(),
            seed,
        });
        Ok(())
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric)
            .map(|r| r.value)
    }

    /// Data rows without the header, LF-terminated.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                csv_field(&r.metric),
                r.value,
                csv_field(&r.dataset),
                csv_field(&r.checkpoint),
                r.seed
            ));
        }
        out
    }
}

//! Sequence autoencoder for captions: a bidirectional LSTM with masked max
//! pooling yields the sentence embedding `s`, which becomes the initial hidden
//! state of a unidirectional LSTM decoder trained with teacher forcing.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{masked_max_over_time, BiLstm, Dense, EmbeddingTable, LstmCell};
use crate::optim::{clip_grad_norm, shuffled_batches, Adam};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases `text` and splits it on whitespace and punctuation, which is
/// dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower: String = text.chars().flat_map(char::to_lowercase).collect();
    lower
        .split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|t| !t.is_empty())
        .map(ToString::to_string)
        .collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

/// Token/id maps. Ids 0..4 are reserved; corpus tokens follow in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds the vocabulary from tokenized sentences.
    pub fn build<S: AsRef<str>>(sentences: &[Vec<S>]) -> Self {
        let mut seen: BTreeMap<String, ()> = BTreeMap::new();
        for s in sentences {
            for t in s {
                seen.insert(t.as_ref().to_string(), ());
            }
        }
        Self::from_tokens(seen.into_keys().filter(|t| !SPECIALS.contains(&t.as_str())))
    }

    /// Vocabulary whose non-special tokens are `tokens`, in order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut ids = BTreeMap::new();
        for t in tokens {
            if !ids.contains_key(&t) && !SPECIALS.contains(&t.as_str()) {
                ids.insert(t.clone(), all.len());
                all.push(t);
            }
        }
        Self { tokens: all, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Non-special tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..]
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Tokens for `ids`, stopping at the first EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]).to_string())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextAeConfig {
    pub embed_dim: usize,
    /// Hidden size per encoder direction; `s` has twice this dimension.
    pub hidden: usize,
    pub decoder_hidden: usize,
    pub max_len: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
}

impl Default for TextAeConfig {
    fn default() -> Self {
        Self {
            embed_dim: 100,
            hidden: 50,
            decoder_hidden: 100,
            max_len: 24,
            lr: 3e-3,
            batch_size: 4,
            epochs: 30,
            clip_norm: 5.0,
        }
    }
}

impl TextAeConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("max_len", self.max_len),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("text_ae.{key} must be positive")));
            }
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config(
                "text_ae.lr and text_ae.clip_norm must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TextAutoencoder {
    pub config: TextAeConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    embedding: EmbeddingTable,
    encoder: BiLstm,
    /// `None` when the decoder hidden size equals the embedding size.
    bridge: Option<Dense>,
    decoder: LstmCell,
    output: Dense,
    opt: Adam,
}

impl TextAutoencoder {
    pub fn new<R: Rng + ?Sized>(
        config: TextAeConfig,
        vocab: Vocabulary,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let v = vocab.len();
        let embedding = EmbeddingTable::new(&mut store, "embed", v, config.embed_dim, rng)?;
        let encoder = BiLstm::new(&mut store, "encoder", config.embed_dim, config.hidden, rng)?;
        let s_dim = encoder.output_dim();
        let bridge = if s_dim == config.decoder_hidden {
            None
        } else {
            Some(Dense::new(
                &mut store,
                "bridge",
                s_dim,
                config.decoder_hidden,
                rng,
            )?)
        };
        let decoder = LstmCell::new(
            &mut store,
            "decoder",
            config.embed_dim,
            config.decoder_hidden,
            rng,
        )?;
        let output = Dense::new(&mut store, "output", config.decoder_hidden, v, rng)?;
        let opt = Adam::new(&store, config.lr, 0.9, 0.999);
        Ok(Self {
            config,
            vocab,
            store,
            embedding,
            encoder,
            bridge,
            decoder,
            output,
            opt,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Output-layer parameter ids `(weight, bias)`.
    pub fn output_layer(&self) -> (crate::autodiff::ParamId, crate::autodiff::ParamId) {
        (self.output.weight, self.output.bias)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if ids.len() > self.config.max_len {
            return Err(Error::InvalidShape {
                op: "encode_text",
                detail: format!(
                    "length {} exceeds max_len {}",
                    ids.len(),
                    self.config.max_len
                ),
            });
        }
        if let Some(&id) = ids.iter().find(|&&i| i >= self.vocab.len()) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.vocab.len(),
            });
        }
        Ok(())
    }

    /// Time-major embedded batch `[T×B×E]` with sequence lengths; shorter
    /// sequences are padded with PAD.
    fn embed_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&[usize]],
    ) -> Result<(Var, Vec<usize>)> {
        let lengths: Vec<usize> = batch.iter().map(|s| s.len()).collect();
        let t_len = *lengths.iter().max().ok_or(Error::EmptySequence)?;
        let b = batch.len();
        let mut ids = vec![PAD; t_len * b];
        for (j, s) in batch.iter().enumerate() {
            for (t, &id) in s.iter().enumerate() {
                ids[t * b + j] = id;
            }
        }
        let rows = self.embedding.lookup(g, store, &ids)?;
        Ok((
            g.reshape(rows, &[t_len, b, self.config.embed_dim])?,
            lengths,
        ))
    }

    /// Sentence embeddings `[B×2H]` for a batch of id sequences. Trailing PAD
    /// ids are treated as padding.
    pub fn encode_var(&self, g: &mut Graph, store: &ParamStore, batch: &[&[usize]]) -> Result<Var> {
        let batch: Vec<&[usize]> = batch.iter().map(|s| trim_pad(s)).collect();
        let batch = batch.as_slice();
        for s in batch {
            self.check_ids(s)?;
        }
        let (x, lengths) = self.embed_batch(g, store, batch)?;
        let h = self.encoder.encode(g, store, x, Some(&lengths))?;
        masked_max_over_time(g, h, &lengths)
    }

    /// Per-step encoder outputs `[T×2H]` of one sequence, before pooling.
    pub fn hidden_states(&self, ids: &[usize]) -> Result<Tensor> {
        let ids = trim_pad(ids);
        self.check_ids(ids)?;
        let mut g = Graph::new();
        let (x, lengths) = self.embed_batch(&mut g, &self.store, &[ids])?;
        let h = self
            .encoder
            .encode(&mut g, &self.store, x, Some(&lengths))?;
        g.value(h).reshaped(&[ids.len(), self.embedding_dim()])
    }

    pub fn encode_text(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let s = self.encode_var(&mut g, &self.store, &[ids])?;
        Ok(g.value(s).values().to_vec())
    }

    pub fn encode_sentence(&self, text: &str) -> Result<Vec<f64>> {
        self.encode_text(&self.vocab.encode(&tokenize(text)))
    }

    fn initial_state(&self, g: &mut Graph, store: &ParamStore, s: Var) -> Result<(Var, Var)> {
        let h = match &self.bridge {
            Some(d) => {
                let y = d.forward(g, store, s)?;
                g.tanh(y)
            }
            None => s,
        };
        let batch = g.shape(s)[0];
        let c = g.constant(Tensor::zeros(&[batch, self.config.decoder_hidden])?);
        Ok((h, c))
    }

    /// Mean token cross-entropy under teacher forcing. Targets are each
    /// sentence followed by EOS; PAD positions carry no weight.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, batch: &[&[usize]]) -> Result<Var> {
        let s = self.encode_var(g, store, batch)?;
        let (mut h, mut c) = self.initial_state(g, store, s)?;
        let batch: Vec<&[usize]> = batch.iter().map(|s| trim_pad(s)).collect();
        let b = batch.len();
        let steps = batch.iter().map(|x| x.len()).max().unwrap_or(0) + 1;
        let mut picks = Vec::with_capacity(steps);
        let mut weights = Vec::with_capacity(steps * b);
        for t in 0..steps {
            let inputs: Vec<usize> = batch
                .iter()
                .map(|x| match t {
                    0 => BOS,
                    _ => x.get(t - 1).copied().unwrap_or(PAD),
                })
                .collect();
            let targets: Vec<usize> = batch
                .iter()
                .map(|x| match t.cmp(&x.len()) {
                    core::cmp::Ordering::Less => x[t],
                    core::cmp::Ordering::Equal => EOS,
                    core::cmp::Ordering::Greater => PAD,
                })
                .collect();
            let e = self.embedding.lookup(g, store, &inputs)?;
            let (nh, nc) = self.decoder.step(g, store, e, h, c)?;
            h = nh;
            c = nc;
            let logits = self.output.forward(g, store, h)?;
            let logp = g.log_softmax(logits);
            picks.push(g.pick(logp, &targets)?);
            weights.extend(targets.iter().map(|&y| if y == PAD { 0.0 } else { 1.0 }));
        }
        let count: f64 = weights.iter().sum();
        let all = g.concat(&picks, 0)?;
        let w = g.constant(Tensor::new(&[weights.len()], weights)?);
        let masked = g.mul(all, w)?;
        let total = g.sum(masked);
        Ok(g.scale(total, -1.0 / count))
    }

    /// Sentence-level mean cross-entropy of a batch with the current weights.
    pub fn batch_loss(&self, batch: &[&[usize]]) -> Result<f64> {
        let mut g = Graph::new();
        let l = self.loss(&mut g, &self.store, batch)?;
        Ok(g.value(l).item())
    }

    /// One optimizer step on `batch`; returns the pre-update loss.
    pub fn train_step(&mut self, batch: &[&[usize]]) -> Result<f64> {
        let mut g = Graph::new();
        let l = self.loss(&mut g, &self.store, batch)?;
        let value = g.value(l).item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!("text loss is {value}")));
        }
        g.backward(l)?.accumulate_into(&mut self.store);
        clip_grad_norm(&mut self.store, self.config.clip_norm);
        self.opt.step(&mut self.store);
        if !self.store.all_finite() {
            return Err(Error::Divergence("non-finite text parameters".into()));
        }
        Ok(value)
    }

    /// One pass over `corpus` in a seeded order; returns the token-weighted
    /// mean training loss of the pass.
    pub fn train_epoch<R: Rng + ?Sized>(
        &mut self,
        corpus: &[Vec<usize>],
        rng: &mut R,
    ) -> Result<f64> {
        let mut weighted = 0.0;
        let mut tokens = 0usize;
        for idx in shuffled_batches(corpus.len(), self.config.batch_size, rng) {
            let batch: Vec<&[usize]> = idx.iter().map(|&i| corpus[i].as_slice()).collect();
            let n: usize = batch.iter().map(|s| s.len() + 1).sum();
            weighted += self.train_step(&batch)? * n as f64;
            tokens += n;
        }
        Ok(if tokens == 0 {
            0.0
        } else {
            weighted / tokens as f64
        })
    }

    /// Greedy decoding from BOS until EOS or `max_len` tokens. PAD and BOS are
    /// never emitted; ties go to the lowest id. The returned ids exclude EOS.
    pub fn decode_text(&self, s: &[f64], max_len: usize) -> Result<Vec<usize>> {
        if s.len() != self.embedding_dim() {
            return Err(Error::ShapeMismatch {
                op: "decode_text",
                lhs: vec![s.len()],
                rhs: vec![self.embedding_dim()],
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite sentence embedding".into()));
        }
        let mut g = Graph::new();
        let sv = g.constant(Tensor::new(&[1, s.len()], s.to_vec())?);
        let (mut h, mut c) = self.initial_state(&mut g, &self.store, sv)?;
        let mut prev = BOS;
        let mut out = Vec::new();
        for _ in 0..max_len {
            let e = self.embedding.lookup(&mut g, &self.store, &[prev])?;
            let (nh, nc) = self.decoder.step(&mut g, &self.store, e, h, c)?;
            h = nh;
            c = nc;
            let logits = self.output.forward(&mut g, &self.store, h)?;
            let next = argmax_allowed(g.value(logits).values());
            if next == EOS {
                break;
            }
            out.push(next);
            prev = next;
        }
        Ok(out)
    }

    /// Decodes to a whitespace-joined sentence.
    pub fn decode_sentence(&self, s: &[f64]) -> Result<String> {
        let ids = self.decode_text(s, self.config.max_len)?;
        Ok(detokenize(&self.vocab.decode(&ids)))
    }

    pub fn export(&self) -> Vec<(String, Tensor)> {
        self.store.export()
    }

    pub fn import(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.store.len() {
            return Err(Error::ParamMismatch(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                self.store.len()
            )));
        }
        self.store.import("", named)
    }
}

fn trim_pad(ids: &[usize]) -> &[usize] {
    let end = ids.iter().rposition(|&i| i != PAD).map_or(0, |p| p + 1);
    &ids[..end]
}

fn argmax_allowed(logits: &[f64]) -> usize {
    let mut best = EOS;
    for (i, &v) in logits.iter().enumerate().skip(EOS) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

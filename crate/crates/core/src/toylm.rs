//! A seeded decoder-only language model small enough to reason about by hand.
//!
//! Pre-norm residual blocks with single-head causal attention and a SiLU
//! MLP, RMS normalization without epsilon, learned absolute positions and no
//! biases. Every intermediate space is observable: the residual stream after
//! each block, the final normalized hidden state, the logits and the
//! temperature softmax.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::distributions::{argmax_lowest, softmax_t, validate_temperature, Logits, ProbDist};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::vecmath::RealVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub seed: u64,
    pub max_context: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            model_dim: 32,
            num_layers: 8,
            ffn_dim: 128,
            seed: 0,
            max_context: 128,
        }
    }
}

impl ToyConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Validation(format!("invalid model config: {m}")));
        if self.vocab_size < 2 {
            return fail("vocab_size must be >= 2");
        }
        if self.model_dim < 1 {
            return fail("model_dim must be >= 1");
        }
        if self.ffn_dim < 1 {
            return fail("ffn_dim must be >= 1");
        }
        if self.max_context < 1 {
            return fail("max_context must be >= 1");
        }
        Ok(())
    }
}

/// The weight matrices inside a block that compression may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixId {
    Wq,
    Wk,
    Wv,
    Wo,
    WUp,
    WDown,
}

impl MatrixId {
    pub const ALL: [MatrixId; 6] = [
        MatrixId::Wq,
        MatrixId::Wk,
        MatrixId::Wv,
        MatrixId::Wo,
        MatrixId::WUp,
        MatrixId::WDown,
    ];

    pub fn is_attention(self) -> bool {
        matches!(
            self,
            MatrixId::Wq | MatrixId::Wk | MatrixId::Wv | MatrixId::Wo
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MatrixId::Wq => "wq",
            MatrixId::Wk => "wk",
            MatrixId::Wv => "wv",
            MatrixId::Wo => "wo",
            MatrixId::WUp => "w_up",
            MatrixId::WDown => "w_down",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    /// Attention output projection; zeroing it removes the attention branch.
    pub wo: Matrix,
    pub mlp_norm: Vec<f64>,
    /// `ffn_dim × d`.
    pub w_up: Matrix,
    /// `d × ffn_dim`; zeroing it removes the MLP branch.
    pub w_down: Matrix,
}

impl Block {
    pub fn matrix(&self, id: MatrixId) -> &Matrix {
        match id {
            MatrixId::Wq => &self.wq,
            MatrixId::Wk => &self.wk,
            MatrixId::Wv => &self.wv,
            MatrixId::Wo => &self.wo,
            MatrixId::WUp => &self.w_up,
            MatrixId::WDown => &self.w_down,
        }
    }

    pub fn matrix_mut(&mut self, id: MatrixId) -> &mut Matrix {
        match id {
            MatrixId::Wq => &mut self.wq,
            MatrixId::Wk => &mut self.wk,
            MatrixId::Wv => &mut self.wv,
            MatrixId::Wo => &mut self.wo,
            MatrixId::WUp => &mut self.w_up,
            MatrixId::WDown => &mut self.w_down,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    config: ToyConfig,
    pub embedding: Matrix,
    pub blocks: Vec<Block>,
    pub final_norm: Vec<f64>,
    pub lm_head: Matrix,
    pub positional: Matrix,
}

/// How much of the residual stream a forward pass keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Capture {
    #[default]
    Final,
    AllLayers,
}

/// The three representation spaces at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceSnapshot {
    /// Final hidden state after the final norm.
    pub hidden: RealVector,
    pub logits: Logits,
    pub probs: ProbDist,
    /// Residual stream `h⁽⁰⁾ … h⁽ᴸ⁾`, before the final norm.
    pub per_layer_hidden: Option<Vec<RealVector>>,
}

/// Attention weights and values seen by the last position of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionView {
    pub alpha: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
struct LayerCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Token history and key/value cache of one autoregressive decode.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    tokens: Vec<usize>,
    prompt_len: usize,
    caches: Vec<LayerCache>,
    step: usize,
}

impl DecodeState {
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn prompt(&self) -> &[usize] {
        &self.tokens[..self.prompt_len]
    }

    pub fn generated(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }

    /// Number of tokens emitted so far.
    pub fn step(&self) -> usize {
        self.step
    }
}

/// Result of [`ToyModel::generate`]: one snapshot per emitted token.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub state: DecodeState,
    pub trace: Vec<SpaceSnapshot>,
}

// ---------------------------------------------------------------------------
// Numerical building blocks shared by the full and incremental paths
// ---------------------------------------------------------------------------

fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let rms = ms.sqrt();
    if rms == 0.0 {
        return vec![0.0; x.len()];
    }
    x.iter().zip(gain).map(|(v, g)| v / rms * g).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn add_assign(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
}

/// Causal attention weights of `query` over `keys` with `1/√d` scaling.
fn attention_weights(query: &[f64], keys: &[Vec<f64>]) -> Vec<f64> {
    let scale = 1.0 / (query.len() as f64).sqrt();
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| query.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn weighted_values(alpha: &[f64], values: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (a, v) in alpha.iter().zip(values) {
        out.iter_mut().zip(v).for_each(|(o, x)| *o += a * x);
    }
    out
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Callback receiving each block matrix's input vector during a forward pass.
pub(crate) type ActivationHook<'a> = dyn FnMut(usize, MatrixId, &[f64]) + 'a;

impl ToyModel {
    /// Draws every matrix from `N(0, 1/d)` in declaration order; norm gains start at 1.
    pub fn init(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
        let mut draw = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
            Matrix::from_vec(rows, cols, data).expect("shape matches")
        };
        let embedding = draw(config.vocab_size, d);
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                attn_norm: vec![1.0; d],
                wq: draw(d, d),
                wk: draw(d, d),
                wv: draw(d, d),
                wo: draw(d, d),
                mlp_norm: vec![1.0; d],
                w_up: draw(config.ffn_dim, d),
                w_down: draw(d, config.ffn_dim),
            })
            .collect();
        let final_norm = vec![1.0; d];
        let lm_head = draw(config.vocab_size, d);
        let positional = draw(config.max_context, d);
        Ok(Self {
            config,
            embedding,
            blocks,
            final_norm,
            lm_head,
            positional,
        })
    }

    /// Assembles a model from explicit weights, checking every shape.
    pub fn from_parts(
        config: ToyConfig,
        embedding: Matrix,
        blocks: Vec<Block>,
        final_norm: Vec<f64>,
        lm_head: Matrix,
        positional: Matrix,
    ) -> Result<Self> {
        config.validate()?;
        let model = Self {
            config,
            embedding,
            blocks,
            final_norm,
            lm_head,
            positional,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let (v, d, f) = (c.vocab_size, c.model_dim, c.ffn_dim);
        let expect = |name: &str, m: &Matrix, rows: usize, cols: usize| -> Result<()> {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
            if m.as_slice().iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!("{name} has non-finite weights")));
            }
            Ok(())
        };
        let expect_gain = |name: &str, g: &[f64]| -> Result<()> {
            if g.len() != d || g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Shape(format!("{name} must hold {d} finite gains")));
            }
            Ok(())
        };
        expect("embedding", &self.embedding, v, d)?;
        if self.blocks.len() != c.num_layers {
            return Err(Error::Shape(format!(
                "{} blocks for num_layers {}",
                self.blocks.len(),
                c.num_layers
            )));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            expect_gain(&format!("block {l} attn_norm"), &b.attn_norm)?;
            expect_gain(&format!("block {l} mlp_norm"), &b.mlp_norm)?;
            for id in MatrixId::ALL {
                let (rows, cols) = match id {
                    MatrixId::WUp => (f, d),
                    MatrixId::WDown => (d, f),
                    _ => (d, d),
                };
                expect(
                    &format!("block {l} {}", id.as_str()),
                    b.matrix(id),
                    rows,
                    cols,
                )?;
            }
        }
        expect_gain("final_norm", &self.final_norm)?;
        expect("lm_head", &self.lm_head, v, d)?;
        expect("positional", &self.positional, c.max_context, d)
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Validation("token sequence must be non-empty".into()));
        }
        if tokens.len() > self.config.max_context {
            return Err(Error::Capacity {
                len: tokens.len(),
                max: self.config.max_context,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index(format!(
                "token {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn input_embedding(&self, token: usize, pos: usize) -> Vec<f64> {
        self.embedding
            .row(token)
            .iter()
            .zip(self.positional.row(pos))
            .map(|(e, p)| e + p)
            .collect()
    }

    fn mlp(&self, layer: usize, x: &[f64], hook: &mut ActivationHook<'_>) -> Vec<f64> {
        let b = &self.blocks[layer];
        let n = rms_norm(x, &b.mlp_norm);
        hook(layer, MatrixId::WUp, &n);
        let act: Vec<f64> = b.w_up.matvec(&n).into_iter().map(silu).collect();
        hook(layer, MatrixId::WDown, &act);
        b.w_down.matvec(&act)
    }

    fn snapshot(
        &self,
        residual: Vec<f64>,
        temperature: f64,
        layers: Option<Vec<RealVector>>,
    ) -> Result<SpaceSnapshot> {
        let hidden = rms_norm(&residual, &self.final_norm);
        let logits = Logits::from_vec(self.lm_head.matvec(&hidden), temperature)
            .map_err(|e| Error::Invariant(format!("non-finite logits: {e}")))?;
        let probs = softmax_t(&logits);
        Ok(SpaceSnapshot {
            hidden: RealVector::new(hidden)
                .map_err(|e| Error::Invariant(format!("non-finite hidden state: {e}")))?,
            logits,
            probs,
            per_layer_hidden: layers,
        })
    }

    /// Full causal forward pass over `tokens`, one snapshot per position.
    pub fn forward(
        &self,
        tokens: &[usize],
        capture: Capture,
        temperature: f64,
    ) -> Result<Vec<SpaceSnapshot>> {
        Ok(self
            .forward_impl(tokens, capture, temperature, None, &mut |_, _, _| {})?
            .0)
    }

    /// Attention weights and values at the last position of `layer`.
    pub fn attention_view(&self, tokens: &[usize], layer: usize) -> Result<AttentionView> {
        if layer >= self.num_layers() {
            return Err(Error::Index(format!(
                "layer {layer} >= num_layers {}",
                self.num_layers()
            )));
        }
        let (_, view) =
            self.forward_impl(tokens, Capture::Final, 1.0, Some(layer), &mut |_, _, _| {})?;
        Ok(view.expect("layer in range"))
    }

    /// Layer-major evaluation over all positions.
    pub(crate) fn forward_impl(
        &self,
        tokens: &[usize],
        capture: Capture,
        temperature: f64,
        attention_layer: Option<usize>,
        hook: &mut ActivationHook<'_>,
    ) -> Result<(Vec<SpaceSnapshot>, Option<AttentionView>)> {
        self.check_tokens(tokens)?;
        validate_temperature(temperature)?;
        let d = self.config.model_dim;
        let n = tokens.len();
        let mut stream: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(pos, &t)| self.input_embedding(t, pos))
            .collect();
        let mut layers: Vec<Vec<Vec<f64>>> = Vec::new();
        if capture == Capture::AllLayers {
            layers.push(stream.clone());
        }
        let mut view = None;

        for (l, b) in self.blocks.iter().enumerate() {
            let normed: Vec<Vec<f64>> = stream.iter().map(|x| rms_norm(x, &b.attn_norm)).collect();
            let mut queries = Vec::with_capacity(n);
            let mut keys = Vec::with_capacity(n);
            let mut values = Vec::with_capacity(n);
            for x in &normed {
                hook(l, MatrixId::Wq, x);
                hook(l, MatrixId::Wk, x);
                hook(l, MatrixId::Wv, x);
                queries.push(b.wq.matvec(x));
                keys.push(b.wk.matvec(x));
                values.push(b.wv.matvec(x));
            }
            for i in 0..n {
                let alpha = attention_weights(&queries[i], &keys[..=i]);
                let mixed = weighted_values(&alpha, &values[..=i], d);
                if attention_layer == Some(l) && i == n - 1 {
                    view = Some(AttentionView {
                        alpha: alpha.clone(),
                        values: values[..=i].to_vec(),
                    });
                }
                hook(l, MatrixId::Wo, &mixed);
                add_assign(&mut stream[i], &b.wo.matvec(&mixed));
            }
            for x in stream.iter_mut() {
                let out = self.mlp(l, x, hook);
                add_assign(x, &out);
            }
            if capture == Capture::AllLayers {
                layers.push(stream.clone());
            }
        }

        let snapshots = stream
            .into_iter()
            .enumerate()
            .map(|(i, residual)| {
                let per_layer = (capture == Capture::AllLayers).then(|| {
                    layers
                        .iter()
                        .map(|layer| RealVector::new(layer[i].clone()).expect("finite residual"))
                        .collect()
                });
                self.snapshot(residual, temperature, per_layer)
            })
            .collect::<Result<_>>()?;
        Ok((snapshots, view))
    }

    /// Processes one new token at the end of `state` using cached keys/values.
    fn extend(
        &self,
        state: &mut DecodeState,
        token: usize,
        temperature: f64,
    ) -> Result<SpaceSnapshot> {
        let pos = state.tokens.len();
        if pos >= self.config.max_context {
            return Err(Error::Capacity {
                len: pos + 1,
                max: self.config.max_context,
            });
        }
        if token >= self.config.vocab_size {
            return Err(Error::Index(format!(
                "token {token} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        let d = self.config.model_dim;
        let mut x = self.input_embedding(token, pos);
        for (l, b) in self.blocks.iter().enumerate() {
            let normed = rms_norm(&x, &b.attn_norm);
            let cache = &mut state.caches[l];
            cache.keys.push(b.wk.matvec(&normed));
            cache.values.push(b.wv.matvec(&normed));
            let alpha = attention_weights(&b.wq.matvec(&normed), &cache.keys);
            let mixed = weighted_values(&alpha, &cache.values, d);
            add_assign(&mut x, &b.wo.matvec(&mixed));
            let out = self.mlp(l, &x, &mut |_, _, _| {});
            add_assign(&mut x, &out);
        }
        state.tokens.push(token);
        self.snapshot(x, temperature, None)
    }

    /// Runs the prompt through the cache; returns the state and the snapshot at the last prompt position.
    pub fn prefill(
        &self,
        prompt: &[usize],
        temperature: f64,
    ) -> Result<(DecodeState, SpaceSnapshot)> {
        self.check_tokens(prompt)?;
        validate_temperature(temperature)?;
        let mut state = DecodeState {
            tokens: Vec::with_capacity(prompt.len()),
            prompt_len: prompt.len(),
            caches: vec![LayerCache::default(); self.num_layers()],
            step: 0,
        };
        let mut last = None;
        for &t in prompt {
            last = Some(self.extend(&mut state, t, temperature)?);
        }
        Ok((state, last.expect("non-empty prompt")))
    }

    /// Autoregressive decoding with the key/value cache.
    ///
    /// `trace[t]` is the snapshot from which the `t`-th generated token was
    /// chosen; `trace[0]` sees only the prompt. Snapshots carry `temperature`;
    /// sampling uses the temperature inside `decode`.
    pub fn generate(
        &self,
        prompt: &[usize],
        steps: usize,
        decode: Decode,
        temperature: f64,
    ) -> Result<Generation> {
        if steps == 0 {
            return Err(Error::Validation("steps must be >= 1".into()));
        }
        if prompt.len() + steps > self.config.max_context {
            return Err(Error::Capacity {
                len: prompt.len() + steps,
                max: self.config.max_context,
            });
        }
        let mut rng = match decode {
            Decode::Greedy => None,
            Decode::Sample {
                temperature: st,
                seed,
            } => {
                validate_temperature(st)?;
                Some((st, ChaCha8Rng::seed_from_u64(seed)))
            }
        };
        let (mut state, mut snap) = self.prefill(prompt, temperature)?;
        let mut trace = Vec::with_capacity(steps);
        for t in 0..steps {
            let next = match rng.as_mut() {
                None => argmax_lowest(snap.logits.scores().as_slice()),
                Some((st, rng)) => {
                    let p = softmax_t(&snap.logits.with_temperature(*st)?);
                    sample_index(p.as_slice(), rng.random::<f64>())
                }
            };
            state.step += 1;
            if t + 1 == steps {
                state.tokens.push(next);
                trace.push(snap);
                break;
            }
            let following = self.extend(&mut state, next, temperature)?;
            trace.push(std::mem::replace(&mut snap, following));
        }
        Ok(Generation { state, trace })
    }

    // -----------------------------------------------------------------------
    // Binary persistence
    // -----------------------------------------------------------------------

    const MAGIC: &'static [u8; 6] = b"TOYLM1";

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.embedding.as_slice()];
        for b in &self.blocks {
            out.extend([
                b.attn_norm.as_slice(),
                b.wq.as_slice(),
                b.wk.as_slice(),
                b.wv.as_slice(),
                b.wo.as_slice(),
                b.mlp_norm.as_slice(),
                b.w_up.as_slice(),
                b.w_down.as_slice(),
            ]);
        }
        out.extend([
            self.final_norm.as_slice(),
            self.lm_head.as_slice(),
            self.positional.as_slice(),
        ]);
        out
    }

    /// `TOYLM1`, six little-endian u64 config fields, then every tensor in
    /// declaration order as little-endian f64, row-major.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        let c = &self.config;
        for field in [
            c.vocab_size as u64,
            c.model_dim as u64,
            c.num_layers as u64,
            c.ffn_dim as u64,
            c.seed,
            c.max_context as u64,
        ] {
            w.write_all(&field.to_le_bytes())?;
        }
        for t in self.tensors() {
            for v in t {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |m: String| Error::Validation(format!("malformed TOYLM1 file: {m}"));
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| bad(e.to_string()))?;
        if bytes.len() < 6 + 48 || &bytes[..6] != Self::MAGIC {
            return Err(bad("missing TOYLM1 header".into()));
        }
        let field = |i: usize| {
            let off = 6 + 8 * i;
            u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"))
        };
        let as_usize = |v: u64| usize::try_from(v).map_err(|_| bad(format!("field {v} too large")));
        let config = ToyConfig {
            vocab_size: as_usize(field(0))?,
            model_dim: as_usize(field(1))?,
            num_layers: as_usize(field(2))?,
            ffn_dim: as_usize(field(3))?,
            seed: field(4),
            max_context: as_usize(field(5))?,
        };
        config.validate()?;
        let (v, d, f, l, ctx) = (
            config.vocab_size,
            config.model_dim,
            config.ffn_dim,
            config.num_layers,
            config.max_context,
        );
        let per_block = 2 * d + 4 * d * d + 2 * d * f;
        let expected = v * d + l * per_block + d + v * d + ctx * d;
        let body = &bytes[54..];
        if body.len() != expected * 8 {
            return Err(bad(format!(
                "expected {} weight bytes, found {}",
                expected * 8,
                body.len()
            )));
        }
        let mut floats = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |n: usize| -> Vec<f64> { floats.by_ref().take(n).collect() };
        let mut mat = |rows: usize, cols: usize| Matrix::from_vec(rows, cols, take(rows * cols));
        let embedding = mat(v, d)?;
        let mut blocks = Vec::with_capacity(l);
        for _ in 0..l {
            let attn_norm = mat(1, d)?.as_slice().to_vec();
            let wq = mat(d, d)?;
            let wk = mat(d, d)?;
            let wv = mat(d, d)?;
            let wo = mat(d, d)?;
            let mlp_norm = mat(1, d)?.as_slice().to_vec();
            let w_up = mat(f, d)?;
            let w_down = mat(d, f)?;
            blocks.push(Block {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                mlp_norm,
                w_up,
                w_down,
            });
        }
        let final_norm = mat(1, d)?.as_slice().to_vec();
        let lm_head = mat(v, d)?;
        let positional = mat(ctx, d)?;
        Self::from_parts(config, embedding, blocks, final_norm, lm_head, positional)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

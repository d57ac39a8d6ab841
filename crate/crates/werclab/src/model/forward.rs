//! Pre-LN encoder-decoder forward pass on the autodiff tape.
//!
//! Every sublayer follows `x + Sublayer(LN(x))` except the decoder
//! cross-attention, whose residual merge is pluggable
//! ([`combine_cross_residual`]): plain sum, weighted sum, or the
//! weighted sum of parameter-free layer-normalized terms (WeRC).
//!
//! A forward pass can record a [`ModelTrace`] — residual-stream inputs,
//! per-head attention weights and block outputs — which is everything
//! the contribution analysis in [`crate::contrib`] needs to rewrite the
//! attention blocks exactly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{InputMode, ModelConfig, ResidualVariant, LN_EPS};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::util::rng_for;

/// Additive mask value for blocked attention logits. Finite so tensors
/// stay NaN/Inf-free, large enough that exp underflows to exactly zero.
const MASK_NEG: f64 = -1e9;

/// Source-side input to the encoder.
pub enum SourceInput<'a, F> {
    Tokens(&'a [usize]),
    Frames(&'a Tensor<F>),
}

impl<F: Real> SourceInput<'_, F> {
    pub fn raw_len(&self) -> usize {
        match self {
            SourceInput::Tokens(ids) => ids.len(),
            SourceInput::Frames(t) => t.rows(),
        }
    }
}

/// Train/eval switch; training carries the seed for dropout streams.
#[derive(Debug, Clone, Copy)]
pub enum Mode {
    Eval,
    Train { dropout_seed: u64 },
}

/// Per-forward dropout stream. Draws are consumed in a fixed site order,
/// so a given (seed, site sequence) replays exactly.
struct DropoutState {
    rng: Option<ChaCha8Rng>,
    p: f64,
}

impl DropoutState {
    fn new(mode: Mode, p: f64) -> Self {
        match mode {
            Mode::Eval => Self { rng: None, p },
            Mode::Train { dropout_seed } => {
                if p == 0.0 {
                    Self { rng: None, p }
                } else {
                    Self { rng: Some(rng_for(dropout_seed, &[])), p }
                }
            }
        }
    }

    /// Identity in eval mode; in train mode zeroes entries with
    /// probability p and scales survivors by 1/(1-p).
    fn apply<F: Real>(&mut self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else { return Ok(x) };
        let keep = 1.0 - self.p;
        let scale = F::from_f64(1.0 / keep);
        let n: usize = tape.shape(x).iter().product();
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { scale } else { F::ZERO })
            .collect();
        let shape = tape.shape(x).to_vec();
        let mv = tape.leaf_from(shape, mask, false)?;
        tape.mul_elem(x, mv)
    }
}

/// Standalone dropout with the stated semantics; exposed for direct use
/// and tests. `seed` is ignored in eval mode.
pub fn dropout<F: Real>(tape: &mut Tape<F>, x: Var, p: f64, mode: Mode) -> Result<Var> {
    let mut state = DropoutState::new(mode, p);
    state.apply(tape, x)
}

/// Parameters bound onto a tape as leaves. Bind once per tape, run any
/// number of sentences through it.
pub struct BoundParams {
    vars: std::collections::BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind<F: Real>(tape: &mut Tape<F>, params: &ModelParams<F>, requires_grad: bool) -> Self {
        let mut vars = std::collections::BTreeMap::new();
        for (name, tensor) in params.iter() {
            vars.insert(name.clone(), tape.leaf(tensor, requires_grad));
        }
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Rebinds one parameter to a different tape var (e.g. a
    /// differentiable leaf under test).
    pub fn replace(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    /// (name, var) pairs in canonical name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

// ── Trace ────────────────────────────────────────────────────────────

/// Recorded state of one attention block, sufficient to rewrite the
/// block output as a sum of per-token contributions.
#[derive(Debug, Clone)]
pub struct BlockTrace<F> {
    /// Residual-stream value entering the block (the x_res side).
    pub stream_in: Tensor<F>,
    /// Token representations feeding keys/values (equals `stream_in`
    /// for self-attention, the encoder output for cross-attention).
    pub kv_in: Tensor<F>,
    /// Per-head attention weights, each queries x keys.
    pub alphas: Vec<Tensor<F>>,
    /// Per-head scaled scores before masking and softmax.
    pub scores: Vec<Tensor<F>>,
    /// Attention block output including the output-projection bias.
    pub attn_out: Tensor<F>,
    /// Value leaving the block after the residual merge.
    pub block_out: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct DecLayerTrace<F> {
    pub self_block: BlockTrace<F>,
    pub cross_block: BlockTrace<F>,
}

/// Full record of one teacher-forced forward pass.
#[derive(Debug, Clone)]
pub struct ModelTrace<F> {
    pub enc_blocks: Vec<BlockTrace<F>>,
    pub dec_layers: Vec<DecLayerTrace<F>>,
    pub enc_out: Tensor<F>,
}

// ── Forward context ──────────────────────────────────────────────────

/// One model forward pass over a single (possibly padded) sentence.
pub struct ForwardCtx<'a, F: Real> {
    pub tape: &'a mut Tape<F>,
    bound: &'a BoundParams,
    config: &'a ModelConfig,
    dropout: DropoutState,
    want_trace: bool,
    enc_blocks: Vec<BlockTrace<F>>,
    dec_layers: Vec<DecLayerTrace<F>>,
    enc_out_tensor: Option<Tensor<F>>,
}

impl<'a, F: Real> ForwardCtx<'a, F> {
    pub fn new(
        tape: &'a mut Tape<F>,
        bound: &'a BoundParams,
        config: &'a ModelConfig,
        mode: Mode,
        want_trace: bool,
    ) -> Self {
        let dropout = DropoutState::new(mode, config.dropout);
        Self {
            tape,
            bound,
            config,
            dropout,
            want_trace,
            enc_blocks: Vec::new(),
            dec_layers: Vec::new(),
            enc_out_tensor: None,
        }
    }

    pub fn take_trace(&mut self) -> Option<ModelTrace<F>> {
        if !self.want_trace {
            return None;
        }
        Some(ModelTrace {
            enc_blocks: std::mem::take(&mut self.enc_blocks),
            dec_layers: std::mem::take(&mut self.dec_layers),
            enc_out: self.enc_out_tensor.clone()?,
        })
    }

    fn ln_eps(&self) -> F {
        F::from_f64(LN_EPS)
    }

    fn layer_norm_affine(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.bound.var(&format!("{prefix}.g"));
        let b = self.bound.var(&format!("{prefix}.b"));
        let eps = self.ln_eps();
        self.tape.layer_norm(x, eps, Some((g, b)))
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let wv = self.bound.var(w);
        let bv = self.bound.var(b);
        let y = self.tape.matmul(x, wv)?;
        self.tape.add_row(y, bv)
    }

    /// Multi-head attention. Returns the block output (after the output
    /// projection and its bias) and the pre-dropout per-head weights.
    fn attention(
        &mut self,
        q_in: Var,
        kv_in: Var,
        prefix: &str,
        mask: Option<&Tensor<F>>,
    ) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let q = self.linear(q_in, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(kv_in, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(kv_in, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let inv_sqrt = F::from_f64(1.0 / (dh as f64).sqrt());
        let mask_var = match mask {
            Some(m) => Some(self.tape.constant(m)),
            None => None,
        };
        let mut head_outs = Vec::with_capacity(heads);
        let mut alphas = Vec::with_capacity(heads);
        let mut raw_scores = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh)?;
            let kh = self.tape.slice_cols(k, h * dh, dh)?;
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            let kt = self.tape.transpose(kh)?;
            let scores = self.tape.matmul(qh, kt)?;
            let scores = self.tape.scale(scores, inv_sqrt);
            raw_scores.push(scores);
            let scores = match mask_var {
                Some(m) => self.tape.add(scores, m)?,
                None => scores,
            };
            let alpha = self.tape.softmax(scores, 1)?;
            alphas.push(alpha);
            let alpha_d = self.dropout.apply(self.tape, alpha)?;
            head_outs.push(self.tape.matmul(alpha_d, vh)?);
        }
        let cat = self.tape.concat_cols(&head_outs)?;
        let out = self.linear(cat, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
        Ok((out, alphas, raw_scores))
    }

    fn mlp(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let r = self.tape.relu(h);
        let r = self.dropout.apply(self.tape, r)?;
        self.linear(r, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn record_block(
        &mut self,
        stream_in: Var,
        kv_in: Var,
        alphas: &[Var],
        scores: &[Var],
        attn_out: Var,
        block_out: Var,
    ) -> Option<BlockTrace<F>> {
        if !self.want_trace {
            return None;
        }
        Some(BlockTrace {
            stream_in: self.tape.to_tensor(stream_in),
            kv_in: self.tape.to_tensor(kv_in),
            alphas: alphas.iter().map(|&a| self.tape.to_tensor(a)).collect(),
            scores: scores.iter().map(|&s| self.tape.to_tensor(s)).collect(),
            attn_out: self.tape.to_tensor(attn_out),
            block_out: self.tape.to_tensor(block_out),
        })
    }

    /// Mean-pool frames over non-overlapping windows of `stride`, then
    /// map features to the model width with the learned front-end.
    pub fn subsample_frames(&mut self, frames: Var, stride: usize) -> Result<Var> {
        let pooled = self.tape.pool_mean_rows(frames, stride)?;
        self.linear(pooled, "frontend.w", "frontend.b")
    }

    fn embed_source(&mut self, source: &SourceInput<F>) -> Result<Var> {
        let d = self.config.d_model;
        let x = match (source, self.config.input_mode) {
            (SourceInput::Tokens(ids), InputMode::Tokens) => {
                if ids.is_empty() {
                    return Err(Error::EmptyInput("encoder token sequence".into()));
                }
                let table = self.bound.var("src_embed");
                let e = self.tape.embedding(table, ids)?;
                self.tape.scale(e, F::from_f64((d as f64).sqrt()))
            }
            (SourceInput::Frames(frames), InputMode::Frames { pool_stride, .. }) => {
                let fv = self.tape.constant(frames);
                self.subsample_frames(fv, pool_stride)?
            }
            _ => {
                return Err(Error::InvalidConfig(
                    "source input kind does not match config input_mode".into(),
                ))
            }
        };
        let len = self.tape.shape(x)[0];
        if len > self.config.max_len {
            return Err(Error::SequenceTooLong { len, max_len: self.config.max_len });
        }
        let pe = positional_encoding::<F>(len, d);
        let pev = self.tape.constant(&pe);
        self.tape.add(x, pev)
    }

    /// Pre-LN encoder stack. `key_mask[j] = false` hides position j from
    /// every query; `None` means all positions are valid.
    pub fn encoder_forward(&mut self, source: &SourceInput<F>, key_mask: Option<&[bool]>) -> Result<Var> {
        let mut x = self.embed_source(source)?;
        let s = self.tape.shape(x)[0];
        if let Some(m) = key_mask {
            if m.len() != s {
                return Err(Error::InvalidConfig(format!(
                    "key mask length {} does not match encoder length {s}",
                    m.len()
                )));
            }
        }
        let mask = attention_mask::<F>(s, s, false, key_mask);
        for i in 0..self.config.enc_layers {
            let stream_in = x;
            let h = self.layer_norm_affine(x, &format!("enc.{i}.ln1"))?;
            let (a, alphas, scores) = self.attention(h, h, &format!("enc.{i}.attn"), mask.as_ref())?;
            x = self.tape.add(x, a)?;
            if let Some(t) = self.record_block(stream_in, stream_in, &alphas, &scores, a, x) {
                self.enc_blocks.push(t);
            }
            let h2 = self.layer_norm_affine(x, &format!("enc.{i}.ln2"))?;
            let m = self.mlp(h2, &format!("enc.{i}.mlp"))?;
            x = self.tape.add(x, m)?;
        }
        let out = self.layer_norm_affine(x, "enc.final_ln")?;
        if self.want_trace {
            self.enc_out_tensor = Some(self.tape.to_tensor(out));
        }
        Ok(out)
    }

    /// Pre-LN decoder stack under teacher forcing: causal self-attention
    /// with a plain residual, cross-attention merged by the configured
    /// residual variant, position-wise MLP, final norm + projection.
    ///
    /// `tgt_inputs` are the shifted-right target ids (BOS-prefixed).
    pub fn decoder_forward(
        &mut self,
        enc_out: Var,
        tgt_inputs: &[usize],
        src_key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        if tgt_inputs.is_empty() {
            return Err(Error::EmptyInput("decoder input sequence".into()));
        }
        let t = tgt_inputs.len();
        if t > self.config.max_len {
            return Err(Error::SequenceTooLong { len: t, max_len: self.config.max_len });
        }
        let d = self.config.d_model;
        let s = self.tape.shape(enc_out)[0];
        let table = self.bound.var("tgt_embed");
        let e = self.tape.embedding(table, tgt_inputs)?;
        let e = self.tape.scale(e, F::from_f64((d as f64).sqrt()));
        let pe = positional_encoding::<F>(t, d);
        let pev = self.tape.constant(&pe);
        let mut x = self.tape.add(e, pev)?;

        let causal = attention_mask::<F>(t, t, true, None);
        let cross = attention_mask::<F>(t, s, false, src_key_mask);
        let enc_kv = if self.want_trace { Some(self.tape.to_tensor(enc_out)) } else { None };

        let lambda = self.config.effective_lambda();
        for i in 0..self.config.dec_layers {
            let stream0 = x;
            let h = self.layer_norm_affine(x, &format!("dec.{i}.ln1"))?;
            let (sa, sa_alphas, sa_scores) = self.attention(h, h, &format!("dec.{i}.self"), causal.as_ref())?;
            x = self.tape.add(x, sa)?;
            let self_block = self.record_block(stream0, stream0, &sa_alphas, &sa_scores, sa, x);

            let stream1 = x;
            let h2 = self.layer_norm_affine(x, &format!("dec.{i}.ln2"))?;
            let (ca, ca_alphas, ca_scores) = self.attention(h2, enc_out, &format!("dec.{i}.cross"), cross.as_ref())?;
            x = combine_cross_residual(self.tape, ca, x, self.config.residual_variant, lambda, LN_EPS)?;
            if let (Some(sb), Some(kv)) = (self_block, enc_kv.as_ref()) {
                let mut cb = self
                    .record_block(stream1, stream1, &ca_alphas, &ca_scores, ca, x)
                    .expect("trace enabled");
                cb.kv_in = kv.clone();
                self.dec_layers.push(DecLayerTrace { self_block: sb, cross_block: cb });
            }

            let h3 = self.layer_norm_affine(x, &format!("dec.{i}.ln3"))?;
            let m = self.mlp(h3, &format!("dec.{i}.mlp"))?;
            x = self.tape.add(x, m)?;
        }
        let out = self.layer_norm_affine(x, "dec.final_ln")?;
        self.linear(out, "out.w", "out.b")
    }
}

/// Merges the cross-attention output with the residual stream.
///
/// - `Standard`: `x_attn + x_res`
/// - `WercNoNorm`: `lambda * x_attn + (1 - lambda) * x_res`
/// - `Werc`: `lambda * LN(x_attn) + (1 - lambda) * LN(x_res)` with
///   parameter-free layer norms, so both summands carry equal norm and
///   the attention term's share of the sum is exactly `lambda`.
/// - `WercNoWeights`: `Werc` at `lambda = 0.5`.
pub fn combine_cross_residual<F: Real>(
    tape: &mut Tape<F>,
    x_attn: Var,
    x_res: Var,
    variant: ResidualVariant,
    lambda: f64,
    eps: f64,
) -> Result<Var> {
    if tape.shape(x_attn) != tape.shape(x_res) {
        return Err(Error::ShapeMismatch {
            op: "combine_cross_residual",
            left: tape.shape(x_attn).to_vec(),
            right: tape.shape(x_res).to_vec(),
        });
    }
    let weighted = |tape: &mut Tape<F>, a: Var, r: Var, lam: f64| -> Result<Var> {
        let sa = tape.scale(a, F::from_f64(lam));
        let sr = tape.scale(r, F::from_f64(1.0 - lam));
        tape.add(sa, sr)
    };
    match variant {
        ResidualVariant::Standard => tape.add(x_attn, x_res),
        ResidualVariant::WercNoNorm => weighted(tape, x_attn, x_res, lambda),
        ResidualVariant::Werc => {
            let na = tape.layer_norm(x_attn, F::from_f64(eps), None)?;
            let nr = tape.layer_norm(x_res, F::from_f64(eps), None)?;
            weighted(tape, na, nr, lambda)
        }
        ResidualVariant::WercNoWeights => {
            let na = tape.layer_norm(x_attn, F::from_f64(eps), None)?;
            let nr = tape.layer_norm(x_res, F::from_f64(eps), None)?;
            weighted(tape, na, nr, 0.5)
        }
    }
}

/// Sinusoidal position table, computed at f64 and cast.
pub fn positional_encoding<F: Real>(len: usize, d: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
            let angle = pos as f64 * freq;
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(F::from_f64(v));
        }
    }
    Tensor::new(vec![len, d], data).unwrap()
}

/// Additive attention mask, or `None` when nothing is blocked.
/// Blocked entries get a large negative value whose softmax weight
/// underflows to exactly zero.
pub fn attention_mask<F: Real>(
    tq: usize,
    tk: usize,
    causal: bool,
    key_valid: Option<&[bool]>,
) -> Option<Tensor<F>> {
    let any_invalid = key_valid.map(|m| m.iter().any(|&v| !v)).unwrap_or(false);
    if !causal && !any_invalid {
        return None;
    }
    let neg = F::from_f64(MASK_NEG);
    let mut data = vec![F::ZERO; tq * tk];
    for i in 0..tq {
        for j in 0..tk {
            let blocked = (causal && j > i)
                || key_valid.map(|m| !m[j]).unwrap_or(false);
            if blocked {
                data[i * tk + j] = neg;
            }
        }
    }
    Some(Tensor::new(vec![tq, tk], data).unwrap())
}

/// Binds the parameters and runs a full teacher-forced pass over one
/// sentence. Convenience wrapper for analysis and evaluation; training
/// binds once per chunk instead.
pub fn teacher_forward<F: Real>(
    tape: &mut Tape<F>,
    params: &ModelParams<F>,
    config: &ModelConfig,
    source: &SourceInput<F>,
    tgt_inputs: &[usize],
    mode: Mode,
    want_trace: bool,
) -> Result<(Var, Option<ModelTrace<F>>)> {
    let bound = BoundParams::bind(tape, params, false);
    let mut ctx = ForwardCtx::new(tape, &bound, config, mode, want_trace);
    let enc = ctx.encoder_forward(source, None)?;
    let logits = ctx.decoder_forward(enc, tgt_inputs, None)?;
    let trace = ctx.take_trace();
    Ok((logits, trace))
}

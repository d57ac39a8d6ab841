//! Exact affine rewriting of attention blocks.
//!
//! A recorded attention block output is rewritten as
//!
//! ```text
//! y_i = sum_j T_i(x_j) + b_i + residual_i
//! ```
//!
//! where `T_i(x_j) = sum_h alpha_ij^h * W_O^h(W_V^h * L(x_j))`, `L` is
//! the block's pre-norm treated as a fixed linear map at its recorded
//! per-vector scale, `b_i` collects every bias (layer-norm shift, value
//! bias, output bias), and `residual_i` is the stream that bypasses the
//! block. For the weighted-normalized variants the combiner weights and
//! the post-combination norm scales are absorbed into `T`, `b` and
//! `residual`, so the identity stays exact there too.
//!
//! Biases get no token credit: they only enter the reconstructed output
//! used for relevance.

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, ResidualVariant, LN_EPS};
use crate::model::forward::BlockTrace;
use crate::model::params::ModelParams;
use crate::tensor::Tensor;

/// Reconstruction tolerance (64-bit): beyond this the decomposition is
/// internally inconsistent.
pub const RECONSTRUCTION_TOL: f64 = 1e-6;

/// Which block is being rewritten; fixes the key-side linear map and
/// the residual handling.
#[derive(Debug, Clone, Copy)]
pub enum BlockKind<'a> {
    /// Self-attention: keys pass through the block's pre-norm, the
    /// residual is the plain stream.
    SelfAttn { attn_prefix: &'a str, ln_prefix: &'a str },
    /// Decoder cross-attention: keys are encoder outputs (no extra
    /// norm) and the residual merge follows the configured variant.
    CrossAttn { attn_prefix: &'a str, variant: ResidualVariant, lambda: f64 },
}

/// Exact additive decomposition of one block's output.
#[derive(Debug, Clone)]
pub struct BlockDecomposition {
    /// `token_terms[i][j]` = T_i(x_j), the d-dim contribution of key
    /// token j to query i (combiner weights already absorbed).
    pub token_terms: Vec<Vec<Vec<f64>>>,
    /// `bias[i]` = b_i.
    pub bias: Vec<Vec<f64>>,
    /// `residual[i]` = the bypass term for query i.
    pub residual: Vec<Vec<f64>>,
    /// `reconstructed[i]` = sum_j T_i(x_j) + b_i + residual_i.
    pub reconstructed: Vec<Vec<f64>>,
    pub max_reconstruction_err: f64,
}

fn row(t: &Tensor<f64>, i: usize) -> &[f64] {
    let c = t.cols();
    &t.data()[i * c..(i + 1) * c]
}

/// Mean and 1/sqrt(var + eps) with the same accumulation order as the
/// forward layer norm, so frozen scales match the recorded pass bitwise.
fn ln_stats(x: &[f64], eps: f64) -> (f64, f64) {
    let d = x.len() as f64;
    let inv_d = 1.0 / d;
    let mut mean = 0.0;
    for &v in x {
        mean += v;
    }
    mean *= inv_d;
    let mut var = 0.0;
    for &v in x {
        let delta = v - mean;
        var += delta * delta;
    }
    var *= inv_d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// x . W for W stored input-dim x output-dim.
fn vec_mat(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    let (din, dout) = (w.rows(), w.cols());
    debug_assert_eq!(x.len(), din);
    let mut out = vec![0.0; dout];
    for (p, &xv) in x.iter().enumerate() {
        let wrow = &w.data()[p * dout..(p + 1) * dout];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += xv * wv;
        }
    }
    out
}

/// Rewrites one recorded attention block into per-token terms, bias and
/// residual, and verifies the reconstruction against the recorded
/// block output.
pub fn decompose_attention_block(
    params: &ModelParams<f64>,
    config: &ModelConfig,
    trace: &BlockTrace<f64>,
    kind: BlockKind,
) -> Result<BlockDecomposition> {
    let d = config.d_model;
    let heads = config.heads;
    let dh = config.head_dim();
    let tq = trace.stream_in.rows();
    let tk = trace.kv_in.rows();
    if trace.alphas.len() != heads {
        return Err(Error::InvalidConfig(format!(
            "trace has {} attention heads, config expects {heads}",
            trace.alphas.len()
        )));
    }

    let attn_prefix = match kind {
        BlockKind::SelfAttn { attn_prefix, .. } => attn_prefix,
        BlockKind::CrossAttn { attn_prefix, .. } => attn_prefix,
    };
    let wv = params.get(&format!("{attn_prefix}.wv"));
    let bv = params.get(&format!("{attn_prefix}.bv"));
    let wo = params.get(&format!("{attn_prefix}.wo"));
    let bo = params.get(&format!("{attn_prefix}.bo"));

    // Key-side linear map: token-credited part of each value vector and
    // the key-side constant that joins the bias.
    let mut token_values: Vec<Vec<f64>> = Vec::with_capacity(tk); // L_lin(x_j) . W_v
    let mut value_const = vec![0.0; d]; // (beta . W_v) + b_v, constant over keys
    match kind {
        BlockKind::SelfAttn { ln_prefix, .. } => {
            let gain = params.get(&format!("{ln_prefix}.g"));
            let beta = params.get(&format!("{ln_prefix}.b"));
            for j in 0..tk {
                let x = row(&trace.kv_in, j);
                let (mean, inv_std) = ln_stats(x, LN_EPS);
                let lin: Vec<f64> = (0..d).map(|c| gain.data()[c] * (x[c] - mean) * inv_std).collect();
                token_values.push(vec_mat(&lin, wv));
            }
            let beta_v = vec_mat(beta.data(), wv);
            for c in 0..d {
                value_const[c] = beta_v[c] + bv.data()[c];
            }
        }
        BlockKind::CrossAttn { .. } => {
            for j in 0..tk {
                token_values.push(vec_mat(row(&trace.kv_in, j), wv));
            }
            value_const.copy_from_slice(bv.data());
        }
    }

    // Per key and head: u_j^h = (token value slice) . W_O^h, a d-vector.
    // W_O^h is the rows of W_o owned by head h.
    let mut head_terms: Vec<Vec<Vec<f64>>> = Vec::with_capacity(tk);
    for token_value in &token_values {
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut u = vec![0.0; d];
            for p in 0..dh {
                let vhp = token_value[h * dh + p];
                let wrow = &wo.data()[(h * dh + p) * d..(h * dh + p + 1) * d];
                for (o, &wv) in u.iter_mut().zip(wrow) {
                    *o += vhp * wv;
                }
            }
            per_head.push(u);
        }
        head_terms.push(per_head);
    }
    // Constant output of head h fed by the key-side constant.
    let mut head_consts: Vec<Vec<f64>> = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut u = vec![0.0; d];
        for p in 0..dh {
            let vhp = value_const[h * dh + p];
            let wrow = &wo.data()[(h * dh + p) * d..(h * dh + p + 1) * d];
            for (o, &wv) in u.iter_mut().zip(wrow) {
                *o += vhp * wv;
            }
        }
        head_consts.push(u);
    }

    // Raw attention-side terms per query.
    let mut token_terms: Vec<Vec<Vec<f64>>> = Vec::with_capacity(tq);
    let mut bias: Vec<Vec<f64>> = Vec::with_capacity(tq);
    for i in 0..tq {
        let mut terms_i = Vec::with_capacity(tk);
        for j in 0..tk {
            let mut t = vec![0.0; d];
            for h in 0..heads {
                let a = trace.alphas[h].at(i, j);
                if a != 0.0 {
                    for (tv, &uv) in t.iter_mut().zip(&head_terms[j][h]) {
                        *tv += a * uv;
                    }
                }
            }
            terms_i.push(t);
        }
        // b_i = sum_h (sum_j alpha_ij^h) * head_const_h + b_o ; row sums
        // kept explicit so the identity holds to float accuracy.
        let mut b = bo.data().to_vec();
        for h in 0..heads {
            let mut asum = 0.0;
            for j in 0..tk {
                asum += trace.alphas[h].at(i, j);
            }
            for (bvx, &uv) in b.iter_mut().zip(&head_consts[h]) {
                *bvx += asum * uv;
            }
        }
        token_terms.push(terms_i);
        bias.push(b);
    }

    // Residual side plus variant-specific absorption.
    let mut residual: Vec<Vec<f64>> = Vec::with_capacity(tq);
    match kind {
        BlockKind::SelfAttn { .. } => {
            for i in 0..tq {
                residual.push(row(&trace.stream_in, i).to_vec());
            }
        }
        BlockKind::CrossAttn { variant, lambda, .. } => match variant {
            ResidualVariant::Standard => {
                for i in 0..tq {
                    residual.push(row(&trace.stream_in, i).to_vec());
                }
            }
            ResidualVariant::WercNoNorm => {
                for i in 0..tq {
                    for j in 0..tk {
                        for v in token_terms[i][j].iter_mut() {
                            *v *= lambda;
                        }
                    }
                    for v in bias[i].iter_mut() {
                        *v *= lambda;
                    }
                    residual.push(row(&trace.stream_in, i).iter().map(|&v| v * (1.0 - lambda)).collect());
                }
            }
            ResidualVariant::Werc | ResidualVariant::WercNoWeights => {
                let lam = if matches!(variant, ResidualVariant::WercNoWeights) { 0.5 } else { lambda };
                for i in 0..tq {
                    // Freeze the parameter-free norm of the attention sum
                    // at its recorded value and push it through each term.
                    let a_i = row(&trace.attn_out, i);
                    let (_, inv_a) = ln_stats(a_i, LN_EPS);
                    let absorb = |t: &mut Vec<f64>| {
                        let mean = t.iter().sum::<f64>() / d as f64;
                        for v in t.iter_mut() {
                            *v = lam * (*v - mean) * inv_a;
                        }
                    };
                    for j in 0..tk {
                        absorb(&mut token_terms[i][j]);
                    }
                    absorb(&mut bias[i]);

                    let x_i = row(&trace.stream_in, i);
                    let (mean_x, inv_x) = ln_stats(x_i, LN_EPS);
                    residual.push(x_i.iter().map(|&v| (1.0 - lam) * (v - mean_x) * inv_x).collect());
                }
            }
        },
    }

    // Exact reconstruction check against the recorded block output.
    let mut reconstructed = Vec::with_capacity(tq);
    let mut max_err: f64 = 0.0;
    for i in 0..tq {
        let mut y = bias[i].clone();
        for j in 0..tk {
            for (yv, &tv) in y.iter_mut().zip(&token_terms[i][j]) {
                *yv += tv;
            }
        }
        for (yv, &rv) in y.iter_mut().zip(&residual[i]) {
            *yv += rv;
        }
        for (c, &yv) in y.iter().enumerate() {
            let err = (yv - trace.block_out.at(i, c)).abs();
            max_err = max_err.max(err);
        }
        reconstructed.push(y);
    }
    if !max_err.is_finite() || max_err > RECONSTRUCTION_TOL {
        return Err(Error::Reconstruction { max_err, limit: RECONSTRUCTION_TOL });
    }

    Ok(BlockDecomposition { token_terms, bias, residual, reconstructed, max_reconstruction_err: max_err })
}

/// Row-stochastic per-layer contribution matrix.
///
/// Columns are the key tokens followed by one residual contributor
/// (the query token itself for self-attention, the target stream for
/// cross-attention). Relevance of a term is how much removing it would
/// shrink the l1 norm of the reconstructed output, clipped at zero:
/// `r_ij = max(0, ||y_i||_1 - ||y_i - T_i(x_j)||_1)`.
#[derive(Debug, Clone)]
pub struct LayerContrib {
    /// `[queries][keys + 1]`; last column is the residual contributor.
    pub matrix: Vec<Vec<f64>>,
    /// Rows whose relevances were all zero and fell back to uniform.
    pub uniform_fallback_rows: Vec<usize>,
}

impl LayerContrib {
    pub fn queries(&self) -> usize {
        self.matrix.len()
    }

    pub fn keys(&self) -> usize {
        self.matrix[0].len() - 1
    }

    pub fn residual_share(&self, i: usize) -> f64 {
        *self.matrix[i].last().unwrap()
    }
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn l1_minus(y: &[f64], t: &[f64]) -> f64 {
    y.iter().zip(t).map(|(a, b)| (a - b).abs()).sum()
}

pub fn layer_contribution_matrix(dec: &BlockDecomposition) -> LayerContrib {
    let tq = dec.token_terms.len();
    let tk = if tq > 0 { dec.token_terms[0].len() } else { 0 };
    let mut matrix = Vec::with_capacity(tq);
    let mut uniform_fallback_rows = Vec::new();
    for i in 0..tq {
        let y = &dec.reconstructed[i];
        let base = l1(y);
        let mut r: Vec<f64> = Vec::with_capacity(tk + 1);
        for j in 0..tk {
            r.push((base - l1_minus(y, &dec.token_terms[i][j])).max(0.0));
        }
        r.push((base - l1_minus(y, &dec.residual[i])).max(0.0));
        let sum: f64 = r.iter().sum();
        if sum <= 0.0 {
            let u = 1.0 / (tk + 1) as f64;
            r.iter_mut().for_each(|v| *v = u);
            uniform_fallback_rows.push(i);
        } else {
            r.iter_mut().for_each(|v| *v /= sum);
        }
        matrix.push(r);
    }
    LayerContrib { matrix, uniform_fallback_rows }
}

//! Layer-by-layer composition of contribution matrices.
//!
//! Encoder layers mix source positions, so composing their (residual-
//! folded) row-stochastic matrices attributes encoder outputs to raw
//! source positions. Decoder layers first mix target positions through
//! self-attention, then split each row's mass between the source block
//! (cross-attention columns, mapped through the encoder rollout) and
//! the target block (residual share times the accumulated target
//! composition).

use super::decompose::LayerContrib;
use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-9;

fn check_row_stochastic(m: &[Vec<f64>]) -> Result<()> {
    for (i, r) in m.iter().enumerate() {
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL || r.iter().any(|&v| v < 0.0) {
            return Err(Error::NonStochasticRow { row: i, sum });
        }
    }
    Ok(())
}

/// Folds the residual column into the query token's own column,
/// giving a square row-stochastic mixing matrix.
pub fn fold_residual_into_self(layer: &LayerContrib) -> Vec<Vec<f64>> {
    let tq = layer.queries();
    let tk = layer.keys();
    debug_assert_eq!(tq, tk, "self-attention mixes a square token set");
    let mut out = vec![vec![0.0; tk]; tq];
    for i in 0..tq {
        for j in 0..tk {
            out[i][j] = layer.matrix[i][j];
        }
        out[i][i] += layer.residual_share(i);
    }
    out
}

/// `a . b` for dense row-major nested vecs.
fn matprod(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = a.len();
    let k = b.len();
    let n = b[0].len();
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for p in 0..k {
            let av = a[i][p];
            if av != 0.0 {
                for j in 0..n {
                    out[i][j] += av * b[p][j];
                }
            }
        }
    }
    out
}

/// Composes encoder self-attention layers (given in forward order) into
/// a row-stochastic map from encoder outputs to raw source positions.
pub fn encoder_rollout(layers: &[LayerContrib]) -> Result<Vec<Vec<f64>>> {
    if layers.is_empty() {
        return Err(Error::EmptyInput("encoder rollout needs at least one layer".into()));
    }
    let s = layers[0].queries();
    let mut acc: Vec<Vec<f64>> = (0..s)
        .map(|i| (0..s).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for layer in layers {
        let m = fold_residual_into_self(layer);
        check_row_stochastic(&m)?;
        acc = matprod(&m, &acc);
    }
    check_row_stochastic(&acc)?;
    Ok(acc)
}

/// Final attribution of decoder outputs to raw inputs: a source block
/// (columns = raw source positions) and a target block (columns =
/// target input positions). Rows are row-stochastic across both blocks.
#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub source: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
}

impl RolloutResult {
    /// Fraction of row i's mass attributed to the raw source.
    pub fn source_share(&self, i: usize) -> f64 {
        self.source[i].iter().sum()
    }

    pub fn rows(&self) -> usize {
        self.source.len()
    }

    pub fn check_rows(&self) -> Result<()> {
        for i in 0..self.rows() {
            let sum: f64 = self.source[i].iter().sum::<f64>() + self.target[i].iter().sum::<f64>();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::NonStochasticRow { row: i, sum });
            }
        }
        Ok(())
    }
}

/// Rolls decoder layers (self then cross per layer, forward order) over
/// an encoder rollout.
pub fn decoder_rollout(
    layers: &[(LayerContrib, LayerContrib)],
    enc_rollout: &[Vec<f64>],
) -> Result<RolloutResult> {
    if layers.is_empty() {
        return Err(Error::EmptyInput("decoder rollout needs at least one layer".into()));
    }
    let t = layers[0].0.queries();
    let s_raw = if enc_rollout.is_empty() { 0 } else { enc_rollout[0].len() };
    let mut source: Vec<Vec<f64>> = vec![vec![0.0; s_raw]; t];
    let mut target: Vec<Vec<f64>> = (0..t)
        .map(|i| (0..t).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for (self_layer, cross_layer) in layers {
        // Target-side mixing.
        let a = fold_residual_into_self(self_layer);
        check_row_stochastic(&a)?;
        source = matprod(&a, &source);
        target = matprod(&a, &target);

        // Source/target split: cross columns map encoder outputs to raw
        // source positions through the encoder rollout; the residual
        // share scales the accumulated composition.
        check_row_stochastic(&cross_layer.matrix)?;
        let cross_src: Vec<Vec<f64>> = cross_layer
            .matrix
            .iter()
            .map(|r| r[..r.len() - 1].to_vec())
            .collect();
        let mapped = matprod(&cross_src, enc_rollout);
        for i in 0..t {
            let rho = cross_layer.residual_share(i);
            for v in source[i].iter_mut() {
                *v *= rho;
            }
            for (sv, &mv) in source[i].iter_mut().zip(&mapped[i]) {
                *sv += mv;
            }
            for v in target[i].iter_mut() {
                *v *= rho;
            }
        }
    }
    let result = RolloutResult { source, target };
    result.check_rows()?;
    Ok(result)
}

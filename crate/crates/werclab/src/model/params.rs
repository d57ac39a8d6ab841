use std::collections::BTreeMap;

use rand::Rng;

use super::config::{InputMode, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::util::{hash_name, mix_seed, rng_for};

/// Named parameter map. Iteration order is the sorted name order, which
/// fixes the layout of gradients, optimizer state and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    named: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> ModelParams<F> {
    pub fn get(&self, name: &str) -> &Tensor<F> {
        self.named
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<F>> {
        self.named.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.named.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.named.keys()
    }

    pub fn len(&self) -> usize {
        self.named.len()
    }

    pub fn is_empty(&self) -> bool {
        self.named.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.named.values().map(|t| t.len()).sum()
    }

    pub fn insert(&mut self, name: String, t: Tensor<F>) {
        self.named.insert(name, t);
    }

    pub fn from_map(named: BTreeMap<String, Tensor<F>>) -> Self {
        Self { named }
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            named: self.named.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Applies `update` to every tensor, in name order.
    pub fn update_each(&mut self, mut update: impl FnMut(&str, &mut Vec<F>)) {
        let names: Vec<String> = self.named.keys().cloned().collect();
        for name in names {
            let t = self.named.remove(&name).unwrap();
            let shape = t.shape().to_vec();
            let mut data = t.into_data();
            update(&name, &mut data);
            self.named.insert(name.clone(), Tensor::new(shape, data).unwrap());
        }
    }
}

/// Canonical list of (name, shape, init scale) for a configuration.
/// Everything that builds, counts, loads or re-initializes parameters
/// walks this list.
pub fn parameter_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let d = config.d_model;
    let ff = config.d_ff;
    let mut specs = Vec::new();
    match config.input_mode {
        InputMode::Tokens => {
            specs.push(("src_embed".to_string(), vec![config.vocab_src, d], InitKind::FanIn(d)));
        }
        InputMode::Frames { feature_dim, .. } => {
            specs.push(("frontend.w".to_string(), vec![feature_dim, d], InitKind::FanIn(feature_dim)));
            specs.push(("frontend.b".to_string(), vec![d], InitKind::Zero));
        }
    }
    specs.push(("tgt_embed".to_string(), vec![config.vocab_tgt, d], InitKind::FanIn(d)));

    let attn = |specs: &mut Vec<(String, Vec<usize>, InitKind)>, prefix: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("{prefix}.{w}"), vec![d, d], InitKind::FanIn(d)));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            specs.push((format!("{prefix}.{b}"), vec![d], InitKind::Zero));
        }
    };
    let ln = |specs: &mut Vec<(String, Vec<usize>, InitKind)>, prefix: &str| {
        specs.push((format!("{prefix}.g"), vec![d], InitKind::One));
        specs.push((format!("{prefix}.b"), vec![d], InitKind::Zero));
    };
    let mlp = |specs: &mut Vec<(String, Vec<usize>, InitKind)>, prefix: &str| {
        specs.push((format!("{prefix}.w1"), vec![d, ff], InitKind::FanIn(d)));
        specs.push((format!("{prefix}.b1"), vec![ff], InitKind::Zero));
        specs.push((format!("{prefix}.w2"), vec![ff, d], InitKind::FanIn(ff)));
        specs.push((format!("{prefix}.b2"), vec![d], InitKind::Zero));
    };

    for i in 0..config.enc_layers {
        attn(&mut specs, &format!("enc.{i}.attn"));
        ln(&mut specs, &format!("enc.{i}.ln1"));
        ln(&mut specs, &format!("enc.{i}.ln2"));
        mlp(&mut specs, &format!("enc.{i}.mlp"));
    }
    ln(&mut specs, "enc.final_ln");

    for i in 0..config.dec_layers {
        attn(&mut specs, &format!("dec.{i}.self"));
        attn(&mut specs, &format!("dec.{i}.cross"));
        ln(&mut specs, &format!("dec.{i}.ln1"));
        ln(&mut specs, &format!("dec.{i}.ln2"));
        ln(&mut specs, &format!("dec.{i}.ln3"));
        mlp(&mut specs, &format!("dec.{i}.mlp"));
    }
    ln(&mut specs, "dec.final_ln");

    specs.push(("out.w".to_string(), vec![d, config.vocab_tgt], InitKind::FanIn(d)));
    specs.push(("out.b".to_string(), vec![config.vocab_tgt], InitKind::Zero));
    specs
}

#[derive(Debug, Clone, Copy)]
pub enum InitKind {
    /// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
    FanIn(usize),
    Zero,
    One,
}

fn init_tensor<F: Real>(name: &str, shape: &[usize], kind: InitKind, seed: u64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = match kind {
        InitKind::Zero => vec![F::ZERO; n],
        InitKind::One => vec![F::ONE; n],
        InitKind::FanIn(fan_in) => {
            let scale = 1.0 / (fan_in as f64).sqrt();
            let mut rng = rng_for(seed, &[hash_name(name)]);
            (0..n)
                .map(|_| F::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * scale))
                .collect()
        }
    };
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Deterministic initialization from a seed. Draws are keyed by
/// parameter name, so adding or removing one parameter never shifts the
/// values of the others.
pub fn build_model<F: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    config.validate()?;
    let mut named = BTreeMap::new();
    for (name, shape, kind) in parameter_specs(config) {
        let t = init_tensor(&name, &shape, kind, seed);
        named.insert(name, t);
    }
    Ok(ModelParams { named })
}

/// Total scalar parameter count implied by a configuration.
pub fn param_count(config: &ModelConfig) -> usize {
    parameter_specs(config)
        .iter()
        .map(|(_, shape, _)| shape.iter().product::<usize>())
        .sum()
}

/// True for parameters that belong to the decoder side of the model:
/// the target embedding, every decoder layer, the decoder final norm and
/// the output projection.
pub fn is_decoder_param(name: &str) -> bool {
    name == "tgt_embed" || name.starts_with("dec.") || name.starts_with("out.")
}

/// Resamples all decoder-side parameters from `seed`, leaving the
/// encoder side (including the frame front-end) bitwise untouched.
pub fn reinit_decoder<F: Real>(params: &ModelParams<F>, config: &ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    config.validate()?;
    // Tag the derived seed so a decoder reinit with seed s differs from a
    // full build with seed s.
    let derived = mix_seed(seed, &[hash_name("reinit_decoder")]);
    let mut named = BTreeMap::new();
    for (name, shape, kind) in parameter_specs(config) {
        let t = if is_decoder_param(&name) {
            init_tensor(&name, &shape, kind, derived)
        } else {
            params
                .try_get(&name)
                .ok_or_else(|| Error::InvalidConfig(format!("source params missing {name}")))?
                .clone()
        };
        named.insert(name, t);
    }
    Ok(ModelParams { named })
}

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::seeding::{rng_for, STREAM_INIT};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
}

impl TransformerConfig {
    /// Toy-scale defaults for a given vocabulary.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            vocab_size,
            max_len: 64,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("d_model, n_heads and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return bad("at least one encoder and one decoder layer".into());
        }
        if self.vocab_size < 2 || self.max_len == 0 {
            return bad("vocab_size must be at least 2 and max_len positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![("embed".to_string(), vec![self.vocab_size, d])];
        let ln = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.g"), vec![d]));
            out.push((format!("{p}.b"), vec![d]));
        };
        let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            for w in ["q", "k", "v", "o"] {
                out.push((format!("{p}.{w}"), vec![d, d]));
            }
        };
        let ffn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.wi"), vec![d, self.d_ff]));
            out.push((format!("{p}.wo"), vec![self.d_ff, d]));
        };
        for i in 0..self.n_enc_layers {
            ln(&mut out, &format!("enc.{i}.ln_attn"));
            attn(&mut out, &format!("enc.{i}.attn"));
            ln(&mut out, &format!("enc.{i}.ln_ffn"));
            ffn(&mut out, &format!("enc.{i}.ffn"));
        }
        ln(&mut out, "enc.ln_final");
        for i in 0..self.n_dec_layers {
            ln(&mut out, &format!("dec.{i}.ln_self"));
            attn(&mut out, &format!("dec.{i}.self"));
            ln(&mut out, &format!("dec.{i}.ln_cross"));
            attn(&mut out, &format!("dec.{i}.cross"));
            ln(&mut out, &format!("dec.{i}.ln_ffn"));
            ffn(&mut out, &format!("dec.{i}.ffn"));
        }
        ln(&mut out, "dec.ln_final");
        out
    }
}

/// Named parameter table in [`TransformerConfig::layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: TransformerConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Assembles a table, checking names and shapes against the config.
    pub fn from_parts(config: TransformerConfig, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        let names: Vec<String> = layout.into_iter().map(|(n, _)| n).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            config,
            names,
            tensors,
            index,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub(crate) fn position(&self, name: &str) -> usize {
        self.index[name]
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        let expected = self.n_values();
        if flat.len() != expected {
            return Err(ModelError::FlatLength {
                expected,
                got: flat.len(),
            });
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Normal(0, 1/sqrt(d_model)) weights; layer-norm gains 1 and biases 0.
pub fn init_params(cfg: &TransformerConfig, seed: u64) -> Result<ModelParams, ModelError> {
    cfg.validate()?;
    let mut rng = rng_for(seed, STREAM_INIT, 0);
    let normal = Normal::new(0.0, 1.0 / (cfg.d_model as f64).sqrt()).expect("positive std");
    let tensors = cfg
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".g") {
                vec![1.0; n]
            } else if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            Tensor::new(shape, data)
        })
        .collect::<Result<Vec<_>, _>>()?;
    ModelParams::from_parts(cfg.clone(), tensors)
}

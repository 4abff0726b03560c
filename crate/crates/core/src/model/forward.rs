use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelError, ModelParams};
use crate::synthlang::{EOS, PAD};
use crate::tensor::{AttentionLayout, Graph, Tensor, Var};

const LN_EPS: f64 = 1e-6;

/// One teacher-forced pair of token sequences.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

/// Encoder hidden states of one sequence; `mask[i]` is false at pads.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStates {
    pub hidden: Tensor,
    pub mask: Vec<bool>,
}

/// Sequences right-padded to a common length.
struct Packed {
    ids: Vec<usize>,
    batch: usize,
    len: usize,
    lens: Vec<usize>,
}

fn pack<S: AsRef<[usize]>>(seqs: &[S], p: &ModelParams) -> Result<Packed, ModelError> {
    let cfg = p.config();
    if seqs.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let lens: Vec<usize> = seqs.iter().map(|s| s.as_ref().len()).collect();
    let len = *lens.iter().max().expect("nonempty");
    if lens.contains(&0) {
        return Err(ModelError::EmptySequence);
    }
    if len > cfg.max_len {
        return Err(ModelError::Overlength { len, max: cfg.max_len });
    }
    let mut ids = vec![PAD; seqs.len() * len];
    for (b, s) in seqs.iter().enumerate() {
        for (i, &id) in s.as_ref().iter().enumerate() {
            if id >= cfg.vocab_size {
                return Err(ModelError::UnknownToken {
                    id,
                    vocab: cfg.vocab_size,
                });
            }
            ids[b * len + i] = id;
        }
    }
    Ok(Packed {
        ids,
        batch: seqs.len(),
        len,
        lens,
    })
}

fn sinusoids(batch: usize, len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(batch * len * d);
    for _ in 0..batch {
        for pos in 0..len {
            for i in 0..d {
                let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
                let angle = pos as f64 * freq;
                data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
    }
    Tensor::new(vec![batch * len, d], data).expect("shape")
}

struct Net<'a> {
    g: Graph,
    p: &'a ModelParams,
    vars: Vec<Var>,
    dropout: Option<(ChaCha8Rng, f64)>,
}

impl<'a> Net<'a> {
    fn new(p: &'a ModelParams, trainable: bool, dropout_seed: Option<u64>) -> Self {
        let mut g = Graph::new();
        let vars = p
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let rate = p.config().dropout_rate;
        let dropout = dropout_seed
            .filter(|_| rate > 0.0)
            .map(|s| (ChaCha8Rng::seed_from_u64(s), rate));
        Self { g, p, vars, dropout }
    }

    fn w(&self, name: &str) -> Var {
        self.vars[self.p.position(name)]
    }

    fn drop(&mut self, x: Var) -> Result<Var, ModelError> {
        let Some((rng, rate)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - *rate);
        let mask = (0..self.g.value(x).len())
            .map(|_| if rng.random_bool(*rate) { 0.0 } else { keep })
            .collect();
        Ok(self.g.dropout(x, mask)?)
    }

    fn ln(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let (gain, bias) = (self.w(&format!("{prefix}.g")), self.w(&format!("{prefix}.b")));
        Ok(self.g.layer_norm(x, gain, bias, LN_EPS)?)
    }

    fn embed(&mut self, packed: &Packed) -> Result<Var, ModelError> {
        let d = self.p.config().d_model;
        let e = self.g.embedding(self.w("embed"), &packed.ids)?;
        let e = self.g.scale(e, (d as f64).sqrt());
        let pe = self.g.constant(sinusoids(packed.batch, packed.len, d));
        let x = self.g.add(e, pe)?;
        self.drop(x)
    }

    fn attention(&mut self, xq: Var, xkv: Var, prefix: &str, layout: AttentionLayout) -> Result<Var, ModelError> {
        let q = self.g.matmul(xq, self.w(&format!("{prefix}.q")))?;
        let k = self.g.matmul(xkv, self.w(&format!("{prefix}.k")))?;
        let v = self.g.matmul(xkv, self.w(&format!("{prefix}.v")))?;
        let a = self.g.attention(q, k, v, layout)?;
        Ok(self.g.matmul(a, self.w(&format!("{prefix}.o")))?)
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let h = self.g.matmul(x, self.w(&format!("{prefix}.wi")))?;
        let h = self.g.relu(h);
        Ok(self.g.matmul(h, self.w(&format!("{prefix}.wo")))?)
    }

    fn residual(&mut self, x: Var, branch: Var) -> Result<Var, ModelError> {
        let b = self.drop(branch)?;
        Ok(self.g.add(x, b)?)
    }

    /// Residual stream after `layer` blocks; `layer == n_enc_layers` also
    /// applies the final layer norm.
    fn encoder(&mut self, src: &Packed, layer: usize) -> Result<Var, ModelError> {
        let n_layers = self.p.config().n_enc_layers;
        let key_mask: Vec<bool> = src.ids.iter().map(|&id| id != PAD).collect();
        let layout = AttentionLayout {
            batch: src.batch,
            q_len: src.len,
            k_len: src.len,
            n_heads: self.p.config().n_heads,
            key_mask,
            causal: false,
        };
        let mut x = self.embed(src)?;
        for i in 0..layer.min(n_layers) {
            let h = self.ln(x, &format!("enc.{i}.ln_attn"))?;
            let a = self.attention(h, h, &format!("enc.{i}.attn"), layout.clone())?;
            x = self.residual(x, a)?;
            let h = self.ln(x, &format!("enc.{i}.ln_ffn"))?;
            let f = self.ffn(h, &format!("enc.{i}.ffn"))?;
            x = self.residual(x, f)?;
        }
        if layer == n_layers {
            x = self.ln(x, "enc.ln_final")?;
            x = self.drop(x)?;
        }
        Ok(x)
    }

    fn decoder(&mut self, enc: Var, src: &Packed, dec: &Packed) -> Result<Var, ModelError> {
        let cfg = self.p.config();
        let n_heads = cfg.n_heads;
        let mut self_mask = vec![false; dec.batch * dec.len];
        for (b, &l) in dec.lens.iter().enumerate() {
            self_mask[b * dec.len..b * dec.len + l].fill(true);
        }
        let self_layout = AttentionLayout {
            batch: dec.batch,
            q_len: dec.len,
            k_len: dec.len,
            n_heads,
            key_mask: self_mask,
            causal: true,
        };
        let cross_layout = AttentionLayout {
            batch: dec.batch,
            q_len: dec.len,
            k_len: src.len,
            n_heads,
            key_mask: src.ids.iter().map(|&id| id != PAD).collect(),
            causal: false,
        };
        let mut y = self.embed(dec)?;
        for i in 0..cfg.n_dec_layers {
            let h = self.ln(y, &format!("dec.{i}.ln_self"))?;
            let a = self.attention(h, h, &format!("dec.{i}.self"), self_layout.clone())?;
            y = self.residual(y, a)?;
            let h = self.ln(y, &format!("dec.{i}.ln_cross"))?;
            let a = self.attention(h, enc, &format!("dec.{i}.cross"), cross_layout.clone())?;
            y = self.residual(y, a)?;
            let h = self.ln(y, &format!("dec.{i}.ln_ffn"))?;
            let f = self.ffn(h, &format!("dec.{i}.ffn"))?;
            y = self.residual(y, f)?;
        }
        let y = self.ln(y, "dec.ln_final")?;
        self.drop(y)
    }

    /// Tied output projection with the T5 `d_model^-1/2` rescaling.
    fn logits(&mut self, h: Var) -> Result<Var, ModelError> {
        let d = self.p.config().d_model as f64;
        let h = self.g.scale(h, d.powf(-0.5));
        Ok(self.g.matmul_bt(h, self.w("embed"))?)
    }

    /// Teacher-forced mean cross-entropy of a batch.
    fn loss(&mut self, batch: &[Example]) -> Result<Var, ModelError> {
        if batch.iter().any(|e| e.target.is_empty()) {
            return Err(ModelError::EmptySequence);
        }
        let inputs: Vec<&[usize]> = batch.iter().map(|e| e.input.as_slice()).collect();
        let shifted: Vec<Vec<usize>> = batch
            .iter()
            .map(|e| {
                let mut d = Vec::with_capacity(e.target.len());
                d.push(PAD);
                d.extend_from_slice(&e.target[..e.target.len().saturating_sub(1)]);
                d
            })
            .collect();
        let src = pack(&inputs, self.p)?;
        let dec = pack(&shifted, self.p)?;
        let mut labels = vec![None; dec.batch * dec.len];
        for (b, e) in batch.iter().enumerate() {
            for (i, &t) in e.target.iter().enumerate() {
                if t >= self.p.config().vocab_size {
                    return Err(ModelError::UnknownToken {
                        id: t,
                        vocab: self.p.config().vocab_size,
                    });
                }
                labels[b * dec.len + i] = Some(t);
            }
        }
        let enc = self.encoder(&src, self.p.config().n_enc_layers)?;
        let h = self.decoder(enc, &src, &dec)?;
        let logits = self.logits(h)?;
        Ok(self.g.cross_entropy(logits, &labels)?)
    }
}

/// Mean token-level negative log-likelihood with dropout off.
pub fn forward_loss(p: &ModelParams, batch: &[Example]) -> Result<f64, ModelError> {
    let mut net = Net::new(p, false, None);
    let loss = net.loss(batch)?;
    Ok(net.g.value(loss).item()?)
}

/// Loss and per-parameter gradients, in [`ModelParams::tensors`] order.
/// Dropout is applied when `dropout_seed` is given.
pub fn loss_and_grads(
    p: &ModelParams,
    batch: &[Example],
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Tensor>), ModelError> {
    let mut net = Net::new(p, true, dropout_seed);
    let loss = net.loss(batch)?;
    net.g.backward(loss)?;
    let value = net.g.value(loss).item()?;
    let grads = net.vars.iter().map(|&v| net.g.grad_tensor(v)).collect();
    Ok((value, grads))
}

/// Encoder states after `layer` blocks (`n_enc_layers` is the final,
/// normalized output) for each sequence of the batch.
pub fn encode_batch<S: AsRef<[usize]>>(
    p: &ModelParams,
    seqs: &[S],
    layer: usize,
) -> Result<Vec<EncoderStates>, ModelError> {
    let n_layers = p.config().n_enc_layers;
    if layer > n_layers {
        return Err(ModelError::InvalidLayer { layer, n_layers });
    }
    let src = pack(seqs, p)?;
    let mut net = Net::new(p, false, None);
    let enc = net.encoder(&src, layer)?;
    let hidden = net.g.value(enc);
    let d = p.config().d_model;
    Ok(seqs
        .iter()
        .enumerate()
        .map(|(b, s)| {
            let s = s.as_ref();
            let start = b * src.len * d;
            EncoderStates {
                hidden: Tensor::new(vec![s.len(), d], hidden.data()[start..start + s.len() * d].to_vec())
                    .expect("shape"),
                mask: s.iter().map(|&id| id != PAD).collect(),
            }
        })
        .collect())
}

/// Final-layer encoder states of one sequence.
pub fn encode(p: &ModelParams, ids: &[usize]) -> Result<EncoderStates, ModelError> {
    let mut out = encode_batch(p, &[ids], p.config().n_enc_layers)?;
    Ok(out.pop().expect("one sequence"))
}

/// Mean of the hidden states at unmasked positions.
pub fn mean_pool(es: &EncoderStates) -> Result<Vec<f64>, ModelError> {
    let d = es.hidden.cols();
    let mut sum = vec![0.0; d];
    let mut count = 0usize;
    for (i, &valid) in es.mask.iter().enumerate() {
        if valid {
            sum.iter_mut().zip(es.hidden.row(i)).for_each(|(s, h)| *s += h);
            count += 1;
        }
    }
    if count == 0 {
        return Err(ModelError::AllMasked);
    }
    sum.iter_mut().for_each(|s| *s /= count as f64);
    Ok(sum)
}

/// Argmax with ties going to the lowest index.
pub(super) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding for each input; a sequence stops at eos (not included
/// in the output), after `max_new` tokens, or when the decoder reaches
/// `max_len`.
pub fn greedy_generate_batch<S: AsRef<[usize]>>(
    p: &ModelParams,
    inputs: &[S],
    max_new: usize,
) -> Result<Vec<Vec<usize>>, ModelError> {
    let src = pack(inputs, p)?;
    let enc_value = {
        let mut net = Net::new(p, false, None);
        let enc = net.encoder(&src, p.config().n_enc_layers)?;
        net.g.value(enc).clone()
    };
    let batch = src.batch;
    let mut prefixes: Vec<Vec<usize>> = vec![vec![PAD]; batch];
    let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); batch];
    let mut done = vec![false; batch];
    let steps = max_new.min(p.config().max_len);
    for _ in 0..steps {
        let live: Vec<usize> = (0..batch).filter(|&b| !done[b]).collect();
        if live.is_empty() {
            break;
        }
        let mut net = Net::new(p, false, None);
        let enc = net.g.constant(enc_value.clone());
        let dec = pack(&prefixes, p)?;
        let h = net.decoder(enc, &src, &dec)?;
        let last: Vec<usize> = (0..batch).map(|b| b * dec.len + dec.len - 1).collect();
        let h_last = net.g.embedding(h, &last)?;
        let logits = net.logits(h_last)?;
        let values = net.g.value(logits);
        for b in live {
            let tok = argmax(values.row(b));
            if tok == EOS {
                done[b] = true;
            } else {
                outputs[b].push(tok);
            }
        }
        for (prefix, out) in prefixes.iter_mut().zip(&outputs) {
            prefix.truncate(1);
            prefix.extend_from_slice(out);
            // finished rows keep a fixed-length prefix so the batch stays rectangular
            prefix.resize(dec.len + 1, PAD);
        }
    }
    Ok(outputs)
}

pub fn greedy_generate(p: &ModelParams, input: &[usize], max_new: usize) -> Result<Vec<usize>, ModelError> {
    Ok(greedy_generate_batch(p, &[input], max_new)?
        .pop()
        .expect("one sequence"))
}

use rayon::prelude::*;

use super::{LayerKind, TinyModel, RMSNORM_EPS};
use crate::tensor::{linear, Matrix};
use crate::{Error, Result};

/// Observer of the activations entering each quantizable layer:
/// `(layer_index, n_rows, rows x in_features values)`.
pub type ActivationProbe<'a> = dyn FnMut(usize, usize, &[f32]) + 'a;

fn rmsnorm_rows(x: &[f32], d: usize, gain: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let inv = 1.0 / (ms + RMSNORM_EPS).sqrt();
        out.extend(row.iter().zip(gain).map(|(v, g)| v * inv * g));
    }
    out
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

impl TinyModel {
    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.spec.max_seq_len {
            return Err(Error::Shape(format!(
                "sequence length {} outside [1, {}]",
                tokens.len(),
                self.spec.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.spec.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.spec.vocab_size,
            });
        }
        Ok(())
    }

    /// Next-token logits for every position, `len x vocab_size`.
    pub fn forward_logits(&self, tokens: &[u32]) -> Result<Matrix> {
        self.forward_probed(tokens, &mut |_, _, _| {})
    }

    /// Forward pass that reports the input of every quantizable layer.
    pub fn forward_probed(&self, tokens: &[u32], probe: &mut ActivationProbe<'_>) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let d = self.spec.d_model;
        let n_heads = self.spec.n_heads;
        let hd = self.spec.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();

        let mut x = Vec::with_capacity(n * d);
        for (p, &t) in tokens.iter().enumerate() {
            let te = self.tok_embedding.row(t as usize);
            let pe = self.pos_embedding.row(p);
            x.extend(te.iter().zip(pe).map(|(a, b)| a + b));
        }

        for (bi, block) in self.blocks.iter().enumerate() {
            let base = bi * LayerKind::ALL.len();
            let h = rmsnorm_rows(&x, d, &block.attn_norm);
            probe(base, n, &h);
            probe(base + 1, n, &h);
            probe(base + 2, n, &h);
            let q = linear(&h, n, &block.wq);
            let k = linear(&h, n, &block.wk);
            let v = linear(&h, n, &block.wv);

            let mut attn = vec![0.0f32; n * d];
            let mut scores = vec![0.0f32; n];
            for head in 0..n_heads {
                let off = head * hd;
                for i in 0..n {
                    let qi = &q[i * d + off..i * d + off + hd];
                    let mut max = f32::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &k[j * d + off..j * d + off + hd];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut denom = 0.0f32;
                    for s in &mut scores[..=i] {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                    let out = &mut attn[i * d + off..i * d + off + hd];
                    for j in 0..=i {
                        let w = scores[j] / denom;
                        let vj = &v[j * d + off..j * d + off + hd];
                        for (o, vv) in out.iter_mut().zip(vj) {
                            *o += w * vv;
                        }
                    }
                }
            }
            probe(base + 3, n, &attn);
            let o = linear(&attn, n, &block.wo);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }

            let h2 = rmsnorm_rows(&x, d, &block.ffn_norm);
            probe(base + 4, n, &h2);
            probe(base + 5, n, &h2);
            let g = linear(&h2, n, &block.w_gate);
            let u = linear(&h2, n, &block.w_up);
            let m: Vec<f32> = g.iter().zip(&u).map(|(&gv, &uv)| silu(gv) * uv).collect();
            probe(base + 6, n, &m);
            let down = linear(&m, n, &block.w_down);
            for (xi, di) in x.iter_mut().zip(&down) {
                *xi += di;
            }
        }

        let h = rmsnorm_rows(&x, d, &self.final_norm);
        let logits = linear(&h, n, &self.lm_head);
        Matrix::from_vec(n, self.spec.vocab_size, logits)
    }
}

/// Sum of `log P(x_{i+1} | x_<=i)` over every predicted position of one
/// sequence, with a max-shifted log-softmax.
fn sequence_log_likelihood(seq: &[u32], logits: &Matrix) -> (f64, usize) {
    let mut total = 0.0f64;
    for pos in 0..seq.len().saturating_sub(1) {
        let row = logits.row(pos);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = row.iter().map(|&l| (l as f64 - max).exp()).sum::<f64>().ln() + max;
        total += row[seq[pos + 1] as usize] as f64 - lse;
    }
    (total, seq.len().saturating_sub(1))
}

/// Perplexity of arbitrary next-token logits: `exp(-(1/N) sum log p)` over
/// all predicted tokens. `logits_of(seq)` must return `len x vocab` logits.
pub fn perplexity_from_logits<F>(sequences: &[Vec<u32>], vocab: usize, logits_of: F) -> Result<f64>
where
    F: Fn(&[u32]) -> Result<Matrix> + Sync,
{
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus("evaluation split"));
    }
    let parts: Vec<(f64, usize)> = sequences
        .par_iter()
        .map(|seq| {
            let logits = logits_of(seq)?;
            if logits.rows != seq.len() || logits.cols != vocab {
                return Err(Error::Shape(format!(
                    "logits {}x{} for a sequence of {} over vocab {vocab}",
                    logits.rows,
                    logits.cols,
                    seq.len()
                )));
            }
            if let Some(&t) = seq.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::TokenOutOfRange { token: t, vocab });
            }
            Ok(sequence_log_likelihood(seq, &logits))
        })
        .collect::<Result<_>>()?;
    // fixed-order reduction keeps the result independent of scheduling
    let (mut ll, mut n) = (0.0f64, 0usize);
    for (l, c) in parts {
        ll += l;
        n += c;
    }
    if n == 0 {
        return Err(Error::EmptyCorpus("no predicted tokens (all sequences shorter than 2)"));
    }
    Ok((-ll / n as f64).exp())
}

/// Perplexity of `model` over `sequences`.
pub fn perplexity(model: &TinyModel, sequences: &[Vec<u32>]) -> Result<f64> {
    perplexity_from_logits(sequences, model.spec.vocab_size, |s| model.forward_logits(s))
}

use std::collections::HashSet;
use std::path::Path;

use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::rng::substream;
use crate::{Error, Result};

/// Synthetic token corpus with disjoint calibration and evaluation splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab_size: usize,
    pub calibration: Vec<Vec<u32>>,
    pub evaluation: Vec<Vec<u32>>,
}

impl Corpus {
    /// Draws `n_calibration + n_evaluation` sequences of `seq_len` tokens
    /// from a Zipf law over the vocabulary (rank 1 = token 0). Evaluation
    /// sequences identical to a calibration sequence are redrawn.
    pub fn synthetic(
        vocab_size: usize,
        n_calibration: usize,
        n_evaluation: usize,
        seq_len: usize,
        zipf_exponent: f64,
        seed: u64,
    ) -> Result<Self> {
        if vocab_size < 2 || seq_len == 0 {
            return Err(Error::Config("corpus needs vocab >= 2 and seq_len >= 1".into()));
        }
        let zipf = Zipf::new(vocab_size as f64, zipf_exponent)
            .map_err(|e| Error::Config(format!("zipf distribution: {e}")))?;
        let draw = |rng: &mut crate::rng::Rng| -> Vec<u32> {
            (0..seq_len).map(|_| zipf.sample(rng) as u32 - 1).collect()
        };
        let mut rng = substream(seed, "corpus.calibration");
        let calibration: Vec<Vec<u32>> = (0..n_calibration).map(|_| draw(&mut rng)).collect();
        let seen: HashSet<&Vec<u32>> = calibration.iter().collect();
        let mut rng = substream(seed, "corpus.evaluation");
        let mut evaluation = Vec::with_capacity(n_evaluation);
        while evaluation.len() < n_evaluation {
            let s = draw(&mut rng);
            if !seen.contains(&s) {
                evaluation.push(s);
            }
        }
        Ok(Self {
            vocab_size,
            calibration,
            evaluation,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for s in self.calibration.iter().chain(&self.evaluation) {
            if let Some(&t) = s.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: self.vocab_size,
                });
            }
        }
        let cal: HashSet<&Vec<u32>> = self.calibration.iter().collect();
        if self.evaluation.iter().any(|s| cal.contains(s)) {
            return Err(Error::Invalid("evaluation split overlaps calibration split".into()));
        }
        Ok(())
    }
}

/// Writes one sequence per line as space-separated decimal ids.
pub fn save_sequences(seqs: &[Vec<u32>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for s in seqs {
        let line: Vec<String> = s.iter().map(u32::to_string).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_sequences(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0u64;
    let mut out = Vec::new();
    for line in text.lines() {
        if !line.trim().is_empty() {
            let seq = line
                .split_whitespace()
                .map(|t| t.parse::<u32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse("corpus", offset, format!("bad token id: {e}")))?;
            out.push(seq);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

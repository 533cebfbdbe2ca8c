use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

pub type Dataset = Vec<Example>;

/// Binary majority vote over token classes: a token belongs to class 1 when
/// its id is in the upper half of the vocabulary, and the label is the class
/// held by most tokens. Odd lengths make the label unambiguous.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MajorityTask {
    pub vocab_size: usize,
    pub seq_len: usize,
}

impl MajorityTask {
    pub fn new(vocab_size: usize, seq_len: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Config("majority task needs a vocabulary of at least 2".into()));
        }
        if seq_len.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "majority task needs an odd length, got {seq_len}"
            )));
        }
        Ok(Self { vocab_size, seq_len })
    }

    pub fn label_of(&self, tokens: &[usize]) -> usize {
        let high = tokens.iter().filter(|&&t| t >= self.vocab_size / 2).count();
        usize::from(2 * high > tokens.len())
    }

    /// `n` examples. Half of them are drawn with a near-even class split so
    /// the decision boundary is well represented.
    pub fn generate(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = Rng::new(seed);
        let half = self.vocab_size / 2;
        (0..n)
            .map(|i| {
                let tokens: Vec<usize> = if i % 2 == 0 {
                    (0..self.seq_len).map(|_| rng.below(self.vocab_size)).collect()
                } else {
                    let high = self.seq_len / 2 + rng.below(2);
                    let mut t: Vec<usize> = (0..self.seq_len)
                        .map(|p| {
                            if p < high {
                                half + rng.below(self.vocab_size - half)
                            } else {
                                rng.below(half)
                            }
                        })
                        .collect();
                    rng.shuffle(&mut t);
                    t
                };
                let label = self.label_of(&tokens);
                Example { tokens, label }
            })
            .collect()
    }
}

use crate::error::{Error, Result};

use super::config::TokenId;

/// A (prompt, target) pair from the private store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl Example {
    pub fn new(prompt: Vec<TokenId>, target: Vec<TokenId>) -> Self {
        Example { prompt, target }
    }
}

/// `bs` next-token sequences of fixed length `l`, stacked row-wise. The loss
/// only covers positions that predict a target token; padding is masked out.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub mask: Vec<bool>,
    pub bs: usize,
    pub seq_len: usize,
}

impl TrainingBatch {
    /// Builds a batch; `seq_len` is the padded input length (prompt + target − 1).
    pub fn from_examples(examples: &[Example], seq_len: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::input("empty batch"));
        }
        if seq_len == 0 {
            return Err(Error::input("sequence length must be >= 1"));
        }
        let bs = examples.len();
        let mut inputs = Vec::with_capacity(bs * seq_len);
        let mut targets = Vec::with_capacity(bs * seq_len);
        let mut mask = Vec::with_capacity(bs * seq_len);
        for (i, ex) in examples.iter().enumerate() {
            if ex.prompt.is_empty() || ex.target.is_empty() {
                return Err(Error::input(format!("example {i} has an empty prompt or target")));
            }
            let seq: Vec<TokenId> = ex.prompt.iter().chain(&ex.target).copied().collect();
            let n = seq.len() - 1;
            if n > seq_len {
                return Err(Error::input(format!(
                    "example {i} needs {n} positions, batch length is {seq_len}"
                )));
            }
            for t in 0..seq_len {
                if t < n {
                    inputs.push(seq[t]);
                    targets.push(seq[t + 1]);
                    mask.push(t + 1 >= ex.prompt.len());
                } else {
                    inputs.push(0);
                    targets.push(0);
                    mask.push(false);
                }
            }
        }
        Ok(TrainingBatch {
            inputs,
            targets,
            mask,
            bs,
            seq_len,
        })
    }

    /// Shortest length that fits every example.
    pub fn fitting_len(examples: &[Example]) -> usize {
        examples
            .iter()
            .map(|e| e.prompt.len() + e.target.len() - 1)
            .max()
            .unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        self.bs * self.seq_len
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_prompt_and_padding() {
        let ex = [Example::new(vec![5, 6], vec![7, 8]), Example::new(vec![1], vec![2])];
        let b = TrainingBatch::from_examples(&ex, 3).unwrap();
        assert_eq!(b.inputs, vec![5, 6, 7, 1, 0, 0]);
        assert_eq!(b.targets, vec![6, 7, 8, 2, 0, 0]);
        assert_eq!(b.mask, vec![false, true, true, true, false, false]);
        assert_eq!(TrainingBatch::fitting_len(&ex), 3);
        assert!(TrainingBatch::from_examples(&ex, 2).is_err());
    }
}

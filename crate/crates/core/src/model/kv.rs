use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Per-layer cache of rotated keys and values, all layers advancing in lockstep.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    d: usize,
    max_seq: usize,
    seq_so_far: usize,
}

impl KvCache {
    pub fn new(n_layers: usize, d: usize, max_seq: usize) -> Self {
        KvCache {
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            d,
            max_seq,
            seq_so_far: 0,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_so_far
    }

    pub fn max_seq(&self) -> usize {
        self.max_seq
    }

    pub fn remaining(&self) -> usize {
        self.max_seq - self.seq_so_far
    }

    pub fn ensure_room(&self, extra: usize) -> Result<()> {
        if self.seq_so_far + extra > self.max_seq {
            return Err(Error::Capacity(format!(
                "KV cache holds {} of {} positions, cannot append {extra}",
                self.seq_so_far, self.max_seq
            )));
        }
        Ok(())
    }

    pub(crate) fn append(&mut self, layer: usize, k: &Matrix, v: &Matrix) {
        debug_assert_eq!(k.cols(), self.d);
        self.keys[layer].extend_from_slice(k.data());
        self.values[layer].extend_from_slice(v.data());
    }

    /// Marks `n` new positions as committed after every layer appended them.
    pub(crate) fn advance(&mut self, n: usize) {
        self.seq_so_far += n;
        debug_assert!(self
            .keys
            .iter()
            .all(|k| k.len() == self.seq_so_far * self.d));
    }

    /// Drops any rows appended past the committed length (after a failed pass).
    pub(crate) fn rollback(&mut self) {
        let keep = self.seq_so_far * self.d;
        for k in &mut self.keys {
            k.truncate(keep);
        }
        for v in &mut self.values {
            v.truncate(keep);
        }
    }

    pub(crate) fn layer(&self, layer: usize) -> (&[f32], &[f32]) {
        (&self.keys[layer], &self.values[layer])
    }

    pub fn clear(&mut self) {
        self.seq_so_far = 0;
        self.rollback();
    }
}

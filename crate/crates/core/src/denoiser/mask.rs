use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::AttnSpan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    /// X sees everything, each reference sees only itself.
    Semi,
    /// Every token sees every token.
    Full,
    /// Semi, except the first reference also reads X. Negative control.
    Corrupted,
}

/// Block attention mask over `[X; R_1; …; R_K]`, defined by segment lengths
/// alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemiAttentionMask {
    lengths: Vec<usize>,
    offsets: Vec<usize>,
    kind: MaskKind,
}

impl SemiAttentionMask {
    pub fn new(segment_lengths: &[usize]) -> Result<Self> {
        Self::with_kind(segment_lengths, MaskKind::Semi)
    }

    pub fn with_kind(segment_lengths: &[usize], kind: MaskKind) -> Result<Self> {
        if segment_lengths.is_empty() {
            return Err(Error::EmptySegment("no segments".into()));
        }
        if let Some(i) = segment_lengths.iter().position(|&n| n == 0) {
            return Err(Error::EmptySegment(format!("segment {i} has no tokens")));
        }
        let mut offsets = Vec::with_capacity(segment_lengths.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &n in segment_lengths {
            acc += n;
            offsets.push(acc);
        }
        Ok(Self {
            lengths: segment_lengths.to_vec(),
            offsets,
            kind,
        })
    }

    pub fn segment_lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    /// Total sequence length.
    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn segment_of(&self, i: usize) -> usize {
        self.offsets.partition_point(|&o| o <= i) - 1
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        let (sq, sk) = (self.segment_of(q), self.segment_of(k));
        match self.kind {
            MaskKind::Full => true,
            MaskKind::Semi => sq == 0 || sq == sk,
            MaskKind::Corrupted => sq == 0 || sq == sk || (sq == 1 && sk == 0),
        }
    }

    /// Row-major `L × L` boolean matrix of [`Self::allowed`].
    pub fn to_dense(&self) -> Vec<bool> {
        let n = self.len();
        (0..n * n).map(|i| self.allowed(i / n, i % n)).collect()
    }

    /// The same predicate as contiguous query/key rectangles.
    pub fn spans(&self) -> Vec<AttnSpan> {
        let n = self.len();
        if self.kind == MaskKind::Full {
            return AttnSpan::full(n, n);
        }
        let o = &self.offsets;
        let mut spans = vec![AttnSpan {
            queries: 0..o[1],
            keys: 0..n,
        }];
        for s in 1..self.lengths.len() {
            let start = if self.kind == MaskKind::Corrupted && s == 1 { 0 } else { o[s] };
            spans.push(AttnSpan {
                queries: o[s]..o[s + 1],
                keys: start..o[s + 1],
            });
        }
        spans
    }
}

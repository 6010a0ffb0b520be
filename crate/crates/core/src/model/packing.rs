use crate::error::{domain, Result};

/// Several sequences that share a common token prefix, laid out as one row
/// block: `[shared prefix][tail 0][tail 1]...`.
///
/// Row `t` attends to the shared prefix and to the rows of its own tail up to
/// itself, so every tail sees exactly what it would see as a standalone
/// sequence, while the prefix is computed once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packing {
    pub tokens: Vec<usize>,
    /// Logical position of each row inside its own sequence.
    pub positions: Vec<usize>,
    /// First row of the segment each row belongs to (0 for prefix rows).
    pub seg_start: Vec<usize>,
    /// Rows `0..shared` are visible to every segment.
    pub shared: usize,
    /// Row of each segment's first tail token.
    pub segments: Vec<usize>,
    key_offsets: Vec<usize>,
}

impl Packing {
    /// One ordinary causal sequence.
    pub fn single(tokens: &[usize]) -> Self {
        let n = tokens.len();
        Self::build(tokens.to_vec(), (0..n).collect(), vec![0; n], 0, vec![0])
    }

    /// Packs `seqs`, sharing their first `shared` tokens, which must agree.
    pub fn shared_prefix(seqs: &[&[usize]], shared: usize) -> Result<Self> {
        let first = seqs.first().ok_or_else(|| domain("packing needs at least one sequence"))?;
        if seqs.iter().any(|s| s.len() <= shared || s[..shared] != first[..shared]) {
            return Err(domain("sequences do not share the requested prefix"));
        }
        let mut tokens = first[..shared].to_vec();
        let mut positions: Vec<usize> = (0..shared).collect();
        let mut seg_start = vec![0; shared];
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            let start = tokens.len();
            segments.push(start);
            for (p, &tok) in s.iter().enumerate().skip(shared) {
                tokens.push(tok);
                positions.push(p);
                seg_start.push(start);
            }
        }
        Ok(Self::build(tokens, positions, seg_start, shared, segments))
    }

    fn build(
        tokens: Vec<usize>,
        positions: Vec<usize>,
        seg_start: Vec<usize>,
        shared: usize,
        segments: Vec<usize>,
    ) -> Self {
        let mut key_offsets = Vec::with_capacity(tokens.len() + 1);
        let mut acc = 0;
        key_offsets.push(0);
        for t in 0..tokens.len() {
            let s = seg_start[t];
            acc += shared.min(s) + (t - s + 1);
            key_offsets.push(acc);
        }
        Self {
            tokens,
            positions,
            seg_start,
            shared,
            segments,
            key_offsets,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Total attention entries per head.
    pub fn total_keys(&self) -> usize {
        *self.key_offsets.last().expect("offsets start at 0")
    }

    pub(crate) fn key_offset(&self, t: usize) -> usize {
        self.key_offsets[t]
    }

    /// Rows visible from row `t`, in order: shared prefix then own segment.
    pub(crate) fn key_ranges(&self, t: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let s = self.seg_start[t];
        (0..self.shared.min(s), s..t + 1)
    }

    /// Row holding logical position `pos` of segment `seg`.
    pub fn row(&self, seg: usize, pos: usize) -> usize {
        if pos < self.shared {
            pos
        } else {
            self.segments[seg] + (pos - self.shared)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_is_plain_causal() {
        let p = Packing::single(&[5, 6, 7]);
        assert_eq!(p.key_ranges(2), (0..0, 0..3));
        assert_eq!(p.total_keys(), 6);
    }

    #[test]
    fn shared_rows_and_segments() {
        let a = [1, 2, 3, 4];
        let b = [1, 2, 9];
        let p = Packing::shared_prefix(&[&a, &b], 2).unwrap();
        assert_eq!(p.tokens, vec![1, 2, 3, 4, 9]);
        assert_eq!(p.positions, vec![0, 1, 2, 3, 2]);
        assert_eq!(p.key_ranges(4), (0..2, 4..5));
        assert_eq!(p.key_ranges(3), (0..2, 2..4));
        assert_eq!(p.row(1, 2), 4);
        assert_eq!(p.row(1, 1), 1);
        assert!(Packing::shared_prefix(&[&a, &[1, 3, 3]], 2).is_err());
        assert!(Packing::shared_prefix(&[&a, &[1, 2]], 2).is_err());
    }
}

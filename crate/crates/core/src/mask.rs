//! Boolean attention masks and the builders used by the encoder passes and
//! the wait-k decoder.

use crate::boundary::BoundarySet;
use crate::error::{Error, Result};

/// `rows × cols` visibility matrix; `allowed(i, j)` means query `i` may
/// attend to key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            allow: vec![true; rows * cols],
        }
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            allow: vec![false; rows * cols],
        }
    }

    /// Stacks per-query visibility rows.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged mask rows".into()));
        }
        Ok(AttentionMask {
            rows: rows.len(),
            cols,
            allow: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.allow[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.cols..(i + 1) * self.cols]
    }

    pub fn count_allowed(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }

    /// Contract check used before attention: no query may be fully masked.
    pub fn check_rows_nonempty(&self) -> Result<()> {
        for i in 0..self.rows {
            if !self.row(i).iter().any(|&a| a) {
                return Err(Error::Contract(format!("attention mask row {i} is fully masked")));
            }
        }
        Ok(())
    }
}

/// Lower-triangular mask: frame `i` sees frames `0..=i`.
pub fn build_causal_mask(n: usize) -> AttentionMask {
    let mut mask = AttentionMask::empty(n, n);
    for i in 0..n {
        for j in 0..=i {
            mask.set(i, j, true);
        }
    }
    mask
}

/// Re-encode-once mask: a frame inside a completed segment sees every frame
/// up to that segment's boundary; frames after the last boundary keep causal
/// visibility.
pub fn build_reencode_once_mask(boundaries: &BoundarySet, n: usize) -> Result<AttentionMask> {
    boundaries.validate(n)?;
    let mut mask = build_causal_mask(n);
    let mut start = 0;
    for &end in &boundaries.frames() {
        for i in start..end {
            for j in 0..end {
                mask.set(i, j, true);
            }
        }
        start = start.max(end);
    }
    Ok(mask)
}

/// Number of source frames the decoder may see when writing target position
/// `t` (1-based) under wait-`k`.
pub fn waitk_visible_frames(
    k: usize,
    boundaries: &BoundarySet,
    t: usize,
    source_finished: bool,
    n: usize,
) -> Result<usize> {
    if k == 0 || t == 0 {
        return Err(Error::Contract(format!("wait-k needs k ≥ 1 and t ≥ 1, got k={k}, t={t}")));
    }
    if source_finished {
        return Ok(n);
    }
    let needed = t + k - 1;
    match boundaries.frames().get(needed - 1) {
        Some(&b) => Ok(b.min(n)),
        None => Err(Error::Policy(format!(
            "write of target {t} needs {needed} segments but only {} fired",
            boundaries.len()
        ))),
    }
}

/// Cross-attention visibility row for target position `t`.
pub fn build_waitk_cross_mask(
    k: usize,
    boundaries: &BoundarySet,
    t: usize,
    source_finished: bool,
    n: usize,
) -> Result<Vec<bool>> {
    let visible = waitk_visible_frames(k, boundaries, t, source_finished, n)?;
    Ok((0..n).map(|j| j < visible).collect())
}

/// Teacher-forced cross mask for `target_len` positions over a fully known
/// source: positions whose segment requirement exceeds the fired boundaries
/// see the whole source.
pub fn build_waitk_training_mask(
    k: usize,
    boundaries: &BoundarySet,
    target_len: usize,
    n: usize,
) -> Result<AttentionMask> {
    boundaries.validate(n)?;
    let rows = (1..=target_len)
        .map(|t| {
            let finished = t + k - 1 > boundaries.len();
            build_waitk_cross_mask(k, boundaries, t, finished, n)
        })
        .collect::<Result<Vec<_>>>()?;
    AttentionMask::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(frames: &[usize]) -> BoundarySet {
        BoundarySet::from_frames(frames, 1.0)
    }

    #[test]
    fn causal_mask_shapes() {
        assert_eq!(build_causal_mask(1), AttentionMask::full(1, 1));
        let m3 = build_causal_mask(3);
        assert_eq!(m3.count_allowed(), 6);
        assert!(m3.allowed(2, 0) && !m3.allowed(0, 2));
        let m4 = build_causal_mask(4);
        assert!(m4.row(3).iter().all(|&a| a));
    }

    #[test]
    fn reencode_mask_cases() {
        assert_eq!(build_reencode_once_mask(&set(&[4]), 4).unwrap(), AttentionMask::full(4, 4));
        assert_eq!(build_reencode_once_mask(&set(&[]), 4).unwrap(), build_causal_mask(4));

        let m = build_reencode_once_mask(&set(&[3, 5]), 5).unwrap();
        for i in 0..3 {
            assert_eq!(m.row(i), &[true, true, true, false, false]);
        }
        for i in 3..5 {
            assert!(m.row(i).iter().all(|&a| a));
        }

        let every: Vec<usize> = (1..=6).collect();
        let m = build_reencode_once_mask(&set(&every), 6).unwrap();
        assert_eq!(m, build_causal_mask(6));
        assert_eq!(m.count_allowed(), 21);
    }

    #[test]
    fn reencode_mask_tail_is_causal() {
        let m = build_reencode_once_mask(&set(&[2]), 5).unwrap();
        assert_eq!(m.row(2), &[true, true, true, false, false]);
        assert_eq!(m.row(4), &[true; 5]);
    }

    #[test]
    fn reencode_mask_rejects_non_monotone() {
        assert!(matches!(
            build_reencode_once_mask(&set(&[3, 2]), 5),
            Err(Error::Contract(_))
        ));
        assert!(build_reencode_once_mask(&set(&[6]), 5).is_err());
    }

    #[test]
    fn waitk_cross_rows() {
        let b = set(&[3, 5, 9]);
        let row = build_waitk_cross_mask(2, &b, 1, false, 10).unwrap();
        assert_eq!(row.iter().filter(|&&a| a).count(), 5);
        let b = set(&[4, 7]);
        let row = build_waitk_cross_mask(1, &b, 1, false, 10).unwrap();
        assert_eq!(row, (0..10).map(|j| j < 4).collect::<Vec<_>>());
        let row = build_waitk_cross_mask(5, &b, 3, true, 10).unwrap();
        assert!(row.iter().all(|&a| a));
        assert!(matches!(
            build_waitk_cross_mask(2, &b, 2, false, 10),
            Err(Error::Policy(_))
        ));
    }

    #[test]
    fn training_mask_opens_after_last_segment() {
        let b = set(&[3, 5]);
        let m = build_waitk_training_mask(1, &b, 3, 6).unwrap();
        assert_eq!(m.row(0).iter().filter(|&&a| a).count(), 3);
        assert_eq!(m.row(1).iter().filter(|&&a| a).count(), 5);
        assert_eq!(m.row(2).iter().filter(|&&a| a).count(), 6);
    }
}

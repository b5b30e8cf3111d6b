//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

pub mod gradcheck;
pub mod simul;

use waitk::Tensor;

/// One fired boundary from the scalar accumulator: 1-based frame, carried
/// remainder and the share of the firing frame inside the segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleFire {
    pub frame: usize,
    pub remainder: f64,
    pub within: f64,
}

/// Step-by-step integrate-and-fire: walk the frames, spend each weight on
/// the open segment until it completes, then start the next one.
pub fn if_oracle(w: &[f64], threshold: f64, tail: Option<f64>) -> (Vec<OracleFire>, Vec<Vec<f64>>) {
    let n = w.len();
    let mut fires = Vec::new();
    let mut rows = Vec::new();
    let mut open = vec![0.0; n];
    let mut acc = 0.0;
    for (j, &wj) in w.iter().enumerate() {
        let mut left = wj;
        while acc + left >= threshold {
            let need = threshold - acc;
            open[j] += need;
            left -= need;
            fires.push(OracleFire {
                frame: j + 1,
                remainder: left,
                within: need,
            });
            rows.push(std::mem::replace(&mut open, vec![0.0; n]));
            acc = 0.0;
        }
        acc += left;
        open[j] += left;
    }
    if let Some(fraction) = tail {
        if n > 0 && acc > 0.0 && acc >= fraction * threshold {
            fires.push(OracleFire {
                frame: n,
                remainder: 0.0,
                within: acc,
            });
            rows.push(open);
        }
    }
    (fires, rows)
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|x| x - z).collect()
}

/// `−log P(target)` by enumerating every frame-level path whose collapse
/// (merge repeats, drop blanks) is the target. Paths are extended one frame
/// at a time and abandoned as soon as their collapse stops being a prefix
/// of the target, which cannot exclude a valid path.
pub fn ctc_brute_force(logits: &Tensor, target: &[usize], blank: usize) -> f64 {
    let lp: Vec<Vec<f64>> = (0..logits.rows()).map(|i| log_softmax(logits.row(i))).collect();
    let classes = logits.cols();
    let mut total = 0.0f64;
    // (collapsed length, previous symbol, probability)
    fn walk(
        lp: &[Vec<f64>],
        t: usize,
        emitted: usize,
        prev: Option<usize>,
        p: f64,
        target: &[usize],
        blank: usize,
        classes: usize,
        total: &mut f64,
    ) {
        if t == lp.len() {
            if emitted == target.len() {
                *total += p;
            }
            return;
        }
        for c in 0..classes {
            let q = p * lp[t][c].exp();
            if c == blank {
                walk(lp, t + 1, emitted, None, q, target, blank, classes, total);
            } else if prev == Some(c) {
                walk(lp, t + 1, emitted, Some(c), q, target, blank, classes, total);
            } else if emitted < target.len() && target[emitted] == c {
                walk(lp, t + 1, emitted + 1, Some(c), q, target, blank, classes, total);
            }
        }
    }
    walk(&lp, 0, 0, None, 1.0, target, blank, classes, &mut total);
    -total.ln()
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest relative error between two gradients, with an absolute floor so
/// near-zero entries do not dominate.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Deterministic pseudo-random values in `[-scale, scale)`.
pub fn values(seed: u64, len: usize, scale: f64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

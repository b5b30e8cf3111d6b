//! Integrate-and-fire boundary prediction.
//!
//! Per-frame weights `w_i ∈ (0, 1)` come from a residual MLP over the
//! first-pass encoder states. They are accumulated along the stream; every
//! time the running sum crosses another multiple of the threshold a boundary
//! fires at that frame. The crossing frame's weight is split into the part
//! that completes the current segment (`within`) and the overshoot carried
//! into the next one (`remainder`). Segment embeddings are the weighted sums
//! of encoder states under those shares.
//!
//! The implementation works on cumulative sums: frame `i` owns the interval
//! `[C_{i-1}, C_i]` of accumulated weight and segment `j` owns
//! `[(j-1)T, jT]`; the alignment entry `A[j][i]` is their overlap. This
//! form yields the carried-remainder recursion exactly and differentiates
//! cleanly.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 1.0;
/// Residual accumulation at stream end that still fires a final boundary,
/// as a fraction of the threshold.
pub const DEFAULT_TAIL_FRACTION: f64 = 0.5;

/// Per-frame firing weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSequence(pub Vec<f64>);

impl WeightSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// One fired boundary. `frame` is 1-based: the segment ends after frame
/// `frame`, so frames `1..=frame` are complete.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub frame: usize,
    pub remainder: f64,
    pub within: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub threshold: f64,
    pub items: Vec<Boundary>,
}

impl BoundarySet {
    pub fn new(threshold: f64) -> Self {
        BoundarySet {
            threshold,
            items: Vec::new(),
        }
    }

    /// Boundaries at given frames with no carried remainder (static
    /// segmentation, tests).
    pub fn from_frames(frames: &[usize], threshold: f64) -> Self {
        BoundarySet {
            threshold,
            items: frames
                .iter()
                .map(|&frame| Boundary {
                    frame,
                    remainder: 0.0,
                    within: threshold,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn frames(&self) -> Vec<usize> {
        self.items.iter().map(|b| b.frame).collect()
    }

    pub fn push(&mut self, b: Boundary) {
        self.items.push(b);
    }

    /// Frames must be non-decreasing, at least 1 and at most `n`. A frame may
    /// repeat only when a single weight spans more than one threshold.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut prev = 0;
        for b in &self.items {
            if b.frame == 0 || b.frame < prev {
                return Err(Error::Contract(format!(
                    "boundary frames must be increasing and 1-based: {:?}",
                    self.frames()
                )));
            }
            if b.frame > n {
                return Err(Error::Contract(format!(
                    "boundary at frame {} beyond stream length {n}",
                    b.frame
                )));
            }
            prev = b.frame;
        }
        Ok(())
    }

    /// Frames read so far limit: boundaries with `frame ≤ n`.
    pub fn truncated(&self, n: usize) -> BoundarySet {
        BoundarySet {
            threshold: self.threshold,
            items: self.items.iter().copied().filter(|b| b.frame <= n).collect(),
        }
    }
}

/// Streaming accumulator: feed one weight per frame, collect fired
/// boundaries, and settle the tail at stream end.
#[derive(Clone, Debug)]
pub struct FireAccumulator {
    threshold: f64,
    cumulative: f64,
    fired: usize,
    frames: usize,
}

impl FireAccumulator {
    pub fn new(threshold: f64) -> Result<Self> {
        if threshold <= 0.0 || !threshold.is_finite() {
            return Err(Error::Config(format!("threshold must be positive, got {threshold}")));
        }
        Ok(FireAccumulator {
            threshold,
            cumulative: 0.0,
            fired: 0,
            frames: 0,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn fired(&self) -> usize {
        self.fired
    }

    pub fn cumulative(&self) -> f64 {
        self.cumulative
    }

    /// Accumulation not yet assigned to a fired boundary.
    pub fn residual(&self) -> f64 {
        self.cumulative - self.fired as f64 * self.threshold
    }

    /// Adds the next frame's weight and returns the boundaries it fires.
    pub fn push(&mut self, weight: f64) -> Result<Vec<Boundary>> {
        if !weight.is_finite() || weight < 0.0 {
            return Err(Error::Data(format!("firing weight must be finite and ≥ 0, got {weight}")));
        }
        let before = self.cumulative;
        self.cumulative += weight;
        self.frames += 1;
        let mut out = Vec::new();
        while self.cumulative >= (self.fired + 1) as f64 * self.threshold {
            let lo = self.fired as f64 * self.threshold;
            let hi = lo + self.threshold;
            out.push(Boundary {
                frame: self.frames,
                remainder: self.cumulative - hi,
                within: hi - before.max(lo),
            });
            self.fired += 1;
        }
        Ok(out)
    }

    /// At stream end, fires a final boundary at the last frame when the
    /// residual reaches `fraction · T`.
    pub fn finalize_tail(&mut self, fraction: f64) -> Option<Boundary> {
        let residual = self.residual();
        if self.frames == 0 || residual <= 0.0 || residual < fraction * self.threshold {
            return None;
        }
        self.fired += 1;
        self.cumulative = self.fired as f64 * self.threshold;
        Some(Boundary {
            frame: self.frames,
            remainder: 0.0,
            within: residual,
        })
    }
}

#[derive(Clone, Debug)]
struct AlignRow {
    lo: f64,
    hi: f64,
    first: usize,
    last: usize,
    tail: bool,
}

/// Alignment between fired segments and frames, with what is needed to
/// differentiate it.
#[derive(Clone, Debug)]
pub struct Alignment {
    cumulative: Vec<f64>,
    rows: Vec<AlignRow>,
    boundaries: BoundarySet,
}

impl Alignment {
    pub fn compute(weights: &[f64], threshold: f64, tail_fraction: Option<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Contract("integrate-and-fire over an empty stream".into()));
        }
        let mut acc = FireAccumulator::new(threshold)?;
        let mut cumulative = Vec::with_capacity(weights.len() + 1);
        cumulative.push(0.0);
        let mut boundaries = BoundarySet::new(threshold);
        let mut rows = Vec::new();
        let mut start = 0;
        for (i, &w) in weights.iter().enumerate() {
            let fired = acc.push(w)?;
            cumulative.push(acc.cumulative());
            for b in fired {
                let j = boundaries.len();
                rows.push(AlignRow {
                    lo: j as f64 * threshold,
                    hi: (j + 1) as f64 * threshold,
                    first: start,
                    last: i,
                    tail: false,
                });
                boundaries.push(b);
                start = i;
            }
        }
        if let Some(fraction) = tail_fraction {
            let j = boundaries.len();
            if let Some(b) = acc.finalize_tail(fraction) {
                rows.push(AlignRow {
                    lo: j as f64 * threshold,
                    hi: *cumulative.last().expect("non-empty"),
                    first: start,
                    last: weights.len() - 1,
                    tail: true,
                });
                boundaries.push(b);
            }
        }
        Ok(Alignment {
            cumulative,
            rows,
            boundaries,
        })
    }

    pub fn boundaries(&self) -> &BoundarySet {
        &self.boundaries
    }

    pub fn segments(&self) -> usize {
        self.rows.len()
    }

    fn overlap(&self, row: &AlignRow, i: usize) -> f64 {
        let upper = self.cumulative[i + 1].min(row.hi);
        let lower = self.cumulative[i].max(row.lo);
        (upper - lower).max(0.0)
    }

    /// Dense `segments × frames` alignment (a `1 × frames` zero row when
    /// nothing fired, so downstream shapes stay valid).
    pub fn matrix(&self) -> Tensor {
        let n = self.cumulative.len() - 1;
        let m = self.rows.len().max(1);
        let mut data = vec![0.0; m * n];
        for (j, row) in self.rows.iter().enumerate() {
            for i in row.first..=row.last {
                data[j * n + i] = self.overlap(row, i);
            }
        }
        Tensor::matrix(m, n, data).expect("non-empty")
    }

    /// Gradient with respect to the weights given the gradient of
    /// [`Alignment::matrix`].
    pub fn backward(&self, grad: &Tensor) -> Vec<f64> {
        let n = self.cumulative.len() - 1;
        let mut grad_cum = vec![0.0; n + 1];
        for (j, row) in self.rows.iter().enumerate() {
            for i in row.first..=row.last {
                let g = grad.data()[j * n + i];
                if g == 0.0 || self.overlap(row, i) <= 0.0 {
                    continue;
                }
                if row.tail || self.cumulative[i + 1] < row.hi {
                    grad_cum[i + 1] += g;
                }
                if self.cumulative[i] > row.lo {
                    grad_cum[i] -= g;
                }
            }
        }
        // C_i = Σ_{t ≤ i} w_t, so dL/dw_i = Σ_{t ≥ i} dL/dC_t.
        let mut out = vec![0.0; n];
        let mut running = 0.0;
        for i in (0..n).rev() {
            running += grad_cum[i + 1];
            out[i] = running;
        }
        out
    }
}

/// Segment embeddings, one row per fired boundary.
pub type GlossEmbeddingSeq = Tensor;

/// Fires boundaries over `weights` and forms the segment embeddings from the
/// encoder states `h` (`n × d`). Returns `None` embeddings when nothing fired.
pub fn integrate_and_fire(
    weights: &WeightSequence,
    h: &Tensor,
    threshold: f64,
) -> Result<(BoundarySet, Option<GlossEmbeddingSeq>)> {
    fire_with_tail(weights, h, threshold, None)
}

/// As [`integrate_and_fire`], settling the stream-end residual with
/// [`FireAccumulator::finalize_tail`].
pub fn fire_with_tail(
    weights: &WeightSequence,
    h: &Tensor,
    threshold: f64,
    tail_fraction: Option<f64>,
) -> Result<(BoundarySet, Option<GlossEmbeddingSeq>)> {
    if weights.len() != h.rows() {
        return Err(Error::Shape(format!(
            "{} weights for {} encoder rows",
            weights.len(),
            h.rows()
        )));
    }
    let alignment = Alignment::compute(&weights.0, threshold, tail_fraction)?;
    let embeddings = if alignment.segments() == 0 {
        None
    } else {
        Some(matmul(&alignment.matrix(), h)?)
    };
    Ok((alignment.boundaries, embeddings))
}

/// Rescales weights so that they sum to `target_len · T`; used in training
/// so that exactly `target_len` segments fire.
pub fn scale_weights_to_length(weights: &WeightSequence, target_len: usize, threshold: f64) -> Result<WeightSequence> {
    if target_len == 0 {
        return Err(Error::Contract("target length must be at least 1".into()));
    }
    let total = weights.total();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Data(format!("cannot rescale weights summing to {total}")));
    }
    let factor = target_len as f64 * threshold / total;
    Ok(WeightSequence(weights.0.iter().map(|w| w * factor).collect()))
}

/// Residual MLP producing firing weights:
/// `w = sigmoid((relu(h W₁ + b₁) + h) W₂ + b₂)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundaryMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl BoundaryMlp {
    pub fn init(params: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl rand::Rng) -> Self {
        BoundaryMlp {
            w1: params.add_xavier(format!("{prefix}.w1"), d, d, rng),
            b1: params.add_const(format!("{prefix}.b1"), d, 0.0),
            w2: params.add_xavier(format!("{prefix}.w2"), d, 1, rng),
            b2: params.add_const(format!("{prefix}.b2"), 1, 0.0),
        }
    }

    fn check(&self, params: &ParamStore, d: usize) -> Result<()> {
        let w1 = params.get(self.w1).shape();
        let w2 = params.get(self.w2).shape();
        if w1 != [d, d] || w2 != [d, 1] {
            return Err(Error::Shape(format!(
                "boundary MLP needs W1 {d}x{d} and W2 {d}x1, got {w1:?} and {w2:?}"
            )));
        }
        Ok(())
    }

    /// Graph form: `n × 1` weights for encoder states `h`.
    pub fn forward(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let w1 = g.param(self.w1);
        let b1 = g.param(self.b1);
        let w2 = g.param(self.w2);
        let b2 = g.param(self.b2);
        let hidden = g.linear(h, w1, b1)?;
        let hidden = g.relu(hidden);
        let residual = g.add(hidden, h)?;
        let logits = g.linear(residual, w2, b2)?;
        Ok(g.sigmoid(logits))
    }

    pub fn compute_weights(&self, params: &ParamStore, h: &Tensor) -> Result<WeightSequence> {
        let (_, d) = h.require_matrix("encoder states")?;
        self.check(params, d)?;
        let mut g = Graph::with_params(params);
        let hv = g.constant(h.clone());
        let w = self.forward(&mut g, hv)?;
        Ok(WeightSequence(g.value(w).data().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize, d: usize) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn hand_case_boundaries_and_embeddings() {
        let w = WeightSequence(vec![0.4, 0.5, 0.3, 0.6, 0.9]);
        let h = rows(5, 3);
        let (b, e) = integrate_and_fire(&w, &h, 1.0).unwrap();
        assert_eq!(b.frames(), vec![3, 5]);
        assert!((b.items[0].remainder - 0.2).abs() < 1e-12);
        assert!((b.items[1].remainder - 0.7).abs() < 1e-12);
        assert!((b.items[0].within - 0.1).abs() < 1e-12);
        assert!((b.items[1].within - 0.2).abs() < 1e-12);
        let e = e.unwrap();
        for c in 0..3 {
            let e1 = 0.4 * h.get(0, c) + 0.5 * h.get(1, c) + 0.1 * h.get(2, c);
            let e2 = 0.2 * h.get(2, c) + 0.6 * h.get(3, c) + 0.2 * h.get(4, c);
            assert!((e.get(0, c) - e1).abs() < 1e-12);
            assert!((e.get(1, c) - e2).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_fire_nothing() {
        let (b, e) = integrate_and_fire(&WeightSequence(vec![0.0; 4]), &rows(4, 2), 1.0).unwrap();
        assert!(b.is_empty());
        assert!(e.is_none());
    }

    #[test]
    fn weights_at_threshold_fire_every_frame() {
        let h = rows(4, 2);
        let (b, e) = integrate_and_fire(&WeightSequence(vec![1.0; 4]), &h, 1.0).unwrap();
        assert_eq!(b.frames(), vec![1, 2, 3, 4]);
        assert!(b.items.iter().all(|x| x.remainder == 0.0 && x.within == 1.0));
        assert_eq!(e.unwrap(), h);
    }

    #[test]
    fn scaling_cases() {
        let w = WeightSequence(vec![0.5, 0.7, 0.8]);
        assert_eq!(scale_weights_to_length(&w, 2, 1.0).unwrap().0, w.0);

        let s = scale_weights_to_length(&WeightSequence(vec![0.5, 0.5]), 2, 1.0).unwrap();
        assert_eq!(s.0, vec![1.0, 1.0]);
        let (b, _) = integrate_and_fire(&s, &rows(2, 2), 1.0).unwrap();
        assert_eq!(b.frames(), vec![1, 2]);

        let s = scale_weights_to_length(&WeightSequence(vec![0.2, 0.2]), 1, 1.0).unwrap();
        assert_eq!(s.0, vec![0.5, 0.5]);
        let (b, _) = integrate_and_fire(&s, &rows(2, 2), 1.0).unwrap();
        assert_eq!(b.frames(), vec![2]);

        assert!(matches!(
            scale_weights_to_length(&WeightSequence(vec![0.0, 0.0]), 1, 1.0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn tail_rule() {
        let mut acc = FireAccumulator::new(1.0).unwrap();
        acc.push(0.0).unwrap();
        assert!(acc.finalize_tail(0.5).is_none());

        let mut acc = FireAccumulator::new(1.0).unwrap();
        acc.push(0.3).unwrap();
        acc.push(0.3).unwrap();
        let tail = acc.finalize_tail(0.5).unwrap();
        assert_eq!(tail.frame, 2);
        assert!((tail.within - 0.6).abs() < 1e-15);

        let mut acc = FireAccumulator::new(1.0).unwrap();
        acc.push(0.4).unwrap();
        assert!(acc.finalize_tail(0.5).is_none());
    }

    #[test]
    fn oversized_weight_fires_repeatedly_in_one_frame() {
        let mut acc = FireAccumulator::new(1.0).unwrap();
        let fired = acc.push(2.5).unwrap();
        assert_eq!(fired.len(), 2);
        assert!(fired.iter().all(|b| b.frame == 1));
        assert!((acc.residual() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mlp_weight_cases() {
        let mut params = ParamStore::new();
        let mlp = BoundaryMlp {
            w1: params.add("w1", Tensor::zeros(&[3, 3])),
            b1: params.add("b1", Tensor::zeros(&[3])),
            w2: params.add("w2", Tensor::zeros(&[3, 1])),
            b2: params.add("b2", Tensor::zeros(&[1])),
        };
        let w = mlp.compute_weights(&params, &Tensor::zeros(&[4, 3])).unwrap();
        assert_eq!(w.0, vec![0.5; 4]);

        params.get_mut(mlp.b2).data_mut()[0] = 10.0;
        let w = mlp.compute_weights(&params, &rows(2, 3)).unwrap();
        let expected = 1.0 / (1.0 + (-10f64).exp());
        assert!(w.0.iter().all(|&x| (x - expected).abs() < 1e-15));
        assert!((expected - (1.0 - 4.5e-5)).abs() < 1e-6);

        assert!(matches!(
            mlp.compute_weights(&params, &rows(2, 4)),
            Err(Error::Shape(_))
        ));
    }
}

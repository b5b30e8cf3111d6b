//! Training objectives: CTC, integrate-and-fire loss, hard and soft
//! cross-entropy, and their weighted sum.
//!
//! Each loss has a plain form returning `(value, d value / d logits)` and a
//! graph form that attaches that pair to the autodiff graph.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{log_softmax_in_place, log_sum_exp, Tensor};

fn log_softmax_rows(logits: &Tensor) -> Result<Tensor> {
    logits.require_matrix("logits")?;
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits contain non-finite values".into()));
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        log_softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

/// Frames needed to emit `target` under CTC: one per label plus a blank
/// between equal neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// `−log P(target | logits)` summed over all CTC paths, with its gradient
/// with respect to the logits (`n × C`, blank id `blank`).
pub fn ctc_loss(logits: &Tensor, target: &[usize], blank: usize) -> Result<(f64, Tensor)> {
    let lp = log_softmax_rows(logits)?;
    let (n, c) = (lp.rows(), lp.cols());
    if blank >= c {
        return Err(Error::Shape(format!("blank id {blank} outside {c} classes")));
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= c || t == blank) {
        return Err(Error::Data(format!("CTC target label {bad} invalid for {c} classes, blank {blank}")));
    }
    if ctc_min_frames(target) > n {
        return Err(Error::Data(format!(
            "CTC target of length {} needs {} frames, stream has {n} (infinite loss)",
            target.len(),
            ctc_min_frames(target)
        )));
    }
    let s = 2 * target.len() + 1;
    let label = |i: usize| if i % 2 == 0 { blank } else { target[i / 2] };
    let skip_ok = |i: usize| i % 2 == 1 && i >= 3 && target[i / 2] != target[i / 2 - 1];
    let ninf = f64::NEG_INFINITY;
    let lse2 = |a: f64, b: f64| log_sum_exp(&[a, b]);

    let mut alpha = vec![ninf; n * s];
    alpha[0] = lp.get(0, blank);
    if s > 1 {
        alpha[1] = lp.get(0, label(1));
    }
    for t in 1..n {
        for i in 0..s {
            let mut a = alpha[(t - 1) * s + i];
            if i >= 1 {
                a = lse2(a, alpha[(t - 1) * s + i - 1]);
            }
            if skip_ok(i) {
                a = lse2(a, alpha[(t - 1) * s + i - 2]);
            }
            alpha[t * s + i] = a + lp.get(t, label(i));
        }
    }
    let mut beta = vec![ninf; n * s];
    beta[(n - 1) * s + s - 1] = lp.get(n - 1, label(s - 1));
    if s > 1 {
        beta[(n - 1) * s + s - 2] = lp.get(n - 1, label(s - 2));
    }
    for t in (0..n - 1).rev() {
        for i in 0..s {
            let mut b = beta[(t + 1) * s + i];
            if i + 1 < s {
                b = lse2(b, beta[(t + 1) * s + i + 1]);
            }
            if i + 2 < s && skip_ok(i + 2) {
                b = lse2(b, beta[(t + 1) * s + i + 2]);
            }
            beta[t * s + i] = b + lp.get(t, label(i));
        }
    }
    let log_p = if s > 1 {
        lse2(alpha[(n - 1) * s + s - 1], alpha[(n - 1) * s + s - 2])
    } else {
        alpha[(n - 1) * s]
    };
    if !log_p.is_finite() {
        return Err(Error::NonFinite("CTC path probability underflowed".into()));
    }

    // d(−log P)/d u_{t,c} = softmax_{t,c} − occupancy_{t,c}
    let mut grad = vec![0.0; n * c];
    let mut occ = vec![ninf; c];
    for t in 0..n {
        occ.fill(ninf);
        for i in 0..s {
            let v = alpha[t * s + i] + beta[t * s + i];
            let l = label(i);
            occ[l] = lse2(occ[l], v);
        }
        for k in 0..c {
            let p = lp.get(t, k).exp();
            let o = if occ[k] == ninf { 0.0 } else { (occ[k] - lp.get(t, k) - log_p).exp() };
            grad[t * c + k] = p - o;
        }
    }
    Ok((-log_p, Tensor::matrix(n, c, grad)?))
}

/// Mean negative log-likelihood over non-`None` targets.
pub fn cross_entropy(logits: &Tensor, targets: &[Option<usize>]) -> Result<(f64, Tensor)> {
    let lp = log_softmax_rows(logits)?;
    let (n, c) = (lp.rows(), lp.cols());
    if targets.len() != n {
        return Err(Error::Contract(format!("{} targets for {n} logit rows", targets.len())));
    }
    let count = targets.iter().flatten().count();
    if count == 0 {
        return Err(Error::Data("cross-entropy over an empty target".into()));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * c];
    for (t, target) in targets.iter().enumerate() {
        let Some(y) = *target else { continue };
        if y >= c {
            return Err(Error::Data(format!("target id {y} outside {c} classes")));
        }
        loss -= lp.get(t, y);
        for k in 0..c {
            grad[t * c + k] = lp.get(t, k).exp() / count as f64;
        }
        grad[t * c + y] -= 1.0 / count as f64;
    }
    Ok((loss / count as f64, Tensor::matrix(n, c, grad)?))
}

/// Word-level distillation: cross-entropy from the temperature-softened
/// teacher distribution to the equally softened student, averaged over
/// positions and multiplied by `Γ²`.
pub fn soft_kd_value(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<(f64, Tensor)> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!("distillation temperature must be positive, got {temperature}")));
    }
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let ls = log_softmax_rows(&student.map(|v| v / temperature))?;
    let lt = log_softmax_rows(&teacher.map(|v| v / temperature))?;
    let (n, c) = (ls.rows(), ls.cols());
    let scale = temperature * temperature / n as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * c];
    for t in 0..n {
        for k in 0..c {
            let pt = lt.get(t, k).exp();
            loss -= pt * ls.get(t, k);
            grad[t * c + k] = temperature / n as f64 * (ls.get(t, k).exp() - pt);
        }
    }
    Ok((loss * scale, Tensor::matrix(n, c, grad)?))
}

/// Graph form of [`ctc_loss`], divided by the target length when
/// `per_label` is set and the target is non-empty.
pub fn ctc_graph(g: &mut Graph, logits: Var, target: &[usize], blank: usize, per_label: bool) -> Result<Var> {
    let (mut value, mut grad) = ctc_loss(g.value(logits), target, blank)?;
    if per_label && !target.is_empty() {
        value /= target.len() as f64;
        grad.scale_assign(1.0 / target.len() as f64);
    }
    g.scalar_loss(logits, value, grad)
}

pub fn hard_ce(g: &mut Graph, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    let (value, grad) = cross_entropy(g.value(logits), targets)?;
    g.scalar_loss(logits, value, grad)
}

pub fn soft_kd(g: &mut Graph, student: Var, teacher: &Tensor, temperature: f64) -> Result<Var> {
    let (value, grad) = soft_kd_value(g.value(student), teacher, temperature)?;
    g.scalar_loss(student, value, grad)
}

/// Gloss cross-entropy on the segment decoder plus the squared gap between
/// the unscaled weight sum and the gloss length. `weights` is the `n × 1`
/// weight column before any rescaling.
pub fn if_loss(g: &mut Graph, gloss_logits: Var, gloss_targets: &[usize], weights: Var, target_len: usize) -> Result<Var> {
    let positions = g.value(gloss_logits).rows();
    if positions != gloss_targets.len() || positions != target_len {
        return Err(Error::Contract(format!(
            "{positions} segment positions for {} gloss targets (length {target_len})",
            gloss_targets.len()
        )));
    }
    let targets: Vec<Option<usize>> = gloss_targets.iter().map(|&t| Some(t)).collect();
    let ce = hard_ce(g, gloss_logits, &targets)?;
    let total = g.sum(weights);
    let gap = g.add_scalar(total, -(target_len as f64));
    let sq = g.mul(gap, gap)?;
    g.add(ce, sq)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ctc: f64,
    pub if_: f64,
    pub soft: f64,
    pub hard: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ctc: 10.0,
            if_: 1.0,
            soft: 0.6,
            hard: 0.4,
        }
    }
}

/// Loss components of one forward pass; absent terms are not configured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ctc: Option<f64>,
    pub if_: Option<f64>,
    pub soft: Option<f64>,
    pub hard: Option<f64>,
}

impl LossParts {
    fn named(&self) -> [(&'static str, Option<f64>); 4] {
        [("ctc", self.ctc), ("if", self.if_), ("soft", self.soft), ("hard", self.hard)]
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in self.named() {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("{name} loss is {v}")));
                }
            }
        }
        Ok(())
    }
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    parts.check_finite()?;
    let weights = [w.ctc, w.if_, w.soft, w.hard];
    Ok(parts
        .named()
        .iter()
        .zip(weights)
        .map(|((_, v), lambda)| v.map_or(0.0, |v| lambda * v))
        .sum())
}

/// Graph form of [`total_loss`] over the present terms.
pub fn total_loss_graph(
    g: &mut Graph,
    terms: [Option<Var>; 4],
    w: &LossWeights,
) -> Result<(Var, LossParts)> {
    let value = |g: &Graph, v: Option<Var>| v.map(|v| g.value(v).item());
    let parts = LossParts {
        ctc: value(g, terms[0]),
        if_: value(g, terms[1]),
        soft: value(g, terms[2]),
        hard: value(g, terms[3]),
    };
    parts.check_finite()?;
    let weights = [w.ctc, w.if_, w.soft, w.hard];
    let mut total: Option<Var> = None;
    for (term, lambda) in terms.into_iter().zip(weights) {
        let Some(term) = term else { continue };
        let scaled = g.scale(term, lambda);
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no loss term is configured".into()))?;
    Ok((total, parts))
}

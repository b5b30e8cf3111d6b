//! Output heads and decoding: vocabulary layout, the auxiliary gloss
//! decoder, the CTC head, wait-k decode steps and beam search.

use std::cmp::Ordering;

use crate::autodiff::{Graph, Var};
use crate::boundary::BoundarySet;
use crate::error::{Error, Result};
use crate::mask::{build_causal_mask, AttentionMask};
use crate::model::Model;
use crate::tensor::{log_softmax_in_place, Tensor};
use crate::transformer::ProjectedMemory;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const TEXT_SPECIALS: usize = 3;

/// Id layout. Text ids are `pad, bos, eos` followed by the content words;
/// gloss ids are the content glosses followed by the CTC blank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub glosses: usize,
    pub words: usize,
}

impl Vocabulary {
    pub fn new(glosses: usize, words: usize) -> Self {
        Vocabulary { glosses, words }
    }

    pub fn gloss_classes(&self) -> usize {
        self.glosses
    }

    pub fn blank(&self) -> usize {
        self.glosses
    }

    pub fn ctc_classes(&self) -> usize {
        self.glosses + 1
    }

    pub fn text_classes(&self) -> usize {
        self.words + TEXT_SPECIALS
    }

    pub fn text_id(&self, word: usize) -> usize {
        word + TEXT_SPECIALS
    }

    pub fn word(&self, id: usize) -> Option<usize> {
        (id >= TEXT_SPECIALS && id < self.text_classes()).then(|| id - TEXT_SPECIALS)
    }

    pub fn text_token(&self, id: usize) -> String {
        match id {
            PAD => "<pad>".into(),
            BOS => "<s>".into(),
            EOS => "</s>".into(),
            _ => format!("w{}", id - TEXT_SPECIALS),
        }
    }

    pub fn gloss_token(&self, id: usize) -> String {
        if id == self.blank() {
            "<blank>".into()
        } else {
            format!("G{id}")
        }
    }

    /// Whitespace-joined surface form of text ids.
    pub fn render_text(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.text_token(i)).collect::<Vec<_>>().join(" ")
    }
}

fn plain<F>(model: &Model, input: &Tensor, f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::with_params(&model.params);
    let x = g.constant(input.clone());
    let out = f(&mut g, x)?;
    Ok(g.value(out).clone())
}

/// Gloss logits (`m × |G|`) from segment embeddings; causal over segments
/// and without cross-attention.
pub fn aux_gloss_decode(model: &Model, segments: &Tensor) -> Result<Tensor> {
    let m = segments.rows();
    plain(model, segments, |g, e| {
        let h = model.parts.aux_decoder.forward(g, e, &build_causal_mask(m), None, 0.0)?;
        model.parts.aux_head.forward(g, h)
    })
}

/// Per-frame CTC logits (`n × (|G|+1)`) over first-pass states.
pub fn ctc_head(model: &Model, first_pass: &Tensor) -> Result<Tensor> {
    plain(model, first_pass, |g, h| model.parts.ctc_head.forward(g, h))
}

/// Cross-attention mask for decoder rows `1..=t` over `frames` source
/// frames. Row `t'` sees through boundary `t'+k−1` when it has fired and
/// through every frame read otherwise, which is only allowed for the row
/// being written once the source is finished.
pub fn decoder_cross_mask(
    k: usize,
    boundaries: &BoundarySet,
    t: usize,
    source_finished: bool,
    frames: usize,
) -> Result<AttentionMask> {
    if k == 0 || t == 0 {
        return Err(Error::Contract(format!("wait-k needs k ≥ 1 and t ≥ 1, got k={k}, t={t}")));
    }
    let fired = boundaries.frames();
    if !source_finished && t + k - 1 > fired.len() {
        return Err(Error::Policy(format!(
            "write of target {t} needs {} segments but only {} fired",
            t + k - 1,
            fired.len()
        )));
    }
    let mut mask = AttentionMask::empty(t, frames);
    for row in 0..t {
        let visible = fired.get(row + k - 1).map_or(frames, |&b| b.min(frames));
        for j in 0..visible {
            mask.set(row, j, true);
        }
    }
    Ok(mask)
}

/// Incremental decoding against one fixed memory. The memory is projected
/// once; each call decodes a prefix and returns next-token log-probs.
pub struct DecodeSession<'m> {
    model: &'m Model,
    graph: Graph<'m>,
    memory: ProjectedMemory,
    frames: usize,
}

impl<'m> DecodeSession<'m> {
    pub fn new(model: &'m Model, memory: &Tensor) -> Result<Self> {
        let (frames, d) = memory.require_matrix("decoder memory")?;
        if d != model.config.d_model {
            return Err(Error::Shape(format!("memory width {d}, model width {}", model.config.d_model)));
        }
        let mut graph = Graph::with_params(&model.params);
        let m = graph.constant(memory.clone());
        let memory = model.parts.text_decoder.project_memory(&mut graph, m)?;
        Ok(DecodeSession {
            model,
            graph,
            memory,
            frames,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Log-probabilities of the token following `prefix` (which starts with
    /// `BOS`); `cross` has one row per prefix position.
    pub fn log_probs(&mut self, prefix: &[usize], cross: &AttentionMask) -> Result<Vec<f64>> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::Contract("decoder prefix must start with BOS".into()));
        }
        if cross.rows() != prefix.len() || cross.cols() != self.frames {
            return Err(Error::Shape(format!(
                "cross mask {}x{} for prefix {} over {} frames",
                cross.rows(),
                cross.cols(),
                prefix.len(),
                self.frames
            )));
        }
        let g = &mut self.graph;
        let x = self.model.embed_text_graph(g, prefix)?;
        let h = self.model.parts.text_decoder.forward(
            g,
            x,
            &build_causal_mask(prefix.len()),
            Some((&self.memory, cross)),
            0.0,
        )?;
        let logits = self.model.parts.text_head.forward(g, h)?;
        let mut last = g.value(logits).row(prefix.len() - 1).to_vec();
        log_softmax_in_place(&mut last);
        Ok(last)
    }
}

/// Next-token distribution `P(y_t | y_<t, x_<t+k)` for `prefix` (starting
/// with `BOS`, so `t = prefix.len()`).
pub fn waitk_decode_step(
    model: &Model,
    prefix: &[usize],
    memory: &Tensor,
    k: usize,
    boundaries: &BoundarySet,
    source_finished: bool,
) -> Result<Vec<f64>> {
    let cross = decoder_cross_mask(k, boundaries, prefix.len(), source_finished, memory.rows())?;
    let mut session = DecodeSession::new(model, memory)?;
    Ok(session.log_probs(prefix, &cross)?.into_iter().map(f64::exp).collect())
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, ending with `eos`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob / len^α`.
    pub score: f64,
}

fn finish(tokens: Vec<usize>, log_prob: f64, alpha: f64) -> Hypothesis {
    let len = tokens.len().max(1) as f64;
    Hypothesis {
        score: log_prob / len.powf(alpha),
        tokens,
        log_prob,
    }
}

/// Beam search over `step`, which maps the tokens generated so far to
/// next-token log-probs. Hypotheses reaching `max_len` tokens are closed
/// with `eos`. Finished hypotheses are ranked by `log_prob / len^α`.
pub fn beam_search<F>(beam: usize, alpha: f64, max_len: usize, eos: usize, mut step: F) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let max_len = max_len.max(1);
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut done: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() && done.len() < beam {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (i, (tokens, score)) in live.iter().enumerate() {
            if tokens.len() + 1 >= max_len {
                let mut closed = tokens.clone();
                closed.push(eos);
                done.push(finish(closed, *score, alpha));
                continue;
            }
            let lp = step(tokens)?;
            if lp.iter().any(|v| v.is_nan()) {
                return Err(Error::NonFinite("decoder produced NaN log-probabilities".into()));
            }
            candidates.extend(
                lp.iter()
                    .enumerate()
                    .filter(|(_, l)| **l > f64::NEG_INFINITY)
                    .map(|(tok, &l)| (score + l, i, tok)),
            );
        }
        if candidates.is_empty() {
            for (tokens, score) in live.drain(..) {
                if tokens.len() + 1 < max_len {
                    let mut closed = tokens;
                    closed.push(eos);
                    done.push(finish(closed, score, alpha));
                }
            }
            break;
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::new();
        for (score, i, tok) in candidates.into_iter().take(beam) {
            let mut tokens = live[i].0.clone();
            tokens.push(tok);
            if tok == eos {
                done.push(finish(tokens, score, alpha));
            } else {
                next.push((tokens, score));
            }
        }
        live = next;
    }
    done.into_iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.score.partial_cmp(&b.score).unwrap_or(Ordering::Equal).then(ib.cmp(ia)))
        .map(|(_, h)| h)
        .ok_or_else(|| Error::Contract("beam search finished without hypotheses".into()))
}

/// Default decoding length cap for a stream with `boundaries` fired
/// segments.
pub fn default_max_len(boundaries: usize) -> usize {
    3 * boundaries + 10
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let mut c = ModelConfig::desk(4, 5, 6);
        c.d_model = 8;
        c.heads = 2;
        c.ff_dim = 16;
        Model::new(c, 4).unwrap()
    }

    fn memory(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(n, 8, (0..n * 8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn vocabulary_layout() {
        let v = Vocabulary::new(20, 24);
        assert_eq!(v.ctc_classes(), 21);
        assert_eq!(v.blank(), 20);
        assert_eq!(v.text_classes(), 27);
        assert_eq!(v.word(v.text_id(5)), Some(5));
        assert_eq!(v.word(EOS), None);
        assert_eq!(v.render_text(&[3, 4]), "w0 w1");
    }

    #[test]
    fn aux_decoder_shapes_and_causality() {
        let m = model();
        let e = memory(3, 1);
        assert_eq!(aux_gloss_decode(&m, &e.head_rows(1)).unwrap().shape(), &[1, 5]);
        let a = aux_gloss_decode(&m, &e).unwrap();
        let mut e2 = e.clone();
        e2.row_mut(1)[0] += 1.0;
        let b = aux_gloss_decode(&m, &e2).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(1), b.row(1));
    }

    #[test]
    fn aux_decoder_without_layers_is_position_wise() {
        let mut c = model().config;
        c.aux_layers = 0;
        let m = Model::new(c, 4).unwrap();
        let e = memory(2, 2);
        let swapped = Tensor::from_rows(&[e.row(1).to_vec(), e.row(0).to_vec()]).unwrap();
        let a = aux_gloss_decode(&m, &e).unwrap();
        let b = aux_gloss_decode(&m, &swapped).unwrap();
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(0));
    }

    #[test]
    fn ctc_head_shape_and_zero_weights() {
        let mut m = model();
        let h = memory(4, 3);
        assert_eq!(ctc_head(&m, &h).unwrap().shape(), &[4, 6]);
        let w = m.parts.ctc_head.weight;
        m.params.get_mut(w).data_mut().fill(0.0);
        let mut row = ctc_head(&m, &h).unwrap().row(2).to_vec();
        crate::tensor::softmax_in_place(&mut row);
        assert!(row.iter().all(|p| (p - 1.0 / 6.0).abs() < 1e-12));
    }

    #[test]
    fn cross_mask_rows() {
        let b = BoundarySet::from_frames(&[4, 6], 1.0);
        let m = decoder_cross_mask(1, &b, 1, false, 8).unwrap();
        assert_eq!(m.row(0), &[true, true, true, true, false, false, false, false]);
        assert!(matches!(decoder_cross_mask(2, &b, 2, false, 8), Err(Error::Policy(_))));
        let m = decoder_cross_mask(2, &b, 2, true, 8).unwrap();
        assert_eq!(m.row(0).iter().filter(|&&v| v).count(), 6);
        assert_eq!(m.row(1).iter().filter(|&&v| v).count(), 8);
    }

    #[test]
    fn decode_step_ignores_frames_beyond_horizon() {
        let m = model();
        let mem = memory(10, 5);
        let b = BoundarySet::from_frames(&[3, 5, 9], 1.0);
        let p = waitk_decode_step(&m, &[BOS, 4], &mem, 1, &b, false).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut changed = mem.clone();
        for r in 5..10 {
            changed.row_mut(r)[3] += 2.0;
        }
        assert_eq!(p, waitk_decode_step(&m, &[BOS, 4], &changed, 1, &b, false).unwrap());
        let short = BoundarySet::from_frames(&[3], 1.0);
        let full = waitk_decode_step(&m, &[BOS, 4], &changed, 1, &short, true).unwrap();
        assert_ne!(p, full);
        assert!(matches!(
            waitk_decode_step(&m, &[BOS, 4, 5], &mem, 2, &b, false),
            Err(Error::Policy(_))
        ));
    }

    #[test]
    fn finished_source_equals_offline_step() {
        let m = model();
        let mem = memory(6, 6);
        let none = BoundarySet::new(1.0);
        let p = waitk_decode_step(&m, &[BOS, 3, 7], &mem, 3, &none, true).unwrap();
        let mut s = DecodeSession::new(&m, &mem).unwrap();
        let q: Vec<f64> = s
            .log_probs(&[BOS, 3, 7], &AttentionMask::full(3, 6))
            .unwrap()
            .into_iter()
            .map(f64::exp)
            .collect();
        assert_eq!(p, q);
    }

    /// Toy tree over tokens {0: eos, 1: A, 2: B, 3: C, 4: D}; every
    /// sequence ends after two content tokens.
    fn toy(prefix: &[usize]) -> Result<Vec<f64>> {
        let p: Vec<f64> = match prefix {
            [] => vec![0.0, 0.6, 0.4, 0.0, 0.0],
            [1] => vec![0.0, 0.0, 0.0, 0.5, 0.5],
            [2] => vec![0.0, 0.05, 0.0, 0.95, 0.0],
            _ => vec![1.0, 0.0, 0.0, 0.0, 0.0],
        };
        Ok(p.into_iter().map(f64::ln).collect())
    }

    #[test]
    fn beam_recovers_sequence_greedy_misses() {
        let greedy = beam_search(1, -1.0, 10, 0, toy).unwrap();
        assert_eq!(greedy.tokens, vec![1, 3, 0]);
        let beam = beam_search(3, -1.0, 10, 0, toy).unwrap();
        assert_eq!(beam.tokens, vec![2, 3, 0]);
        assert!((beam.log_prob - 0.38f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn peaked_model_beam_equals_greedy() {
        let peaked = |prefix: &[usize]| -> Result<Vec<f64>> {
            let next = if prefix.len() < 4 { prefix.len() + 1 } else { 0 };
            Ok((0..6).map(|t| if t == next { 0.0 } else { f64::NEG_INFINITY }).collect())
        };
        let a = beam_search(1, -1.0, 20, 0, peaked).unwrap();
        let b = beam_search(3, -1.0, 20, 0, peaked).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.tokens, vec![1, 2, 3, 4, 0]);
    }

    #[test]
    fn max_len_forces_eos() {
        let never_ends = |_: &[usize]| -> Result<Vec<f64>> { Ok(vec![f64::NEG_INFINITY, 0.0]) };
        let h = beam_search(2, -1.0, 4, 0, never_ends).unwrap();
        assert_eq!(h.tokens, vec![1, 1, 1, 0]);
    }
}

//! Corpus evaluation of simultaneous and offline decoding.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use waitk::data::Sample;
use waitk::decoders::Vocabulary;
use waitk::engine::{run_simultaneous_with_id, run_teacher, DecodeConfig, EmissionLog};
use waitk::metrics::{average_lagging, average_proportion, bleu, boundary_matches, rouge_l, token_matches, MatchCounts};
use waitk::model::Model;
use waitk::{Error, Result};

/// One CSV row: the scores of one model at one `k`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    /// `None` for offline (teacher) decoding, written as `inf`.
    pub k: Option<usize>,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    /// Means over streams that emitted at least one token.
    pub al: Option<f64>,
    pub ap: Option<f64>,
    pub token_accuracy: f64,
    pub boundary_f1: Option<f64>,
    pub samples: usize,
    pub empty_outputs: usize,
}

pub const CSV_HEADER: &str = "k,bleu1,bleu2,bleu3,bleu4,rouge_l,al,ap,token_accuracy,boundary_f1,samples,empty_outputs";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalRow {
    pub fn k_label(&self) -> String {
        self.k.map_or_else(|| "inf".to_string(), |k| k.to_string())
    }

    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.rouge_l,
            opt(self.al),
            opt(self.ap),
            self.token_accuracy,
            opt(self.boundary_f1),
            self.samples,
            self.empty_outputs
        )
    }

    pub fn csv_line(&self) -> String {
        format!("{},{}", self.k_label(), self.csv_fields())
    }
}

pub fn write_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "{CSV_HEADER}").expect("string write");
    for r in rows {
        writeln!(out, "{}", r.csv_line()).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub struct StreamResult {
    pub tokens: Vec<usize>,
    pub log: Option<EmissionLog>,
    pub boundaries: Option<Vec<usize>>,
}

fn score(vocab: &Vocabulary, samples: &[Sample], results: &[StreamResult], k: Option<usize>, tolerance: usize) -> Result<EvalRow> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let mut hyps = Vec::with_capacity(samples.len());
    let mut refs = Vec::with_capacity(samples.len());
    let (mut correct, mut total) = (0usize, 0usize);
    let (mut al_sum, mut ap_sum, mut timed) = (0.0, 0.0, 0usize);
    let mut matches = MatchCounts::default();
    let mut empty = 0;
    for (s, r) in samples.iter().zip(results) {
        let reference: Vec<usize> = s.text.iter().map(|&w| vocab.text_id(w)).collect();
        hyps.push(vocab.render_text(&r.tokens));
        refs.push(vocab.render_text(&reference));
        let (c, t) = token_matches(&r.tokens, &reference);
        correct += c;
        total += t;
        if let Some(log) = &r.log {
            if log.emissions.is_empty() {
                empty += 1;
            } else {
                al_sum += average_lagging(log, reference.len())?;
                ap_sum += average_proportion(log)?;
                timed += 1;
            }
        } else if r.tokens.is_empty() {
            empty += 1;
        }
        if let Some(b) = &r.boundaries {
            matches.add(boundary_matches(b, &s.boundaries, tolerance));
        }
    }
    let streaming = results.iter().any(|r| r.log.is_some());
    let mean = |sum: f64| (streaming && timed > 0).then(|| sum / timed as f64);
    let b = bleu(&hyps, &refs, 4)?;
    Ok(EvalRow {
        k,
        bleu: [b[0], b[1], b[2], b[3]],
        rouge_l: rouge_l(&hyps, &refs)?,
        al: mean(al_sum),
        ap: mean(ap_sum),
        token_accuracy: correct as f64 / total.max(1) as f64,
        boundary_f1: results.iter().any(|r| r.boundaries.is_some()).then(|| matches.f1()),
        samples: samples.len(),
        empty_outputs: empty,
    })
}

/// Streams every sample through the wait-`k` engine. Results are reduced
/// in sample order, so the row does not depend on thread scheduling.
pub fn evaluate_simultaneous(
    model: &Model,
    samples: &[Sample],
    decode: &DecodeConfig,
    tolerance: usize,
) -> Result<(EvalRow, Vec<EmissionLog>)> {
    let results: Vec<StreamResult> = samples
        .par_iter()
        .map(|s| {
            let out = run_simultaneous_with_id(model, &s.features, decode, s.id as usize)?;
            Ok(StreamResult {
                tokens: out.tokens,
                log: Some(out.log),
                boundaries: Some(out.boundaries.frames()),
            })
        })
        .collect::<Result<_>>()?;
    let row = score(&model.vocab(), samples, &results, Some(decode.k), tolerance)?;
    let logs = results.into_iter().filter_map(|r| r.log).collect();
    Ok((row, logs))
}

/// Offline decoding of a teacher model; the row is labelled `k = inf`.
pub fn evaluate_teacher(model: &Model, samples: &[Sample], beam: usize, length_penalty: f64) -> Result<EvalRow> {
    let results: Vec<StreamResult> = samples
        .par_iter()
        .map(|s| {
            Ok(StreamResult {
                tokens: run_teacher(model, &s.features, beam, length_penalty, None)?,
                log: None,
                boundaries: None,
            })
        })
        .collect::<Result<_>>()?;
    score(&model.vocab(), samples, &results, None, 0)
}

/// Emission logs as JSON lines, one stream per line.
pub fn write_emission_logs(path: &Path, logs: &[EmissionLog]) -> Result<()> {
    let mut out = String::new();
    for log in logs {
        out.push_str(&serde_json::to_string(log)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

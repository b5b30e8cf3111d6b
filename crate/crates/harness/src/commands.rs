//! Subcommand implementations. Each writes its artifacts under the
//! configured output directory and returns what it wrote.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use waitk::data::{generate_corpus, load_dataset, save_dataset, CorpusStats, Dataset, SplitSizes, SyntheticSpec};
use waitk::model::Model;
use waitk::{Error, Result};

use crate::config::{AblationRow, ExperimentConfig};
use crate::eval::{evaluate_simultaneous, evaluate_teacher, write_csv, write_emission_logs, EvalRow, CSV_HEADER};
use crate::train::{check_teacher_compatible, distill, train, Role, TrainOutcome};

/// SHA-256 over the dataset files in a fixed order.
pub fn dataset_checksum(dir: &Path) -> Result<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for name in names {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(std::fs::read(dir.join(&name))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub struct GenDataReport {
    pub stats: CorpusStats,
    pub checksum: String,
}

pub fn gen_data(spec: &SyntheticSpec, sizes: SplitSizes, out: &Path) -> Result<GenDataReport> {
    let ds = generate_corpus(spec, sizes)?;
    save_dataset(&ds, out)?;
    Ok(GenDataReport {
        stats: ds.stats(),
        checksum: dataset_checksum(out)?,
    })
}

pub fn load_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", path.display())))?;
    let spec: SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("spec {}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

pub fn open_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, String)> {
    if !cfg.data_dir.join("manifest.json").exists() {
        return Err(Error::Data(format!("no dataset at {}", cfg.data_dir.display())));
    }
    Ok((load_dataset(&cfg.data_dir)?, dataset_checksum(&cfg.data_dir)?))
}

#[derive(Serialize)]
struct RunRecord<'a> {
    role: &'a str,
    dataset_checksum: &'a str,
    data_seed: u64,
    steps: usize,
    best_step: usize,
    stopped_by_schedule: bool,
    config: &'a ExperimentConfig,
}

fn record_run(cfg: &ExperimentConfig, data: &Dataset, checksum: &str, role: Role, out: &TrainOutcome) -> Result<()> {
    let rec = RunRecord {
        role: match role {
            Role::Student => "student",
            Role::Teacher => "teacher",
        },
        dataset_checksum: checksum,
        data_seed: data.spec.seed,
        steps: out.steps,
        best_step: out.best_step,
        stopped_by_schedule: out.stopped_by_schedule,
        config: cfg,
    };
    std::fs::write(cfg.out_dir.join("run.json"), serde_json::to_string_pretty(&rec)?)?;
    Ok(())
}

pub fn cmd_train(cfg: &ExperimentConfig, role: Role) -> Result<TrainOutcome> {
    let (data, checksum) = open_dataset(cfg)?;
    let out = train(cfg, &data, role)?;
    record_run(cfg, &data, &checksum, role, &out)?;
    Ok(out)
}

/// Writes teacher logits for the training split; returns the directory and
/// the file count.
pub fn cmd_distill(cfg: &ExperimentConfig, teacher_ckpt: &Path, out: Option<&Path>) -> Result<(PathBuf, usize)> {
    let (data, _) = open_dataset(cfg)?;
    let teacher = Model::load(teacher_ckpt)?;
    check_teacher_compatible(&teacher, &data)?;
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.teacher_logits.clone())
        .unwrap_or_else(|| cfg.out_dir.join("teacher_logits"));
    let n = distill(&teacher, &data.train, cfg.kd_temperature, &dir)?;
    Ok((dir, n))
}

/// Scores `model` on `split`: one row per `k`, or a single `k = inf` row
/// for a teacher. Writes the CSV and, for streaming models, per-`k`
/// emission logs next to it.
pub fn cmd_eval(cfg: &ExperimentConfig, model: &Model, split: &str, ks: &[usize], csv: &Path) -> Result<Vec<EvalRow>> {
    let (data, _) = open_dataset(cfg)?;
    let samples = data.split(split)?;
    model.check_features(data.spec.feature_dim)?;
    let rows = eval_rows(cfg, model, samples, ks, csv.parent())?;
    write_csv(csv, &rows)?;
    Ok(rows)
}

fn eval_rows(
    cfg: &ExperimentConfig,
    model: &Model,
    samples: &[waitk::data::Sample],
    ks: &[usize],
    log_dir: Option<&Path>,
) -> Result<Vec<EvalRow>> {
    if model.config.teacher {
        return Ok(vec![evaluate_teacher(model, samples, cfg.eval.beam, cfg.eval.length_penalty)?]);
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let (row, logs) = evaluate_simultaneous(model, samples, &cfg.decode_config(k), cfg.eval.boundary_tolerance)?;
        if let Some(dir) = log_dir {
            write_emission_logs(&dir.join(format!("emissions_k{k}.jsonl")), &logs)?;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Trains a teacher into `<out_dir>/teacher` and distils its logits for the
/// training split.
pub fn teacher_pipeline(cfg: &ExperimentConfig, data: &Dataset) -> Result<PathBuf> {
    let mut tcfg = cfg.clone();
    tcfg.out_dir = cfg.out_dir.join("teacher");
    tcfg.toggles.kd_on = false;
    let out = train(&tcfg, data, Role::Teacher)?;
    let dir = cfg.out_dir.join("teacher_logits");
    distill(&out.best, &data.train, cfg.kd_temperature, &dir)?;
    Ok(dir)
}

pub struct AblationResult {
    pub row: AblationRow,
    pub eval: EvalRow,
    pub best_step: usize,
}

pub const ABLATION_HEADER: &str = "row,segmentation,ctc,kd,reencode,fusion,data_seed,model_seed,steps,best_step";

/// Trains and tests each ablation row from `base`, all on the same data and
/// seeds, and writes `ablation.csv` in `base.out_dir`.
pub fn cmd_ablate(base: &ExperimentConfig, rows: &[AblationRow]) -> Result<Vec<AblationResult>> {
    let (data, checksum) = open_dataset(base)?;
    std::fs::create_dir_all(&base.out_dir)?;
    let logits = if rows.iter().any(AblationRow::needs_teacher) {
        Some(match &base.teacher_logits {
            Some(dir) => dir.clone(),
            None => teacher_pipeline(base, &data)?,
        })
    } else {
        None
    };
    let mut results = Vec::with_capacity(rows.len());
    let mut csv = format!("{ABLATION_HEADER},{CSV_HEADER}\n");
    for &row in rows {
        let mut cfg = base.clone();
        cfg.toggles = row.toggles(&base.toggles);
        cfg.teacher_logits = logits.clone();
        cfg.out_dir = base.out_dir.join(slug(row.label()));
        let out = train(&cfg, &data, Role::Student)?;
        record_run(&cfg, &data, &checksum, Role::Student, &out)?;
        let eval = evaluate_simultaneous(&out.best, &data.test, &cfg.decode_config(cfg.k), cfg.eval.boundary_tolerance)?.0;
        let t = &cfg.toggles;
        writeln!(
            csv,
            "{},{:?},{},{},{},{},{},{},{},{},{}",
            row.label(),
            t.segmentation,
            t.ctc_on,
            t.kd_on,
            t.reencode,
            t.fusion,
            data.spec.seed,
            cfg.seeds.model,
            out.steps,
            out.best_step,
            eval.csv_line()
        )
        .expect("string write");
        results.push(AblationResult {
            row,
            eval,
            best_step: out.best_step,
        });
    }
    std::fs::write(base.out_dir.join("ablation.csv"), csv)?;
    Ok(results)
}

/// One model per `k` in `eval.k_list`, each tested at its own `k`;
/// writes `sweep_k.csv` in `base.out_dir`.
pub fn cmd_sweep_k(base: &ExperimentConfig) -> Result<Vec<EvalRow>> {
    let (data, checksum) = open_dataset(base)?;
    std::fs::create_dir_all(&base.out_dir)?;
    let mut rows = Vec::new();
    for &k in &base.eval.k_list {
        let mut cfg = base.clone();
        cfg.k = k;
        cfg.out_dir = base.out_dir.join(format!("k{k}"));
        let out = train(&cfg, &data, Role::Student)?;
        record_run(&cfg, &data, &checksum, Role::Student, &out)?;
        rows.push(evaluate_simultaneous(&out.best, &data.test, &cfg.decode_config(k), cfg.eval.boundary_tolerance)?.0);
    }
    write_csv(&base.out_dir.join("sweep_k.csv"), &rows)?;
    Ok(rows)
}

fn slug(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    s.trim_matches('_').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs_are_distinct() {
        let mut s: Vec<String> = AblationRow::ALL.iter().map(|r| slug(r.label())).collect();
        assert_eq!(s[1], "bp");
        s.sort();
        s.dedup();
        assert_eq!(s.len(), AblationRow::ALL.len());
    }
}

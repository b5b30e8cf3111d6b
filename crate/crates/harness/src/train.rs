//! Mini-batch training with periodic dev evaluation, plateau schedule and
//! best-checkpoint tracking.
//!
//! Samples of a batch run in parallel, each on its own graph and gradient
//! store; the stores are summed in batch order so results do not depend on
//! the thread count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use waitk::autodiff::Graph;
use waitk::data::{corpus_stats, Dataset, Sample};
use waitk::engine::TeacherLogits;
use waitk::losses::LossParts;
use waitk::model::{Model, TrainExample, TrainOptions};
use waitk::optim::{OptimizerState, PlateauSchedule};
use waitk::params::GradStore;
use waitk::{Error, Result, Tensor};

use crate::config::ExperimentConfig;
use crate::eval::{evaluate_simultaneous, evaluate_teacher, EvalRow, CSV_HEADER};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Student,
    Teacher,
}

pub struct TrainOutcome {
    /// Parameters of the best dev evaluation (the initial model for a
    /// zero-step budget).
    pub best: Model,
    pub steps: usize,
    pub best_step: usize,
    pub best_dev: Option<EvalRow>,
    pub stopped_by_schedule: bool,
    pub checkpoint: PathBuf,
}

pub fn logit_file(dir: &Path, sample_id: u64) -> PathBuf {
    dir.join(format!("{sample_id}.logits"))
}

/// Teacher logits for every sample, in sample order, with their shared
/// temperature.
pub fn load_teacher_logits(dir: &Path, samples: &[Sample], text_classes: usize) -> Result<(Vec<Tensor>, f64)> {
    let mut out = Vec::with_capacity(samples.len());
    let mut temperature = None;
    for s in samples {
        let path = logit_file(dir, s.id);
        if !path.exists() {
            return Err(Error::Config(format!("missing teacher logits {}", path.display())));
        }
        let t = TeacherLogits::read(&path)?;
        if t.sample_id != s.id {
            return Err(Error::Data(format!("{} holds sample {}", path.display(), t.sample_id)));
        }
        if t.logits.cols() != text_classes || t.logits.rows() != s.text.len() + 1 {
            return Err(Error::Config(format!(
                "teacher logits {}×{} do not fit student vocabulary {text_classes} and target length {}",
                t.logits.rows(),
                t.logits.cols(),
                s.text.len() + 1
            )));
        }
        match temperature {
            None => temperature = Some(t.temperature),
            Some(g) if g != t.temperature => {
                return Err(Error::Config("teacher logit files disagree on temperature".into()));
            }
            _ => {}
        }
        out.push(t.logits);
    }
    Ok((out, temperature.unwrap_or(1.0)))
}

/// Builds the untrained model for `cfg` on `data`.
pub fn initial_model(cfg: &ExperimentConfig, data: &Dataset, role: Role) -> Result<Model> {
    let rate = corpus_stats(data.train.iter()).frames_per_gloss;
    let mc = cfg.model_config(&data.spec, rate, role == Role::Teacher);
    Model::new(mc, cfg.seeds.model)
}

fn sample_grads(
    model: &Model,
    sample: &Sample,
    teacher: Option<&Tensor>,
    opts: &TrainOptions,
    dropout: ChaCha8Rng,
) -> Result<(LossParts, GradStore)> {
    let mut g = Graph::with_params(&model.params);
    g.enable_dropout(dropout);
    let ex = TrainExample {
        features: &sample.features,
        gloss: &sample.gloss,
        text: &sample.text,
        teacher_logits: teacher,
    };
    let out = model.forward_train(&mut g, &ex, opts)?;
    out.parts.check_finite()?;
    let mut grads = GradStore::for_params(&model.params);
    g.backward(out.loss, &mut grads)?;
    Ok((out.parts, grads))
}

fn mean_parts(parts: &[LossParts]) -> [Option<f64>; 4] {
    let n = parts.len() as f64;
    let avg = |f: fn(&LossParts) -> Option<f64>| -> Option<f64> {
        let v: Vec<f64> = parts.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / n)
    };
    [avg(|p| p.ctc), avg(|p| p.if_), avg(|p| p.soft), avg(|p| p.hard)]
}

fn dev_eval(model: &Model, cfg: &ExperimentConfig, dev: &[Sample], role: Role) -> Result<EvalRow> {
    match role {
        Role::Student => Ok(evaluate_simultaneous(model, dev, &cfg.decode_config(cfg.k), cfg.eval.boundary_tolerance)?.0),
        Role::Teacher => evaluate_teacher(model, dev, cfg.eval.beam, cfg.eval.length_penalty),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Trains under `cfg` and writes `best.json`, `train_log.csv` and
/// `dev_log.csv` to `cfg.out_dir`. A non-finite loss or gradient aborts
/// with the pre-step parameters saved as `last_good.json`.
pub fn train(cfg: &ExperimentConfig, data: &Dataset, role: Role) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut model = initial_model(cfg, data, role)?;
    let opts = cfg.train_options();
    let kd = role == Role::Student && cfg.toggles.kd_on;
    let (teacher, opts) = if kd {
        let dir = cfg
            .teacher_logits
            .as_ref()
            .ok_or_else(|| Error::Config("kd_on requires teacher_logits".into()))?;
        let (logits, temperature) = load_teacher_logits(dir, &data.train, model.vocab().text_classes())?;
        (Some(logits), TrainOptions { kd_temperature: temperature, ..opts })
    } else {
        (None, opts)
    };
    let dev: &[Sample] = match cfg.eval.dev_limit {
        Some(n) => &data.dev[..n.min(data.dev.len())],
        None => &data.dev,
    };

    std::fs::create_dir_all(&cfg.out_dir)?;
    let checkpoint = cfg.out_dir.join("best.json");
    let mut train_log = String::from("step,lr,loss,ctc,if,soft,hard\n");
    let mut dev_log = format!("step,lr,{CSV_HEADER}\n");
    let flush = |train_log: &str, dev_log: &str| -> Result<()> {
        std::fs::write(cfg.out_dir.join("train_log.csv"), train_log)?;
        std::fs::write(cfg.out_dir.join("dev_log.csv"), dev_log)?;
        Ok(())
    };

    let mut optimizer = OptimizerState::new(&model.params, cfg.adam());
    let o = &cfg.optimizer;
    let mut schedule = PlateauSchedule::new(o.patience, o.factor, o.min_lr)?;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seeds.shuffle);
    let mut cursor = order.len();
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_dev = None;
    let mut best_step = 0;
    let mut best = model.clone();
    let mut stopped = false;
    let mut step = 0;
    model.save(&checkpoint)?;

    while step < o.max_steps {
        let mut batch = Vec::with_capacity(o.batch_size);
        while batch.len() < o.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut shuffle);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let results: Vec<Result<(LossParts, GradStore)>> = batch
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.dropout);
                rng.set_stream((step * o.batch_size + j) as u64);
                let t = teacher.as_ref().map(|v| &v[i]);
                sample_grads(&model, &data.train[i], t, &opts, rng)
            })
            .collect();
        let mut total = GradStore::for_params(&model.params);
        let mut parts = Vec::with_capacity(batch.len());
        let mut failure = None;
        for r in results {
            match r {
                Ok((p, g)) => {
                    total.add_store(&g);
                    parts.push(p);
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        total.scale(1.0 / batch.len() as f64);
        let scheduled = optimizer.lr();
        if step < o.warmup_steps {
            optimizer.set_lr(scheduled * (step + 1) as f64 / o.warmup_steps as f64);
        }
        let stepped = match failure {
            Some(e) => Err(e),
            None => optimizer.step(&mut model.params, &total),
        };
        optimizer.set_lr(scheduled);
        if let Err(e) = stepped {
            if matches!(e, Error::NonFinite(_)) {
                model.save(&cfg.out_dir.join("last_good.json"))?;
                flush(&train_log, &dev_log)?;
            }
            return Err(e);
        }
        step += 1;

        let m = mean_parts(&parts);
        let loss = cfg.weights.ctc * m[0].unwrap_or(0.0)
            + cfg.weights.if_ * m[1].unwrap_or(0.0)
            + cfg.weights.soft * m[2].unwrap_or(0.0)
            + cfg.weights.hard * m[3].unwrap_or(0.0);
        writeln!(
            train_log,
            "{step},{},{loss},{},{},{},{}",
            optimizer.lr(),
            opt(m[0]),
            opt(m[1]),
            opt(m[2]),
            opt(m[3])
        )
        .expect("string write");

        if step % o.eval_every == 0 || step == o.max_steps {
            let row = dev_eval(&model, cfg, dev, role)?;
            writeln!(dev_log, "{step},{},{}", optimizer.lr(), row.csv_line()).expect("string write");
            let metric = row.bleu[3];
            if metric > best_metric {
                best_metric = metric;
                best_step = step;
                best = model.clone();
                best_dev = Some(row);
                best.save(&checkpoint)?;
            }
            let outcome = schedule.step(optimizer.lr(), metric)?;
            optimizer.set_lr(outcome.lr);
            flush(&train_log, &dev_log)?;
            if outcome.stop {
                stopped = true;
                break;
            }
        }
    }
    flush(&train_log, &dev_log)?;
    Ok(TrainOutcome {
        best,
        steps: step,
        best_step,
        best_dev,
        stopped_by_schedule: stopped,
        checkpoint,
    })
}

/// Writes teacher-forced logits of `teacher` for every sample of `samples`
/// to `dir`, one file per sample. Returns the number of files written.
pub fn distill(teacher: &Model, samples: &[Sample], temperature: f64, dir: &Path) -> Result<usize> {
    if !teacher.config.teacher {
        return Err(Error::Config("distillation needs a teacher checkpoint".into()));
    }
    std::fs::create_dir_all(dir)?;
    let files: Vec<(PathBuf, TeacherLogits)> = samples
        .par_iter()
        .map(|s| {
            let logits = teacher.teacher_forced_logits(&s.features, &s.text, 1)?;
            Ok((
                logit_file(dir, s.id),
                TeacherLogits {
                    sample_id: s.id,
                    temperature,
                    logits,
                },
            ))
        })
        .collect::<Result<_>>()?;
    for (path, t) in &files {
        t.write(path)?;
    }
    Ok(files.len())
}

/// Checks that a teacher can distil into a student configured by `cfg`.
pub fn check_teacher_compatible(teacher: &Model, data: &Dataset) -> Result<()> {
    let c = &teacher.config;
    if c.feature_dim != data.spec.feature_dim || c.gloss_vocab != data.spec.gloss_vocab || c.text_vocab != data.spec.text_vocab {
        return Err(Error::Config(format!(
            "teacher dims (features {}, glosses {}, words {}) do not match the dataset ({}, {}, {})",
            c.feature_dim, c.gloss_vocab, c.text_vocab, data.spec.feature_dim, data.spec.gloss_vocab, data.spec.text_vocab
        )));
    }
    Ok(())
}

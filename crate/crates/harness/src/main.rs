use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use waitk::encoder::FusionMode;
use waitk::model::Model;
use waitk::Result;
use waitk_harness::commands::{cmd_ablate, cmd_distill, cmd_eval, cmd_sweep_k, cmd_train, gen_data, load_spec};
use waitk_harness::config::{AblationRow, ExperimentConfig, ModelDims, SegmentationToggle};
use waitk_harness::eval::{EvalRow, CSV_HEADER};
use waitk_harness::exit_code;
use waitk_harness::train::Role;

#[derive(Parser)]
#[command(name = "waitk", about = "Simultaneous translation experiments on synthetic streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// JSON experiment config; flags below override its fields.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    teacher_logits: Option<PathBuf>,
    /// Model size preset: desk or large.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    dev_limit: Option<usize>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    static_segment: bool,
    #[arg(long)]
    ctc: Option<bool>,
    #[arg(long)]
    kd: Option<bool>,
    #[arg(long)]
    reencode: Option<bool>,
    /// add, concat_project or reencode_only.
    #[arg(long)]
    fusion: Option<FusionMode>,
    #[arg(long)]
    beam: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.data_dir {
            c.data_dir = v.clone();
        }
        if let Some(v) = &self.out_dir {
            c.out_dir = v.clone();
        }
        if let Some(v) = &self.teacher_logits {
            c.teacher_logits = Some(v.clone());
        }
        if let Some(v) = &self.preset {
            c.model = ModelDims::preset(v)?;
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.max_steps {
            c.optimizer.max_steps = v;
        }
        if let Some(v) = self.batch_size {
            c.optimizer.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.optimizer.lr = v;
        }
        if let Some(v) = self.eval_every {
            c.optimizer.eval_every = v;
        }
        if let Some(v) = self.dev_limit {
            c.eval.dev_limit = Some(v);
        }
        if let Some(v) = self.model_seed {
            c.seeds.model = v;
        }
        if self.static_segment {
            c.toggles.segmentation = SegmentationToggle::StaticSegment;
        }
        if let Some(v) = self.ctc {
            c.toggles.ctc_on = v;
        }
        if let Some(v) = self.kd {
            c.toggles.kd_on = v;
        }
        if let Some(v) = self.reencode {
            c.toggles.reencode = v;
        }
        if let Some(v) = self.fusion {
            c.toggles.fusion = v;
        }
        if let Some(v) = self.beam {
            c.eval.beam = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        /// JSON synthetic spec; defaults to the config's `data` section.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        dev: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Train a simultaneous (student) model.
    Train {
        #[command(flatten)]
        o: Overrides,
    },
    /// Train an offline teacher model.
    TrainTeacher {
        #[command(flatten)]
        o: Overrides,
    },
    /// Write teacher logits for every training sample.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Score a checkpoint at each k.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
        /// Comma-separated k values; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long)]
        csv: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Train and test ablation rows with shared seeds.
    Ablate {
        /// Comma-separated row labels (Native, +BP, +BP+CTC, +BP+KD,
        /// +BP+Re-encode, full); all rows by default.
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<String>>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Train one model per k and test each.
    SweepK {
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[command(flatten)]
        o: Overrides,
    },
}

fn print_rows(rows: &[EvalRow]) {
    println!("{CSV_HEADER}");
    for r in rows {
        println!("{}", r.csv_line());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out, train, dev, test, o } => {
            let cfg = o.resolve()?;
            let spec = match spec {
                Some(p) => load_spec(&p)?,
                None => cfg.data.clone(),
            };
            let mut sizes = cfg.splits;
            sizes.train = train.unwrap_or(sizes.train);
            sizes.dev = dev.unwrap_or(sizes.dev);
            sizes.test = test.unwrap_or(sizes.test);
            let r = gen_data(&spec, sizes, &out)?;
            let s = &r.stats;
            println!("samples {} frames {} glosses {}", s.samples, s.frames, s.glosses);
            println!(
                "mean frames {:.3} mean sentence length {:.3} frames per gloss {:.3}",
                s.mean_frames, s.mean_sentence_length, s.frames_per_gloss
            );
            println!("checksum {}", r.checksum);
        }
        Command::Train { o } => report_train(&o.resolve()?, Role::Student)?,
        Command::TrainTeacher { o } => report_train(&o.resolve()?, Role::Teacher)?,
        Command::Distill { teacher, out, o } => {
            let cfg = o.resolve()?;
            let (dir, n) = cmd_distill(&cfg, &teacher, out.as_deref())?;
            println!("wrote {n} logit files to {}", dir.display());
        }
        Command::Eval { checkpoint, split, ks, csv, o } => {
            let cfg = o.resolve()?;
            let model = Model::load(&checkpoint)?;
            let ks = ks.unwrap_or_else(|| cfg.eval.k_list.clone());
            print_rows(&cmd_eval(&cfg, &model, &split, &ks, &csv)?);
        }
        Command::Ablate { rows, o } => {
            let cfg = o.resolve()?;
            let rows = match rows {
                Some(r) => r.iter().map(|s| AblationRow::parse(s)).collect::<Result<Vec<_>>>()?,
                None => AblationRow::ALL.to_vec(),
            };
            for r in cmd_ablate(&cfg, &rows)? {
                println!("{:<14} bleu4 {:>7.3} al {}", r.row.label(), r.eval.bleu[3], r.eval.al.unwrap_or(f64::NAN));
            }
            println!("table written to {}", Path::new(&cfg.out_dir).join("ablation.csv").display());
        }
        Command::SweepK { ks, mut o } => {
            o.k = None;
            let mut cfg = o.resolve()?;
            if let Some(ks) = ks {
                cfg.eval.k_list = ks;
            }
            print_rows(&cmd_sweep_k(&cfg)?);
        }
    }
    Ok(())
}

fn report_train(cfg: &ExperimentConfig, role: Role) -> Result<()> {
    let out = cmd_train(cfg, role)?;
    println!("steps {} best step {} checkpoint {}", out.steps, out.best_step, out.checkpoint.display());
    if let Some(row) = out.best_dev {
        print_rows(&[row]);
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

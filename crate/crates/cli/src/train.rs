use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use itm_core::dataio::{Dataset, Vocabulary};
use itm_core::trainer::{
    begin_phase2, evaluate_split, load_checkpoint, run_phase1, run_phase2, save_checkpoint, Checkpoint, ModelState,
    Phase, StepMetrics, TrainConfig, TrainObserver, TrainingData,
};
use itm_core::{Error, Result};

use crate::common::{input_error, train_config, write_text};
use crate::Globals;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// dataset manifest
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    phase: PhaseArg,
    /// output directory for metrics.tsv, checkpoints and eval.tsv
    #[arg(long)]
    out: PathBuf,
    /// continue from a checkpoint written by an earlier run
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
}

pub const METRICS_FILE: &str = "metrics.tsv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

struct Progress {
    metrics: BufWriter<File>,
    metrics_path: PathBuf,
    last: PathBuf,
    template: Checkpoint,
    verbose: u8,
    epochs: usize,
    loss_sum: f64,
    steps: usize,
}

impl Progress {
    fn io(&self, source: std::io::Error) -> Error {
        Error::Io {
            path: self.metrics_path.clone(),
            source,
        }
    }
}

impl TrainObserver for Progress {
    fn on_step(&mut self, m: &StepMetrics) -> Result<()> {
        let row = m.to_tsv_row();
        writeln!(self.metrics, "{row}").map_err(|e| self.io(e))?;
        if self.verbose > 1 {
            println!("{row}");
        }
        self.loss_sum += m.loss;
        self.steps += 1;
        Ok(())
    }

    fn on_epoch_end(&mut self, state: &ModelState) -> Result<()> {
        self.metrics.flush().map_err(|e| self.io(e))?;
        self.template.state = state.clone();
        save_checkpoint(&self.last, &self.template)?;
        println!(
            "phase {} epoch {}/{} mean loss {:.6}",
            state.phase.number(),
            state.epoch,
            self.epochs,
            self.loss_sum / self.steps.max(1) as f64
        );
        self.loss_sum = 0.0;
        self.steps = 0;
        Ok(())
    }
}

fn open_metrics(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    if append && path.exists() {
        let f = OpenOptions::new().append(true).open(path).map_err(io)?;
        return Ok(BufWriter::new(f));
    }
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "{}", StepMetrics::TSV_HEADER).map_err(io)?;
    Ok(w)
}

fn checkpoint(cfg: &TrainConfig, vocab: &Vocabulary, ds: &Dataset, state: ModelState) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        vocab: vocab.clone(),
        dataset_fingerprint: ds.fingerprint.clone(),
        state,
    }
}

pub fn run(g: &Globals, a: Args) -> Result<()> {
    let resumed = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let cfg = train_config(g.config.as_deref(), resumed.as_ref().map(|c| &c.config), g.seed)?;
    let ds = Dataset::load(&a.data)?;
    if let Some(ck) = &resumed {
        if ck.dataset_fingerprint != ds.fingerprint {
            return Err(input_error(format!(
                "checkpoint was trained on dataset {} but {} has fingerprint {}",
                ck.dataset_fingerprint,
                a.data.display(),
                ds.fingerprint
            )));
        }
        if ck.config.model_config() != cfg.model_config() {
            return Err(input_error("config changes the model shape of the resumed checkpoint"));
        }
    }
    let data = TrainingData::new(&ds, resumed.as_ref().map(|c| c.vocab.clone()))?;
    let mut state = match resumed {
        Some(ck) => ck.state,
        None if a.phase == PhaseArg::Two => {
            return Err(input_error("--phase 2 needs --resume with a phase-1 checkpoint"));
        }
        None => ModelState::init(&cfg, &data)?,
    };

    std::fs::create_dir_all(&a.out).map_err(|source| Error::Io {
        path: a.out.clone(),
        source,
    })?;
    let metrics_path = a.out.join(METRICS_FILE);
    let mut progress = Progress {
        metrics: open_metrics(&metrics_path, a.resume.is_some())?,
        metrics_path,
        last: a.out.join(LAST_CHECKPOINT),
        template: checkpoint(&cfg, &data.vocab, &ds, state.clone()),
        verbose: g.verbose,
        epochs: cfg.phase1_epochs,
        loss_sum: 0.0,
        steps: 0,
    };
    if g.verbose > 0 {
        println!(
            "dataset {} images (train {}, test {}), {} parameters, seed {}",
            ds.n_images(),
            ds.train.len(),
            ds.test.len(),
            state.params.parameter_count(),
            cfg.seed
        );
    }

    if a.phase != PhaseArg::Two && state.phase == Phase::One {
        state = run_phase1(&cfg, &data, state, &mut progress)?;
        save_checkpoint(&a.out.join("phase1.ckpt"), &checkpoint(&cfg, &data.vocab, &ds, state.clone()))?;
    } else if a.phase == PhaseArg::One {
        return Err(input_error("checkpoint is already in phase 2"));
    }
    if a.phase != PhaseArg::One {
        if state.phase == Phase::One {
            state = begin_phase2(&cfg, &data, state)?;
            if g.verbose > 0 {
                println!("mined top-{} captions and top-{} images per training item", cfg.top_k, cfg.top_q);
            }
        }
        progress.epochs = cfg.phase2_epochs;
        state = run_phase2(&cfg, &data, state, &mut progress)?;
        save_checkpoint(&a.out.join("phase2.ckpt"), &checkpoint(&cfg, &data.vocab, &ds, state.clone()))?;
    }
    save_checkpoint(&progress.last, &checkpoint(&cfg, &data.vocab, &ds, state.clone()))?;

    if !ds.test.is_empty() {
        let report = evaluate_split(&state.params, &data, &ds.test, None)?;
        println!("test split, {} images", ds.test.len());
        println!("{report}");
        let tsv = format!("{}\n{}\n", itm_core::evaluation::RecallReport::TSV_HEADER, report.to_tsv_row());
        write_text(&a.out.join("eval.tsv"), &tsv)?;
    }
    Ok(())
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::checkpoint::save_checkpoint;
use super::config::{LrSchedule, RunConfig, Task};
use super::model::Model;
use crate::analysis::{in_batch_retrieval, knn_classify};
use crate::error::{Error, Result};
use crate::objectives::{dino_ema_update, dino_loss, make_views, update_center};
use crate::optim::Optimizer;
use crate::synthworld::{make_splits, Dataset, Splits, World};
use crate::tensor::{Rng, RngState, Stream, Tape};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,loss,retrieval@1,knn_acc";
pub const FAILURE_FILE: &str = "failure.json";
/// Train items used as the k-NN reference set during periodic evaluation.
pub const EVAL_KNN_REFERENCE: usize = 2048;

/// Learning rate at 1-based `step`: linear warmup, then constant or cosine
/// decay that reaches zero after the last step.
pub fn lr_at(cfg: &RunConfig, step: usize) -> f64 {
    let base = cfg.optim.lr;
    let warm = cfg.warmup_steps;
    if step <= warm {
        return base * step as f64 / warm as f64;
    }
    match cfg.lr_schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            let span = cfg.steps.saturating_sub(warm).max(1) as f64;
            let progress = (step - warm - 1) as f64 / span;
            0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Metrics of one periodic evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalRow {
    pub retrieval_at_1: Option<f64>,
    pub knn_acc: Option<f64>,
}

impl EvalRow {
    /// Metric used to pick the best checkpoint.
    pub fn primary(&self, task: Task) -> Option<f64> {
        match task {
            Task::Clip => self.retrieval_at_1,
            Task::Dino => self.knn_acc,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub best_step: usize,
    pub best_metric: Option<f64>,
    pub last_eval: EvalRow,
    pub out_dir: PathBuf,
}

/// Reshuffles the train indices at every epoch; incomplete tails are
/// dropped.
struct BatchSampler {
    rng: Rng,
    seed: u64,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchSampler {
    fn new(seed: u64, n: usize, batch: usize) -> Self {
        BatchSampler {
            rng: Rng::new(seed, Stream::Batches),
            seed,
            order: (0..n).collect(),
            cursor: n,
            batch,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let b = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        b
    }

    fn state(&self) -> RngState {
        self.rng.state(self.seed)
    }
}

/// Periodic evaluation on the first `eval_size` validation items.
pub fn periodic_eval(cfg: &RunConfig, model: &Model<f32>, splits: &Splits) -> Result<EvalRow> {
    let n = cfg.eval_size.min(splits.val.len());
    let val = &splits.val;
    let (img_enc, store) = model.image_encoder();
    let img = model.encode(img_enc, store, n, &|idx| val.image_batch(idx))?;
    let retrieval_at_1 = match model.text_encoder() {
        Some((te, ts)) => {
            let txt = model.encode(te, ts, n, &|idx| val.text_batch(idx))?;
            Some(in_batch_retrieval(&img, &txt, cfg.batch_size.min(n), 1)?.mean)
        }
        None => None,
    };
    let m = EVAL_KNN_REFERENCE.min(splits.train.len());
    let train = &splits.train;
    let reference = model.encode(img_enc, store, m, &|idx| train.image_batch(idx))?;
    let labels = train.labels();
    let knn = knn_classify(&reference, &labels[..m], &img, &val.labels()[..n], cfg.knn_k.min(m))?;
    Ok(EvalRow {
        retrieval_at_1,
        knn_acc: Some(knn),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

fn write_failure(out: &Path, step: usize, loss: f64, data: &Dataset, idx: &[usize], rng: &RngState) -> Result<PathBuf> {
    let path = out.join(FAILURE_FILE);
    let report = json!({
        "step": step,
        "loss": format!("{loss}"),
        "batch_indices": idx,
        "batch_seeds": idx.iter().map(|&i| data.pairs[i].seed).collect::<Vec<_>>(),
        "batch_rng": rng,
    });
    std::fs::write(&path, format!("{}\n", serde_json::to_string_pretty(&report)?))?;
    Ok(path)
}

/// Trains the configured task, writing `metrics.csv`, `final/` and `best/`
/// under `out`. `on_log` receives each evaluation row.
pub fn train(cfg: &RunConfig, out: &Path, on_log: &mut dyn FnMut(usize, f64, &EvalRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let splits = make_splits(
        &cfg.world,
        cfg.data.n_train,
        cfg.data.n_val,
        cfg.data.n_test,
        cfg.data.seed,
        cfg.data.compositional,
    )?;
    let world = World::new(&cfg.world)?;
    let mut model = Model::<f32>::build(cfg)?;
    let mut opt = match &model {
        Model::Clip { store, .. } => Optimizer::new(cfg.optim, store),
        Model::Dino(s) => Optimizer::new(cfg.optim, &s.student),
    };
    let mut sampler = BatchSampler::new(cfg.seed, splits.train.len(), cfg.batch_size);
    let mut augment = Rng::new(cfg.seed, Stream::Augment);

    let mut csv = String::new();
    writeln!(csv, "{METRICS_HEADER}").expect("string write");
    let rng_states = |s: &BatchSampler, a: &Rng| {
        let mut m = BTreeMap::from([("batches".to_string(), s.state())]);
        if cfg.task == Task::Dino {
            m.insert("augment".into(), a.state(cfg.seed));
        }
        m
    };

    let mut best: Option<(f64, usize)> = None;
    let mut final_loss = None;
    let mut last_eval = EvalRow::default();
    if cfg.steps == 0 {
        let states = rng_states(&sampler, &augment);
        save_checkpoint(&out.join("final"), cfg, &model, 0, &states)?;
        save_checkpoint(&out.join("best"), cfg, &model, 0, &states)?;
    }
    for step in 1..=cfg.steps {
        let before = sampler.state();
        let idx = sampler.next();
        let lr = lr_at(cfg, step);
        let loss = match &mut model {
            Model::Clip { state, store } => {
                let mut t = Tape::new();
                let p = store.bind(&mut t, true);
                let f = state.loss(&mut t, &p, &splits.train.image_batch(&idx), &splits.train.text_batch(&idx))?;
                let loss = t.value(f.loss).item() as f64;
                if loss.is_finite() {
                    let g = t.backward(f.loss)?;
                    store.zero_grad();
                    store.accumulate(&g, &p);
                    opt.step(store, lr);
                }
                loss
            }
            Model::Dino(state) => {
                let latents: Vec<Vec<usize>> = idx.iter().map(|&i| splits.train.pairs[i].z.clone()).collect();
                let views = make_views::<f32>(&world, &latents, state.cfg.token_dropout, &mut augment);
                let mut t = Tape::new();
                let ps = state.student.bind(&mut t, true);
                let pt = state.teacher.bind(&mut t, false);
                let f = dino_loss(&mut t, state, &ps, &pt, &views)?;
                let loss = t.value(f.loss).item() as f64;
                if loss.is_finite() {
                    let g = t.backward(f.loss)?;
                    state.student.zero_grad();
                    state.student.accumulate(&g, &ps);
                    opt.step(&mut state.student, lr);
                    dino_ema_update(&state.student, &mut state.teacher, state.cfg.momentum)?;
                    update_center(state, &f.teacher_mean);
                }
                loss
            }
        };
        if !loss.is_finite() {
            std::fs::write(out.join(METRICS_FILE), &csv)?;
            let path = write_failure(out, step, loss, &splits.train, &idx, &before)?;
            return Err(Error::numeric(format!(
                "non-finite loss {loss} at step {step}; offending batch written to {}",
                path.display()
            )));
        }
        final_loss = Some(loss);
        let row = if step % cfg.eval_every == 0 || step == cfg.steps {
            let r = periodic_eval(cfg, &model, &splits)?;
            on_log(step, loss, &r);
            Some(r)
        } else {
            None
        };
        let r = row.unwrap_or_default();
        writeln!(csv, "{step},{loss},{},{}", fmt_opt(r.retrieval_at_1), fmt_opt(r.knn_acc)).expect("string write");
        if let Some(r) = row {
            last_eval = r;
            if let Some(m) = r.primary(cfg.task) {
                if best.is_none_or(|(b, _)| m > b) {
                    best = Some((m, step));
                    save_checkpoint(&out.join("best"), cfg, &model, step, &rng_states(&sampler, &augment))?;
                }
            }
        }
    }
    if cfg.steps > 0 {
        save_checkpoint(&out.join("final"), cfg, &model, cfg.steps, &rng_states(&sampler, &augment))?;
    }
    let mut f = std::fs::File::create(out.join(METRICS_FILE))?;
    f.write_all(csv.as_bytes())?;
    Ok(TrainOutcome {
        steps: cfg.steps,
        final_loss,
        best_step: best.map_or(0, |b| b.1),
        best_metric: best.map(|b| b.0),
        last_eval,
        out_dir: out.to_path_buf(),
    })
}

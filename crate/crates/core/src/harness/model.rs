use super::config::{RunConfig, Task};
use crate::error::{Error, Result};
use crate::nn::backbone::InputBatch;
use crate::nn::params::ParamStore;
use crate::objectives::{clip_normalize, dino_encoder_output, ClipState, DinoState};
use crate::sparo::{Encoder, SlotLayout};
use crate::tensor::{Rng, Scalar, Stream, Tape, Tensor};

/// Environment variable holding the evaluation thread count.
pub const EVAL_THREADS_VAR: &str = "SPARO_EVAL_THREADS";
const EVAL_CHUNK: usize = 64;

pub fn eval_threads() -> usize {
    std::env::var(EVAL_THREADS_VAR)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Trainable state of a run.
#[derive(Clone, Debug)]
pub enum Model<T> {
    Clip { state: ClipState, store: ParamStore<T> },
    Dino(DinoState<T>),
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from `cfg.seed`.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed, Stream::Init);
        Ok(match cfg.task {
            Task::Clip => {
                let mut store = ParamStore::new();
                let state = ClipState::new(&mut store, &mut rng, &cfg.image_encoder(), &cfg.text_encoder())?;
                Model::Clip { state, store }
            }
            Task::Dino => Model::Dino(DinoState::new(&mut rng, &cfg.image_encoder(), &cfg.dino)?),
        })
    }

    /// Every persisted tensor in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            Model::Clip { store, .. } => store.entries().iter().map(|e| (e.name.clone(), &e.value)).collect(),
            Model::Dino(s) => s
                .student
                .entries()
                .iter()
                .map(|e| (format!("student.{}", e.name), &e.value))
                .chain(s.teacher.entries().iter().map(|e| (format!("teacher.{}", e.name), &e.value)))
                .chain(std::iter::once(("center".to_string(), &s.center)))
                .collect(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        match self {
            Model::Clip { store, .. } => store
                .entries_mut()
                .iter_mut()
                .map(|e| (e.name.clone(), &mut e.value))
                .collect(),
            Model::Dino(s) => s
                .student
                .entries_mut()
                .iter_mut()
                .map(|e| (format!("student.{}", e.name), &mut e.value))
                .chain(
                    s.teacher
                        .entries_mut()
                        .iter_mut()
                        .map(|e| (format!("teacher.{}", e.name), &mut e.value)),
                )
                .chain(std::iter::once(("center".to_string(), &mut s.center)))
                .collect(),
        }
    }

    /// Image-side encoder used for evaluation (the teacher for
    /// self-distillation).
    pub fn image_encoder(&self) -> (&Encoder, &ParamStore<T>) {
        match self {
            Model::Clip { state, store } => (&state.image, store),
            Model::Dino(s) => (&s.net.encoder, &s.teacher),
        }
    }

    pub fn text_encoder(&self) -> Option<(&Encoder, &ParamStore<T>)> {
        match self {
            Model::Clip { state, store } => Some((&state.text, store)),
            Model::Dino(_) => None,
        }
    }

    pub fn task(&self) -> Task {
        match self {
            Model::Clip { .. } => Task::Clip,
            Model::Dino(_) => Task::Dino,
        }
    }

    /// Evaluation encodings of `n` items, computed in fixed-size chunks so
    /// the result does not depend on the thread count. Contrastive
    /// encodings are slot-normalized; self-distillation encodings are raw.
    pub fn encode(
        &self,
        encoder: &Encoder,
        store: &ParamStore<T>,
        n: usize,
        make: &(dyn Fn(&[usize]) -> InputBatch<T> + Sync),
    ) -> Result<Vec<Vec<f64>>> {
        let raw = encode_raw(encoder, store, n, make, self.task() == Task::Dino)?;
        if self.task() == Task::Dino {
            return Ok(raw);
        }
        let slot = encoder.sparo().is_some();
        let layout = encoder.layout();
        raw.iter().map(|r| clip_normalize(r, layout, slot)).collect()
    }
}

/// Unnormalized encodings of `n` items.
pub fn encode_raw<T: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    n: usize,
    make: &(dyn Fn(&[usize]) -> InputBatch<T> + Sync),
    dino: bool,
) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(EVAL_CHUNK)
        .map(|c| c.to_vec())
        .collect();
    let run = |idx: &[usize]| -> Result<Vec<Vec<f64>>> {
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let batch = make(idx);
        let y = if dino {
            dino_encoder_output(&mut t, &p, encoder, &batch)?
        } else {
            encoder.forward(&mut t, &p, &batch)?.encoding
        };
        let v = t.value(y);
        if !v.all_finite() {
            return Err(Error::numeric("non-finite encoding during evaluation"));
        }
        let m = v.shape()[1];
        Ok(v.data().chunks(m).map(|r| r.iter().map(|x| x.widen()).collect()).collect())
    };
    let threads = eval_threads().min(chunks.len().max(1));
    let results: Vec<Result<Vec<Vec<f64>>>> = if threads <= 1 {
        chunks.iter().map(|c| run(c)).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<Vec<f64>>>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let chunks = &chunks;
                    let run = &run;
                    s.spawn(move || {
                        (w..chunks.len())
                            .step_by(threads)
                            .map(|i| (i, run(&chunks[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("evaluation worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every chunk evaluated")).collect()
    };
    let mut out = Vec::with_capacity(n);
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Slot layout shared by both towers.
pub fn layout_of<T: Scalar>(model: &Model<T>) -> SlotLayout {
    model.image_encoder().0.layout()
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::backbone::InputBatch;
use crate::nn::layers::{Linear, L2_EPS};
use crate::nn::params::{init, Bound, ParamId, ParamStore};
use crate::sparo::{build_encoder, Encoder, EncoderConfig, HeadKind};
use crate::synthworld::World;
use crate::tensor::{Rng, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DinoConfig {
    /// K
    pub prototypes: usize,
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub tau_student: f64,
    pub tau_teacher: f64,
    /// Constant EMA momentum.
    pub momentum: f64,
    pub center_momentum: f64,
    /// Per-position drop probability of the augmentation.
    pub token_dropout: f64,
}

impl Default for DinoConfig {
    fn default() -> Self {
        DinoConfig {
            prototypes: 256,
            hidden_dim: 64,
            bottleneck_dim: 32,
            tau_student: 0.1,
            tau_teacher: 0.04,
            momentum: 0.996,
            center_momentum: 0.9,
            token_dropout: 0.1,
        }
    }
}

impl DinoConfig {
    pub fn validate(&self, prefix: &str, errs: &mut Vec<String>) {
        for (name, v) in [
            ("prototypes", self.prototypes),
            ("hidden_dim", self.hidden_dim),
            ("bottleneck_dim", self.bottleneck_dim),
        ] {
            if v == 0 {
                errs.push(format!("{prefix}{name} must be >= 1"));
            }
        }
        for (name, v) in [("tau_student", self.tau_student), ("tau_teacher", self.tau_teacher)] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("{prefix}{name} must be positive"));
            }
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("center_momentum", self.center_momentum),
        ] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("{prefix}{name} must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.token_dropout) {
            errs.push(format!("{prefix}token_dropout must lie in [0, 1)"));
        }
    }
}

/// Projection head: three-layer GELU MLP, l2-normalized bottleneck and a
/// linear layer onto `K` unit-norm prototypes.
#[derive(Clone, Debug)]
pub struct DinoHead {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    /// `[K, bottleneck]`, row-normalized at use.
    prototypes: ParamId,
}

impl DinoHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, input: usize, cfg: &DinoConfig) -> Self {
        DinoHead {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), input, cfg.hidden_dim, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), cfg.hidden_dim, cfg.hidden_dim, true),
            fc3: Linear::new(store, rng, &format!("{name}.fc3"), cfg.hidden_dim, cfg.bottleneck_dim, true),
            prototypes: store.add(
                format!("{name}.prototypes"),
                init::normal(rng, &[cfg.prototypes, cfg.bottleneck_dim], 1.0),
            ),
        }
    }

    /// `[B, input] -> [B, K]`
    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(t, p, x)?;
        let h = t.gelu(h);
        let h = self.fc2.forward(t, p, h)?;
        let h = t.gelu(h);
        let h = self.fc3.forward(t, p, h)?;
        let h = t.l2_normalize(h, 1, L2_EPS)?;
        let w = t.l2_normalize(p[self.prototypes], 1, L2_EPS)?;
        let wt = t.transpose(w)?;
        t.matmul(h, wt)
    }
}

/// Encoder and head; student and teacher share this layout and differ only
/// in their parameter stores.
#[derive(Clone, Debug)]
pub struct DinoNet {
    pub encoder: Encoder,
    pub head: DinoHead,
}

impl DinoNet {
    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, batch: &InputBatch<T>) -> Result<Var> {
        let y = dino_encoder_output(t, p, &self.encoder, batch)?;
        self.head.forward(t, p, y)
    }
}

/// Student, EMA teacher and the running center.
#[derive(Clone, Debug)]
pub struct DinoState<T> {
    pub cfg: DinoConfig,
    pub net: DinoNet,
    pub student: ParamStore<T>,
    pub teacher: ParamStore<T>,
    /// `[K]`
    pub center: Tensor<T>,
}

impl<T: Scalar> DinoState<T> {
    pub fn new(rng: &mut Rng, encoder: &EncoderConfig, cfg: &DinoConfig) -> Result<Self> {
        if !matches!(encoder.head.kind, HeadKind::Sparo | HeadKind::ClsEos) {
            return Err(Error::config(format!(
                "self-distillation supports head sparo or cls_eos (got {})",
                encoder.head.kind.name()
            )));
        }
        let mut errs = Vec::new();
        cfg.validate("dino.", &mut errs);
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut student = ParamStore::new();
        let enc = build_encoder(&mut student, rng, "encoder", encoder)?;
        let head = DinoHead::new(&mut student, rng, "head", enc.encoding_dim(), cfg);
        let teacher = student.clone();
        Ok(DinoState {
            cfg: *cfg,
            net: DinoNet { encoder: enc, head },
            student,
            teacher,
            center: Tensor::zeros(vec![cfg.prototypes]),
        })
    }
}

/// Head input: the flat, unnormalized encoding for a separate-head read-out
/// and the CLS/EOS state otherwise.
pub fn dino_encoder_output<T: Scalar>(
    t: &mut Tape<T>,
    p: &Bound,
    encoder: &Encoder,
    batch: &InputBatch<T>,
) -> Result<Var> {
    match encoder.head_kind() {
        HeadKind::Sparo | HeadKind::ClsEos => Ok(encoder.forward(t, p, batch)?.encoding),
        k => Err(Error::contract(format!(
            "self-distillation expects head sparo or cls_eos (got {})",
            k.name()
        ))),
    }
}

/// `teacher <- mu * teacher + (1 - mu) * student` over trainable entries.
pub fn dino_ema_update<T: Scalar>(student: &ParamStore<T>, teacher: &mut ParamStore<T>, mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::contract(format!("EMA momentum {mu} outside [0, 1]")));
    }
    if !student.same_layout(teacher) {
        return Err(Error::contract("EMA update: student and teacher layouts differ"));
    }
    let (m, c) = (T::cast(mu), T::cast(1.0 - mu));
    for (te, se) in teacher.entries_mut().iter_mut().zip(student.entries()) {
        if !te.trainable {
            continue;
        }
        if mu == 0.0 {
            te.value = se.value.clone();
        } else if mu < 1.0 {
            for (a, &b) in te.value.data_mut().iter_mut().zip(se.value.data()) {
                *a = m * *a + c * b;
            }
        }
    }
    Ok(())
}

/// Tape outputs of one distillation step.
pub struct DinoForward<T> {
    pub loss: Var,
    /// Batch mean of teacher logits over all views, for the center update.
    pub teacher_mean: Vec<T>,
}

/// Cross-entropy between the centered, sharpened teacher distribution of
/// each view and the student distribution of every other view. `pt` binds
/// the teacher store; its outputs are detached.
pub fn dino_loss<T: Scalar>(
    t: &mut Tape<T>,
    state: &DinoState<T>,
    ps: &Bound,
    pt: &Bound,
    views: &[InputBatch<T>],
) -> Result<DinoForward<T>> {
    if views.len() < 2 {
        return Err(Error::contract(format!(
            "self-distillation needs at least 2 views (got {})",
            views.len()
        )));
    }
    let k = state.cfg.prototypes;
    let center = t.constant(state.center.clone().reshape(vec![1, k])?);
    let mut targets = Vec::with_capacity(views.len());
    let mut mean = vec![T::zero(); k];
    let mut rows = 0usize;
    for v in views {
        let out = state.net.forward(t, pt, v)?;
        let out = t.detach(out);
        for r in t.value(out).data().chunks(k) {
            for (m, &x) in mean.iter_mut().zip(r) {
                *m = *m + x;
            }
            rows += 1;
        }
        let c = t.sub(out, center)?;
        let c = t.scale(c, 1.0 / state.cfg.tau_teacher);
        targets.push(t.softmax(c, 1)?);
    }
    let inv = T::cast(1.0 / rows as f64);
    mean.iter_mut().for_each(|m| *m = *m * inv);

    let mut students = Vec::with_capacity(views.len());
    for v in views {
        let out = state.net.forward(t, ps, v)?;
        let s = t.scale(out, 1.0 / state.cfg.tau_student);
        students.push(t.log_softmax(s, 1)?);
    }
    let mut terms = Vec::new();
    for (i, &tg) in targets.iter().enumerate() {
        for (j, &st) in students.iter().enumerate() {
            if i != j {
                let prod = t.mul(tg, st)?;
                let per = t.sum_axis(prod, 1)?;
                terms.push(t.mean(per));
            }
        }
    }
    let n = terms.len();
    let mut total = terms[0];
    for &x in &terms[1..] {
        total = t.add(total, x)?;
    }
    let loss = t.scale(total, -1.0 / n as f64);
    Ok(DinoForward { loss, teacher_mean: mean })
}

/// `center <- m * center + (1 - m) * batch_mean`.
pub fn update_center<T: Scalar>(state: &mut DinoState<T>, batch_mean: &[T]) {
    let m = T::cast(state.cfg.center_momentum);
    let c = T::cast(1.0 - state.cfg.center_momentum);
    for (a, &b) in state.center.data_mut().iter_mut().zip(batch_mean) {
        *a = m * *a + c * b;
    }
}

/// Two augmented view-A batches of the given latents: each view resamples
/// nuisance values, length, order and noise, then drops positions
/// independently (at least one survives).
pub fn make_views<T: Scalar>(world: &World, latents: &[Vec<usize>], dropout: f64, rng: &mut Rng) -> [InputBatch<T>; 2] {
    let mut one = || {
        let seqs = latents
            .iter()
            .map(|z| {
                let a = world.resample_view_a(z, rng);
                let (n, e) = (a.shape()[0], a.shape()[1]);
                let keep: Vec<usize> = (0..n).filter(|_| rng.uniform() >= dropout).collect();
                let keep = if keep.is_empty() { vec![rng.below(n)] } else { keep };
                let data: Vec<T> = keep.iter().flat_map(|&i| a.row(i).iter().map(|&x| T::cast(x))).collect();
                Tensor::new(vec![keep.len(), e], data).expect("view shape")
            })
            .collect();
        InputBatch::Continuous { seqs }
    };
    [one(), one()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::attpool::AttPoolConfig;
    use crate::nn::backbone::{BackboneConfig, InputKind};
    use crate::sparo::{HeadConfig, SparoConfig};
    use crate::synthworld::WorldSpec;
    use crate::tensor::Stream;

    fn enc(kind: HeadKind) -> EncoderConfig {
        let mut backbone = BackboneConfig::desk(InputKind::Continuous { dim: 16 });
        backbone.num_blocks = 1;
        EncoderConfig {
            backbone,
            head: HeadConfig {
                kind,
                sparo: SparoConfig::desk(),
                attpool: AttPoolConfig::baseline(8, 8, 4),
                bottleneck_dim: 64,
            },
            replace_last_block: false,
        }
    }

    fn small_cfg() -> DinoConfig {
        DinoConfig {
            prototypes: 16,
            ..DinoConfig::default()
        }
    }

    fn views(n: usize, seed: u64) -> [InputBatch<f64>; 2] {
        let world = World::new(&WorldSpec::default()).unwrap();
        let mut rng = Rng::new(seed, Stream::Augment);
        let latents: Vec<Vec<usize>> = (0..n).map(|_| world.sample_z(&mut rng)).collect();
        make_views(&world, &latents, 0.1, &mut rng)
    }

    #[test]
    fn head_input_dimensions() {
        let [v, _] = views(3, 0);
        for (kind, dim) in [(HeadKind::Sparo, 64), (HeadKind::ClsEos, 32)] {
            let s = DinoState::<f64>::new(&mut Rng::new(0, Stream::Init), &enc(kind), &small_cfg()).unwrap();
            let mut t = Tape::new();
            let p = s.student.bind(&mut t, false);
            let y = dino_encoder_output(&mut t, &p, &s.net.encoder, &v).unwrap();
            assert_eq!(t.shape(y), &[3, dim]);
        }
    }

    #[test]
    fn sparo_encoding_passes_through_unnormalized() {
        let [v, _] = views(2, 1);
        let s = DinoState::<f64>::new(&mut Rng::new(0, Stream::Init), &enc(HeadKind::Sparo), &small_cfg()).unwrap();
        let mut t = Tape::new();
        let p = s.student.bind(&mut t, false);
        let y = dino_encoder_output(&mut t, &p, &s.net.encoder, &v).unwrap();
        let direct = s.net.encoder.forward(&mut t, &p, &v).unwrap().encoding;
        assert_eq!(t.value(y).data(), t.value(direct).data());
    }

    #[test]
    fn other_heads_are_rejected() {
        let r = DinoState::<f64>::new(&mut Rng::new(0, Stream::Init), &enc(HeadKind::Gap), &small_cfg());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    fn perturbed(s: &DinoState<f64>, seed: u64) -> ParamStore<f64> {
        let mut st = s.student.clone();
        let mut rng = Rng::new(seed, Stream::Test);
        for e in st.entries_mut() {
            e.value.data_mut().iter_mut().for_each(|v| *v += 0.1 * rng.normal());
        }
        st
    }

    #[test]
    fn ema_endpoints_and_geometric_convergence() {
        let mut s = DinoState::<f64>::new(&mut Rng::new(0, Stream::Init), &enc(HeadKind::Sparo), &small_cfg()).unwrap();
        s.student = perturbed(&s, 1);
        let before = s.teacher.clone();
        dino_ema_update(&s.student, &mut s.teacher, 1.0).unwrap();
        for (a, b) in s.teacher.entries().iter().zip(before.entries()) {
            assert_eq!(a.value, b.value);
        }
        let dist = |a: &ParamStore<f64>, b: &ParamStore<f64>| -> f64 {
            a.entries()
                .iter()
                .zip(b.entries())
                .flat_map(|(x, y)| x.value.data().iter().zip(y.value.data()).map(|(p, q)| (p - q) * (p - q)))
                .sum::<f64>()
                .sqrt()
        };
        let mut d = dist(&s.teacher, &s.student);
        for _ in 0..5 {
            dino_ema_update(&s.student, &mut s.teacher, 0.5).unwrap();
            let nd = dist(&s.teacher, &s.student);
            assert!((nd - 0.5 * d).abs() < 1e-9 * d.max(1.0));
            d = nd;
        }
        dino_ema_update(&s.student, &mut s.teacher, 0.0).unwrap();
        let [v, _] = views(3, 2);
        let mut t = Tape::new();
        let ps = s.student.bind(&mut t, false);
        let pt = s.teacher.bind(&mut t, false);
        let a = s.net.forward(&mut t, &ps, &v).unwrap();
        let b = s.net.forward(&mut t, &pt, &v).unwrap();
        assert_eq!(t.value(a).data(), t.value(b).data());
        assert!(dino_ema_update(&s.student, &mut s.teacher, 1.5).is_err());
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let s = DinoState::<f64>::new(&mut Rng::new(0, Stream::Init), &enc(HeadKind::Sparo), &small_cfg()).unwrap();
        let v = views(4, 3);
        let mut t = Tape::new();
        let ps = s.student.bind(&mut t, true);
        let pt = s.teacher.bind(&mut t, true);
        let f = dino_loss(&mut t, &s, &ps, &pt, &v).unwrap();
        let g = t.backward(f.loss).unwrap();
        for &var in pt.vars() {
            assert!(g.wrt(var).data().iter().all(|&x| x == 0.0));
        }
        assert!(ps.vars().iter().any(|&var| g.wrt(var).data().iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn matched_outputs_give_entropy_floor() {
        let cfg = DinoConfig {
            tau_student: 0.1,
            tau_teacher: 0.1,
            ..small_cfg()
        };
        let s = DinoState::<f64>::new(&mut Rng::new(0, Stream::Init), &enc(HeadKind::Sparo), &cfg).unwrap();
        let [v, _] = views(3, 4);
        let same = [v.clone(), v];
        let mut t = Tape::new();
        let ps = s.student.bind(&mut t, false);
        let pt = s.teacher.bind(&mut t, false);
        let f = dino_loss(&mut t, &s, &ps, &pt, &same).unwrap();
        let out = s.net.forward(&mut t, &ps, &same[0]).unwrap();
        let out = t.scale(out, 10.0);
        let p = t.softmax(out, 1).unwrap();
        let ent: f64 = t.value(p).data().iter().map(|&q| -q * q.ln()).sum::<f64>() / 3.0;
        assert!((t.value(f.loss).item() - ent).abs() < 1e-10);
    }

    #[test]
    fn single_view_is_rejected() {
        let s = DinoState::<f64>::new(&mut Rng::new(0, Stream::Init), &enc(HeadKind::ClsEos), &small_cfg()).unwrap();
        let [v, _] = views(2, 5);
        let mut t = Tape::new();
        let ps = s.student.bind(&mut t, false);
        let pt = s.teacher.bind(&mut t, false);
        assert!(matches!(dino_loss(&mut t, &s, &ps, &pt, &[v]), Err(Error::Contract(_))));
    }

    #[test]
    fn center_moves_toward_batch_mean() {
        let mut s = DinoState::<f64>::new(&mut Rng::new(0, Stream::Init), &enc(HeadKind::ClsEos), &small_cfg()).unwrap();
        update_center(&mut s, &[1.0; 16]);
        assert!(s.center.data().iter().all(|&c| (c - 0.1).abs() < 1e-15));
    }
}

//! Finite-difference verification of every differentiable primitive and of
//! the composed read-outs and losses.

use serde::Serialize;

use crate::error::Result;
use crate::nn::attention::{self_attention_mask, MultiHeadAttention};
use crate::nn::attpool::{AttPool, AttPoolConfig};
use crate::nn::backbone::{BackboneConfig, InputBatch, InputKind};
use crate::nn::layers::{LayerNorm, Mlp, LAYER_NORM_EPS};
use crate::nn::params::{Bound, ParamStore};
use crate::objectives::{ClipState, DinoConfig, DinoState, make_views, dino_loss};
use crate::sparo::{EncoderConfig, HeadConfig, HeadKind, Sparo, SparoConfig};
use crate::synthworld::{World, WorldSpec};
use crate::tensor::{grad_check_as, GradCheckConfig, Rng, Scalar, Stream, Tape, Tensor, Var};

pub const PRIMITIVE_TOL_F64: f64 = 1e-6;
pub const COMPOSITE_TOL_F64: f64 = 1e-4;
/// 32-bit tapes are compared against 64-bit central differences.
pub const TOL_F32: f64 = 1e-3;

type CaseFn<T> = Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub composite: bool,
    inputs: Vec<Tensor<f64>>,
    f64: CaseFn<f64>,
    f32: CaseFn<f32>,
}

impl GradCase {
    fn new(
        name: &'static str,
        composite: bool,
        inputs: Vec<Tensor<f64>>,
        f64: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
        f32: impl Fn(&mut Tape<f32>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        GradCase {
            name,
            composite,
            inputs,
            f64: Box::new(f64),
            f32: Box::new(f32),
        }
    }

    pub fn tolerance(&self, wide: bool) -> f64 {
        match (wide, self.composite) {
            (true, false) => PRIMITIVE_TOL_F64,
            (true, true) => COMPOSITE_TOL_F64,
            (false, _) => TOL_F32,
        }
    }

    /// Worst relative error, with the analytic side taped in 64-bit when
    /// `wide` and in 32-bit otherwise.
    pub fn run(&self, wide: bool) -> Result<f64> {
        let cfg = GradCheckConfig {
            h: if wide { 1e-5 } else { 1e-4 },
            max_coords: Some(if self.composite { 6 } else { 64 }),
        };
        if wide {
            grad_check_as(&self.f64, &self.f64, &self.inputs, &cfg)
        } else {
            grad_check_as(&self.f32, &self.f64, &self.inputs, &cfg)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradResult {
    pub name: String,
    pub composite: bool,
    pub max_rel_err: Option<f64>,
    pub tolerance: f64,
    pub error: Option<String>,
    pub pass: bool,
}

/// Runs every case; failures to evaluate count as failed cases.
pub fn run_suite(wide: bool) -> Vec<GradResult> {
    cases()
        .iter()
        .map(|c| {
            let tol = c.tolerance(wide);
            match c.run(wide) {
                Ok(e) => GradResult {
                    name: c.name.into(),
                    composite: c.composite,
                    max_rel_err: Some(e),
                    tolerance: tol,
                    error: None,
                    pass: e < tol,
                },
                Err(err) => GradResult {
                    name: c.name.into(),
                    composite: c.composite,
                    max_rel_err: None,
                    tolerance: tol,
                    error: Some(err.to_string()),
                    pass: false,
                },
            }
        })
        .collect()
}

// ── primitives ──────────────────────────────────────────────────────────

/// `Σ w ⊙ y` with fixed, nonuniform weights.
fn readout<T: Scalar>(t: &mut Tape<T>, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect();
    let w = t.constant(Tensor::from_f64(shape, &w)?);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape")
}

/// Values in `[lo, lo + 1.5)`.
fn positive(rng: &mut Rng, shape: &[usize], lo: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| lo + 1.5 * rng.uniform()).collect()).expect("shape")
}

/// Normal values kept at least 0.1 away from `c`.
fn away_from(rng: &mut Rng, shape: &[usize], c: f64) -> Tensor<f64> {
    let mut x = rand(rng, shape);
    for v in x.data_mut() {
        if (*v - c).abs() < 0.1 {
            *v = c + 0.1_f64.copysign(*v - c) + 0.05;
        }
    }
    x
}

macro_rules! prim {
    ($name:literal, $inputs:expr, |$t:ident, $v:ident| $body:expr) => {{
        fn f<T: Scalar>($t: &mut Tape<T>, $v: &[Var]) -> Result<Var> {
            let y = $body;
            readout($t, y)
        }
        GradCase::new($name, false, $inputs, f::<f64>, f::<f32>)
    }};
}

fn primitives(rng: &mut Rng) -> Vec<GradCase> {
    vec![
        prim!("add", vec![rand(rng, &[2, 3]), rand(rng, &[2, 3])], |t, v| t.add(v[0], v[1])?),
        prim!("add_broadcast", vec![rand(rng, &[2, 3]), rand(rng, &[1, 3])], |t, v| t.add(v[0], v[1])?),
        prim!("sub", vec![rand(rng, &[2, 3]), rand(rng, &[3])], |t, v| t.sub(v[0], v[1])?),
        prim!("mul", vec![rand(rng, &[2, 3]), rand(rng, &[2, 1])], |t, v| t.mul(v[0], v[1])?),
        prim!("div", vec![rand(rng, &[2, 3]), positive(rng, &[2, 3], 0.5)], |t, v| t.div(v[0], v[1])?),
        prim!("scale", vec![rand(rng, &[4])], |t, v| t.scale(v[0], -1.7)),
        prim!("neg", vec![rand(rng, &[4])], |t, v| t.neg(v[0])),
        prim!("exp", vec![rand(rng, &[2, 3])], |t, v| t.exp(v[0])),
        prim!("log", vec![positive(rng, &[2, 3], 0.3)], |t, v| t.log(v[0])),
        prim!("sigmoid", vec![rand(rng, &[2, 3])], |t, v| t.sigmoid(v[0])),
        prim!("gelu", vec![rand(rng, &[2, 4])], |t, v| t.gelu(v[0])),
        prim!("sqrt", vec![positive(rng, &[2, 3], 0.3)], |t, v| t.sqrt(v[0])),
        prim!("clamp_max", vec![away_from(rng, &[3, 3], 0.3)], |t, v| t.clamp_max(v[0], 0.3)),
        prim!("clamp_min", vec![away_from(rng, &[3, 3], -0.2)], |t, v| t.clamp_min(v[0], -0.2)),
        prim!("matmul", vec![rand(rng, &[2, 3]), rand(rng, &[3, 4])], |t, v| t.matmul(v[0], v[1])?),
        prim!("matmul_batched", vec![rand(rng, &[2, 3, 4]), rand(rng, &[4, 2])], |t, v| t
            .matmul(v[0], v[1])?),
        prim!("permute", vec![rand(rng, &[2, 3, 4])], |t, v| t.permute(v[0], &[2, 0, 1])?),
        prim!("transpose", vec![rand(rng, &[3, 4])], |t, v| t.transpose(v[0])?),
        prim!("reshape", vec![rand(rng, &[2, 6])], |t, v| t.reshape(v[0], &[3, 4])?),
        prim!("concat", vec![rand(rng, &[2, 3]), rand(rng, &[2, 2])], |t, v| t.concat(&[v[0], v[1]], 1)?),
        prim!("slice", vec![rand(rng, &[3, 5])], |t, v| t.slice(v[0], 1, 1, 3)?),
        prim!("index_select", vec![rand(rng, &[3, 4])], |t, v| t.index_select(v[0], 0, &[2, 0, 2])?),
        prim!("sum", vec![rand(rng, &[2, 3])], |t, v| {
            let s = t.sum(v[0]);
            t.mul(s, s)?
        }),
        prim!("mean", vec![rand(rng, &[2, 3])], |t, v| {
            let s = t.mean(v[0]);
            t.mul(s, s)?
        }),
        prim!("sum_axis", vec![rand(rng, &[3, 4])], |t, v| t.sum_axis(v[0], 1)?),
        prim!("mean_axis", vec![rand(rng, &[3, 4])], |t, v| t.mean_axis(v[0], 0)?),
        prim!("softmax", vec![rand(rng, &[3, 4])], |t, v| t.softmax(v[0], 1)?),
        prim!("log_softmax", vec![rand(rng, &[3, 4])], |t, v| t.log_softmax(v[0], 1)?),
        prim!(
            "layer_norm",
            vec![rand(rng, &[3, 5]), rand(rng, &[5]), rand(rng, &[5])],
            |t, v| t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?
        ),
        prim!("l2_normalize", vec![rand(rng, &[3, 4])], |t, v| t.l2_normalize(v[0], 1, 1e-12)?),
    ]
}

// ── composites ──────────────────────────────────────────────────────────

/// Values of every entry of a 64-bit store, in entry order.
fn store_inputs(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.entries().iter().map(|e| e.value.clone()).collect()
}

fn mlp_case(rng: &mut Rng) -> GradCase {
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, rng, "mlp", 4, 8, 3);
    let ln = LayerNorm::new(&mut store, "ln", 3);
    let k = store.len();
    let mut inputs = store_inputs(&store);
    inputs.push(rand(rng, &[2, 4]));
    fn f<T: Scalar>(mlp: &Mlp, ln: &LayerNorm, k: usize, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let p = Bound::from_vars(v[..k].to_vec());
        let y = mlp.forward(t, &p, v[k])?;
        let y = ln.forward(t, &p, y)?;
        readout(t, y)
    }
    let (m2, l2) = (mlp.clone(), ln.clone());
    GradCase::new(
        "mlp_layer_norm",
        true,
        inputs,
        move |t, v| f(&mlp, &ln, k, t, v),
        move |t, v| f(&m2, &l2, k, t, v),
    )
}

fn attention_case(rng: &mut Rng) -> GradCase {
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, rng, "mha", 8, 2).expect("heads divide width");
    let k = store.len();
    let mut inputs = store_inputs(&store);
    inputs.push(rand(rng, &[2, 4, 8]));
    fn f<T: Scalar>(mha: &MultiHeadAttention, k: usize, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let p = Bound::from_vars(v[..k].to_vec());
        let mask = self_attention_mask::<T>(&[4, 3], 4, true).map(|m| t.constant(m));
        let y = mha.forward(t, &p, v[k], mask)?.out;
        readout(t, y)
    }
    let m2 = mha.clone();
    GradCase::new(
        "multi_head_attention",
        true,
        inputs,
        move |t, v| f(&mha, k, t, v),
        move |t, v| f(&m2, k, t, v),
    )
}

fn sparo_case(rng: &mut Rng) -> GradCase {
    let mut store = ParamStore::new();
    let cfg = SparoConfig {
        slots: 4,
        slot_dim: 3,
        attn_dim: 5,
        grp_size: 2,
        use_bias: true,
    };
    let sparo = Sparo::new(&mut store, rng, "sparo", &cfg, 6).expect("valid read-out");
    let k = store.len();
    let mut inputs = store_inputs(&store);
    inputs.push(rand(rng, &[3, 5, 6]));
    fn f<T: Scalar>(s: &Sparo, k: usize, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let p = Bound::from_vars(v[..k].to_vec());
        let y = s.forward(t, &p, v[k], Some(&[5, 2, 4]))?.slots;
        readout(t, y)
    }
    let s2 = sparo.clone();
    GradCase::new(
        "sparo_readout",
        true,
        inputs,
        move |t, v| f(&sparo, k, t, v),
        move |t, v| f(&s2, k, t, v),
    )
}

fn attpool_case(rng: &mut Rng) -> GradCase {
    let mut store = ParamStore::new();
    let pool = AttPool::new(&mut store, rng, "pool", &AttPoolConfig::baseline(2, 3, 2), 8).expect("valid pool");
    let k = store.len();
    let mut inputs = store_inputs(&store);
    inputs.push(rand(rng, &[2, 4, 8]));
    fn f<T: Scalar>(pool: &AttPool, k: usize, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let p = Bound::from_vars(v[..k].to_vec());
        let (y, _) = pool.forward(t, &p, v[k], &[4, 2])?;
        readout(t, y)
    }
    let p2 = pool.clone();
    GradCase::new(
        "attpool",
        true,
        inputs,
        move |t, v| f(&pool, k, t, v),
        move |t, v| f(&p2, k, t, v),
    )
}

fn tiny_encoder(input: InputKind, causal: bool) -> EncoderConfig {
    EncoderConfig {
        backbone: BackboneConfig {
            num_blocks: 1,
            width: 8,
            num_heads: 2,
            mlp_ratio: 2.0,
            max_positions: 6,
            input,
            causal,
        },
        head: HeadConfig {
            kind: HeadKind::Sparo,
            sparo: SparoConfig {
                slots: 2,
                slot_dim: 3,
                attn_dim: 4,
                grp_size: 1,
                use_bias: true,
            },
            attpool: AttPoolConfig::baseline(2, 3, 2),
            bottleneck_dim: 6,
        },
        replace_last_block: false,
    }
}

fn clip_case(rng: &mut Rng) -> GradCase {
    let mut store = ParamStore::<f64>::new();
    let state = ClipState::new(
        &mut store,
        rng,
        &tiny_encoder(InputKind::Continuous { dim: 4 }, false),
        &tiny_encoder(InputKind::Tokens { vocab: 10 }, true),
    )
    .expect("valid towers");
    let inputs = store_inputs(&store);
    let seqs: Vec<Tensor<f64>> = [3, 5, 2].iter().map(|&n| rand(rng, &[n, 4])).collect();
    let ids = vec![vec![3, 4, 1], vec![5, 6, 7, 8, 1], vec![9, 1]];
    let eos = vec![2, 4, 1];
    fn f<T: Scalar>(s: &ClipState, img: &InputBatch<T>, txt: &InputBatch<T>, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let p = Bound::from_vars(v.to_vec());
        Ok(s.loss(t, &p, img, txt)?.loss)
    }
    let img64 = InputBatch::Continuous { seqs: seqs.clone() };
    let img32 = InputBatch::Continuous {
        seqs: seqs.iter().map(|s| s.cast()).collect(),
    };
    let txt64 = InputBatch::Tokens { ids: ids.clone(), eos: eos.clone() };
    let txt32 = InputBatch::Tokens { ids, eos };
    let s2 = state.clone();
    GradCase::new(
        "sparo_clip_loss",
        true,
        inputs,
        move |t, v| f(&state, &img64, &txt64, t, v),
        move |t, v| f(&s2, &img32, &txt32, t, v),
    )
}

fn dino_case(rng: &mut Rng) -> GradCase {
    let spec = WorldSpec {
        num_factors: 2,
        shared_factors: vec![0, 1],
        nuisance_per_view: 1,
        embed_dim: 4,
        seq_len_min: 3,
        seq_len_max: 5,
        ..WorldSpec::default()
    };
    let world = World::new(&spec).expect("valid world");
    let cfg = DinoConfig {
        prototypes: 16,
        hidden_dim: 8,
        bottleneck_dim: 4,
        ..DinoConfig::default()
    };
    let mut state =
        DinoState::<f64>::new(rng, &tiny_encoder(InputKind::Continuous { dim: 4 }, false), &cfg).expect("valid dino");
    for (i, c) in state.center.data_mut().iter_mut().enumerate() {
        *c = 0.1 * (i as f64).cos();
    }
    let inputs = store_inputs(&state.student);
    let latents: Vec<Vec<usize>> = (0..3).map(|_| world.sample_z(rng)).collect();
    let seed = rng.next_u64();
    let v64 = make_views::<f64>(&world, &latents, 0.1, &mut Rng::with_stream(seed, Stream::Augment as u64));
    let v32 = make_views::<f32>(&world, &latents, 0.1, &mut Rng::with_stream(seed, Stream::Augment as u64));
    let s32 = DinoState::<f32> {
        cfg: state.cfg,
        net: state.net.clone(),
        student: state.student.cast(),
        teacher: state.teacher.cast(),
        center: state.center.cast(),
    };
    fn f<T: Scalar>(s: &DinoState<T>, views: &[InputBatch<T>; 2], t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let ps = Bound::from_vars(v.to_vec());
        let pt = s.teacher.bind(t, false);
        Ok(dino_loss(t, s, &ps, &pt, views)?.loss)
    }
    GradCase::new(
        "dino_loss",
        true,
        inputs,
        move |t, v| f(&state, &v64, t, v),
        move |t, v| f(&s32, &v32, t, v),
    )
}

/// Every case, built deterministically.
pub fn cases() -> Vec<GradCase> {
    let mut rng = Rng::new(0, Stream::Test);
    let mut out = primitives(&mut rng);
    out.push(mlp_case(&mut rng));
    out.push(attention_case(&mut rng));
    out.push(sparo_case(&mut rng));
    out.push(attpool_case(&mut rng));
    out.push(clip_case(&mut rng));
    out.push(dino_case(&mut rng));
    out
}

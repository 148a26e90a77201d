use super::params::{init, Bound, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Rng, Scalar, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-8;

/// Affine map `x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-uniform weight, zero bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init::xavier_uniform(rng, &[in_dim, out_dim], in_dim, out_dim),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), init::zeros(&[out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    /// Accepts any input of shape `[.., in]`.
    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = t.shape(x).to_vec();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = t.reshape(x, &[rows, self.in_dim])?;
        let mut y = t.matmul(flat, p[self.weight])?;
        if let Some(b) = self.bias {
            y = t.add(y, p[b])?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        t.reshape(y, &out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), init::ones(&[dim])),
            bias: store.add(format!("{name}.bias"), init::zeros(&[dim])),
            dim,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        t.layer_norm(x, p[self.gain], p[self.bias], LAYER_NORM_EPS)
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        hidden: usize,
        out: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, out, true),
        }
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(t, p, x)?;
        let h = t.gelu(h);
        self.fc2.forward(t, p, h)
    }
}

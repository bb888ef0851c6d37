use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::condition::{ConditionEncoding, COND_DIM};
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Shape of the shared-weight per-point MLP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub hidden_width: usize,
    /// Number of hidden layers.
    pub depth: usize,
    /// Width of the sinusoidal timestep embedding (even).
    pub time_embed_dim: usize,
    pub cond_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden_width: 64,
            depth: 4,
            time_embed_dim: 16,
            cond_dim: COND_DIM,
        }
    }
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        3 + self.cond_dim + self.time_embed_dim
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.input_dim(), self.hidden_width)];
        for _ in 1..self.depth {
            dims.push((self.hidden_width, self.hidden_width));
        }
        dims.push((self.hidden_width, 3));
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.depth == 0 {
            return Err(Error::invalid("hidden width and depth must be positive"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("time embedding width must be positive and even"));
        }
        if self.cond_dim != COND_DIM {
            return Err(Error::invalid(format!("condition width must be {COND_DIM}")));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Which part a denoiser plays during distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Frozen pre-trained model `ε_θ`.
    Teacher,
    /// Model `ε_φ` re-fit on the student's completions.
    Auxiliary,
    /// Few-step generator `η`.
    Student,
}

/// A parameter buffer with an optional gradient of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub value: Array2<f64>,
    pub grad: Option<Array2<f64>>,
}

impl Tensor {
    pub fn new(value: Array2<f64>) -> Self {
        Self { value, grad: None }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.value.nrows(), self.value.ncols()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    /// 1×out.
    pub bias: Tensor,
}

/// Conditional noise predictor `ε(Gᵗ, P, t)`, applied to each point with
/// shared weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    arch: Architecture,
    role: Role,
    layers: Vec<Linear>,
}

/// Parameter variables of one model on one tape.
pub struct Bound {
    vars: Vec<(Var, Var)>,
}

impl DenoiserModel {
    /// Uniform fan-in initialization; the output layer starts at zero.
    pub fn new(arch: Architecture, role: Role, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = arch.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(l, &(fan_in, fan_out))| {
                let weight = if l == last {
                    Array2::zeros((fan_in, fan_out))
                } else {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
                };
                Linear {
                    weight: Tensor::new(weight),
                    bias: Tensor::new(Array2::zeros((1, fan_out))),
                }
            })
            .collect();
        Ok(Self { arch, role, layers })
    }

    pub(crate) fn from_parts(arch: Architecture, role: Role, layers: Vec<Linear>) -> Result<Self> {
        arch.validate()?;
        let dims = arch.layer_dims();
        if dims.len() != layers.len()
            || dims.iter().zip(&layers).any(|(&(i, o), l)| {
                l.weight.shape() != [i, o] || l.bias.shape() != [1, o]
            })
        {
            return Err(Error::invalid("parameter shapes do not match the architecture"));
        }
        Ok(Self { arch, role, layers })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Copy of this model playing a different role.
    pub fn clone_as(&self, role: Role) -> Self {
        let mut m = self.clone();
        m.role = role;
        m.zero_grad();
        m
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// `(name, tensor)` pairs in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("layer{i}.weight"), &l.weight),
                    (format!("layer{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.grad = None;
        }
    }

    /// SHA-256 over every parameter value, hex-encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.parameters() {
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.value.clone()), tape.leaf(l.bias.value.clone())))
                .collect(),
        }
    }

    /// Records the forward pass on `tape`. `points` is M×3, `cond` M×cond_dim.
    pub fn forward_on(&self, tape: &mut Tape, bound: &Bound, points: Var, cond: Var, t: usize) -> Result<Var> {
        let m = tape.value(points).nrows();
        if tape.value(points).ncols() != 3 {
            return Err(Error::invalid("points must have three columns"));
        }
        if tape.value(cond).dim() != (m, self.arch.cond_dim) {
            return Err(Error::invalid(format!(
                "condition shape {:?} does not match {m} points × {}",
                tape.value(cond).dim(),
                self.arch.cond_dim
            )));
        }
        let temb = time_embedding(t, self.arch.time_embed_dim);
        let temb = tape.leaf(Array2::from_shape_fn((m, temb.len()), |(_, c)| temb[c]));
        let mut h = tape.concat_cols(&[points, cond, temb]);
        let last = bound.vars.len() - 1;
        for (l, &(w, b)) in bound.vars.iter().enumerate() {
            h = tape.matmul(h, w);
            h = tape.add_row(h, b);
            if l != last {
                h = tape.silu(h);
            }
        }
        Ok(h)
    }

    /// Predicted noise for each point, without recording gradients.
    pub fn forward(&self, points: &[Point3], cond: &ConditionEncoding, t: usize) -> Result<Array2<f64>> {
        if cond.rows() != points.len() {
            return Err(Error::invalid(format!(
                "condition has {} rows but there are {} points",
                cond.rows(),
                points.len()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(points_to_array(points));
        let c = tape.leaf(cond.features.clone());
        let out = self.forward_on(&mut tape, &bound, x, c, t)?;
        Ok(tape.value(out).clone())
    }

    /// Adds the gradients of `bound`'s variables to the stored gradients.
    /// Parameters the loss does not reach get an explicit zero gradient.
    pub fn accumulate_grads(&mut self, grads: &Gradients, bound: &Bound) {
        for (layer, &(w, b)) in self.layers.iter_mut().zip(&bound.vars) {
            for (tensor, var) in [(&mut layer.weight, w), (&mut layer.bias, b)] {
                let g = grads
                    .wrt(var)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(tensor.value.dim()));
                match &mut tensor.grad {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.parameters()
            .iter()
            .all(|(_, p)| p.value.iter().all(|v| v.is_finite()))
    }
}

/// `[sin(t·ωₖ), cos(t·ωₖ)]` with geometrically spaced frequencies.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(1000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

pub fn points_to_array(points: &[Point3]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 3), |(r, c)| points[r][c])
}

pub fn array_to_points(a: &Array2<f64>) -> Vec<Point3> {
    a.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Scene, SceneRole};
    use crate::net::encode_condition;

    fn small() -> Architecture {
        Architecture {
            hidden_width: 8,
            depth: 2,
            time_embed_dim: 4,
            cond_dim: COND_DIM,
        }
    }

    fn inputs() -> (Vec<Point3>, ConditionEncoding) {
        let pts: Vec<Point3> = (0..7).map(|i| [i as f64 * 0.3, (i as f64).sin(), 0.1]).collect();
        let scan = Scene::new(pts[..4].to_vec(), SceneRole::Scan).unwrap();
        let cond = encode_condition(&scan, &pts);
        (pts, cond)
    }

    #[test]
    fn fresh_model_predicts_zero() {
        let m = DenoiserModel::new(small(), Role::Teacher, 3).unwrap();
        let (pts, cond) = inputs();
        let out = m.forward(&pts, &cond, 5).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clone_is_bitwise_identical() {
        let mut m = DenoiserModel::new(small(), Role::Teacher, 3).unwrap();
        m.layers.last_mut().unwrap().weight.value.fill(0.25);
        let c = m.clone_as(Role::Student);
        let (pts, cond) = inputs();
        assert_eq!(m.forward(&pts, &cond, 2).unwrap(), c.forward(&pts, &cond, 2).unwrap());
        assert_eq!(m.checksum(), c.checksum());
        assert_eq!(c.role(), Role::Student);
    }

    #[test]
    fn rejects_misaligned_condition() {
        let m = DenoiserModel::new(small(), Role::Teacher, 3).unwrap();
        let (pts, cond) = inputs();
        assert!(m.forward(&pts[..3], &cond, 1).is_err());
    }

    #[test]
    fn parameter_count_matches() {
        let a = small();
        let m = DenoiserModel::new(a.clone(), Role::Teacher, 0).unwrap();
        let n: usize = m.parameters().iter().map(|(_, p)| p.value.len()).sum();
        assert_eq!(n, a.parameter_count());
        assert_eq!(Architecture::default().input_dim(), 28);
    }
}

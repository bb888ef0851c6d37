//! Reverse-mode differentiation over 2-D `f64` arrays.
//!
//! A [`Tape`] records every operation as it is evaluated. [`Tape::backward`]
//! walks the record in reverse and returns the gradient of a scalar node
//! with respect to every node that precedes it.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};
use crate::geometry::{nearest_index, Point3};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a + bias` with a 1×m bias broadcast over rows.
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Silu(usize),
    /// Column-wise concatenation; stores each input and its width.
    Concat(Vec<(usize, usize)>),
    Sum(usize),
    SumSquares(usize),
    /// `Σ a ⊙ c` for a constant `c`.
    DotConst(usize, Array2<f64>),
    GatherRows(usize, Vec<usize>),
    PairwiseDistance(usize),
    /// Mean over rows of `‖aᵢ − targetᵢ‖²` where each target was the nearest
    /// reference point when the op was recorded.
    NearestSqMean(usize, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.index
    }

    fn val(&self, v: Var) -> &Array2<f64> {
        &self.nodes[self.idx(v)].value
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        self.val(v)
    }

    /// The single entry of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.val(v)[[0, 0]]
    }

    /// Records an input. Parameters and constants are both leaves; whether a
    /// leaf's gradient is read afterwards is up to the caller.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).dot(self.val(b));
        let (a, b) = (self.idx(a), self.idx(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let bv = self.val(bias);
        assert_eq!(bv.nrows(), 1, "bias must be a single row");
        let v = self.val(a) + bv;
        let (a, b) = (self.idx(a), self.idx(bias));
        self.push(v, Op::AddRow(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) + self.val(b);
        let (a, b) = (self.idx(a), self.idx(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) - self.val(b);
        let (a, b) = (self.idx(a), self.idx(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.val(a) * k;
        let a = self.idx(a);
        self.push(v, Op::Scale(a, k))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(|x| x / (1.0 + (-x).exp()));
        let a = self.idx(a);
        self.push(v, Op::Silu(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.val(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concatenated parts must share a row count");
        let meta = parts
            .iter()
            .map(|&p| (self.idx(p), self.val(p).ncols()))
            .collect();
        self.push(v, Op::Concat(meta))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.val(a).sum());
        let a = self.idx(a);
        self.push(v, Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.val(a).iter().map(|x| x * x).sum());
        let a = self.idx(a);
        self.push(v, Op::SumSquares(a))
    }

    pub fn dot_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        assert_eq!(self.val(a).dim(), c.dim(), "dot_const shape mismatch");
        let v = Array2::from_elem((1, 1), (self.val(a) * &c).sum());
        let a = self.idx(a);
        self.push(v, Op::DotConst(a, c))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let src = self.val(a);
        let mut v = Array2::zeros((rows.len(), src.ncols()));
        for (r, &i) in rows.iter().enumerate() {
            v.row_mut(r).assign(&src.row(i));
        }
        let a = self.idx(a);
        self.push(v, Op::GatherRows(a, rows))
    }

    /// n×3 points → n×n Euclidean distances.
    pub fn pairwise_distance(&mut self, a: Var) -> Var {
        let p = self.val(a);
        let n = p.nrows();
        let mut v = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let d = (&p.row(i) - &p.row(j)).mapv(|x| x * x).sum().sqrt();
                v[[i, j]] = d;
                v[[j, i]] = d;
            }
        }
        let a = self.idx(a);
        self.push(v, Op::PairwiseDistance(a))
    }

    /// Mean squared distance from each row of `a` (n×3) to its nearest
    /// reference point. The nearest-point assignment is fixed at record time.
    pub fn nearest_sq_mean(&mut self, a: Var, reference: &[Point3]) -> Var {
        let p = self.val(a);
        let n = p.nrows();
        let mut targets = Array2::zeros((n, 3));
        let mut total = 0.0;
        for i in 0..n {
            let q = [p[[i, 0]], p[[i, 1]], p[[i, 2]]];
            let t = reference[nearest_index(reference, &q)];
            for k in 0..3 {
                targets[[i, k]] = t[k];
                let d = q[k] - t[k];
                total += d * d;
            }
        }
        let v = Array2::from_elem((1, 1), total / n as f64);
        let a = self.idx(a);
        self.push(v, Op::NearestSqMean(a, targets))
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id {
            return Err(Error::State(
                "backward called with a variable that this tape did not record".into(),
            ));
        }
        if loss.index >= self.nodes.len() {
            return Err(Error::State("backward called on an unrecorded variable".into()));
        }
        if self.nodes[loss.index].value.dim() != (1, 1) {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.index].value.dim()
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value.t());
                    let gb = self.nodes[*a].value.t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, &g * *k),
                Op::Silu(a) => {
                    let x = &self.nodes[*a].value;
                    let mut ga = g.clone();
                    ga.zip_mut_with(x, |gv, &xv| {
                        let sig = 1.0 / (1.0 + (-xv).exp());
                        *gv *= sig * (1.0 + xv * (1.0 - sig));
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut col = 0;
                    for &(p, w) in parts {
                        accumulate(&mut grads, p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::Sum(a) => {
                    let dim = self.nodes[*a].value.dim();
                    accumulate(&mut grads, *a, Array2::from_elem(dim, g[[0, 0]]));
                }
                Op::SumSquares(a) => {
                    accumulate(&mut grads, *a, &self.nodes[*a].value * (2.0 * g[[0, 0]]));
                }
                Op::DotConst(a, c) => accumulate(&mut grads, *a, c * g[[0, 0]]),
                Op::GatherRows(a, rows) => {
                    let mut ga = Array2::zeros(self.nodes[*a].value.dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut row = ga.row_mut(src);
                        row += &g.row(r);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::PairwiseDistance(a) => {
                    let p = &self.nodes[*a].value;
                    let d = &node.value;
                    let n = p.nrows();
                    let mut ga = Array2::zeros(p.dim());
                    for i in 0..n {
                        for j in 0..n {
                            let dij = d[[i, j]];
                            if i == j || dij == 0.0 {
                                continue;
                            }
                            let w = (g[[i, j]] + g[[j, i]]) / dij;
                            for k in 0..p.ncols() {
                                ga[[i, k]] += w * (p[[i, k]] - p[[j, k]]);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::NearestSqMean(a, targets) => {
                    let p = &self.nodes[*a].value;
                    let k = 2.0 * g[[0, 0]] / p.nrows() as f64;
                    accumulate(&mut grads, *a, (p - targets) * k);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], i: usize, g: Array2<f64>) {
    match &mut grads[i] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when the loss does
    /// not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }
}

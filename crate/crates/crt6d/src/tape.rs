//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The refinement cascade is trained end to end, so every piece of its forward
//! pass — attention blocks, rotation recovery, projection, feature sampling —
//! is expressed as nodes on a [`Tape`]. Evaluation is eager: each op computes
//! its value as it is recorded, which lets callers inspect intermediate values
//! (e.g. to reject poses that fall behind the camera) while the graph is being
//! built. [`Tape::backward`] then walks the recording once in reverse and
//! accumulates vector-Jacobian products.
//!
//! The op set is intentionally small; everything else (cross products, vector
//! norms, MLPs) is composed from it. Every op's VJP is checked against central
//! finite differences in the test module below.

use std::rc::Rc;

use crate::tensor::Tensor;

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-9;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Neg(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    Recip(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize, len: usize },
    SumAll(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    ScaleByScalar(Var, Var),
    BilinearSample { map: Rc<Tensor>, pos: Var, strides: [f64; 2] },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient tensor for `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// An eager recording of tensor operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Constants and parameters are both leaves; the
    /// caller decides which gradients it cares about after `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).zip(self.val(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).zip(self.val(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).zip(self.val(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).zip(self.val(b), |x, y| x / y);
        self.push(value, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.val(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.val(a).map(|x| x * c);
        self.push(value, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.val(a).map(|x| -x);
        self.push(value, Op::Neg(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.val(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.val(a).map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(value, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.val(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.val(a).map(f64::ln);
        self.push(value, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.val(a).map(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let value = self.val(a).map(f64::sin);
        self.push(value, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.val(a).map(f64::cos);
        self.push(value, Op::Cos(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.val(a).map(f64::abs);
        self.push(value, Op::Abs(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.val(a).map(|x| 1.0 / x);
        self.push(value, Op::Recip(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.val(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).matmul(self.val(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.val(a).transposed();
        self.push(value, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.val(a).reshaped(shape);
        self.push(value, Op::Reshape(a))
    }

    /// Concatenate rank-1 tensors (axis 0) or rank-2 tensors along `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty(), "concat of zero tensors");
        let rank = self.val(inputs[0]).rank();
        assert!(axis < rank.max(1), "concat axis out of range");
        let value = if rank == 1 {
            let mut data = Vec::new();
            for &v in inputs {
                data.extend_from_slice(self.val(v).data());
            }
            Tensor::from_vec(data)
        } else if axis == 0 {
            let n = self.val(inputs[0]).dims2().1;
            let mut data = Vec::new();
            let mut rows = 0;
            for &v in inputs {
                let (m, n2) = self.val(v).dims2();
                assert_eq!(n, n2, "concat axis 0 column mismatch");
                rows += m;
                data.extend_from_slice(self.val(v).data());
            }
            Tensor::new(&[rows, n], data)
        } else {
            let m = self.val(inputs[0]).dims2().0;
            let total: usize = inputs.iter().map(|&v| self.val(v).dims2().1).sum();
            let mut data = vec![0.0; m * total];
            let mut col = 0;
            for &v in inputs {
                let (m2, n) = self.val(v).dims2();
                assert_eq!(m, m2, "concat axis 1 row mismatch");
                let src = self.val(v).data();
                for i in 0..m {
                    data[i * total + col..i * total + col + n]
                        .copy_from_slice(&src[i * n..(i + 1) * n]);
                }
                col += n;
            }
            Tensor::new(&[m, total], data)
        };
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Contiguous slice of length `len` starting at `start` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Var {
        let t = self.val(input);
        let value = match t.rank() {
            1 => {
                assert_eq!(axis, 0);
                assert!(start + len <= t.len());
                Tensor::from_vec(t.data()[start..start + len].to_vec())
            }
            2 => {
                let (m, n) = t.dims2();
                if axis == 0 {
                    assert!(start + len <= m);
                    Tensor::new(&[len, n], t.data()[start * n..(start + len) * n].to_vec())
                } else {
                    assert!(start + len <= n);
                    let mut data = vec![0.0; m * len];
                    for i in 0..m {
                        data[i * len..(i + 1) * len]
                            .copy_from_slice(&t.data()[i * n + start..i * n + start + len]);
                    }
                    Tensor::new(&[m, len], data)
                }
            }
            r => panic!("narrow unsupported on rank {r}"),
        };
        self.push(
            value,
            Op::Narrow {
                input,
                axis,
                start,
                len,
            },
        )
    }

    // ---- reductions and row-structured ops ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.val(a).len();
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Mean over axis 0 of a 2-D tensor: `(m, n) -> (n)`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let (m, _) = t.dims2();
        let value = t.col_sums().scale(1.0 / m as f64);
        self.push(value, Op::MeanRows(a))
    }

    /// Softmax over the last axis of a 2-D tensor, row by row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let (m, n) = t.dims2();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        self.push(Tensor::new(&[m, n], data), Op::SoftmaxRows(a))
    }

    /// Layer normalization over the last axis of a 2-D tensor (no affine part;
    /// compose with [`Tape::mul_row`] / [`Tape::add_row`] for gain and bias).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let (m, n) = t.dims2();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv;
            }
        }
        self.push(Tensor::new(&[m, n], data), Op::LayerNormRows(a))
    }

    /// `(m, n) + (n)` row-broadcast addition.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.val(a).dims2();
        assert_eq!(self.val(b).shape(), &[n], "add_row shape mismatch");
        let mut data = self.val(a).data().to_vec();
        let row = self.val(b).data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += row[j];
            }
        }
        self.push(Tensor::new(&[m, n], data), Op::AddRow(a, b))
    }

    /// `(m, n) * (n)` row-broadcast multiplication.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.val(a).dims2();
        assert_eq!(self.val(b).shape(), &[n], "mul_row shape mismatch");
        let mut data = self.val(a).data().to_vec();
        let row = self.val(b).data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= row[j];
            }
        }
        self.push(Tensor::new(&[m, n], data), Op::MulRow(a, b))
    }

    /// `(m, n) * (m, 1)` column-broadcast multiplication.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.val(a).dims2();
        assert_eq!(self.val(b).shape(), &[m, 1], "mul_col shape mismatch");
        let mut data = self.val(a).data().to_vec();
        let col = self.val(b).data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= col[i];
            }
        }
        self.push(Tensor::new(&[m, n], data), Op::MulCol(a, b))
    }

    /// Multiply every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.val(s).len(), 1, "scale_by expects a scalar tensor");
        let c = self.val(s).data()[0];
        let value = self.val(a).scale(c);
        self.push(value, Op::ScaleByScalar(a, s))
    }

    /// Bilinear sampling of a constant `(h, w, c)` map at `(k, 2)` positions
    /// given in crop pixels; `strides` convert crop pixels to grid cells on
    /// the x and y axes.
    ///
    /// Uses the align-corners=false convention (cell centers at
    /// `(index + 0.5) * stride`) and zero padding outside the map. Gradients
    /// flow to the positions only; the map is constant.
    pub fn bilinear_sample(&mut self, map: Rc<Tensor>, pos: Var, strides: [f64; 2]) -> Var {
        let value = bilinear_forward(&map, self.val(pos), strides);
        self.push(value, Op::BilinearSample { map, pos, strides })
    }

    // ---- backward ----

    /// Gradients of the scalar node `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.val(root).len(),
            1,
            "backward root must be a scalar tensor"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.val(root).shape(), vec![1.0]));

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.accumulate_inputs(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate_inputs(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| {
            match &mut grads[v.0] {
                Some(acc) => acc.add_in_place(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, g.zip(self.val(*b), |g, y| g * y));
                add_to(grads, *b, g.zip(self.val(*a), |g, x| g * x));
            }
            Op::Div(a, b) => {
                let bv = self.val(*b);
                add_to(grads, *a, g.zip(bv, |g, y| g / y));
                let da = g
                    .zip(self.val(*a), |g, x| g * x)
                    .zip(bv, |gx, y| -gx / (y * y));
                add_to(grads, *b, da);
            }
            Op::AddScalar(a) => add_to(grads, *a, g.clone()),
            Op::MulScalar(a, c) => add_to(grads, *a, g.scale(*c)),
            Op::Neg(a) => add_to(grads, *a, g.scale(-1.0)),
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                add_to(grads, *a, g.zip(y, |g, y| g * (1.0 - y * y)));
            }
            Op::Softplus(a) => {
                let sigmoid = self.val(*a).map(|x| {
                    if x >= 0.0 {
                        1.0 / (1.0 + (-x).exp())
                    } else {
                        let e = x.exp();
                        e / (1.0 + e)
                    }
                });
                add_to(grads, *a, g.zip(&sigmoid, |g, s| g * s));
            }
            Op::Exp(a) => {
                let y = &self.nodes[idx].value;
                add_to(grads, *a, g.zip(y, |g, y| g * y));
            }
            Op::Ln(a) => add_to(grads, *a, g.zip(self.val(*a), |g, x| g / x)),
            Op::Sqrt(a) => {
                let y = &self.nodes[idx].value;
                add_to(grads, *a, g.zip(y, |g, y| g * 0.5 / y));
            }
            Op::Sin(a) => add_to(grads, *a, g.zip(self.val(*a), |g, x| g * x.cos())),
            Op::Cos(a) => add_to(grads, *a, g.zip(self.val(*a), |g, x| -g * x.sin())),
            Op::Abs(a) => {
                let sign = self.val(*a).map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                add_to(grads, *a, g.zip(&sign, |g, s| g * s));
            }
            Op::Recip(a) => {
                let y = &self.nodes[idx].value;
                add_to(grads, *a, g.zip(y, |g, y| -g * y * y));
            }
            Op::Clamp(a, lo, hi) => {
                let mask = self.val(*a).map(|x| {
                    if x >= *lo && x <= *hi {
                        1.0
                    } else {
                        0.0
                    }
                });
                add_to(grads, *a, g.zip(&mask, |g, m| g * m));
            }
            Op::MatMul(a, b) => {
                let da = g.matmul(&self.val(*b).transposed());
                let db = self.val(*a).transposed().matmul(g);
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Transpose(a) => add_to(grads, *a, g.transposed()),
            Op::Reshape(a) => {
                let shape = self.val(*a).shape().to_vec();
                add_to(grads, *a, g.reshaped(&shape));
            }
            Op::Concat { inputs, axis } => {
                let rank = self.val(inputs[0]).rank();
                let mut offset = 0;
                for &v in inputs {
                    let t = self.val(v);
                    let part = if rank == 1 {
                        let len = t.len();
                        let part = Tensor::from_vec(g.data()[offset..offset + len].to_vec());
                        offset += len;
                        part
                    } else if *axis == 0 {
                        let (m, n) = t.dims2();
                        let part =
                            Tensor::new(&[m, n], g.data()[offset * n..(offset + m) * n].to_vec());
                        offset += m;
                        part
                    } else {
                        let (m, n) = t.dims2();
                        let total = g.dims2().1;
                        let mut data = vec![0.0; m * n];
                        for i in 0..m {
                            data[i * n..(i + 1) * n].copy_from_slice(
                                &g.data()[i * total + offset..i * total + offset + n],
                            );
                        }
                        offset += n;
                        Tensor::new(&[m, n], data)
                    };
                    add_to(grads, v, part);
                }
            }
            Op::Narrow {
                input,
                axis,
                start,
                len,
            } => {
                let t = self.val(*input);
                let mut full = Tensor::zeros(t.shape());
                match t.rank() {
                    1 => {
                        full.data_mut()[*start..*start + *len].copy_from_slice(g.data());
                    }
                    2 => {
                        let (m, n) = t.dims2();
                        if *axis == 0 {
                            full.data_mut()[*start * n..(*start + *len) * n]
                                .copy_from_slice(g.data());
                        } else {
                            for i in 0..m {
                                full.data_mut()[i * n + *start..i * n + *start + *len]
                                    .copy_from_slice(&g.data()[i * *len..(i + 1) * *len]);
                            }
                        }
                    }
                    _ => unreachable!(),
                }
                add_to(grads, *input, full);
            }
            Op::SumAll(a) => {
                let c = g.data()[0];
                add_to(grads, *a, Tensor::filled(self.val(*a).shape(), c));
            }
            Op::MeanRows(a) => {
                let (m, n) = self.val(*a).dims2();
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        data[i * n + j] = g.data()[j] / m as f64;
                    }
                }
                add_to(grads, *a, Tensor::new(&[m, n], data));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let (m, n) = y.dims2();
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(&y, &g)| y * g).sum();
                    for j in 0..n {
                        data[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_to(grads, *a, Tensor::new(&[m, n], data));
            }
            Op::LayerNormRows(a) => {
                let x = self.val(*a);
                let y = &self.nodes[idx].value;
                let (m, n) = x.dims2();
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    let xr = &x.data()[i * n..(i + 1) * n];
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let mean = xr.iter().sum::<f64>() / n as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / n as f64;
                    let gy_mean =
                        gr.iter().zip(yr.iter()).map(|(&g, &y)| g * y).sum::<f64>() / n as f64;
                    for j in 0..n {
                        data[i * n + j] = inv * (gr[j] - g_mean - yr[j] * gy_mean);
                    }
                }
                add_to(grads, *a, Tensor::new(&[m, n], data));
            }
            Op::AddRow(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.col_sums());
            }
            Op::MulRow(a, b) => {
                let (m, n) = self.val(*a).dims2();
                let row = self.val(*b).data();
                let mut da = g.data().to_vec();
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] *= row[j];
                    }
                }
                add_to(grads, *a, Tensor::new(&[m, n], da));
                let ga = g.zip(self.val(*a), |g, x| g * x);
                add_to(grads, *b, ga.col_sums());
            }
            Op::MulCol(a, b) => {
                let (m, n) = self.val(*a).dims2();
                let col = self.val(*b).data();
                let mut da = g.data().to_vec();
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] *= col[i];
                    }
                }
                add_to(grads, *a, Tensor::new(&[m, n], da));
                let ga = g.zip(self.val(*a), |g, x| g * x);
                add_to(grads, *b, ga.row_sums());
            }
            Op::ScaleByScalar(a, s) => {
                let c = self.val(*s).data()[0];
                add_to(grads, *a, g.scale(c));
                let dot: f64 = g
                    .data()
                    .iter()
                    .zip(self.val(*a).data().iter())
                    .map(|(&g, &x)| g * x)
                    .sum();
                // The scalar may be stored as any single-element shape.
                add_to(grads, *s, Tensor::new(self.val(*s).shape(), vec![dot]));
            }
            Op::BilinearSample { map, pos, strides } => {
                let dpos = bilinear_backward(map, self.val(*pos), *strides, g);
                add_to(grads, *pos, dpos);
            }
        }
    }
}

fn bilinear_forward(map: &Tensor, pos: &Tensor, strides: [f64; 2]) -> Tensor {
    assert_eq!(map.rank(), 3, "feature maps are (h, w, c)");
    let c = map.shape()[2];
    let (k, two) = pos.dims2();
    assert_eq!(two, 2, "positions must be (k, 2)");
    let mut out = vec![0.0; k * c];
    for i in 0..k {
        crate::pyramid::sample_into(
            map,
            pos.data()[i * 2],
            pos.data()[i * 2 + 1],
            strides[0],
            strides[1],
            &mut out[i * c..(i + 1) * c],
        );
    }
    Tensor::new(&[k, c], out)
}

fn bilinear_backward(map: &Tensor, pos: &Tensor, strides: [f64; 2], g: &Tensor) -> Tensor {
    let c = map.shape()[2];
    let (k, _) = pos.dims2();
    let mut dpos = vec![0.0; k * 2];
    for i in 0..k {
        let (du, dv) = crate::pyramid::sample_pos_grad(
            map,
            pos.data()[i * 2],
            pos.data()[i * 2 + 1],
            strides[0],
            strides[1],
            &g.data()[i * c..(i + 1) * c],
        );
        dpos[i * 2] = du;
        dpos[i * 2 + 1] = dv;
    }
    Tensor::new(&[k, 2], dpos)
}

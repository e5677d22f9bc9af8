//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value and a closure
//! mapping the node's cotangent to cotangents of its parents. Nodes can only
//! reference earlier nodes, so reverse index order is a reverse topological
//! order and each node is visited once.

use crate::attention::{attend_backward, attend_with_weights, AttentionGroup};
use crate::conv::{conv3d, conv3d_backward, Conv3dSpec};
use crate::error::{Error, Result};
use crate::resample::{bilinear_resize, bilinear_resize_adjoint};
use crate::tensor::{gemm, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Backward<T> = Box<dyn Fn(&Tensor<T>) -> Result<Vec<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<usize>,
    needs_grad: bool,
    backward: Option<Backward<T>>,
}

#[derive(Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Cotangents of every node reached by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

fn row_dims<T: Scalar>(a: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    if a.rank() != 2 {
        return Err(Error::shape(op, format!("expected a matrix, got {:?}", a.shape())));
    }
    Ok((a.dim(0), a.dim(1)))
}

fn column_sums<T: Scalar>(g: &Tensor<T>, rows: usize, cols: usize) -> Tensor<T> {
    let mut s = vec![T::zero(); cols];
    for r in 0..rows {
        for (acc, &v) in s.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
            *acc += v;
        }
    }
    Tensor::new(vec![cols], s).expect("column sums")
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Trainable input: gradients are collected for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Vec::new(), true, None)
    }

    /// Input that needs no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Vec::new(), false, None)
    }

    fn push_raw(&mut self, value: Tensor<T>, parents: Vec<usize>, needs_grad: bool, backward: Option<Backward<T>>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            needs_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: Backward<T>) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let parents = parents.iter().map(|p| p.0).collect();
        self.push_raw(value, parents, needs_grad, needs_grad.then_some(backward))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, &[a, b], Box::new(|g| Ok(vec![g.clone(), g.clone()]))))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        Ok(self.push(y, &[a, b], Box::new(|g| Ok(vec![g.clone(), g.scale(-T::one())]))))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let y = va.mul(&vb)?;
        Ok(self.push(y, &[a, b], Box::new(move |g| Ok(vec![g.mul(&vb)?, g.mul(&va)?]))))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let y = self.value(a).scale(s);
        self.push(y, &[a], Box::new(move |g| Ok(vec![g.scale(s)])))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let y = self.value(a).map(|x| x + s);
        self.push(y, &[a], Box::new(|g| Ok(vec![g.clone()])))
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let y = va.matmul(&vb)?;
        let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
        Ok(self.push(
            y,
            &[a, b],
            Box::new(move |g| {
                let mut da = vec![T::zero(); m * k];
                gemm(false, true, m, n, k, g.data(), vb.data(), &mut da, false);
                let mut db = vec![T::zero(); k * n];
                gemm(true, false, k, m, n, va.data(), g.data(), &mut db, false);
                Ok(vec![Tensor::new(vec![m, k], da)?, Tensor::new(vec![k, n], db)?])
            }),
        ))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = row_dims(self.value(a), "add_row")?;
        if self.value(row).numel() != n {
            return Err(Error::shape("add_row", format!("row {:?} for {n} columns", self.value(row).shape())));
        }
        let row_shape = self.value(row).shape().to_vec();
        let r = self.value(row).data().to_vec();
        let y = Tensor::from_fn(vec![m, n], |i| self.value(a).data()[i] + r[i % n]);
        Ok(self.push(
            y,
            &[a, row],
            Box::new(move |g| Ok(vec![g.clone(), column_sums(g, m, n).reshape(row_shape.clone())?])),
        ))
    }

    /// Multiplies every row of an `[m, n]` matrix elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = row_dims(self.value(a), "mul_row")?;
        if self.value(row).numel() != n {
            return Err(Error::shape("mul_row", format!("row {:?} for {n} columns", self.value(row).shape())));
        }
        let (va, vr) = (self.value(a).clone(), self.value(row).clone());
        let y = Tensor::from_fn(vec![m, n], |i| va.data()[i] * vr.data()[i % n]);
        Ok(self.push(
            y,
            &[a, row],
            Box::new(move |g| {
                let da = Tensor::from_fn(vec![m, n], |i| g.data()[i] * vr.data()[i % n]);
                let prod = g.mul(&va)?;
                Ok(vec![da, column_sums(&prod, m, n).reshape(vr.shape().to_vec())?])
            }),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let y = Tensor::scalar(self.value(a).sum());
        self.push(y, &[a], Box::new(move |g| Ok(vec![Tensor::full(shape.clone(), g.data()[0])])))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let n = T::of(self.value(a).numel() as f64);
        let y = Tensor::scalar(self.value(a).mean());
        self.push(y, &[a], Box::new(move |g| Ok(vec![Tensor::full(shape.clone(), g.data()[0] / n)])))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let y = va.map(|x| x * x);
        let two = T::of(2.0);
        self.push(y, &[a], Box::new(move |g| Ok(vec![g.zip_map(&va, "square", |g, x| g * two * x)?])))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let y = va.map(|x| x / (T::one() + (-x).exp()));
        self.push(
            y,
            &[a],
            Box::new(move |g| {
                Ok(vec![g.zip_map(&va, "silu", |g, x| {
                    let s = T::one() / (T::one() + (-x).exp());
                    g * s * (T::one() + x * (T::one() - s))
                })?])
            }),
        )
    }

    /// Normalizes each row of an `[m, n]` matrix to zero mean and unit
    /// variance (no affine parameters).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let (m, n) = row_dims(self.value(a), "layer_norm")?;
        let x = self.value(a).data().to_vec();
        let mut y = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let nt = T::of(n as f64);
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mu = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                y[r * n + c] = (row[c] - mu) * is;
            }
        }
        let yt = Tensor::new(vec![m, n], y)?;
        let yc = yt.clone();
        Ok(self.push(
            yt,
            &[a],
            Box::new(move |g| {
                let (gd, yd) = (g.data(), yc.data());
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    let gr = &gd[r * n..(r + 1) * n];
                    let yr = &yd[r * n..(r + 1) * n];
                    let mg = gr.iter().copied().sum::<T>() / nt;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nt;
                    for c in 0..n {
                        dx[r * n + c] = inv_std[r] * (gr[c] - mg - yr[c] * mgy);
                    }
                }
                Ok(vec![Tensor::new(vec![m, n], dx)?])
            }),
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() == 0 {
            return Err(Error::shape("softmax", "scalar input"));
        }
        let n = va.dim(va.rank() - 1);
        let mut y = va.to_vec();
        for row in y.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        let yt = Tensor::new(va.shape().to_vec(), y)?;
        let yc = yt.clone();
        Ok(self.push(
            yt,
            &[a],
            Box::new(move |g| {
                let mut dx = Vec::with_capacity(g.numel());
                for (gr, yr) in g.data().chunks(n).zip(yc.data().chunks(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(&g, &y)| y * (g - dot)));
                }
                Ok(vec![Tensor::new(yc.shape().to_vec(), dx)?])
            }),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let orig = self.value(a).shape().to_vec();
        let y = self.value(a).reshape(shape)?;
        Ok(self.push(y, &[a], Box::new(move |g| Ok(vec![g.reshape(orig.clone())?]))))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).transpose2d()?;
        Ok(self.push(y, &[a], Box::new(|g| Ok(vec![g.transpose2d()?]))))
    }

    /// Joins `[m, n1]` and `[m, n2]` into `[m, n1 + n2]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n1) = row_dims(self.value(a), "concat_cols")?;
        let (mb, n2) = row_dims(self.value(b), "concat_cols")?;
        if m != mb {
            return Err(Error::shape("concat_cols", format!("{m} vs {mb} rows")));
        }
        let n = n1 + n2;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut y = Vec::with_capacity(m * n);
        for r in 0..m {
            y.extend_from_slice(&da[r * n1..(r + 1) * n1]);
            y.extend_from_slice(&db[r * n2..(r + 1) * n2]);
        }
        Ok(self.push(
            Tensor::new(vec![m, n], y)?,
            &[a, b],
            Box::new(move |g| {
                let mut ga = Vec::with_capacity(m * n1);
                let mut gb = Vec::with_capacity(m * n2);
                for row in g.data().chunks(n) {
                    ga.extend_from_slice(&row[..n1]);
                    gb.extend_from_slice(&row[n1..]);
                }
                Ok(vec![Tensor::new(vec![m, n1], ga)?, Tensor::new(vec![m, n2], gb)?])
            }),
        ))
    }

    /// Columns `[start, start + len)` of an `[m, n]` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = row_dims(self.value(a), "slice_cols")?;
        if start + len > n {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of {n}", start + len)));
        }
        let y: Vec<T> = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(
            Tensor::new(vec![m, len], y)?,
            &[a],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); m * n];
                for (r, row) in g.data().chunks(len).enumerate() {
                    dx[r * n + start..r * n + start + len].copy_from_slice(row);
                }
                Ok(vec![Tensor::new(vec![m, n], dx)?])
            }),
        ))
    }

    pub fn conv3d(&mut self, x: Var, kernel: Var, bias: Var, spec: Conv3dSpec) -> Result<Var> {
        let (vx, vk) = (self.value(x).clone(), self.value(kernel).clone());
        let y = conv3d(&vx, &vk, Some(self.value(bias)), spec)?;
        Ok(self.push(
            y,
            &[x, kernel, bias],
            Box::new(move |g| {
                let grads = conv3d_backward(&vx, &vk, g, spec)?;
                Ok(vec![grads.input, grads.kernel, grads.bias])
            }),
        ))
    }

    /// Bilinear resize of the two trailing dimensions.
    pub fn bilinear(&mut self, x: Var, new_h: usize, new_w: usize) -> Result<Var> {
        let r = self.value(x).rank();
        let (h, w) = (self.value(x).dim(r - 2), self.value(x).dim(r - 1));
        let y = bilinear_resize(self.value(x), new_h, new_w)?;
        Ok(self.push(y, &[x], Box::new(move |g| Ok(vec![bilinear_resize_adjoint(g, h, w)?]))))
    }

    /// Multi-head attention over `[N, D]` operands following `plan`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, plan: Vec<AttentionGroup>) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q).clone(), self.value(k).clone(), self.value(v).clone());
        let (y, weights) = attend_with_weights(&vq, &vk, &vv, heads, &plan)?;
        Ok(self.push(
            y,
            &[q, k, v],
            Box::new(move |g| {
                let grads = attend_backward(&vq, &vk, &vv, heads, &plan, &weights, g)?;
                Ok(vec![grads.q, grads.k, grads.v])
            }),
        ))
    }

    /// Propagates from a scalar `loss`, seeding its adjoint with 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Tape(format!("unknown node {}", loss.0)))?;
        if node.value.numel() != 1 {
            return Err(Error::Tape(format!("loss must be scalar, got shape {:?}", node.value.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(node.value.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if node.parents.iter().any(|&p| p >= i) {
                return Err(Error::Tape(format!("node {i} references a later node; tape is cyclic")));
            }
            let Some(g) = grads[i].clone() else { continue };
            let Some(backward) = &node.backward else { continue };
            let parent_grads = backward(&g)?;
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p].needs_grad {
                    continue;
                }
                grads[p] = Some(match grads[p].take() {
                    Some(acc) => acc.add(&pg)?,
                    None => pg,
                });
            }
        }
        Ok(Gradients { grads })
    }

    #[cfg(test)]
    fn corrupt_parent(&mut self, node: Var, parent: usize) {
        self.nodes[node.0].parents[0] = parent;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionGroup;
    use crate::rng::{randn, Rng};

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.square(x);
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_and_cycles_are_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros(vec![2]));
        assert!(tape.backward(x).is_err());
        let s = tape.sum(x);
        tape.corrupt_parent(s, s.index());
        assert!(matches!(tape.backward(s), Err(Error::Tape(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::full(vec![2], 3.0));
        let x = tape.param(Tensor::full(vec![2], 2.0));
        let y = tape.mul(c, x).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

    /// Central differences with h = 1e-3 against the tape, in f64.
    fn check(inputs: &[Tensor<f64>], build: &Build) {
        let run = |xs: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
            let out = build(&mut tape, &vars).unwrap();
            tape.value(out).data()[0]
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(out).unwrap();
        let h = 1e-3;
        for (p, x) in inputs.iter().enumerate() {
            let g = grads.get_or_zeros(vars[p], x);
            for i in 0..x.numel() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                let mut d = x.to_vec();
                d[i] += h;
                plus[p] = Tensor::new(x.shape().to_vec(), d.clone()).unwrap();
                d[i] -= 2.0 * h;
                minus[p] = Tensor::new(x.shape().to_vec(), d).unwrap();
                let fd = (run(&plus) - run(&minus)) / (2.0 * h);
                let an = g.data()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(rel <= 1e-3, "input {p}[{i}]: fd {fd} vs tape {an}");
            }
        }
    }

    fn r(seed: u64, shape: &[usize]) -> Tensor<f64> {
        randn(&mut Rng::new(seed, 0), shape).unwrap()
    }

    /// Weighted sum with a fixed random projection, so every output
    /// element contributes a distinct cotangent.
    fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
        let w = tape.constant(r(seed, tape.value(y).shape()));
        let p = tape.mul(y, w)?;
        Ok(tape.sum(p))
    }

    #[test]
    fn elementwise_primitives_match_finite_differences() {
        check(&[r(1, &[3, 4]), r(2, &[3, 4])], &|t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.mul(a, v[1])?;
            let c = t.sub(b, v[0])?;
            let d = t.silu(c);
            let e = t.scale(d, 0.7);
            let f = t.add_scalar(e, 0.3);
            let g = t.square(f);
            let m = t.mean(g);
            let s = project(t, f, 9)?;
            t.add(m, s)
        });
    }

    #[test]
    fn matrix_primitives_match_finite_differences() {
        check(&[r(3, &[4, 5]), r(4, &[5, 3]), r(5, &[3]), r(6, &[3])], &|t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.add_row(y, v[2])?;
            let y = t.mul_row(y, v[3])?;
            let y = t.layer_norm(y, 1e-5)?;
            let z = t.transpose(y)?;
            let z = t.softmax(z)?;
            let z = t.reshape(z, vec![4, 3])?;
            let c = t.concat_cols(z, y)?;
            let s = t.slice_cols(c, 2, 3)?;
            project(t, s, 10)
        });
    }

    #[test]
    fn conv_and_resize_match_finite_differences() {
        let spec = Conv3dSpec::same([3, 3, 3]).unwrap();
        check(&[r(7, &[2, 2, 3, 3]), r(8, &[3, 2, 3, 3, 3]), r(9, &[3])], &move |t, v| {
            let y = t.conv3d(v[0], v[1], v[2], spec)?;
            let y = t.bilinear(y, 5, 6)?;
            project(t, y, 11)
        });
    }

    #[test]
    fn attention_matches_finite_differences() {
        let plan = vec![
            AttentionGroup {
                queries: vec![0, 1],
                keys: vec![0, 1, 3],
            },
            AttentionGroup {
                queries: vec![2, 3],
                keys: vec![2, 3],
            },
        ];
        check(&[r(12, &[4, 4]), r(13, &[4, 4]), r(14, &[4, 4])], &move |t, v| {
            let y = t.attention(v[0], v[1], v[2], 2, plan.clone())?;
            project(t, y, 15)
        });
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        check(&[r(20, &[6, 4]), r(21, &[4, 8]), r(22, &[8]), r(23, &[8, 2])], &|t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add_row(h, v[2])?;
            let h = t.silu(h);
            let y = t.matmul(h, v[3])?;
            let y = t.square(y);
            Ok(t.mean(y))
        });
    }
}

//! Multi-head softmax attention over explicit query/key groups.
//!
//! Every attention variant in this crate lowers to an [`AttentionPlan`]: a
//! list of groups whose query sets partition the tokens, each attending
//! jointly over its own key set. Groups are processed in parallel and
//! merged in plan order, so results do not depend on the worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

pub type AttentionPlan = Vec<AttentionGroup>;

/// Softmax weights of one group, `heads x queries x keys`.
#[derive(Clone, Debug)]
pub struct GroupWeights<T: Scalar> {
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> GroupWeights<T> {
    pub fn row(&self, head: usize, query: usize) -> &[T] {
        let start = (head * self.queries + query) * self.keys;
        &self.data[start..start + self.keys]
    }
}

/// Checks that query sets partition `0..n` and keys are in range.
pub fn validate_plan(plan: &[AttentionGroup], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for (g, group) in plan.iter().enumerate() {
        if group.keys.is_empty() && !group.queries.is_empty() {
            return Err(Error::invalid("attention", format!("group {g} has no keys")));
        }
        if let Some(&k) = group.keys.iter().find(|&&k| k >= n) {
            return Err(Error::invalid("attention", format!("key {k} out of range {n}")));
        }
        for &q in &group.queries {
            if q >= n || std::mem::replace(&mut seen[q], true) {
                return Err(Error::invalid(
                    "attention",
                    format!("query {q} out of range or assigned twice"),
                ));
            }
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::invalid("attention", format!("query {missing} not covered")));
    }
    Ok(())
}

fn check_operands<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<usize> {
    if q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let d = q.dim(1);
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(
            "attention",
            format!("model dim {d} not divisible by {heads} heads"),
        ));
    }
    Ok(d / heads)
}

/// Copies the `head` slice of the listed rows into a dense `rows x dh` block.
fn gather<T: Scalar>(x: &[T], d: usize, dh: usize, head: usize, rows: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * dh);
    for &r in rows {
        out.extend_from_slice(&x[r * d + head * dh..r * d + (head + 1) * dh]);
    }
    out
}

fn softmax_rows<T: Scalar>(s: &mut [T], cols: usize) {
    for row in s.chunks_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        let inv = T::one() / total;
        row.iter_mut().for_each(|x| *x *= inv);
    }
}

struct GroupForward<T: Scalar> {
    out: Vec<T>,
    weights: GroupWeights<T>,
}

fn group_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    heads: usize,
    group: &AttentionGroup,
) -> GroupForward<T> {
    let dh = d / heads;
    let (nq, nk) = (group.queries.len(), group.keys.len());
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); nq * d];
    let mut weights = Vec::with_capacity(heads * nq * nk);
    let mut o = vec![T::zero(); nq * dh];
    for h in 0..heads {
        let qh = gather(q, d, dh, h, &group.queries);
        let kh = gather(k, d, dh, h, &group.keys);
        let vh = gather(v, d, dh, h, &group.keys);
        let mut s = vec![T::zero(); nq * nk];
        gemm(false, true, nq, dh, nk, &qh, &kh, &mut s, false);
        s.iter_mut().for_each(|x| *x *= scale);
        softmax_rows(&mut s, nk);
        gemm(false, false, nq, nk, dh, &s, &vh, &mut o, false);
        for i in 0..nq {
            out[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&o[i * dh..(i + 1) * dh]);
        }
        weights.extend_from_slice(&s);
    }
    GroupForward {
        out,
        weights: GroupWeights {
            heads,
            queries: nq,
            keys: nk,
            data: weights,
        },
    }
}

/// Attention output plus the per-group softmax weights.
pub fn attend_with_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    plan: &[AttentionGroup],
) -> Result<(Tensor<T>, Vec<GroupWeights<T>>)> {
    check_operands(q, k, v, heads)?;
    let (n, d) = (q.dim(0), q.dim(1));
    validate_plan(plan, n)?;
    let results: Vec<GroupForward<T>> = plan
        .par_iter()
        .map(|g| group_forward(q.data(), k.data(), v.data(), d, heads, g))
        .collect();
    let mut out = vec![T::zero(); n * d];
    let mut weights = Vec::with_capacity(plan.len());
    for (group, r) in plan.iter().zip(results) {
        for (i, &row) in group.queries.iter().enumerate() {
            out[row * d..(row + 1) * d].copy_from_slice(&r.out[i * d..(i + 1) * d]);
        }
        weights.push(r.weights);
    }
    Ok((Tensor::new(vec![n, d], out)?, weights))
}

pub fn attend<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    plan: &[AttentionGroup],
) -> Result<Tensor<T>> {
    attend_with_weights(q, k, v, heads, plan).map(|(out, _)| out)
}

pub struct AttentionGrads<T: Scalar> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

struct GroupBackward<T: Scalar> {
    dq: Vec<T>,
    dk: Vec<T>,
    dv: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
fn group_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    dout: &[T],
    d: usize,
    heads: usize,
    group: &AttentionGroup,
    w: &GroupWeights<T>,
) -> GroupBackward<T> {
    let dh = d / heads;
    let (nq, nk) = (group.queries.len(), group.keys.len());
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); nq * d];
    let mut dk = vec![T::zero(); nk * d];
    let mut dv = vec![T::zero(); nk * d];
    let mut tmp_q = vec![T::zero(); nq * dh];
    let mut tmp_k = vec![T::zero(); nk * dh];
    for h in 0..heads {
        let p = &w.data[h * nq * nk..(h + 1) * nq * nk];
        let qh = gather(q, d, dh, h, &group.queries);
        let kh = gather(k, d, dh, h, &group.keys);
        let vh = gather(v, d, dh, h, &group.keys);
        let doh = gather(dout, d, dh, h, &group.queries);

        // dV = P^T dO
        gemm(true, false, nk, nq, dh, p, &doh, &mut tmp_k, false);
        for j in 0..nk {
            dv[j * d + h * dh..j * d + (h + 1) * dh].copy_from_slice(&tmp_k[j * dh..(j + 1) * dh]);
        }
        // dP = dO V^T, dS = P * (dP - rowsum(dP * P))
        let mut ds = vec![T::zero(); nq * nk];
        gemm(false, true, nq, dh, nk, &doh, &vh, &mut ds, false);
        for i in 0..nq {
            let row_p = &p[i * nk..(i + 1) * nk];
            let row = &mut ds[i * nk..(i + 1) * nk];
            let dot: T = row.iter().zip(row_p).map(|(&a, &b)| a * b).sum();
            for (x, &pp) in row.iter_mut().zip(row_p) {
                *x = pp * (*x - dot) * scale;
            }
        }
        gemm(false, false, nq, nk, dh, &ds, &kh, &mut tmp_q, false);
        for i in 0..nq {
            dq[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&tmp_q[i * dh..(i + 1) * dh]);
        }
        gemm(true, false, nk, nq, dh, &ds, &qh, &mut tmp_k, false);
        for j in 0..nk {
            dk[j * d + h * dh..j * d + (h + 1) * dh].copy_from_slice(&tmp_k[j * dh..(j + 1) * dh]);
        }
    }
    GroupBackward { dq, dk, dv }
}

/// Vector-Jacobian product of [`attend`] for upstream gradient `dout`.
pub fn attend_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    plan: &[AttentionGroup],
    weights: &[GroupWeights<T>],
    dout: &Tensor<T>,
) -> Result<AttentionGrads<T>> {
    check_operands(q, k, v, heads)?;
    q.expect_same_shape(dout, "attend_backward")?;
    if weights.len() != plan.len() {
        return Err(Error::invalid("attend_backward", "weights do not match plan"));
    }
    let (n, d) = (q.dim(0), q.dim(1));
    let parts: Vec<GroupBackward<T>> = plan
        .par_iter()
        .zip(weights.par_iter())
        .map(|(g, w)| group_backward(q.data(), k.data(), v.data(), dout.data(), d, heads, g, w))
        .collect();
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    for (group, part) in plan.iter().zip(parts) {
        for (i, &row) in group.queries.iter().enumerate() {
            for c in 0..d {
                dq[row * d + c] += part.dq[i * d + c];
            }
        }
        for (j, &row) in group.keys.iter().enumerate() {
            for c in 0..d {
                dk[row * d + c] += part.dk[j * d + c];
                dv[row * d + c] += part.dv[j * d + c];
            }
        }
    }
    Ok(AttentionGrads {
        q: Tensor::new(vec![n, d], dq)?,
        k: Tensor::new(vec![n, d], dk)?,
        v: Tensor::new(vec![n, d], dv)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, Rng};

    fn overlapping_plan() -> AttentionPlan {
        vec![
            AttentionGroup {
                queries: vec![0, 1, 2],
                keys: vec![0, 1, 2, 5],
            },
            AttentionGroup {
                queries: vec![3, 4, 5],
                keys: vec![3, 4, 5, 0, 1],
            },
        ]
    }

    #[test]
    fn plan_validation() {
        assert!(validate_plan(&overlapping_plan(), 6).is_ok());
        let mut bad = overlapping_plan();
        bad[1].queries.push(0);
        assert!(validate_plan(&bad, 6).is_err());
        let mut missing = overlapping_plan();
        missing[1].queries.pop();
        assert!(validate_plan(&missing, 6).is_err());
    }

    #[test]
    fn rows_are_stochastic() {
        let mut rng = Rng::new(2, 0);
        let q = randn::<f32>(&mut rng, &[6, 8]).unwrap();
        let k = randn::<f32>(&mut rng, &[6, 8]).unwrap();
        let v = randn::<f32>(&mut rng, &[6, 8]).unwrap();
        let (_, w) = attend_with_weights(&q, &k, &v, 2, &overlapping_plan()).unwrap();
        for g in &w {
            for h in 0..g.heads {
                for i in 0..g.queries {
                    let s: f32 = g.row(h, i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(3, 0);
        let q = randn::<f64>(&mut rng, &[6, 4]).unwrap();
        let k = randn::<f64>(&mut rng, &[6, 4]).unwrap();
        let v = randn::<f64>(&mut rng, &[6, 4]).unwrap();
        let g = randn::<f64>(&mut rng, &[6, 4]).unwrap();
        let plan = overlapping_plan();
        let f = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| -> f64 {
            let o = attend(q, k, v, 2, &plan).unwrap();
            o.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let (_, w) = attend_with_weights(&q, &k, &v, 2, &plan).unwrap();
        let grads = attend_backward(&q, &k, &v, 2, &plan, &w, &g).unwrap();
        let bump = |t: &Tensor<f64>, i: usize, d: f64| {
            let mut x = t.to_vec();
            x[i] += d;
            Tensor::new(t.shape().to_vec(), x).unwrap()
        };
        let h = 1e-6;
        for i in 0..24 {
            let fq = (f(&bump(&q, i, h), &k, &v) - f(&bump(&q, i, -h), &k, &v)) / (2.0 * h);
            let fk = (f(&q, &bump(&k, i, h), &v) - f(&q, &bump(&k, i, -h), &v)) / (2.0 * h);
            let fv = (f(&q, &k, &bump(&v, i, h)) - f(&q, &k, &bump(&v, i, -h))) / (2.0 * h);
            assert!((fq - grads.q.data()[i]).abs() < 1e-7, "dq[{i}]");
            assert!((fk - grads.k.data()[i]).abs() < 1e-7, "dk[{i}]");
            assert!((fv - grads.v.data()[i]).abs() < 1e-7, "dv[{i}]");
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let t = Tensor::<f32>::zeros(vec![2, 6]);
        let plan = vec![AttentionGroup {
            queries: vec![0, 1],
            keys: vec![0, 1],
        }];
        assert!(attend(&t, &t, &t, 4, &plan).is_err());
    }
}

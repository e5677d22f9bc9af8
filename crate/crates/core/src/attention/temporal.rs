//! Interleaving temporal units: slice the latent time axis into units,
//! run an attention op per unit, and roll unit boundaries on odd layers.

use super::grid::{TemporalUnitPlan, TokenGrid};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Cyclically rolls whole frames: output frame `i` is input frame `(i + shift) % T`.
pub fn roll_frames<T: Scalar>(grid: &TokenGrid<T>, shift: isize) -> Result<TokenGrid<T>> {
    let frames = grid.frames() as isize;
    let order: Vec<usize> = (0..frames)
        .map(|i| (i + shift).rem_euclid(frames) as usize)
        .collect();
    gather_frames(grid, &order)
}

/// Grid made of the listed frames of `grid`, in the listed order.
pub fn gather_frames<T: Scalar>(grid: &TokenGrid<T>, frames: &[usize]) -> Result<TokenGrid<T>> {
    let per = grid.height() * grid.width() * grid.dim();
    let src = grid.tokens().data();
    let mut data = Vec::with_capacity(frames.len() * per);
    for &f in frames {
        if f >= grid.frames() {
            return Err(Error::invalid("gather_frames", format!("frame {f} out of range")));
        }
        data.extend_from_slice(&src[f * per..(f + 1) * per]);
    }
    let tokens = Tensor::new(vec![frames.len() * grid.height() * grid.width(), grid.dim()], data)?;
    TokenGrid::new(tokens, frames.len(), grid.height(), grid.width())
}

/// Runs `op` on every temporal unit of `layer` and stitches the results
/// back into the original frame order.
///
/// On shifted layers the grid is rolled by the plan's shift, cut into
/// consecutive units, processed, and rolled back. A sequence no longer than
/// one unit is passed to `op` whole.
pub fn interleaved_temporal_wrap<T, F>(
    op: F,
    q: &TokenGrid<T>,
    k: &TokenGrid<T>,
    v: &TokenGrid<T>,
    plan: &TemporalUnitPlan,
    layer: usize,
) -> Result<TokenGrid<T>>
where
    T: Scalar,
    F: Fn(&TokenGrid<T>, &TokenGrid<T>, &TokenGrid<T>) -> Result<TokenGrid<T>>,
{
    q.same_layout(k, "interleaved_temporal_wrap")?;
    q.same_layout(v, "interleaved_temporal_wrap")?;
    if plan.unit == 0 {
        return Err(Error::invalid("interleaved_temporal_wrap", "unit length must be >= 1"));
    }
    let frames = q.frames();
    if frames <= plan.unit {
        return op(q, k, v);
    }
    let shift = if plan.is_shifted_layer(layer) {
        (plan.shift % frames) as isize
    } else {
        0
    };
    let (qr, kr, vr) = (roll_frames(q, shift)?, roll_frames(k, shift)?, roll_frames(v, shift)?);
    let mut parts = Vec::new();
    for start in (0..frames).step_by(plan.unit) {
        let idx: Vec<usize> = (start..(start + plan.unit).min(frames)).collect();
        let out = op(
            &gather_frames(&qr, &idx)?,
            &gather_frames(&kr, &idx)?,
            &gather_frames(&vr, &idx)?,
        )?;
        if out.layout() != gather_frames(&qr, &idx)?.layout() {
            return Err(Error::shape("interleaved_temporal_wrap", "op changed the unit layout"));
        }
        parts.push(out.tokens().clone());
    }
    let stitched = TokenGrid::new(Tensor::concat_outer(&parts)?, frames, q.height(), q.width())?;
    roll_frames(&stitched, -shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, Rng};

    fn grid(frames: usize) -> TokenGrid<f32> {
        let t = randn::<f32>(&mut Rng::new(5, 0), &[frames * 6, 4]).unwrap();
        TokenGrid::new(t, frames, 2, 3).unwrap()
    }

    #[test]
    fn identity_op_round_trips_bitwise() {
        let g = grid(20);
        let plan = TemporalUnitPlan::new(5).unwrap();
        for layer in 0..4 {
            let out = interleaved_temporal_wrap(|q, _, _| Ok(q.clone()), &g, &g, &g, &plan, layer).unwrap();
            assert_eq!(out, g);
        }
    }

    #[test]
    fn shifted_layer_sees_rolled_units() {
        let g = grid(20);
        let plan = TemporalUnitPlan::new(5).unwrap();
        let seen = std::cell::RefCell::new(Vec::new());
        interleaved_temporal_wrap(
            |q, _, _| {
                seen.borrow_mut().push(q.tokens().data()[0]);
                Ok(q.clone())
            },
            &g,
            &g,
            &g,
            &plan,
            1,
        )
        .unwrap();
        let per = 6 * 4;
        let first: Vec<f32> = [2usize, 7, 12, 17].iter().map(|f| g.tokens().data()[f * per]).collect();
        assert_eq!(*seen.borrow(), first);
    }

    #[test]
    fn single_unit_is_a_no_op_wrapper() {
        let g = grid(5);
        let plan = TemporalUnitPlan::new(5).unwrap();
        let calls = std::cell::Cell::new(0);
        let out = interleaved_temporal_wrap(
            |q, _, _| {
                calls.set(calls.get() + 1);
                Ok(q.clone())
            },
            &g,
            &g,
            &g,
            &plan,
            1,
        )
        .unwrap();
        assert_eq!(calls.get(), 1);
        assert_eq!(out, g);
    }

    #[test]
    fn roll_is_a_bijection() {
        let g = grid(7);
        let r = roll_frames(&g, 3).unwrap();
        assert_ne!(r, g);
        assert_eq!(roll_frames(&r, -3).unwrap(), g);
    }
}

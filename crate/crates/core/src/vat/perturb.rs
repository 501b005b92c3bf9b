//! Perturbation algebra on single sequences (`len x dim`, row-major) and
//! per-example wrappers over `[batch, len, dim]` tensors.

use rand::Rng;

use crate::data::Batch;
use crate::error::{ensure_finite, Error, Result};
use crate::tensor::Tensor;

/// Gradients whose norm falls below this produce a zero ascent step.
pub const GRAD_NORM_FLOOR: f64 = 1e-12;
/// Below this maximum token norm the scaling index falls back to 1.
pub const COLD_START_FLOOR: f64 = 1e-12;

/// Where the scaling index reads token norms from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingSource {
    /// Norms of eta before the ascent step.
    #[default]
    PreStep,
    /// Norms of eta after the ascent step, before scaling.
    PostAscent,
}

pub fn frobenius(p: &[f64]) -> f64 {
    p.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Projection onto the Frobenius ball of radius `epsilon`.
pub fn project_frobenius(p: &[f64], epsilon: f64) -> Vec<f64> {
    let mut out = p.to_vec();
    project_frobenius_in_place(&mut out, epsilon);
    out
}

/// In-place projection. Points inside the ball are left untouched; points
/// outside are rescaled so the computed norm is at most `epsilon`, which makes
/// a second projection a bitwise no-op.
pub fn project_frobenius_in_place(p: &mut [f64], epsilon: f64) {
    let norm = frobenius(p);
    if norm <= epsilon {
        return;
    }
    let original = p.to_vec();
    let mut scale = epsilon / norm;
    loop {
        for (o, v) in p.iter_mut().zip(&original) {
            *o = v * scale;
        }
        if frobenius(p) <= epsilon {
            return;
        }
        scale *= 1.0 - 4.0 * f64::EPSILON;
    }
}

fn check_sequence(op: &'static str, p: &[f64], mask: &[bool], dim: usize) -> Result<()> {
    if dim == 0 || p.len() != mask.len() * dim {
        return Err(Error::shape(
            op,
            format!(
                "{} values do not form {} rows of width {dim}",
                p.len(),
                mask.len()
            ),
        ));
    }
    Ok(())
}

/// Per-token ratio of each row norm to the largest unpadded row norm.
/// Padded positions get 0; if every unpadded row is (near) zero all get 1.
pub fn scaling_index(eta: &[f64], mask: &[bool], dim: usize) -> Result<Vec<f64>> {
    check_sequence("scaling_index", eta, mask, dim)?;
    if !mask.iter().any(|&m| m) {
        return Err(Error::Empty(
            "scaling_index needs at least one unpadded token",
        ));
    }
    let norms: Vec<f64> = eta.chunks(dim).map(frobenius).collect();
    let max = norms
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&n, _)| n)
        .fold(0.0f64, f64::max);
    Ok(norms
        .iter()
        .zip(mask)
        .map(|(&n, &m)| match (m, max < COLD_START_FLOOR) {
            (false, _) => 0.0,
            (true, true) => 1.0,
            (true, false) => n / max,
        })
        .collect())
}

/// Token-level ascent step followed by projection of the whole sequence.
///
/// With `use_token_norm`, each row's gradient is normalized by its own norm and
/// the ascended row is scaled by its scaling index. Without it the gradient is
/// normalized over the whole sequence and no scaling is applied.
#[allow(clippy::too_many_arguments)]
pub fn token_step(
    eta: &[f64],
    grad: &[f64],
    alpha: f64,
    epsilon: f64,
    mask: &[bool],
    dim: usize,
    use_token_norm: bool,
    source: ScalingSource,
) -> Result<Vec<f64>> {
    check_sequence("token_step", eta, mask, dim)?;
    check_sequence("token_step", grad, mask, dim)?;
    ensure_finite("token gradient", grad)?;
    if !use_token_norm {
        return sequence_step(eta, grad, alpha, epsilon, mask, dim);
    }
    let pre = match source {
        ScalingSource::PreStep => Some(scaling_index(eta, mask, dim)?),
        ScalingSource::PostAscent => None,
    };
    let mut out = vec![0.0; eta.len()];
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let row = i * dim..(i + 1) * dim;
        let g = &grad[row.clone()];
        let gn = frobenius(g);
        for ((o, &e), &gv) in out[row.clone()].iter_mut().zip(&eta[row.clone()]).zip(g) {
            *o = if gn < GRAD_NORM_FLOOR {
                e
            } else {
                e + alpha * gv / gn
            };
        }
    }
    let n = match pre {
        Some(n) => n,
        None => scaling_index(&out, mask, dim)?,
    };
    for (row, &ni) in out.chunks_mut(dim).zip(&n) {
        for v in row {
            *v *= ni;
        }
    }
    project_frobenius_in_place(&mut out, epsilon);
    Ok(out)
}

/// Instance-level ascent step: whole-sequence gradient normalization, then projection.
pub fn instance_step(
    delta: &[f64],
    grad: &[f64],
    alpha: f64,
    epsilon: f64,
    mask: &[bool],
    dim: usize,
) -> Result<Vec<f64>> {
    check_sequence("instance_step", delta, mask, dim)?;
    check_sequence("instance_step", grad, mask, dim)?;
    ensure_finite("instance gradient", grad)?;
    sequence_step(delta, grad, alpha, epsilon, mask, dim)
}

fn sequence_step(
    p: &[f64],
    grad: &[f64],
    alpha: f64,
    epsilon: f64,
    mask: &[bool],
    dim: usize,
) -> Result<Vec<f64>> {
    let masked = |i: usize| mask[i / dim];
    let gn = grad
        .iter()
        .enumerate()
        .filter(|&(i, _)| masked(i))
        .map(|(_, v)| v * v)
        .sum::<f64>()
        .sqrt();
    let mut out: Vec<f64> = p
        .iter()
        .zip(grad)
        .enumerate()
        .map(|(i, (&v, &g))| match (masked(i), gn < GRAD_NORM_FLOOR) {
            (false, _) => 0.0,
            (true, true) => v,
            (true, false) => v + alpha * g / gn,
        })
        .collect();
    project_frobenius_in_place(&mut out, epsilon);
    Ok(out)
}

/// `(1/sqrt(dim)) * U(-sigma, sigma)` for every unpadded element, zero elsewhere.
/// Draws happen in row-major order over unpadded positions only.
pub fn init_delta<R: Rng + ?Sized>(
    shape: &[usize],
    sigma: f64,
    mask: &[bool],
    rng: &mut R,
) -> Result<Tensor> {
    if shape.len() != 3 || shape[0] * shape[1] != mask.len() {
        return Err(Error::shape(
            "init_delta",
            format!(
                "shape {shape:?} does not match a mask of {} positions",
                mask.len()
            ),
        ));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "sigma must be non-negative, got {sigma}"
        )));
    }
    let dim = shape[2];
    let mut t = Tensor::zeros(shape);
    if sigma == 0.0 {
        return Ok(t);
    }
    let scale = 1.0 / (dim as f64).sqrt();
    for (row, &m) in t.data_mut().chunks_mut(dim).zip(mask) {
        if m {
            for v in row {
                *v = scale * rng.gen_range(-sigma..=sigma);
            }
        }
    }
    Ok(t)
}

fn per_example<F>(p: &Tensor, grad: &[f64], batch: &Batch, mut f: F) -> Result<Tensor>
where
    F: FnMut(&[f64], &[f64], &[bool]) -> Result<Vec<f64>>,
{
    let span = p.len() / batch.batch_size.max(1);
    if p.shape().len() != 3
        || p.shape()[0] != batch.batch_size
        || p.shape()[1] != batch.seq_len
        || grad.len() != p.len()
    {
        return Err(Error::shape(
            "perturbation step",
            format!(
                "perturbation {:?} does not match batch {}x{}",
                p.shape(),
                batch.batch_size,
                batch.seq_len
            ),
        ));
    }
    let mut out = Vec::with_capacity(p.len());
    for b in 0..batch.batch_size {
        let r = b * span..(b + 1) * span;
        out.extend(f(&p.data()[r.clone()], &grad[r], batch.example_mask(b))?);
    }
    Tensor::new(p.shape().to_vec(), out)
}

pub fn batch_token_step(
    eta: &Tensor,
    grad: &[f64],
    batch: &Batch,
    alpha: f64,
    epsilon: f64,
    use_token_norm: bool,
    source: ScalingSource,
) -> Result<Tensor> {
    let dim = eta.shape().last().copied().unwrap_or(1);
    per_example(eta, grad, batch, |e, g, m| {
        token_step(e, g, alpha, epsilon, m, dim, use_token_norm, source)
    })
}

pub fn batch_instance_step(
    delta: &Tensor,
    grad: &[f64],
    batch: &Batch,
    alpha: f64,
    epsilon: f64,
) -> Result<Tensor> {
    let dim = delta.shape().last().copied().unwrap_or(1);
    per_example(delta, grad, batch, |d, g, m| {
        instance_step(d, g, alpha, epsilon, m, dim)
    })
}

/// Frobenius norm of each example's slice of a `[batch, len, dim]` tensor.
pub fn example_norms(p: &Tensor) -> Vec<f64> {
    let b = p.shape().first().copied().unwrap_or(0).max(1);
    p.data().chunks(p.len() / b).map(frobenius).collect()
}

/// Result of running [`pgd_ascent`] on an arbitrary objective.
#[derive(Clone, Debug)]
pub struct AscentTrace {
    /// Objective at each point the gradient was taken, `K` values.
    pub losses: Vec<f64>,
    pub final_point: Vec<f64>,
    pub final_loss: f64,
}

/// `K` projected, normalized ascent steps on `objective`, which returns the
/// value and gradient at a point. Used for surrogate objectives in tests and
/// diagnostics; the training loop drives the same step functions directly.
pub fn pgd_ascent<F>(
    start: &[f64],
    mask: &[bool],
    dim: usize,
    steps: usize,
    alpha: f64,
    epsilon: f64,
    mut objective: F,
) -> Result<AscentTrace>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut p = project_frobenius(start, epsilon);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, grad) = objective(&p);
        losses.push(loss);
        p = instance_step(&p, &grad, alpha, epsilon, mask, dim)?;
    }
    let (final_loss, _) = objective(&p);
    Ok(AscentTrace {
        losses,
        final_point: p,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_halves_point_at_twice_radius() {
        let p = [2.0, 0.0, 0.0, 0.0];
        assert_eq!(project_frobenius(&p, 1.0), vec![1.0, 0.0, 0.0, 0.0]);
        let q = [0.3, -0.4];
        assert_eq!(project_frobenius(&q, 0.25), vec![0.15, -0.2]);
    }

    #[test]
    fn projection_keeps_interior_and_zero() {
        let p = [0.1, -0.2, 0.05];
        assert_eq!(project_frobenius(&p, 1.0), p.to_vec());
        assert_eq!(project_frobenius(&[0.0; 3], 1.0), vec![0.0; 3]);
    }

    #[test]
    fn projection_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let eps = rng.gen_range(0.01..2.0);
            let once = project_frobenius(&p, eps);
            assert!(frobenius(&once) <= eps);
            assert_eq!(project_frobenius(&once, eps), once);
        }
    }

    #[test]
    fn scaling_index_ratios() {
        let eta = [2.0, 0.0, 0.0, 4.0];
        assert_eq!(
            scaling_index(&eta, &[true, true], 2).unwrap(),
            vec![0.5, 1.0]
        );
        let eq = [1.0, 0.0, 0.0, -1.0, 0.0, 0.0];
        assert_eq!(
            scaling_index(&eq, &[true, true, false], 2).unwrap(),
            vec![1.0, 1.0, 0.0]
        );
        assert_eq!(
            scaling_index(&[0.0; 4], &[true, true], 2).unwrap(),
            vec![1.0, 1.0]
        );
        assert!(scaling_index(&[0.0; 4], &[false, false], 2).is_err());
    }

    #[test]
    fn padded_rows_stay_zero() {
        let mask = [true, false];
        let eta = [0.1, 0.2, 0.0, 0.0];
        let grad = [1.0, -1.0, 5.0, 5.0];
        for tn in [true, false] {
            let out =
                token_step(&eta, &grad, 0.3, 1.0, &mask, 2, tn, ScalingSource::PreStep).unwrap();
            assert_eq!(&out[2..], &[0.0, 0.0]);
        }
        let out = instance_step(&eta, &grad, 0.3, 1.0, &mask, 2).unwrap();
        assert_eq!(&out[2..], &[0.0, 0.0]);
    }

    #[test]
    fn zero_gradient_only_rescales() {
        let eta = [0.1, 0.0, 0.0, 0.2];
        let out = token_step(
            &eta,
            &[0.0; 4],
            0.3,
            1.0,
            &[true, true],
            2,
            true,
            ScalingSource::PreStep,
        )
        .unwrap();
        assert_eq!(out, vec![0.05, 0.0, 0.0, 0.2]);
    }

    #[test]
    fn single_token_matches_instance_step() {
        let eta = [0.1, -0.3, 0.2];
        let grad = [0.5, 0.1, -0.7];
        let a = token_step(
            &eta,
            &grad,
            0.4,
            0.5,
            &[true],
            3,
            true,
            ScalingSource::PreStep,
        )
        .unwrap();
        let b = instance_step(&eta, &grad, 0.4, 0.5, &[true], 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn first_instance_step_length() {
        let grad = [3.0, 4.0, 0.0, 1.0];
        let d = instance_step(&[0.0; 4], &grad, 0.3, 1.0, &[true, true], 2).unwrap();
        assert!((frobenius(&d) - 0.3).abs() < 1e-15);
        let d = instance_step(&[0.0; 4], &grad, 2.0, 1.0, &[true, true], 2).unwrap();
        assert!((frobenius(&d) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn radial_gradient_on_boundary_is_fixed_point() {
        let delta = project_frobenius(&[0.6, 0.8, 0.0, 0.0], 1.0);
        let grad: Vec<f64> = delta.iter().map(|v| 2.5 * v).collect();
        let out = instance_step(&delta, &grad, 0.3, 1.0, &[true, true], 2).unwrap();
        for (a, b) in out.iter().zip(&delta) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let r = instance_step(&[0.0; 2], &[f64::NAN, 0.0], 0.1, 1.0, &[true], 2);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn init_delta_bounds_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = [true, true, false];
        let t = init_delta(&[1, 3, 4], 1.0, &mask, &mut rng).unwrap();
        assert!(t.data()[..8].iter().all(|v| v.abs() <= 0.5));
        assert!(t.data()[8..].iter().all(|&v| v == 0.0));
        let z = init_delta(&[1, 3, 4], 0.0, &mask, &mut rng).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_delta_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 250_000;
        let mask = vec![true; n];
        let t = init_delta(&[1, n, 4], 1.0, &mask, &mut rng).unwrap();
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        let expected = 1.0 / 4.0 / 3.0;
        assert!((var / expected - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn ascent_climbs_quadratic() {
        let a = [2.0, 0.5, 1.0, 0.25];
        let trace = pgd_ascent(&[0.0; 4], &[true, true], 2, 10, 0.2, 1.0, |p| {
            let loss = p
                .iter()
                .zip(&a)
                .map(|(x, a)| 0.5 * a * x * x + 0.1 * x)
                .sum();
            let grad = p.iter().zip(&a).map(|(x, a)| a * x + 0.1).collect();
            (loss, grad)
        })
        .unwrap();
        assert!(trace.losses.windows(2).all(|w| w[1] >= w[0]));
        assert!(trace.final_loss >= *trace.losses.last().unwrap());
    }
}

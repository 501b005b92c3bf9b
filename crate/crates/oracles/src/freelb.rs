//! A standalone FreeLB update: K normalized ascent steps on one perturbation,
//! parameter gradients averaged over the K points, one SGD step.

use rand::Rng;

use crate::{OracleError, Result};

#[derive(Clone, Debug)]
pub struct FreeLbSetup {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
    /// `batch * len` flags, true for real tokens.
    pub mask: Vec<bool>,
    pub steps: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub sigma: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct FreeLbOutcome {
    pub params: Vec<f64>,
    pub gradient: Vec<f64>,
    pub losses: Vec<f64>,
}

/// `grad_at(perturbation)` returns `(loss, d loss / d params, d loss / d perturbation)`
/// with everything flattened. Initial draws use `rng.gen_range(-sigma..=sigma) / sqrt(dim)`
/// for each real-token element in row-major order.
pub fn reference_freelb_step<R, G>(
    params: &[f64],
    setup: &FreeLbSetup,
    rng: &mut R,
    mut grad_at: G,
) -> Result<FreeLbOutcome>
where
    R: Rng + ?Sized,
    G: FnMut(&[f64]) -> (f64, Vec<f64>, Vec<f64>),
{
    let (b, l, d) = (setup.batch, setup.len, setup.dim);
    if setup.mask.len() != b * l || setup.steps == 0 || b * l * d > 1 << 20 {
        return Err(OracleError::InvalidInput("bad FreeLB setup".into()));
    }
    let mut delta = vec![0.0; b * l * d];
    if setup.sigma > 0.0 {
        for pos in 0..b * l {
            if setup.mask[pos] {
                for k in 0..d {
                    let u: f64 = rng.gen_range(-setup.sigma..=setup.sigma);
                    delta[pos * d + k] = u / (d as f64).sqrt();
                }
            }
        }
    }
    let mut gradient = vec![0.0; params.len()];
    let mut losses = Vec::new();
    for _ in 0..setup.steps {
        let (loss, gp, gd) = grad_at(&delta);
        if gp.len() != params.len() || gd.len() != delta.len() {
            return Err(OracleError::InvalidInput(
                "gradient sizes do not match".into(),
            ));
        }
        if gp.iter().chain(&gd).any(|v| !v.is_finite()) {
            return Err(OracleError::InvalidInput("non-finite gradient".into()));
        }
        losses.push(loss);
        for i in 0..params.len() {
            gradient[i] += gp[i] / setup.steps as f64;
        }
        for ex in 0..b {
            let range = ex * l * d..(ex + 1) * l * d;
            let real = |i: usize| setup.mask[i / d];
            let mut gn = 0.0;
            for i in range.clone() {
                if real(i) {
                    gn += gd[i] * gd[i];
                }
            }
            let gn = gn.sqrt();
            if gn >= 1e-12 {
                for i in range.clone() {
                    if real(i) {
                        delta[i] += setup.alpha * gd[i] / gn;
                    }
                }
            }
            let mut dn = 0.0;
            for i in range.clone() {
                dn += delta[i] * delta[i];
            }
            let dn = dn.sqrt();
            if dn > setup.epsilon {
                for i in range {
                    delta[i] *= setup.epsilon / dn;
                }
            }
        }
    }
    let new_params = params
        .iter()
        .zip(&gradient)
        .map(|(p, g)| p - setup.lr * g)
        .collect();
    Ok(FreeLbOutcome {
        params: new_params,
        gradient,
        losses,
    })
}

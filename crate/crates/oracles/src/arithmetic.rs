//! Scalar transcriptions of the perturbation formulas, one token per row.

fn norm(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x * x;
    }
    s.sqrt()
}

/// Rescales `rows` onto the ball of radius `epsilon` when outside it.
pub fn project_oracle(rows: &[Vec<f64>], epsilon: f64) -> Vec<Vec<f64>> {
    let mut total = 0.0;
    for r in rows {
        for x in r {
            total += x * x;
        }
    }
    let total = total.sqrt();
    if total <= epsilon {
        return rows.to_vec();
    }
    rows.iter()
        .map(|r| r.iter().map(|x| x * epsilon / total).collect())
        .collect()
}

/// `n_i = |eta_i| / max_j |eta_j|` over rows with `keep[i]`; padded rows 0, cold start 1.
pub fn scaling_index_oracle(rows: &[Vec<f64>], keep: &[bool]) -> Vec<f64> {
    let mut max = 0.0f64;
    for (r, &k) in rows.iter().zip(keep) {
        if k && norm(r) > max {
            max = norm(r);
        }
    }
    let mut out = Vec::new();
    for (r, &k) in rows.iter().zip(keep) {
        out.push(if !k {
            0.0
        } else if max < 1e-12 {
            1.0
        } else {
            norm(r) / max
        });
    }
    out
}

/// One token-level update with per-token normalization and pre-step scaling,
/// then projection of the whole sequence.
pub fn token_step_oracle(
    eta: &[Vec<f64>],
    grad: &[Vec<f64>],
    keep: &[bool],
    alpha: f64,
    epsilon: f64,
) -> Vec<Vec<f64>> {
    let n = scaling_index_oracle(eta, keep);
    let mut next = Vec::new();
    for i in 0..eta.len() {
        let mut row = vec![0.0; eta[i].len()];
        if keep[i] {
            let gn = norm(&grad[i]);
            for k in 0..row.len() {
                let step = if gn < 1e-12 {
                    0.0
                } else {
                    alpha * grad[i][k] / gn
                };
                row[k] = n[i] * (eta[i][k] + step);
            }
        }
        next.push(row);
    }
    project_oracle(&next, epsilon)
}

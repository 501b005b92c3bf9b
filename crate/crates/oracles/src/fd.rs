use crate::{OracleError, Result};

/// Central differences `(L(x + h e_i) - L(x - h e_i)) / 2h` at each coordinate.
pub fn finite_difference_gradient<F>(
    mut loss: F,
    x: &[f64],
    coordinates: &[usize],
    h: f64,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(OracleError::InvalidInput(format!(
            "step must be positive, got {h}"
        )));
    }
    if let Some(&c) = coordinates.iter().find(|&&c| c >= x.len()) {
        return Err(OracleError::InvalidInput(format!(
            "coordinate {c} outside {} values",
            x.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(coordinates.len());
    for &c in coordinates {
        let mut at = |v: f64| {
            probe[c] = v;
            let l = loss(&probe);
            if l.is_finite() {
                Ok(l)
            } else {
                Err(OracleError::NonFiniteLoss {
                    coordinate: c,
                    probe: v,
                })
            }
        };
        let plus = at(x[c] + h)?;
        let minus = at(x[c] - h)?;
        probe[c] = x[c];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

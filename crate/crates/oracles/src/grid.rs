use crate::{OracleError, Result};

pub const MAX_GRID_DIMS: usize = 6;
/// Upper bound on cube points scanned. Four dimensions at pitch epsilon/50
/// need 101^4, about 1.04e8, so the bound sits above that.
pub const MAX_GRID_POINTS: f64 = 2.0e8;

#[derive(Clone, Debug, PartialEq)]
pub struct GridMax {
    pub point: Vec<f64>,
    pub value: f64,
    pub points_scanned: u64,
}

/// Exhaustive scan of the lattice `pitch * Z^dims` inside the Euclidean ball of radius `epsilon`.
pub fn grid_inner_max<F>(loss: F, epsilon: f64, dims: usize, pitch: f64) -> Result<GridMax>
where
    F: Fn(&[f64]) -> f64,
{
    if dims == 0 || dims > MAX_GRID_DIMS {
        return Err(OracleError::InvalidInput(format!(
            "dims must be 1..={MAX_GRID_DIMS}, got {dims}"
        )));
    }
    if !(epsilon >= 0.0) || !(pitch > 0.0) {
        return Err(OracleError::InvalidInput(
            "epsilon must be non-negative and pitch positive".into(),
        ));
    }
    let half = (epsilon / pitch).floor() as i64;
    let side = (2 * half + 1) as f64;
    let points = side.powi(dims as i32);
    if points > MAX_GRID_POINTS {
        return Err(OracleError::GridTooLarge {
            points,
            limit: MAX_GRID_POINTS,
        });
    }
    let eps2 = epsilon * epsilon;
    let mut idx = vec![-half; dims];
    let mut p = vec![0.0; dims];
    let mut best = GridMax {
        point: vec![0.0; dims],
        value: loss(&vec![0.0; dims]),
        points_scanned: 0,
    };
    loop {
        let mut r2 = 0.0;
        for (v, &i) in p.iter_mut().zip(&idx) {
            *v = i as f64 * pitch;
            r2 += *v * *v;
        }
        if r2 <= eps2 {
            best.points_scanned += 1;
            let value = loss(&p);
            if value > best.value {
                best.value = value;
                best.point.copy_from_slice(&p);
            }
        }
        // Odometer increment.
        let mut d = 0;
        loop {
            if d == dims {
                return Ok(best);
            }
            idx[d] += 1;
            if idx[d] <= half {
                break;
            }
            idx[d] = -half;
            d += 1;
        }
    }
}

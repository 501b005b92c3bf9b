use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Tolerance {
    Absolute(f64),
    /// `|a - b| / max(|a|, |b|, floor)`.
    Relative {
        tol: f64,
        floor: f64,
    },
}

/// One engine-versus-oracle comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub quantity: String,
    pub engine: f64,
    pub oracle: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    pub tolerance: Tolerance,
    pub pass: bool,
}

impl OracleReport {
    pub fn compare(
        quantity: impl Into<String>,
        engine: f64,
        oracle: f64,
        tolerance: Tolerance,
    ) -> Self {
        let abs_error = (engine - oracle).abs();
        let floor = match tolerance {
            Tolerance::Relative { floor, .. } => floor,
            Tolerance::Absolute(_) => 0.0,
        };
        let denom = engine.abs().max(oracle.abs()).max(floor);
        let rel_error = if denom == 0.0 {
            abs_error
        } else {
            abs_error / denom
        };
        let pass = match tolerance {
            Tolerance::Absolute(tol) => abs_error <= tol,
            Tolerance::Relative { tol, .. } => rel_error <= tol,
        };
        Self {
            quantity: quantity.into(),
            engine,
            oracle,
            abs_error,
            rel_error,
            tolerance,
            pass,
        }
    }

    /// The comparison with the largest error, judged by the tolerance in force.
    pub fn worst(reports: &[OracleReport]) -> Option<&OracleReport> {
        let key = |r: &OracleReport| match r.tolerance {
            Tolerance::Absolute(t) => r.abs_error / t,
            Tolerance::Relative { tol, .. } => r.rel_error / tol,
        };
        reports.iter().max_by(|a, b| key(a).total_cmp(&key(b)))
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, err, tol) = match self.tolerance {
            Tolerance::Absolute(t) => ("abs", self.abs_error, t),
            Tolerance::Relative { tol, .. } => ("rel", self.rel_error, tol),
        };
        write!(
            f,
            "{} engine={:.6e} oracle={:.6e} {kind}_err={err:.3e} tol={tol:.1e} {}",
            self.quantity,
            self.engine,
            self.oracle,
            if self.pass { "ok" } else { "FAIL" }
        )
    }
}

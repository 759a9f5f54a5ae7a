//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};

/// One evaluation of the checked function.
///
/// `decisions` lists every discrete choice the function made (hard gates,
/// argmax picks). A finite difference whose perturbed evaluations change any
/// decision straddles a discontinuity and is excluded from comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub decisions: Vec<u32>,
}

impl Probe {
    pub fn smooth(value: f64) -> Self {
        Self {
            value,
            decisions: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordError {
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordError>,
    pub checked: usize,
    /// Coordinates skipped because they were flagged by the caller or their
    /// perturbation flipped a discrete decision.
    pub excluded: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.excluded += other.excluded;
        if let Some(w) = other.worst {
            if self.worst.is_none() || w.rel_error > self.max_rel_error {
                self.max_rel_error = w.rel_error;
                self.worst = Some(w);
            }
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Central differences over every coordinate of `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Compares `analytic` against central differences of `f` at `params` on the
/// selected coordinates.
///
/// Returns the maximum of `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// over compared coordinates. `flagged` coordinates are never compared.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> Result<Probe>,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    flagged: &[usize],
    h: f64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Domain {
            what: "finite-difference step",
            value: h,
        });
    }
    if analytic.len() != params.len() {
        return Err(Error::shape("grad_check", &[params.len()], &[analytic.len()]));
    }
    let base = f(params)?;
    let again = f(params)?;
    if base.value.to_bits() != again.value.to_bits() || base.decisions != again.decisions {
        return Err(Error::contract(
            "checked function is not deterministic: repeated evaluations differ",
        ));
    }

    let mut report = GradCheckReport::default();
    let mut probe = params.to_vec();
    for &c in coords {
        if flagged.contains(&c) {
            report.excluded += 1;
            continue;
        }
        probe[c] = params[c] + h;
        let up = f(&probe)?;
        probe[c] = params[c] - h;
        let down = f(&probe)?;
        probe[c] = params[c];
        if up.decisions != base.decisions || down.decisions != base.decisions {
            report.excluded += 1;
            continue;
        }
        let numeric = (up.value - down.value) / (2.0 * h);
        let rel = relative_error(analytic[c], numeric);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(CoordError {
                coord: c,
                analytic: analytic[c],
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}

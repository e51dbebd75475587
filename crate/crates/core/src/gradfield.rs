//! Gradient-magnitude surfaces over `(‖q−p‖, ‖q−n‖)` for a single
//! negative, from closed forms, each cell cross-checked against the loss
//! evaluated on an explicit 2-D point configuration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{Kernel, LossFamily, LossSpec};
use crate::error::{Error, Result};
use crate::losses;

/// Default grid resolution per axis.
pub const DEFAULT_RESOLUTION: usize = 201;
/// Upper end of both axes: the largest distance between unit vectors.
pub const AXIS_MAX: f64 = 2.0;
/// Allowed closed-form vs vector-construction disagreement.
pub const CROSS_CHECK_TOL: f64 = 1e-9;
/// CSV text for cells where the gradient direction is undefined.
pub const UNDEFINED_CELL: &str = "undef";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    WrtP,
    WrtN,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceGrid {
    pub axis_dp: Vec<f64>,
    pub axis_dn: Vec<f64>,
    /// `values[i][j]` is the magnitude at `(axis_dp[i], axis_dn[j])`;
    /// `None` where the gradient is undefined.
    pub values: Vec<Vec<Option<f64>>>,
    pub loss: LossSpec,
    pub target: GradTarget,
}

/// `resolution` evenly spaced points on `[0, 2]`.
pub fn axis(resolution: usize) -> Vec<f64> {
    let step = AXIS_MAX / (resolution - 1) as f64;
    (0..resolution).map(|i| i as f64 * step).collect()
}

/// Closed-form gradient magnitude for one negative at distances `dp`, `dn`.
pub fn closed_form_magnitude(spec: &LossSpec, target: GradTarget, dp: f64, dn: f64) -> Option<f64> {
    let (dp_sq, dn_sq) = (dp * dp, dn * dn);
    let pick = |p: f64, n: f64| match target {
        GradTarget::WrtP => p,
        GradTarget::WrtN => n,
    };
    match spec.family {
        LossFamily::TripletRanking => {
            if spec.margin_m + dp_sq - dn_sq > 0.0 {
                Some(pick(2.0 * dp, 2.0 * dn))
            } else {
                Some(0.0)
            }
        }
        LossFamily::Contrastive => {
            // The negative pair at zero distance has no direction, which
            // leaves the whole tuple undefined.
            let d = dn_sq.sqrt();
            if d == 0.0 {
                return None;
            }
            Some(pick(dp, (spec.margin_tau - d).max(0.0)))
        }
        LossFamily::Sare { kernel, .. } => match kernel {
            Kernel::Gaussian => {
                let repel = 1.0 / (1.0 + (dn_sq - dp_sq).exp());
                Some(pick(2.0 * repel * dp, 2.0 * repel * dn))
            }
            Kernel::Cauchy => {
                let repel = (1.0 + dp_sq) / (2.0 + dp_sq + dn_sq);
                Some(pick(
                    2.0 * repel * dp / (1.0 + dp_sq),
                    2.0 * repel * dn / (1.0 + dn_sq),
                ))
            }
            Kernel::Exponential => {
                if dp == 0.0 || dn == 0.0 {
                    None
                } else {
                    Some(1.0 / (1.0 + (dn - dp).exp()))
                }
            }
        },
    }
}

/// Gradient magnitude from the loss itself with `q = (0, 0)`,
/// `p = (dp, 0)`, `n = (0, dn)`. `None` where the loss reports an
/// undefined direction.
pub fn vector_magnitude(
    spec: &LossSpec,
    target: GradTarget,
    dp: f64,
    dn: f64,
) -> Result<Option<f64>> {
    let q = [0.0, 0.0];
    let p = [dp, 0.0];
    let n = [0.0, dn];
    match losses::evaluate(spec, &q, &p, &[n]) {
        Ok(g) => {
            let v = match target {
                GradTarget::WrtP => &g.d_positive,
                GradTarget::WrtN => &g.d_negatives[0],
            };
            Ok(Some(v.iter().map(|x| x * x).sum::<f64>().sqrt()))
        }
        Err(Error::DegenerateDirection(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn checked_cell(spec: &LossSpec, target: GradTarget, dp: f64, dn: f64) -> Result<Option<f64>> {
    let closed = closed_form_magnitude(spec, target, dp, dn);
    let vector = vector_magnitude(spec, target, dp, dn)?;
    match (closed, vector) {
        (None, None) => Ok(None),
        (Some(a), Some(b)) if (a - b).abs() <= CROSS_CHECK_TOL => Ok(Some(a)),
        (a, b) => Err(Error::InvalidArgument(format!(
            "{} {target:?} at dp={dp}, dn={dn}: closed form {a:?} vs vector {b:?}",
            spec.label()
        ))),
    }
}

/// Magnitude surface on a `resolution × resolution` grid over `[0, 2]²`.
pub fn grad_surface(spec: &LossSpec, target: GradTarget, resolution: usize) -> Result<SurfaceGrid> {
    spec.validate()?;
    if resolution < 2 {
        return Err(Error::InvalidArgument(
            "resolution must be at least 2".into(),
        ));
    }
    let ax = axis(resolution);
    let values = ax
        .par_iter()
        .map(|&dp| {
            ax.iter()
                .map(|&dn| checked_cell(spec, target, dp, dn))
                .collect()
        })
        .collect::<Result<Vec<Vec<_>>>>()?;
    Ok(SurfaceGrid {
        axis_dp: ax.clone(),
        axis_dn: ax,
        values,
        loss: *spec,
        target,
    })
}

/// `‖∂L/∂n‖` along `dn_grid` with `‖q−p‖` fixed at `dp`.
pub fn grad_slice_fixed_dp(spec: &LossSpec, dp: f64, dn_grid: &[f64]) -> Result<Vec<Option<f64>>> {
    spec.validate()?;
    if !(dp > 0.0 && dp <= AXIS_MAX) {
        return Err(Error::InvalidArgument(format!(
            "dp must lie in (0, 2], got {dp}"
        )));
    }
    dn_grid
        .iter()
        .map(|&dn| checked_cell(spec, GradTarget::WrtN, dp, dn))
        .collect()
}

fn cell_text(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED_CELL.to_string(), |x| format!("{x:.17e}"))
}

impl SurfaceGrid {
    /// Header `dp\dn,<dn values>`, then one row per `dp`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dp\\dn");
        for dn in &self.axis_dn {
            out.push_str(&format!(",{dn}"));
        }
        out.push('\n');
        for (dp, row) in self.axis_dp.iter().zip(&self.values) {
            out.push_str(&dp.to_string());
            for v in row {
                out.push(',');
                out.push_str(&cell_text(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// Two-column CSV `dn,magnitude` for a fixed-`dp` slice.
pub fn slice_to_csv(dn_grid: &[f64], values: &[Option<f64>]) -> String {
    let mut out = String::from("dn,magnitude\n");
    for (dn, v) in dn_grid.iter().zip(values) {
        out.push_str(&format!("{dn},{}\n", cell_text(*v)));
    }
    out
}

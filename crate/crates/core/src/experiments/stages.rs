//! Three-stage labelling of a noise-intensity sweep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageLabel {
    Overfitting,
    WellFitting,
    Underfitting,
}

/// Seed-averaged metrics at one noise intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StagePoint {
    pub w: f64,
    pub sim_clip: f64,
    pub frechet_proxy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageWarning {
    /// `sim_clip` never moved from above the threshold to at or below it.
    NoCrossing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageClassification {
    pub labels: Vec<StageLabel>,
    /// Index of the first point at or below the threshold, when it follows at
    /// least one point above it.
    pub crossing: Option<usize>,
    pub warning: Option<StageWarning>,
}

/// Labels points sorted by increasing `w`.
///
/// The leading run of points with `sim_clip > tau` is `Overfitting`. Every
/// later point is `WellFitting` until its Fréchet proxy exceeds the lowest
/// Fréchet proxy seen since the overfitting run ended by more than `margin`
/// (relative); from there on it is `Underfitting`. Bands are therefore always
/// contiguous.
pub fn classify_stages(points: &[StagePoint], tau: f64, margin: f64) -> Result<StageClassification> {
    if points.is_empty() {
        return Err(Error::EmptySet);
    }
    if points.windows(2).any(|p| p[1].w <= p[0].w) {
        return Err(Error::InvalidConfig(
            "stage points must be sorted by strictly increasing w".into(),
        ));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::InvalidConfig(format!("stage margin {margin} must be >= 0")));
    }

    let overfit = points.iter().take_while(|p| p.sim_clip > tau).count();
    let mut labels = vec![StageLabel::Overfitting; overfit];
    let mut best = f64::INFINITY;
    let mut under = false;
    for p in &points[overfit..] {
        best = best.min(p.frechet_proxy);
        under = under || p.frechet_proxy > best * (1.0 + margin);
        labels.push(if under {
            StageLabel::Underfitting
        } else {
            StageLabel::WellFitting
        });
    }

    let crossing = (overfit > 0 && overfit < points.len()).then_some(overfit);
    let warning = crossing.is_none().then_some(StageWarning::NoCrossing);
    if warning.is_some() {
        log::warn!("sim_clip does not cross the overfitting threshold {tau} on this grid");
    }
    Ok(StageClassification {
        labels,
        crossing,
        warning,
    })
}

//! Polynomial summaries of study results.

use serde::{Deserialize, Serialize};

use crate::embeddings::{NoisePolicy, PolicyKind};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::numerics::{polyfit_least_squares, PolyFit};

/// Degree of the replication-versus-quality trade-off curve.
pub const RFID_DEGREE: usize = 2;
/// Degree of the metric-versus-sweep-parameter trend curves.
pub const TREND_DEGREE: usize = 3;
/// Evaluation points used to bracket the closest approach to the origin.
const DISTANCE_GRID: usize = 2001;

/// A fitted curve as written to `curves.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveFit {
    pub degree: usize,
    pub coefficients: Vec<f64>,
    pub rms_residual: f64,
    pub min_origin_distance: Option<f64>,
}

impl From<&PolyFit> for CurveFit {
    fn from(fit: &PolyFit) -> Self {
        Self {
            degree: fit.degree,
            coefficients: fit.coefficients.clone(),
            rms_residual: fit.rms_residual,
            min_origin_distance: None,
        }
    }
}

/// Quadratic fit of R against the Fréchet proxy.
#[derive(Debug, Clone, PartialEq)]
pub struct RfidCurve {
    pub fit: PolyFit,
    /// Smallest distance from the origin to a curve point whose abscissa
    /// lies inside the observed Fréchet range.
    pub min_origin_distance: f64,
    pub frechet_range: (f64, f64),
}

impl RfidCurve {
    pub fn to_curve_fit(&self) -> CurveFit {
        CurveFit {
            min_origin_distance: Some(self.min_origin_distance),
            ..CurveFit::from(&self.fit)
        }
    }
}

/// Fits R as a quadratic function of the Fréchet proxy over `records`.
pub fn rfid_curve(records: &[MetricsRecord]) -> Result<RfidCurve> {
    if records.len() < RFID_DEGREE + 1 {
        return Err(Error::TooFewPoints {
            needed: RFID_DEGREE + 1,
            got: records.len(),
        });
    }
    let xs: Vec<f64> = records.iter().map(|r| r.frechet_proxy).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.replication).collect();
    let fit = polyfit_least_squares(&xs, &ys, RFID_DEGREE)?;
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_origin_distance = min_distance_to_origin(&fit, lo, hi);
    Ok(RfidCurve {
        fit,
        min_origin_distance,
        frechet_range: (lo, hi),
    })
}

/// Minimum of `sqrt(x^2 + f(x)^2)` over `[lo, hi]`: a dense grid finds the
/// best bracket, then golden-section search refines inside it.
pub fn min_distance_to_origin(fit: &PolyFit, lo: f64, hi: f64) -> f64 {
    let dist = |x: f64| x.hypot(fit.eval(x));
    if hi <= lo {
        return dist(lo);
    }
    let step = (hi - lo) / (DISTANCE_GRID - 1) as f64;
    let at = |i: usize| {
        if i + 1 == DISTANCE_GRID {
            hi
        } else {
            lo + step * i as f64
        }
    };
    let best = (0..DISTANCE_GRID)
        .min_by(|&a, &b| dist(at(a)).total_cmp(&dist(at(b))))
        .expect("grid is nonempty");
    let (mut a, mut b) = (at(best.saturating_sub(1)), at((best + 1).min(DISTANCE_GRID - 1)));
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let c = b - ratio * (b - a);
        let d = a + ratio * (b - a);
        if dist(c) <= dist(d) {
            b = d;
        } else {
            a = c;
        }
    }
    dist(0.5 * (a + b)).min(dist(at(best)))
}

/// Cubic fit of a metric against the swept parameter.
pub fn trend_curve(xs: &[f64], ys: &[f64]) -> Result<PolyFit> {
    if xs.len() < TREND_DEGREE + 1 {
        return Err(Error::TooFewPoints {
            needed: TREND_DEGREE + 1,
            got: xs.len(),
        });
    }
    polyfit_least_squares(xs, ys, TREND_DEGREE)
}

/// The policy parameter varied within a family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    W,
    P,
    Q,
}

impl SweepAxis {
    pub fn value(self, policy: &NoisePolicy) -> Option<f64> {
        match self {
            SweepAxis::W => policy.w(),
            SweepAxis::P => policy.p(),
            SweepAxis::Q => policy.q(),
        }
    }
}

/// Records of one policy kind that differ only in the swept parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Family {
    pub kind: PolicyKind,
    pub axis: SweepAxis,
    /// Value of the other parameter held fixed (`p` for a `w` sweep, `w` for
    /// a `p` sweep), when the kind has one.
    pub fixed: Option<f64>,
    /// Records sorted by the swept value, then by seed.
    pub records: Vec<MetricsRecord>,
}

impl Family {
    pub fn label(&self) -> String {
        let fixed = match (self.axis, self.fixed) {
            (SweepAxis::W, Some(p)) => format!("-p{p}"),
            (SweepAxis::P, Some(w)) => format!("-w{w}"),
            _ => String::new(),
        };
        let axis = match self.axis {
            SweepAxis::W => "w",
            SweepAxis::P => "p",
            SweepAxis::Q => "q",
        };
        format!("{}{fixed}-sweep-{axis}", self.kind)
    }

    pub fn sweep_value(&self, record: &MetricsRecord) -> f64 {
        self.axis
            .value(&record.policy)
            .expect("family records carry the swept parameter")
    }

    /// Distinct swept values in increasing order.
    pub fn values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.records.iter().map(|r| self.sweep_value(r)).collect();
        v.dedup();
        v
    }

    /// Records whose swept value equals `value`.
    pub fn at(&self, value: f64) -> impl Iterator<Item = &MetricsRecord> {
        self.records.iter().filter(move |r| self.sweep_value(r) == value)
    }
}

/// Groups records into sweep families with at least two distinct swept
/// values. Noise-adding kinds form `w` sweeps at fixed `p` and, for gated
/// kinds, `p` sweeps at fixed `w`; masking forms a `q` sweep. A record may
/// belong to both a `w` and a `p` family.
pub fn families(records: &[MetricsRecord]) -> Vec<Family> {
    let mut out: Vec<Family> = Vec::new();
    let mut add = |kind, axis, fixed: Option<f64>, record: &MetricsRecord| {
        let same =
            |f: &Family| f.kind == kind && f.axis == axis && f.fixed.map(f64::to_bits) == fixed.map(f64::to_bits);
        match out.iter_mut().find(|f| same(f)) {
            Some(f) => f.records.push(record.clone()),
            None => out.push(Family {
                kind,
                axis,
                fixed,
                records: vec![record.clone()],
            }),
        }
    };
    for r in records {
        let kind = r.policy.kind();
        match kind {
            PolicyKind::Gn => add(kind, SweepAxis::W, None, r),
            PolicyKind::Fpan | PolicyKind::Cpan => {
                add(kind, SweepAxis::W, r.policy.p(), r);
                add(kind, SweepAxis::P, r.policy.w(), r);
            }
            PolicyKind::Rm => add(kind, SweepAxis::Q, None, r),
            PolicyKind::None => {}
        }
    }
    for f in &mut out {
        let axis = f.axis;
        let key = |r: &MetricsRecord| axis.value(&r.policy).expect("swept parameter present");
        f.records
            .sort_by(|a, b| key(a).total_cmp(&key(b)).then(a.seed.cmp(&b.seed)));
    }
    out.retain(|f| f.values().len() >= 2);
    out
}

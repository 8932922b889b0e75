//! Surface versus bulk TLS loss from participation-ratio scaling, and the
//! split of surface loss into oxide, hydrocarbon and substrate terms across
//! surface treatments.
//!
//! Interface quantities are referenced to the metal–substrate participation
//! (`p_MS`) so they can be reported without knowing the other participation
//! ratios. [`rescale_intrinsic`] converts them when `p_MA/p_MS` is known.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lossmodel::{ln_q_tls, LossFitResult, IDX_BETA1, IDX_BETA2, IDX_D, IDX_Q_TLS0, PARAM_NAMES};
use crate::constants::half_photon_energy_ratio;
use crate::numerics::{fit_line, weighted_linear_fit, weighted_mean, NumericsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecompositionError {
    #[error("treatment {0} is missing from the surface table")]
    MissingTreatment(Treatment),
    #[error("treatment {0} carries hydrocarbon loss and cannot enter a pair solve")]
    HydrocarbonPresent(Treatment),
    #[error("a pair needs two different treatments, got {0} twice")]
    SameTreatment(Treatment),
    #[error("invalid surface table: {0}")]
    InvalidTable(String),
    #[error("invalid device: {0}")]
    InvalidDevice(String),
    #[error("treatment {treatment} has {n} devices, at least {min} are needed")]
    TooFewDevices {
        treatment: Treatment,
        n: usize,
        min: usize,
    },
    #[error("need at least two hydrocarbon-free treatments, got {0}")]
    TooFewTreatments(usize),
    #[error(
        "bulk loss unidentifiable: its uncertainty {sigma:.3e} exceeds the smallest surface loss {smallest_surface:.3e}"
    )]
    BulkUnidentifiable { sigma: f64, smallest_surface: f64 },
    #[error("participation ratios are required for intrinsic loss tangents")]
    MissingRatios,
    #[error("beta_MA * alpha_MS = {0}, expected 1 for ratios from one geometry")]
    InconsistentRatios(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Treatment {
    #[serde(rename = "native")]
    Native,
    #[serde(rename = "BOE", alias = "boe")]
    Boe,
    #[serde(rename = "longBOE", alias = "long_boe", alias = "longboe")]
    LongBoe,
    #[serde(rename = "triacid")]
    Triacid,
}

impl Treatment {
    pub const ALL: [Treatment; 4] = [
        Treatment::Native,
        Treatment::Boe,
        Treatment::LongBoe,
        Treatment::Triacid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Treatment::Native => "native",
            Treatment::Boe => "BOE",
            Treatment::LongBoe => "longBOE",
            Treatment::Triacid => "triacid",
        }
    }

    /// Default oxide thickness and its uncertainty in nm. Zero uncertainty
    /// means none was measured.
    pub fn default_thickness_nm(self) -> (f64, f64) {
        match self {
            Treatment::Native => (3.0, 0.0),
            Treatment::Boe => (2.4, 0.0),
            Treatment::LongBoe => (1.5, 0.3),
            Treatment::Triacid => (6.0, 0.0),
        }
    }

    /// Only the untreated surface keeps its hydrocarbon layer.
    pub fn default_hydrocarbon(self) -> bool {
        self == Treatment::Native
    }
}

impl fmt::Display for Treatment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Treatment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['_', '-', ' '], "").as_str() {
            "native" => Ok(Treatment::Native),
            "boe" => Ok(Treatment::Boe),
            "longboe" => Ok(Treatment::LongBoe),
            "triacid" => Ok(Treatment::Triacid),
            _ => Err(format!("unknown treatment {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeviceType {
    #[serde(rename = "CPW", alias = "cpw")]
    Cpw,
    #[serde(rename = "LE", alias = "le")]
    Le,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceGeometry {
    pub device_id: String,
    pub p_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_ma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_sa: Option<f64>,
    pub treatment: Treatment,
    pub device_type: DeviceType,
    /// Free-form grouping tags such as etch type or packaging.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

impl DeviceGeometry {
    pub fn validate(&self) -> Result<(), DecompositionError> {
        let ok = |p: f64| p > 0.0 && p < 1.0;
        let all = [Some(self.p_ms), self.p_ma, self.p_sa];
        if all.iter().flatten().all(|p| ok(*p)) {
            Ok(())
        } else {
            Err(DecompositionError::InvalidDevice(format!(
                "{}: participation ratios must lie in (0, 1)",
                self.device_id
            )))
        }
    }

    /// `p_MA/p_MS`, when the metal–air participation is known.
    pub fn beta_ma(&self) -> Option<f64> {
        self.p_ma.map(|p| p / self.p_ms)
    }
}

/// A value with its one-sigma uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    #[serde(deserialize_with = "crate::nullable::f64")]
    pub value: f64,
    #[serde(deserialize_with = "crate::nullable::f64")]
    pub sigma: f64,
}

impl Estimate {
    pub fn new(value: f64, sigma: f64) -> Self {
        Self { value, sigma }
    }

    /// Whether the one-sigma intervals of `self` and `other` overlap.
    pub fn overlaps(&self, other: &Estimate) -> bool {
        (self.value - other.value).abs() <= self.sigma + other.sigma
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceEntry {
    pub treatment: Treatment,
    pub tan_delta: f64,
    pub tan_delta_sigma: f64,
    pub thickness_nm: f64,
    #[serde(default)]
    pub thickness_sigma_nm: f64,
    /// Whether a hydrocarbon layer contributes to this treatment's loss.
    pub hydrocarbon: bool,
}

impl SurfaceEntry {
    /// Entry with the treatment's default thickness and hydrocarbon flag.
    pub fn with_defaults(treatment: Treatment, tan_delta: f64, tan_delta_sigma: f64) -> Self {
        let (t, st) = treatment.default_thickness_nm();
        Self {
            treatment,
            tan_delta,
            tan_delta_sigma,
            thickness_nm: t,
            thickness_sigma_nm: st,
            hydrocarbon: treatment.default_hydrocarbon(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceLossTable {
    /// Reference oxide thickness of the untreated film.
    pub t0_nm: f64,
    pub entries: Vec<SurfaceEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tan_delta_bulk: Option<Estimate>,
}

impl SurfaceLossTable {
    pub const DEFAULT_T0_NM: f64 = 3.0;

    pub fn new(entries: Vec<SurfaceEntry>) -> Self {
        Self {
            t0_nm: Self::DEFAULT_T0_NM,
            entries,
            tan_delta_bulk: None,
        }
    }

    pub fn entry(&self, t: Treatment) -> Result<&SurfaceEntry, DecompositionError> {
        self.entries
            .iter()
            .find(|e| e.treatment == t)
            .ok_or(DecompositionError::MissingTreatment(t))
    }

    pub fn validate(&self) -> Result<(), DecompositionError> {
        let bad = |m: String| Err(DecompositionError::InvalidTable(m));
        if !(self.t0_nm > 0.0 && self.t0_nm.is_finite()) {
            return bad(format!("reference thickness {} must be positive", self.t0_nm));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if self.entries[..i].iter().any(|o| o.treatment == e.treatment) {
                return bad(format!("{} appears twice", e.treatment));
            }
            if !(e.thickness_nm > 0.0 && e.thickness_nm.is_finite()) {
                return bad(format!("{} thickness must be positive", e.treatment));
            }
            let sigmas = [e.tan_delta_sigma, e.thickness_sigma_nm];
            if !e.tan_delta.is_finite() || sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                return bad(format!("{} has a non-finite value or negative sigma", e.treatment));
            }
        }
        Ok(())
    }

    /// `(tan δ, t)` for every entry, flattened in entry order.
    fn inputs(&self) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::with_capacity(2 * self.entries.len());
        let mut s = Vec::with_capacity(2 * self.entries.len());
        for e in &self.entries {
            x.extend([e.tan_delta, e.thickness_nm]);
            s.extend([e.tan_delta_sigma, e.thickness_sigma_nm]);
        }
        (x, s)
    }

    fn index(&self, t: Treatment) -> Result<usize, DecompositionError> {
        self.entries
            .iter()
            .position(|e| e.treatment == t)
            .ok_or(DecompositionError::MissingTreatment(t))
    }
}

/// First-order propagation of independent input uncertainties through `f`,
/// with central differences on a step of `1e-4·σ`. Inputs with zero sigma
/// are skipped.
fn propagate(f: impl Fn(&[f64]) -> f64, x: &[f64], sigma: &[f64]) -> f64 {
    let mut xp = x.to_vec();
    let mut var = 0.0;
    for i in 0..x.len() {
        if sigma[i] == 0.0 {
            continue;
        }
        let h = 1e-4 * sigma[i];
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let down = f(&xp);
        xp[i] = x[i];
        let g = (up - down) / (2.0 * h);
        var += (g * sigma[i]).powi(2);
    }
    var.sqrt()
}

/// Oxide and combined substrate terms from two hydrocarbon-free treatments.
fn pair_values(ta: f64, tan_a: f64, tb: f64, tan_b: f64, t0: f64) -> (f64, f64) {
    let dt = ta - tb;
    if dt == 0.0 {
        return (0.0, 0.5 * (tan_a + tan_b));
    }
    let slope = (tan_a - tan_b) / dt;
    (t0 * slope, tan_a - ta * slope)
}

fn hydrocarbon_value(tan_n: f64, t_n: f64, t0: f64, ma0: f64, sa_ms: f64) -> f64 {
    tan_n - t_n / t0 * ma0 - sa_ms
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSolution {
    pub a: Treatment,
    pub b: Treatment,
    /// Oxide loss at the reference thickness, `p_MS`-referenced.
    pub ma0: Estimate,
    /// Metal–substrate plus substrate–air loss, `p_MS`-referenced.
    pub sa_ms: Estimate,
    /// Covariance between `ma0` and `sa_ms`.
    #[serde(deserialize_with = "crate::nullable::f64")]
    pub covariance: f64,
    /// Thickness difference within its own uncertainty; sigmas are infinite.
    pub degenerate: bool,
    /// Oxide term uncertainty at least as large as the term itself.
    pub low_precision: bool,
}

/// Solve the two-treatment system `(t_i/t0)·ma0 + sa_ms = tan δ_i`.
pub fn solve_pair(
    a: Treatment,
    b: Treatment,
    table: &SurfaceLossTable,
) -> Result<PairSolution, DecompositionError> {
    if a == b {
        return Err(DecompositionError::SameTreatment(a));
    }
    let ea = table.entry(a)?;
    let eb = table.entry(b)?;
    for e in [ea, eb] {
        if e.hydrocarbon {
            return Err(DecompositionError::HydrocarbonPresent(e.treatment));
        }
    }
    let t0 = table.t0_nm;
    let (ta, tb) = (ea.thickness_nm, eb.thickness_nm);
    let (ma0, sa_ms) = pair_values(ta, ea.tan_delta, tb, eb.tan_delta, t0);
    let dt = ta - tb;
    let thickness_scale = ea.thickness_sigma_nm.hypot(eb.thickness_sigma_nm);
    let degenerate = dt == 0.0 || dt.abs() < thickness_scale;

    let (s_ma, s_sams, cov) = if degenerate {
        (f64::INFINITY, f64::INFINITY, 0.0)
    } else {
        // Gradients over (tan_a, t_a, tan_b, t_b).
        let dtan = ea.tan_delta - eb.tan_delta;
        let g_ma = [t0 / dt, -t0 * dtan / dt.powi(2), -t0 / dt, t0 * dtan / dt.powi(2)];
        let g_sa = [
            -tb / dt,
            tb * dtan / dt.powi(2),
            ta / dt,
            -ta * dtan / dt.powi(2),
        ];
        let s = [
            ea.tan_delta_sigma,
            ea.thickness_sigma_nm,
            eb.tan_delta_sigma,
            eb.thickness_sigma_nm,
        ];
        let mut v_ma = 0.0;
        let mut v_sa = 0.0;
        let mut c = 0.0;
        for i in 0..4 {
            let s2 = s[i] * s[i];
            v_ma += g_ma[i] * g_ma[i] * s2;
            v_sa += g_sa[i] * g_sa[i] * s2;
            c += g_ma[i] * g_sa[i] * s2;
        }
        (v_ma.sqrt(), v_sa.sqrt(), c)
    };
    Ok(PairSolution {
        a,
        b,
        ma0: Estimate::new(ma0, s_ma),
        sa_ms: Estimate::new(sa_ms, s_sams),
        covariance: cov,
        degenerate,
        low_precision: !(s_ma < ma0.abs()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HydrocarbonSolution {
    pub value: Estimate,
    /// A negative loss tangent.
    pub unphysical: bool,
}

/// Hydrocarbon loss on the untreated surface, `p_MS`-referenced, treating
/// `ma0` and `sa_ms` as independent of each other and of `native`.
pub fn solve_hydrocarbon(
    native: &SurfaceEntry,
    ma0: Estimate,
    sa_ms: Estimate,
    t0_nm: f64,
) -> HydrocarbonSolution {
    let r = native.thickness_nm / t0_nm;
    let value = hydrocarbon_value(native.tan_delta, native.thickness_nm, t0_nm, ma0.value, sa_ms.value);
    let var = native.tan_delta_sigma.powi(2)
        + (ma0.value / t0_nm * native.thickness_sigma_nm).powi(2)
        + (r * ma0.sigma).powi(2)
        + sa_ms.sigma.powi(2);
    HydrocarbonSolution {
        value: Estimate::new(value, var.sqrt()),
        unphysical: value < 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletSolution {
    pub pair: PairSolution,
    /// Hydrocarbon term from this pair and the untreated surface, with
    /// uncertainty propagated from all six inputs.
    pub hydrocarbon: Option<HydrocarbonSolution>,
}

/// Inverse-variance combination of several solutions of one quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(deserialize_with = "crate::nullable::f64")]
    pub value: f64,
    /// Standard error treating the solutions as independent.
    #[serde(deserialize_with = "crate::nullable::f64")]
    pub sigma: f64,
    /// Standard error propagated from the table inputs at fixed weights,
    /// which accounts for solutions sharing a treatment.
    #[serde(deserialize_with = "crate::nullable::f64")]
    pub sigma_correlated: f64,
    #[serde(deserialize_with = "crate::nullable::f64")]
    pub chi_square: f64,
    pub dof: usize,
    pub unphysical: bool,
}

impl Aggregate {
    pub fn estimate(&self) -> Estimate {
        Estimate::new(self.value, self.sigma)
    }
}

/// Inverse-variance weighted mean, its standard error and the consistency
/// chi-square. Entries with infinite or zero sigma carry no weight.
pub fn inverse_variance_mean(values: &[f64], sigma: &[f64]) -> Option<(f64, f64, f64, usize)> {
    let (mean, se) = weighted_mean(values, sigma)?;
    let used: Vec<_> = values
        .iter()
        .zip(sigma)
        .filter(|(_, s)| s.is_finite() && **s > 0.0)
        .collect();
    let chi: f64 = used.iter().map(|(v, s)| ((*v - mean) / *s).powi(2)).sum();
    Some((mean, se, chi, used.len() - 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicLoss {
    pub beta_ma: f64,
    pub oxide: Estimate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hydrocarbon: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub t0_nm: f64,
    pub triplets: Vec<TripletSolution>,
    pub ma0: Aggregate,
    pub sa_ms: Aggregate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hydrocarbon: Option<Aggregate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsic: Option<IntrinsicLoss>,
}

/// Solve every pair of hydrocarbon-free treatments, attach the hydrocarbon
/// term of the untreated surface to each, and combine the solutions.
pub fn aggregate_triplets(table: &SurfaceLossTable) -> Result<DecompositionResult, DecompositionError> {
    table.validate()?;
    let clean: Vec<Treatment> = table
        .entries
        .iter()
        .filter(|e| !e.hydrocarbon)
        .map(|e| e.treatment)
        .collect();
    if clean.len() < 2 {
        return Err(DecompositionError::TooFewTreatments(clean.len()));
    }
    let hc: Vec<&SurfaceEntry> = table.entries.iter().filter(|e| e.hydrocarbon).collect();
    if hc.len() > 1 {
        return Err(DecompositionError::InvalidTable(
            "the default model allows hydrocarbon loss on one treatment only".into(),
        ));
    }
    let hc_index = match hc.first() {
        Some(e) => Some(table.index(e.treatment)?),
        None => None,
    };

    let t0 = table.t0_nm;
    let (x, sx) = table.inputs();
    let mut index_pairs = Vec::new();
    let mut triplets = Vec::new();
    for i in 0..clean.len() {
        for j in i + 1..clean.len() {
            let pair = solve_pair(clean[i], clean[j], table)?;
            let (ia, ib) = (table.index(clean[i])?, table.index(clean[j])?);
            let hydrocarbon = hc_index.map(|n| {
                let f = |v: &[f64]| {
                    let (m, s) = pair_values(v[2 * ia + 1], v[2 * ia], v[2 * ib + 1], v[2 * ib], t0);
                    hydrocarbon_value(v[2 * n], v[2 * n + 1], t0, m, s)
                };
                let value = f(&x);
                let sigma = if pair.degenerate {
                    f64::INFINITY
                } else {
                    propagate(f, &x, &sx)
                };
                HydrocarbonSolution {
                    value: Estimate::new(value, sigma),
                    unphysical: value < 0.0,
                }
            });
            index_pairs.push((ia, ib));
            triplets.push(TripletSolution { pair, hydrocarbon });
        }
    }

    // Each quantity as a function of the flattened table inputs, per pair.
    let ma0_of = |k: usize, v: &[f64]| {
        let (ia, ib) = index_pairs[k];
        pair_values(v[2 * ia + 1], v[2 * ia], v[2 * ib + 1], v[2 * ib], t0).0
    };
    let sams_of = |k: usize, v: &[f64]| {
        let (ia, ib) = index_pairs[k];
        pair_values(v[2 * ia + 1], v[2 * ia], v[2 * ib + 1], v[2 * ib], t0).1
    };
    let combine = |sigmas: Vec<f64>, g: &dyn Fn(usize, &[f64]) -> f64| -> Result<Aggregate, DecompositionError> {
        let values: Vec<f64> = (0..sigmas.len()).map(|k| g(k, &x)).collect();
        let (value, sigma, chi_square, dof) = inverse_variance_mean(&values, &sigmas).ok_or_else(|| {
            DecompositionError::InvalidTable("no pair has a finite uncertainty".into())
        })?;
        let w: Vec<f64> = sigmas
            .iter()
            .map(|s| if s.is_finite() && *s > 0.0 { 1.0 / (s * s) } else { 0.0 })
            .collect();
        let sw: f64 = w.iter().sum();
        let mean_at = |v: &[f64]| (0..w.len()).filter(|k| w[*k] > 0.0).map(|k| w[k] * g(k, v)).sum::<f64>() / sw;
        Ok(Aggregate {
            value,
            sigma,
            sigma_correlated: propagate(mean_at, &x, &sx),
            chi_square,
            dof,
            unphysical: value < 0.0,
        })
    };

    let ma0 = combine(triplets.iter().map(|t| t.pair.ma0.sigma).collect(), &ma0_of)?;
    let sa_ms = combine(triplets.iter().map(|t| t.pair.sa_ms.sigma).collect(), &sams_of)?;
    let hydrocarbon = match hc_index {
        Some(n) => {
            let hc_of = |k: usize, v: &[f64]| {
                hydrocarbon_value(v[2 * n], v[2 * n + 1], t0, ma0_of(k, v), sams_of(k, v))
            };
            let sigmas = triplets
                .iter()
                .map(|t| t.hydrocarbon.map_or(f64::INFINITY, |h| h.value.sigma))
                .collect();
            Some(combine(sigmas, &hc_of)?)
        }
        None => None,
    };
    Ok(DecompositionResult {
        t0_nm: t0,
        triplets,
        ma0,
        sa_ms,
        hydrocarbon,
        intrinsic: None,
    })
}

/// Where hydrocarbon loss is assumed to sit in [`solve_placement`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HydrocarbonPlacement {
    /// Only on the metal–air interface of the untreated surface.
    NativeMetalAir,
    /// On both air interfaces of the untreated surface and on the
    /// substrate–air interface of the two BOE treatments.
    MetalAirAndSubstrateAir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementTerm {
    pub name: String,
    pub value: Estimate,
    pub unphysical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementSolution {
    pub placement: HydrocarbonPlacement,
    pub terms: Vec<PlacementTerm>,
    #[serde(deserialize_with = "crate::nullable::f64")]
    pub chi_square: f64,
    pub dof: usize,
    /// Some term came out as a negative loss tangent.
    pub unphysical: bool,
}

impl PlacementSolution {
    pub fn term(&self, name: &str) -> Option<&PlacementTerm> {
        self.terms.iter().find(|t| t.name == name)
    }
}

/// Weighted least-squares solve of all treatments at once under a given
/// hydrocarbon placement. Thickness uncertainties are not propagated.
pub fn solve_placement(
    table: &SurfaceLossTable,
    placement: HydrocarbonPlacement,
) -> Result<PlacementSolution, DecompositionError> {
    table.validate()?;
    let columns: Vec<(&str, Box<dyn Fn(&SurfaceEntry) -> f64>)> = {
        let t0 = table.t0_nm;
        let mut c: Vec<(&str, Box<dyn Fn(&SurfaceEntry) -> f64>)> = vec![
            ("ma0", Box::new(move |e: &SurfaceEntry| e.thickness_nm / t0)),
            ("sa_ms", Box::new(|_: &SurfaceEntry| 1.0)),
            (
                "hc_ma",
                Box::new(|e: &SurfaceEntry| f64::from(e.treatment == Treatment::Native)),
            ),
        ];
        if placement == HydrocarbonPlacement::MetalAirAndSubstrateAir {
            c.push((
                "hc_sa",
                Box::new(|e: &SurfaceEntry| f64::from(e.treatment != Treatment::Triacid)),
            ));
        }
        c
    };
    let m = table.entries.len();
    let n = columns.len();
    if m < n {
        return Err(DecompositionError::InvalidTable(format!(
            "{m} treatments cannot determine {n} terms"
        )));
    }
    let design = DMatrix::from_fn(m, n, |i, j| (columns[j].1)(&table.entries[i]));
    let y: Vec<f64> = table.entries.iter().map(|e| e.tan_delta).collect();
    let sigma: Vec<f64> = table.entries.iter().map(|e| e.tan_delta_sigma).collect();
    let fit = weighted_linear_fit(&design, &y, &sigma)?;
    let terms: Vec<PlacementTerm> = columns
        .iter()
        .enumerate()
        .map(|(j, (name, _))| PlacementTerm {
            name: name.to_string(),
            value: Estimate::new(fit.coefficients[j], fit.sigma(j)),
            unphysical: fit.coefficients[j] < 0.0,
        })
        .collect();
    Ok(PlacementSolution {
        placement,
        unphysical: terms.iter().any(|t| t.unphysical),
        terms,
        chi_square: fit.chi_square,
        dof: fit.dof,
    })
}

/// Convert a `p_MS`-referenced metal–air quantity to its intrinsic value.
pub fn to_intrinsic(ms_referenced: f64, beta_ma: f64) -> f64 {
    ms_referenced / beta_ma
}

pub fn to_ms_referenced(intrinsic: f64, beta_ma: f64) -> f64 {
    intrinsic * beta_ma
}

/// Intrinsic oxide and hydrocarbon loss tangents given `β_MA = p_MA/p_MS`
/// or `α_MS = p_MS/p_MA`. When both are given they must agree.
pub fn rescale_intrinsic(
    result: &DecompositionResult,
    alpha_ms: Option<f64>,
    beta_ma: Option<f64>,
) -> Result<IntrinsicLoss, DecompositionError> {
    let beta = match (alpha_ms, beta_ma) {
        (None, None) => return Err(DecompositionError::MissingRatios),
        (Some(a), Some(b)) => {
            let product = a * b;
            if (product - 1.0).abs() > 1e-9 {
                return Err(DecompositionError::InconsistentRatios(product));
            }
            b
        }
        (Some(a), None) => 1.0 / a,
        (None, Some(b)) => b,
    };
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(DecompositionError::InvalidTable(format!(
            "participation ratio {beta} must be positive"
        )));
    }
    let scale = |e: Estimate| Estimate::new(to_intrinsic(e.value, beta), e.sigma / beta);
    Ok(IntrinsicLoss {
        beta_ma: beta,
        oxide: scale(result.ma0.estimate()),
        hydrocarbon: result.hydrocarbon.map(|h| scale(h.estimate())),
    })
}

/// One device for the participation-ratio regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SprPoint {
    pub device_id: String,
    pub p_ms: f64,
    pub q: f64,
    pub q_sigma: f64,
    pub treatment: Treatment,
}

impl SprPoint {
    /// Point at `Q_TLS(n̄, T)` evaluated from a sweep fit.
    pub fn from_fit_at_photon(
        geometry: &DeviceGeometry,
        fit: &LossFitResult,
        photons: f64,
        temperature: f64,
    ) -> Self {
        let q = q_tls_at_photon(fit, photons, temperature);
        Self {
            device_id: geometry.device_id.clone(),
            p_ms: geometry.p_ms,
            q: q.value,
            q_sigma: q.sigma,
            treatment: geometry.treatment,
        }
    }

    /// Point at the low-power TLS quality factor `Q_TLS0` of a sweep fit.
    pub fn from_fit(geometry: &DeviceGeometry, fit: &LossFitResult) -> Self {
        Self {
            device_id: geometry.device_id.clone(),
            p_ms: geometry.p_ms,
            q: fit.params.q_tls0,
            q_sigma: fit.sigma[IDX_Q_TLS0],
            treatment: geometry.treatment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SprFitOptions {
    /// Bulk participation: `tan δ_bulk = L_bulk / p_bulk`.
    pub p_bulk: f64,
    pub min_devices_per_treatment: usize,
    /// The bulk term is unidentifiable when its sigma exceeds this multiple
    /// of the smallest fitted surface loss among the devices.
    pub bulk_resolution: f64,
}

impl Default for SprFitOptions {
    fn default() -> Self {
        Self {
            p_bulk: 1.0,
            min_devices_per_treatment: 3,
            bulk_resolution: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentTangent {
    pub treatment: Treatment,
    pub tan_delta: Estimate,
    pub n_devices: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SprFit {
    pub treatments: Vec<TreatmentTangent>,
    /// The participation-independent loss `L_bulk`.
    pub bulk_loss: Estimate,
    pub tan_delta_bulk: Estimate,
    pub p_bulk: f64,
    /// `L_bulk` within two sigma of zero.
    pub bulk_consistent_with_zero: bool,
    /// Covariance over the treatment tangents (in `treatments` order) and
    /// then `L_bulk`.
    #[serde(deserialize_with = "crate::nullable::matrix")]
    pub covariance: Vec<Vec<f64>>,
    #[serde(deserialize_with = "crate::nullable::f64")]
    pub chi_square: f64,
    pub dof: usize,
}

impl SprFit {
    pub fn tangent(&self, t: Treatment) -> Option<Estimate> {
        self.treatments
            .iter()
            .find(|x| x.treatment == t)
            .map(|x| x.tan_delta)
    }

    /// Ratio of two treatment tangents with first-order uncertainty,
    /// including their covariance through the shared bulk term.
    pub fn ratio(&self, num: Treatment, den: Treatment) -> Option<Estimate> {
        let i = self.treatments.iter().position(|x| x.treatment == num)?;
        let j = self.treatments.iter().position(|x| x.treatment == den)?;
        let a = self.treatments[i].tan_delta.value;
        let b = self.treatments[j].tan_delta.value;
        let r = a / b;
        let c = &self.covariance;
        let var = r * r * (c[i][i] / (a * a) + c[j][j] / (b * b) - 2.0 * c[i][j] / (a * b));
        Some(Estimate::new(r, var.max(0.0).sqrt()))
    }

    /// Model `Q_TLS` at participation `p_ms` for a fitted treatment.
    pub fn predicted_q(&self, p_ms: f64, t: Treatment) -> Option<f64> {
        Some(1.0 / (p_ms * self.tangent(t)?.value + self.bulk_loss.value))
    }
}

/// Weighted linear regression `1/Q = p_MS·tan δ_treatment + L_bulk` with
/// one surface tangent per treatment and a shared bulk loss.
pub fn fit_spr_scaling(points: &[SprPoint], options: &SprFitOptions) -> Result<SprFit, DecompositionError> {
    let mut treatments: Vec<Treatment> = Vec::new();
    for p in points {
        if !(p.p_ms > 0.0 && p.p_ms < 1.0) {
            return Err(DecompositionError::InvalidDevice(format!(
                "{}: p_MS {} outside (0, 1)",
                p.device_id, p.p_ms
            )));
        }
        if !(p.q > 0.0 && p.q.is_finite() && p.q_sigma > 0.0 && p.q_sigma.is_finite()) {
            return Err(DecompositionError::InvalidDevice(format!(
                "{}: quality factor and sigma must be positive and finite",
                p.device_id
            )));
        }
        if !treatments.contains(&p.treatment) {
            treatments.push(p.treatment);
        }
    }
    treatments.sort();
    if treatments.is_empty() {
        return Err(DecompositionError::InvalidDevice("no devices".into()));
    }
    for &t in &treatments {
        let n = points.iter().filter(|p| p.treatment == t).count();
        if n < options.min_devices_per_treatment {
            return Err(DecompositionError::TooFewDevices {
                treatment: t,
                n,
                min: options.min_devices_per_treatment,
            });
        }
    }
    if !(options.p_bulk > 0.0) {
        return Err(DecompositionError::InvalidDevice("p_bulk must be positive".into()));
    }

    let k = treatments.len();
    let design = DMatrix::from_fn(points.len(), k + 1, |i, j| {
        if j == k {
            1.0
        } else if points[i].treatment == treatments[j] {
            points[i].p_ms
        } else {
            0.0
        }
    });
    let y: Vec<f64> = points.iter().map(|p| 1.0 / p.q).collect();
    let sigma: Vec<f64> = points.iter().map(|p| p.q_sigma / (p.q * p.q)).collect();
    let fit = weighted_linear_fit(&design, &y, &sigma)?;

    let bulk = Estimate::new(fit.coefficients[k], fit.sigma(k));
    let smallest_surface = points
        .iter()
        .map(|p| {
            let j = treatments.iter().position(|t| *t == p.treatment).unwrap();
            p.p_ms * fit.coefficients[j].abs()
        })
        .fold(f64::INFINITY, f64::min);
    if bulk.sigma > options.bulk_resolution * smallest_surface {
        return Err(DecompositionError::BulkUnidentifiable {
            sigma: bulk.sigma,
            smallest_surface,
        });
    }
    let tangents = treatments
        .iter()
        .enumerate()
        .map(|(j, &t)| TreatmentTangent {
            treatment: t,
            tan_delta: Estimate::new(fit.coefficients[j], fit.sigma(j)),
            n_devices: points.iter().filter(|p| p.treatment == t).count(),
        })
        .collect();
    let covariance = (0..=k)
        .map(|i| (0..=k).map(|j| fit.covariance[(i, j)]).collect())
        .collect();
    Ok(SprFit {
        treatments: tangents,
        bulk_loss: bulk,
        tan_delta_bulk: Estimate::new(bulk.value / options.p_bulk, bulk.sigma / options.p_bulk),
        p_bulk: options.p_bulk,
        bulk_consistent_with_zero: bulk.value.abs() < 2.0 * bulk.sigma,
        covariance,
        chi_square: fit.chi_square,
        dof: fit.dof,
    })
}

/// `Q_TLS(n̄, T)` from a sweep fit, with uncertainty propagated from the
/// covariance of `(ln Q_TLS0, ln D, β1, β2)`. Parameters the fit flags as
/// unidentified are left out, since their linearized covariance carries no
/// information (a device that never saturates has no usable `D`).
pub fn q_tls_at_photon(fit: &LossFitResult, photons: f64, temperature: f64) -> Estimate {
    let p = &fit.params;
    let ln_q = ln_q_tls(p, photons, temperature, fit.omega_rad_s);
    let th = half_photon_energy_ratio(fit.omega_rad_s, temperature).tanh();
    let s = if photons > 0.0 {
        (p.beta2 * photons.ln() - p.d.ln() - p.beta1 * temperature.ln()).exp() * th
    } else {
        0.0
    };
    let f = 0.5 * s / (1.0 + s);
    let mut g = [0.0; 4];
    g[0] = 1.0;
    g[1] = -f;
    g[2] = -f * temperature.ln();
    g[3] = if photons > 0.0 { f * photons.ln() } else { 0.0 };
    let idx = [IDX_Q_TLS0, IDX_D, IDX_BETA1, IDX_BETA2];
    let keep: Vec<usize> = (0..4)
        .filter(|&a| !fit.unidentified.iter().any(|u| u == PARAM_NAMES[idx[a]]))
        .collect();
    let c = &fit.covariance;
    let mut var = 0.0;
    for &a in &keep {
        for &b in &keep {
            var += g[a] * g[b] * c[idx[a]][idx[b]];
        }
    }
    let q = ln_q.exp();
    Estimate::new(q, q * var.max(0.0).sqrt())
}

/// Line through `(intensity fraction, thickness)` calibration points,
/// evaluated at `query`. Without `sigma_nm` the prediction uncertainty
/// comes from the fit residuals and is `NaN` for exactly two points.
pub fn extrapolate_oxide_thickness(
    points: &[(f64, f64)],
    sigma_nm: Option<&[f64]>,
    query: f64,
) -> Result<Estimate, DecompositionError> {
    let x: Vec<f64> = points.iter().map(|p| p.0).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let line = fit_line(&x, &y, sigma_nm)?;
    let (v, s) = line.predict(query);
    Ok(Estimate::new(v, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean_table(ta: f64, tan_a: f64, tb: f64, tan_b: f64) -> SurfaceLossTable {
        let e = |t, th, tan| SurfaceEntry {
            treatment: t,
            tan_delta: tan,
            tan_delta_sigma: 1e-5,
            thickness_nm: th,
            thickness_sigma_nm: 0.0,
            hydrocarbon: false,
        };
        SurfaceLossTable::new(vec![e(Treatment::Triacid, ta, tan_a), e(Treatment::Boe, tb, tan_b)])
    }

    #[test]
    fn pair_reconstructs_both_treatments() {
        let table = clean_table(6.0, 14e-4, 2.4, 7.2e-4);
        let s = solve_pair(Treatment::Triacid, Treatment::Boe, &table).unwrap();
        for e in &table.entries {
            let back = e.thickness_nm / 3.0 * s.ma0.value + s.sa_ms.value;
            assert!((back - e.tan_delta).abs() < 1e-18);
        }
    }

    #[test]
    fn equal_thickness_is_degenerate() {
        let table = clean_table(2.0, 5e-4, 2.0, 5e-4);
        let s = solve_pair(Treatment::Triacid, Treatment::Boe, &table).unwrap();
        assert!(s.degenerate);
        assert!(s.ma0.sigma.is_infinite());
    }

    #[test]
    fn same_treatment_rejected() {
        let table = clean_table(6.0, 14e-4, 2.4, 7.2e-4);
        assert!(solve_pair(Treatment::Boe, Treatment::Boe, &table).is_err());
    }

    #[test]
    fn treatment_names_parse() {
        for t in Treatment::ALL {
            assert_eq!(t.name().parse::<Treatment>().unwrap(), t);
        }
        assert_eq!("long_boe".parse::<Treatment>().unwrap(), Treatment::LongBoe);
        assert!("acid".parse::<Treatment>().is_err());
    }

    #[test]
    fn propagate_linear_function() {
        let s = propagate(|v| 2.0 * v[0] - 3.0 * v[1], &[1.0, 1.0], &[0.1, 0.2]);
        assert!((s - (0.04f64 + 0.36).sqrt()).abs() < 1e-10);
    }
}

//! Conditional predictive ordinates, disk quadrature and per-location
//! disclosure risk for radial, ANS and PRS releases.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::PointPattern;
use crate::error::{Error, Result};
use crate::geom::{Point, Rect};
use crate::mcmc::{ChainKind, JointChain, PosteriorChain};
use crate::model::{self, ModelContext, PointDesign};
use crate::synthesis::Mechanism;

pub const DEFAULT_M_QUAD: usize = 10_000;
pub const DEFAULT_M_NORM: usize = 2;
pub const DEFAULT_RADIUS: f64 = 50.0;

/// Midpoints and weights of the transformed-square rule for a disk: the disk
/// is mapped onto `[-1, 1]²` by `ỹ = (y − y_c)/r`, `x̃ = (x − x_c)/g(y)` with
/// `g(y) = √(r² − (y − y_c)²)`, which is then split into `m` equal squares.
pub fn ball_nodes(center: Point, r: f64, m: usize) -> Result<Vec<(Point, f64)>> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Parameter(format!("disk radius must be positive, got {r}")));
    }
    let side = (m as f64).sqrt().round() as usize;
    if m < 4 || side * side != m {
        return Err(Error::Config(format!("quadrature size {m} is not a perfect square >= 4")));
    }
    let h = 2.0 / side as f64;
    let area = h * h;
    let mut out = Vec::with_capacity(m);
    for iy in 0..side {
        let yt = -1.0 + (iy as f64 + 0.5) * h;
        let g = r * (1.0 - yt * yt).sqrt();
        let y = center.y + r * yt;
        for ix in 0..side {
            let xt = -1.0 + (ix as f64 + 0.5) * h;
            out.push((Point::new(center.x + g * xt, y), r * g * area));
        }
    }
    Ok(out)
}

/// `∫_{B_r(center)} f`.
pub fn ball_quadrature<F: Fn(&Point) -> f64>(f: F, center: Point, r: f64, m: usize) -> Result<f64> {
    Ok(ball_nodes(center, r, m)?.iter().map(|(p, w)| w * f(p)).sum())
}

/// Cell-centred grid of side `cell` (shrunk to tile exactly) over `domain`.
fn domain_nodes(domain: Rect, cell: f64) -> Vec<(Point, f64)> {
    let nx = (domain.width() / cell).ceil().max(1.0) as usize;
    let ny = (domain.height() / cell).ceil().max(1.0) as usize;
    let (dx, dy) = (domain.width() / nx as f64, domain.height() / ny as f64);
    let mut out = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            out.push((
                Point::new(domain.xmin + (ix as f64 + 0.5) * dx, domain.ymin + (iy as f64 + 0.5) * dy),
                dx * dy,
            ));
        }
    }
    out
}

fn log_sum_exp(v: &[f64]) -> f64 {
    model::log_sum_exp(v.iter().copied())
}

/// Posterior draws of one surface, reduced to what the estimators need.
pub struct SurfaceDraws<'a> {
    ctx: &'a ModelContext,
    beta: Vec<&'a [f64]>,
    w: Vec<&'a [f32]>,
    /// `log ∫λ⁽ˡ⁾` over the meshed region.
    pub(crate) log_int: Vec<f64>,
}

impl<'a> SurfaceDraws<'a> {
    /// The first latent field of every sample (the confidential surface).
    pub fn confidential(ctx: &'a ModelContext, chain: &'a PosteriorChain) -> Result<Self> {
        chain.check_mesh(ctx)?;
        if chain.is_empty() {
            return Err(Error::Config("empty chain".into()));
        }
        let beta: Vec<&[f64]> = chain.samples.iter().map(|s| s.beta.as_slice()).collect();
        let w: Vec<&[f32]> = chain.samples.iter().map(|s| s.w()).collect();
        let log_int = beta.iter().zip(&w).map(|(b, w)| ctx.nodes.log_integral_f32(b, w)).collect::<Vec<_>>();
        if log_int.iter().any(|v: &f64| !v.is_finite()) {
            return Err(Error::Numeric("non-finite intensity integral in chain".into()));
        }
        Ok(Self { ctx, beta, w, log_int })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub(crate) fn design(&self, points: &[Point]) -> Result<PointDesign> {
        self.ctx.point_design(points)
    }

    /// `log λ⁽ˡ⁾` at every design point, sample-major.
    pub(crate) fn log_lambda(&self, d: &PointDesign) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * d.len());
        for (b, w) in self.beta.iter().zip(&self.w) {
            for k in 0..d.len() {
                out.push(d.log_intensity_f32(k, b, w));
            }
        }
        out
    }

    /// `log [ (1/L) Σ_l e^{a_l} / λ⁽ˡ⁾(s) ]⁻¹` for each design point, given
    /// per-sample log numerators `a_l`.
    fn log_cpo_with(&self, log_num: &[f64], d: &PointDesign) -> Vec<f64> {
        let ll = self.log_lambda(d);
        let n = d.len();
        let ln_l = (self.len() as f64).ln();
        let mut terms = vec![0.0; self.len()];
        (0..n)
            .map(|k| {
                for (l, t) in terms.iter_mut().enumerate() {
                    *t = log_num[l] - ll[l * n + k];
                }
                ln_l - log_sum_exp(&terms)
            })
            .collect()
    }

    /// Log CPO estimate `log π(s, N | ·)` at arbitrary locations.
    pub fn log_cpo(&self, points: &[Point]) -> Result<Vec<f64>> {
        let d = self.design(points)?;
        Ok(self.log_cpo_with(&self.log_int, &d))
    }
}

fn finite_exp(v: Vec<f64>) -> Result<Vec<f64>> {
    v.into_iter()
        .map(|x| {
            let e = x.exp();
            if e.is_finite() {
                Ok(e)
            } else {
                Err(Error::Numeric(format!("non-finite CPO (log value {x})")))
            }
        })
        .collect()
}

/// `CPO_k = [ (1/M) Σ_m ∫λ⁽ᵐ⁾ / λ⁽ᵐ⁾(s_k) ]⁻¹` for every point of the pattern.
pub fn cpo_all(ctx: &ModelContext, chain: &PosteriorChain, pattern: &PointPattern) -> Result<Vec<f64>> {
    finite_exp(SurfaceDraws::confidential(ctx, chain)?.log_cpo(&pattern.points)?)
}

/// Leave-one-out density at `query` from the confidential draws of a joint chain.
pub fn loo_density_joint(ctx: &ModelContext, joint: &JointChain, query: Point) -> Result<f64> {
    if !ctx.mesh.domain.contains(&query) {
        return Err(Error::OutOfDomain { x: query.x, y: query.y });
    }
    finite_exp(SurfaceDraws::confidential(ctx, joint.chain())?.log_cpo(&[query])?).map(|v| v[0])
}

/// Per-sample `log ∫_{B_r(c) ∩ Ω} λ⁽ˡ⁾` by disk quadrature.
fn log_disk_integrals(draws: &SurfaceDraws, nodes: &[(Point, f64)], d: &PointDesign) -> Vec<f64> {
    let ll = draws.log_lambda(d);
    let n = d.len();
    let lw: Vec<f64> = nodes.iter().map(|(_, w)| w.ln()).collect();
    let mut terms = vec![0.0; n];
    (0..draws.len())
        .map(|l| {
            for k in 0..n {
                terms[k] = lw[k] + ll[l * n + k];
            }
            log_sum_exp(&terms)
        })
        .collect()
}

fn nodes_in(domain: Rect, nodes: Vec<(Point, f64)>) -> Vec<(Point, f64)> {
    nodes.into_iter().filter(|(p, _)| domain.contains(p)).collect()
}

/// `[ E_{π(λ|S)} ∫_{B_r(s†)} λ / λ(query) ]⁻¹` for the radial mechanism;
/// zero outside the disk around `s_dagger`.
pub fn loo_density_radial(
    ctx: &ModelContext,
    chain: &PosteriorChain,
    s_dagger: Point,
    r: f64,
    query: Point,
    m_quad: usize,
) -> Result<f64> {
    let domain = ctx.mesh.domain;
    if !domain.contains(&query) {
        return Err(Error::OutOfDomain { x: query.x, y: query.y });
    }
    let draws = SurfaceDraws::confidential(ctx, chain)?;
    let nodes = nodes_in(domain, ball_nodes(s_dagger, r, m_quad)?);
    if query.dist(&s_dagger) >= r || nodes.is_empty() {
        return Ok(0.0);
    }
    let pts: Vec<Point> = nodes.iter().map(|(p, _)| *p).collect();
    let log_disk = log_disk_integrals(&draws, &nodes, &draws.design(&pts)?);
    let d = draws.design(&[query])?;
    finite_exp(draws.log_cpo_with(&log_disk, &d)).map(|v| v[0])
}

/// Where the unnormalised leave-one-out density lives.
#[derive(Debug, Clone, Copy)]
pub enum Support {
    /// The whole study domain, integrated on a midpoint grid of this cell size.
    Domain { cell: f64 },
    /// A disk (clipped to the domain), integrated by disk quadrature.
    Disk { center: Point, r: f64 },
}

/// `∫_{B_r(s_k) ∩ Ω} d̃ ÷ ∫_{support ∩ Ω} d̃` for a log density `log d̃`
/// that is `-∞` off its support.
pub fn disclosure_risk<F: Fn(&[Point]) -> Result<Vec<f64>>>(
    log_density: F,
    s_k: Point,
    r: f64,
    domain: Rect,
    support: Support,
    m_quad: usize,
) -> Result<f64> {
    let log_norm = log_mass(&log_density, domain, support, m_quad)?;
    risk_with_norm(&log_density, s_k, r, domain, support, m_quad, log_norm)
}

/// True when `B_r(s_k)` contains the whole support, so the risk is exactly 1.
fn covers_support(s_k: Point, r: f64, domain: Rect, support: Support) -> bool {
    let corners = [
        Point::new(domain.xmin, domain.ymin),
        Point::new(domain.xmax, domain.ymin),
        Point::new(domain.xmin, domain.ymax),
        Point::new(domain.xmax, domain.ymax),
    ];
    let covers_domain = corners.iter().all(|c| s_k.dist(c) <= r);
    match support {
        Support::Domain { .. } => covers_domain,
        Support::Disk { center, r: rs } => covers_domain || s_k.dist(&center) + rs <= r,
    }
}

fn log_mass<F: Fn(&[Point]) -> Result<Vec<f64>>>(
    log_density: &F,
    domain: Rect,
    support: Support,
    m_quad: usize,
) -> Result<f64> {
    let nodes = match support {
        Support::Domain { cell } => domain_nodes(domain, cell),
        Support::Disk { center, r } => nodes_in(domain, ball_nodes(center, r, m_quad)?),
    };
    let pts: Vec<Point> = nodes.iter().map(|(p, _)| *p).collect();
    let ld = log_density(&pts)?;
    let terms: Vec<f64> = ld.iter().zip(&nodes).map(|(l, (_, w))| l + w.ln()).collect();
    let z = log_sum_exp(&terms);
    if !z.is_finite() {
        return Err(Error::Numeric("leave-one-out density has zero or non-finite mass".into()));
    }
    Ok(z)
}

fn risk_with_norm<F: Fn(&[Point]) -> Result<Vec<f64>>>(
    log_density: &F,
    s_k: Point,
    r: f64,
    domain: Rect,
    support: Support,
    m_quad: usize,
    log_norm: f64,
) -> Result<f64> {
    if covers_support(s_k, r, domain, support) {
        return Ok(1.0);
    }
    let nodes = nodes_in(domain, ball_nodes(s_k, r, m_quad)?);
    if nodes.is_empty() {
        return Ok(0.0);
    }
    let pts: Vec<Point> = nodes.iter().map(|(p, _)| *p).collect();
    let ld = log_density(&pts)?;
    let terms: Vec<f64> = ld.iter().zip(&nodes).map(|(l, (_, w))| l + w.ln()).collect();
    Ok((log_sum_exp(&terms) - log_norm).exp().clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskConfig {
    /// Intruder radius r (meters).
    pub radius: f64,
    pub m_quad: usize,
    /// Refinement of the mesh spacing for normalising over the domain.
    pub m_norm: usize,
    /// Use at most this many evenly spaced chain samples.
    pub max_samples: Option<usize>,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self { radius: DEFAULT_RADIUS, m_quad: DEFAULT_M_QUAD, m_norm: DEFAULT_M_NORM, max_samples: None }
    }
}

impl RiskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!("risk radius must be positive, got {}", self.radius)));
        }
        if self.m_norm == 0 {
            return Err(Error::Config("m_norm must be positive".into()));
        }
        ball_nodes(Point::new(0.0, 0.0), 1.0, self.m_quad).map(|_| ())
    }
}

/// What the intruder sees, paired with the chain its risk needs.
pub enum RiskInput<'a> {
    /// Confidential-only fit plus the released points, index-linked to the
    /// confidential ones, and the perturbation radius.
    Radial { chain: &'a PosteriorChain, synthetic: &'a PointPattern, r_synth: f64 },
    Joint { chain: &'a JointChain, mechanism: Mechanism },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub mechanism: String,
    pub parameter: Option<f64>,
    pub radius: f64,
    pub m_quad: usize,
    pub m_norm: usize,
    pub samples_used: usize,
    pub chain_hash: String,
    pub locations: Vec<Point>,
    pub per_location_risk: Vec<f64>,
    pub max_risk: f64,
}

impl RiskReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn to_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "x", "y", "risk"])?;
        for (k, (p, r)) in self.locations.iter().zip(&self.per_location_risk).enumerate() {
            w.write_record([k.to_string(), p.x.to_string(), p.y.to_string(), r.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_pairing(chain: &PosteriorChain, mechanism: &Mechanism) -> Result<()> {
    let ok = match (mechanism, chain.meta.kind) {
        (Mechanism::Radial { .. }, ChainKind::Single) => true,
        (Mechanism::Ans { sigma2 }, ChainKind::Ans { sigma2: s }) => sigma2.to_bits() == s.to_bits(),
        (Mechanism::Prs, ChainKind::Prs) => true,
        _ => false,
    };
    if ok && chain.meta.held_out.is_some() {
        return Err(Error::Config("risk needs a full-data chain, not a held-out fit".into()));
    }
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "a {:?} chain cannot score a {} release",
            chain.meta.kind,
            mechanism.name()
        )))
    }
}

/// Per-location disclosure risk of every confidential point and the maximum.
pub fn max_disclosure_risk(
    ctx: &ModelContext,
    confidential: &PointPattern,
    input: RiskInput<'_>,
    cfg: &RiskConfig,
) -> Result<RiskReport> {
    cfg.validate()?;
    let domain = ctx.mesh.domain;
    let (chain, mechanism) = match &input {
        RiskInput::Radial { chain, synthetic, r_synth } => {
            if synthetic.len() != confidential.len() {
                return Err(Error::Config("radial release must pair one synthetic point per confidential point".into()));
            }
            (*chain, Mechanism::Radial { r: *r_synth })
        }
        RiskInput::Joint { chain, mechanism } => (chain.chain(), *mechanism),
    };
    check_pairing(chain, &mechanism)?;
    let sub;
    let chain = match cfg.max_samples {
        Some(m) if m < chain.len() => {
            sub = chain.subsample(m);
            &sub
        }
        _ => chain,
    };
    let draws = SurfaceDraws::confidential(ctx, chain)?;
    let n = confidential.len();

    let risks: Vec<f64> = match &input {
        RiskInput::Radial { synthetic, r_synth, .. } => (0..n)
            .into_par_iter()
            .map(|k| {
                let sd = synthetic.points[k];
                let nodes = nodes_in(domain, ball_nodes(sd, *r_synth, cfg.m_quad)?);
                let pts: Vec<Point> = nodes.iter().map(|(p, _)| *p).collect();
                if pts.is_empty() {
                    return Err(Error::Numeric(format!("synthetic point {k} has no disk mass in the domain")));
                }
                let log_disk = log_disk_integrals(&draws, &nodes, &draws.design(&pts)?);
                let log_density = |q: &[Point]| -> Result<Vec<f64>> {
                    let d = draws.design(q)?;
                    let v = draws.log_cpo_with(&log_disk, &d);
                    Ok(v.into_iter().zip(q).map(|(l, p)| if p.dist(&sd) < *r_synth { l } else { f64::NEG_INFINITY }).collect())
                };
                let support = Support::Disk { center: sd, r: *r_synth };
                let z = log_mass(&log_density, domain, support, cfg.m_quad)?;
                risk_with_norm(&log_density, confidential.points[k], cfg.radius, domain, support, cfg.m_quad, z)
            })
            .collect::<Result<_>>()?,
        RiskInput::Joint { .. } => {
            let log_density = |q: &[Point]| draws.log_cpo(q);
            let cell = ctx.mesh.spacing / cfg.m_norm as f64;
            let support = Support::Domain { cell };
            let z = log_mass(&log_density, domain, support, cfg.m_quad)?;
            (0..n)
                .into_par_iter()
                .map(|k| risk_with_norm(&log_density, confidential.points[k], cfg.radius, domain, support, cfg.m_quad, z))
                .collect::<Result<_>>()?
        }
    };
    let max_risk = risks.iter().copied().fold(0.0, f64::max);
    Ok(RiskReport {
        mechanism: mechanism.name().into(),
        parameter: mechanism.parameter(),
        radius: cfg.radius,
        m_quad: cfg.m_quad,
        m_norm: cfg.m_norm,
        samples_used: draws.len(),
        chain_hash: chain.hash(),
        locations: confidential.points.clone(),
        per_location_risk: risks,
        max_risk,
    })
}

/// Worst-case `|log λ(s*) − log λ(s)|` over the domain given bounds on the
/// covariate coefficients (intercept excluded, it cancels), the basis
/// weights, and the spreads of the covariates and of `log pd`. Any infinite
/// bound gives `f64::INFINITY`.
pub fn dp_cost_bound(beta_bounds: &[f64], w_bound: f64, covariate_ranges: &[f64], log_pd_range: f64) -> Result<f64> {
    if beta_bounds.len() != covariate_ranges.len() {
        return Err(Error::Parameter(format!(
            "{} coefficient bounds for {} covariates",
            beta_bounds.len(),
            covariate_ranges.len()
        )));
    }
    let all = beta_bounds.iter().chain(covariate_ranges).chain([&w_bound, &log_pd_range]);
    let mut infinite = false;
    for &b in all {
        if b.is_nan() || b < 0.0 {
            return Err(Error::Parameter(format!("bounds must be nonnegative, got {b}")));
        }
        infinite |= b.is_infinite();
    }
    if infinite {
        return Ok(f64::INFINITY);
    }
    let fixed: f64 = beta_bounds.iter().zip(covariate_ranges).map(|(b, r)| b * r).sum();
    Ok(fixed + 2.0 * w_bound + log_pd_range)
}

/// Area of `B_r(c) ∩ domain` by disk quadrature.
pub fn clipped_disk_area(c: Point, r: f64, domain: Rect, m: usize) -> Result<f64> {
    ball_quadrature(|p| if domain.contains(p) { 1.0 } else { 0.0 }, c, r, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn unit_disk_area() {
        let a = ball_quadrature(|_| 1.0, Point::new(0.3, -2.0), 1.0, 10_000).unwrap();
        assert!((a / PI - 1.0).abs() < 1e-3);
    }

    #[test]
    fn non_square_m_is_config_error() {
        assert!(matches!(ball_nodes(Point::new(0.0, 0.0), 1.0, 10), Err(Error::Config(_))));
        assert!(matches!(ball_nodes(Point::new(0.0, 0.0), 1.0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn dp_bound_examples() {
        assert_eq!(dp_cost_bound(&[0.0], 0.0, &[0.0], 0.0).unwrap(), 0.0);
        assert_eq!(dp_cost_bound(&[3.0], 1.5, &[0.0], 0.0).unwrap(), 3.0);
        assert_eq!(dp_cost_bound(&[f64::INFINITY], 1.0, &[1.0], 0.0).unwrap(), f64::INFINITY);
        assert!(dp_cost_bound(&[-1.0], 1.0, &[1.0], 0.0).is_err());
    }

    #[test]
    fn log_sum_exp_handles_empty_mass() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}

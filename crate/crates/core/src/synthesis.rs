//! Radial perturbation, ANS and PRS intensity surfaces, and drawing point
//! patterns from an intensity surface.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::data_io::PointPattern;
use crate::error::{Error, Result};
use crate::geom::{Point, Rect};
use crate::mcmc::PosteriorMeans;
use crate::model::{IntensityField, ModelContext};
use crate::sparse::GmrfFactor;

pub const DEFAULT_CANDIDATE_MULTIPLIER: usize = 100;
const RADIAL_MAX_TRIES: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "lowercase")]
pub enum Mechanism {
    Radial { r: f64 },
    Ans { sigma2: f64 },
    Prs,
}

impl Mechanism {
    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::Radial { .. } => "radial",
            Mechanism::Ans { .. } => "ans",
            Mechanism::Prs => "prs",
        }
    }

    /// r for radial, σ² for ANS, nothing for PRS.
    pub fn parameter(&self) -> Option<f64> {
        match *self {
            Mechanism::Radial { r } => Some(r),
            Mechanism::Ans { sigma2 } => Some(sigma2),
            Mechanism::Prs => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSpec {
    #[serde(flatten)]
    pub mechanism: Mechanism,
    #[serde(default = "default_multiplier")]
    pub candidate_multiplier: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_multiplier() -> usize {
    DEFAULT_CANDIDATE_MULTIPLIER
}

impl SynthesisSpec {
    pub fn new(mechanism: Mechanism) -> Self {
        Self { mechanism, candidate_multiplier: DEFAULT_CANDIDATE_MULTIPLIER, seed: None }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mechanism {
            Mechanism::Radial { r } if !(r > 0.0 && r.is_finite()) => {
                return Err(Error::Config(format!("radial radius must be positive, got {r}")))
            }
            Mechanism::Ans { sigma2 } if !(sigma2 >= 0.0 && sigma2.is_finite()) => {
                return Err(Error::Config(format!("ANS noise level must be ≥ 0, got {sigma2}")))
            }
            _ => {}
        }
        if self.candidate_multiplier < 10 {
            return Err(Error::Config("candidate_multiplier must be at least 10".into()));
        }
        Ok(())
    }
}

fn uniform_in_disk(rng: &mut ChaCha8Rng, c: &Point, r: f64) -> Point {
    let rad = r * rng.gen::<f64>().sqrt();
    let ang = 2.0 * PI * rng.gen::<f64>();
    Point::new(c.x + rad * ang.cos(), c.y + rad * ang.sin())
}

/// Each point moved uniformly within its disk of radius `r`; draws that
/// leave the domain are redrawn.
pub fn radial_synthesize(pattern: &PointPattern, r: f64, seed: u64) -> Result<PointPattern> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Parameter(format!("radius must be positive, got {r}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pattern.len());
    for (k, s) in pattern.points.iter().enumerate() {
        let mut tries = 0;
        let p = loop {
            let cand = uniform_in_disk(&mut rng, s, r);
            if pattern.domain.contains(&cand) {
                break cand;
            }
            tries += 1;
            if tries >= RADIAL_MAX_TRIES {
                return Err(Error::Numeric(format!("point {k}: no in-domain draw after {tries} tries")));
            }
        };
        out.push(p);
    }
    PointPattern::new(out, pattern.domain, format!("{}-radial", pattern.label))
}

/// Sparse Cholesky of `Q(κ²)` kept for repeated GMRF draws.
pub struct GmrfSampler {
    factor: GmrfFactor,
}

impl GmrfSampler {
    pub fn new(ctx: &ModelContext, kappa2: f64) -> Result<Self> {
        Ok(Self { factor: GmrfFactor::new(&ctx.fem.precision_matrix(kappa2)?)? })
    }

    /// `x ~ N(0, variance · Q⁻¹)`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, variance: f64) -> Vec<f64> {
        self.factor.sample(rng, variance)
    }
}

/// Plug-in surface with weights replaced by `w`.
pub fn intensity_with_weights(ctx: &ModelContext, means: &PosteriorMeans, w: Vec<f64>) -> Result<IntensityField> {
    ctx.field(means.beta.clone(), w)
}

/// `ŵ + v`, `v ~ N(0, σ²Q⁻¹(κ̂²))`. σ² is in the prior's length unit; zero
/// returns the plug-in surface untouched.
pub fn ans_intensity(ctx: &ModelContext, means: &PosteriorMeans, sigma2: f64, seed: u64) -> Result<IntensityField> {
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::Parameter(format!("noise level must be ≥ 0, got {sigma2}")));
    }
    if sigma2 == 0.0 {
        return intensity_with_weights(ctx, means, means.w.clone());
    }
    let sampler = GmrfSampler::new(ctx, means.kappa2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = sampler.draw(&mut rng, ctx.prior.noise_to_internal(sigma2));
    let w = means.w.iter().zip(&v).map(|(a, b)| a + b).collect();
    intensity_with_weights(ctx, means, w)
}

/// Fresh weights `w* ~ N(0, ξ̂²Q⁻¹(κ̂²))` with β̂ kept.
pub fn prs_intensity(ctx: &ModelContext, means: &PosteriorMeans, seed: u64) -> Result<IntensityField> {
    let sampler = GmrfSampler::new(ctx, means.kappa2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = sampler.draw(&mut rng, means.xi2);
    intensity_with_weights(ctx, means, w)
}

/// `n` points drawn without replacement from `multiplier · n` uniform
/// candidates in `domain`, with probability proportional to λ.
pub fn sample_pattern(
    ctx: &ModelContext,
    field: &IntensityField,
    n: usize,
    multiplier: usize,
    domain: Rect,
    seed: u64,
) -> Result<PointPattern> {
    let n_cand = multiplier.saturating_mul(n);
    if n_cand < n || multiplier < 1 {
        return Err(Error::Config(format!("{n_cand} candidates cannot supply {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed = Vec::with_capacity(n_cand);
    for _ in 0..n_cand {
        let c = Point::new(
            domain.xmin + rng.gen::<f64>() * domain.width(),
            domain.ymin + rng.gen::<f64>() * domain.height(),
        );
        let phi = ctx.mesh.basis_eval(&c)?;
        let log_lam = field.fixed_part(&c) + phi.dot(&field.w);
        // exponential keys: the n smallest E/λ are a weighted sample
        let e: f64 = rng.sample(rand_distr::Exp1);
        keyed.push((e.ln() - log_lam, c));
    }
    if n > 0 {
        keyed.select_nth_unstable_by(n - 1, |a, b| a.0.total_cmp(&b.0));
    }
    keyed.truncate(n);
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    PointPattern::new(keyed.into_iter().map(|(_, p)| p).collect(), domain, "sampled")
}

/// Midpoint estimate of `∫_domain λ` on a `cells × cells` grid.
pub fn integrate_over(ctx: &ModelContext, field: &IntensityField, domain: Rect, cells: usize) -> Result<f64> {
    let (dx, dy) = (domain.width() / cells as f64, domain.height() / cells as f64);
    let mut total = 0.0;
    for iy in 0..cells {
        for ix in 0..cells {
            let c = Point::new(domain.xmin + (ix as f64 + 0.5) * dx, domain.ymin + (iy as f64 + 0.5) * dy);
            let phi = ctx.mesh.basis_eval(&c)?;
            total += (field.fixed_part(&c) + phi.dot(&field.w)).exp();
        }
    }
    Ok(total * dx * dy)
}

/// LGCP realisation on `domain`: `N ~ Poisson(∫λ)`, then locations by
/// [`sample_pattern`].
pub fn simulate_pattern(
    ctx: &ModelContext,
    field: &IntensityField,
    domain: Rect,
    seed: u64,
) -> Result<PointPattern> {
    let mean = integrate_over(ctx, field, domain, 200)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = if mean > 0.0 {
        Poisson::new(mean).map_err(|e| Error::Numeric(e.to_string()))?.sample(&mut rng) as usize
    } else {
        0
    };
    let mut p = sample_pattern(ctx, field, n, DEFAULT_CANDIDATE_MULTIPLIER, domain, rng.gen())?;
    p.label = "simulated".into();
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_mesh;
    use crate::model::{CovariateSet, PriorConfig};
    use crate::sparse::to_dense;
    use std::sync::Arc;

    fn ctx(side: f64, h: f64) -> ModelContext {
        let mesh = build_mesh(Rect::square(0.0, side), h, 0.0).unwrap();
        ModelContext::new(mesh, Arc::new(CovariateSet::none()), PriorConfig::default()).unwrap()
    }

    fn means(w: Vec<f64>) -> PosteriorMeans {
        PosteriorMeans { beta: vec![0.3], w, kappa2: 2.0, xi2: 1.5 }
    }

    fn pattern(pts: Vec<Point>, side: f64) -> PointPattern {
        PointPattern::new(pts, Rect::square(0.0, side), "t").unwrap()
    }

    #[test]
    fn radial_tiny_radius_and_support() {
        let pts: Vec<Point> = (0..50).map(|k| Point::new(0.5 + k as f64 * 0.1, 2.0)).collect();
        let p = pattern(pts, 10.0);
        let tiny = radial_synthesize(&p, 1e-9, 4).unwrap();
        for (a, b) in p.points.iter().zip(&tiny.points) {
            assert!(a.dist(b) <= 1e-9);
        }
        let r = 0.8;
        let out = radial_synthesize(&p, r, 5).unwrap();
        assert_eq!(out.len(), p.len());
        for (a, b) in p.points.iter().zip(&out.points) {
            assert!(a.dist(b) <= r + 1e-12);
            assert!(p.domain.contains(b));
        }
        assert_eq!(out, radial_synthesize(&p, r, 5).unwrap());
    }

    #[test]
    fn radial_mean_displacement() {
        let p = pattern(vec![Point::new(5.0, 5.0); 100_000], 10.0);
        let out = radial_synthesize(&p, 1.0, 11).unwrap();
        let mean = out.points.iter().map(|q| q.dist(&p.points[0])).sum::<f64>() / 100_000.0;
        assert!((mean - 2.0 / 3.0).abs() / (2.0 / 3.0) < 0.01);
    }

    #[test]
    fn ans_zero_noise_is_plug_in() {
        let c = ctx(4.0, 1.0);
        let w: Vec<f64> = (0..c.n()).map(|i| (i as f64 * 0.37).sin()).collect();
        let m = means(w.clone());
        let f = ans_intensity(&c, &m, 0.0, 1).unwrap();
        assert_eq!(f.w, w);
        assert_eq!(f.beta, m.beta);
        let g = intensity_with_weights(&c, &m, m.w.clone()).unwrap();
        assert_eq!(g.w, f.w);
    }

    #[test]
    fn gmrf_draw_covariance_matches_dense() {
        let c = ctx(4.0, 1.0);
        let n = c.n();
        let m = means(vec![0.0; n]);
        let sigma2 = 0.7;
        let sampler = GmrfSampler::new(&c, m.kappa2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 10_000;
        let mut var = vec![0.0; n];
        for _ in 0..draws {
            let v = sampler.draw(&mut rng, sigma2);
            for i in 0..n {
                var[i] += v[i] * v[i];
            }
        }
        let cov = to_dense(&c.fem.precision_matrix(m.kappa2).unwrap()).try_inverse().unwrap() * sigma2;
        for i in 0..n {
            let emp = var[i] / draws as f64;
            assert!((emp / cov[(i, i)] - 1.0).abs() < 0.1, "vertex {i}: {emp} vs {}", cov[(i, i)]);
        }
    }

    #[test]
    fn prs_keeps_fixed_effects() {
        let c = ctx(4.0, 1.0);
        let m = means(vec![0.1; c.n()]);
        let f = prs_intensity(&c, &m, 8).unwrap();
        assert_eq!(f.beta, m.beta);
        assert_ne!(f.w, m.w);
    }

    #[test]
    fn sample_pattern_counts_and_concentration() {
        let c = ctx(4.0, 0.5);
        let dom = Rect::square(0.0, 4.0);
        let w: Vec<f64> = c.mesh.vertices.iter().map(|v| if v.x <= 1.5 { 0.0 } else { -20.0 }).collect();
        let f = c.field(vec![0.0], w).unwrap();
        let mut left = 0;
        let mut total = 0;
        for seed in 0..20 {
            let p = sample_pattern(&c, &f, 50, 100, dom, seed).unwrap();
            assert_eq!(p.len(), 50);
            total += 50;
            left += p.points.iter().filter(|q| q.x < 2.0).count();
        }
        assert!(left as f64 / total as f64 >= 0.99);
        assert!(sample_pattern(&c, &f, 50, 0, dom, 0).is_err());
    }
}

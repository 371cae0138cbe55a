//! Model-based propensity scores and pMSE between a confidential and a
//! synthetic pattern.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data_io::PointPattern;
use crate::error::{Error, Result};
use crate::geom::Point;
use crate::mcmc::PosteriorChain;
use crate::model::{log_integrate_intensity, log_intensity_at, IntensityField, ModelContext};
use crate::risk::SurfaceDraws;

/// `(p, 1 − p)` for `p = 1 / (1 + e^d)`, both accurate near 0.
fn logistic_pair(d: f64) -> (f64, f64) {
    (1.0 / (1.0 + d.exp()), 1.0 / (1.0 + (-d).exp()))
}

/// Probability that `y` belongs to the confidential set, and its complement:
/// `p = λ(y) / (λ(y) + (∫λ / ∫λ†) λ†(y))`.
pub fn classification_prob_pair(
    ctx: &ModelContext,
    lambda: &IntensityField,
    lambda_dagger: &IntensityField,
    y: Point,
) -> Result<(f64, f64)> {
    let a = log_intensity_at(lambda, &ctx.mesh, &y)? - log_integrate_intensity(lambda, &ctx.mesh, &ctx.fem)?;
    let b = log_intensity_at(lambda_dagger, &ctx.mesh, &y)?
        - log_integrate_intensity(lambda_dagger, &ctx.mesh, &ctx.fem)?;
    let d = b - a;
    if d.is_nan() {
        return Err(Error::Numeric(format!("propensity at ({}, {}) is undefined", y.x, y.y)));
    }
    Ok(logistic_pair(d))
}

pub fn classification_prob(
    ctx: &ModelContext,
    lambda: &IntensityField,
    lambda_dagger: &IntensityField,
    y: Point,
) -> Result<f64> {
    classification_prob_pair(ctx, lambda, lambda_dagger, y).map(|(p, _)| p)
}

/// `p̂ = (1/L) Σ_l p_l^x (1 − p_l)^{1−x}`.
pub fn expected_correct(p: &[f64], member: bool) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Config("expected_correct needs at least one draw".into()));
    }
    let s: f64 = p.iter().map(|&v| if member { v } else { 1.0 - v }).sum();
    Ok(s / p.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub pmse: f64,
    /// Confidential points first, then synthetic ones.
    pub per_point_phat: Vec<f64>,
    pub samples_used: usize,
    pub chain_hashes: [String; 2],
    pub seeds: [u64; 2],
}

impl UtilityReport {
    pub fn per_point_csv<W: Write>(&self, n_conf: usize, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "set", "phat"])?;
        for (k, p) in self.per_point_phat.iter().enumerate() {
            let set = if k < n_conf { "confidential" } else { "synthetic" };
            w.write_record([k.to_string(), set.to_string(), p.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// pMSE from independent fits to `S` and `S†`. The `l`-th draws of the two
/// chains are paired; the longer chain is truncated, then both are thinned
/// evenly to at most `max_samples`.
pub fn pmse(
    ctx: &ModelContext,
    chain_s: &PosteriorChain,
    chain_sd: &PosteriorChain,
    s: &PointPattern,
    s_dagger: &PointPattern,
    max_samples: Option<usize>,
) -> Result<UtilityReport> {
    if s.len() != s_dagger.len() {
        return Err(Error::Config(format!(
            "confidential and synthetic sizes differ ({} vs {})",
            s.len(),
            s_dagger.len()
        )));
    }
    let l = chain_s.len().min(chain_sd.len());
    if l == 0 {
        return Err(Error::Config("pMSE needs nonempty chains".into()));
    }
    let trim = |c: &PosteriorChain| {
        let mut c = PosteriorChain { meta: c.meta.clone(), samples: c.samples[..l].to_vec() };
        if let Some(m) = max_samples {
            c = c.subsample(m);
        }
        c
    };
    let (a, b) = (trim(chain_s), trim(chain_sd));
    let da = SurfaceDraws::confidential(ctx, &a)?;
    let db = SurfaceDraws::confidential(ctx, &b)?;
    let l = da.len();

    let points: Vec<Point> = s.points.iter().chain(&s_dagger.points).copied().collect();
    let design = ctx.point_design(&points)?;
    let la = da.log_lambda(&design);
    let lb = db.log_lambda(&design);
    let n2 = points.len();
    let mut phat = Vec::with_capacity(n2);
    for k in 0..n2 {
        let member = k < s.len();
        let mut acc = 0.0;
        for i in 0..l {
            let d = (lb[i * n2 + k] - db.log_int[i]) - (la[i * n2 + k] - da.log_int[i]);
            if d.is_nan() {
                return Err(Error::Numeric(format!("propensity of point {k} is undefined")));
            }
            let (p, q) = logistic_pair(d);
            acc += if member { p } else { q };
        }
        phat.push(acc / l as f64);
    }
    let pmse = phat.iter().map(|p| (p - 0.5).powi(2)).sum::<f64>() / n2.max(1) as f64;
    Ok(UtilityReport {
        pmse,
        per_point_phat: phat,
        samples_used: l,
        chain_hashes: [a.hash(), b.hash()],
        seeds: [a.meta.seed, b.meta.seed],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expected_correct_examples() {
        assert_eq!(expected_correct(&[0.5, 0.5], false).unwrap(), 0.5);
        assert_eq!(expected_correct(&[1.0, 1.0, 1.0], true).unwrap(), 1.0);
        assert!((expected_correct(&[0.2, 0.5, 0.8], false).unwrap() - 0.5).abs() < 1e-15);
        assert!(expected_correct(&[], true).is_err());
    }

    #[test]
    fn logistic_pair_tails() {
        let (p, q) = logistic_pair(-60.0);
        assert_eq!(p, 1.0);
        assert!(q < 1e-20 && q > 0.0);
        assert_eq!(logistic_pair(0.0), (0.5, 0.5));
    }
}

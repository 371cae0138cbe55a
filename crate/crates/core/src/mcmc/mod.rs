//! Adaptive Metropolis–Hastings fits of single and joint LGCP posteriors.

mod io;
mod sampler;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_io::PointPattern;
use crate::error::{Error, Result};
use crate::model::{Hyperparams, IntensityField, ModelContext, PriorConfig};

pub use io::{export_csv, read_chain, write_chain};
use sampler::{FieldSpec, FieldVar, Sampler, SurfaceSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Target vertex count of one spatial block of `w`.
    pub block_size: usize,
    /// Iterations per adaptation batch.
    pub adapt_batch: usize,
    /// Drop the likelihood and sample the prior.
    pub prior_only: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self { iterations: 50_000, burn_in: 25_000, thin: 5, block_size: 50, adapt_batch: 50, prior_only: false }
    }
}

impl McmcConfig {
    /// 250,000 burn-in iterations followed by 250,000 stored draws.
    pub fn long_preset() -> Self {
        Self { iterations: 500_000, burn_in: 250_000, thin: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 || self.block_size == 0 || self.adapt_batch == 0 {
            return Err(Error::Config("thin, block_size and adapt_batch must be positive".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Config("burn_in must be smaller than iterations".into()));
        }
        Ok(())
    }

    pub fn stored_samples(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ChainKind {
    Single,
    /// `sigma2` is the noise level exactly as configured.
    Ans { sigma2: f64 },
    Prs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub kind: ChainKind,
    pub config: McmcConfig,
    pub prior: PriorConfig,
    pub seed: u64,
    pub mesh_hash: String,
    pub data_hashes: Vec<String>,
    pub n_vertices: usize,
    pub p: usize,
    pub field_names: Vec<String>,
    pub held_out: Option<usize>,
    pub block_names: Vec<String>,
    pub acceptance_rates: Vec<f64>,
    pub scales_at_burn_in: Vec<f64>,
    pub final_scales: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSample {
    pub beta: Vec<f64>,
    pub theta: [f64; 2],
    /// One weight vector per latent field; `fields[0]` is `w`.
    pub fields: Vec<Vec<f32>>,
}

impl ChainSample {
    pub fn w(&self) -> &[f32] {
        &self.fields[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorChain {
    pub meta: ChainMeta,
    pub samples: Vec<ChainSample>,
}

impl PosteriorChain {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn hyper(&self, i: usize) -> Hyperparams {
        self.meta.prior.hyper(self.samples[i].theta)
    }

    /// SHA-256 of the binary chain encoding.
    pub fn hash(&self) -> String {
        let mut buf = Vec::new();
        io::encode(self, &mut buf).expect("in-memory encode");
        hex::encode(Sha256::digest(&buf))
    }

    pub fn check_mesh(&self, ctx: &ModelContext) -> Result<()> {
        if self.meta.mesh_hash != ctx.mesh_hash() || self.meta.p != ctx.p() {
            return Err(Error::Config("chain was fit on a different mesh or covariate set".into()));
        }
        Ok(())
    }

    /// A copy keeping every `step`-th sample, at most `max` of them.
    pub fn subsample(&self, max: usize) -> PosteriorChain {
        let step = self.len().div_ceil(max.max(1)).max(1);
        PosteriorChain {
            meta: self.meta.clone(),
            samples: self.samples.iter().step_by(step).cloned().collect(),
        }
    }
}

/// A fit of the confidential and synthetic surfaces together.
#[derive(Debug, Clone, PartialEq)]
pub struct JointChain(pub PosteriorChain);

impl JointChain {
    pub fn chain(&self) -> &PosteriorChain {
        &self.0
    }

    pub fn sigma2(&self) -> Option<f64> {
        match self.0.meta.kind {
            ChainKind::Ans { sigma2 } => Some(sigma2),
            _ => None,
        }
    }

    /// Synthetic-surface weights of sample `i` (`w + v` or `w*`).
    pub fn synthetic_w(&self, i: usize) -> Vec<f32> {
        let s = &self.0.samples[i];
        match self.0.meta.kind {
            ChainKind::Ans { .. } => s.fields[0].iter().zip(&s.fields[1]).map(|(a, b)| a + b).collect(),
            ChainKind::Prs => s.fields[1].clone(),
            ChainKind::Single => s.fields[0].clone(),
        }
    }
}

impl TryFrom<PosteriorChain> for JointChain {
    type Error = Error;

    fn try_from(c: PosteriorChain) -> Result<Self> {
        match c.meta.kind {
            ChainKind::Single => Err(Error::Config("not a joint chain".into())),
            _ => Ok(JointChain(c)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMeans {
    pub beta: Vec<f64>,
    pub w: Vec<f64>,
    pub kappa2: f64,
    pub xi2: f64,
}

impl PosteriorMeans {
    pub fn hyper(&self) -> Hyperparams {
        Hyperparams { kappa2: self.kappa2, xi2: self.xi2 }
    }

    pub fn field(&self, ctx: &ModelContext) -> Result<IntensityField> {
        ctx.field(self.beta.clone(), self.w.clone())
    }
}

/// Coordinatewise means; κ² and ξ² are averaged on their own scale.
pub fn posterior_means(chain: &PosteriorChain) -> Result<PosteriorMeans> {
    if chain.is_empty() {
        return Err(Error::Config("posterior means of an empty chain".into()));
    }
    let m = chain.len() as f64;
    let p = chain.samples[0].beta.len();
    let n = chain.samples[0].fields[0].len();
    let mut beta = vec![0.0; p];
    let mut w = vec![0.0; n];
    let (mut k2, mut xi2) = (0.0, 0.0);
    for (i, s) in chain.samples.iter().enumerate() {
        for (b, v) in beta.iter_mut().zip(&s.beta) {
            *b += v;
        }
        for (a, v) in w.iter_mut().zip(&s.fields[0]) {
            *a += *v as f64;
        }
        let h = chain.hyper(i);
        k2 += h.kappa2;
        xi2 += h.xi2;
    }
    beta.iter_mut().for_each(|b| *b /= m);
    w.iter_mut().for_each(|a| *a /= m);
    Ok(PosteriorMeans { beta, w, kappa2: k2 / m, xi2: xi2 / m })
}

fn meta(
    ctx: &ModelContext,
    kind: ChainKind,
    cfg: &McmcConfig,
    seed: u64,
    data: &[&PointPattern],
    held_out: Option<usize>,
) -> ChainMeta {
    ChainMeta {
        kind,
        config: cfg.clone(),
        prior: ctx.prior.clone(),
        seed,
        mesh_hash: ctx.mesh_hash().to_string(),
        data_hashes: data.iter().map(|d| d.hash()).collect(),
        n_vertices: ctx.n(),
        p: ctx.p(),
        field_names: Vec::new(),
        held_out,
        block_names: Vec::new(),
        acceptance_rates: Vec::new(),
        scales_at_burn_in: Vec::new(),
        final_scales: Vec::new(),
        warnings: Vec::new(),
    }
}

/// Posterior of (β, w, θ) given one pattern.
pub fn fit_lgcp(ctx: &ModelContext, pattern: &PointPattern, cfg: &McmcConfig, seed: u64) -> Result<PosteriorChain> {
    fit_single(ctx, pattern, None, cfg, seed)
}

/// As [`fit_lgcp`] but targeting π(λ | S₋ₖ, N): point `k` contributes only
/// through the count.
pub fn fit_lgcp_held_out(
    ctx: &ModelContext,
    pattern: &PointPattern,
    k: usize,
    cfg: &McmcConfig,
    seed: u64,
) -> Result<PosteriorChain> {
    if k >= pattern.len() {
        return Err(Error::Config(format!("held-out index {k} out of range")));
    }
    fit_single(ctx, pattern, Some(k), cfg, seed)
}

fn fit_single(
    ctx: &ModelContext,
    pattern: &PointPattern,
    held_out: Option<usize>,
    cfg: &McmcConfig,
    seed: u64,
) -> Result<PosteriorChain> {
    if pattern.is_empty() && !cfg.prior_only {
        return Err(Error::Config("cannot fit an empty pattern".into()));
    }
    let design = ctx.point_design(&pattern.points)?;
    let fields = vec![FieldSpec::new("w", FieldVar::Xi2)];
    let surfaces = vec![SurfaceSpec { design, fields: vec![0], held_out }];
    let m = meta(ctx, ChainKind::Single, cfg, seed, &[pattern], held_out);
    Sampler::new(ctx, cfg, fields, surfaces, seed)?.run(m)
}

/// Joint fit for ANS: `λ` uses `w`, `λ†` uses `w + v`, `v ~ N(0, σ²Q⁻¹)`
/// with σ² fixed. σ² = 0 pins `v` at zero.
pub fn joint_fit_ans(
    ctx: &ModelContext,
    confidential: &PointPattern,
    synthetic: &PointPattern,
    sigma2: f64,
    cfg: &McmcConfig,
    seed: u64,
) -> Result<JointChain> {
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::Parameter(format!("noise level must be ≥ 0, got {sigma2}")));
    }
    let fields = vec![
        FieldSpec::new("w", FieldVar::Xi2),
        FieldSpec::new("v", FieldVar::Fixed(ctx.prior.noise_to_internal(sigma2))),
    ];
    joint(ctx, confidential, synthetic, fields, vec![0, 1], ChainKind::Ans { sigma2 }, cfg, seed)
}

/// Joint fit for PRS: `λ` uses `w`, `λ†` uses `w*`; β, κ², ξ² shared.
pub fn joint_fit_prs(
    ctx: &ModelContext,
    confidential: &PointPattern,
    synthetic: &PointPattern,
    cfg: &McmcConfig,
    seed: u64,
) -> Result<JointChain> {
    joint_fit_prs_with(ctx, confidential, synthetic, None, cfg, seed)
}

/// PRS joint fit with `w*` optionally held fixed at the given weights.
pub fn joint_fit_prs_with(
    ctx: &ModelContext,
    confidential: &PointPattern,
    synthetic: &PointPattern,
    frozen_w_star: Option<Vec<f64>>,
    cfg: &McmcConfig,
    seed: u64,
) -> Result<JointChain> {
    let mut star = FieldSpec::new("w_star", FieldVar::Xi2);
    if let Some(f) = frozen_w_star {
        if f.len() != ctx.n() {
            return Err(Error::Config("frozen w* has the wrong length".into()));
        }
        star.frozen = Some(f);
    }
    let fields = vec![FieldSpec::new("w", FieldVar::Xi2), star];
    joint(ctx, confidential, synthetic, fields, vec![1], ChainKind::Prs, cfg, seed)
}

#[allow(clippy::too_many_arguments)]
fn joint(
    ctx: &ModelContext,
    confidential: &PointPattern,
    synthetic: &PointPattern,
    fields: Vec<FieldSpec>,
    synthetic_fields: Vec<usize>,
    kind: ChainKind,
    cfg: &McmcConfig,
    seed: u64,
) -> Result<JointChain> {
    let surfaces = vec![
        SurfaceSpec { design: ctx.point_design(&confidential.points)?, fields: vec![0], held_out: None },
        SurfaceSpec { design: ctx.point_design(&synthetic.points)?, fields: synthetic_fields, held_out: None },
    ];
    let m = meta(ctx, kind, cfg, seed, &[confidential, synthetic], None);
    Ok(JointChain(Sampler::new(ctx, cfg, fields, surfaces, seed)?.run(m)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy_chain(states: Vec<(Vec<f64>, [f64; 2], Vec<f32>)>) -> PosteriorChain {
        PosteriorChain {
            meta: ChainMeta {
                kind: ChainKind::Single,
                config: McmcConfig::default(),
                prior: PriorConfig::default(),
                seed: 0,
                mesh_hash: String::new(),
                data_hashes: vec![],
                n_vertices: 2,
                p: 1,
                field_names: vec!["w".into()],
                held_out: None,
                block_names: vec![],
                acceptance_rates: vec![],
                scales_at_burn_in: vec![],
                final_scales: vec![],
                warnings: vec![],
            },
            samples: states
                .into_iter()
                .map(|(beta, theta, w)| ChainSample { beta, theta, fields: vec![w] })
                .collect(),
        }
    }

    #[test]
    fn means_of_constant_and_two_state_chains() {
        let c = dummy_chain(vec![(vec![1.5], [0.2, -0.1], vec![0.5, -1.0]); 4]);
        let m = posterior_means(&c).unwrap();
        assert_eq!(m.beta, vec![1.5]);
        assert_eq!(m.w, vec![0.5, -1.0]);
        let h = PriorConfig::default().hyper([0.2, -0.1]);
        assert!((m.kappa2 / h.kappa2 - 1.0).abs() < 1e-12);

        let c = dummy_chain(vec![(vec![1.0], [0.0, 0.0], vec![0.0, 2.0]), (vec![3.0], [0.0, 0.0], vec![1.0, 0.0])]);
        let m = posterior_means(&c).unwrap();
        assert_eq!(m.beta, vec![2.0]);
        assert_eq!(m.w, vec![0.5, 1.0]);
    }

    #[test]
    fn empty_chain_is_error() {
        assert!(posterior_means(&dummy_chain(vec![])).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(McmcConfig::default().validate().is_ok());
        assert_eq!(McmcConfig::default().stored_samples(), 5000);
        let bad = McmcConfig { burn_in: 10, iterations: 10, ..McmcConfig::default() };
        assert!(bad.validate().is_err());
    }
}

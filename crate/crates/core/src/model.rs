//! LGCP intensity surfaces, the dual-mesh likelihood, priors and the
//! (ρ, σ) reparameterisation of the Matérn hyperparameters.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Cholesky, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::data_io::{PointPattern, ScalarField};
use crate::error::{Error, Result};
use crate::geom::Point;
use crate::mesh::{BasisVector, FemMatrices, TriMesh};
use crate::sparse::{spmv, StiffnessLogDet};

/// Covariate rasters plus the log population-density offset.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CovariateSet {
    pub names: Vec<String>,
    pub fields: Vec<ScalarField>,
    pub log_pd: Option<ScalarField>,
}

impl CovariateSet {
    /// Intercept only, zero offset.
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(names: Vec<String>, fields: Vec<ScalarField>, log_pd: Option<ScalarField>) -> Result<Self> {
        if names.len() != fields.len() {
            return Err(Error::Config("one name per covariate field required".into()));
        }
        Ok(Self { names, fields, log_pd })
    }

    /// Number of fixed effects including the intercept.
    pub fn p(&self) -> usize {
        1 + self.fields.len()
    }

    pub fn offset(&self, s: &Point) -> f64 {
        self.log_pd.as_ref().map_or(0.0, |f| f.value(s))
    }

    /// Design row `(1, x₁(s), …)` written into `out`.
    pub fn design_row(&self, s: &Point, out: &mut [f64]) {
        out[0] = 1.0;
        for (o, f) in out[1..].iter_mut().zip(&self.fields) {
            *o = f.value(s);
        }
    }

    /// Map β on the standardised covariate scale back to raw covariate units.
    pub fn back_transform(&self, beta: &[f64]) -> Vec<f64> {
        let mut out = beta.to_vec();
        for (j, f) in self.fields.iter().enumerate() {
            if let Some(st) = f.standardization {
                out[j + 1] = beta[j + 1] / st.sd;
                out[0] -= beta[j + 1] * st.mean / st.sd;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct IntensityField {
    pub beta: Vec<f64>,
    pub w: Vec<f64>,
    pub covariates: Arc<CovariateSet>,
}

impl IntensityField {
    pub fn new(beta: Vec<f64>, w: Vec<f64>, covariates: Arc<CovariateSet>) -> Result<Self> {
        if beta.len() != covariates.p() {
            return Err(Error::Config(format!(
                "beta has {} entries, expected {}",
                beta.len(),
                covariates.p()
            )));
        }
        Ok(Self { beta, w, covariates })
    }

    pub fn fixed_part(&self, s: &Point) -> f64 {
        let mut row = vec![0.0; self.beta.len()];
        self.covariates.design_row(s, &mut row);
        self.covariates.offset(s) + row.iter().zip(&self.beta).map(|(a, b)| a * b).sum::<f64>()
    }
}

fn check_w(field: &IntensityField, mesh: &TriMesh) -> Result<()> {
    if field.w.len() != mesh.n() {
        return Err(Error::Config(format!(
            "w has {} entries but the mesh has {} vertices",
            field.w.len(),
            mesh.n()
        )));
    }
    Ok(())
}

pub fn log_intensity_at(field: &IntensityField, mesh: &TriMesh, s: &Point) -> Result<f64> {
    check_w(field, mesh)?;
    let phi = mesh.basis_eval(s)?;
    Ok(field.fixed_part(s) + phi.dot(&field.w))
}

/// `log Σᵢ exp(aᵢ)` with max subtraction.
pub fn log_sum_exp(a: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = a.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + a.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Fixed-effect design evaluated at the mesh nodes together with the
/// dual-cell quadrature weights.
#[derive(Debug, Clone)]
pub struct NodeDesign {
    pub p: usize,
    pub x: Vec<f64>,
    pub offset: Vec<f64>,
    pub log_alpha: Vec<f64>,
}

impl NodeDesign {
    pub fn new(cov: &CovariateSet, mesh: &TriMesh, fem: &FemMatrices) -> Self {
        let p = cov.p();
        let n = mesh.n();
        let mut x = vec![0.0; n * p];
        let mut offset = vec![0.0; n];
        for (i, v) in mesh.vertices.iter().enumerate() {
            cov.design_row(v, &mut x[i * p..(i + 1) * p]);
            offset[i] = cov.offset(v);
        }
        let log_alpha = fem.dual_volumes.iter().map(|a| a.ln()).collect();
        Self { p, x, offset, log_alpha }
    }

    pub fn n(&self) -> usize {
        self.offset.len()
    }

    pub fn fixed(&self, i: usize, beta: &[f64]) -> f64 {
        self.offset[i] + self.x[i * self.p..(i + 1) * self.p].iter().zip(beta).map(|(a, b)| a * b).sum::<f64>()
    }

    /// `log ∫λ ≈ log Σᵢ α̃ᵢ exp(η̃ᵢ)`.
    pub fn log_integral(&self, beta: &[f64], w: &[f64]) -> f64 {
        log_sum_exp((0..self.n()).map(|i| self.log_alpha[i] + self.fixed(i, beta) + w[i]))
    }

    pub fn log_integral_f32(&self, beta: &[f64], w: &[f32]) -> f64 {
        log_sum_exp((0..self.n()).map(|i| self.log_alpha[i] + self.fixed(i, beta) + w[i] as f64))
    }
}

/// Fixed-effect design and basis rows at a list of locations.
#[derive(Debug, Clone)]
pub struct PointDesign {
    pub p: usize,
    pub x: Vec<f64>,
    pub offset: Vec<f64>,
    pub basis: Vec<BasisVector>,
}

impl PointDesign {
    /// Errors name the index of the first location outside the mesh.
    pub fn new(cov: &CovariateSet, mesh: &TriMesh, points: &[Point]) -> Result<Self> {
        let p = cov.p();
        let mut x = vec![0.0; points.len() * p];
        let mut offset = Vec::with_capacity(points.len());
        let mut basis = Vec::with_capacity(points.len());
        for (k, s) in points.iter().enumerate() {
            let phi = mesh.basis_eval(s).map_err(|_| Error::PointOutOfDomain { index: k })?;
            basis.push(phi);
            cov.design_row(s, &mut x[k * p..(k + 1) * p]);
            offset.push(cov.offset(s));
        }
        Ok(Self { p, x, offset, basis })
    }

    pub fn len(&self) -> usize {
        self.offset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offset.is_empty()
    }

    pub fn fixed(&self, k: usize, beta: &[f64]) -> f64 {
        self.offset[k] + self.x[k * self.p..(k + 1) * self.p].iter().zip(beta).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn log_intensity(&self, k: usize, beta: &[f64], w: &[f64]) -> f64 {
        self.fixed(k, beta) + self.basis[k].dot(w)
    }

    pub fn log_intensity_f32(&self, k: usize, beta: &[f64], w: &[f32]) -> f64 {
        self.fixed(k, beta) + self.basis[k].dot_f32(w)
    }
}

pub fn log_integrate_intensity(field: &IntensityField, mesh: &TriMesh, fem: &FemMatrices) -> Result<f64> {
    check_w(field, mesh)?;
    let nd = NodeDesign::new(&field.covariates, mesh, fem);
    let v = nd.log_integral(&field.beta, &field.w);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("log intensity integral is {v}")));
    }
    Ok(v)
}

pub fn integrate_intensity(field: &IntensityField, mesh: &TriMesh, fem: &FemMatrices) -> Result<f64> {
    let v = log_integrate_intensity(field, mesh, fem)?.exp();
    if !v.is_finite() {
        return Err(Error::Numeric("intensity integral overflows".into()));
    }
    Ok(v)
}

pub fn ln_factorial(n: usize) -> f64 {
    libm::lgamma(n as f64 + 1.0)
}

/// `Σ log λ(s_k) − ∫λ − log N!`.
pub fn log_likelihood(
    pattern: &PointPattern,
    field: &IntensityField,
    mesh: &TriMesh,
    fem: &FemMatrices,
) -> Result<f64> {
    check_w(field, mesh)?;
    let pd = PointDesign::new(&field.covariates, mesh, &pattern.points)?;
    let sum: f64 = (0..pd.len()).map(|k| pd.log_intensity(k, &field.beta, &field.w)).sum();
    let integral = integrate_intensity(field, mesh, fem)?;
    Ok(sum - integral - ln_factorial(pattern.len()))
}

/// Matérn SPDE hyperparameters. `rho` and `sigma2` are always derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub kappa2: f64,
    pub xi2: f64,
}

impl Hyperparams {
    pub fn new(kappa2: f64, xi2: f64) -> Result<Self> {
        if !(kappa2 > 0.0 && kappa2.is_finite()) || !(xi2 > 0.0 && xi2.is_finite()) {
            return Err(Error::Parameter(format!("need κ² > 0 and ξ² > 0, got {kappa2}, {xi2}")));
        }
        Ok(Self { kappa2, xi2 })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa2.sqrt()
    }

    /// Effective range √8/κ.
    pub fn rho(&self) -> f64 {
        8f64.sqrt() / self.kappa()
    }

    /// Marginal variance ξ²/(4πκ²).
    pub fn sigma2(&self) -> f64 {
        self.xi2 / (4.0 * PI * self.kappa2)
    }

    /// Inverse of [`prior_transform`].
    pub fn to_theta(&self, log_rho0: f64, log_sigma0: f64) -> (f64, f64) {
        let theta1 = self.rho().ln() - log_rho0;
        let theta2 = 0.5 * self.sigma2().ln() - log_sigma0;
        (theta1, theta2)
    }
}

/// `θ₁ = log(ρ/ρ₀)`, `θ₂ = log(σ/σ₀)`, mapped to (κ², ξ²).
pub fn prior_transform(theta1: f64, theta2: f64, log_rho0: f64, log_sigma0: f64) -> Hyperparams {
    let log_kappa0 = 0.5 * 8f64.ln() - log_rho0;
    let log_kappa = log_kappa0 - theta1;
    let log_xi = log_sigma0 + 0.5 * (4.0 * PI).ln() + log_kappa0 + theta2 - theta1;
    Hyperparams { kappa2: (2.0 * log_kappa).exp(), xi2: (2.0 * log_xi).exp() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub beta_var: f64,
    pub theta_cov: [[f64; 2]; 2],
    /// log ρ₀ in `length_unit`s.
    pub log_rho0: f64,
    pub log_sigma0: f64,
    /// Length (meters) of the unit in which ρ₀ and ANS noise levels are quoted.
    pub length_unit: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            beta_var: 2.0,
            theta_cov: [[1.0, 0.0], [0.0, 1.0]],
            log_rho0: 0.0,
            log_sigma0: 0.0,
            length_unit: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_var > 0.0) {
            return Err(Error::Config("beta prior variance must be positive".into()));
        }
        if !(self.length_unit > 0.0 && self.length_unit.is_finite()) {
            return Err(Error::Config("length unit must be positive".into()));
        }
        self.theta_precision().map(|_| ())
    }

    /// log ρ₀ in meters.
    pub fn log_rho0_m(&self) -> f64 {
        self.log_rho0 + self.length_unit.ln()
    }

    pub fn hyper(&self, theta: [f64; 2]) -> Hyperparams {
        prior_transform(theta[0], theta[1], self.log_rho0_m(), self.log_sigma0)
    }

    /// ANS noise level quoted in `length_unit`s, expressed in meters.
    pub fn noise_to_internal(&self, sigma2: f64) -> f64 {
        sigma2 / (self.length_unit * self.length_unit)
    }

    /// `(Σ_θ⁻¹, log|Σ_θ|)`, or a config error when Σ_θ is not PD.
    pub fn theta_precision(&self) -> Result<(Matrix2<f64>, f64)> {
        let c = self.theta_cov;
        let m = Matrix2::new(c[0][0], c[0][1], c[1][0], c[1][1]);
        if (c[0][1] - c[1][0]).abs() > 1e-12 * (1.0 + c[0][1].abs()) {
            return Err(Error::Config("theta covariance must be symmetric".into()));
        }
        let chol = Cholesky::new(m).ok_or_else(|| Error::Config("theta covariance is not positive definite".into()))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok((chol.inverse(), log_det))
    }

    pub fn log_prior_beta(&self, beta: &[f64]) -> f64 {
        let v = self.beta_var;
        beta.iter().map(|b| -0.5 * (2.0 * PI * v).ln() - b * b / (2.0 * v)).sum()
    }

    pub fn log_prior_theta(&self, theta1: f64, theta2: f64) -> Result<f64> {
        let (prec, log_det) = self.theta_precision()?;
        let t = Vector2::new(theta1, theta2);
        Ok(-(2.0 * PI).ln() - 0.5 * log_det - 0.5 * (t.transpose() * prec * t)[(0, 0)])
    }
}

/// `log N(w; 0, variance · Q(κ²)⁻¹)`.
pub fn log_prior_w(w: &[f64], fem: &FemMatrices, kappa2: f64, variance: f64) -> Result<f64> {
    let n = w.len();
    let q = fem.precision_matrix(kappa2)?;
    let mut qw = vec![0.0; n];
    spmv(&q, w, &mut qw);
    let quad: f64 = qw.iter().zip(w).map(|(a, b)| a * b).sum();
    let log_det_q = StiffnessLogDet::new(&fem.c_diag, &fem.g).log_det_q(kappa2, fem.log_det_c())?;
    Ok(-0.5 * n as f64 * (2.0 * PI * variance).ln() + 0.5 * log_det_q - quad / (2.0 * variance))
}

/// Gaussian log prior of (β, θ), plus the GMRF term for `w` when supplied.
pub fn log_prior(
    beta: &[f64],
    theta1: f64,
    theta2: f64,
    prior: &PriorConfig,
    w: Option<(&[f64], &FemMatrices)>,
) -> Result<f64> {
    prior.validate()?;
    let mut lp = prior.log_prior_beta(beta) + prior.log_prior_theta(theta1, theta2)?;
    if let Some((w, fem)) = w {
        let h = prior.hyper([theta1, theta2]);
        lp += log_prior_w(w, fem, h.kappa2, h.xi2)?;
    }
    Ok(lp)
}

/// Mesh, FEM matrices, covariates and prior bundled with the node design
/// and log-determinant tables that every fit and score reuses.
pub struct ModelContext {
    pub mesh: TriMesh,
    pub fem: FemMatrices,
    pub covariates: Arc<CovariateSet>,
    pub prior: PriorConfig,
    pub nodes: NodeDesign,
    logdet: StiffnessLogDet,
    mesh_hash: String,
}

impl ModelContext {
    pub fn new(mesh: TriMesh, covariates: Arc<CovariateSet>, prior: PriorConfig) -> Result<Self> {
        prior.validate()?;
        let fem = crate::mesh::assemble_fem(&mesh)?;
        let nodes = NodeDesign::new(&covariates, &mesh, &fem);
        if nodes.offset.iter().chain(&nodes.x).any(|v| !v.is_finite()) {
            return Err(Error::Config("covariates are not finite at every mesh node".into()));
        }
        let logdet = StiffnessLogDet::new(&fem.c_diag, &fem.g);
        let mesh_hash = mesh.hash();
        Ok(Self { mesh, fem, covariates, prior, nodes, logdet, mesh_hash })
    }

    pub fn n(&self) -> usize {
        self.mesh.n()
    }

    pub fn p(&self) -> usize {
        self.covariates.p()
    }

    pub fn mesh_hash(&self) -> &str {
        &self.mesh_hash
    }

    pub fn log_det_q(&self, kappa2: f64) -> Result<f64> {
        self.logdet.log_det_q(kappa2, self.fem.log_det_c())
    }

    pub fn point_design(&self, points: &[Point]) -> Result<PointDesign> {
        PointDesign::new(&self.covariates, &self.mesh, points)
    }

    pub fn field(&self, beta: Vec<f64>, w: Vec<f64>) -> Result<IntensityField> {
        let f = IntensityField::new(beta, w, self.covariates.clone())?;
        check_w(&f, &self.mesh)?;
        Ok(f)
    }
}

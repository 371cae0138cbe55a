//! Blocked random-walk Metropolis over (β, latent fields, θ) with
//! Roberts–Rosenthal style scale adaptation during burn-in.
//!
//! The state is a set of latent GMRF fields sharing one precision `Q(κ²)`,
//! each either scaled by ξ² or by a fixed variance, and a set of point
//! surfaces whose log intensity is `offset + xβ + Σ_{j ∈ surface} F_j`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CscMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ChainMeta, ChainSample, McmcConfig, PosteriorChain};
use crate::error::{Error, Result};
use crate::model::{Hyperparams, ModelContext, PointDesign};
use crate::sparse::{dot, spmv, StiffnessOperator};

const STUCK_LIMIT: usize = 10_000;
const TILINGS: usize = 4;

#[derive(Debug, Clone, Copy)]
pub(crate) enum FieldVar {
    Xi2,
    Fixed(f64),
}

pub(crate) struct FieldSpec {
    pub name: String,
    pub var: FieldVar,
    pub frozen: Option<Vec<f64>>,
}

impl FieldSpec {
    pub fn new(name: &str, var: FieldVar) -> Self {
        Self { name: name.into(), var, frozen: None }
    }

    fn pinned(&self) -> bool {
        matches!(self.var, FieldVar::Fixed(v) if v == 0.0)
    }

    fn sampled(&self) -> bool {
        self.frozen.is_none() && !self.pinned()
    }
}

pub(crate) struct SurfaceSpec {
    pub design: PointDesign,
    pub fields: Vec<usize>,
    pub held_out: Option<usize>,
}

struct Surface {
    contains: Vec<bool>,
    xsum: Vec<f64>,
    counts: Vec<f64>,
    /// `Σᵢ countsᵢ x̃ᵢc`.
    count_x: Vec<f64>,
    held_out: bool,
    eta: Vec<f64>,
    lam: Vec<f64>,
    integral: f64,
}

impl Surface {
    fn ll_delta(&self, d_points: f64, new_integral: f64) -> f64 {
        let mut d = d_points - (new_integral - self.integral);
        if self.held_out {
            d += new_integral.ln() - self.integral.ln();
        }
        d
    }
}

struct Adapt {
    name: String,
    log_scale: f64,
    target: f64,
    batch_acc: usize,
    batch_tries: usize,
    batches: usize,
    post_acc: usize,
    post_tries: usize,
    all_acc: usize,
    all_tries: usize,
    rejections: usize,
}

impl Adapt {
    fn new(name: String, scale: f64, target: f64) -> Self {
        Self {
            name,
            log_scale: scale.ln(),
            target,
            batch_acc: 0,
            batch_tries: 0,
            batches: 0,
            post_acc: 0,
            post_tries: 0,
            all_acc: 0,
            all_tries: 0,
            rejections: 0,
        }
    }

    fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    fn record(&mut self, accepted: bool, post: bool) -> Result<()> {
        self.batch_tries += 1;
        self.all_tries += 1;
        if post {
            self.post_tries += 1;
        }
        if accepted {
            self.batch_acc += 1;
            self.all_acc += 1;
            if post {
                self.post_acc += 1;
            }
            self.rejections = 0;
        } else {
            self.rejections += 1;
            if self.rejections >= STUCK_LIMIT {
                return Err(Error::StuckChain { block: self.name.clone(), count: self.rejections });
            }
        }
        Ok(())
    }

    fn end_batch(&mut self) {
        if self.batch_tries == 0 {
            return;
        }
        self.batches += 1;
        let rate = self.batch_acc as f64 / self.batch_tries as f64;
        let delta = (1.0 / (self.batches as f64).sqrt()).min(0.1);
        self.log_scale += if rate > self.target { delta } else { -delta };
        self.batch_acc = 0;
        self.batch_tries = 0;
    }

    fn rate(&self) -> f64 {
        if self.post_tries > 0 {
            self.post_acc as f64 / self.post_tries as f64
        } else if self.all_tries > 0 {
            self.all_acc as f64 / self.all_tries as f64
        } else {
            0.0
        }
    }
}

/// Proposal covariance for a small dense block, re-estimated from a window
/// of recent burn-in states.
struct Shape {
    d: usize,
    chol: DMatrix<f64>,
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl Shape {
    fn new(d: usize, var0: f64) -> Self {
        Self {
            d,
            chol: DMatrix::identity(d, d) * var0.sqrt(),
            n: 0,
            mean: DVector::zeros(d),
            m2: DMatrix::zeros(d, d),
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let x = DVector::from_column_slice(x);
        let delta = &x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = &x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    fn refresh(&mut self) {
        if self.n >= 10 * (self.d + 1) {
            let mut cov = &self.m2 / (self.n - 1) as f64;
            for i in 0..self.d {
                cov[(i, i)] += 1e-10;
            }
            if let Some(c) = cov.cholesky() {
                self.chol = c.l();
            }
        }
        self.n = 0;
        self.mean.fill(0.0);
        self.m2.fill(0.0);
    }

    fn propose(&self, rng: &mut ChaCha8Rng, scale: f64) -> Vec<f64> {
        let z = DVector::from_fn(self.d, |_, _| rng.sample::<f64, _>(StandardNormal));
        if rng.gen::<f64>() < 0.05 {
            return (z * (0.1 / (self.d as f64).sqrt())).as_slice().to_vec();
        }
        (&self.chol * z * scale).as_slice().to_vec()
    }
}

pub(crate) struct Sampler<'a> {
    ctx: &'a ModelContext,
    cfg: &'a McmcConfig,
    fields: Vec<FieldSpec>,
    surfaces: Vec<Surface>,
    rng: ChaCha8Rng,
    n: usize,
    p: usize,

    beta: Vec<f64>,
    theta: [f64; 2],
    hyper: Hyperparams,
    q: CscMatrix<f64>,
    /// `Q x̃_c` for each design column and `x̃_cᵀ Q x̃_c`.
    q_x: Vec<Vec<f64>>,
    xqx: Vec<f64>,
    log_det_q: f64,
    f: Vec<Vec<f64>>,
    qf: Vec<Vec<f64>>,
    quad: Vec<f64>,

    tilings: Vec<Vec<Vec<usize>>>,
    /// `[field][tiling][block]` lower Cholesky factor of the block precision.
    precond: Vec<Vec<Vec<DMatrix<f64>>>>,
    scratch: Vec<f64>,
    slot: Vec<usize>,

    beta_adapt: Adapt,
    beta_shape: Shape,
    theta_adapt: Adapt,
    theta_nc_adapt: Adapt,
    theta_shape: Shape,
    stiff: StiffnessOperator,
    tile_adapt: Vec<Option<Adapt>>,
    /// Indexed `c + j·p`.
    ridge_adapt: Vec<Option<Adapt>>,
}

impl<'a> Sampler<'a> {
    pub fn new(
        ctx: &'a ModelContext,
        cfg: &'a McmcConfig,
        fields: Vec<FieldSpec>,
        surface_specs: Vec<SurfaceSpec>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = ctx.n();
        let p = ctx.p();

        let theta = [0.0, 0.0];
        let hyper = ctx.prior.hyper(theta);
        let q = ctx.fem.precision_matrix(hyper.kappa2)?;
        let log_det_q = ctx.log_det_q(hyper.kappa2).map_err(|e| Error::Init(e.to_string()))?;
        let f: Vec<Vec<f64>> = fields.iter().map(|s| s.frozen.clone().unwrap_or_else(|| vec![0.0; n])).collect();
        let mut qf = vec![vec![0.0; n]; fields.len()];
        for (j, fj) in f.iter().enumerate() {
            spmv(&q, fj, &mut qf[j]);
        }
        let quad = f.iter().zip(&qf).map(|(a, b)| dot(a, b)).collect();

        let mut surfaces = Vec::new();
        let mut total_points = 0usize;
        if !cfg.prior_only {
            for spec in surface_specs {
                let d = &spec.design;
                let mut xsum = vec![0.0; p];
                let mut counts = vec![0.0; n];
                for k in 0..d.len() {
                    if Some(k) == spec.held_out {
                        continue;
                    }
                    for (j, x) in xsum.iter_mut().enumerate() {
                        *x += d.x[k * p + j];
                    }
                    for (i, wgt) in d.basis[k].nonzeros() {
                        counts[i] += wgt;
                    }
                }
                total_points += d.len();
                let mut contains = vec![false; fields.len()];
                for &j in &spec.fields {
                    contains[j] = true;
                }
                let count_x = (0..p).map(|c| (0..n).map(|i| counts[i] * ctx.nodes.x[i * p + c]).sum()).collect();
                surfaces.push(Surface {
                    contains,
                    xsum,
                    counts,
                    count_x,
                    held_out: spec.held_out.is_some(),
                    eta: vec![0.0; n],
                    lam: vec![0.0; n],
                    integral: 0.0,
                });
            }
        }

        let tilings = build_tilings(ctx, cfg.block_size);
        let beta_target = if p == 1 { 0.44 } else { 0.234 };
        let mut tile_adapt = Vec::new();
        let mut ridge_adapt = Vec::new();
        for s in &fields {
            if s.sampled() {
                tile_adapt.push(Some(Adapt::new(format!("tiles:{}", s.name), 1.0, 0.234)));
                for c in 0..p {
                    ridge_adapt.push(Some(Adapt::new(format!("ridge:{}:beta_{c}", s.name), 0.1, 0.44)));
                }
            } else {
                tile_adapt.push(None);
                ridge_adapt.extend((0..p).map(|_| None));
            }
        }

        let mut me = Self {
            ctx,
            cfg,
            surfaces,
            rng: ChaCha8Rng::seed_from_u64(seed),
            n,
            p,
            beta: vec![0.0; p],
            theta,
            hyper,
            q,
            q_x: vec![vec![0.0; n]; p],
            xqx: vec![0.0; p],
            log_det_q,
            f,
            qf,
            quad,
            precond: vec![Vec::new(); fields.len()],
            fields,
            tilings,
            scratch: vec![0.0; n],
            slot: vec![usize::MAX; n],
            beta_adapt: Adapt::new("beta".into(), 2.38 / (p as f64).sqrt(), beta_target),
            beta_shape: Shape::new(p, 1.0 / (total_points as f64 + 1.0)),
            theta_adapt: Adapt::new("theta".into(), 2.38 / 2f64.sqrt(), 0.234),
            theta_nc_adapt: Adapt::new("theta:whitened".into(), 2.38 / 2f64.sqrt(), 0.234),
            theta_shape: Shape::new(2, 0.05),
            stiff: StiffnessOperator::new(&ctx.fem.c_diag, &ctx.fem.g),
            tile_adapt,
            ridge_adapt,
        };
        me.update_q_x();
        for s in 0..me.surfaces.len() {
            me.recompute_surface(s);
        }
        let lp = me.log_posterior();
        if !lp.is_finite() {
            return Err(Error::Init(format!("log posterior at the initial state is {lp}")));
        }
        Ok(me)
    }

    fn field_var(&self, j: usize, hyper: &Hyperparams) -> f64 {
        match self.fields[j].var {
            FieldVar::Xi2 => hyper.xi2,
            FieldVar::Fixed(v) => v,
        }
    }

    fn has_prior(&self, j: usize) -> bool {
        !self.fields[j].pinned()
    }

    fn recompute_surface(&mut self, s: usize) {
        let nodes = &self.ctx.nodes;
        let surf = &mut self.surfaces[s];
        let mut total = 0.0;
        for i in 0..self.n {
            let mut eta = nodes.fixed(i, &self.beta);
            for (j, fj) in self.f.iter().enumerate() {
                if surf.contains[j] {
                    eta += fj[i];
                }
            }
            surf.eta[i] = eta;
            surf.lam[i] = (nodes.log_alpha[i] + eta).exp();
            total += surf.lam[i];
        }
        surf.integral = total;
    }

    fn field_prior(&self, var: f64, log_det_q: f64, quad: f64) -> f64 {
        -0.5 * self.n as f64 * (2.0 * PI * var).ln() + 0.5 * log_det_q - quad / (2.0 * var)
    }

    /// Unnormalised log posterior of the current state.
    fn log_posterior(&self) -> f64 {
        let prior = &self.ctx.prior;
        let mut lp = prior.log_prior_beta(&self.beta);
        lp += prior.log_prior_theta(self.theta[0], self.theta[1]).unwrap_or(f64::NAN);
        for j in 0..self.fields.len() {
            if self.has_prior(j) {
                lp += self.field_prior(self.field_var(j, &self.hyper), self.log_det_q, self.quad[j]);
            }
        }
        for s in &self.surfaces {
            let mut ll = -s.integral + dot(&s.xsum, &self.beta);
            for (j, fj) in self.f.iter().enumerate() {
                if s.contains[j] {
                    ll += dot(&s.counts, fj);
                }
            }
            if s.held_out {
                ll += s.integral.ln();
            }
            lp += ll;
        }
        lp
    }

    fn accept(&mut self, log_ratio: f64) -> bool {
        log_ratio.is_finite() && (log_ratio >= 0.0 || self.rng.gen::<f64>().ln() < log_ratio)
    }

    fn step_beta(&mut self, post: bool) -> Result<()> {
        let delta = self.beta_shape.propose(&mut self.rng, self.beta_adapt.scale());
        let new_beta: Vec<f64> = self.beta.iter().zip(&delta).map(|(b, d)| b + d).collect();
        let v = self.ctx.prior.beta_var;
        let mut lr = (dot(&self.beta, &self.beta) - dot(&new_beta, &new_beta)) / (2.0 * v);
        let nodes = &self.ctx.nodes;
        let mut new_eta = Vec::with_capacity(self.surfaces.len());
        let mut new_lam = Vec::with_capacity(self.surfaces.len());
        let mut new_int = Vec::with_capacity(self.surfaces.len());
        for s in &self.surfaces {
            let mut eta = s.eta.clone();
            let mut lam = vec![0.0; self.n];
            let mut total = 0.0;
            for i in 0..self.n {
                let row = &nodes.x[i * self.p..(i + 1) * self.p];
                eta[i] += dot(row, &delta);
                lam[i] = (nodes.log_alpha[i] + eta[i]).exp();
                total += lam[i];
            }
            lr += s.ll_delta(dot(&s.xsum, &delta), total);
            new_eta.push(eta);
            new_lam.push(lam);
            new_int.push(total);
        }
        let ok = self.accept(lr);
        if ok {
            self.beta = new_beta;
            for (s, ((eta, lam), int)) in self.surfaces.iter_mut().zip(new_eta.into_iter().zip(new_lam).zip(new_int)) {
                s.eta = eta;
                s.lam = lam;
                s.integral = int;
            }
        }
        self.beta_adapt.record(ok, post)
    }

    /// β_c += δ together with F_j −= δ·x̃_c at the nodes, which leaves
    /// every surface containing F_j unchanged at the nodes.
    fn step_ridge(&mut self, j: usize, c: usize, post: bool) -> Result<()> {
        let a = c + j * self.p;
        let d: f64 = self.rng.sample::<f64, _>(StandardNormal) * self.ridge_adapt[a].as_ref().expect("sampled").scale();
        let v = self.ctx.prior.beta_var;
        let b = self.beta[c];
        let mut lr = (b * b - (b + d) * (b + d)) / (2.0 * v);
        let var = self.field_var(j, &self.hyper);
        let xqf = dot(&self.q_x[c], &self.f[j]);
        let new_quad = self.quad[j] - 2.0 * d * xqf + d * d * self.xqx[c];
        lr += (self.quad[j] - new_quad) / (2.0 * var);
        let nodes = &self.ctx.nodes;
        let p = self.p;
        let mut new_int = vec![0.0; self.surfaces.len()];
        for (si, s) in self.surfaces.iter().enumerate() {
            if s.contains[j] {
                lr += d * (s.xsum[c] - s.count_x[c]);
            } else {
                let total: f64 = (0..self.n).map(|i| s.lam[i] * (d * nodes.x[i * p + c]).exp()).sum();
                new_int[si] = total;
                lr += s.ll_delta(d * s.xsum[c], total);
            }
        }
        let ok = self.accept(lr);
        if ok {
            self.beta[c] += d;
            for i in 0..self.n {
                self.f[j][i] -= d * nodes.x[i * p + c];
            }
            for (qf, qx) in self.qf[j].iter_mut().zip(&self.q_x[c]) {
                *qf -= d * qx;
            }
            self.quad[j] = new_quad;
            for (si, s) in self.surfaces.iter_mut().enumerate() {
                if !s.contains[j] {
                    for i in 0..self.n {
                        let dx = d * nodes.x[i * p + c];
                        s.eta[i] += dx;
                        s.lam[i] *= dx.exp();
                    }
                    s.integral = new_int[si];
                }
            }
        }
        self.ridge_adapt[a].as_mut().expect("sampled").record(ok, post)
    }

    fn update_q_x(&mut self) {
        let nodes = &self.ctx.nodes;
        for c in 0..self.p {
            let x: Vec<f64> = (0..self.n).map(|i| nodes.x[i * self.p + c]).collect();
            spmv(&self.q, &x, &mut self.q_x[c]);
            self.xqx[c] = dot(&x, &self.q_x[c]);
        }
    }

    fn step_tiles(&mut self, j: usize, post: bool) -> Result<()> {
        let t = self.rng.gen_range(0..self.tilings.len());
        let var = self.field_var(j, &self.hyper);
        for b in 0..self.tilings[t].len() {
            let scale = self.tile_adapt[j].as_ref().expect("sampled field").scale();
            let block = self.tilings[t][b].clone();
            let m = block.len();
            let z = DVector::from_fn(m, |_, _| self.rng.sample::<f64, _>(StandardNormal));
            let l = &self.precond[j][t][b];
            let delta = l.tr_solve_lower_triangular(&z).expect("factor has positive diagonal") * scale;

            // t = Q[:, B] δ
            let mut touched = Vec::with_capacity(m * 13);
            for (a, &i) in block.iter().enumerate() {
                let col = self.q.col(i);
                for (&r, &qv) in col.row_indices().iter().zip(col.values()) {
                    if self.slot[r] == usize::MAX {
                        touched.push(r);
                        self.slot[r] = 0;
                    }
                    self.scratch[r] += qv * delta[a];
                }
            }
            let mut cross = 0.0;
            let mut dqd = 0.0;
            for (a, &i) in block.iter().enumerate() {
                cross += delta[a] * self.qf[j][i];
                dqd += delta[a] * self.scratch[i];
            }
            let mut lr = -(2.0 * cross + dqd) / (2.0 * var);

            let mut new_int = vec![0.0; self.surfaces.len()];
            for (si, s) in self.surfaces.iter().enumerate() {
                if !s.contains[j] {
                    continue;
                }
                let mut d_pts = 0.0;
                let mut d_int = 0.0;
                for (a, &i) in block.iter().enumerate() {
                    d_pts += s.counts[i] * delta[a];
                    d_int += s.lam[i] * delta[a].exp_m1();
                }
                new_int[si] = s.integral + d_int;
                lr += s.ll_delta(d_pts, new_int[si]);
            }

            let ok = self.accept(lr);
            if ok {
                for (a, &i) in block.iter().enumerate() {
                    self.f[j][i] += delta[a];
                }
                for &r in &touched {
                    self.qf[j][r] += self.scratch[r];
                }
                self.quad[j] += 2.0 * cross + dqd;
                for (si, s) in self.surfaces.iter_mut().enumerate() {
                    if !s.contains[j] {
                        continue;
                    }
                    for (a, &i) in block.iter().enumerate() {
                        s.eta[i] += delta[a];
                        s.lam[i] *= delta[a].exp();
                    }
                    s.integral = new_int[si];
                }
            }
            for &r in &touched {
                self.scratch[r] = 0.0;
                self.slot[r] = usize::MAX;
            }
            self.tile_adapt[j].as_mut().expect("sampled field").record(ok, post)?;
        }
        Ok(())
    }

    fn step_theta(&mut self, post: bool) -> Result<()> {
        let d = self.theta_shape.propose(&mut self.rng, self.theta_adapt.scale());
        let theta = [self.theta[0] + d[0], self.theta[1] + d[1]];
        let hyper = self.ctx.prior.hyper(theta);
        let prior = &self.ctx.prior;
        let mut lr = prior.log_prior_theta(theta[0], theta[1])? - prior.log_prior_theta(self.theta[0], self.theta[1])?;
        let proposal = if hyper.kappa2.is_finite() && hyper.kappa2 > 0.0 && hyper.xi2.is_finite() && hyper.xi2 > 0.0 {
            match (self.ctx.fem.precision_matrix(hyper.kappa2), self.ctx.log_det_q(hyper.kappa2)) {
                (Ok(q), Ok(ld)) if ld.is_finite() => Some((q, ld)),
                _ => None,
            }
        } else {
            None
        };
        let ok = if let Some((q, log_det)) = proposal {
            let mut new_qf = vec![vec![0.0; 0]; self.fields.len()];
            let mut new_quad = vec![0.0; self.fields.len()];
            for j in 0..self.fields.len() {
                if !self.has_prior(j) {
                    continue;
                }
                let mut qf = vec![0.0; self.n];
                spmv(&q, &self.f[j], &mut qf);
                new_quad[j] = dot(&qf, &self.f[j]);
                lr += self.field_prior(self.field_var(j, &hyper), log_det, new_quad[j])
                    - self.field_prior(self.field_var(j, &self.hyper), self.log_det_q, self.quad[j]);
                new_qf[j] = qf;
            }
            let ok = self.accept(lr);
            if ok {
                for j in 0..self.fields.len() {
                    if self.has_prior(j) {
                        self.qf[j] = std::mem::take(&mut new_qf[j]);
                        self.quad[j] = new_quad[j];
                    }
                }
                self.q = q;
                self.update_q_x();
                self.log_det_q = log_det;
                self.theta = theta;
                self.hyper = hyper;
            }
            ok
        } else {
            false
        };
        self.theta_adapt.record(ok, post)
    }

    /// θ move that carries the sampled fields along in whitened coordinates,
    /// `F' = √(v'/v) L'⁻¹ L F`; their prior ratio and Jacobian cancel.
    fn step_theta_whitened(&mut self, post: bool) -> Result<()> {
        let d = self.theta_shape.propose(&mut self.rng, self.theta_nc_adapt.scale());
        let theta = [self.theta[0] + d[0], self.theta[1] + d[1]];
        let hyper = self.ctx.prior.hyper(theta);
        let ok = match self.propose_whitened(theta, hyper)? {
            Some((lr, q, log_det, f, qf, quad, surf)) => {
                let ok = self.accept(lr);
                if ok {
                    self.f = f;
                    self.qf = qf;
                    self.quad = quad;
                    for (s, (eta, lam, int)) in self.surfaces.iter_mut().zip(surf) {
                        s.eta = eta;
                        s.lam = lam;
                        s.integral = int;
                    }
                    self.q = q;
                    self.update_q_x();
                    self.log_det_q = log_det;
                    self.theta = theta;
                    self.hyper = hyper;
                }
                ok
            }
            None => false,
        };
        self.theta_nc_adapt.record(ok, post)
    }

    #[allow(clippy::type_complexity)]
    fn propose_whitened(
        &mut self,
        theta: [f64; 2],
        hyper: Hyperparams,
    ) -> Result<Option<(f64, CscMatrix<f64>, f64, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>, Vec<(Vec<f64>, Vec<f64>, f64)>)>> {
        if !(hyper.kappa2.is_finite() && hyper.kappa2 > 0.0 && hyper.xi2.is_finite() && hyper.xi2 > 0.0) {
            return Ok(None);
        }
        let (q, log_det) = match (self.ctx.fem.precision_matrix(hyper.kappa2), self.ctx.log_det_q(hyper.kappa2)) {
            (Ok(q), Ok(ld)) if ld.is_finite() => (q, ld),
            _ => return Ok(None),
        };
        let prior = &self.ctx.prior;
        let mut lr = prior.log_prior_theta(theta[0], theta[1])? - prior.log_prior_theta(self.theta[0], self.theta[1])?;
        let n = self.n;
        let mut f = self.f.clone();
        let mut y = vec![0.0; n];
        for j in 0..self.fields.len() {
            if !self.fields[j].sampled() {
                continue;
            }
            let s = (self.field_var(j, &hyper) / self.field_var(j, &self.hyper)).sqrt();
            self.stiff.apply(self.hyper.kappa2, &self.f[j], &mut y);
            match self.stiff.solve(hyper.kappa2, &y) {
                Ok(x) => f[j] = x.into_iter().map(|v| v * s).collect(),
                Err(_) => return Ok(None),
            }
        }
        let mut qf = self.qf.clone();
        let mut quad = self.quad.clone();
        for j in 0..self.fields.len() {
            if !self.has_prior(j) {
                continue;
            }
            spmv(&q, &f[j], &mut qf[j]);
            quad[j] = dot(&qf[j], &f[j]);
            if !self.fields[j].sampled() {
                lr += self.field_prior(self.field_var(j, &hyper), log_det, quad[j])
                    - self.field_prior(self.field_var(j, &self.hyper), self.log_det_q, self.quad[j]);
            }
        }
        let nodes = &self.ctx.nodes;
        let mut surf = Vec::with_capacity(self.surfaces.len());
        for s in &self.surfaces {
            let mut eta = vec![0.0; n];
            let mut lam = vec![0.0; n];
            let mut total = 0.0;
            let mut d_pts = 0.0;
            for i in 0..n {
                let mut e = nodes.fixed(i, &self.beta);
                for j in 0..f.len() {
                    if s.contains[j] {
                        e += f[j][i];
                        d_pts += s.counts[i] * (f[j][i] - self.f[j][i]);
                    }
                }
                eta[i] = e;
                lam[i] = (nodes.log_alpha[i] + e).exp();
                total += lam[i];
            }
            lr += s.ll_delta(d_pts, total);
            surf.push((eta, lam, total));
        }
        Ok(Some((lr, q, log_det, f, qf, quad, surf)))
    }

    /// Factorise `Q_BB / var + diag(Σ_s λ̃_s)` for every block of every
    /// tiling, using the current state as the expansion point.
    fn refresh_preconditioners(&mut self) {
        for j in 0..self.fields.len() {
            if !self.fields[j].sampled() {
                continue;
            }
            let var = self.field_var(j, &self.hyper);
            let mut curv = vec![0.0; self.n];
            for s in &self.surfaces {
                if s.contains[j] {
                    for (c, l) in curv.iter_mut().zip(&s.lam) {
                        *c += l;
                    }
                }
            }
            let mut per_tiling = Vec::with_capacity(self.tilings.len());
            for tiling in &self.tilings {
                let mut per_block = Vec::with_capacity(tiling.len());
                for block in tiling {
                    for (a, &i) in block.iter().enumerate() {
                        self.slot[i] = a;
                    }
                    let m = block.len();
                    let mut h = DMatrix::zeros(m, m);
                    for (a, &i) in block.iter().enumerate() {
                        let col = self.q.col(i);
                        for (&r, &qv) in col.row_indices().iter().zip(col.values()) {
                            let b = self.slot[r];
                            if b != usize::MAX {
                                h[(b, a)] += qv / var;
                            }
                        }
                        h[(a, a)] += curv[i];
                    }
                    for &i in block {
                        self.slot[i] = usize::MAX;
                    }
                    let l = match h.clone().cholesky() {
                        Some(c) => c.l(),
                        None => DMatrix::from_diagonal(&h.diagonal().map(|d: f64| d.abs().max(1e-12).sqrt())),
                    };
                    per_block.push(l);
                }
                per_tiling.push(per_block);
            }
            self.precond[j] = per_tiling;
        }
    }

    fn adapts(&self) -> Vec<&Adapt> {
        let mut out = vec![&self.beta_adapt];
        for j in 0..self.fields.len() {
            for c in 0..self.p {
                if let Some(a) = &self.ridge_adapt[c + j * self.p] {
                    out.push(a);
                }
            }
            if let Some(a) = &self.tile_adapt[j] {
                out.push(a);
            }
        }
        out.push(&self.theta_adapt);
        out.push(&self.theta_nc_adapt);
        out
    }

    fn end_batch(&mut self) {
        self.beta_adapt.end_batch();
        self.theta_adapt.end_batch();
        self.theta_nc_adapt.end_batch();
        for a in self.tile_adapt.iter_mut().chain(self.ridge_adapt.iter_mut()).flatten() {
            a.end_batch();
        }
    }

    fn scales(&self) -> Vec<f64> {
        self.adapts().iter().map(|a| a.scale()).collect()
    }

    fn snapshot(&self) -> ChainSample {
        ChainSample {
            beta: self.beta.clone(),
            theta: self.theta,
            fields: self.f.iter().map(|f| f.iter().map(|&v| v as f32).collect()).collect(),
        }
    }

    pub fn run(mut self, mut meta: ChainMeta) -> Result<PosteriorChain> {
        let cfg = self.cfg;
        let mut samples = Vec::with_capacity(cfg.stored_samples());
        let mut scales_at_burn_in = if cfg.burn_in == 0 { Some(self.scales()) } else { None };
        let mut next_refresh = 0usize;
        for it in 0..cfg.iterations {
            let post = it >= cfg.burn_in;
            if !post && it == next_refresh {
                self.refresh_preconditioners();
                self.beta_shape.refresh();
                self.theta_shape.refresh();
                next_refresh = if it == 0 { cfg.adapt_batch } else { 2 * it };
            }
            self.step_beta(post)?;
            for j in 0..self.fields.len() {
                if self.fields[j].sampled() {
                    for c in 0..self.p {
                        self.step_ridge(j, c, post)?;
                    }
                    self.step_tiles(j, post)?;
                }
            }
            self.step_theta(post)?;
            self.step_theta_whitened(post)?;
            for s in self.surfaces.iter_mut() {
                s.integral = s.lam.iter().sum();
            }
            if !post {
                self.beta_shape.push(&self.beta.clone());
                self.theta_shape.push(&self.theta);
                if (it + 1) % cfg.adapt_batch == 0 {
                    self.end_batch();
                }
                if it + 1 == cfg.burn_in {
                    scales_at_burn_in = Some(self.scales());
                }
            } else if (it - cfg.burn_in + 1) % cfg.thin == 0 {
                samples.push(self.snapshot());
            }
        }

        let adapts = self.adapts();
        meta.field_names = self.fields.iter().map(|f| f.name.clone()).collect();
        meta.block_names = adapts.iter().map(|a| a.name.clone()).collect();
        meta.acceptance_rates = adapts.iter().map(|a| a.rate()).collect();
        meta.final_scales = self.scales();
        meta.scales_at_burn_in = scales_at_burn_in.unwrap_or_else(|| self.scales());
        meta.warnings = adapts
            .iter()
            .filter(|a| !(0.05..=0.95).contains(&a.rate()))
            .map(|a| format!("block `{}` acceptance rate {:.3} outside [0.05, 0.95]", a.name, a.rate()))
            .collect();
        Ok(PosteriorChain { meta, samples })
    }
}

/// Square tiles of about `block_size` vertices, in four tilings offset by
/// half a tile in x, y and both.
fn build_tilings(ctx: &ModelContext, block_size: usize) -> Vec<Vec<Vec<usize>>> {
    let mesh = &ctx.mesh;
    let side = ((block_size as f64).sqrt().round().max(1.0)) * mesh.spacing;
    let ext = mesh.extent();
    let offsets = [(0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5)];
    offsets[..TILINGS]
        .iter()
        .map(|&(ox, oy)| {
            let mut tiles: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
            for (i, v) in mesh.vertices.iter().enumerate() {
                // half-spacing nudge keeps grid vertices off tile edges
                let tx = ((v.x - ext.xmin + 0.5 * mesh.spacing) / side + ox).floor() as i64;
                let ty = ((v.y - ext.ymin + 0.5 * mesh.spacing) / side + oy).floor() as i64;
                tiles.entry((ty, tx)).or_default().push(i);
            }
            tiles.into_values().collect()
        })
        .collect()
}

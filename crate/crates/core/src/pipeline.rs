//! Workflow orchestration: fit the confidential pattern, synthesise each grid
//! row, score risk and utility, and release a row that clears both ceilings.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::data_io::{
    distance_covariate, load_points, parse_points_csv, parse_weighted_csv, population_kde,
    save_release, PointFormat, PointPattern, RasterSpec, ReleaseManifest, ScalarField, WeightedPoint,
};
use crate::error::{Error, Result};
use crate::geom::{Point, Rect};
use crate::mcmc::{
    export_csv, fit_lgcp, joint_fit_ans, joint_fit_prs, posterior_means, read_chain, write_chain, JointChain,
    McmcConfig, PosteriorChain, PosteriorMeans,
};
use crate::mesh::build_mesh;
use crate::model::{CovariateSet, ModelContext, PriorConfig};
use crate::risk::{max_disclosure_risk, RiskConfig, RiskInput, RiskReport};
use crate::snow;
use crate::synthesis::{ans_intensity, prs_intensity, radial_synthesize, sample_pattern, Mechanism, SynthesisSpec};
use crate::utility::{pmse, UtilityReport};

const TOY_POINTS_CSV: &str = include_str!("../data/toy/points.csv");

/// Recorded in every output that carries derived seeds.
pub const SEED_SCHEME: &str = "u64 from the first 8 bytes (LE) of sha256(master seed LE || step label)";

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Shipped data by name, or a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Builtin(String),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CovariateConfig {
    /// Standardised distance to `anchor`.
    Distance { name: String, anchor: Point },
    /// ESRI ASCII grid.
    Raster {
        name: String,
        path: PathBuf,
        #[serde(default)]
        standardize: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OffsetConfig {
    #[default]
    None,
    Constant { log_pd: f64 },
    /// ESRI ASCII grid of population density (persons / m²).
    Raster { path: PathBuf },
    /// Weighted population points (`x,y,weight`) smoothed onto the raster.
    Kde { population: DataSource, bandwidth: f64, total_population: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub points: DataSource,
    pub domain: Rect,
    #[serde(default)]
    pub covariates: Vec<CovariateConfig>,
    #[serde(default)]
    pub offset: OffsetConfig,
    /// Raster cell in meters; defaults to the mesh knot spacing.
    #[serde(default)]
    pub raster_cell: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshConfig {
    pub spacing: f64,
    #[serde(default)]
    pub extension: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub max_risk_ceiling: f64,
    pub pmse_ceiling: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct UtilityConfig {
    pub max_samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub mesh: MeshConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub mcmc: McmcConfig,
    /// Chains for joint and synthetic-only fits; `mcmc` when absent.
    #[serde(default)]
    pub scoring_mcmc: Option<McmcConfig>,
    pub synthesis: Vec<SynthesisSpec>,
    #[serde(default)]
    pub risk: RiskConfig,
    #[serde(default)]
    pub utility: UtilityConfig,
    pub thresholds: Thresholds,
    #[serde(default)]
    pub seed: u64,
}

impl PipelineConfig {
    /// Read a JSON config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_src = |s: &mut DataSource| {
            if let DataSource::Path(p) = s {
                fix(p);
            }
        };
        fix_src(&mut self.data.points);
        for c in &mut self.data.covariates {
            if let CovariateConfig::Raster { path, .. } = c {
                fix(path);
            }
        }
        match &mut self.data.offset {
            OffsetConfig::Raster { path } => fix(path),
            OffsetConfig::Kde { population, .. } => fix_src(population),
            _ => {}
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "snow" => Self::snow(),
            _ => Err(Error::Config(format!("unknown preset `{name}` (toy, snow)"))),
        }
    }

    /// 3×3-vertex mesh and 50 shipped points.
    pub fn toy() -> Self {
        let domain = Rect::square(0.0, 200.0);
        Self {
            data: DataConfig {
                points: DataSource::Builtin("toy".into()),
                domain,
                covariates: vec![CovariateConfig::Distance { name: "dist".into(), anchor: Point::new(50.0, 60.0) }],
                offset: OffsetConfig::Constant { log_pd: (50.0f64 / domain.area()).ln() },
                raster_cell: None,
            },
            mesh: MeshConfig { spacing: 100.0, extension: 0.0 },
            prior: PriorConfig { length_unit: 100.0, ..PriorConfig::default() },
            mcmc: McmcConfig { iterations: 20_000, burn_in: 10_000, thin: 20, ..McmcConfig::default() },
            scoring_mcmc: None,
            synthesis: vec![
                SynthesisSpec::new(Mechanism::Radial { r: 20.0 }),
                SynthesisSpec::new(Mechanism::Ans { sigma2: 1.0 }),
                SynthesisSpec::new(Mechanism::Prs),
            ],
            risk: RiskConfig { radius: 20.0, m_quad: 400, m_norm: 4, max_samples: Some(200) },
            utility: UtilityConfig { max_samples: Some(200) },
            thresholds: Thresholds { max_risk_ceiling: 0.5, pmse_ceiling: 0.05 },
            seed: 1,
        }
    }

    /// Soho cholera deaths: distance to the Broad St pump as covariate and a
    /// street-density population offset. 250,000 burn-in iterations then
    /// 250,000 more thinned to 500 stored draws.
    pub fn snow() -> Result<Self> {
        let mut synthesis: Vec<SynthesisSpec> =
            (1..=6).map(|k| SynthesisSpec::new(Mechanism::Radial { r: 50.0 * k as f64 })).collect();
        synthesis.extend((1..=20).map(|k| SynthesisSpec::new(Mechanism::Ans { sigma2: 0.5 * k as f64 })));
        synthesis.extend((0..15).map(|_| SynthesisSpec::new(Mechanism::Prs)));
        Ok(Self {
            data: DataConfig {
                points: DataSource::Builtin("snow".into()),
                domain: snow::domain(),
                covariates: vec![CovariateConfig::Distance { name: "broad_st".into(), anchor: snow::broad_st_pump()? }],
                offset: OffsetConfig::Kde {
                    population: DataSource::Builtin("snow".into()),
                    bandwidth: 100.0,
                    total_population: snow::TOTAL_POPULATION,
                },
                raster_cell: None,
            },
            mesh: MeshConfig { spacing: 100.0, extension: 200.0 },
            prior: PriorConfig { length_unit: 100.0, ..PriorConfig::default() },
            mcmc: McmcConfig { iterations: 500_000, burn_in: 250_000, thin: 500, ..McmcConfig::default() },
            scoring_mcmc: Some(McmcConfig { iterations: 100_000, burn_in: 50_000, thin: 100, ..McmcConfig::default() }),
            synthesis,
            risk: RiskConfig { radius: 50.0, m_quad: 400, m_norm: 2, max_samples: Some(500) },
            utility: UtilityConfig { max_samples: Some(500) },
            thresholds: Thresholds { max_risk_ceiling: 1e-3, pmse_ceiling: 0.01 },
            seed: 1854,
        })
    }

    pub fn scoring(&self) -> &McmcConfig {
        self.scoring_mcmc.as_ref().unwrap_or(&self.mcmc)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.thresholds;
        if !(t.max_risk_ceiling > 0.0 && t.pmse_ceiling > 0.0) {
            return Err(Error::Config("release ceilings must be positive".into()));
        }
        if self.synthesis.is_empty() {
            return Err(Error::Config("synthesis grid is empty".into()));
        }
        for s in &self.synthesis {
            s.validate()?;
        }
        if !(self.mesh.spacing > 0.0) {
            return Err(Error::Config("mesh spacing must be positive".into()));
        }
        if let Some(c) = self.data.raster_cell {
            if !(c > 0.0) {
                return Err(Error::Config("raster cell must be positive".into()));
            }
        }
        self.prior.validate()?;
        self.mcmc.validate()?;
        self.scoring().validate()?;
        self.risk.validate()
    }
}

fn builtin_points(name: &str, domain: Rect) -> Result<PointPattern> {
    let (points, label) = match name {
        "snow" => (snow::deaths()?.points, "snow-deaths"),
        "toy" => (parse_points_csv(TOY_POINTS_CSV.as_bytes())?, "toy"),
        _ => return Err(Error::Config(format!("unknown builtin point set `{name}` (snow, toy)"))),
    };
    PointPattern::new(points, domain, label)
}

fn population(src: &DataSource) -> Result<Vec<WeightedPoint>> {
    match src {
        DataSource::Builtin(n) if n == "snow" => snow::population_points(),
        DataSource::Builtin(n) => Err(Error::Config(format!("unknown builtin population `{n}` (snow)"))),
        DataSource::Path(p) => parse_weighted_csv(fs::File::open(p)?),
    }
}

fn read_raster(path: &Path, need: Rect) -> Result<ScalarField> {
    let f = ScalarField::from_ascii_grid(&fs::read_to_string(path)?)?;
    let e = f.spec.extent();
    if e.xmin > need.xmin || e.ymin > need.ymin || e.xmax < need.xmax || e.ymax < need.ymax {
        return Err(Error::Config(format!("raster {} does not cover the mesh extent", path.display())));
    }
    Ok(f)
}

/// Mesh, covariate rasters and the confidential pattern.
pub fn build_context(cfg: &PipelineConfig) -> Result<(ModelContext, PointPattern)> {
    let d = &cfg.data;
    let mesh = build_mesh(d.domain, cfg.mesh.spacing, cfg.mesh.extension)?;
    let extent = mesh.extent();
    let spec = RasterSpec::knot_aligned(extent, d.raster_cell.unwrap_or(cfg.mesh.spacing));
    let mut names = Vec::new();
    let mut fields = Vec::new();
    for c in &d.covariates {
        match c {
            CovariateConfig::Distance { name, anchor } => {
                if !d.domain.contains(anchor) {
                    return Err(Error::Config(format!("anchor of `{name}` lies outside the domain")));
                }
                names.push(name.clone());
                fields.push(distance_covariate(*anchor, spec)?);
            }
            CovariateConfig::Raster { name, path, standardize } => {
                let f = read_raster(path, extent)?;
                names.push(name.clone());
                fields.push(if *standardize { f.standardized()? } else { f });
            }
        }
    }
    let log_pd = match &d.offset {
        OffsetConfig::None => None,
        OffsetConfig::Constant { log_pd } => Some(ScalarField::constant(spec, *log_pd)?),
        OffsetConfig::Raster { path } => Some(read_raster(path, extent)?.log_floored()),
        OffsetConfig::Kde { population: src, bandwidth, total_population } => {
            Some(population_kde(&population(src)?, *bandwidth, spec, *total_population)?.log_floored())
        }
    };
    let covs = Arc::new(CovariateSet::new(names, fields, log_pd)?);
    let ctx = ModelContext::new(mesh, covs, cfg.prior.clone())?;
    let pattern = match &d.points {
        DataSource::Builtin(n) => builtin_points(n, d.domain)?,
        DataSource::Path(p) => load_points(p, PointFormat::from_path(p), d.domain)?,
    };
    Ok((ctx, pattern))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    /// Mean and equal-tailed 95% interval.
    pub fn of(mut v: Vec<f64>) -> Self {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.sort_by(f64::total_cmp);
        let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
        Self { mean, lo: q(0.025), hi: q(0.975) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub seed: u64,
    pub chain_hash: String,
    pub samples: usize,
    pub covariates: Vec<String>,
    /// On the standardised covariate scale.
    pub beta: Vec<Interval>,
    /// Posterior-mean β in raw covariate units.
    pub beta_raw: Vec<f64>,
    pub rho: Interval,
    pub sigma2: Interval,
    pub blocks: Vec<String>,
    pub acceptance_rates: Vec<f64>,
    pub warnings: Vec<String>,
}

pub fn summarize_fit(ctx: &ModelContext, chain: &PosteriorChain) -> Result<FitSummary> {
    let means = posterior_means(chain)?;
    let p = ctx.p();
    let beta = (0..p).map(|j| Interval::of(chain.samples.iter().map(|s| s.beta[j]).collect())).collect();
    let hyper: Vec<_> = (0..chain.len()).map(|i| chain.hyper(i)).collect();
    Ok(FitSummary {
        seed: chain.meta.seed,
        chain_hash: chain.hash(),
        samples: chain.len(),
        covariates: ctx.covariates.names.clone(),
        beta,
        beta_raw: ctx.covariates.back_transform(&means.beta),
        rho: Interval::of(hyper.iter().map(|h| h.rho()).collect()),
        sigma2: Interval::of(hyper.iter().map(|h| h.sigma2()).collect()),
        blocks: chain.meta.block_names.clone(),
        acceptance_rates: chain.meta.acceptance_rates.clone(),
        warnings: chain.meta.warnings.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowSeeds {
    pub synth: u64,
    pub joint: u64,
    pub synthetic_fit: u64,
}

/// Everything one grid row produces.
pub struct RowResult {
    pub key: String,
    pub seeds: RowSeeds,
    pub synthetic: PointPattern,
    pub risk: RiskReport,
    pub joint: Option<JointChain>,
    pub utility: UtilityReport,
    pub synthetic_chain: PosteriorChain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub key: String,
    pub mechanism: String,
    pub parameter: Option<f64>,
    pub status: String,
    pub max_risk: Option<f64>,
    pub pmse: Option<f64>,
    pub seed: u64,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Row keys from mechanism, parameter and replicate number, so a row's
/// seeds do not depend on the other rows of the grid.
pub fn row_keys(grid: &[SynthesisSpec]) -> Vec<String> {
    let mut keys: Vec<String> = Vec::with_capacity(grid.len());
    for s in grid {
        let base = match s.mechanism.parameter() {
            Some(v) => format!("{}-{v}", s.mechanism.name()),
            None => s.mechanism.name().to_string(),
        };
        let rep = keys.iter().filter(|k| k.rsplit_once('-').is_some_and(|(b, _)| b == base)).count();
        keys.push(format!("{base}-{rep}"));
    }
    keys
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub ctx: ModelContext,
    pub pattern: PointPattern,
    keys: Vec<String>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let (ctx, pattern) = build_context(&config)?;
        let keys = row_keys(&config.synthesis);
        Ok(Self { config, ctx, pattern, keys })
    }

    pub fn seed(&self, label: &str) -> u64 {
        derive_seed(self.config.seed, label)
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn row_seeds(&self, i: usize) -> RowSeeds {
        let k = &self.keys[i];
        RowSeeds {
            synth: self.config.synthesis[i].seed.unwrap_or_else(|| self.seed(&format!("{k}/synth"))),
            joint: self.seed(&format!("{k}/joint")),
            synthetic_fit: self.seed(&format!("{k}/synthetic-fit")),
        }
    }

    pub fn fit(&self) -> Result<PosteriorChain> {
        fit_lgcp(&self.ctx, &self.pattern, &self.config.mcmc, self.seed("fit"))
    }

    /// Refuse a chain fit under a different configuration or master seed.
    pub fn check_chain(&self, chain: &PosteriorChain) -> Result<()> {
        chain.check_mesh(&self.ctx)?;
        let m = &chain.meta;
        if m.seed != self.seed("fit") || m.config != self.config.mcmc || m.prior != self.config.prior {
            return Err(Error::Config("stored chain was fit with a different seed or configuration; rerun `fit`".into()));
        }
        if m.data_hashes.first() != Some(&self.pattern.hash()) {
            return Err(Error::Config("stored chain was fit to different points; rerun `fit`".into()));
        }
        Ok(())
    }

    fn row(&self, i: usize) -> Result<&SynthesisSpec> {
        self.config.synthesis.get(i).ok_or_else(|| {
            Error::Config(format!("row {i} out of range (grid has {} rows)", self.config.synthesis.len()))
        })
    }

    pub fn synthesize(&self, i: usize, means: &PosteriorMeans) -> Result<PointPattern> {
        let spec = self.row(i)?;
        let seeds = self.row_seeds(i);
        let n = self.pattern.len();
        let domain = self.pattern.domain;
        let field = match spec.mechanism {
            Mechanism::Radial { r } => {
                let mut s = radial_synthesize(&self.pattern, r, seeds.synth)?;
                s.label = self.keys[i].clone();
                return Ok(s);
            }
            Mechanism::Ans { sigma2 } => ans_intensity(&self.ctx, means, sigma2, derive_seed(seeds.synth, "field"))?,
            Mechanism::Prs => prs_intensity(&self.ctx, means, derive_seed(seeds.synth, "field"))?,
        };
        let mut s = sample_pattern(
            &self.ctx,
            &field,
            n,
            spec.candidate_multiplier,
            domain,
            derive_seed(seeds.synth, "points"),
        )?;
        s.label = self.keys[i].clone();
        Ok(s)
    }

    pub fn score_risk(
        &self,
        i: usize,
        chain: &PosteriorChain,
        synthetic: &PointPattern,
    ) -> Result<(RiskReport, Option<JointChain>)> {
        let spec = self.row(i)?;
        let seeds = self.row_seeds(i);
        let cfg = self.config.scoring();
        let joint = match spec.mechanism {
            Mechanism::Radial { r } => {
                let input = RiskInput::Radial { chain, synthetic, r_synth: r };
                return Ok((max_disclosure_risk(&self.ctx, &self.pattern, input, &self.config.risk)?, None));
            }
            Mechanism::Ans { sigma2 } => joint_fit_ans(&self.ctx, &self.pattern, synthetic, sigma2, cfg, seeds.joint)?,
            Mechanism::Prs => joint_fit_prs(&self.ctx, &self.pattern, synthetic, cfg, seeds.joint)?,
        };
        let input = RiskInput::Joint { chain: &joint, mechanism: spec.mechanism };
        let report = max_disclosure_risk(&self.ctx, &self.pattern, input, &self.config.risk)?;
        Ok((report, Some(joint)))
    }

    pub fn score_utility(
        &self,
        i: usize,
        chain: &PosteriorChain,
        synthetic: &PointPattern,
    ) -> Result<(UtilityReport, PosteriorChain)> {
        let seeds = self.row_seeds(i);
        let fit = fit_lgcp(&self.ctx, synthetic, self.config.scoring(), seeds.synthetic_fit)?;
        let u = pmse(&self.ctx, chain, &fit, &self.pattern, synthetic, self.config.utility.max_samples)?;
        Ok((u, fit))
    }

    pub fn run_row(&self, i: usize, chain: &PosteriorChain, means: &PosteriorMeans) -> Result<RowResult> {
        let synthetic = self.synthesize(i, means)?;
        let (risk, joint) = self.score_risk(i, chain, &synthetic)?;
        let (utility, synthetic_chain) = self.score_utility(i, chain, &synthetic)?;
        Ok(RowResult {
            key: self.keys[i].clone(),
            seeds: self.row_seeds(i),
            synthetic,
            risk,
            joint,
            utility,
            synthetic_chain,
        })
    }

    fn sweep_row(&self, i: usize, r: &Result<RowResult>) -> SweepRow {
        let spec = &self.config.synthesis[i];
        let (status, max_risk, pmse, error) = match r {
            Ok(r) => ("ok", Some(r.risk.max_risk), Some(r.utility.pmse), None),
            Err(e) => ("failed", None, None, Some(e.to_string())),
        };
        SweepRow {
            key: self.keys[i].clone(),
            mechanism: spec.mechanism.name().into(),
            parameter: spec.mechanism.parameter(),
            status: status.into(),
            max_risk,
            pmse,
            seed: self.row_seeds(i).synth,
            error,
        }
    }

    /// Every grid row, rows in parallel. A failed row is marked and the
    /// sweep continues.
    pub fn sweep(&self, chain: &PosteriorChain) -> Result<Vec<(SweepRow, Result<RowResult>)>> {
        let means = posterior_means(chain)?;
        Ok((0..self.keys.len())
            .into_par_iter()
            .map(|i| {
                let r = self.run_row(i, chain, &means);
                (self.sweep_row(i, &r), r)
            })
            .collect())
    }

    fn seeds_json(&self, i: usize) -> serde_json::Value {
        let s = self.row_seeds(i);
        json!({
            "master": self.config.seed,
            "scheme": SEED_SCHEME,
            "fit": self.seed("fit"),
            "synth": s.synth,
            "joint": s.joint,
            "synthetic_fit": s.synthetic_fit,
        })
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn chain_path(out: &Path) -> PathBuf {
    out.join("fit").join("chain.bin")
}

fn row_dir(out: &Path, key: &str) -> PathBuf {
    out.join("rows").join(key)
}

/// Writes the mesh and the rasters sampled at its vertices.
pub fn cmd_mesh(p: &Pipeline, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    p.ctx.mesh.save(&out.join("mesh.json"))?;
    let dir = out.join("rasters");
    ensure_dir(&dir)?;
    let c = &p.ctx.covariates;
    for (name, f) in c.names.iter().zip(&c.fields) {
        fs::write(dir.join(format!("{name}.asc")), f.to_ascii_grid())?;
    }
    if let Some(f) = &c.log_pd {
        fs::write(dir.join("log_pd.asc"), f.to_ascii_grid())?;
    }
    Ok(())
}

pub fn cmd_fit(p: &Pipeline, out: &Path) -> Result<FitSummary> {
    let chain = p.fit()?;
    let dir = out.join("fit");
    ensure_dir(&dir)?;
    write_chain(&chain, &chain_path(out))?;
    let summary = summarize_fit(&p.ctx, &chain)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn load_fit(p: &Pipeline, out: &Path) -> Result<PosteriorChain> {
    let path = chain_path(out);
    if !path.exists() {
        return Err(Error::Config(format!("no fitted chain at {}; run `fit` first", path.display())));
    }
    let chain = read_chain(&path)?;
    p.check_chain(&chain)?;
    Ok(chain)
}

fn select_rows(p: &Pipeline, rows: &[usize]) -> Result<Vec<usize>> {
    if rows.is_empty() {
        return Ok((0..p.keys().len()).collect());
    }
    for &i in rows {
        p.row(i)?;
    }
    Ok(rows.to_vec())
}

/// Synthetic pattern of each selected row (all rows when empty).
pub fn cmd_synth(p: &Pipeline, out: &Path, rows: &[usize]) -> Result<Vec<PathBuf>> {
    let chain = load_fit(p, out)?;
    let means = posterior_means(&chain)?;
    let mut written = Vec::new();
    for i in select_rows(p, rows)? {
        let s = p.synthesize(i, &means)?;
        let dir = row_dir(out, &p.keys()[i]);
        ensure_dir(&dir)?;
        let path = dir.join("synthetic.csv");
        s.write_csv(&path)?;
        written.push(path);
    }
    Ok(written)
}

fn write_risk(dir: &Path, r: &RiskReport) -> Result<()> {
    r.write_json(&dir.join("risk.json"))?;
    r.to_csv(fs::File::create(dir.join("risk.csv"))?)
}

fn write_utility(dir: &Path, u: &UtilityReport, n_conf: usize) -> Result<()> {
    write_json(&dir.join("utility.json"), u)?;
    u.per_point_csv(n_conf, fs::File::create(dir.join("phat.csv"))?)
}

pub fn cmd_risk(p: &Pipeline, out: &Path, rows: &[usize]) -> Result<Vec<RiskReport>> {
    let chain = load_fit(p, out)?;
    let means = posterior_means(&chain)?;
    let mut reports = Vec::new();
    for i in select_rows(p, rows)? {
        let s = p.synthesize(i, &means)?;
        let (r, joint) = p.score_risk(i, &chain, &s)?;
        let dir = row_dir(out, &p.keys()[i]);
        ensure_dir(&dir)?;
        s.write_csv(&dir.join("synthetic.csv"))?;
        write_risk(&dir, &r)?;
        if let Some(j) = joint {
            write_chain(j.chain(), &dir.join("joint.bin"))?;
        }
        reports.push(r);
    }
    Ok(reports)
}

pub fn cmd_utility(p: &Pipeline, out: &Path, rows: &[usize]) -> Result<Vec<UtilityReport>> {
    let chain = load_fit(p, out)?;
    let means = posterior_means(&chain)?;
    let mut reports = Vec::new();
    for i in select_rows(p, rows)? {
        let s = p.synthesize(i, &means)?;
        let (u, fit) = p.score_utility(i, &chain, &s)?;
        let dir = row_dir(out, &p.keys()[i]);
        ensure_dir(&dir)?;
        s.write_csv(&dir.join("synthetic.csv"))?;
        write_utility(&dir, &u, p.pattern.len())?;
        write_chain(&fit, &dir.join("synthetic_fit.bin"))?;
        reports.push(u);
    }
    Ok(reports)
}

#[derive(Serialize)]
struct PlotPoint<'a> {
    key: &'a str,
    parameter: Option<f64>,
    pmse: f64,
    max_risk: f64,
}

fn write_frontier(out: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join("frontier.csv"))?;
    w.write_record(["key", "mechanism", "parameter", "max_risk", "pmse", "seed", "status", "error"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.key.clone(),
            r.mechanism.clone(),
            opt(r.parameter),
            opt(r.max_risk),
            opt(r.pmse),
            r.seed.to_string(),
            r.status.clone(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    write_json(&out.join("rows.json"), &rows)?;

    let mut series: Vec<(String, Vec<PlotPoint>)> = Vec::new();
    for r in rows.iter().filter(|r| r.ok()) {
        let pt = PlotPoint {
            key: &r.key,
            parameter: r.parameter,
            pmse: r.pmse.unwrap_or(f64::NAN),
            max_risk: r.max_risk.unwrap_or(f64::NAN),
        };
        match series.iter_mut().find(|(m, _)| *m == r.mechanism) {
            Some((_, v)) => v.push(pt),
            None => series.push((r.mechanism.clone(), vec![pt])),
        }
    }
    let plot = json!({
        "schema": 1,
        "x": { "field": "pmse", "label": "pMSE" },
        "y": { "field": "max_risk", "label": "max disclosure risk", "scale": "log" },
        "series": series.iter().map(|(m, pts)| json!({ "mechanism": m, "points": pts })).collect::<Vec<_>>(),
    });
    write_json(&out.join("frontier.json"), &plot)
}

pub fn cmd_sweep(p: &Pipeline, out: &Path) -> Result<Vec<SweepRow>> {
    let chain = load_fit(p, out)?;
    let results = p.sweep(&chain)?;
    let mut rows = Vec::with_capacity(results.len());
    for (row, r) in results {
        let dir = row_dir(out, &row.key);
        ensure_dir(&dir)?;
        if let Ok(r) = r {
            r.synthetic.write_csv(&dir.join("synthetic.csv"))?;
            write_risk(&dir, &r.risk)?;
            write_utility(&dir, &r.utility, p.pattern.len())?;
            if let Some(j) = &r.joint {
                write_chain(j.chain(), &dir.join("joint.bin"))?;
            }
            write_chain(&r.synthetic_chain, &dir.join("synthetic_fit.bin"))?;
        }
        rows.push(row);
    }
    write_frontier(out, &rows)?;
    Ok(rows)
}

fn check_ceilings(t: &Thresholds, row: &SweepRow) -> Result<()> {
    let (risk, u) = match (row.max_risk, row.pmse) {
        (Some(r), Some(u)) if row.ok() => (r, u),
        _ => return Err(Error::Config(format!("row `{}` failed and cannot be released", row.key))),
    };
    if risk > t.max_risk_ceiling {
        return Err(Error::ReleaseRefused { metric: "max_risk".into(), value: risk, ceiling: t.max_risk_ceiling });
    }
    if u > t.pmse_ceiling {
        return Err(Error::ReleaseRefused { metric: "pmse".into(), value: u, ceiling: t.pmse_ceiling });
    }
    Ok(())
}

/// Best-utility row among those under both ceilings; when none qualifies,
/// the refusal names the metric the best-utility row violates.
pub fn choose_row(t: &Thresholds, rows: &[SweepRow]) -> Result<usize> {
    let by_pmse = |a: &usize, b: &usize| rows[*a].pmse.unwrap_or(f64::INFINITY).total_cmp(&rows[*b].pmse.unwrap_or(f64::INFINITY));
    let passing = (0..rows.len()).filter(|&i| check_ceilings(t, &rows[i]).is_ok()).min_by(by_pmse);
    if let Some(i) = passing {
        return Ok(i);
    }
    let best = (0..rows.len())
        .filter(|&i| rows[i].ok())
        .min_by(by_pmse)
        .ok_or_else(|| Error::Config("no sweep row succeeded".into()))?;
    check_ceilings(t, &rows[best]).map(|_| best)
}

/// Archive the chosen row (or the best-utility admissible one) after `sweep`.
pub fn cmd_release(p: &Pipeline, out: &Path, row: Option<usize>) -> Result<PathBuf> {
    let rows: Vec<SweepRow> = read_json(&out.join("rows.json"))
        .map_err(|_| Error::Config("no sweep results; run `sweep` first".into()))?;
    if rows.len() != p.keys().len() || rows.iter().zip(p.keys()).any(|(r, k)| &r.key != k) {
        return Err(Error::Config("sweep results do not match the configured grid; rerun `sweep`".into()));
    }
    let i = match row {
        Some(i) => {
            p.row(i)?;
            check_ceilings(&p.config.thresholds, &rows[i])?;
            i
        }
        None => choose_row(&p.config.thresholds, &rows)?,
    };
    let chain = load_fit(p, out)?;
    let key = &p.keys()[i];
    let dir = row_dir(out, key);
    let synthetic = load_points(&dir.join("synthetic.csv"), PointFormat::Csv, p.pattern.domain)?;
    let risk: RiskReport = read_json(&dir.join("risk.json"))?;
    let utility: UtilityReport = read_json(&dir.join("utility.json"))?;
    let spec = &p.config.synthesis[i];

    let mut chain_hashes = vec![chain.hash()];
    let joint = dir.join("joint.bin");
    if joint.exists() {
        chain_hashes.push(read_chain(&joint)?.hash());
    }
    chain_hashes.extend(utility.chain_hashes.iter().skip(1).cloned());
    let mut params = serde_json::to_value(spec.mechanism)?;
    if let serde_json::Value::Object(m) = &mut params {
        m.insert("candidate_multiplier".into(), json!(spec.candidate_multiplier));
        m.insert("length_unit".into(), json!(p.config.prior.length_unit));
        m.insert("prior".into(), serde_json::to_value(&p.config.prior)?);
        m.insert("mesh".into(), serde_json::to_value(p.config.mesh)?);
    }
    let manifest = ReleaseManifest {
        schema: 1,
        mechanism: spec.mechanism.name().into(),
        parameters: params,
        mesh_hash: p.ctx.mesh_hash().to_string(),
        seeds: p.seeds_json(i),
        chain_hashes,
        // per-location risks sit at confidential locations and stay private
        risk: Some(json!({
            "max_risk": risk.max_risk,
            "radius": risk.radius,
            "m_quad": risk.m_quad,
            "m_norm": risk.m_norm,
            "samples_used": risk.samples_used,
            "chain_hash": risk.chain_hash,
        })),
        utility: Some(json!({
            "pmse": utility.pmse,
            "samples_used": utility.samples_used,
            "chain_hashes": utility.chain_hashes,
        })),
        points_hash: String::new(),
        manifest_hash: String::new(),
    };
    let rel = out.join("release");
    ensure_dir(&rel)?;
    save_release(&manifest, &synthetic, &rel.join(format!("{key}.tar")))
}

/// Flat CSV of a stored chain.
pub fn cmd_chain_export(chain: &Path, out: &Path) -> Result<()> {
    let c = read_chain(chain)?;
    export_csv(&c, fs::File::create(out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_derivation_is_stable_and_label_sensitive() {
        let a = derive_seed(7, "fit");
        assert_eq!(a, derive_seed(7, "fit"));
        assert_ne!(a, derive_seed(7, "fit2"));
        assert_ne!(a, derive_seed(8, "fit"));
        let d = Sha256::digest([7u64.to_le_bytes().as_slice(), b"fit"].concat());
        assert_eq!(a, u64::from_le_bytes(d[..8].try_into().unwrap()));
    }

    #[test]
    fn keys_number_replicates() {
        let g = vec![
            SynthesisSpec::new(Mechanism::Prs),
            SynthesisSpec::new(Mechanism::Ans { sigma2: 0.5 }),
            SynthesisSpec::new(Mechanism::Prs),
            SynthesisSpec::new(Mechanism::Radial { r: 50.0 }),
        ];
        assert_eq!(row_keys(&g), ["prs-0", "ans-0.5-0", "prs-1", "radial-50-0"]);
    }

    #[test]
    fn empty_grid_is_config_error() {
        let mut c = PipelineConfig::toy();
        c.synthesis.clear();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn presets_validate() {
        PipelineConfig::toy().validate().unwrap();
        let s = PipelineConfig::snow().unwrap();
        s.validate().unwrap();
        assert_eq!(s.mcmc.burn_in, 250_000);
        assert_eq!(s.mcmc.iterations - s.mcmc.burn_in, 250_000);
        assert_eq!(s.synthesis.iter().filter(|x| x.mechanism == Mechanism::Prs).count(), 15);
    }

    #[test]
    fn config_json_round_trip_and_paths() {
        let mut c = PipelineConfig::toy();
        c.data.points = DataSource::Path("pts.csv".into());
        let text = serde_json::to_string(&c).unwrap();
        let mut back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        back.resolve_paths(Path::new("/data"));
        assert_eq!(back.data.points, DataSource::Path("/data/pts.csv".into()));
    }

    fn row(key: &str, risk: f64, u: f64) -> SweepRow {
        SweepRow {
            key: key.into(),
            mechanism: "prs".into(),
            parameter: None,
            status: "ok".into(),
            max_risk: Some(risk),
            pmse: Some(u),
            seed: 0,
            error: None,
        }
    }

    #[test]
    fn release_choice_and_refusal() {
        let t = Thresholds { max_risk_ceiling: 0.1, pmse_ceiling: 0.05 };
        let rows = vec![row("a", 0.5, 0.001), row("b", 0.01, 0.02), row("c", 0.01, 0.01)];
        assert_eq!(choose_row(&t, &rows).unwrap(), 2);
        match check_ceilings(&t, &rows[0]) {
            Err(Error::ReleaseRefused { metric, .. }) => assert_eq!(metric, "max_risk"),
            other => panic!("{other:?}"),
        }
        let rows = vec![row("a", 0.5, 0.001), row("b", 0.01, 0.2)];
        match choose_row(&t, &rows) {
            Err(e @ Error::ReleaseRefused { .. }) => assert_eq!(e.exit_code(), 4),
            other => panic!("{other:?}"),
        }
    }
}

//! Simulation, KL grids, sparsity scaling, likelihood evaluation, fitting and
//! the replicated estimation study.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde_json::json;
use thiserror::Error;

use vecchia::geom::{coord_order, coordinate_header, grid_locations, tiles, LocationSet};
use vecchia::inference::{
    self, assemble_u, exact_logdet_x, exact_logdet_z, exact_loglik, fcl_loglik, kl_joint_x_with,
    kl_observed_z_with, mle_fit, pbl_loglik, posterior_summary, rook_pairs, vecchia_loglik,
    FitOptions, FitResult, InferenceError, LoglikResult,
};
use vecchia::kernels::{var_cov, CovarianceModel, ModelConfig, Var};
use vecchia::plan::{Partition, VecchiaPlan};
use vecchia::sparsela::{dense_chol_capped, LinalgError};

use crate::config::{
    ConditioningKind, ConfigError, ExperimentConfig, FitSpec, GeometrySpec, KlMode, MethodSpec,
    OrderingKind,
};
use crate::output::{num, Table};
use crate::rng::{stream_rng, Purpose};

/// Largest field drawn by dense Cholesky.
pub const SIMULATION_CAP: usize = 10_000;

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("simulating {n} points exceeds the dense cap of {cap}; use a smaller grid")]
    SimulationTooLarge { n: usize, cap: usize },
    #[error("reading observations: {0}")]
    Data(String),
}

impl ExperimentError {
    /// Short failure code written to the `status` column.
    pub fn code(&self) -> &'static str {
        match self {
            ExperimentError::Config(_) => "config",
            ExperimentError::SimulationTooLarge { .. } => "too_large",
            ExperimentError::Data(_) => "data",
            ExperimentError::Inference(e) => match e {
                InferenceError::Linalg(LinalgError::TooLarge { .. })
                | InferenceError::TooLarge { .. } => "too_large",
                InferenceError::Linalg(LinalgError::NotPositiveDefinite { .. }) => "not_pd",
                InferenceError::Conditioning { .. } => "conditioning",
                InferenceError::Noiseless | InferenceError::NoiselessUnobserved => "noiseless",
                InferenceError::FitFailed { .. } => "fit_failed",
                InferenceError::Plan(_) => "plan",
                _ => "error",
            },
        }
    }
}

type Result<T> = std::result::Result<T, ExperimentError>;

/// Tables produced by a command plus JSON documents and the number of cells
/// that failed.
#[derive(Debug, Default)]
pub struct Outcome {
    pub tables: Vec<(String, Table)>,
    pub json: Vec<(String, serde_json::Value)>,
    pub failures: usize,
}

impl Outcome {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Adds wall-clock columns, which make output nondeterministic.
    pub timing: bool,
}

/// One draw of the latent field and its noisy observations, by location.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

/// `y = L u` with `L L' = K(S, S)` and `z = y + tau e`, where `u` then `e`
/// are standard normal draws from the replicate's stream.
pub fn simulate_draws(
    s: &LocationSet,
    model: &CovarianceModel,
    seed: u64,
    replicates: &[u64],
) -> Result<Vec<Draw>> {
    let n = s.len();
    if n > SIMULATION_CAP {
        return Err(ExperimentError::SimulationTooLarge {
            n,
            cap: SIMULATION_CAP,
        });
    }
    let vars: Vec<Var> = (0..n).map(|loc| Var { loc, observed: false }).collect();
    let k = var_cov(model, s, &vars, &vars);
    let l = dense_chol_capped(&k, SIMULATION_CAP).map_err(InferenceError::from)?;
    let tau = model.tau2().sqrt();
    Ok(replicates
        .par_iter()
        .map(|&r| {
            let mut rng = stream_rng(seed, Purpose::Field, r);
            let u: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y: Vec<f64> = (0..n)
                .map(|i| (0..=i).map(|j| l[(i, j)] * u[j]).sum())
                .collect();
            let z = y
                .iter()
                .map(|&yi| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    yi + tau * e
                })
                .collect();
            Draw { y, z }
        })
        .collect())
}

/// Mean and normal-approximation 95% interval.
pub fn mean_ci(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = Z95 * (var / n).sqrt();
    (mean, mean - half, mean + half)
}

fn model_of(cfg: &ModelConfig) -> Result<CovarianceModel> {
    Ok(cfg.resolve().map_err(ConfigError::from)?)
}

/// Observations by location for replicate `r`, with their locations.
fn dataset(cfg: &ExperimentConfig, model: &CovarianceModel, r: u64) -> Result<(LocationSet, Vec<f64>)> {
    if let Some(path) = &cfg.data {
        return read_observations(path);
    }
    let s = cfg.geometry.locations(cfg.seed, r)?;
    let draw = simulate_draws(&s, model, cfg.seed, &[r])?.pop().expect("one draw");
    Ok((s, draw.z))
}

fn datasets(cfg: &ExperimentConfig, model: &CovarianceModel) -> Result<Vec<(LocationSet, Vec<f64>)>> {
    let reps = if cfg.data.is_some() { 1 } else { cfg.replicates as u64 };
    if cfg.data.is_none() && cfg.geometry.is_fixed() {
        let s = cfg.geometry.locations(cfg.seed, 0)?;
        let ids: Vec<u64> = (0..reps).collect();
        let draws = simulate_draws(&s, model, cfg.seed, &ids)?;
        return Ok(draws.into_iter().map(|d| (s.clone(), d.z)).collect());
    }
    (0..reps).map(|r| dataset(cfg, model, r)).collect()
}

/// Reads `x1,...,xd,z`.
pub fn read_observations(path: &Path) -> Result<(LocationSet, Vec<f64>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| ExperimentError::Data(e.to_string()))?;
    let header = rdr
        .headers()
        .map_err(|e| ExperimentError::Data(e.to_string()))?
        .clone();
    let d = header.len().saturating_sub(1);
    let expected = format!("{},z", coordinate_header(d));
    let got: Vec<&str> = header.iter().collect();
    if d == 0 || got.join(",") != expected {
        return Err(ExperimentError::Data(format!("expected header {expected:?}")));
    }
    let mut coords = Vec::new();
    let mut z = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| ExperimentError::Data(e.to_string()))?;
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                ExperimentError::Data(format!("line {}: not a number: {field:?}", k + 2))
            })?;
            if c < d {
                coords.push(v);
            } else {
                z.push(v);
            }
        }
    }
    let s = LocationSet::from_flat(d, coords).map_err(|e| ExperimentError::Data(e.to_string()))?;
    Ok((s, z))
}

/// Observations in the plan's x-order; knot locations ahead of the data get
/// placeholder values that are never read.
pub fn plan_z(plan: &VecchiaPlan, z_by_location: &[f64]) -> Vec<f64> {
    let offset = plan.locations().len() - z_by_location.len();
    let mut by_loc = vec![0.0; offset];
    by_loc.extend_from_slice(z_by_location);
    plan.gather(&by_loc)
}

fn label_cells(m: &MethodSpec) -> Vec<String> {
    let l = m.label();
    vec![l.method, l.ordering.into(), l.conditioning.into(), l.m.to_string()]
}

const METHOD_COLS: [&str; 4] = ["method", "ordering", "conditioning", "m"];

fn with_method_cols(pre: &[&str], post: &[&str]) -> Vec<String> {
    pre.iter()
        .chain(METHOD_COLS.iter())
        .chain(post.iter())
        .map(|s| s.to_string())
        .collect()
}

pub fn run_simulate(cfg: &ExperimentConfig) -> Result<Outcome> {
    let model = model_of(&cfg.model)?;
    let d = match cfg.geometry.dim() {
        Some(d) => d,
        None => cfg.geometry.locations(cfg.seed, 0)?.dim(),
    };
    let mut header: Vec<String> = vec!["replicate".into()];
    header.extend(coordinate_header(d).split(',').map(String::from));
    header.extend(["y", "z", "config_digest"].map(String::from));
    let mut t = Table::new(&header);
    let digest = cfg.digest();
    let mut push = |r: u64, s: &LocationSet, draw: &Draw| {
        for i in 0..s.len() {
            let mut row = vec![r.to_string()];
            row.extend(s.point(i).iter().map(|&c| num(c)));
            row.push(num(draw.y[i]));
            row.push(num(draw.z[i]));
            row.push(digest.clone());
            t.push(row);
        }
    };
    let ids: Vec<u64> = (0..cfg.replicates as u64).collect();
    if cfg.geometry.is_fixed() {
        let s = cfg.geometry.locations(cfg.seed, 0)?;
        for (r, draw) in simulate_draws(&s, &model, cfg.seed, &ids)?.iter().enumerate() {
            push(r as u64, &s, draw);
        }
    } else {
        for &r in &ids {
            let s = cfg.geometry.locations(cfg.seed, r)?;
            let draw = simulate_draws(&s, &model, cfg.seed, &[r])?.pop().expect("one draw");
            push(r, &s, &draw);
        }
    }
    Ok(Outcome {
        tables: vec![("simulation".into(), t)],
        ..Default::default()
    })
}

fn cell_model(base: &ModelConfig, nu: f64, snr: Option<f64>) -> Result<CovarianceModel> {
    let mut m = base.clone();
    m.nu = nu;
    m.tau2 = snr.map_or(0.0, |r| base.sigma2 / r);
    model_of(&m)
}

fn snr_text(snr: Option<f64>) -> String {
    snr.map_or_else(|| "inf".to_string(), num)
}

/// Exact divergences of one plan, reusing log-determinants across plans that
/// share locations and observation count.
fn plan_kls(
    plan: &VecchiaPlan,
    model: &CovarianceModel,
    cache_x: &mut HashMap<(usize, usize), f64>,
    cache_z: &mut HashMap<usize, f64>,
) -> std::result::Result<(f64, f64), InferenceError> {
    if model.is_noiseless() {
        let p = plan.latent_only();
        let key = (p.locations().len(), 0);
        let ld = match cache_x.get(&key) {
            Some(&v) => v,
            None => *cache_x.entry(key).or_insert(exact_logdet_x(&p, model)?),
        };
        let kl = kl_joint_x_with(&p, model, ld)?;
        return Ok((kl, kl));
    }
    let key = (plan.locations().len(), plan.n_observed());
    let ldx = match cache_x.get(&key) {
        Some(&v) => v,
        None => *cache_x.entry(key).or_insert(exact_logdet_x(plan, model)?),
    };
    let ldz = match cache_z.get(&plan.n_observed()) {
        Some(&v) => v,
        None => *cache_z
            .entry(plan.n_observed())
            .or_insert(exact_logdet_z(plan, model)?),
    };
    Ok((
        kl_joint_x_with(plan, model, ldx)?,
        kl_observed_z_with(plan, model, ldz)?,
    ))
}

pub fn run_kl_grid(cfg: &ExperimentConfig) -> Result<Outcome> {
    let spec = cfg
        .kl
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("kl-grid needs a `kl` section".into()))?;
    let methods = cfg.require_methods()?;
    for (nu, snr) in spec.nu.iter().flat_map(|&nu| spec.snr.iter().map(move |&s| (nu, s))) {
        cell_model(&cfg.model, nu, snr)?;
    }
    let digest = cfg.digest();
    let cells: Vec<(u64, f64, Option<f64>)> = (0..cfg.replicates as u64)
        .flat_map(|r| {
            spec.nu
                .iter()
                .flat_map(move |&nu| spec.snr.iter().map(move |&snr| (r, nu, snr)))
        })
        .collect();
    let geometries: Vec<Result<LocationSet>> = (0..cfg.replicates as u64)
        .map(|r| Ok(cfg.geometry.locations(cfg.seed, r)?))
        .collect();
    let geometries: Vec<LocationSet> = geometries.into_iter().collect::<Result<_>>()?;

    let results: Vec<Vec<(Vec<String>, bool)>> = cells
        .par_iter()
        .map(|&(r, nu, snr)| {
            let s = &geometries[r as usize];
            let model = cell_model(&cfg.model, nu, snr).expect("validated above");
            let mut cache_x = HashMap::new();
            let mut cache_z = HashMap::new();
            let reference = match spec.mode {
                KlMode::Exact => None,
                KlMode::LoglikReference { reference_m } => Some(reference_loglik(
                    s,
                    &model,
                    cfg.seed,
                    r,
                    reference_m,
                )),
            };
            methods
                .iter()
                .map(|method| {
                    let mut row = vec![r.to_string()];
                    row.extend(label_cells(method));
                    row.push(num(nu));
                    row.push(snr_text(snr));
                    let res: Result<(f64, f64, String)> = (|| {
                        let plan = method.plan(s, None)?;
                        let hash = plan.hash();
                        match &reference {
                            None => {
                                let (x, z) =
                                    plan_kls(&plan, &model, &mut cache_x, &mut cache_z)?;
                                Ok((x, z, hash))
                            }
                            Some(refr) => {
                                let (ll_ref, z) = match refr {
                                    Ok(v) => v,
                                    Err(e) => {
                                        return Err(ExperimentError::Data(format!(
                                            "reference: {e}"
                                        )))
                                    }
                                };
                                let ll = vecchia_loglik(&plan, &model, &plan_z(&plan, z))?;
                                Ok((f64::NAN, ll_ref - ll.loglik, hash))
                            }
                        }
                    })();
                    let ok = res.is_ok();
                    match res {
                        Ok((x, z, hash)) => {
                            row.extend([num(x), num(z), "ok".into(), hash]);
                        }
                        Err(e) => {
                            log::warn!("kl cell failed: {e}");
                            row.extend([num(f64::NAN), num(f64::NAN), e.code().into(), "-".into()]);
                        }
                    }
                    row.push(digest.clone());
                    (row, ok)
                })
                .collect()
        })
        .collect();

    let mut t = Table::new(&with_method_cols(
        &["replicate"],
        &["nu", "snr", "kl_x", "kl_z", "status", "plan_hash", "config_digest"],
    ));
    let mut failures = 0;
    for (row, ok) in results.into_iter().flatten() {
        failures += usize::from(!ok);
        t.push(row);
    }
    Ok(Outcome {
        tables: vec![("kl_grid".into(), t)],
        failures,
        ..Default::default()
    })
}

/// Loglik of maxmin nearest-neighbour SGV with `m` on a simulated draw, and
/// the draw itself.
fn reference_loglik(
    s: &LocationSet,
    model: &CovarianceModel,
    seed: u64,
    r: u64,
    m: usize,
) -> Result<(f64, Vec<f64>)> {
    let z = simulate_draws(s, model, seed, &[r])?.pop().expect("one draw").z;
    let plan = MethodSpec::Vecchia {
        partition: Partition::Sgv,
        ordering: OrderingKind::Maxmin,
        conditioning: ConditioningKind::Nn,
        m,
    }
    .plan(s, None)?;
    let ll = vecchia_loglik(&plan, model, &plan_z(&plan, &z))?.loglik;
    Ok((ll, z))
}

/// Off-diagonal maximum and total squared counts of structural nonzeros per
/// column of `V`.
pub fn v_column_stats(plan: &VecchiaPlan, model: &CovarianceModel) -> std::result::Result<(usize, u64), InferenceError> {
    let v = assemble_u(plan, model)?.v()?;
    let csc = v.csc();
    let mut max_off = 0;
    let mut sum_sq = 0u64;
    for j in 0..csc.ncols() {
        let nnz = csc.col_nnz(j);
        max_off = max_off.max(nnz.saturating_sub(1));
        sum_sq += (nnz * nnz) as u64;
    }
    Ok((max_off, sum_sq))
}

pub fn run_sparsity(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Outcome> {
    let spec = cfg
        .sparsity
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("sparsity needs a `sparsity` section".into()))?;
    let methods = cfg.require_methods()?;
    let GeometrySpec::Grid { dim, spacing, .. } = cfg.geometry else {
        return Err(ConfigError::Invalid("sparsity needs a grid geometry".into()).into());
    };
    let model = model_of(&cfg.model)?;
    let digest = cfg.digest();
    let cells: Vec<(usize, &MethodSpec)> = spec
        .points_per_side
        .iter()
        .flat_map(|&p| methods.iter().map(move |m| (p, m)))
        .collect();
    let rows: Vec<(Vec<String>, bool)> = cells
        .par_iter()
        .map(|&(pps, method)| {
            let start = Instant::now();
            let res: Result<(usize, usize, u64, String)> = (|| {
                let s = grid_locations(dim, pps, spacing).map_err(ConfigError::from)?;
                let plan = method.plan(&s, None)?;
                let (mx, sq) = v_column_stats(&plan, &model)?;
                Ok((s.len(), mx, sq, plan.hash()))
            })();
            let secs = start.elapsed().as_secs_f64();
            let n = pps.checked_pow(dim as u32).unwrap_or(usize::MAX);
            let mut row = vec![n.to_string()];
            row.extend(label_cells(method));
            let ok = res.is_ok();
            let (mx, sq, status, hash) = match res {
                Ok((_, mx, sq, h)) => (mx.to_string(), sq.to_string(), "ok".to_string(), h),
                Err(e) => {
                    log::warn!("sparsity cell failed: {e}");
                    ("NaN".into(), "NaN".into(), e.code().to_string(), "-".into())
                }
            };
            row.extend([mx, sq]);
            if opts.timing {
                row.push(num(secs));
            }
            row.extend([status, hash, digest.clone()]);
            (row, ok)
        })
        .collect();
    let mut post = vec!["max_nnz_per_col", "sum_sq_nnz"];
    if opts.timing {
        post.push("wall_time");
    }
    post.extend(["status", "plan_hash", "config_digest"]);
    let mut t = Table::new(&with_method_cols(&["n"], &post));
    let mut failures = 0;
    for (row, ok) in rows {
        failures += usize::from(!ok);
        t.push(row);
    }
    Ok(Outcome {
        tables: vec![("sparsity".into(), t)],
        failures,
        ..Default::default()
    })
}

pub fn run_loglik(cfg: &ExperimentConfig) -> Result<Outcome> {
    let methods = cfg.require_methods()?;
    let model = model_of(&cfg.model)?;
    let data = datasets(cfg, &model)?;
    let digest = cfg.digest();
    let mut t = Table::new(&with_method_cols(
        &["replicate"],
        &[
            "loglik",
            "sum_logdet_d",
            "sum_log_v_diag",
            "ztilde_sq",
            "quad",
            "const_term",
            "status",
            "plan_hash",
            "config_digest",
        ],
    ));
    let mut docs = Vec::new();
    let mut failures = 0;
    let rows: Vec<Vec<(Vec<String>, serde_json::Value, bool)>> = data
        .par_iter()
        .enumerate()
        .map(|(r, (s, z))| {
            methods
                .iter()
                .map(|method| {
                    let res = evaluate_loglik(method, s, &model, z);
                    let mut row = vec![r.to_string()];
                    row.extend(label_cells(method));
                    let ok = res.is_ok();
                    let doc = match res {
                        Ok((lr, hash)) => {
                            row.extend(
                                [lr.loglik, lr.sum_logdet_d, lr.sum_log_v_diag, lr.ztilde_sq, lr.quad, lr.const_term]
                                    .map(num),
                            );
                            row.extend(["ok".to_string(), hash.clone(), digest.clone()]);
                            json!({"replicate": r, "method": method.label().method, "plan_hash": hash, "result": lr})
                        }
                        Err(e) => {
                            row.extend((0..6).map(|_| num(f64::NAN)));
                            row.extend([e.code().to_string(), "-".into(), digest.clone()]);
                            json!({"replicate": r, "method": method.label().method, "error": e.to_string()})
                        }
                    };
                    (row, doc, ok)
                })
                .collect()
        })
        .collect();
    for (row, doc, ok) in rows.into_iter().flatten() {
        failures += usize::from(!ok);
        t.push(row);
        docs.push(doc);
    }
    Ok(Outcome {
        tables: vec![("loglik".into(), t)],
        json: vec![("loglik".into(), serde_json::Value::Array(docs))],
        failures,
    })
}

/// Log-likelihood of `z` (by location) under a method. Baselines report only
/// the total; the remaining terms are `NaN`.
pub fn evaluate_loglik(
    method: &MethodSpec,
    s: &LocationSet,
    model: &CovarianceModel,
    z: &[f64],
) -> Result<(LoglikResult, String)> {
    let total_only = |v: f64| LoglikResult {
        loglik: v,
        sum_logdet_d: f64::NAN,
        sum_log_v_diag: f64::NAN,
        ztilde_sq: f64::NAN,
        quad: f64::NAN,
        const_term: f64::NAN,
    };
    match method {
        MethodSpec::Exact => Ok((total_only(exact_loglik(s, model, z)?), "-".into())),
        MethodSpec::Fcl => Ok((total_only(fcl_loglik(model, z, s)?), "-".into())),
        MethodSpec::Pbl { blocks_per_side } => {
            let (blocks, pairs) = pbl_layout(s, *blocks_per_side);
            Ok((total_only(pbl_loglik(model, z, s, &blocks, &pairs)?), "-".into()))
        }
        _ => {
            let plan = method.plan(s, None)?;
            let lr = vecchia_loglik(&plan, model, &plan_z(&plan, z))?;
            Ok((lr, plan.hash()))
        }
    }
}

/// Tiles as blocks with rook-adjacent pairs.
pub fn pbl_layout(s: &LocationSet, blocks_per_side: usize) -> (Vec<Vec<usize>>, Vec<(usize, usize)>) {
    let t = tiles(s, &coord_order(s), blocks_per_side);
    let pairs = rook_pairs(&t);
    (t.into_iter().map(|t| t.members).collect(), pairs)
}

/// A fitted method on one dataset.
#[derive(Debug)]
pub struct MethodFit {
    pub plan_hash: String,
    pub fit: FitResult,
}

/// Maximum likelihood for one method; Vecchia plans follow the `m`
/// schedule with warm starts.
pub fn fit_method(
    method: &MethodSpec,
    fit: &FitSpec,
    truth: &ModelConfig,
    s: &LocationSet,
    z: &[f64],
) -> Result<MethodFit> {
    let start = model_of(fit.start.as_ref().unwrap_or(truth))?;
    let options = FitOptions {
        max_evals_per_stage: fit.max_evals_per_stage,
        ..FitOptions::default()
    };
    match method {
        MethodSpec::Exact | MethodSpec::Fcl | MethodSpec::Pbl { .. } => {
            let layout = match method {
                MethodSpec::Pbl { blocks_per_side } => Some(pbl_layout(s, *blocks_per_side)),
                _ => None,
            };
            let result = mle_fit(&start, &fit.free, &[0], options, |_, m| match (method, &layout) {
                (MethodSpec::Exact, _) => exact_loglik(s, m, z),
                (MethodSpec::Fcl, _) => fcl_loglik(m, z, s),
                (_, Some((blocks, pairs))) => pbl_loglik(m, z, s, blocks, pairs),
                _ => unreachable!("baseline methods only"),
            })?;
            Ok(MethodFit {
                plan_hash: "-".into(),
                fit: result,
            })
        }
        _ => {
            let schedule = match method {
                MethodSpec::Vecchia { m, .. } if fit.m_schedule.is_empty() => vec![*m],
                MethodSpec::Vecchia { .. } => fit.m_schedule.clone(),
                _ => vec![method.label().m],
            };
            let mut plans: HashMap<usize, (VecchiaPlan, Vec<f64>)> = HashMap::new();
            for &m in &schedule {
                let plan = match method {
                    MethodSpec::Vecchia { .. } => method.plan(s, Some(m))?,
                    _ => method.plan(s, None)?,
                };
                let zz = plan_z(&plan, z);
                plans.insert(m, (plan, zz));
            }
            let last = *schedule.last().expect("nonempty schedule");
            let plan_hash = plans[&last].0.hash();
            let result = mle_fit(&start, &fit.free, &schedule, options, |m, model| {
                let (plan, zz) = &plans[&m];
                Ok(vecchia_loglik(plan, model, zz)?.loglik)
            })?;
            Ok(MethodFit {
                plan_hash,
                fit: result,
            })
        }
    }
}

fn param_value(model: &CovarianceModel, p: inference::FreeParam) -> f64 {
    match p {
        inference::FreeParam::Sigma2 => model.matern().sigma2(),
        inference::FreeParam::Range => model.matern().scale(),
        inference::FreeParam::Tau2 => model.tau2(),
    }
}

fn require_fit(cfg: &ExperimentConfig) -> Result<&FitSpec> {
    Ok(cfg
        .fit
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("this command needs a `fit` section".into()))?)
}

pub fn run_fit(cfg: &ExperimentConfig) -> Result<Outcome> {
    let methods = cfg.require_methods()?;
    let fit = require_fit(cfg)?;
    let model = model_of(&cfg.model)?;
    let (s, z) = dataset(cfg, &model, 0)?;
    let digest = cfg.digest();
    let names: Vec<&str> = fit.free.iter().map(|b| b.param.name()).collect();
    let mut est = Table::new(&with_method_cols(
        &[],
        &["param", "estimate", "loglik", "evals", "converged", "status", "plan_hash", "config_digest"],
    ));
    let mut trace_header = vec!["stage", "m_stage", "eval_count"];
    trace_header.extend(names.iter());
    trace_header.push("loglik");
    let mut trace = Table::new(&with_method_cols(&[], &trace_header));
    let results: Vec<Result<MethodFit>> = methods
        .par_iter()
        .map(|m| fit_method(m, fit, &cfg.model, &s, &z))
        .collect();
    let mut failures = 0;
    for (method, res) in methods.iter().zip(results) {
        match res {
            Ok(mf) => {
                let evals: usize = mf.fit.stages.iter().map(|s| s.evals).sum();
                for b in &fit.free {
                    let mut row = label_cells(method);
                    row.extend([
                        b.param.name().to_string(),
                        num(param_value(&mf.fit.model, b.param)),
                        num(mf.fit.loglik),
                        evals.to_string(),
                        mf.fit.converged.to_string(),
                        "ok".into(),
                        mf.plan_hash.clone(),
                        digest.clone(),
                    ]);
                    est.push(row);
                }
                for tr in &mf.fit.trace {
                    let mut row = label_cells(method);
                    row.extend([tr.stage.to_string(), tr.m.to_string(), tr.eval_count.to_string()]);
                    row.extend(tr.params.iter().map(|&p| num(p)));
                    row.push(num(tr.loglik));
                    trace.push(row);
                }
            }
            Err(e) => {
                failures += 1;
                log::warn!("fit failed: {e}");
                for b in &fit.free {
                    let mut row = label_cells(method);
                    row.extend([
                        b.param.name().to_string(),
                        num(f64::NAN),
                        num(f64::NAN),
                        "0".into(),
                        "false".into(),
                        e.code().into(),
                        "-".into(),
                        digest.clone(),
                    ]);
                    est.push(row);
                }
            }
        }
    }
    Ok(Outcome {
        tables: vec![("fit".into(), est), ("fit_trace".into(), trace)],
        failures,
        ..Default::default()
    })
}

/// Per-replicate squared errors of each method and parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimationRecord {
    pub replicate: usize,
    pub method: usize,
    pub param: usize,
    pub estimate: f64,
    pub sq_error: f64,
}

pub fn run_estimation_study(cfg: &ExperimentConfig) -> Result<Outcome> {
    let methods = cfg.require_methods()?;
    let fit = require_fit(cfg)?;
    let truth = model_of(&cfg.model)?;
    let data = datasets(cfg, &truth)?;
    let digest = cfg.digest();

    let fits: Vec<Vec<Result<MethodFit>>> = data
        .par_iter()
        .map(|(s, z)| {
            methods
                .iter()
                .map(|m| fit_method(m, fit, &cfg.model, s, z))
                .collect()
        })
        .collect();

    let mut t = Table::new(&with_method_cols(
        &["replicate"],
        &[
            "param",
            "estimate",
            "truth",
            "sq_error",
            "loglik",
            "evals",
            "converged",
            "status",
            "plan_hash",
            "config_digest",
        ],
    ));
    let mut failures = 0;
    // errors[method][param] -> per-replicate squared error (NaN on failure)
    let mut errors = vec![vec![vec![f64::NAN; data.len()]; fit.free.len()]; methods.len()];
    for (r, per_method) in fits.iter().enumerate() {
        for (mi, (method, res)) in methods.iter().zip(per_method).enumerate() {
            if res.is_err() {
                failures += 1;
            }
            for (pi, b) in fit.free.iter().enumerate() {
                let tv = param_value(&truth, b.param);
                let mut row = vec![r.to_string()];
                row.extend(label_cells(method));
                row.push(b.param.name().into());
                match res {
                    Ok(mf) => {
                        let e = param_value(&mf.fit.model, b.param);
                        let se = (e - tv).powi(2);
                        errors[mi][pi][r] = se;
                        let evals: usize = mf.fit.stages.iter().map(|s| s.evals).sum();
                        row.extend([
                            num(e),
                            num(tv),
                            num(se),
                            num(mf.fit.loglik),
                            evals.to_string(),
                            mf.fit.converged.to_string(),
                            "ok".into(),
                            mf.plan_hash.clone(),
                        ]);
                    }
                    Err(e) => {
                        log::warn!("replicate {r} fit failed: {e}");
                        row.extend([
                            num(f64::NAN),
                            num(tv),
                            num(f64::NAN),
                            num(f64::NAN),
                            "0".into(),
                            "false".into(),
                            e.code().into(),
                            "-".into(),
                        ]);
                    }
                }
                row.push(digest.clone());
                t.push(row);
            }
        }
    }

    let reference = methods[0].label().method;
    let mut summary = Table::new(&with_method_cols(
        &[],
        &[
            "param",
            "n_ok",
            "n_failed",
            "mse",
            "mse_ci_low",
            "mse_ci_high",
            "reference",
            "mse_diff",
            "diff_ci_low",
            "diff_ci_high",
            "config_digest",
        ],
    ));
    for (mi, method) in methods.iter().enumerate() {
        for (pi, b) in fit.free.iter().enumerate() {
            let ok: Vec<f64> = errors[mi][pi].iter().copied().filter(|v| v.is_finite()).collect();
            let (mse, lo, hi) = mean_ci(&ok);
            let diffs: Vec<f64> = errors[mi][pi]
                .iter()
                .zip(&errors[0][pi])
                .map(|(a, b)| a - b)
                .filter(|v| v.is_finite())
                .collect();
            let (d, dlo, dhi) = mean_ci(&diffs);
            let mut row = label_cells(method);
            row.extend([
                b.param.name().to_string(),
                ok.len().to_string(),
                (data.len() - ok.len()).to_string(),
                num(mse),
                num(lo),
                num(hi),
                reference.clone(),
                num(d),
                num(dlo),
                num(dhi),
                digest.clone(),
            ]);
            summary.push(row);
        }
    }
    Ok(Outcome {
        tables: vec![("estimation".into(), t), ("estimation_summary".into(), summary)],
        failures,
        ..Default::default()
    })
}

pub fn run_posterior(cfg: &ExperimentConfig) -> Result<Outcome> {
    let methods = cfg.require_methods()?;
    let want_var = cfg.posterior.as_ref().is_some_and(|p| p.marginal_variances);
    let model = model_of(&cfg.model)?;
    let (s, z) = dataset(cfg, &model, 0)?;
    let digest = cfg.digest();
    let mut header: Vec<String> = METHOD_COLS.iter().map(|s| s.to_string()).collect();
    header.push("location".into());
    header.extend(coordinate_header(s.dim()).split(',').map(String::from));
    header.push("mean".into());
    if want_var {
        header.push("variance".into());
    }
    header.extend(["plan_hash".into(), "config_digest".into()]);
    let mut t = Table::new(&header);
    let mut docs = Vec::new();
    let mut failures = 0;
    for method in methods {
        let res: Result<(VecchiaPlan, inference::PosteriorSummary)> = (|| {
            let plan = method.plan(&s, None)?;
            let factors = assemble_u(&plan, &model)?;
            let post = posterior_summary(&factors, &plan_z(&plan, &z), want_var)?;
            Ok((plan, post))
        })();
        match res {
            Ok((plan, post)) => {
                let hash = plan.hash();
                let locs: Vec<usize> = plan.blocks().iter().flatten().copied().collect();
                let mut by_loc: Vec<(usize, usize)> =
                    locs.iter().enumerate().map(|(k, &l)| (l, k)).collect();
                by_loc.sort_unstable();
                for (loc, k) in by_loc {
                    let mut row = label_cells(method);
                    row.push(loc.to_string());
                    row.extend(plan.locations().point(loc).iter().map(|&c| num(c)));
                    row.push(num(post.mean[k]));
                    if let Some(v) = &post.marginal_var {
                        row.push(num(v[k]));
                    }
                    row.extend([hash.clone(), digest.clone()]);
                    t.push(row);
                }
                docs.push(json!({
                    "method": method.label().method,
                    "plan_hash": hash,
                    "mean": post.mean,
                    "marginal_variance": post.marginal_var,
                    "precision_factor_nnz": post.v.csc().nnz(),
                }));
            }
            Err(e) => {
                failures += 1;
                log::warn!("posterior failed: {e}");
                docs.push(json!({"method": method.label().method, "error": e.to_string()}));
            }
        }
    }
    Ok(Outcome {
        tables: vec![("posterior".into(), t)],
        json: vec![("posterior".into(), serde_json::Value::Array(docs))],
        failures,
    })
}

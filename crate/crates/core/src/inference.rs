//! Assembly of the sparse factor `U`, the integrated likelihood, posterior
//! summaries, KL divergences against the exact model, composite-likelihood
//! baselines and Nelder-Mead maximum likelihood.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dag::DagError;
use crate::geom::{GeomError, LocationSet, Tile};
use crate::kernels::{var_cov, CovarianceModel, KernelError, MaternParams, Var};
use crate::plan::{PlanError, VecchiaPlan, XLayout};
use crate::sparsela::{
    self, chol_logdet, chol_solve, dense_chol, dense_chol_capped, forward_solve, rchol,
    sparse_outer, tri_solve, Csc, LinalgError, Side, SparseSym, SparseUpper, DENSE_CAP,
};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("conditional covariance for vertex {vertex} is singular: {source}")]
    Conditioning {
        vertex: usize,
        #[source]
        source: LinalgError,
    },
    #[error("nugget is zero relative to the variance, so observations equal the latent field; use the standard formulation")]
    Noiseless,
    #[error("noiseless evaluation needs every block observed")]
    NoiselessUnobserved,
    #[error("expected {expected} observations, found {found}")]
    Length { expected: usize, found: usize },
    #[error("{what} of size {n} exceeds the dense cap of {cap}")]
    TooLarge { what: &'static str, n: usize, cap: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("every likelihood evaluation failed; last point tried: {last:?}")]
    FitFailed { last: Vec<f64> },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Dag(#[from] DagError),
}

type Result<T> = std::result::Result<T, InferenceError>;

/// Regression pieces of one vertex: `x_v | x_g ~ N(B x_g, D)`.
#[derive(Clone, Debug)]
pub struct ConditionalPiece {
    /// Scalar indices of the conditioning variables, ascending.
    pub parents: Vec<usize>,
    /// `B = C(x_v, x_g) C(x_g, x_g)^-1`.
    pub b: DMatrix<f64>,
    /// Lower Cholesky factor of `D`.
    pub d_chol: DMatrix<f64>,
}

/// `U` with `C^-1 = U U'` and its row slices for latent and observed rows.
#[derive(Clone, Debug)]
pub struct FactorSet {
    pub u: SparseUpper,
    pub layout: XLayout,
    pub u_y: Csc,
    pub u_z: Csc,
    /// `log |D_v|` per vertex.
    pub logdet_d: Vec<f64>,
    pub pieces: Vec<ConditionalPiece>,
}

impl FactorSet {
    pub fn n_x(&self) -> usize {
        self.u.n()
    }

    pub fn n_y(&self) -> usize {
        self.u_y.nrows()
    }

    pub fn n_z(&self) -> usize {
        self.u_z.nrows()
    }

    pub fn sum_logdet_d(&self) -> f64 {
        self.logdet_d.iter().sum()
    }

    /// `W = U_Y U_Y'`.
    pub fn w(&self) -> SparseSym {
        sparse_outer(&self.u_y)
    }

    /// `V = rchol(W)`.
    pub fn v(&self) -> Result<SparseUpper> {
        Ok(rchol(&self.w())?)
    }
}

/// Scalar variables of `x` in x-order.
pub fn x_vars(plan: &VecchiaPlan) -> Vec<Var> {
    let lay = plan.layout();
    lay.vertex_block
        .iter()
        .flat_map(|&(b, observed)| {
            plan.block(b).iter().map(move |&loc| Var { loc, observed })
        })
        .collect()
}

/// Builds `U` column by column from the conditional distribution of each
/// vertex given its parents: `U_vv = D^-1/2` (upper) and `U_gv = -B' D^-1/2`.
pub fn assemble_u(plan: &VecchiaPlan, model: &CovarianceModel) -> Result<FactorSet> {
    if model.is_noiseless() && plan.observed().iter().any(|&o| o) {
        return Err(InferenceError::Noiseless);
    }
    let lay = plan.layout();
    let vars = x_vars(plan);
    let s = plan.locations();
    let nv = lay.n_vertices();
    let parent_vertices = |v: usize| -> Vec<usize> {
        let (i, observed) = lay.vertex_block[v];
        if observed {
            return vec![lay.y_vertex[i]];
        }
        let mut p: Vec<usize> = plan.qy(i).iter().map(|&j| lay.y_vertex[j]).collect();
        p.extend(plan.qz(i).iter().map(|&j| lay.z_vertex[j].expect("observed")));
        p.sort_unstable();
        p
    };

    let computed: Vec<Result<(ConditionalPiece, DMatrix<f64>, DMatrix<f64>, f64)>> = (0..nv)
        .into_par_iter()
        .map(|v| {
            let own: Vec<Var> = vars[lay.range(v)].to_vec();
            let parents: Vec<usize> = parent_vertices(v)
                .into_iter()
                .flat_map(|p| lay.range(p))
                .collect();
            let g: Vec<Var> = parents.iter().map(|&k| vars[k]).collect();
            let cvv = var_cov(model, s, &own, &own);
            let r = own.len();
            let (b, d) = if g.is_empty() {
                (DMatrix::zeros(r, 0), cvv)
            } else {
                let cgg = var_cov(model, s, &g, &g);
                let cgv = var_cov(model, s, &g, &own);
                let lg = dense_chol(&cgg)
                    .map_err(|source| InferenceError::Conditioning { vertex: v, source })?;
                let bt = chol_solve(&lg, &cgv);
                let mut d = cvv - cgv.transpose() * &bt;
                d = (&d + d.transpose()) * 0.5;
                (bt.transpose(), d)
            };
            let ld = dense_chol(&d)
                .map_err(|source| InferenceError::Conditioning { vertex: v, source })?;
            let mut linv = DMatrix::<f64>::identity(r, r);
            for mut col in linv.column_iter_mut() {
                forward_solve(&ld, col.as_mut_slice());
            }
            let t = linv.transpose();
            let ugv = -(b.transpose() * &t);
            let logdet = chol_logdet(&ld);
            Ok((
                ConditionalPiece {
                    parents,
                    b,
                    d_chol: ld,
                },
                t,
                ugv,
                logdet,
            ))
        })
        .collect();

    let n = lay.n_scalars();
    let mut col_ptr = vec![0];
    let mut row_idx = Vec::new();
    let mut values = Vec::new();
    let mut pieces = Vec::with_capacity(nv);
    let mut logdet_d = Vec::with_capacity(nv);
    for (v, c) in computed.into_iter().enumerate() {
        let (piece, t, ugv, logdet) = c?;
        let start = lay.offset[v];
        for col in 0..t.ncols() {
            for (k, &row) in piece.parents.iter().enumerate() {
                row_idx.push(row);
                values.push(ugv[(k, col)]);
            }
            for s_ in 0..=col {
                row_idx.push(start + s_);
                values.push(t[(s_, col)]);
            }
            col_ptr.push(row_idx.len());
        }
        pieces.push(piece);
        logdet_d.push(logdet);
    }
    let u = Csc::from_parts(n, n, col_ptr, row_idx, values);
    let u_y = u.select_rows(&lay.y_scalars());
    let u_z = u.select_rows(&lay.z_scalars());
    Ok(FactorSet {
        u: SparseUpper::new(u)?,
        layout: lay,
        u_y,
        u_z,
        logdet_d,
        pieces,
    })
}

/// Terms of `-2 log f(z) = logdet_d + 2 logdet_v + ztilde_sq - quad + const`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LoglikResult {
    pub loglik: f64,
    pub sum_logdet_d: f64,
    pub sum_log_v_diag: f64,
    pub ztilde_sq: f64,
    pub quad: f64,
    pub const_term: f64,
}

impl LoglikResult {
    fn from_terms(sum_logdet_d: f64, sum_log_v_diag: f64, ztilde_sq: f64, quad: f64, n_z: usize) -> Self {
        let const_term = n_z as f64 * (2.0 * std::f64::consts::PI).ln();
        let m2 = sum_logdet_d + 2.0 * sum_log_v_diag + ztilde_sq - quad + const_term;
        LoglikResult {
            loglik: -0.5 * m2,
            sum_logdet_d,
            sum_log_v_diag,
            ztilde_sq,
            quad,
            const_term,
        }
    }
}

fn check_z(factors: &FactorSet, z: &[f64]) -> Result<()> {
    if z.len() != factors.n_z() {
        return Err(InferenceError::Length {
            expected: factors.n_z(),
            found: z.len(),
        });
    }
    Ok(())
}

/// Integrated likelihood of the observations `z` (in x-order).
pub fn integrated_loglik(factors: &FactorSet, z: &[f64]) -> Result<LoglikResult> {
    check_z(factors, z)?;
    let zt = factors.u_z.tr_mul_vec(z);
    let t = factors.u_y.mul_vec(&zt);
    let v = factors.v()?;
    let s = tri_solve(&v, &t, Side::R)?;
    let sum_log_v: f64 = (0..v.n()).map(|j| v.diag(j).ln()).sum();
    Ok(LoglikResult::from_terms(
        factors.sum_logdet_d(),
        sum_log_v,
        dot(&zt, &zt),
        dot(&s, &s),
        factors.n_z(),
    ))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Vecchia log-likelihood of `z` (in x-order). A noiseless model is
/// evaluated as the product of conditionals of `z` directly.
pub fn vecchia_loglik(plan: &VecchiaPlan, model: &CovarianceModel, z: &[f64]) -> Result<LoglikResult> {
    if model.is_noiseless() {
        return noiseless_loglik(plan, model, z);
    }
    integrated_loglik(&assemble_u(plan, model)?, z)
}

/// `sum_i log f(z_i | z_q(i))` with `z = y`.
pub fn noiseless_loglik(plan: &VecchiaPlan, model: &CovarianceModel, z: &[f64]) -> Result<LoglikResult> {
    if plan.observed().iter().any(|&o| !o) {
        return Err(InferenceError::NoiselessUnobserved);
    }
    let factors = assemble_u(&plan.latent_only(), model)?;
    if z.len() != factors.n_y() {
        return Err(InferenceError::Length {
            expected: factors.n_y(),
            found: z.len(),
        });
    }
    let zt = factors.u_y.tr_mul_vec(z);
    Ok(LoglikResult::from_terms(
        factors.sum_logdet_d(),
        0.0,
        dot(&zt, &zt),
        0.0,
        z.len(),
    ))
}

/// Posterior of the latent field: `y | z ~ N(mean, (V V')^-1)`.
#[derive(Clone, Debug)]
pub struct PosteriorSummary {
    /// Mean over the latent scalars in x-order.
    pub mean: Vec<f64>,
    pub v: SparseUpper,
    pub marginal_var: Option<Vec<f64>>,
}

/// `mean = -W^-1 U_Y U_Z' z` by two triangular solves with `V`. Marginal
/// variances (dense inversion) are added when requested and within the cap.
pub fn posterior_summary(factors: &FactorSet, z: &[f64], marginal_variances: bool) -> Result<PosteriorSummary> {
    check_z(factors, z)?;
    let zt = factors.u_z.tr_mul_vec(z);
    let t = factors.u_y.mul_vec(&zt);
    let v = factors.v()?;
    let s = tri_solve(&v, &t, Side::R)?;
    let mean: Vec<f64> = tri_solve(&v, &s, Side::Rt)?.into_iter().map(|x| -x).collect();
    let marginal_var = if marginal_variances {
        let n = factors.n_y();
        if n > DENSE_CAP {
            return Err(InferenceError::TooLarge {
                what: "posterior",
                n,
                cap: DENSE_CAP,
            });
        }
        let mut out = vec![0.0; n];
        // W^-1 = V^-T V^-1, so diag entries are squared column norms of V^-1.
        let mut e = vec![0.0; n];
        for (j, o) in out.iter_mut().enumerate() {
            e.fill(0.0);
            e[j] = 1.0;
            let col = tri_solve(&v, &e, Side::R)?;
            *o = dot(&col, &col);
        }
        Some(out)
    } else {
        None
    };
    Ok(PosteriorSummary {
        mean,
        v,
        marginal_var,
    })
}

/// `log |C_x|` for the exact joint of the latent field at every location and
/// the observations of the observed blocks: `log |K| + n_z log tau2`.
pub fn exact_logdet_x(plan: &VecchiaPlan, model: &CovarianceModel) -> Result<f64> {
    let s = plan.locations();
    let all: Vec<Var> = (0..s.len()).map(|loc| Var { loc, observed: false }).collect();
    let k = var_cov(model, s, &all, &all);
    let lk = dense_chol_capped(&k, DENSE_CAP)?;
    let n_z = plan.n_observed();
    let noise = if n_z == 0 { 0.0 } else { n_z as f64 * model.tau2().ln() };
    Ok(chol_logdet(&lk) + noise)
}

/// `log |K_o + tau2 I|` over the observed locations.
pub fn exact_logdet_z(plan: &VecchiaPlan, model: &CovarianceModel) -> Result<f64> {
    let obs: Vec<Var> = plan
        .observed_locations()
        .into_iter()
        .map(|loc| Var { loc, observed: true })
        .collect();
    let sigma = var_cov(model, plan.locations(), &obs, &obs);
    Ok(chol_logdet(&dense_chol_capped(&sigma, DENSE_CAP)?))
}

fn cap_check(what: &'static str, n: usize) -> Result<()> {
    if n > DENSE_CAP {
        Err(InferenceError::TooLarge {
            what,
            n,
            cap: DENSE_CAP,
        })
    } else {
        Ok(())
    }
}

/// `KL(f(x) || f_hat(x))` for the joint of latent and observed variables.
pub fn kl_joint_x(plan: &VecchiaPlan, model: &CovarianceModel) -> Result<f64> {
    if model.is_noiseless() {
        let p = plan.latent_only();
        return kl_joint_x_with(&p, model, exact_logdet_x(&p, model)?);
    }
    kl_joint_x_with(plan, model, exact_logdet_x(plan, model)?)
}

/// As [`kl_joint_x`] with a precomputed `log |C_x|`, which depends only on
/// the locations, the model and the number of observations.
pub fn kl_joint_x_with(plan: &VecchiaPlan, model: &CovarianceModel, logdet_exact: f64) -> Result<f64> {
    let plan = if model.is_noiseless() {
        plan.latent_only()
    } else {
        plan.clone()
    };
    let factors = assemble_u(&plan, model)?;
    let vars = x_vars(&plan);
    let s = plan.locations();
    let u = factors.u.csc();
    let per_col: Vec<f64> = (0..u.ncols())
        .into_par_iter()
        .map(|j| {
            let (rows, vals) = u.col(j);
            let vs: Vec<Var> = rows.iter().map(|&r| vars[r]).collect();
            let c = var_cov(model, s, &vs, &vs);
            let mut acc = 0.0;
            for a in 0..rows.len() {
                for b in 0..rows.len() {
                    acc += vals[a] * c[(a, b)] * vals[b];
                }
            }
            acc
        })
        .collect();
    let trace: f64 = per_col.iter().sum();
    let n = u.ncols() as f64;
    Ok(0.5 * (trace - n + factors.sum_logdet_d() - logdet_exact))
}

/// `KL(f(z) || f_hat(z))` for the observations alone; the approximate
/// precision of `z` is the Schur complement of `U U'` onto the z rows.
pub fn kl_observed_z(plan: &VecchiaPlan, model: &CovarianceModel) -> Result<f64> {
    if model.is_noiseless() {
        return kl_joint_x(plan, model);
    }
    cap_check("observation covariance", plan.n_observed())?;
    kl_observed_z_with(plan, model, exact_logdet_z(plan, model)?)
}

pub fn kl_observed_z_with(plan: &VecchiaPlan, model: &CovarianceModel, logdet_exact: f64) -> Result<f64> {
    if model.is_noiseless() {
        let p = plan.latent_only();
        return kl_joint_x_with(&p, model, logdet_exact);
    }
    let factors = assemble_u(plan, model)?;
    let p_z = approx_precision_z(&factors)?;
    let obs: Vec<Var> = plan
        .observed_locations()
        .into_iter()
        .map(|loc| Var { loc, observed: true })
        .collect();
    let sigma = var_cov(model, plan.locations(), &obs, &obs);
    let trace: f64 = p_z.iter().zip(sigma.iter()).map(|(a, b)| a * b).sum();
    let logdet_p = chol_logdet(&dense_chol_capped(&p_z, DENSE_CAP)?);
    let n = obs.len() as f64;
    Ok(0.5 * (trace - n - logdet_p - logdet_exact))
}

/// `U_Z U_Z' - G'G` with `G = V^-1 U_Y U_Z'`.
pub fn approx_precision_z(factors: &FactorSet) -> Result<DMatrix<f64>> {
    let nz = factors.n_z();
    let v = factors.v()?;
    let uz_t = factors.u_z.transpose();
    let qzz = sparse_outer(&factors.u_z).to_dense();
    let cols: Vec<Result<Vec<f64>>> = (0..nz)
        .into_par_iter()
        .map(|k| {
            // Row k of U_Z as a dense vector over x, then U_Y times it.
            let mut row = vec![0.0; factors.n_x()];
            let (cs, vs) = uz_t.col(k);
            for (&c, &val) in cs.iter().zip(vs) {
                row[c] = val;
            }
            let t = factors.u_y.mul_vec(&row);
            Ok(tri_solve(&v, &t, Side::R)?)
        })
        .collect();
    let ny = factors.n_y();
    let mut g = DMatrix::zeros(ny, nz);
    for (k, c) in cols.into_iter().enumerate() {
        g.set_column(k, &nalgebra::DVector::from_vec(c?));
    }
    Ok(qzz - g.transpose() * g)
}

/// Exact log density of `z` at `locs` under `K + tau2 I`.
pub fn exact_loglik(s: &LocationSet, model: &CovarianceModel, z: &[f64]) -> Result<f64> {
    if z.len() != s.len() {
        return Err(InferenceError::Length {
            expected: s.len(),
            found: z.len(),
        });
    }
    cap_check("exact likelihood", s.len())?;
    let all: Vec<Var> = (0..s.len()).map(|loc| Var { loc, observed: true }).collect();
    Ok(sparsela::gaussian_logpdf(&var_cov(model, s, &all, &all), z)?)
}

/// Full conditional likelihood `sum_i log f(z_i | z_-i)`.
pub fn fcl_loglik(model: &CovarianceModel, z: &[f64], s: &LocationSet) -> Result<f64> {
    if z.len() != s.len() {
        return Err(InferenceError::Length {
            expected: s.len(),
            found: z.len(),
        });
    }
    cap_check("full conditional likelihood", s.len())?;
    let n = s.len();
    let all: Vec<Var> = (0..n).map(|loc| Var { loc, observed: true }).collect();
    let l = dense_chol(&var_cov(model, s, &all, &all))?;
    let q = chol_solve(&l, &DMatrix::identity(n, n));
    let qz: Vec<f64> = (0..n).map(|i| (0..n).map(|j| q[(i, j)] * z[j]).sum()).collect();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    Ok((0..n)
        .map(|i| {
            let qii = q[(i, i)];
            // mean = -sum_{j != i} Q_ij z_j / Q_ii, residual = (Q z)_i / Q_ii
            let r = qz[i] / qii;
            -0.5 * (ln2pi - qii.ln() + qii * r * r)
        })
        .sum())
}

/// Rook-adjacent pairs of tiles (indices into `tiles`).
pub fn rook_pairs(tiles: &[Tile]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for a in 0..tiles.len() {
        for b in a + 1..tiles.len() {
            let diff: usize = tiles[a]
                .index
                .iter()
                .zip(&tiles[b].index)
                .map(|(x, y)| x.abs_diff(*y))
                .sum();
            if diff == 1 {
                out.push((a, b));
            }
        }
    }
    out
}

/// Pairwise block likelihood `sum_{(i,j)} log f(z_bi, z_bj)`. `z` is indexed
/// by location.
pub fn pbl_loglik(
    model: &CovarianceModel,
    z: &[f64],
    s: &LocationSet,
    blocks: &[Vec<usize>],
    pairs: &[(usize, usize)],
) -> Result<f64> {
    if z.len() != s.len() {
        return Err(InferenceError::Length {
            expected: s.len(),
            found: z.len(),
        });
    }
    if let Some(&(a, b)) = pairs
        .iter()
        .find(|&&(a, b)| a >= blocks.len() || b >= blocks.len() || a == b)
    {
        return Err(InferenceError::InvalidArgument(format!(
            "invalid block pair ({a}, {b})"
        )));
    }
    let terms: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let idx: Vec<usize> = blocks[a].iter().chain(&blocks[b]).copied().collect();
            let vars: Vec<Var> = idx.iter().map(|&loc| Var { loc, observed: true }).collect();
            let zz: Vec<f64> = idx.iter().map(|&i| z[i]).collect();
            Ok(sparsela::gaussian_logpdf(&var_cov(model, s, &vars, &vars), &zz)?)
        })
        .collect();
    terms.into_iter().sum()
}

/// Parameters that [`mle_fit`] may vary; smoothness stays fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreeParam {
    Sigma2,
    Range,
    Tau2,
}

impl FreeParam {
    pub fn name(&self) -> &'static str {
        match self {
            FreeParam::Sigma2 => "sigma2",
            FreeParam::Range => "range",
            FreeParam::Tau2 => "tau2",
        }
    }

    fn get(&self, m: &CovarianceModel) -> f64 {
        match self {
            FreeParam::Sigma2 => m.matern().sigma2(),
            FreeParam::Range => m.matern().scale(),
            FreeParam::Tau2 => m.tau2(),
        }
    }

    fn set(&self, m: &CovarianceModel, value: f64) -> std::result::Result<CovarianceModel, KernelError> {
        let p = m.matern();
        match self {
            FreeParam::Sigma2 => Ok(m.with_matern(MaternParams::new(value, p.nu(), p.scale())?)),
            FreeParam::Range => Ok(m.with_matern(MaternParams::new(p.sigma2(), p.nu(), value)?)),
            FreeParam::Tau2 => m.with_tau2(value),
        }
    }
}

/// A free parameter with positive bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct ParamBounds {
    pub param: FreeParam,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub max_evals_per_stage: usize,
    /// Simplex size (log scale) at which a stage stops.
    pub tol: f64,
    /// Initial simplex edge (log scale).
    pub step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_evals_per_stage: 500,
            tol: 1e-6,
            step: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub stage: usize,
    pub m: usize,
    pub eval_count: usize,
    pub params: Vec<f64>,
    pub loglik: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitStage {
    pub m: usize,
    pub start: Vec<f64>,
    pub params: Vec<f64>,
    pub loglik: f64,
    pub evals: usize,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub model: CovarianceModel,
    pub loglik: f64,
    pub stages: Vec<FitStage>,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
}

/// Maximizes `objective(m, model)` over the free parameters by Nelder-Mead in
/// log space, one stage per entry of `m_schedule`, each started from the
/// previous optimum. Evaluations that fail or leave the bounds count as
/// `-inf`.
pub fn mle_fit<F>(
    template: &CovarianceModel,
    free: &[ParamBounds],
    m_schedule: &[usize],
    options: FitOptions,
    mut objective: F,
) -> Result<FitResult>
where
    F: FnMut(usize, &CovarianceModel) -> Result<f64>,
{
    if free.is_empty() || free.len() > 3 {
        return Err(InferenceError::InvalidArgument(
            "between one and three free parameters are supported".into(),
        ));
    }
    if m_schedule.is_empty() {
        return Err(InferenceError::InvalidArgument("empty m schedule".into()));
    }
    for b in free {
        if !(b.lower > 0.0 && b.upper > b.lower && b.upper.is_finite()) {
            return Err(InferenceError::InvalidArgument(format!(
                "bounds for {} must satisfy 0 < lower < upper",
                b.param.name()
            )));
        }
    }
    let to_model = |theta: &[f64]| -> Option<CovarianceModel> {
        let mut m = *template;
        for (b, &t) in free.iter().zip(theta) {
            let v = t.exp();
            if !(v >= b.lower && v <= b.upper) {
                return None;
            }
            m = b.param.set(&m, v).ok()?;
        }
        Some(m)
    };
    let mut x: Vec<f64> = free
        .iter()
        .map(|b| b.param.get(template).clamp(b.lower, b.upper).ln())
        .collect();
    let mut stages = Vec::new();
    let mut trace = Vec::new();
    let mut any_ok = false;
    let mut last = x.clone();
    for (stage, &m) in m_schedule.iter().enumerate() {
        let start = x.clone();
        let mut evals = 0;
        let mut f = |theta: &[f64]| -> f64 {
            evals += 1;
            last = theta.to_vec();
            let val = match to_model(theta) {
                Some(model) => objective(m, &model).ok().filter(|v| v.is_finite()),
                None => None,
            };
            if val.is_some() {
                any_ok = true;
            }
            trace.push(TraceRow {
                stage: stage + 1,
                m,
                eval_count: evals,
                params: theta.iter().map(|t| t.exp()).collect(),
                loglik: val.unwrap_or(f64::NEG_INFINITY),
            });
            val.map(|v| -v).unwrap_or(f64::INFINITY)
        };
        let (best, fbest, converged) =
            nelder_mead(&mut f, &x, options.step, options.tol, options.max_evals_per_stage);
        x = best;
        stages.push(FitStage {
            m,
            start,
            params: x.iter().map(|t| t.exp()).collect(),
            loglik: -fbest,
            evals,
            converged,
        });
    }
    if !any_ok {
        return Err(InferenceError::FitFailed {
            last: last.iter().map(|t| t.exp()).collect(),
        });
    }
    let last_stage = stages.last().expect("nonempty schedule");
    Ok(FitResult {
        model: to_model(&x).expect("optimum lies within bounds"),
        loglik: last_stage.loglik,
        converged: stages.iter().all(|s| s.converged),
        stages,
        trace,
    })
}

/// Minimizes `f`; returns the best point, its value and whether the simplex
/// shrank below `tol` before `max_evals` evaluations.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x0: &[f64],
    step: f64,
    tol: f64,
    max_evals: usize,
) -> (Vec<f64>, f64, bool) {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        f(x)
    };
    let f0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), f0));
    for k in 0..n {
        let mut x = x0.to_vec();
        x[k] += step;
        let mut fx = eval(&x, &mut evals);
        if !fx.is_finite() {
            x[k] = x0[k] - step;
            fx = eval(&x, &mut evals);
        }
        simplex.push((x, fx));
    }
    let cmp = |a: &(Vec<f64>, f64), b: &(Vec<f64>, f64)| {
        a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal)
    };
    loop {
        simplex.sort_by(cmp);
        let size = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if size < tol {
            return (simplex[0].0.clone(), simplex[0].1, true);
        }
        if evals >= max_evals {
            return (simplex[0].0.clone(), simplex[0].1, false);
        }
        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|(x, _)| x[k]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < worst.1 {
            let xc = along(0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(-0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < worst.1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let best = simplex[0].0.clone();
        for item in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = best.iter().zip(&item.0).map(|(b, v)| b + 0.5 * (v - b)).collect();
            let fx = eval(&x, &mut evals);
            *item = (x, fx);
        }
    }
}

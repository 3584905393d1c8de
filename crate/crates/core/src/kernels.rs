//! Matérn covariance with nugget.
//!
//! General smoothness goes through a modified Bessel function of the second
//! kind: Temme's series for small arguments, Steed's continued fraction for
//! `x >= 2`, and upward recurrence in the order.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::LocationSet;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("distance {0} is not a finite non-negative number")]
    Domain(f64),
    #[error("correlation 0.05 is not bracketed for scale in [{lo}, {hi}]")]
    Bracket { lo: f64, hi: f64 },
    #[error("location sets have dimensions {0} and {1}")]
    Shape(usize, usize),
}

/// Matérn parameters: variance, smoothness and range (scale).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    sigma2: f64,
    nu: f64,
    scale: f64,
}

impl MaternParams {
    pub fn new(sigma2: f64, nu: f64, scale: f64) -> Result<Self, KernelError> {
        positive("sigma2", sigma2)?;
        positive("nu", nu)?;
        positive("scale", scale)?;
        Ok(MaternParams { sigma2, nu, scale })
    }

    /// Exponential covariance `sigma2 * exp(-d / range)`.
    pub fn exponential(sigma2: f64, range: f64) -> Result<Self, KernelError> {
        Self::new(sigma2, 0.5, range)
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn correlation(&self, dist: f64) -> f64 {
        matern_correlation(self.nu, self.scale, dist)
    }

    pub fn covariance(&self, dist: f64) -> f64 {
        self.sigma2 * self.correlation(dist)
    }
}

fn positive(name: &'static str, value: f64) -> Result<(), KernelError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(KernelError::InvalidParameter {
            name,
            value,
            reason: "must be positive and finite",
        })
    }
}

/// Matérn process covariance plus i.i.d. nugget on observations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceModel {
    matern: MaternParams,
    tau2: f64,
}

impl CovarianceModel {
    pub fn new(matern: MaternParams, tau2: f64) -> Result<Self, KernelError> {
        if !(tau2 >= 0.0 && tau2.is_finite()) {
            return Err(KernelError::InvalidParameter {
                name: "tau2",
                value: tau2,
                reason: "must be non-negative and finite",
            });
        }
        Ok(CovarianceModel { matern, tau2 })
    }

    /// Total variance 1 split as `sigma2 = p`, `tau2 = 1 - p`.
    pub fn from_signal_proportion(p: f64, nu: f64, scale: f64) -> Result<Self, KernelError> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(KernelError::InvalidParameter {
                name: "signal_proportion",
                value: p,
                reason: "must lie in (0, 1]",
            });
        }
        Self::new(MaternParams::new(p, nu, scale)?, 1.0 - p)
    }

    pub fn matern(&self) -> &MaternParams {
        &self.matern
    }

    pub fn tau2(&self) -> f64 {
        self.tau2
    }

    pub fn signal_proportion(&self) -> f64 {
        self.matern.sigma2 / (self.matern.sigma2 + self.tau2)
    }

    /// Nugget indistinguishable from zero relative to the process variance.
    pub fn is_noiseless(&self) -> bool {
        self.tau2 < 1e-12 * self.matern.sigma2
    }

    pub fn with_matern(&self, matern: MaternParams) -> Self {
        CovarianceModel { matern, ..*self }
    }

    pub fn with_tau2(&self, tau2: f64) -> Result<Self, KernelError> {
        Self::new(self.matern, tau2)
    }
}

/// Matérn covariance at distance `dist`.
pub fn matern(params: &MaternParams, dist: f64) -> Result<f64, KernelError> {
    if !(dist >= 0.0 && dist.is_finite()) {
        return Err(KernelError::Domain(dist));
    }
    Ok(params.covariance(dist))
}

fn matern_correlation(nu: f64, scale: f64, dist: f64) -> f64 {
    if dist == 0.0 {
        return 1.0;
    }
    if nu == 0.5 {
        return (-dist / scale).exp();
    }
    if nu == 1.5 {
        let u = 3f64.sqrt() * dist / scale;
        return (1.0 + u) * (-u).exp();
    }
    if nu == 2.5 {
        let u = 5f64.sqrt() * dist / scale;
        return (1.0 + u + u * u / 3.0) * (-u).exp();
    }
    matern_correlation_bessel(nu, scale, dist)
}

/// General-ν path, exposed so tests can compare it against closed forms.
pub fn matern_correlation_bessel(nu: f64, scale: f64, dist: f64) -> f64 {
    if dist == 0.0 {
        return 1.0;
    }
    let u = (2.0 * nu).sqrt() * dist / scale;
    let ks = bessel_k_scaled(nu, u);
    if ks == 0.0 {
        return 0.0;
    }
    let log_c = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * u.ln() + ks.ln() - u;
    log_c.exp().min(1.0)
}

/// Scale `rho` such that the correlation at distance `lambda` equals 0.05.
pub fn effective_range_to_scale(nu: f64, lambda: f64) -> Result<f64, KernelError> {
    positive("nu", nu)?;
    positive("lambda", lambda)?;
    if nu == 0.5 {
        return Ok(lambda / 20f64.ln());
    }
    let f = |rho: f64| matern_correlation(nu, rho, lambda) - 0.05;
    let (mut lo, mut hi) = (lambda / 100.0, lambda * 100.0);
    if !(f(lo) < 0.0 && f(hi) > 0.0) {
        return Err(KernelError::Bracket { lo, hi });
    }
    while hi - lo > 1e-10 * 0.5 * (hi + lo) {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Which pair of variables a covariance block relates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovKind {
    /// latent-latent
    Yy,
    /// observed-latent
    Zy,
    /// observed-observed
    Zz,
}

/// A scalar variable of the joint vector: a location and whether it is the
/// noisy observation `z` (otherwise the latent `y`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    pub loc: usize,
    pub observed: bool,
}

/// Covariance between two lists of variables: the Matérn kernel, plus the
/// nugget only between an observed variable and itself.
pub fn var_cov(model: &CovarianceModel, s: &LocationSet, rows: &[Var], cols: &[Var]) -> DMatrix<f64> {
    let m = &model.matern;
    DMatrix::from_fn(rows.len(), cols.len(), |a, b| {
        let (va, vb) = (rows[a], cols[b]);
        let mut c = m.covariance(s.dist(va.loc, vb.loc));
        if va.observed && vb.observed && va.loc == vb.loc {
            c += model.tau2;
        }
        c
    })
}

/// Cross-covariance between point lists `rows` and `cols` of `s`.
///
/// For `Zz` the nugget is added where the row and column refer to the same
/// point, which is the only case `C(z_i, z_j)` differs from `K`.
pub fn cross_cov(
    model: &CovarianceModel,
    s: &LocationSet,
    rows: &[usize],
    cols: &[usize],
    kind: CovKind,
) -> DMatrix<f64> {
    let (ro, co) = match kind {
        CovKind::Yy => (false, false),
        CovKind::Zy => (true, false),
        CovKind::Zz => (true, true),
    };
    let rv: Vec<Var> = rows.iter().map(|&loc| Var { loc, observed: ro }).collect();
    let cv: Vec<Var> = cols.iter().map(|&loc| Var { loc, observed: co }).collect();
    var_cov(model, s, &rv, &cv)
}

/// Cross-covariance between two separate location sets (no shared points, so
/// no nugget except on the diagonal of a `Zz` block of a set with itself).
pub fn cross_cov_sets(
    model: &CovarianceModel,
    a: &LocationSet,
    b: &LocationSet,
    kind: CovKind,
) -> Result<DMatrix<f64>, KernelError> {
    if a.dim() != b.dim() {
        return Err(KernelError::Shape(a.dim(), b.dim()));
    }
    let same = a == b && kind == CovKind::Zz;
    let m = &model.matern;
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
        let mut c = m.covariance(crate::geom::euclidean(a.point(i), b.point(j)));
        if same && i == j {
            c += model.tau2;
        }
        c
    }))
}

/// JSON model description: `{sigma2, nu, range: {kind, value}, tau2}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub sigma2: f64,
    pub nu: f64,
    pub range: RangeSpec,
    pub tau2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeSpec {
    pub kind: RangeKind,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RangeKind {
    Scale,
    Effective,
}

impl ModelConfig {
    pub fn resolve(&self) -> Result<CovarianceModel, KernelError> {
        let scale = match self.range.kind {
            RangeKind::Scale => self.range.value,
            RangeKind::Effective => effective_range_to_scale(self.nu, self.range.value)?,
        };
        CovarianceModel::new(MaternParams::new(self.sigma2, self.nu, scale)?, self.tau2)
    }
}

/// `exp(x) * K_nu(x)` for `nu >= 0`, `x > 0`.
pub fn bessel_k_scaled(nu: f64, x: f64) -> f64 {
    debug_assert!(x > 0.0 && nu >= 0.0);
    let nl = (nu + 0.5).floor();
    let mu = nu - nl;
    let (mut k_mu, mut k_mu1) = if x < 2.0 {
        temme_series(mu, x)
    } else {
        steed_cf2(mu, x)
    };
    let two_over_x = 2.0 / x;
    for i in 1..=(nl as usize) {
        let next = (mu + i as f64) * two_over_x * k_mu1 + k_mu;
        k_mu = k_mu1;
        k_mu1 = next;
        if !k_mu1.is_finite() {
            break;
        }
    }
    k_mu
}

/// `K_nu(x)`.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    bessel_k_scaled(nu, x) * (-x).exp()
}

/// Scaled `(K_mu, K_{mu+1})` for `|mu| <= 1/2`, `x < 2`.
fn temme_series(mu: f64, x: f64) -> (f64, f64) {
    let half_x = 0.5 * x;
    let ln_half_x = half_x.ln();
    let pi_mu = std::f64::consts::PI * mu;
    let sigma = -mu * ln_half_x;
    let sinrat = if pi_mu.abs() < f64::EPSILON {
        1.0
    } else {
        pi_mu / pi_mu.sin()
    };
    let sinhrat = if sigma.abs() < f64::EPSILON {
        1.0
    } else {
        sigma.sinh() / sigma
    };
    let half_x_mu = (mu * ln_half_x).exp();
    let (g_1pmu, g_1mmu, g1, g2) = temme_gamma(mu);

    let mut fk = sinrat * (sigma.cosh() * g1 - sinhrat * ln_half_x * g2);
    let mut pk = 0.5 / half_x_mu * g_1pmu;
    let mut qk = 0.5 * half_x_mu * g_1mmu;
    let mut hk = pk;
    let mut ck = 1.0;
    let mut sum0 = fk;
    let mut sum1 = hk;
    for k in 1..15000 {
        let kf = k as f64;
        fk = (kf * fk + pk + qk) / (kf * kf - mu * mu);
        ck *= half_x * half_x / kf;
        pk /= kf - mu;
        qk /= kf + mu;
        hk = -kf * fk + pk;
        let d0 = ck * fk;
        let d1 = ck * hk;
        sum0 += d0;
        sum1 += d1;
        if d0.abs() < 0.5 * sum0.abs() * f64::EPSILON {
            break;
        }
    }
    let ex = x.exp();
    (sum0 * ex, sum1 * 2.0 / x * ex)
}

/// Scaled `(K_mu, K_{mu+1})` for `|mu| <= 1/2`, `x >= 2`.
fn steed_cf2(mu: f64, x: f64) -> (f64, f64) {
    let mut bi = 2.0 * (1.0 + x);
    let mut di = 1.0 / bi;
    let mut delhi = di;
    let mut hi = di;
    let mut qi = 0.0;
    let mut qip1 = 1.0;
    let mut ai = -(0.25 - mu * mu);
    let a1 = ai;
    let mut ci = -ai;
    let mut bqi = -ai;
    let mut s = 1.0 + bqi * delhi;
    for i in 2..10000 {
        ai -= 2.0 * (i - 1) as f64;
        ci = -ai * ci / i as f64;
        let tmp = (qi - bi * qip1) / ai;
        qi = qip1;
        qip1 = tmp;
        bqi += ci * qip1;
        bi += 2.0;
        di = 1.0 / (bi + ai * di);
        delhi = (bi * di - 1.0) * delhi;
        hi += delhi;
        let dels = bqi * delhi;
        s += dels;
        if (dels / s).abs() < f64::EPSILON {
            break;
        }
    }
    hi *= -a1;
    let k_mu = (std::f64::consts::PI / (2.0 * x)).sqrt() / s;
    let k_mu1 = k_mu * (mu + x + 0.5 - hi) / x;
    (k_mu, k_mu1)
}

const G1_CHEB: [f64; 14] = [
    -1.145_164_083_662_683_1,
    0.006_360_853_113_470_843,
    0.001_862_451_930_072_068_5,
    0.000_152_833_085_873_453_5,
    0.000_017_017_464_011_802_04,
    -6.459_750_292_334_725e-7,
    -5.181_984_843_251_938e-8,
    4.518_909_289_485_818e-10,
    3.243_322_737_102_087e-11,
    6.830_943_402_494_752e-13,
    2.835_350_275_517_21e-14,
    -7.988_390_576_932_36e-16,
    -3.372_667_730_077_195e-17,
    -3.658_633_480_921_052e-20,
];

const G2_CHEB: [f64; 15] = [
    1.882_645_524_949_671_8,
    -0.077_490_658_396_167_52,
    -0.018_256_714_847_324_93,
    0.000_633_803_020_907_489_6,
    0.000_076_229_054_350_872_9,
    -9.550_164_756_172_044e-7,
    -8.892_726_810_788_635e-8,
    -1.952_133_477_231_961_4e-9,
    -9.400_305_273_588_516e-11,
    4.687_513_384_953_239e-12,
    2.265_853_574_692_576e-13,
    -1.172_550_969_848_801_5e-15,
    -7.044_133_820_024_522e-17,
    -2.437_787_831_010_769_4e-18,
    -7.522_524_321_825_39e-20,
];

fn cheb_eval(c: &[f64], x: f64) -> f64 {
    let y2 = 2.0 * x;
    let (mut d, mut dd) = (0.0, 0.0);
    for &cj in c[1..].iter().rev() {
        let tmp = d;
        d = y2 * d - dd + cj;
        dd = tmp;
    }
    x * d - dd + 0.5 * c[0]
}

/// `(Γ(1+mu), Γ(1-mu), Γ1(mu), Γ2(mu))` for `|mu| <= 1/2`.
fn temme_gamma(mu: f64) -> (f64, f64, f64, f64) {
    let x = 4.0 * mu.abs() - 1.0;
    let g1 = cheb_eval(&G1_CHEB, x);
    let g2 = cheb_eval(&G2_CHEB, x);
    (1.0 / (g2 - mu * g1), 1.0 / (g2 + mu * g1), g1, g2)
}

/// Natural log of the gamma function (Lanczos, g = 7), `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

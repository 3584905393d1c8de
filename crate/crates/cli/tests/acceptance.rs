//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//! Tests hold a shared lock so their wall-clock budgets are measured without
//! contention.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use vecchia::dag::{d_separated, Dag};
use vecchia::geom::{coord_order, grid_locations, maxmin_order, Grouping, LocationSet, Ordering};
use vecchia::inference::{
    assemble_u, exact_logdet_x, integrated_loglik, kl_joint_x, kl_joint_x_with, vecchia_loglik,
    x_vars,
};
use vecchia::kernels::{
    effective_range_to_scale, var_cov, CovarianceModel, MaternParams, Var,
};
use vecchia::plan::{
    build_q, make_fsa, make_independent_blocks, make_mpp, singleton_plan, ConditioningRule,
    Partition, VecchiaPlan,
};
use vecchia_cli::config::{knot_grid, ExperimentConfig};
use vecchia_cli::experiments::{mean_ci, run_estimation_study, run_kl_grid, v_column_stats};
use vecchia_cli::output::Table;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written to the raw stderr handle, which the test harness does not capture,
/// so the line shows up in a plain `cargo test` log.
fn report(id: u32, name: &str, pass: bool, detail: String) {
    let _ = writeln!(
        std::io::stderr(),
        "[{}] criterion {id:>2} {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn model(sigma2: f64, nu: f64, scale: f64, tau2: f64) -> CovarianceModel {
    CovarianceModel::new(MaternParams::new(sigma2, nu, scale).unwrap(), tau2).unwrap()
}

fn uniform_points(rng: &mut ChaCha20Rng, n: usize, dim: usize) -> LocationSet {
    LocationSet::new(
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect(),
    )
    .unwrap()
}

fn normals(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Dense Gaussian log density via nalgebra's Cholesky.
fn oracle_logpdf(cov: &DMatrix<f64>, z: &[f64]) -> f64 {
    let n = z.len();
    let ch = Cholesky::new(cov.clone()).expect("SPD");
    let zv = DVector::from_column_slice(z);
    let sol = ch.solve(&zv);
    let logdet = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + zv.dot(&sol))
}

fn oracle_logdet(a: &DMatrix<f64>) -> f64 {
    2.0 * Cholesky::new(a.clone())
        .expect("SPD")
        .l()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
}

fn obs_cov(m: &CovarianceModel, s: &LocationSet, idx: &[usize]) -> DMatrix<f64> {
    let v: Vec<Var> = idx.iter().map(|&loc| Var { loc, observed: true }).collect();
    var_cov(m, s, &v, &v)
}

fn submatrix(a: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

#[test]
fn criterion_01_exactness_recovery() {
    let _g = serial();
    let t0 = Instant::now();
    let mut worst_ll: f64 = 0.0;
    let mut worst_kl: f64 = 0.0;
    let settings = [(60, 0.5, 0.1), (150, 1.5, 0.5), (300, 0.5, 1.0)];
    for (k, &(n, nu, tau2)) in settings.iter().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(100 + k as u64);
        let s = uniform_points(&mut rng, n, 2);
        let m = model(1.0, nu, 0.1, tau2);
        let z = normals(&mut rng, n);
        let exact = oracle_logpdf(&obs_cov(&m, &s, &(0..n).collect::<Vec<_>>()), &z);
        let base = singleton_plan(&s, &maxmin_order(&s), &ConditioningRule::FirstM { m: n }).unwrap();
        for part in Partition::ALL {
            let plan = base.apply(part);
            let ll = vecchia_loglik(&plan, &m, &plan.gather(&z)).unwrap().loglik;
            worst_ll = worst_ll.max((ll - exact).abs() / exact.abs());
        }
        for part in [Partition::Latent, Partition::Sgv] {
            worst_kl = worst_kl.max(kl_joint_x(&base.apply(part), &m).unwrap().abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    report(
        1,
        "exactness recovery",
        worst_ll < 1e-8 && worst_kl < 1e-8 && secs < 10.0,
        format!("max rel loglik err {worst_ll:.2e} (<1e-8), max |KL_x| {worst_kl:.2e} (<1e-8), {secs:.1}s (<10s)"),
    );
}

struct RandomInstance {
    plan: VecchiaPlan,
    model: CovarianceModel,
}

/// Random geometry, ordering, block sizes, conditioning rule, observation
/// pattern and partition, with at most 60 blocks.
fn random_instance(seed: u64) -> RandomInstance {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let dim = rng.random_range(1..=2);
    let n = rng.random_range(5..=60);
    let s = jittered_points(&mut rng, n, dim);
    let order = match rng.random_range(0..3) {
        0 => coord_order(&s),
        1 => maxmin_order(&s),
        _ => {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            Ordering::new(p).unwrap()
        }
    };
    let mut blocks = Vec::new();
    let mut pos = 0;
    while pos < n {
        let r = rng.random_range(1..=3).min(n - pos);
        blocks.push(order.as_slice()[pos..pos + r].to_vec());
        pos += r;
    }
    let grouping = Grouping::new(blocks.clone(), n).unwrap();
    let mm = rng.random_range(0..=5);
    let rule = if rng.random_bool(0.5) {
        ConditioningRule::NearestPrevious { m: mm }
    } else {
        ConditioningRule::FirstM { m: mm }
    };
    let q = build_q(&s, &grouping, &rule).unwrap();
    let observed: Vec<bool> = (0..blocks.len()).map(|_| rng.random_bool(0.8)).collect();
    let partition = Partition::ALL[rng.random_range(0..3)];
    let plan = VecchiaPlan::new(s, blocks, observed, q).unwrap().apply(partition);
    let nu = [0.5, 0.8, 1.5][rng.random_range(0..3)];
    let model = model(
        rng.random_range(0.5..2.0),
        nu,
        rng.random_range(0.05..0.3),
        rng.random_range(0.05..1.0),
    );
    RandomInstance { plan, model }
}

/// `n` points in distinct cells of a regular grid on the unit cube, jittered
/// within their cells, so no two points nearly coincide.
fn jittered_points(rng: &mut ChaCha20Rng, n: usize, dim: usize) -> LocationSet {
    let side = (n as f64).powf(1.0 / dim as f64).ceil() as usize;
    let mut cells: Vec<usize> = (0..side.pow(dim as u32)).collect();
    cells.shuffle(rng);
    let h = 1.0 / side as f64;
    LocationSet::new(
        cells[..n]
            .iter()
            .map(|&c| {
                (0..dim)
                    .map(|d| {
                        let k = (c / side.pow(d as u32)) % side;
                        (k as f64 + 0.5 + rng.random_range(-0.3..0.3)) * h
                    })
                    .collect()
            })
            .collect(),
    )
    .unwrap()
}

fn spd_inverse(a: DMatrix<f64>) -> DMatrix<f64> {
    Cholesky::new(a).expect("SPD").inverse()
}

/// Precision of the joint implied by the conditional regressions,
/// `(I - A)' D^-1 (I - A)`, built from the dense covariance of `x`.
fn brute_force_precision(plan: &VecchiaPlan, m: &CovarianceModel) -> DMatrix<f64> {
    let lay = plan.layout();
    let vars = x_vars(plan);
    let c = var_cov(m, plan.locations(), &vars, &vars);
    let n = vars.len();
    let mut a = DMatrix::zeros(n, n);
    let mut dinv = DMatrix::zeros(n, n);
    for i in 0..plan.len() {
        let mut parents: Vec<usize> = plan.qy(i).iter().flat_map(|&j| lay.range(lay.y_vertex[j])).collect();
        parents.extend(plan.qz(i).iter().flat_map(|&j| lay.range(lay.z_vertex[j].unwrap())));
        let mut vertices = vec![(lay.y_vertex[i], parents)];
        if let Some(zv) = lay.z_vertex[i] {
            vertices.push((zv, lay.range(lay.y_vertex[i]).collect()));
        }
        for (v, g) in vertices {
            let rows: Vec<usize> = lay.range(v).collect();
            let cvv = submatrix(&c, &rows, &rows);
            let (b, d) = if g.is_empty() {
                (DMatrix::zeros(rows.len(), 0), cvv)
            } else {
                let cgg_inv = spd_inverse(submatrix(&c, &g, &g));
                let cvg = submatrix(&c, &rows, &g);
                let b = &cvg * cgg_inv;
                let d = cvv - &b * cvg.transpose();
                (b, d)
            };
            let d_inv = spd_inverse(d);
            for (ri, &r) in rows.iter().enumerate() {
                for (gi, &gc) in g.iter().enumerate() {
                    a[(r, gc)] = b[(ri, gi)];
                }
                for (rj, &r2) in rows.iter().enumerate() {
                    dinv[(r, r2)] = d_inv[(ri, rj)];
                }
            }
        }
    }
    let ia = DMatrix::identity(n, n) - a;
    ia.transpose() * dinv * ia
}

#[test]
fn criterion_02_factorization_identity() {
    let _g = serial();
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let inst = random_instance(seed);
        let u = assemble_u(&inst.plan, &inst.model).unwrap().u.to_dense();
        let q = brute_force_precision(&inst.plan, &inst.model);
        worst = worst.max(rel_frobenius(&(&u * u.transpose()), &q));
    }
    let secs = t0.elapsed().as_secs_f64();
    report(
        2,
        "U U' equals brute-force precision",
        worst < 1e-10 && secs < 30.0,
        format!("50 random plans, max rel Frobenius {worst:.2e} (<1e-10), {secs:.1}s (<30s)"),
    );
}

#[test]
fn criterion_03_integrated_likelihood_identity() {
    let _g = serial();
    let mut worst: f64 = 0.0;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    for seed in 0..50 {
        let inst = random_instance(seed);
        let lay = inst.plan.layout();
        let ys = lay.y_scalars();
        let zs = lay.z_scalars();
        let mut rng = ChaCha20Rng::seed_from_u64(1000 + seed);
        let z = normals(&mut rng, zs.len());
        let q = brute_force_precision(&inst.plan, &inst.model);
        let qzz = submatrix(&q, &zs, &zs);
        let zv = DVector::from_column_slice(&z);
        let log_joint = -0.5
            * (q.nrows() as f64 * ln2pi - oracle_logdet(&q) + zv.dot(&(&qzz * &zv)));
        let w = submatrix(&q, &ys, &ys);
        let qyz = submatrix(&q, &ys, &zs);
        let mu = -Cholesky::new(w.clone()).unwrap().solve(&(qyz * &zv));
        let log_post = -0.5 * (ys.len() as f64 * ln2pi - oracle_logdet(&w) + mu.dot(&(&w * &mu)));
        let expected = log_joint - log_post;
        let got = integrated_loglik(&assemble_u(&inst.plan, &inst.model).unwrap(), &z)
            .unwrap()
            .loglik;
        worst = worst.max((got - expected).abs() / expected.abs().max(1.0));
    }
    report(
        3,
        "integrated likelihood equals joint over posterior at y = 0",
        worst < 1e-10,
        format!("50 random plans, max rel err {worst:.2e} (<1e-10)"),
    );
}

#[test]
fn criterion_04_kl_ordering() {
    let _g = serial();
    let t0 = Instant::now();
    let mut min_slack = f64::INFINITY;
    let trials = 200;
    for seed in 0..trials {
        let mut rng = ChaCha20Rng::seed_from_u64(5000 + seed);
        let dim = rng.random_range(1..=2);
        let n = rng.random_range(10..=80);
        let s = uniform_points(&mut rng, n, dim);
        let order = if rng.random_bool(0.5) { maxmin_order(&s) } else { coord_order(&s) };
        let mm = rng.random_range(1..=6);
        let rule = if rng.random_bool(0.7) {
            ConditioningRule::NearestPrevious { m: mm }
        } else {
            ConditioningRule::FirstM { m: mm }
        };
        let nu = [0.5, 1.0, 1.5, 2.5][rng.random_range(0..4)];
        let m = model(1.0, nu, rng.random_range(0.05..0.4), rng.random_range(0.05..2.0));
        let base = singleton_plan(&s, &order, &rule).unwrap();
        let ld = exact_logdet_x(&base, &m).unwrap();
        let kl = |p: Partition| kl_joint_x_with(&base.apply(p), &m, ld).unwrap();
        let (l, g, st) = (kl(Partition::Latent), kl(Partition::Sgv), kl(Partition::Standard));
        min_slack = min_slack.min(g - l).min(st - g);
    }
    let secs = t0.elapsed().as_secs_f64();
    report(
        4,
        "KL_x latent <= SGV <= standard",
        min_slack >= -1e-9 && secs < 120.0,
        format!("{trials} triples, min slack {min_slack:.2e} (>= -1e-9), {secs:.1}s (<120s)"),
    );
}

fn sgv_maxmin_nn(s: &LocationSet, m: usize) -> VecchiaPlan {
    singleton_plan(s, &maxmin_order(s), &ConditioningRule::NearestPrevious { m })
        .unwrap()
        .apply(Partition::Sgv)
}

#[test]
fn criterion_05_sgv_column_counts() {
    let _g = serial();
    let mdl = model(0.5, 0.5, 0.3, 0.5);
    let mut violations = Vec::new();
    let mut checked = 0;
    for side in [10, 20, 30, 40, 50] {
        let s = grid_locations(2, side, 1.0 / (side - 1) as f64).unwrap();
        for m in [5, 8, 10] {
            let (max_off, _) = v_column_stats(&sgv_maxmin_nn(&s, m), &mdl).unwrap();
            checked += 1;
            if max_off > m {
                violations.push(format!("{side}x{side} m={m}: {max_off}"));
            }
        }
    }
    report(
        5,
        "SGV columns of V have <= m off-diagonal nonzeros",
        violations.is_empty(),
        format!("{checked} grids up to 50x50, violations: {violations:?}"),
    );
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn criterion_06_latent_fill_scaling() {
    let _g = serial();
    let t0 = Instant::now();
    let mdl = model(0.5, 0.5, 0.3, 0.5);
    let m = 8;
    let mut ln_n = Vec::new();
    let mut ln_max = Vec::new();
    let mut ratios = Vec::new();
    for side in [20, 30, 40, 50] {
        let s = grid_locations(2, side, 1.0 / (side - 1) as f64).unwrap();
        let plan = singleton_plan(&s, &coord_order(&s), &ConditioningRule::NearestPrevious { m })
            .unwrap()
            .apply(Partition::Latent);
        let (max_off, _) = v_column_stats(&plan, &mdl).unwrap();
        let n = s.len() as f64;
        ln_n.push(n.ln());
        ln_max.push((max_off as f64).ln());
        ratios.push(max_off as f64 / n.sqrt());
    }
    let b = slope(&ln_n, &ln_max);
    let t_m = (2.0 * m as f64 / std::f64::consts::PI).sqrt();
    let level = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let secs = t0.elapsed().as_secs_f64();
    report(
        6,
        "latent V fill grows like t_m sqrt(n)",
        (b - 0.5).abs() <= 0.1 && (level / t_m - 1.0).abs() <= 0.3 && secs < 120.0,
        format!(
            "slope {b:.3} (0.5 +/- 0.1), max/sqrt(n) {level:.3} vs t_m {t_m:.3} (within 30%), per-size ratios {ratios:.3?}, {secs:.1}s"
        ),
    );
}

#[test]
fn criterion_07_markov_screening() {
    let _g = serial();
    let n = 100;
    let s = grid_locations(1, n, 1.0 / (n - 1) as f64).unwrap();
    let kl_for = |nu: f64, m: usize| {
        let mdl = model(0.5, nu, effective_range_to_scale(nu, 0.9).unwrap(), 0.5);
        let plan = singleton_plan(&s, &coord_order(&s), &ConditioningRule::NearestPrevious { m })
            .unwrap()
            .apply(Partition::Latent);
        kl_joint_x(&plan, &mdl).unwrap()
    };
    let k1 = kl_for(0.5, 1);
    let k2 = kl_for(1.5, 2);
    report(
        7,
        "Markov screening in 1-D",
        k1.abs() < 1e-10 && k2 < 1e-4,
        format!("nu=0.5 m=1 KL_x {k1:.2e} (<1e-10); nu=1.5 m=2 KL_x {k2:.2e} (<1e-4)"),
    );
}

#[test]
fn criterion_08_special_cases() {
    let _g = serial();
    let mut errs: Vec<(String, f64)> = Vec::new();
    let s = grid_locations(2, 8, 1.0 / 7.0).unwrap();
    let mdl = model(1.3, 0.5, 0.25, 0.4);
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let z = normals(&mut rng, s.len());

    let mut worst: f64 = 0.0;
    for bps in [2, 4] {
        let plan = make_independent_blocks(&s, bps).unwrap();
        let ll = vecchia_loglik(&plan, &mdl, &plan.gather(&z)).unwrap().loglik;
        let sum: f64 = plan
            .blocks()
            .iter()
            .map(|b| {
                let zb: Vec<f64> = b.iter().map(|&i| z[i]).collect();
                oracle_logpdf(&obs_cov(&mdl, &s, b), &zb)
            })
            .sum();
        worst = worst.max((ll - sum).abs() / sum.abs());
    }
    errs.push(("independent blocks".into(), worst));

    let data = grid_locations(2, 6, 0.2).unwrap();
    let knots = knot_grid(&data, 3).unwrap();
    let implied_cov = |plan: &VecchiaPlan| {
        let u = assemble_u(plan, &mdl).unwrap().u.to_dense();
        (&u * u.transpose()).try_inverse().unwrap()
    };
    let latent_of = |plan: &VecchiaPlan| -> Vec<(usize, usize)> {
        x_vars(plan)
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.observed)
            .map(|(k, v)| (k, v.loc))
            .collect()
    };
    let mut worst_var: f64 = 0.0;
    let mut worst_cross: f64 = 0.0;
    for (name, plan) in [
        ("mpp", make_mpp(&data, &knots).unwrap()),
        ("fsa", make_fsa(&data, &knots, 2).unwrap()),
    ] {
        let c = implied_cov(&plan);
        let lat = latent_of(&plan);
        for &(k, _) in &lat {
            worst_var = worst_var.max((c[(k, k)] - mdl.matern().sigma2()).abs());
        }
        if name == "fsa" {
            let all = plan.locations();
            let kn: Vec<Var> = plan.block(0).iter().map(|&loc| Var { loc, observed: false }).collect();
            let kk_inv = var_cov(&mdl, all, &kn, &kn).try_inverse().unwrap();
            let block_of: Vec<usize> = {
                let mut b = vec![0; all.len()];
                for (i, blk) in plan.blocks().iter().enumerate() {
                    for &l in blk {
                        b[l] = i;
                    }
                }
                b
            };
            for &(ka, la) in &lat {
                for &(kb, lb) in &lat {
                    if la == lb || block_of[la] == 0 || block_of[lb] == 0 || block_of[la] == block_of[lb] {
                        continue;
                    }
                    let va = [Var { loc: la, observed: false }];
                    let vb = [Var { loc: lb, observed: false }];
                    let pp = var_cov(&mdl, all, &va, &kn) * &kk_inv * var_cov(&mdl, all, &kn, &vb);
                    worst_cross = worst_cross.max((c[(ka, kb)] - pp[(0, 0)]).abs());
                }
            }
        }
    }
    errs.push(("mpp/fsa marginal variance".into(), worst_var));
    errs.push(("fsa cross-covariance".into(), worst_cross));

    let pts = uniform_points(&mut rng, 40, 2);
    let zz = normals(&mut rng, 40);
    let plan = singleton_plan(&pts, &maxmin_order(&pts), &ConditioningRule::NearestPrevious { m: 4 })
        .unwrap()
        .apply(Partition::Standard);
    let ll = vecchia_loglik(&plan, &mdl, &plan.gather(&zz)).unwrap().loglik;
    let mut direct = 0.0;
    for i in 0..plan.len() {
        let me = plan.block(i)[0];
        let cond: Vec<usize> = plan.q(i).iter().map(|&j| plan.block(j)[0]).collect();
        let mut idx = cond.clone();
        idx.push(me);
        let cov = obs_cov(&mdl, &pts, &idx);
        let vals: Vec<f64> = idx.iter().map(|&l| zz[l]).collect();
        direct += oracle_logpdf(&cov, &vals);
        if !cond.is_empty() {
            direct -= oracle_logpdf(&obs_cov(&mdl, &pts, &cond), &vals[..cond.len()]);
        }
    }
    errs.push(("standard product form".into(), (ll - direct).abs() / direct.abs()));

    let pass = errs.iter().all(|(_, e)| *e < 1e-10);
    let detail = errs
        .iter()
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(8, "special-case identities", pass, format!("{detail} (all <1e-10)"));
}

fn grid_config(extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(r#"{{ "scenario": "acceptance", {extra} }}"#)).unwrap()
}

/// Mean of `kl_z` over replicates for rows matching method and ordering.
fn mean_kl(t: &Table, method: &str, ordering: &str, conditioning: &str) -> f64 {
    let (cm, co, cc, ck) = (
        t.column("method").unwrap(),
        t.column("ordering").unwrap(),
        t.column("conditioning").unwrap(),
        t.column("kl_z").unwrap(),
    );
    let v: Vec<f64> = t
        .rows
        .iter()
        .filter(|r| r[cm] == method && r[co] == ordering && r[cc] == conditioning)
        .map(|r| r[ck].parse().unwrap())
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_09_ordering_and_partition_directions() {
    let _g = serial();
    let mut methods = Vec::new();
    for p in ["sgv", "latent", "standard"] {
        for o in ["maxmin", "coord"] {
            methods.push(format!(
                r#"{{"kind": "vecchia", "partition": "{p}", "ordering": "{o}", "conditioning": "nn", "m": 5}}"#
            ));
        }
    }
    let cfg = grid_config(&format!(
        r#""geometry": {{"kind": "jittered_grid", "dim": 2, "points_per_side": 20, "spacing": {}, "jitter": 0.2}},
        "model": {{"sigma2": 0.5, "nu": 0.5, "range": {{"kind": "effective", "value": 0.9}}, "tau2": 0.5}},
        "methods": [{}], "replicates": 5, "seed": 9,
        "kl": {{"nu": [0.5], "snr": [1.0]}}"#,
        1.0 / 19.0,
        methods.join(",")
    ));
    let out = run_kl_grid(&cfg).unwrap();
    let t = out.table("kl_grid").unwrap();
    let k = |p: &str, o: &str| mean_kl(t, p, o, "nn");
    let (sm, sc, lm, lc, stm, stc) = (
        k("sgv", "maxmin"),
        k("sgv", "coord"),
        k("latent", "maxmin"),
        k("latent", "coord"),
        k("standard", "maxmin"),
        k("standard", "coord"),
    );
    let pass = out.failures == 0 && sm <= sc && lm <= lc && sm <= stm;
    report(
        9,
        "maxmin beats coord; SGV beats standard (KL_z, n_z=400)",
        pass,
        format!(
            "mean KL_z over 5 jitters: sgv maxmin {sm:.4} coord {sc:.4}; latent maxmin {lm:.4} coord {lc:.4}; standard maxmin {stm:.4} coord {stc:.4}"
        ),
    );
}

#[test]
fn criterion_10_first_m_beats_nn_for_smooth_fields() {
    let _g = serial();
    let cfg = grid_config(&format!(
        r#""geometry": {{"kind": "grid", "dim": 2, "points_per_side": 20, "spacing": {}}},
        "model": {{"sigma2": 0.5, "nu": 3.0, "range": {{"kind": "effective", "value": 2.0}}, "tau2": 0.5}},
        "methods": [
            {{"kind": "vecchia", "partition": "sgv", "ordering": "maxmin", "conditioning": "first_m", "m": 16}},
            {{"kind": "vecchia", "partition": "sgv", "ordering": "maxmin", "conditioning": "nn", "m": 16}}
        ],
        "kl": {{"nu": [3.0], "snr": [1.0]}}"#,
        1.0 / 19.0
    ));
    let out = run_kl_grid(&cfg).unwrap();
    let t = out.table("kl_grid").unwrap();
    let first = mean_kl(t, "sgv", "maxmin", "first_m");
    let nn = mean_kl(t, "sgv", "maxmin", "nn");
    report(
        10,
        "first-m conditioning beats NN for nu=3 (SGV)",
        out.failures == 0 && first <= nn,
        format!("KL_z first-m {first:.4e}, NN {nn:.4e}"),
    );
}

/// Paired per-replicate squared-error differences `a - factor * b` with a
/// normal-approximation 95% interval.
fn paired(t: &Table, a: &str, b: &str, factor: f64) -> (f64, f64, f64, f64, f64, usize) {
    let (cm, cr, cs) = (
        t.column("method").unwrap(),
        t.column("replicate").unwrap(),
        t.column("sq_error").unwrap(),
    );
    let mut by_rep: std::collections::BTreeMap<usize, (f64, f64)> = Default::default();
    for r in &t.rows {
        let rep: usize = r[cr].parse().unwrap();
        let se: f64 = r[cs].parse().unwrap_or(f64::NAN);
        let e = by_rep.entry(rep).or_insert((f64::NAN, f64::NAN));
        if r[cm] == a {
            e.0 = se;
        } else if r[cm] == b {
            e.1 = se;
        }
    }
    let pairs: Vec<(f64, f64)> = by_rep
        .values()
        .copied()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let d: Vec<f64> = pairs.iter().map(|(x, y)| x - factor * y).collect();
    let (dm, lo, hi) = mean_ci(&d);
    let mse_a = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64;
    let mse_b = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
    (mse_a, mse_b, dm, lo, hi, pairs.len())
}

#[test]
fn criterion_11_estimation_study() {
    let _g = serial();
    let t0 = Instant::now();
    let fit = r#""fit": {"free": [{"param": "range", "lower": 0.5, "upper": 200}]}"#;
    let small = grid_config(&format!(
        r#""geometry": {{"kind": "grid", "dim": 2, "points_per_side": 30, "spacing": 1}},
        "model": {{"sigma2": 2, "nu": 0.5, "range": {{"kind": "scale", "value": 10}}, "tau2": 1}},
        "methods": [
            {{"kind": "exact"}},
            {{"kind": "vecchia", "partition": "sgv", "ordering": "maxmin", "conditioning": "nn", "m": 20}}
        ],
        "replicates": 30, "seed": 2024, {fit}"#
    ));
    let out = run_estimation_study(&small).unwrap();
    let t = out.table("estimation").unwrap();
    let (mse_sgv, mse_exact, d1, lo1, hi1, n1) = paired(t, "sgv", "exact", 2.0);

    let large = grid_config(&format!(
        r#""geometry": {{"kind": "grid", "dim": 2, "points_per_side": 40, "spacing": 1}},
        "model": {{"sigma2": 2, "nu": 0.5, "range": {{"kind": "scale", "value": 12}}, "tau2": 1}},
        "methods": [
            {{"kind": "vecchia", "partition": "sgv", "ordering": "maxmin", "conditioning": "nn", "m": 20}},
            {{"kind": "pbl", "blocks_per_side": 10}}
        ],
        "replicates": 30, "seed": 2025, {fit}"#
    ));
    let out2 = run_estimation_study(&large).unwrap();
    let t2 = out2.table("estimation").unwrap();
    let (mse_sgv2, mse_pbl, d2, lo2, hi2, n2) = paired(t2, "sgv", "pbl10", 1.0);
    let secs = t0.elapsed().as_secs_f64();
    // A claim fails only when the interval lies entirely above zero.
    let pass = n1 == 30 && n2 == 30 && lo1 <= 0.0 && lo2 <= 0.0 && secs < 900.0;
    report(
        11,
        "scaled estimation study",
        pass,
        format!(
            "30x30: MSE sgv {mse_sgv:.3} exact {mse_exact:.3}, sgv - 2*exact {d1:.3} CI [{lo1:.3}, {hi1:.3}]; \
             40x40: MSE sgv {mse_sgv2:.3} pbl {mse_pbl:.3}, sgv - pbl {d2:.3} CI [{lo2:.3}, {hi2:.3}]; {secs:.0}s (<900s)"
        ),
    );
}

/// Every simple trail between `a` and `b` is blocked by `c`.
fn dsep_by_paths(parents: &[Vec<usize>], a: usize, b: usize, c: &BTreeSet<usize>) -> bool {
    let n = parents.len();
    let mut children = vec![Vec::new(); n];
    for (v, ps) in parents.iter().enumerate() {
        for &p in ps {
            children[p].push(v);
        }
    }
    let mut desc_in_c = vec![false; n];
    for v in 0..n {
        let mut stack = vec![v];
        let mut seen = vec![false; n];
        while let Some(u) = stack.pop() {
            if seen[u] {
                continue;
            }
            seen[u] = true;
            if c.contains(&u) {
                desc_in_c[v] = true;
                break;
            }
            stack.extend(children[u].iter().copied());
        }
    }
    let nbrs: Vec<Vec<usize>> = (0..n)
        .map(|v| parents[v].iter().chain(&children[v]).copied().collect())
        .collect();
    let is_parent = |p: usize, v: usize| parents[v].contains(&p);
    let mut path = vec![a];
    let mut on_path = vec![false; n];
    on_path[a] = true;
    fn walk(
        path: &mut Vec<usize>,
        on_path: &mut [bool],
        b: usize,
        nbrs: &[Vec<usize>],
        open: &dyn Fn(&[usize]) -> bool,
    ) -> bool {
        let last = *path.last().unwrap();
        if last == b {
            return open(path);
        }
        for &w in &nbrs[last] {
            if on_path[w] {
                continue;
            }
            path.push(w);
            on_path[w] = true;
            let found = walk(path, on_path, b, nbrs, open);
            on_path[w] = false;
            path.pop();
            if found {
                return true;
            }
        }
        false
    }
    let open = |p: &[usize]| {
        p.windows(3).all(|w| {
            let (x, v, y) = (w[0], w[1], w[2]);
            let collider = is_parent(x, v) && is_parent(y, v);
            if collider {
                desc_in_c[v]
            } else {
                !c.contains(&v)
            }
        })
    };
    !walk(&mut path, &mut on_path, b, &nbrs, &open)
}

#[test]
fn criterion_12_d_separation() {
    let _g = serial();
    let mut disagree_paths = 0;
    let mut disagree_corr = 0;
    let mut separated = 0;
    let mut max_zero_pc: f64 = 0.0;
    let mut min_nonzero_pc = f64::INFINITY;
    for seed in 0..500 {
        let mut rng = ChaCha20Rng::seed_from_u64(12_000 + seed);
        let n = rng.random_range(3..=12);
        let p_edge = rng.random_range(0.15..0.5);
        let parents: Vec<Vec<usize>> = (0..n)
            .map(|v| (0..v).filter(|_| rng.random_bool(p_edge)).collect())
            .collect();
        let dag = Dag::from_parents(parents.clone()).unwrap();
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n);
        while b == a {
            b = rng.random_range(0..n);
        }
        let c: BTreeSet<usize> = (0..n)
            .filter(|&v| v != a && v != b && rng.random_bool(0.3))
            .collect();
        let cv: Vec<usize> = c.iter().copied().collect();
        let got = d_separated(&dag, &[a], &[b], &cv).unwrap();
        if got != dsep_by_paths(&parents, a, b, &c) {
            disagree_paths += 1;
        }
        // Linear Gaussian model on the DAG with generic weights.
        let mut bmat = DMatrix::<f64>::zeros(n, n);
        for (v, ps) in parents.iter().enumerate() {
            for &p in ps {
                let w: f64 = rng.random_range(0.5..1.5);
                bmat[(v, p)] = if rng.random_bool(0.5) { w } else { -w };
            }
        }
        let noise = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(0.5..2.0)));
        let ib_inv = (DMatrix::identity(n, n) - bmat).try_inverse().unwrap();
        let sigma = &ib_inv * noise * ib_inv.transpose();
        let mut idx = vec![a, b];
        idx.extend(&cv);
        let prec = submatrix(&sigma, &idx, &idx).try_inverse().unwrap();
        let pc = (prec[(0, 1)] / (prec[(0, 0)] * prec[(1, 1)]).sqrt()).abs();
        let zero = pc < 1e-10;
        if got {
            separated += 1;
            max_zero_pc = max_zero_pc.max(pc);
        } else {
            min_nonzero_pc = min_nonzero_pc.min(pc);
        }
        if zero != got {
            disagree_corr += 1;
        }
    }
    report(
        12,
        "d-separation oracle",
        disagree_paths == 0 && disagree_corr == 0,
        format!(
            "500 DAGs ({separated} separated): path disagreements {disagree_paths}, partial-correlation disagreements {disagree_corr}; max |pc| when separated {max_zero_pc:.1e}, min when connected {min_nonzero_pc:.1e}"
        ),
    );
}

fn run_cli(cmd: &str, config: &Path, out: &Path, threads: usize) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_vecchia"))
        .args([cmd, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--seed", "77", "--threads", &threads.to_string()])
        .status()
        .expect("running the binary")
        .code()
        .unwrap_or(-1)
}

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn criterion_13_determinism() {
    let _g = serial();
    let root = std::env::temp_dir().join(format!("vecchia-acceptance-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let config = root.join("config.json");
    std::fs::write(
        &config,
        r#"{
  "scenario": "determinism",
  "geometry": {"kind": "jittered_grid", "dim": 2, "points_per_side": 8, "spacing": 0.125, "jitter": 0.2},
  "model": {"sigma2": 0.5, "nu": 1.5, "range": {"kind": "effective", "value": 0.6}, "tau2": 0.5},
  "methods": [
    {"kind": "vecchia", "partition": "sgv", "ordering": "maxmin", "conditioning": "nn", "m": 4},
    {"kind": "vecchia", "partition": "latent", "ordering": "coord", "conditioning": "first_m", "m": 3},
    {"kind": "exact"},
    {"kind": "pbl", "blocks_per_side": 2}
  ],
  "replicates": 3,
  "kl": {"nu": [0.5, 1.5], "snr": [1.0, null]},
  "sparsity": {"points_per_side": [4, 6]},
  "fit": {"free": [{"param": "range", "lower": 0.01, "upper": 5}, {"param": "sigma2", "lower": 0.01, "upper": 10}], "max_evals_per_stage": 60},
  "posterior": {"marginal_variances": true}
}"#,
    )
    .unwrap();
    // kl-grid, sparsity and posterior accept only Vecchia plans.
    let full = std::fs::read_to_string(&config).unwrap();
    let plans_only = full
        .replace(",\n    {\"kind\": \"exact\"},\n    {\"kind\": \"pbl\", \"blocks_per_side\": 2}", "");
    assert_ne!(plans_only, full);
    let plan_config = root.join("plans.json");
    std::fs::write(&plan_config, &plans_only).unwrap();
    let sparsity_config = root.join("sparsity.json");
    let text = plans_only
        .replace(r#""kind": "jittered_grid""#, r#""kind": "grid""#)
        .replace(r#", "jitter": 0.2"#, "");
    std::fs::write(&sparsity_config, text).unwrap();

    let commands = ["simulate", "loglik", "fit", "kl-grid", "sparsity", "estimation-study", "posterior"];
    let mut mismatched = Vec::new();
    let mut codes = Vec::new();
    for cmd in commands {
        let cfg = match cmd {
            "sparsity" => &sparsity_config,
            "kl-grid" | "posterior" => &plan_config,
            _ => &config,
        };
        let a = root.join(format!("{cmd}-a"));
        let b = root.join(format!("{cmd}-b"));
        let ca = run_cli(cmd, cfg, &a, 1);
        let cb = run_cli(cmd, cfg, &b, 2);
        codes.push(format!("{cmd}={ca}/{cb}"));
        let fa = if a.exists() { dir_files(&a) } else { Vec::new() };
        let fb = if b.exists() { dir_files(&b) } else { Vec::new() };
        if fa.is_empty() || fa != fb || ca != cb || ca != 0 {
            mismatched.push(cmd);
        }
    }
    let _ = std::fs::remove_dir_all(&root);
    report(
        13,
        "CLI determinism",
        mismatched.is_empty(),
        format!("7 commands run twice (1 and 2 threads); exit codes {codes:?}; mismatches {mismatched:?}"),
    );
}

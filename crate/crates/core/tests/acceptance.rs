//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdc_core::actuator::{saturate_deadzone, ConstraintParams};
use vdc_core::body::{coeff_to_symmetric, phi_to_pseudo, pseudo_to_phi, regressor, InertialParams, Vec10};
use vdc_core::chain::{mass_matrix, velocity_product_torques, ChainGeometry, ChainState};
use vdc_core::scenario::{default_scenario, ControllerKind, ScenarioConfig};
use vdc_core::sim::{metrics, run, run_ideal, SimLog, SimOptions};
use vdc_core::spatial::{rpy_rotation, Mat3, Vec3, Vec6};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

const DEG: f64 = std::f64::consts::PI / 180.0;

fn column_group(log: &SimLog, prefix: &str) -> Vec<Vec<f64>> {
    (1..)
        .map_while(|i| log.column(&format!("{prefix}{i}")))
        .collect()
}

fn max_abs_all(cols: &[Vec<f64>]) -> f64 {
    cols.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
}

struct Runs {
    vdc: Result<SimLog, String>,
    vdc_elapsed: Duration,
    vdc_again: Result<SimLog, String>,
    pd: Result<SimLog, String>,
    config: ScenarioConfig,
}

fn simulate(config: &ScenarioConfig, kind: ControllerKind) -> Result<SimLog, String> {
    let mut c = config.clone();
    c.run.controller = kind;
    run(&c, &SimOptions::default()).map_err(|f| f.to_string())
}

fn constraint_satisfaction(r: &Runs) -> Outcome {
    let log = match &r.vdc {
        Ok(l) => l,
        Err(e) => return outcome(false, format!("run aborted: {e}")),
    };
    let k_b = r.config.gains().k_b;
    let m = metrics(log, Some(k_b), 10.0);
    let max_ea = m.max_ea.iter().copied().fold(0.0, f64::max);
    let steady = m.steady_max_ea.iter().copied().fold(0.0, f64::max);
    let margin = k_b - max_ea;
    let secs = r.vdc_elapsed.as_secs_f64();
    let pass = (k_b - 3.0 * DEG).abs() < 1e-12
        && (r.config.run.duration - 40.0).abs() < 1e-12
        && (r.config.run.dt - 1e-3).abs() < 1e-15
        && max_ea < 3.0 * DEG
        && margin >= 0.5 * DEG
        && steady < 0.5 * DEG
        && secs < 30.0;
    outcome(
        pass,
        format!(
            "max|e_a| = {:.4} deg, margin {:.4} deg, steady max|e_a| = {:.4} deg, runtime {secs:.1} s",
            max_ea / DEG,
            margin / DEG,
            steady / DEG
        ),
    )
}

fn pd_comparison(r: &Runs) -> Outcome {
    let (vdc, pd) = match (&r.vdc, &r.pd) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return outcome(false, format!("run aborted: {e}")),
    };
    let gains = r.config.gains();
    let gains_ok = gains.k_p.iter().all(|k| *k == 100.0) && gains.k_v.iter().all(|k| *k == 15.0);
    let mv = metrics(vdc, None, 10.0);
    let mp = metrics(pd, None, 10.0);
    let ordered: Vec<bool> = mv.rms_e.iter().zip(&mp.rms_e).map(|(v, p)| v < p).collect();
    let pd_max = mp.max_e.iter().copied().fold(0.0, f64::max);
    let violated = mp.max_e.iter().filter(|e| **e > 3.0 * DEG).count();
    let pass = gains_ok && ordered.len() == r.config.dof() && ordered.iter().all(|b| *b) && violated >= 1;
    outcome(
        pass,
        format!(
            "RMS vdc < pd on {}/{} joints, PD max|e| = {:.3} deg on {violated} joint(s) above 3 deg",
            ordered.iter().filter(|b| **b).count(),
            ordered.len(),
            pd_max / DEG
        ),
    )
}

fn saturation_claim(r: &Runs) -> Outcome {
    let log = match &r.vdc {
        Ok(l) => l,
        Err(e) => return outcome(false, format!("run aborted: {e}")),
    };
    let limits: Vec<f64> = (0..r.config.dof()).map(|i| if i < 4 { 11.8 } else { 1.15 }).collect();
    let cmd = column_group(log, "tau_cmd");
    let steps = log.len();
    let inside = (0..steps)
        .filter(|&k| cmd.iter().zip(&limits).all(|(c, l)| c[k].abs() < *l))
        .count();
    let frac = inside as f64 / steps.max(1) as f64;
    outcome(
        cmd.len() == limits.len() && frac >= 0.99,
        format!("{:.4}% of {steps} steps strictly inside the limits", 100.0 * frac),
    )
}

fn telescoping_and_ideal(r: &Runs) -> Outcome {
    let log = match &r.vdc {
        Ok(l) => l,
        Err(e) => return outcome(false, format!("run aborted: {e}")),
    };
    let worst_res = log.column("vpf_residual").map(|c| c.iter().copied().fold(0.0, f64::max));
    let ideal = run_ideal(&r.config, r.config.run.duration);
    let (nu_ok, detail) = match &ideal {
        Ok(s) => {
            let worst = s.iter().map(|x| x.nu_dot).fold(f64::NEG_INFINITY, f64::max);
            (s.len() > 1 && worst <= 1e-6, format!("max nu_dot = {worst:.3e} over {} steps", s.len()))
        }
        Err(e) => (false, format!("ideal run aborted: {e}")),
    };
    let res_ok = matches!(worst_res, Some(w) if w < 1e-9);
    outcome(
        res_ok && nu_ok,
        format!("max relative telescoping residual {:.3e}; ideal case {detail}", worst_res.unwrap_or(f64::NAN)),
    )
}

// Oracle helpers: Newton-Euler about the centre of mass, written independently
// of the library's spatial algebra.

fn random_body<R: Rng>(rng: &mut R) -> (f64, Vec3, Mat3) {
    let m = rng.random_range(0.2..5.0);
    let com = Vec3::from_fn(|_, _| rng.random_range(-0.3..0.3));
    let a: f64 = rng.random_range(0.001..0.1);
    let b: f64 = rng.random_range(0.001..0.1);
    let c: f64 = rng.random_range((a - b).abs() + 1e-4..a + b);
    let r = rpy_rotation(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0));
    (m, com, r * Mat3::from_diagonal(&Vec3::new(a, b, c)) * r.transpose())
}

fn newton_euler(m: f64, c: &Vec3, ic: &Mat3, v: &Vec6, a: &Vec6, g: &Vec3) -> Vec6 {
    let lin = Vec3::new(v[0], v[1], v[2]);
    let w = Vec3::new(v[3], v[4], v[5]);
    let lin_dot = Vec3::new(a[0], a[1], a[2]);
    let w_dot = Vec3::new(a[3], a[4], a[5]);
    // acceleration of the centre of mass from the body-frame twist rate
    let acc_c = lin_dot + w.cross(&lin) + w_dot.cross(c) + w.cross(&w.cross(c));
    let f = (acc_c - g) * m;
    let n_c = ic * w_dot + w.cross(&(ic * w));
    let n = n_c + c.cross(&f);
    Vec6::new(f.x, f.y, f.z, n.x, n.y, n.z)
}

fn oracle_suites() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let samples = 10_000;
    let mut worst_a: f64 = 0.0;
    let mut worst_b: f64 = 0.0;
    let mut worst_c: f64 = 0.0;
    for _ in 0..samples {
        let (m, c, ic) = random_body(&mut rng);
        let phi = InertialParams::from_com(m, c, ic);
        let v = Vec6::from_fn(|_, _| rng.random_range(-3.0..3.0));
        let a = Vec6::from_fn(|_, _| rng.random_range(-10.0..10.0));
        let g = Vec3::from_fn(|_, _| rng.random_range(-10.0..10.0));
        let y = regressor(&v, &v, &a, &g).apply(&phi);
        let ne = newton_euler(m, &c, &ic, &v, &a, &g);
        worst_a = worst_a.max((y - ne).norm() / ne.norm().max(1.0));

        let s = Vec10::from_fn(|_, _| rng.random_range(-5.0..5.0));
        let lhs = phi.as_vec().dot(&s);
        let rhs = (phi_to_pseudo(&phi).matrix() * coeff_to_symmetric(&s)).trace();
        let scale = phi.as_vec().norm() * s.norm();
        worst_b = worst_b.max((lhs - rhs).abs() / scale.max(1.0));

        let back = pseudo_to_phi(&phi_to_pseudo(&phi)).expect("symmetric");
        let again = phi_to_pseudo(&back);
        let d1 = (back.as_vec() - phi.as_vec()).amax() / phi.as_vec().amax();
        let d2 = (again.matrix() - phi_to_pseudo(&phi).matrix()).amax() / again.matrix().amax();
        worst_c = worst_c.max(d1).max(d2);
    }

    // Hdot - 2C along random sinusoidal joint trajectories; C is half the
    // qdot-Jacobian of the quadratic velocity-product torques.
    let geom = default_scenario().geometry().expect("default geometry");
    let n = geom.dof();
    let mut worst_d: f64 = 0.0;
    for _ in 0..100 {
        let amp = DVector::from_fn(n, |_, _| rng.random_range(0.1..1.0));
        let omega = DVector::from_fn(n, |_, _| rng.random_range(0.2..3.0));
        let phase = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let q_at = |t: f64| DVector::from_fn(n, |i, _| amp[i] * (omega[i] * t + phase[i]).sin());
        let qd_at = |t: f64| DVector::from_fn(n, |i, _| amp[i] * omega[i] * (omega[i] * t + phase[i]).cos());
        for k in 0..5 {
            let t = k as f64 * 0.7;
            worst_d = worst_d.max(skew_defect(&geom, &q_at, ChainState { q: q_at(t), qdot: qd_at(t) }, t));
        }
    }
    let pass = worst_a < 1e-10 && worst_b < 1e-12 && worst_c < 1e-12 && worst_d < 1e-6;
    outcome(
        pass,
        format!("(a) {worst_a:.2e} (b) {worst_b:.2e} (c) {worst_c:.2e} (d) {worst_d:.2e}"),
    )
}

fn skew_defect(geom: &ChainGeometry, q_at: &dyn Fn(f64) -> DVector<f64>, s: ChainState, t: f64) -> f64 {
    let n = geom.dof();
    let d = 1e-3;
    let mut c = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut p = s.clone();
        let mut m = s.clone();
        p.qdot[j] += d;
        m.qdot[j] -= d;
        c.set_column(j, &((velocity_product_torques(geom, &p) - velocity_product_torques(geom, &m)) / (4.0 * d)));
    }
    let h = 1e-6;
    let hdot = (mass_matrix(geom, &geom.kinematics(&q_at(t + h))) - mass_matrix(geom, &geom.kinematics(&q_at(t - h)))) / (2.0 * h);
    let n_mat = hdot - c * 2.0;
    (&n_mat + n_mat.transpose()).amax()
}

fn consistency(r: &Runs) -> Outcome {
    let mut worst = f64::INFINITY;
    let mut finite = true;
    let mut runs = 0;
    for log in [&r.vdc, &r.vdc_again].into_iter().flatten() {
        runs += 1;
        for p in ["min_eig_b", "min_eig_j"] {
            for c in column_group(log, p) {
                worst = c.iter().copied().fold(worst, f64::min);
            }
        }
        for p in ["bregman_b", "bregman_j"] {
            finite &= column_group(log, p).iter().flatten().all(|v| v.is_finite());
        }
    }
    outcome(
        runs > 0 && worst > 0.0 && finite,
        format!("smallest eigenvalue {worst:.3e} over {runs} run(s), Bregman finite: {finite}"),
    )
}

fn boundedness(r: &Runs) -> Outcome {
    let log = match &r.vdc {
        Ok(l) => l,
        Err(e) => return outcome(false, format!("run aborted: {e}")),
    };
    let w = max_abs_all(&[column_group(log, "w_norm_b"), column_group(log, "w_norm_j")].concat());
    let eps = max_abs_all(&[column_group(log, "eps_norm_b"), column_group(log, "eps_norm_j")].concat());
    let phi = max_abs_all(&[column_group(log, "phi_norm_b"), column_group(log, "inertia_j")].concat());
    outcome(
        w.is_finite() && eps.is_finite() && phi.is_finite() && w < 1e3 && eps < 1e3 && phi < 1e3,
        format!("max |W| {w:.3e}, max |eps| {eps:.3e}, max |phi| {phi:.3e}"),
    )
}

fn actuator_grid() -> Outcome {
    let cases = [(ConstraintParams::symmetric(12.0, 0.2), 11.8), (ConstraintParams::symmetric(1.2, 0.05), 1.15)];
    let points = 100_000;
    let mut ok = true;
    for (p, level) in &cases {
        let span = 4.0 * level;
        let grid: Vec<f64> = (0..points).map(|k| -span + 2.0 * span * k as f64 / (points - 1) as f64).collect();
        let out: Vec<f64> = grid.iter().map(|x| saturate_deadzone(*x, p)).collect();
        ok &= out.windows(2).all(|w| w[0] <= w[1]);
        ok &= out.iter().all(|y| saturate_deadzone(*y, p) == *y);
        ok &= (out[0] + level).abs() < 1e-12 && (out[points - 1] - level).abs() < 1e-12;
        ok &= out.iter().all(|y| y.abs() <= level + 1e-12);
        ok &= grid.iter().zip(&out).all(|(x, y)| x.abs() >= level - 1e-12 || x == y);
    }
    outcome(ok, format!("{points}-point grids, levels +/-11.8 and +/-1.15"))
}

fn determinism(r: &Runs) -> Outcome {
    match (&r.vdc, &r.vdc_again) {
        (Ok(a), Ok(b)) => {
            let (ca, cb) = (a.to_csv(), b.to_csv());
            outcome(ca == cb, format!("{} bytes each, identical: {}", ca.len(), ca == cb))
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("run aborted: {e}")),
    }
}

fn main() -> ExitCode {
    let config = default_scenario();
    let started = Instant::now();
    let vdc = simulate(&config, ControllerKind::Vdc);
    let vdc_elapsed = started.elapsed();
    let runs = Runs {
        vdc,
        vdc_elapsed,
        vdc_again: simulate(&config, ControllerKind::Vdc),
        pd: simulate(&config, ControllerKind::Pd),
        config,
    };
    let results = [
        ("1 constraint satisfaction", constraint_satisfaction(&runs)),
        ("2 PD comparison", pd_comparison(&runs)),
        ("3 saturation claim", saturation_claim(&runs)),
        ("4 telescoping and ideal-case rate", telescoping_and_ideal(&runs)),
        ("5 oracle equivalence", oracle_suites()),
        ("6 physical consistency", consistency(&runs)),
        ("7 boundedness", boundedness(&runs)),
        ("8 actuator model", actuator_grid()),
        ("9 determinism", determinism(&runs)),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

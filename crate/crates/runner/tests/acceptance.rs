//! Acceptance criteria. Runs as a plain binary (`harness = false`) and prints
//! one line per criterion; exits nonzero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::thread;

use dynbc::config::RunConfig;
use dynbc::output::RunReport;
use dynbc::scenario::{self, Level, Problem, StudyKind};
use dynbc_core::discretization::NodeKind;
use dynbc_core::graph::DEFAULT_POWER_PIECES;
use dynbc_core::{build_operators, make_preset, Geometry, Graph, Preset};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STRIP: &str = "kind = \"strip\"\nnx = 32\nny = 16";
const INTERVAL: &str = "kind = \"interval\"\nn = 64";

const LINEAR: &str = "preset = \"linear\"\nc0 = 1.0";
const HELESHAW: &str = "preset = \"heleshaw_clipped\"\nc0_prime = 1.0";
const FAST_DIFFUSION: &str = "preset = \"fast_diffusion_clipped\"\nm = 0.5\nm0 = 1.0\npieces = 64";
const DEADZONE: &str = "preset = \"deadzone_jump\"\na = -0.5\nb = 0.5\nc0 = 1.0\nc0_prime = 0.5";
const TWO_SLOPE: &str = "preset = \"two_slope\"\nc0 = 1.0\nc0_prime = 0.5\nm0 = 1.0";

const PRESETS: [(&str, &str); 4] = [
    ("linear", LINEAR),
    ("heleshaw_clipped", HELESHAW),
    ("fast_diffusion_clipped", FAST_DIFFUSION),
    ("deadzone_jump", DEADZONE),
];

const RANDOM_DATA: &str = "[initial]\nprofile = \"random_mean_zero\"\nseed = 11\namplitude = 1.5\n\n\
                           [forcing]\nkind = \"random_mean_zero\"\nseed = 7\namplitude = 2.0\nfrequency = 1.0\n";

fn config(geometry: &str, graph: &str, lambda: f64, tau: f64, horizon: f64, rest: &str) -> RunConfig {
    let text = format!(
        "[geometry]\n{geometry}\n\n[graph]\n{graph}\n\n[time]\nlambda = {lambda:?}\ntau = {tau:?}\nhorizon = {horizon:?}\n\n{rest}"
    );
    RunConfig::parse(&text).unwrap_or_else(|e| panic!("{e}\n{text}"))
}

fn check<'a>(report: &'a RunReport, name: &str) -> &'a dynbc::output::CheckJson {
    report.checks.iter().find(|c| c.name == name).unwrap_or_else(|| panic!("no check {name}"))
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_graph(rng: &mut ChaCha8Rng) -> Graph {
    let preset = match rng.gen_range(0..6) {
        0 => Preset::Linear { c0: rng.gen_range(0.2..5.0) },
        1 => Preset::HeleShawClipped { c0_prime: rng.gen_range(0.0..3.0) },
        2 => Preset::FastDiffusionClipped {
            m: rng.gen_range(0.2..0.9),
            m0: rng.gen_range(0.5..2.0),
            pieces: 64,
        },
        3 => Preset::DeadzoneJump {
            a: -rng.gen_range(0.1..2.0),
            b: rng.gen_range(0.1..2.0),
            c0: rng.gen_range(0.2..5.0),
            c0_prime: rng.gen_range(0.0..3.0),
        },
        4 => Preset::PorousClipped {
            m: rng.gen_range(1.5..4.0),
            m0: rng.gen_range(0.5..2.0),
            pieces: DEFAULT_POWER_PIECES,
        },
        _ => Preset::TwoSlope {
            c0: rng.gen_range(0.2..5.0),
            c0_prime: rng.gen_range(0.0..3.0),
            m0: rng.gen_range(0.5..2.0),
        },
    };
    make_preset(preset).unwrap().with_relaxed_intercept(true)
}

/// Minimum of `|r - s|^2 / (2 lambda) + beta_hat(s)` by golden section; the minimizer lies between 0 and `r`.
fn envelope_golden(g: &Graph, lambda: f64, r: f64) -> f64 {
    let f = |s: f64| (r - s).powi(2) / (2.0 * lambda) + g.antiderivative(s);
    let (mut a, mut b) = (r.min(0.0), r.max(0.0));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..300 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    f(a).min(f(b)).min(f(0.5 * (a + b)))
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut oracle_gap, mut identity_gap) = (0.0f64, 0.0f64);
    let (mut lipschitz, mut monotone) = (0usize, 0usize);
    let mut samples = 0;
    for _ in 0..200 {
        let g = random_graph(&mut rng);
        let lambda = 10f64.powf(rng.gen_range(-3.0..=0.0));
        let rs: Vec<f64> = (0..50).map(|_| rng.gen_range(-50.0..=50.0)).collect();
        let mut values = Vec::with_capacity(rs.len());
        for &r in &rs {
            samples += 1;
            let reg = g.regularize(lambda, r);
            let j = g.resolvent_bisection(lambda, r, 0.0);
            let yosida = (r - j) / lambda;
            let env = envelope_golden(&g, lambda, r);
            oracle_gap = oracle_gap
                .max((reg.resolvent - j).abs())
                .max((reg.yosida - yosida).abs())
                .max((g.envelope(lambda, r) - env).abs());
            identity_gap = identity_gap.max((r - reg.resolvent - lambda * reg.yosida).abs());
            values.push(reg.yosida);
        }
        for i in 0..rs.len() {
            for k in 0..i {
                let (dr, db) = (rs[i] - rs[k], values[i] - values[k]);
                if db.abs() > dr.abs() / lambda * (1.0 + 1e-12) + 1e-9 {
                    lipschitz += 1;
                }
                if db * dr < -1e-9 * dr.abs() {
                    monotone += 1;
                }
            }
        }
    }
    outcome(
        oracle_gap <= 1e-10 && identity_gap <= 1e-12 && lipschitz == 0 && monotone == 0,
        format!(
            "{samples} samples, oracle gap {oracle_gap:.2e} (<= 1e-10), identity gap {identity_gap:.2e} (<= 1e-12), \
             {lipschitz} Lipschitz and {monotone} monotonicity violations"
        ),
    )
}

fn run(config: RunConfig) -> scenario::RunOutcome {
    scenario::run_config(config, None).unwrap()
}

/// Weighted mean computed from the lumped weights directly.
fn weighted_mean(weights: &[f64], u: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    weights.iter().zip(u).map(|(w, x)| w * x).sum::<f64>() / total
}

fn criteria_2_and_5() -> (Outcome, Outcome) {
    let ops = build_operators(Geometry::Strip { lx: 1.0, nx: 32, ny: 16 }).unwrap();
    let runs: Vec<_> = thread::scope(|s| {
        let handles: Vec<_> = PRESETS
            .iter()
            .map(|(name, graph)| s.spawn(move || (*name, run(config(STRIP, graph, 0.05, 1e-2, 1.0, RANDOM_DATA)))))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut drift = 0.0f64;
    let mut ok5 = true;
    let mut worst_identity = 0.0f64;
    for (name, out) in &runs {
        let m0 = weighted_mean(ops.weights(), &out.trajectory.fields[0]);
        for u in &out.trajectory.fields {
            drift = drift.max((weighted_mean(ops.weights(), u) - m0).abs());
        }
        drift = drift.max(out.report.mass_drift_max);
        let r = &out.report;
        let m4 = r.c_star + r.c0 * r.m0 + r.c0_prime;
        let projected = check(r, "projected_flux_chain");
        let full = check(r, "full_flux_chain");
        let mean = check(r, "flux_mean");
        let identity = check(r, "flux_decomposition");
        worst_identity = worst_identity.max(identity.measured);
        let pass = projected.measured <= projected.bound
            && full.measured <= full.bound
            && mean.measured <= m4
            && (r.m4 - m4).abs() <= 1e-12 * m4
            && identity.measured <= 1e-10;
        if !pass {
            eprintln!("criterion 5 detail: {name}: {projected:?} {full:?} {mean:?} m4={} formula={m4} {identity:?}", r.m4);
        }
        ok5 &= pass;
    }
    (
        outcome(
            drift <= 1e-10,
            format!("max mass drift {drift:.2e} over 4 presets (<= 1e-10), T = 1, tau = 1e-2, lambda = 0.05"),
        ),
        outcome(
            ok5,
            format!("flux chains within bound with zero slack, |m(xi)| <= M4 = c* + c0 M0 + c0', decomposition defect {worst_identity:.2e} (<= 1e-10)"),
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut cases = Vec::new();
    for (name, graph) in PRESETS {
        for lambda in [1.0, 0.1, 0.01] {
            cases.push((name, graph, lambda));
        }
    }
    let results: Vec<(String, f64, f64, f64)> = thread::scope(|s| {
        let handles: Vec<_> = cases
            .iter()
            .map(|&(name, graph, lambda)| {
                s.spawn(move || {
                    let out = run(config(STRIP, graph, lambda, 1e-2, 1.0, RANDOM_DATA));
                    let c = check(&out.report, "energy_bound");
                    (format!("{name}@{lambda}"), c.measured, c.bound, 10.0 * out.trajectory.newton_tol)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let failures: Vec<_> = results.iter().filter(|(_, m, b, slack)| m > &(b + slack)).collect();
    let tightest = results
        .iter()
        .map(|(_, m, b, _)| m / b)
        .fold(0.0f64, f64::max);
    outcome(
        failures.is_empty(),
        format!(
            "{} runs (4 presets x lambda in {{1, 0.1, 0.01}}), largest energy / M1 = {tightest:.4}, failures: {:?}",
            results.len(),
            failures.iter().map(|f| &f.0).collect::<Vec<_>>()
        ),
    )
}

fn criterion_4() -> Outcome {
    // linear with c0 = 2.5: c1 = c0/2, lambda_bar = min(1, 1/(2 c1)) = 0.4
    let steep = "preset = \"linear\"\nc0 = 2.5";
    let ops = build_operators(Geometry::Strip { lx: 1.0, nx: 32, ny: 16 }).unwrap();
    let measure = ops.total_measure();
    let inside = run(config(STRIP, steep, 0.4, 1e-2, 1.0, RANDOM_DATA));
    let outside = run(config(STRIP, steep, 0.5, 1e-2, 1.0, RANDOM_DATA));
    let hs = run(config(STRIP, HELESHAW, 0.05, 1e-2, 1.0, RANDOM_DATA));
    let mut ok = true;
    let mut lines = Vec::new();
    for (label, out, applicable) in [("linear(2.5)@0.4", &inside, true), ("linear(2.5)@0.5", &outside, false), ("heleshaw@0.05", &hs, true)] {
        let r = &out.report;
        let lambda_bar = 1f64.min(1.0 / (2.0 * r.c1));
        let m2 = 2.0 / r.c1 * (2.0 * r.m1 + r.c2 * measure);
        let c = check(r, "h_bound");
        let gated = (c.status == "NOT-APPLICABLE") == !applicable;
        let within = !applicable || c.measured <= c.bound + 10.0 * out.trajectory.newton_tol;
        let formula = (r.lambda_bar - lambda_bar).abs() <= 1e-15 && (r.m2 - m2).abs() <= 1e-12 * m2;
        ok &= gated && within && formula;
        lines.push(format!("{label}: {} {:.3e}/{:.3e}", c.status, c.measured, c.bound));
    }
    outcome(ok, format!("gate lambda <= lambda_bar exact, M2 formula matched; {}", lines.join(", ")))
}

/// `|e|_{V0*}` by a dense Cholesky solve of `(K + w w^T) z = M e`.
fn dense_dual_norm(ops: &dynbc_core::Operators, e: &[f64]) -> f64 {
    let n = ops.n_nodes();
    let w = ops.weights();
    let mut k = DMatrix::from_fn(n, n, |i, j| w[i] * w[j]);
    for (i, j, v) in ops.stiffness().entries() {
        k[(i, j)] += v;
    }
    let g = DVector::from_iterator(n, (0..n).map(|i| w[i] * e[i]));
    let z = k.cholesky().unwrap().solve(&g);
    z.dot(&g).sqrt()
}

fn contraction(graph_config: RunConfig) -> (bool, String) {
    let newton_tol = graph_config.solver.newton_tol;
    let ops = build_operators(graph_config.geometry()).unwrap();
    let out = scenario::contraction_pair(graph_config.clone(), (1, 2), None).unwrap();
    let d = &out.distances;
    let worst = d.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let mut a = graph_config.clone();
    a.initial.seed = Some(1);
    let mut b = graph_config;
    b.initial.seed = Some(2);
    let (ua, ub) = (Problem::new(a).unwrap().initial, Problem::new(b).unwrap().initial);
    let e: Vec<f64> = ua.iter().zip(&ub).map(|(x, y)| x - y).collect();
    let oracle = dense_dual_norm(&ops, &e);
    let oracle_gap = (oracle - d[0]).abs() / oracle;
    (
        worst <= 10.0 * newton_tol && oracle_gap <= 1e-10,
        format!(
            "{} steps, largest increase {worst:.2e} (<= {:.0e}), distance {:.4} -> {:.4}, initial distance vs dense oracle {oracle_gap:.1e}",
            d.len() - 1,
            10.0 * newton_tol,
            d[0],
            d[d.len() - 1]
        ),
    )
}

fn criterion_6() -> Outcome {
    let (pass, detail) = contraction(config(STRIP, HELESHAW, 0.05, 1e-2, 1.0, RANDOM_DATA));
    outcome(pass, format!("heleshaw_clipped, lambda = 0.05: {detail}"))
}

fn criterion_7() -> Outcome {
    let lambdas = [0.2, 0.1, 0.05, 0.025];
    let hs = scenario::sweep_lambda(config(STRIP, HELESHAW, 0.2, 1e-2, 1.0, RANDOM_DATA), &lambdas, None).unwrap();
    let lin = scenario::sweep_lambda(config(STRIP, LINEAR, 0.2, 1e-2, 1.0, RANDOM_DATA), &lambdas, None).unwrap();
    let ratios: Vec<f64> = lin.table.rows.iter().filter_map(|r| r.ratio).collect();
    let in_band = ratios.iter().all(|r| (0.35..=0.65).contains(r));
    let distances = |t: &dynbc_core::estimates::LambdaTable<f64>| {
        t.rows.iter().map(|r| format!("{:.3e}", r.distance)).collect::<Vec<_>>().join(" ")
    };
    outcome(
        hs.table.strictly_decreasing && lin.table.strictly_decreasing && in_band,
        format!(
            "heleshaw d = [{}], linear d = [{}], linear ratios {:?} in [0.35, 0.65]",
            distances(&hs.table),
            distances(&lin.table),
            ratios.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

fn single_mode(lx: f64, nx: usize, ny: usize, tau: f64) -> RunConfig {
    let geometry = format!("kind = \"strip\"\nlx = {lx:?}\nnx = {nx}\nny = {ny}");
    config(
        &geometry,
        LINEAR,
        0.01,
        tau,
        0.1,
        "[initial]\nprofile = \"single_mode\"\nk = 1\namplitude = 1.0\n\n[forcing]\nkind = \"manufactured\"\n",
    )
}

fn criterion_8() -> Outcome {
    let level = |s: &str| s.parse::<Level>().unwrap();
    let time_levels: Vec<Level> = ["64x32:4e-3", "64x32:2e-3", "64x32:1e-3", "64x32:5e-4"].map(level).to_vec();
    let space_levels: Vec<Level> = ["16x8:1e-3", "32x16:2.5e-4", "64x32:6.25e-5"].map(level).to_vec();
    let base = single_mode(2.0, 64, 32, 1e-4);
    let time = scenario::convergence_study(base.clone(), &time_levels, None).unwrap();
    let space = scenario::convergence_study(base.clone(), &space_levels, None).unwrap();
    let sup_error = |config: RunConfig| {
        let problem = Problem::new(config).unwrap();
        let ctx = problem.context().unwrap();
        let traj = problem.solve(&ctx, problem.config.time.lambda).unwrap();
        scenario::manufactured_errors(&problem, &traj).unwrap()
    };
    let (_, fine, _) = sup_error(base);
    let (_, unit, _) = sup_error(single_mode(1.0, 64, 32, 1e-4));
    let orders = |t: &scenario::ConvergenceTable| {
        t.rows.iter().filter_map(|r| r.order).map(|p| format!("{p:.3}")).collect::<Vec<_>>().join(" ")
    };
    assert_eq!((time.kind, space.kind), (StudyKind::Time, StudyKind::Space));
    outcome(
        time.pass && space.pass && fine < 1e-3,
        format!(
            "tau orders [{}] in [0.8, 1.2], h orders [{}] in [1.6, 2.4], sup-error {fine:.3e} < 1e-3 at 64x32, tau = 1e-4, T = 0.1, Lx = 2 (Lx = 1: {unit:.3e})",
            orders(&time),
            orders(&space)
        ),
    )
}

fn criterion_9() -> Outcome {
    let data = "[initial]\nprofile = \"constant_plus_mode\"\nk = 2\namplitude = 0.5\nm0 = 0.25\n\n\
                [forcing]\nkind = \"random_mean_zero\"\nseed = 4\namplitude = 1.0\n";
    let mut worst = 0.0f64;
    let mut shifts = Vec::new();
    for geometry in [INTERVAL, STRIP] {
        let shifted = run(config(geometry, TWO_SLOPE, 0.1, 1e-2, 0.5, data));
        let mut direct_config = config(geometry, TWO_SLOPE, 0.1, 1e-2, 0.5, data);
        direct_config.solver.mean_shift = false;
        let direct = run(direct_config);
        shifts.push(shifted.trajectory.mean_shift);
        for (u, v) in shifted.trajectory.fields.iter().zip(&direct.trajectory.fields) {
            for (a, b) in u.iter().zip(v) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let shift_ok = shifts.iter().all(|m| (m - 0.25).abs() < 1e-14);
    outcome(
        worst <= 1e-10 && shift_ok,
        format!("m0 = 0.25 on interval and strip: shifted vs direct max nodal gap {worst:.2e} (<= 1e-10), shifts {shifts:?}"),
    )
}

fn criterion_10() -> Outcome {
    let data = format!("[surface_graph]\n{TWO_SLOPE}\n\n{RANDOM_DATA}");
    let cfg = config(STRIP, HELESHAW, 0.05, 1e-2, 1.0, &data);
    let out = run(cfg.clone());
    let graphs = cfg.graphs().unwrap();
    let ops = build_operators(cfg.geometry()).unwrap();
    let r = &out.report;
    let names = ["mass_conservation", "energy_bound", "projected_flux_chain", "full_flux_chain", "flux_mean", "flux_decomposition"];
    let failing: Vec<_> = names.iter().filter(|n| check(r, n).status == "FAIL").collect();
    let mut trace_mismatch = 0usize;
    let lambda = out.trajectory.lambda;
    for (u, xi) in out.trajectory.fields.iter().zip(&out.trajectory.fluxes) {
        for i in 0..u.len() {
            let g = if ops.node_kind(i) == NodeKind::Surface { &graphs.surface } else { &graphs.bulk };
            if xi[i] != g.yosida(lambda, u[i]) {
                trace_mismatch += 1;
            }
        }
    }
    let (contracts, detail) = contraction(cfg);
    outcome(
        failing.is_empty() && trace_mismatch == 0 && r.all_structural_pass && contracts,
        format!(
            "heleshaw bulk with two_slope(c0' = 0.5) surface: structural failures {failing:?}, per-step flux mismatches {trace_mismatch}, contraction: {detail}"
        ),
    )
}

fn same_tree(a: &Path, b: &Path) -> bool {
    let mut names_a: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    let mut names_b: Vec<_> = fs::read_dir(b).unwrap().map(|e| e.unwrap().file_name()).collect();
    names_a.sort();
    names_b.sort();
    names_a == names_b
        && names_a.iter().all(|n| {
            let (pa, pb) = (a.join(n), b.join(n));
            if pa.is_dir() {
                same_tree(&pa, &pb)
            } else {
                fs::read(&pa).unwrap() == fs::read(&pb).unwrap()
            }
        })
}

fn criterion_11() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let cfg = config(STRIP, HELESHAW, 0.05, 1e-2, 1.0, RANDOM_DATA);
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    scenario::run_config(cfg.clone(), Some(&a)).unwrap();
    scenario::run_config(cfg, Some(&b)).unwrap();
    let identical = same_tree(&a, &b);
    let verified = scenario::verify_dir(&a).unwrap();
    // a tampered report must not verify
    let report = a.join(dynbc::output::REPORT_FILE);
    let text = fs::read_to_string(&report).unwrap();
    fs::write(&report, text.replacen("\"m1\": ", "\"m1\": 1", 1)).unwrap();
    let tampered = scenario::verify_dir(&a).unwrap();
    outcome(
        identical && verified.identical && !tampered.identical,
        format!(
            "repeated run directories byte-identical: {identical}, verify reproduces report.json exactly: {}, tampered report rejected: {}",
            verified.identical, !tampered.identical
        ),
    )
}

fn main() -> ExitCode {
    let results: Vec<(usize, Outcome)> = thread::scope(|s| {
        let c1 = s.spawn(criterion_1);
        let c25 = s.spawn(criteria_2_and_5);
        let c3 = s.spawn(criterion_3);
        let c4 = s.spawn(criterion_4);
        let c6 = s.spawn(criterion_6);
        let c7 = s.spawn(criterion_7);
        let c8 = s.spawn(criterion_8);
        let c9 = s.spawn(criterion_9);
        let c10 = s.spawn(criterion_10);
        let c11 = s.spawn(criterion_11);
        let (c2, c5) = c25.join().unwrap();
        vec![
            (1, c1.join().unwrap()),
            (2, c2),
            (3, c3.join().unwrap()),
            (4, c4.join().unwrap()),
            (5, c5),
            (6, c6.join().unwrap()),
            (7, c7.join().unwrap()),
            (8, c8.join().unwrap()),
            (9, c9.join().unwrap()),
            (10, c10.join().unwrap()),
            (11, c11.join().unwrap()),
        ]
    });
    let mut failed = 0;
    for (n, o) in &results {
        println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria pass", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line even under captured output; exits non-zero if
//! any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use vtm_core::analysis::{build_global_operator, certify_convergence, direct_solve, empirical_contraction, reordering_residual};
use vtm_core::demo::{example_impedances, example_scheme, example_system};
use vtm_core::graph::{graph_to_system, system_to_graph};
use vtm_core::io::read_vector;
use vtm_core::local::{assemble, input_impedances, match_impedances, precondition, ImpedanceAssignment, MatchPolicy};
use vtm_core::partition::{merge, scatter, split, SplitSystem};
use vtm_core::perf::{measure_k, parallel_time, sequential_time, speedup, MachineModel};
use vtm_core::runtime::{run_vtm, ExecutionMode, IterationReport, RunConfig};
use vtm_core::testbench::{grid_case, random_case, GridSpec, Layout, RandomCase};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

const RANDOM_CASES: u64 = 200;
const IDENTITY_CASES: u64 = 50;
const RANDOM_MAX_DIM: usize = 12;
const K_EPSILON: f64 = 1e-9;
const CELL_BUDGET: Duration = Duration::from_secs(30);

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn vtm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vtm"))
}

fn example() -> SplitSystem {
    split(&system_to_graph(&example_system()), &example_scheme()).expect("example splits")
}

fn random_split(seed: u64) -> Result<(RandomCase, SplitSystem), String> {
    let case = random_case(seed, RANDOM_MAX_DIM).map_err(err)?;
    let s = split(&case.graph, &case.scheme).map_err(err)?;
    Ok((case, s))
}

fn grid_k(m: usize, p: usize, z: Option<f64>) -> Result<(Option<usize>, Duration), String> {
    let start = Instant::now();
    let (g, s) = grid_case(&GridSpec::new(m, Layout::Strips(p))).map_err(err)?;
    let z = match z {
        Some(v) => ImpedanceAssignment::constant(&s, v),
        None => match_impedances(&s, MatchPolicy::Mean).map_err(err)?,
    };
    let cfg = RunConfig {
        epsilon: f64::MIN_POSITIVE,
        oracle: Some(direct_solve(&graph_to_system(&g)).map_err(err)?),
        stop_on_rms: Some(K_EPSILON),
        ..RunConfig::default()
    };
    let report = run_vtm(&s, &z, &cfg).map_err(err)?;
    Ok((measure_k(&report.records, K_EPSILON), start.elapsed()))
}

fn worked_example() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let start = Instant::now();
    let out = vtm()
        .args(["solve", "--demo", "example51", "--eps", "1e-12", "--out"])
        .arg(dir.path())
        .output()
        .map_err(err)?;
    let elapsed = start.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    check(out.status.success(), || format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))?;
    let field = |name: &str| -> Result<f64, String> {
        stdout
            .lines()
            .find_map(|l| l.strip_prefix(name).and_then(|v| v.strip_prefix(": ")))
            .ok_or_else(|| format!("missing {name}"))?
            .trim()
            .parse()
            .map_err(err)
    };
    let iterations = field("iterations")?;
    let (gu, gw) = (field("twin_gap_potential")?, field("twin_gap_current")?);
    let x = read_vector(fs::File::open(dir.path().join("solution.txt")).map_err(err)?).map_err(err)?;
    let oracle = direct_solve(&example_system()).map_err(err)?;
    let dev = x.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(iterations <= 200.0, || format!("{iterations} iterations"))?;
    check(dev <= 1e-10, || format!("solution off by {dev:e}"))?;
    check(gu <= 1e-11 && gw <= 1e-11, || format!("twin gaps {gu:e}, {gw:e}"))?;
    check(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("K = {iterations}, |x - x*| = {dev:.1e}, gaps {gu:.1e}/{gw:.1e}, {elapsed:.0?}"))
}

fn input_impedance_values() -> Outcome {
    let s = example();
    let r0 = input_impedances(&assemble(&s.subdomains[0])).map_err(err)?;
    let r1 = input_impedances(&assemble(&s.subdomains[1])).map_err(err)?;
    let mut worst = 0.0_f64;
    for (got, want) in [(r0[0], 0.2598), (r0[1], 0.3190), (r1[0], 0.3699), (r1[1], 0.2557)] {
        worst = worst.max((got - want).abs());
    }
    check(worst <= 5e-4, || format!("deviation {worst:e}"))?;
    Ok(format!("{:.4} {:.4} {:.4} {:.4}", r0[0], r0[1], r1[0], r1[1]))
}

/// Local matrix rearranged into the order of the listed parent vertices.
fn local_in_parent_order(s: &SplitSystem, j: usize, parents: &[usize]) -> DMatrix<f64> {
    let sub = &s.subdomains[j];
    let dense = sub.matrix.to_dense();
    let pos: Vec<usize> = parents
        .iter()
        .map(|&p| (0..sub.dim()).find(|&l| sub.parent_of(l) == p).expect("parent present"))
        .collect();
    DMatrix::from_fn(parents.len(), parents.len(), |r, c| dense[(pos[r], pos[c])])
}

fn split_fidelity() -> Outcome {
    let s = example();
    let a1 = DMatrix::from_row_slice(
        4,
        4,
        &[6.0, -1.0, -2.0, 0.0, -1.0, 7.0, 0.0, -1.0, -2.0, 0.0, 4.8, -0.9, 0.0, -1.0, -0.9, 3.5],
    );
    let a2 = DMatrix::from_row_slice(
        4,
        4,
        &[3.2, -1.1, -1.0, 0.0, -1.1, 5.5, 0.0, -3.0, -1.0, 0.0, 10.0, -5.0, 0.0, -3.0, -5.0, 11.0],
    );
    check(local_in_parent_order(&s, 0, &[0, 1, 2, 3]) == a1, || "first subsystem differs".into())?;
    check(local_in_parent_order(&s, 1, &[2, 3, 4, 5]) == a2, || "second subsystem differs".into())?;
    let zs = ImpedanceAssignment::PerLine(example_impedances()).matrices(&s).map_err(err)?;
    let mut diags = Vec::new();
    for (sub, z) in s.subdomains.iter().zip(zs) {
        let f = precondition(&assemble(sub), z).map_err(err)?;
        diags.extend_from_slice(&f.preconditioned_matrix().diagonal()[..2]);
    }
    check(diags == [5.8, 5.5, 4.2, 7.5], || format!("preconditioned diagonals {diags:?}"))?;
    Ok(format!("subsystems exact, diagonals {diags:?}"))
}

fn reversibility() -> Outcome {
    let mut worst = 0.0_f64;
    for seed in 0..RANDOM_CASES {
        let (case, s) = random_split(seed)?;
        let sys = graph_to_system(&case.graph);
        let a = sys.to_dense();
        let (back, b) = s.reassemble();
        let back = back.to_dense();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                let scale = a[(i, j)].abs().max(f64::MIN_POSITIVE);
                let rel = if a[(i, j)] == 0.0 {
                    back[(i, j)].abs()
                } else {
                    (back[(i, j)] - a[(i, j)]).abs() / scale
                };
                worst = worst.max(rel);
            }
            let rel = (b[i] - sys.rhs()[i]).abs() / sys.rhs()[i].abs().max(1.0);
            worst = worst.max(rel);
        }
        let x = direct_solve(&sys).map_err(err)?;
        let merged = merge(&s, &scatter(&s, &x)).map_err(err)?;
        check(merged.x == x, || format!("seed {seed}: merge of consistent locals is not exact"))?;
        check(worst <= 1e-12, || format!("seed {seed}: reassembly off by {worst:e}"))?;
    }
    Ok(format!("{RANDOM_CASES} cases, worst relative entry error {worst:.1e}"))
}

fn convergence() -> Outcome {
    let mut worst_rho = 0.0_f64;
    let mut worst_res = 0.0_f64;
    for seed in 0..RANDOM_CASES {
        let (case, s) = random_split(seed)?;
        let z = ImpedanceAssignment::PerLine(case.impedances.clone());
        let rho = certify_convergence(&build_global_operator(&s, &z).map_err(err)?).map_err(err)?.rho;
        let sys = graph_to_system(&case.graph);
        let report = run_vtm(&s, &z, &RunConfig::default()).map_err(err)?;
        let rel = sys.residual_inf(&report.x) / sys.rhs().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        check(rho < 1.0, || format!("seed {seed}: rho = {rho}"))?;
        check(report.converged && rel <= 1e-9, || format!("seed {seed}: residual {rel:e}"))?;
        worst_rho = worst_rho.max(rho);
        worst_res = worst_res.max(rel);
    }
    for p in [2, 4, 8] {
        let (g, s) = grid_case(&GridSpec::new(17, Layout::Strips(p))).map_err(err)?;
        let z = match_impedances(&s, MatchPolicy::Mean).map_err(err)?;
        let rho = certify_convergence(&build_global_operator(&s, &z).map_err(err)?).map_err(err)?.rho;
        let sys = graph_to_system(&g);
        let report = run_vtm(&s, &z, &RunConfig::default()).map_err(err)?;
        let rel = sys.residual_inf(&report.x) / sys.rhs().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        check(rho < 1.0, || format!("grid p={p}: rho = {rho}"))?;
        check(report.converged && rel <= 1e-9, || format!("grid p={p}: residual {rel:e}"))?;
        worst_rho = worst_rho.max(rho);
        worst_res = worst_res.max(rel);
    }
    let s = example();
    let z = ImpedanceAssignment::PerLine(example_impedances());
    let rho = certify_convergence(&build_global_operator(&s, &z).map_err(err)?).map_err(err)?.rho;
    let report = run_vtm(&s, &z, &RunConfig::default()).map_err(err)?;
    let rate = empirical_contraction(&report.records, 1e-10).ok_or("too few rounds for a rate")?;
    check((rate - rho).abs() <= 0.1 * rho, || format!("rate {rate} vs rho {rho}"))?;
    Ok(format!(
        "max rho {worst_rho:.4}, max residual {worst_res:.1e}; example rate {rate:.4} vs rho {rho:.4}"
    ))
}

fn rms_after(s: &SplitSystem, z: &ImpedanceAssignment, oracle: &[f64], rounds: usize) -> Result<f64, String> {
    let cfg = RunConfig {
        epsilon: f64::MIN_POSITIVE,
        max_iter: rounds,
        oracle: Some(oracle.to_vec()),
        ..RunConfig::default()
    };
    run_vtm(s, z, &cfg).map_err(err)?.final_rms().ok_or_else(|| "no RMS recorded".into())
}

fn matching_benefit() -> Outcome {
    let s = example();
    let oracle = direct_solve(&example_system()).map_err(err)?;
    let z = match_impedances(&s, MatchPolicy::Mean).map_err(err)?;
    let matched = rms_after(&s, &z, &oracle, 20)?;
    let up = rms_after(&s, &z.scaled(10.0), &oracle, 20)?;
    let down = rms_after(&s, &z.scaled(0.1), &oracle, 20)?;
    check(matched < up && matched < down, || format!("matched {matched:e}, x10 {up:e}, x0.1 {down:e}"))?;
    let (km, _) = grid_k(33, 8, None)?;
    let (k1, _) = grid_k(33, 8, Some(1.0))?;
    let (km, k1) = (km.ok_or("matched grid run never reached the threshold")?, k1.unwrap_or(usize::MAX));
    check(km < k1, || format!("grid K matched {km} vs z=1 {k1}"))?;
    Ok(format!("20-round RMS {matched:.1e} < {up:.1e}, {down:.1e}; grid K {km} < {k1}"))
}

fn k_trend() -> Outcome {
    let mut by_p = Vec::new();
    for p in [2, 4, 8, 16] {
        let (k, t) = grid_k(65, p, None)?;
        let k = k.ok_or_else(|| format!("n=4225 p={p}: threshold not reached"))?;
        check(t < CELL_BUDGET, || format!("n=4225 p={p}: {t:?}"))?;
        by_p.push(k);
    }
    let ratio = by_p[3] as f64 / by_p[0] as f64;
    check(ratio <= 10.0, || format!("K(16)/K(2) = {ratio}"))?;
    let mut by_n = Vec::new();
    for m in [17, 33, 49] {
        let (k, t) = grid_k(m, 4, None)?;
        let k = k.ok_or_else(|| format!("n={} p=4: threshold not reached", m * m))?;
        check(t < CELL_BUDGET, || format!("n={} p=4: {t:?}", m * m))?;
        by_n.push(k);
    }
    let spread = *by_n.iter().max().unwrap() as f64 / *by_n.iter().min().unwrap() as f64;
    check(spread <= 3.0, || format!("K over n varies by {spread}"))?;
    Ok(format!("K(p) = {by_p:?}, ratio {ratio:.2}; K(n) = {by_n:?}, spread {spread:.2}"))
}

/// Cost model written out from its definition, sharing no code with the
/// library.
fn reference_times(n: f64, p: f64, k: f64, alpha: f64, beta: f64) -> (f64, f64) {
    let q = n / p;
    let b = q + 2.0 * q.sqrt();
    let tp = b * b.sqrt() + k * (2.0 * b + alpha + beta * b.sqrt());
    let ts = n * n.sqrt() + 2.0 * n;
    (tp, ts)
}

fn performance_model() -> Outcome {
    let spots = [
        (4096, 1, 1, 0.0, 0.0),
        (4096, 16, 40, 0.0, 0.0),
        (289, 2, 100, 10.0, 1.0),
        (1089, 8, 259, 100.0, 2.5),
        (14641, 64, 30, 0.0, 0.0),
        (14641, 4, 123, 50.0, 0.5),
        (2401, 4, 138, 1.0, 1.0),
        (4225, 16, 306, 1000.0, 10.0),
        (10, 3, 7, 0.25, 0.125),
        (1_000_000, 100, 500, 5.0, 3.0),
    ];
    let mut worst = 0.0_f64;
    for (n, p, k, alpha, beta) in spots {
        let model = MachineModel::new(alpha, beta).map_err(err)?;
        let (tp, ts) = reference_times(n as f64, p as f64, k as f64, alpha, beta);
        let got_tp = parallel_time(n, p, k, &model).map_err(err)?;
        let got_ts = sequential_time(n);
        let got_sp = speedup(n, p, k, &model).map_err(err)?;
        for (got, want) in [(got_tp, tp), (got_ts, ts), (got_sp, ts / tp)] {
            worst = worst.max((got - want).abs() / want.abs());
        }
    }
    check(worst <= 1e-12, || format!("relative deviation {worst:e}"))?;
    let free = MachineModel::free();
    let curve = (1..=256)
        .map(|p| speedup(14641, p, 30, &free))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    check(curve.windows(2).all(|w| w[1] > w[0]), || "speedup not increasing in p".into())?;
    Ok(format!("10 spot values within {worst:.1e}; speedup increasing over p = 1..256"))
}

fn identities() -> Outcome {
    let mut cases = vec![(example(), ImpedanceAssignment::PerLine(example_impedances()))];
    for seed in 0..IDENTITY_CASES {
        let (case, s) = random_split(1000 + seed)?;
        cases.push((s, ImpedanceAssignment::PerLine(case.impedances)));
    }
    let (mut reorder, mut conj, mut min_eig) = (0.0_f64, 0.0_f64, f64::INFINITY);
    for (i, (s, z)) in cases.iter().enumerate() {
        let r = reordering_residual(s).map_err(err)?;
        let cert = certify_convergence(&build_global_operator(s, z).map_err(err)?).map_err(err)?;
        check(r <= 1e-10, || format!("case {i}: reordering residual {r:e}"))?;
        check(s.verify_conformal().all_spd(), || format!("case {i}: a subsystem is not SPD"))?;
        check(cert.s_positive_definite, || format!("case {i}: S not positive definite"))?;
        check(cert.min_scaled_eigenvalue > 0.0, || format!("case {i}: T eigenvalue {}", cert.min_scaled_eigenvalue))?;
        check(cert.conjugation_residual <= 1e-10, || format!("case {i}: conjugation residual {:e}", cert.conjugation_residual))?;
        reorder = reorder.max(r);
        conj = conj.max(cert.conjugation_residual);
        min_eig = min_eig.min(cert.min_scaled_eigenvalue);
    }
    Ok(format!(
        "{} cases: reordering {reorder:.1e}, conjugation {conj:.1e}, min T eigenvalue {min_eig:.3e}",
        cases.len()
    ))
}

fn run_manifest(cmd: &str, manifest: &str, dir: &Path, csv: &str) -> Result<Vec<u8>, String> {
    let path = dir.join(format!("{cmd}.toml"));
    fs::write(&path, manifest).map_err(err)?;
    let out = vtm().args([cmd, "--config"]).arg(&path).output().map_err(err)?;
    check(out.status.success(), || format!("{cmd} exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))?;
    fs::read(dir.join(csv)).map_err(err)
}

fn traces(mode: ExecutionMode) -> Result<IterationReport, String> {
    let s = example();
    let cfg = RunConfig {
        mode,
        oracle: Some(direct_solve(&example_system()).map_err(err)?),
        ..RunConfig::default()
    };
    run_vtm(&s, &ImpedanceAssignment::PerLine(example_impedances()), &cfg).map_err(err)
}

fn determinism() -> Outcome {
    let mut bodies = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(err)?;
        let out = dir.path().display().to_string().replace('\\', "/");
        let solve = format!("[input]\ngrid = 17\n\n[partition]\nstrips = 4\n\n[output]\nout = \"{out}/solve\"\n");
        let bench = format!(
            "[bench]\nn-list = [289]\np-list = [2, 4]\n\n[run]\neps = 1e-9\n\n[output]\nout = \"{out}/bench.csv\"\n"
        );
        let t = run_manifest("solve", &solve, dir.path(), "solve/trace.csv")?;
        let b = run_manifest("bench", &bench, dir.path(), "bench.csv")?;
        bodies.push((t, b));
    }
    check(bodies[0].0 == bodies[1].0, || "solve traces differ between runs".into())?;
    check(bodies[0].1 == bodies[1].1, || "bench tables differ between runs".into())?;
    let seq = traces(ExecutionMode::Sequential)?;
    let thr = traces(ExecutionMode::Threaded)?;
    check(seq.trace_csv() == thr.trace_csv(), || "threaded trace differs".into())?;
    let same_x = seq.x.iter().zip(&thr.x).all(|(a, b)| a.to_bits() == b.to_bits());
    check(same_x, || "threaded solution differs".into())?;
    Ok(format!("repeat runs identical; threaded == sequential over {} rounds", seq.iterations))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("worked example", worked_example),
        ("input impedances", input_impedance_values),
        ("split fidelity", split_fidelity),
        ("reversibility", reversibility),
        ("convergence certification", convergence),
        ("impedance matching benefit", matching_benefit),
        ("K trend", k_trend),
        ("performance model", performance_model),
        ("structural identities", identities),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let t = start.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail}) [{t:.1?}]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail}) [{t:.1?}]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

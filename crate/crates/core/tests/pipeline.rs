use vtm_core::analysis::direct_solve;
use vtm_core::demo::{example_impedances, example_scheme, example_system};
use vtm_core::graph::{graph_to_system, system_to_graph};
use vtm_core::io::{load_system, save_system};
use vtm_core::local::{match_impedances, ImpedanceAssignment, MatchPolicy};
use vtm_core::partition::{split, PartitionScheme};
use vtm_core::runtime::{run_vtm, RunConfig};
use vtm_core::testbench::{grid_case, GridSpec, Layout};

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

#[test]
fn files_round_trip_into_the_same_solution() {
    let dir = tempfile::tempdir().unwrap();
    let (m, r) = (dir.path().join("a.mtx"), dir.path().join("b.txt"));
    save_system(&example_system(), &m, &r).unwrap();
    let sys = load_system(&m, &r).unwrap();
    assert_eq!(sys.to_dense(), example_system().to_dense());

    let scheme_text = example_scheme().to_toml().unwrap();
    let scheme = PartitionScheme::from_toml(&scheme_text).unwrap();
    let s = split(&system_to_graph(&sys), &scheme).unwrap();
    let z = ImpedanceAssignment::from_toml(&ImpedanceAssignment::PerLine(example_impedances()).to_toml()).unwrap();
    let report = run_vtm(&s, &z, &RunConfig::default()).unwrap();
    assert!(report.converged);
    assert!(max_diff(&report.x, &direct_solve(&sys).unwrap()) < 1e-10);
}

#[test]
fn block_layout_with_cross_points_converges() {
    let (g, s) = grid_case(&GridSpec::new(17, Layout::Blocks { rows: 2, cols: 2 })).unwrap();
    assert_eq!(s.split_level(), 2);
    assert!(s.verify_conformal().is_conformal());
    let z = match_impedances(&s, MatchPolicy::Mean).unwrap();
    let sys = graph_to_system(&g);
    let report = run_vtm(&s, &z, &RunConfig::default()).unwrap();
    assert!(report.converged);
    assert!(sys.residual_inf(&report.x) <= 1e-9 * sys.rhs().iter().fold(0.0_f64, |m, v| m.max(v.abs())));
}

#[test]
fn export_writes_one_triple_per_subdomain() {
    let (_, s) = grid_case(&GridSpec::new(9, Layout::Strips(3))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    s.export(dir.path()).unwrap();
    for j in 0..3 {
        for ext in ["mtx", "rhs", "ports"] {
            assert!(dir.path().join(format!("subdomain_{j}.{ext}")).exists(), "subdomain {j} .{ext}");
        }
    }
}

#[test]
fn whole_grid_is_solved_in_one_round() {
    let (g, s) = grid_case(&GridSpec::new(9, Layout::Whole)).unwrap();
    assert!(s.vtls.is_empty());
    let report = run_vtm(&s, &ImpedanceAssignment::PerLine(vec![]), &RunConfig::default()).unwrap();
    assert!(report.converged);
    assert!(max_diff(&report.x, &direct_solve(&graph_to_system(&g)).unwrap()) < 1e-12);
}

#[test]
fn grid_runs_meet_residual_and_twin_bounds() {
    let eps = 1e-12;
    for layout in [Layout::Strips(2), Layout::Strips(4), Layout::Strips(8), Layout::Blocks { rows: 2, cols: 2 }] {
        let (g, s) = grid_case(&GridSpec::new(17, layout)).unwrap();
        let z = match_impedances(&s, MatchPolicy::Mean).unwrap();
        let report = run_vtm(&s, &z, &RunConfig { epsilon: eps, ..RunConfig::default() }).unwrap();
        assert!(report.converged);
        let sys = graph_to_system(&g);
        let b = sys.rhs().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(sys.residual_inf(&report.x) <= 100.0 * eps * b, "{layout:?}");
        let scale = 1.0 + report.x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let (gu, gw) = report.max_twin_gap();
        assert!(gu <= 10.0 * eps * scale && gw <= 10.0 * eps * scale, "{layout:?}: {gu:e} {gw:e}");
    }
}

//! `vtm`: load or generate a system, split it, pick impedances, certify,
//! iterate and write the artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use vtm_core::analysis::{build_global_operator, certify_convergence, direct_solve, fixed_point_check, reordering_residual};
use vtm_core::demo::{example_impedances, example_scheme, example_system};
use vtm_core::graph::{graph_to_system, system_to_graph, ElectricGraph};
use vtm_core::io::{load_system, save_system, write_vector};
use vtm_core::local::{match_impedances, ImpedanceAssignment, MatchPolicy};
use vtm_core::partition::{default_conformal_scheme, split, PartitionScheme, SplitSystem};
use vtm_core::perf::{measure_k, BenchRow, MachineModel, BENCH_HEADER};
use vtm_core::runtime::{run_vtm, ExecutionMode, RunConfig};
use vtm_core::testbench::{grid_assignment, grid_system, GridSpec, Layout, RhsKind, DEFAULT_SIGMA};

#[derive(Parser)]
#[command(name = "vtm", version, about = "Virtual transmission method solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split, iterate and write solution, trace, impedances and certificate.
    Solve(SolveArgs),
    /// Sweep grid sizes and strip counts, reporting K and model predictions.
    Bench(BenchArgs),
    /// Build the iteration matrix and report its spectral radius.
    Certify(CommonArgs),
    /// Write the partition scheme and the split subsystems.
    Partition(CommonArgs),
    /// Write matched line impedances.
    Match(CommonArgs),
    /// Write a grid system (and its scheme when a layout is given).
    GenGrid(CommonArgs),
}

#[derive(Args, Clone, Default, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct InputArgs {
    /// Built-in problem (`example51`).
    #[arg(long)]
    demo: Option<String>,
    /// Symmetric Matrix Market file.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Right-hand side, one value per line.
    #[arg(long)]
    rhs: Option<PathBuf>,
    /// Side of an M x M grid system.
    #[arg(long)]
    grid: Option<usize>,
    /// Diagonal shift of the grid system.
    #[arg(long)]
    sigma: Option<f64>,
    /// Seeded random right-hand side for the grid system.
    #[arg(long)]
    rhs_seed: Option<u64>,
}

#[derive(Args, Clone, Default, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct PartitionArgs {
    /// Partition scheme file.
    #[arg(long)]
    scheme: Option<PathBuf>,
    /// Subdomain per vertex, one per line, -1 for boundary vertices.
    #[arg(long)]
    assignment: Option<PathBuf>,
    /// Grid strips.
    #[arg(long)]
    strips: Option<usize>,
    /// Grid blocks, `RxC`.
    #[arg(long)]
    blocks: Option<String>,
}

#[derive(Args, Clone, Default, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct ImpedanceArgs {
    /// Match each line to its ports' input impedances.
    #[arg(long = "match", value_name = "side_a|side_b|mean")]
    #[serde(rename = "match")]
    match_policy: Option<String>,
    /// Same impedance on every line.
    #[arg(long)]
    z_const: Option<f64>,
    /// Impedance file.
    #[arg(long)]
    impedance: Option<PathBuf>,
}

#[derive(Args, Clone, Default, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct RunArgs {
    /// Threshold on the relative boundary change.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// One thread per subdomain.
    #[arg(long)]
    #[serde(default)]
    threads: bool,
}

#[derive(Args, Clone, Default, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct OutputArgs {
    /// Output directory (or file for `certify`, `match` and `bench`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the trace to stdout.
    #[arg(long)]
    #[serde(default)]
    trace: bool,
    /// Also write the message log.
    #[arg(long)]
    #[serde(default)]
    message_log: bool,
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// Manifest with `[input]`, `[partition]`, `[impedance]`, `[run]` and
    /// `[output]` sections; command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    partition: PartitionArgs,
    #[command(flatten)]
    impedance: ImpedanceArgs,
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Clone, Default)]
struct SolveArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Clone, Default, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct SweepArgs {
    /// Grid sizes (perfect squares).
    #[arg(long, value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    /// Strip counts.
    #[arg(long, value_delimiter = ',')]
    p_list: Option<Vec<usize>>,
    /// Per-message latency of the cost model.
    #[arg(long)]
    alpha: Option<f64>,
    /// Per-word cost of the cost model.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args, Clone, Default)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    sweep: SweepArgs,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Manifest {
    input: InputArgs,
    partition: PartitionArgs,
    impedance: ImpedanceArgs,
    run: RunArgs,
    output: OutputArgs,
    bench: SweepArgs,
}

/// Flags win per section: a section given on the command line replaces the
/// manifest's section of the same name.
fn pick<T: Default + PartialEq>(flags: T, file: T) -> T {
    if flags != T::default() {
        flags
    } else {
        file
    }
}

struct Resolved {
    input: InputArgs,
    partition: PartitionArgs,
    impedance: ImpedanceArgs,
    run: RunArgs,
    output: OutputArgs,
    sweep: SweepArgs,
}

fn resolve(common: CommonArgs, sweep: SweepArgs) -> Result<Resolved> {
    let manifest: Manifest = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?
        }
        None => Manifest::default(),
    };
    Ok(Resolved {
        input: pick(common.input, manifest.input),
        partition: pick(common.partition, manifest.partition),
        impedance: pick(common.impedance, manifest.impedance),
        run: pick(common.run, manifest.run),
        output: pick(common.output, manifest.output),
        sweep: pick(sweep, manifest.bench),
    })
}

enum Source {
    Demo,
    Files(PathBuf, PathBuf),
    Grid(GridSpec),
}

fn parse_blocks(text: &str) -> Result<Layout> {
    let (r, c) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| anyhow!("--blocks expects RxC, got '{text}'"))?;
    Ok(Layout::Blocks {
        rows: r.trim().parse().context("block rows")?,
        cols: c.trim().parse().context("block columns")?,
    })
}

fn layout(p: &PartitionArgs) -> Result<Option<Layout>> {
    match (p.strips, &p.blocks) {
        (Some(_), Some(_)) => bail!("give either --strips or --blocks"),
        (Some(s), None) => Ok(Some(Layout::Strips(s))),
        (None, Some(b)) => parse_blocks(b).map(Some),
        (None, None) => Ok(None),
    }
}

fn source(input: &InputArgs, partition: &PartitionArgs) -> Result<Source> {
    let count = [input.demo.is_some(), input.matrix.is_some() || input.rhs.is_some(), input.grid.is_some()]
        .iter()
        .filter(|&&b| b)
        .count();
    if count != 1 {
        bail!("give exactly one input: --demo, --matrix with --rhs, or --grid");
    }
    if let Some(name) = &input.demo {
        if name != "example51" {
            bail!("unknown demo '{name}'; available: example51");
        }
        return Ok(Source::Demo);
    }
    if let Some(m) = input.grid {
        let mut spec = GridSpec::new(m, layout(partition)?.unwrap_or(Layout::Whole));
        spec.sigma = input.sigma.unwrap_or(DEFAULT_SIGMA);
        if let Some(seed) = input.rhs_seed {
            spec.rhs = RhsKind::Random(seed);
        }
        return Ok(Source::Grid(spec));
    }
    match (&input.matrix, &input.rhs) {
        (Some(a), Some(b)) => Ok(Source::Files(a.clone(), b.clone())),
        _ => bail!("--matrix and --rhs must be given together"),
    }
}

fn read_assignment(path: &Path) -> Result<Vec<Option<usize>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading assignment {}", path.display()))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let v: i64 = l.parse().with_context(|| format!("bad subdomain id '{l}'"))?;
            match v {
                -1 => Ok(None),
                v if v >= 0 => Ok(Some(v as usize)),
                v => bail!("bad subdomain id {v}"),
            }
        })
        .collect()
}

struct Problem {
    graph: ElectricGraph,
    scheme: PartitionScheme,
    demo: bool,
}

fn load_problem(r: &Resolved) -> Result<Problem> {
    let src = source(&r.input, &r.partition)?;
    let graph = match &src {
        Source::Demo => system_to_graph(&example_system()),
        Source::Files(a, b) => {
            if !a.exists() {
                bail!("matrix file {} not found", a.display());
            }
            if !b.exists() {
                bail!("rhs file {} not found", b.display());
            }
            system_to_graph(&load_system(a, b)?)
        }
        Source::Grid(spec) => grid_system(spec)?,
    };
    let p = &r.partition;
    let given = [p.scheme.is_some(), p.assignment.is_some(), p.strips.is_some() || p.blocks.is_some()]
        .iter()
        .filter(|&&b| b)
        .count();
    if given > 1 {
        bail!("give at most one partition source: --scheme, --assignment, or --strips/--blocks");
    }
    let scheme = if let Some(path) = &p.scheme {
        let text = fs::read_to_string(path).with_context(|| format!("reading scheme {}", path.display()))?;
        PartitionScheme::from_toml(&text)?
    } else if let Some(path) = &p.assignment {
        default_conformal_scheme(&graph, &read_assignment(path)?)?
    } else {
        match &src {
            Source::Demo => example_scheme(),
            Source::Grid(spec) => default_conformal_scheme(&graph, &grid_assignment(spec)?)?,
            Source::Files(..) if p.strips.is_some() || p.blocks.is_some() => {
                bail!("--strips and --blocks apply to --grid inputs only")
            }
            Source::Files(..) => PartitionScheme::trivial(graph.num_vertices()),
        }
    };
    Ok(Problem {
        graph,
        scheme,
        demo: matches!(src, Source::Demo),
    })
}

fn impedances(r: &Resolved, s: &SplitSystem, demo: bool) -> Result<ImpedanceAssignment> {
    let z = &r.impedance;
    let given = [z.match_policy.is_some(), z.z_const.is_some(), z.impedance.is_some()]
        .iter()
        .filter(|&&b| b)
        .count();
    if given > 1 {
        bail!("give at most one impedance source: --match, --z-const, or --impedance");
    }
    if let Some(policy) = &z.match_policy {
        return Ok(match_impedances(s, policy.parse::<MatchPolicy>()?)?);
    }
    if let Some(v) = z.z_const {
        return Ok(ImpedanceAssignment::constant(s, v));
    }
    if let Some(path) = &z.impedance {
        let text = fs::read_to_string(path).with_context(|| format!("reading impedances {}", path.display()))?;
        return Ok(ImpedanceAssignment::from_toml(&text)?);
    }
    if demo {
        return Ok(ImpedanceAssignment::PerLine(example_impedances()));
    }
    Ok(match_impedances(s, MatchPolicy::Mean)?)
}

fn out_dir(r: &Resolved) -> PathBuf {
    r.output.out.clone().unwrap_or_else(|| PathBuf::from("vtm-out"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn vector_text(v: &[f64]) -> Result<String> {
    let mut buf = Vec::new();
    write_vector(&mut buf, v)?;
    Ok(String::from_utf8(buf)?)
}

#[derive(Serialize)]
struct CertifyReport {
    certificate: vtm_core::analysis::Certificate,
    reordering_residual: f64,
    fixed_point: vtm_core::analysis::FixedPointCheck,
}

fn certify_report(s: &SplitSystem, z: &ImpedanceAssignment, x: &[f64]) -> Result<(bool, String)> {
    let op = build_global_operator(s, z)?;
    let certificate = certify_convergence(&op)?;
    let fixed_point = fixed_point_check(&op, x)?;
    let certified = certificate.certified;
    let report = CertifyReport {
        certificate,
        reordering_residual: reordering_residual(s)?,
        fixed_point,
    };
    Ok((certified, toml::to_string(&report)?))
}

fn run_config(r: &Resolved, oracle: Vec<f64>) -> RunConfig {
    RunConfig {
        epsilon: r.run.eps.unwrap_or(1e-12),
        max_iter: r.run.max_iter.unwrap_or(5000),
        mode: if r.run.threads {
            ExecutionMode::Threaded
        } else {
            ExecutionMode::Sequential
        },
        oracle: Some(oracle),
        record_messages: r.output.message_log,
        ..RunConfig::default()
    }
}

fn cmd_solve(args: SolveArgs) -> Result<ExitCode> {
    let r = resolve(args.common, SweepArgs::default())?;
    let problem = load_problem(&r)?;
    let s = split(&problem.graph, &problem.scheme)?;
    let z = impedances(&r, &s, problem.demo)?;
    let sys = graph_to_system(&problem.graph);
    let oracle = direct_solve(&sys)?;
    let dir = out_dir(&r);
    fs::create_dir_all(&dir)?;

    write_text(&dir.join("impedance.toml"), &z.to_toml())?;
    match certify_report(&s, &z, &oracle) {
        Ok((_, text)) => write_text(&dir.join("certificate.toml"), &text)?,
        Err(e) => write_text(&dir.join("certificate.toml"), &format!("# not certified: {e}\n"))?,
    }
    let cfg = run_config(&r, oracle);
    let report = run_vtm(&s, &z, &cfg)?;
    write_text(&dir.join("solution.txt"), &vector_text(&report.x)?)?;
    write_text(&dir.join("trace.csv"), &report.trace_csv())?;
    if r.output.message_log {
        write_text(&dir.join("messages.csv"), &report.message_log_csv())?;
    }
    if r.output.trace {
        print!("{}", report.trace_csv());
    }
    let (gap_u, gap_w) = report.max_twin_gap();
    println!("converged: {}", report.converged);
    println!("iterations: {}", report.iterations);
    println!("final_rms: {:e}", report.final_rms().unwrap_or(f64::NAN));
    println!("residual_inf: {:e}", report.records.last().map_or(f64::NAN, |r| r.residual_inf));
    println!("twin_gap_potential: {gap_u:e}");
    println!("twin_gap_current: {gap_w:e}");
    println!("artifacts: {}", dir.display());
    Ok(if report.converged { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn cmd_certify(args: CommonArgs) -> Result<ExitCode> {
    let r = resolve(args, SweepArgs::default())?;
    let problem = load_problem(&r)?;
    let s = split(&problem.graph, &problem.scheme)?;
    let z = impedances(&r, &s, problem.demo)?;
    let x = direct_solve(&graph_to_system(&problem.graph))?;
    let (certified, text) = certify_report(&s, &z, &x)?;
    match &r.output.out {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(if certified { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn cmd_partition(args: CommonArgs) -> Result<ExitCode> {
    let r = resolve(args, SweepArgs::default())?;
    let problem = load_problem(&r)?;
    let s = split(&problem.graph, &problem.scheme)?;
    let dir = out_dir(&r);
    write_text(&dir.join("scheme.toml"), &problem.scheme.to_toml()?)?;
    s.export(&dir)?;
    let report = s.verify_conformal();
    println!("subdomains: {}", s.subdomains.len());
    println!("boundary_vertices: {}", s.scheme.boundary.len());
    println!("lines: {}", s.vtls.len());
    println!("split_level: {}", s.split_level());
    for (j, d) in report.per_subdomain.iter().enumerate() {
        println!("subdomain {j}: {d:?}");
    }
    Ok(if report.is_conformal() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn cmd_match(args: CommonArgs) -> Result<ExitCode> {
    let r = resolve(args, SweepArgs::default())?;
    let problem = load_problem(&r)?;
    let s = split(&problem.graph, &problem.scheme)?;
    let r_out = r.output.out.clone();
    let mut resolved_z = r.impedance.clone();
    if resolved_z == ImpedanceArgs::default() {
        resolved_z.match_policy = Some("mean".into());
    }
    let z = impedances(
        &Resolved {
            impedance: resolved_z,
            ..r
        },
        &s,
        false,
    )?;
    let text = z.to_toml();
    match &r_out {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen_grid(args: CommonArgs) -> Result<ExitCode> {
    let r = resolve(args, SweepArgs::default())?;
    let Source::Grid(spec) = source(&r.input, &r.partition)? else {
        bail!("gen-grid needs --grid");
    };
    let g = grid_system(&spec)?;
    let dir = out_dir(&r);
    fs::create_dir_all(&dir)?;
    save_system(&graph_to_system(&g), &dir.join("matrix.mtx"), &dir.join("rhs.txt"))?;
    if spec.layout != Layout::Whole {
        let scheme = default_conformal_scheme(&g, &grid_assignment(&spec)?)?;
        write_text(&dir.join("scheme.toml"), &scheme.to_toml()?)?;
    }
    println!("n: {}", spec.n());
    println!("artifacts: {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn bench_cell(r: &Resolved, n: usize, p: usize, epsilon: f64) -> Result<Option<usize>> {
    let m = (n as f64).sqrt().round() as usize;
    if m * m != n {
        bail!("n = {n} is not a square grid");
    }
    let mut spec = GridSpec::new(m, if p == 1 { Layout::Whole } else { Layout::Strips(p) });
    spec.sigma = r.input.sigma.unwrap_or(DEFAULT_SIGMA);
    if let Some(seed) = r.input.rhs_seed {
        spec.rhs = RhsKind::Random(seed);
    }
    let g = grid_system(&spec)?;
    let s = split(&g, &default_conformal_scheme(&g, &grid_assignment(&spec)?)?)?;
    let z = impedances(r, &s, false)?;
    let oracle = direct_solve(&graph_to_system(&g))?;
    let cfg = RunConfig {
        epsilon: f64::MIN_POSITIVE,
        max_iter: r.run.max_iter.unwrap_or(5000),
        mode: if r.run.threads {
            ExecutionMode::Threaded
        } else {
            ExecutionMode::Sequential
        },
        oracle: Some(oracle),
        stop_on_rms: Some(epsilon),
        ..RunConfig::default()
    };
    let report = run_vtm(&s, &z, &cfg)?;
    Ok(measure_k(&report.records, epsilon))
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode> {
    let r = resolve(args.common, args.sweep)?;
    let epsilon = r.run.eps.unwrap_or(1e-9);
    let model = MachineModel::new(r.sweep.alpha.unwrap_or(0.0), r.sweep.beta.unwrap_or(0.0))?;
    let ns = r.sweep.n_list.clone().unwrap_or_default();
    let ps = r.sweep.p_list.clone().unwrap_or_default();
    let mut body = format!("{BENCH_HEADER}\n");
    let mut notes = Vec::new();
    for &n in &ns {
        let mut ks = Vec::new();
        for &p in &ps {
            let k = match bench_cell(&r, n, p, epsilon) {
                Ok(k) => k,
                Err(e) => {
                    notes.push(format!("# n={n} p={p} failed: {e}"));
                    None
                }
            };
            body.push_str(&BenchRow { n, p, epsilon, k }.to_csv(&model));
            body.push('\n');
            ks.push((p, k));
        }
        if ks.len() >= 2 && ks.iter().all(|(_, k)| k.is_some()) {
            let mut sorted = ks.clone();
            sorted.sort_by_key(|(p, _)| *p);
            let trend = if sorted.windows(2).all(|w| w[0].1 <= w[1].1) {
                "non-decreasing"
            } else {
                "not monotone"
            };
            let list: Vec<String> = sorted.iter().map(|(p, k)| format!("{p}:{}", k.unwrap())).collect();
            notes.push(format!("# K over p at n={n} is {trend} ({})", list.join(" ")));
        }
    }
    for note in notes {
        body.push_str(&note);
        body.push('\n');
    }
    match &r.output.out {
        Some(path) => write_text(path, &body)?,
        None => print!("{body}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Partition(a) => cmd_partition(a),
        Command::Match(a) => cmd_match(a),
        Command::GenGrid(a) => cmd_gen_grid(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

//! Bulk-synchronous message-passing engine.
//!
//! One worker per subdomain. In round `k` a worker consumes the round
//! `k − 1` messages of its line neighbours, performs one local update and
//! sends its new port potentials and channel currents back. A monitor
//! outside the modelled communication gathers per-round reports, decides
//! termination and merges the global vector.
//!
//! The same worker and monitor code runs either sequentially or with one
//! thread per worker; both produce bit-identical results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::mpsc;

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::local::{assemble, precondition, FactoredLocal, ImpedanceAssignment, LocalUpdate};
use crate::partition::{merge, Channel, SplitSystem, SubdomainId};

/// Boundary variables from one worker to one neighbour for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMessage {
    pub k: usize,
    pub src: SubdomainId,
    pub dst: SubdomainId,
    pub values: Vec<PortValue>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PortValue {
    /// Receiving channel.
    pub channel: usize,
    /// Sending port.
    pub port: usize,
    pub u: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecutionMode {
    #[default]
    Sequential,
    Threaded,
}

/// Starting boundary values per subdomain and channel.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialBoundary {
    pub u: Vec<Vec<f64>>,
    pub omega: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Threshold on the largest relative boundary change between rounds.
    pub epsilon: f64,
    pub max_iter: usize,
    pub mode: ExecutionMode,
    /// Reference solution for the RMS error column.
    pub oracle: Option<Vec<f64>>,
    /// Also stop once the RMS error reaches this value.
    pub stop_on_rms: Option<f64>,
    pub record_messages: bool,
    /// Zero when absent.
    pub initial: Option<InitialBoundary>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-12,
            max_iter: 5000,
            mode: ExecutionMode::Sequential,
            oracle: None,
            stop_on_rms: None,
            record_messages: false,
            initial: None,
        }
    }
}

impl RunConfig {
    fn validate(&self, s: &SplitSystem) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::malformed("epsilon must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::malformed("max_iter must be at least 1"));
        }
        if let Some(x) = &self.oracle {
            if x.len() != s.dim() {
                return Err(Error::Dimension {
                    expected: s.dim(),
                    actual: x.len(),
                    context: "oracle solution",
                });
            }
        }
        if let Some(init) = &self.initial {
            let ok = init.u.len() == s.subdomains.len()
                && init.omega.len() == s.subdomains.len()
                && s.subdomains.iter().enumerate().all(|(j, sub)| {
                    init.u[j].len() == sub.channels.len() && init.omega[j].len() == sub.channels.len()
                });
            if !ok {
                return Err(Error::malformed("initial boundary values do not match the channels"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    pub max_boundary_delta: f64,
    pub residual_inf: f64,
    pub rms_error: Option<f64>,
}

/// Per-line agreement of the twins after the last round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwinGap {
    pub vtl: usize,
    /// `|u_a − u_b|`.
    pub potential: f64,
    /// `|ω_a + ω_b|`.
    pub current: f64,
}

/// One line of the message log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoggedMessage {
    pub k: usize,
    pub src: SubdomainId,
    pub dst: SubdomainId,
    pub port: usize,
    pub u: f64,
    pub omega: f64,
}

#[derive(Debug, Clone)]
pub struct IterationReport {
    /// One record per round, `k = 1..=iterations`.
    pub records: Vec<IterationRecord>,
    pub iterations: usize,
    pub converged: bool,
    pub x: Vec<f64>,
    pub max_twin_disagreement: f64,
    pub twin_gaps: Vec<TwinGap>,
    /// Local factorizations performed for the run.
    pub factorizations: usize,
    pub messages: Vec<LoggedMessage>,
}

impl IterationReport {
    pub fn final_rms(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.rms_error)
    }

    pub fn max_twin_gap(&self) -> (f64, f64) {
        self.twin_gaps
            .iter()
            .fold((0.0, 0.0), |(p, c), g| (f64::max(p, g.potential), f64::max(c, g.current)))
    }

    /// `iter,max_boundary_delta,residual_inf,rms_error`, blank RMS without an
    /// oracle.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,max_boundary_delta,residual_inf,rms_error\n");
        for r in &self.records {
            let rms = r.rms_error.map(fmt_f64).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.k,
                fmt_f64(r.max_boundary_delta),
                fmt_f64(r.residual_inf),
                rms
            );
        }
        out
    }

    /// `k,src,dst,port,u,omega`, one line per port value.
    pub fn message_log_csv(&self) -> String {
        let mut out = String::from("k,src,dst,port,u,omega\n");
        for m in &self.messages {
            let _ = writeln!(out, "{},{},{},{},{},{}", m.k, m.src, m.dst, m.port, fmt_f64(m.u), fmt_f64(m.omega));
        }
        out
    }
}

/// What a worker tells the monitor after a round.
#[derive(Debug, Clone)]
pub struct WorkerReport {
    pub id: SubdomainId,
    pub k: usize,
    /// Largest `(|Δu| + |Δω|) / (1 + |u|)` over the worker's channels.
    pub delta: f64,
    pub update: LocalUpdate,
    pub sent: Vec<BoundaryMessage>,
}

/// State confined to one subdomain's worker.
#[derive(Debug, Clone)]
pub struct Worker {
    id: SubdomainId,
    local: FactoredLocal,
    channels: Vec<Channel>,
    neighbors: Vec<SubdomainId>,
    u_twin: Vec<f64>,
    omega_twin: Vec<f64>,
    received: Vec<Option<usize>>,
    /// Own channel values from the previous round.
    u: Vec<f64>,
    omega: Vec<f64>,
    record: bool,
}

impl Worker {
    pub fn id(&self) -> SubdomainId {
        self.id
    }

    pub fn neighbors(&self) -> &[SubdomainId] {
        &self.neighbors
    }

    fn outgoing(&self, k: usize) -> Vec<BoundaryMessage> {
        let mut by_dst: BTreeMap<SubdomainId, Vec<PortValue>> = BTreeMap::new();
        for (c, ch) in self.channels.iter().enumerate() {
            by_dst.entry(ch.remote_subdomain).or_default().push(PortValue {
                channel: ch.remote_channel,
                port: ch.port,
                u: self.u[c],
                omega: self.omega[c],
            });
        }
        by_dst
            .into_iter()
            .map(|(dst, mut values)| {
                values.sort_by_key(|v| v.channel);
                BoundaryMessage {
                    k,
                    src: self.id,
                    dst,
                    values,
                }
            })
            .collect()
    }

    /// Stores a neighbour's round `k − 1` values for round `k`.
    pub fn receive(&mut self, msg: &BoundaryMessage, k: usize) -> Result<()> {
        if msg.dst != self.id || msg.k + 1 != k {
            return Err(Error::Protocol(format!(
                "worker {} in round {k} got a round-{} message for {}",
                self.id, msg.k, msg.dst
            )));
        }
        for v in &msg.values {
            let ch = self.channels.get(v.channel).ok_or_else(|| {
                Error::Protocol(format!("worker {} has no channel {}", self.id, v.channel))
            })?;
            if ch.remote_subdomain != msg.src {
                return Err(Error::Protocol(format!(
                    "channel {} of worker {} is not wired to {}",
                    v.channel, self.id, msg.src
                )));
            }
            if self.received[v.channel] == Some(k) {
                return Err(Error::Protocol(format!(
                    "duplicate value for channel {} of worker {} in round {k}",
                    v.channel, self.id
                )));
            }
            if !(v.u.is_finite() && v.omega.is_finite()) {
                return Err(Error::Protocol(format!("non-finite boundary value from {}", msg.src)));
            }
            self.u_twin[v.channel] = v.u;
            self.omega_twin[v.channel] = v.omega;
            self.received[v.channel] = Some(k);
        }
        Ok(())
    }

    /// Round `k`: needs every channel's round `k − 1` value.
    pub fn compute(&mut self, k: usize) -> Result<(Vec<BoundaryMessage>, WorkerReport)> {
        if let Some(c) = self.received.iter().position(|r| *r != Some(k)) {
            return Err(Error::Protocol(format!(
                "worker {} is missing the round-{} value for channel {c}",
                self.id,
                k - 1
            )));
        }
        let update = self.local.iterate(&self.u_twin, &self.omega_twin)?;
        let mut delta = 0.0_f64;
        for (c, ch) in self.channels.iter().enumerate() {
            let u = update.x[ch.port];
            let w = update.omega[c];
            delta = delta.max(((u - self.u[c]).abs() + (w - self.omega[c]).abs()) / (1.0 + u.abs()));
            self.u[c] = u;
            self.omega[c] = w;
        }
        let sent = self.outgoing(k);
        let report = WorkerReport {
            id: self.id,
            k,
            delta,
            update,
            sent: if self.record { sent.clone() } else { Vec::new() },
        };
        Ok((sent, report))
    }
}

/// Factors every subdomain once and returns the workers with their round-0
/// messages.
pub fn build_workers(
    s: &SplitSystem,
    z: &ImpedanceAssignment,
    initial: Option<&InitialBoundary>,
    record: bool,
) -> Result<(Vec<Worker>, Vec<BoundaryMessage>)> {
    let zs = z.matrices(s)?;
    let mut workers = Vec::with_capacity(s.subdomains.len());
    for (sub, zj) in s.subdomains.iter().zip(zs) {
        let local = precondition(&assemble(sub), zj)?;
        let nc = sub.channels.len();
        let (u, omega) = match initial {
            Some(init) => (init.u[sub.id].clone(), init.omega[sub.id].clone()),
            None => (vec![0.0; nc], vec![0.0; nc]),
        };
        workers.push(Worker {
            id: sub.id,
            local,
            channels: sub.channels.clone(),
            neighbors: sub.neighbors(),
            u_twin: vec![0.0; nc],
            omega_twin: vec![0.0; nc],
            received: vec![None; nc],
            u,
            omega,
            record,
        });
    }
    let initial_messages = workers.iter().flat_map(|w| w.outgoing(0)).collect();
    Ok((workers, initial_messages))
}

/// One synchronous round: delivers the round `k − 1` messages, then runs the
/// workers in `order`. Messages come back sorted by `(src, dst)` and reports
/// by worker id, so the result does not depend on `order`.
pub fn step_with_order(
    workers: &mut [Worker],
    inbox: &[BoundaryMessage],
    k: usize,
    order: &[usize],
) -> Result<(Vec<BoundaryMessage>, Vec<WorkerReport>)> {
    for msg in inbox {
        let w = workers
            .get_mut(msg.dst)
            .ok_or_else(|| Error::Protocol(format!("message for unknown worker {}", msg.dst)))?;
        w.receive(msg, k)?;
    }
    let mut sent = Vec::new();
    let mut reports = Vec::new();
    for &j in order {
        let (out, rep) = workers[j].compute(k)?;
        sent.extend(out);
        reports.push(rep);
    }
    sent.sort_by_key(|m| (m.src, m.dst));
    reports.sort_by_key(|r| r.id);
    Ok((sent, reports))
}

pub fn step(
    workers: &mut [Worker],
    inbox: &[BoundaryMessage],
    k: usize,
) -> Result<(Vec<BoundaryMessage>, Vec<WorkerReport>)> {
    let order: Vec<usize> = (0..workers.len()).collect();
    step_with_order(workers, inbox, k, &order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Decision {
    Continue,
    Converged,
    Stop,
}

struct Monitor<'a> {
    s: &'a SplitSystem,
    cfg: &'a RunConfig,
    records: Vec<IterationRecord>,
    last: Vec<WorkerReport>,
    messages: Vec<LoggedMessage>,
    converged: bool,
}

impl<'a> Monitor<'a> {
    fn new(s: &'a SplitSystem, cfg: &'a RunConfig, initial: &[BoundaryMessage]) -> Self {
        let mut m = Self {
            s,
            cfg,
            records: Vec::new(),
            last: Vec::new(),
            messages: Vec::new(),
            converged: false,
        };
        m.log(initial);
        m
    }

    fn log(&mut self, sent: &[BoundaryMessage]) {
        if !self.cfg.record_messages {
            return;
        }
        for msg in sent {
            for v in &msg.values {
                self.messages.push(LoggedMessage {
                    k: msg.k,
                    src: msg.src,
                    dst: msg.dst,
                    port: v.port,
                    u: v.u,
                    omega: v.omega,
                });
            }
        }
    }

    fn merged(&self) -> Result<crate::partition::Merged> {
        let locals: Vec<Vec<f64>> = self.last.iter().map(|r| r.update.x.clone()).collect();
        merge(self.s, &locals)
    }

    fn observe(&mut self, k: usize, mut reports: Vec<WorkerReport>) -> Result<Decision> {
        reports.sort_by_key(|r| r.id);
        for r in &reports {
            let sent = r.sent.clone();
            self.log(&sent);
        }
        let delta = reports.iter().fold(0.0_f64, |m, r| m.max(r.delta));
        self.last = reports;
        let x = self.merged()?.x;
        let residual = crate::graph::residual_inf(&self.s.global, &self.s.rhs, &x);
        let rms = self.cfg.oracle.as_ref().map(|o| rms_error(&x, o));
        self.records.push(IterationRecord {
            k,
            max_boundary_delta: delta,
            residual_inf: residual,
            rms_error: rms,
        });
        if delta < self.cfg.epsilon {
            self.converged = true;
            return Ok(Decision::Converged);
        }
        if let (Some(target), Some(r)) = (self.cfg.stop_on_rms, rms) {
            if r <= target {
                return Ok(Decision::Stop);
            }
        }
        if k >= self.cfg.max_iter {
            return Ok(Decision::Stop);
        }
        Ok(Decision::Continue)
    }

    fn finish(self, factorizations: usize) -> Result<IterationReport> {
        let merged = self.merged()?;
        let twin_gaps = self
            .s
            .vtls
            .iter()
            .map(|l| {
                let a = &self.last[l.a.subdomain].update;
                let b = &self.last[l.b.subdomain].update;
                TwinGap {
                    vtl: l.id,
                    potential: (a.x[l.a.port] - b.x[l.b.port]).abs(),
                    current: (a.omega[l.a.channel] + b.omega[l.b.channel]).abs(),
                }
            })
            .collect();
        Ok(IterationReport {
            iterations: self.records.len(),
            records: self.records,
            converged: self.converged,
            x: merged.x,
            max_twin_disagreement: merged.max_twin_disagreement,
            twin_gaps,
            factorizations,
            messages: self.messages,
        })
    }
}

/// Root mean square of `x − reference`.
pub fn rms_error(x: &[f64], reference: &[f64]) -> f64 {
    let n = x.len().max(1) as f64;
    (x.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n).sqrt()
}

/// Runs the iteration until the boundary change drops below `epsilon`, the
/// RMS target is met, or `max_iter` rounds have run.
pub fn run_vtm(s: &SplitSystem, z: &ImpedanceAssignment, cfg: &RunConfig) -> Result<IterationReport> {
    cfg.validate(s)?;
    let (workers, initial) = build_workers(s, z, cfg.initial.as_ref(), cfg.record_messages)?;
    let factorizations = workers.len();
    let mut monitor = Monitor::new(s, cfg, &initial);
    match cfg.mode {
        ExecutionMode::Sequential => run_sequential(workers, initial, &mut monitor)?,
        ExecutionMode::Threaded => run_threaded(workers, initial, &mut monitor)?,
    }
    monitor.finish(factorizations)
}

fn run_sequential(mut workers: Vec<Worker>, initial: Vec<BoundaryMessage>, monitor: &mut Monitor) -> Result<()> {
    let mut inbox = initial;
    for k in 1.. {
        let (sent, reports) = step(&mut workers, &inbox, k)?;
        inbox = sent;
        if monitor.observe(k, reports)? != Decision::Continue {
            break;
        }
    }
    Ok(())
}

fn run_threaded(workers: Vec<Worker>, initial: Vec<BoundaryMessage>, monitor: &mut Monitor) -> Result<()> {
    let n = workers.len();
    let (inbox_tx, inbox_rx): (Vec<_>, Vec<_>) = (0..n).map(|_| mpsc::channel::<BoundaryMessage>()).unzip();
    let (ctrl_tx, ctrl_rx): (Vec<_>, Vec<_>) = (0..n).map(|_| mpsc::channel::<bool>()).unzip();
    let (report_tx, report_rx) = mpsc::channel::<Result<WorkerReport>>();
    for msg in initial {
        inbox_tx[msg.dst].send(msg).expect("receiver alive");
    }

    std::thread::scope(|scope| -> Result<()> {
        for ((mut worker, rx), ctrl) in workers.into_iter().zip(inbox_rx).zip(ctrl_rx) {
            let peers: Vec<(SubdomainId, mpsc::Sender<BoundaryMessage>)> =
                worker.neighbors.iter().map(|&d| (d, inbox_tx[d].clone())).collect();
            let report_tx = report_tx.clone();
            scope.spawn(move || {
                let mut pending: BTreeMap<usize, Vec<BoundaryMessage>> = BTreeMap::new();
                for k in 1.. {
                    let outcome = (|| -> Result<WorkerReport> {
                        while pending.get(&(k - 1)).map_or(0, Vec::len) < peers.len() {
                            let msg = rx
                                .recv()
                                .map_err(|_| Error::Protocol(format!("worker {} lost its inbox", worker.id)))?;
                            pending.entry(msg.k).or_default().push(msg);
                        }
                        let mut batch = pending.remove(&(k - 1)).unwrap_or_default();
                        batch.sort_by_key(|m| m.src);
                        for msg in &batch {
                            worker.receive(msg, k)?;
                        }
                        let (sent, report) = worker.compute(k)?;
                        for msg in sent {
                            let tx = &peers.iter().find(|(d, _)| *d == msg.dst).expect("neighbour").1;
                            let _ = tx.send(msg);
                        }
                        Ok(report)
                    })();
                    if report_tx.send(outcome).is_err() {
                        return;
                    }
                    if ctrl.recv() != Ok(true) {
                        return;
                    }
                }
            });
        }
        drop(report_tx);
        drop(inbox_tx);

        let stop_all = |go: bool| {
            for c in &ctrl_tx {
                let _ = c.send(go);
            }
        };
        for k in 1.. {
            let mut reports = Vec::with_capacity(n);
            let mut failure = None;
            for _ in 0..n {
                match report_rx.recv() {
                    Ok(Ok(r)) => reports.push(r),
                    Ok(Err(e)) => failure = failure.or(Some(e)),
                    Err(_) => failure = failure.or(Some(Error::Protocol("worker exited early".into()))),
                }
            }
            if let Some(e) = failure {
                stop_all(false);
                return Err(e);
            }
            let decision = monitor.observe(k, reports);
            let go = matches!(decision, Ok(Decision::Continue));
            stop_all(go);
            if !go {
                return decision.map(|_| ());
            }
        }
        Ok(())
    })
}

//! The monitor/analyze/plan/execute loop and its knowledge base.
//!
//! An [`Adapter`] is stepped once per monitoring period. When a snapshot is
//! congested it calls [`gen_plan`], seeding the planner with the formulas
//! retained from the previous invocation, installs the winning formula for
//! future routing and hands back the re-routed flows.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::time::Instant;

use rand::Rng;
use thiserror::Error;

use crate::expr::{EvalContext, WeightExpr};
use crate::genplan::{gen_plan, GpConfig, Individual, PlanError, PlanResult};
use crate::netmodel::{Flow, Network, Snapshot, WeightAssignment};

/// True iff some link is utilized strictly above `threshold`.
pub fn detect(snapshot: &Snapshot, threshold: f64) -> bool {
    snapshot.util.iter().any(|&u| u > threshold)
}

/// Where the formulas in a knowledge base came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    ThisRun,
    Imported(String),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::ThisRun => f.write_str("this run"),
            Provenance::Imported(label) => write!(f, "imported from {label}"),
        }
    }
}

/// Best formulas kept between planner invocations.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    retained: Vec<Individual>,
    provenance: Provenance,
}

impl Default for KnowledgeBase {
    fn default() -> Self {
        Self {
            retained: Vec::new(),
            provenance: Provenance::ThisRun,
        }
    }
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Knowledge base of externally supplied formulas, all unevaluated.
    pub fn imported(label: impl Into<String>, exprs: Vec<WeightExpr>) -> Self {
        Self {
            retained: exprs.into_iter().map(Individual::new).collect(),
            provenance: Provenance::Imported(label.into()),
        }
    }

    pub fn retained(&self) -> &[Individual] {
        &self.retained
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    /// Replaces the contents with a planner's retained set.
    pub fn replace(&mut self, mut retained: Vec<Individual>, capacity: usize) {
        retained.sort_by(|a, b| {
            let fa = a.fitness.unwrap_or(f64::INFINITY);
            let fb = b.fitness.unwrap_or(f64::INFINITY);
            fa.total_cmp(&fb)
        });
        retained.truncate(capacity);
        self.retained = retained;
        self.provenance = Provenance::ThisRun;
    }
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("cannot export an empty knowledge base")]
    Empty,
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Writes one `<fitness> <formula>` line per retained formula.
/// Unevaluated formulas are written with fitness `NaN`.
pub fn export_kb<W: Write>(kb: &KnowledgeBase, mut sink: W) -> Result<(), KbError> {
    if kb.is_empty() {
        return Err(KbError::Empty);
    }
    for ind in kb.retained() {
        match ind.fitness {
            Some(f) => writeln!(sink, "{f} {}", ind.expr)?,
            None => writeln!(sink, "NaN {}", ind.expr)?,
        }
    }
    sink.flush()?;
    Ok(())
}

/// Reads formulas written by [`export_kb`]. Blank lines and lines starting
/// with `#` are skipped. Every formula must fit within `config`'s depth and
/// constant bounds. Recorded fitness values are discarded.
pub fn import_kb<R: BufRead>(
    source: R,
    label: impl Into<String>,
    config: &GpConfig,
) -> Result<KnowledgeBase, KbError> {
    let mut exprs = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let err = |reason: String| KbError::Line {
            line: line_no,
            reason,
        };
        let (fitness, formula) = text
            .split_once(char::is_whitespace)
            .ok_or_else(|| err("expected `<fitness> <formula>`".into()))?;
        fitness
            .parse::<f64>()
            .map_err(|_| err(format!("invalid fitness `{fitness}`")))?;
        let expr = WeightExpr::parse(formula.trim()).map_err(|e| err(e.to_string()))?;
        check_bounds(&expr, config).map_err(err)?;
        exprs.push(expr);
    }
    Ok(KnowledgeBase::imported(label, exprs))
}

fn check_bounds(expr: &WeightExpr, config: &GpConfig) -> Result<(), String> {
    let depth = expr.depth();
    if depth > config.max_depth {
        return Err(format!(
            "formula depth {depth} exceeds the maximum of {}",
            config.max_depth
        ));
    }
    let mut stack = vec![expr];
    while let Some(e) = stack.pop() {
        match e {
            WeightExpr::Const(c) if !(config.const_min..=config.const_max).contains(c) => {
                return Err(format!(
                    "constant {c} outside [{}, {}]",
                    config.const_min, config.const_max
                ));
            }
            WeightExpr::Bin(_, l, r) => {
                stack.push(l);
                stack.push(r);
            }
            _ => {}
        }
    }
    Ok(())
}

/// One planner invocation as logged.
#[derive(Debug, Clone, PartialEq)]
pub struct InvocationRecord {
    pub tick: f64,
    pub max_util: f64,
    pub generations: usize,
    pub best_fitness: f64,
    pub wallclock_ms: f64,
    pub formula: String,
    pub bootstrapped: usize,
}

pub const INVOCATION_CSV_HEADER: &str =
    "tick,max_util,generations,best_fitness,wallclock_ms,formula_text";

impl InvocationRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{},{:.6},{:.6},\"{}\"",
            self.tick,
            self.max_util,
            self.generations,
            self.best_fitness,
            self.wallclock_ms,
            self.formula
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdaptationState {
    /// Formula used to weight links for new arrivals; `None` means unit
    /// weights.
    pub active_expr: Option<WeightExpr>,
    pub invocation_count: usize,
    pub log: Vec<InvocationRecord>,
}

impl AdaptationState {
    /// Link weights the active formula assigns under the given utilization.
    pub fn weights(&self, network: &Network, util: &[f64], threshold: f64) -> WeightAssignment {
        match &self.active_expr {
            None => WeightAssignment::uniform(network.link_count(), 1),
            Some(expr) => WeightAssignment::new(
                network
                    .links()
                    .iter()
                    .zip(util)
                    .map(|(link, &util)| {
                        expr.weight(&EvalContext {
                            bw: link.bw,
                            dl: link.dl,
                            util,
                            threshold,
                        })
                    })
                    .collect(),
            ),
        }
    }
}

/// What an adaptation step changed.
#[derive(Debug, Clone, PartialEq)]
pub struct Adaptation {
    /// Full flow set to install, in place of the snapshot's flows.
    pub new_flows: Vec<Flow>,
    pub plan: PlanResult,
}

/// Owns the knowledge base and adaptation state across ticks.
#[derive(Debug, Clone)]
pub struct Adapter {
    config: GpConfig,
    kb: KnowledgeBase,
    state: AdaptationState,
}

impl Adapter {
    pub fn new(config: GpConfig, kb: KnowledgeBase) -> Result<Self, PlanError> {
        config.validate()?;
        Ok(Self {
            config,
            kb,
            state: AdaptationState::default(),
        })
    }

    pub fn config(&self) -> &GpConfig {
        &self.config
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn state(&self) -> &AdaptationState {
        &self.state
    }

    pub fn into_parts(self) -> (KnowledgeBase, AdaptationState) {
        (self.kb, self.state)
    }

    /// Runs analyze, plan and execute on one snapshot. Returns `None` when
    /// the snapshot is not congested.
    pub fn adapt_step<R: Rng + ?Sized>(
        &mut self,
        network: &Network,
        snapshot: &Snapshot,
        bandwidths: &[f64],
        rng: &mut R,
    ) -> Result<Option<Adaptation>, PlanError> {
        if !detect(snapshot, self.config.threshold) {
            return Ok(None);
        }
        let started = Instant::now();
        let plan = gen_plan(
            network,
            &snapshot.flows,
            bandwidths,
            self.kb.retained(),
            &self.config,
            rng,
        )?;
        let wallclock_ms = started.elapsed().as_secs_f64() * 1e3;

        self.state.invocation_count += 1;
        self.state.log.push(InvocationRecord {
            tick: snapshot.t,
            max_util: snapshot.max_util(),
            generations: plan.generations,
            best_fitness: plan.best_detail.value,
            wallclock_ms,
            formula: plan.best.expr.to_string(),
            bootstrapped: plan.bootstrapped,
        });
        self.state.active_expr = Some(plan.best.expr.clone());
        self.kb
            .replace(plan.retained.clone(), self.config.retained_size());

        Ok(Some(Adaptation {
            new_flows: plan.new_flows.clone(),
            plan,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::mnp_topology;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FIG_FORMULA: &str = "(((1.5 * threshold) * (1.5 * threshold)) / (((1.5 * threshold) - util) * ((1.5 * threshold) - util)))";

    fn snapshot_with_util(util: Vec<f64>) -> Snapshot {
        Snapshot {
            t: 0.0,
            flows: Vec::new(),
            util,
        }
    }

    #[test]
    fn detect_is_strict() {
        assert!(detect(&snapshot_with_util(vec![0.1, 0.9]), 0.8));
        assert!(!detect(&snapshot_with_util(vec![0.8, 0.2]), 0.8));
        assert!(!detect(&snapshot_with_util(vec![0.0; 4]), 0.8));
        assert!(!detect(&snapshot_with_util(Vec::new()), 0.8));
    }

    #[test]
    fn export_import_round_trip() {
        let config = GpConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let exprs: Vec<_> = (0..5)
            .map(|_| crate::expr::grow_random(6, &config.limits(), &mut rng))
            .collect();
        let mut kb = KnowledgeBase::new();
        kb.replace(
            exprs
                .iter()
                .enumerate()
                .map(|(i, e)| Individual {
                    expr: e.clone(),
                    fitness: Some(i as f64 * 0.25),
                })
                .collect(),
            5,
        );
        let mut buf = Vec::new();
        export_kb(&kb, &mut buf).unwrap();
        let back = import_kb(buf.as_slice(), "mem", &config).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back.provenance(), &Provenance::Imported("mem".into()));
        for (a, b) in back.retained().iter().zip(&exprs) {
            assert_eq!(&a.expr, b);
            assert_eq!(a.fitness, None);
        }
    }

    #[test]
    fn export_rejects_empty() {
        assert!(matches!(
            export_kb(&KnowledgeBase::new(), Vec::new()),
            Err(KbError::Empty)
        ));
    }

    #[test]
    fn import_skips_comments_and_blank_lines() {
        let text = format!("# saved\n\nNaN {FIG_FORMULA}\n1.5 util\n");
        let kb = import_kb(text.as_bytes(), "f", &GpConfig::default()).unwrap();
        assert_eq!(kb.len(), 2);
        assert_eq!(kb.retained()[1].expr, WeightExpr::Util);
    }

    #[test]
    fn import_names_bad_line() {
        let text = "0.5 util\n0.7 (util +\n";
        match import_kb(text.as_bytes(), "f", &GpConfig::default()) {
            Err(KbError::Line { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match import_kb("util\n".as_bytes(), "f", &GpConfig::default()) {
            Err(KbError::Line { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match import_kb("abc util\n".as_bytes(), "f", &GpConfig::default()) {
            Err(KbError::Line { line, reason }) => {
                assert_eq!(line, 1);
                assert!(reason.contains("fitness"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn import_rejects_too_deep() {
        let mut e = WeightExpr::Util;
        for _ in 1..17 {
            e = WeightExpr::bin(crate::expr::BinOp::Add, e, WeightExpr::Bw);
        }
        assert_eq!(e.depth(), 17);
        let text = format!("NaN {e}\n");
        match import_kb(text.as_bytes(), "f", &GpConfig::default()) {
            Err(KbError::Line { line, reason }) => {
                assert_eq!(line, 1);
                assert!(reason.contains("depth 17"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn import_rejects_out_of_range_constant() {
        let err = import_kb("NaN (util + 250)\n".as_bytes(), "f", &GpConfig::default());
        assert!(matches!(err, Err(KbError::Line { line: 1, .. })));
    }

    #[test]
    fn quiet_snapshot_changes_nothing() {
        let net = mnp_topology(3, 100.0, 25.0).unwrap();
        let mut adapter = Adapter::new(GpConfig::default(), KnowledgeBase::new()).unwrap();
        let flows = vec![Flow {
            request: 0,
            path: vec![0],
        }];
        let snap = Snapshot::capture(&net, 0.0, flows, &[30.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(adapter
            .adapt_step(&net, &snap, &[30.0], &mut rng)
            .unwrap()
            .is_none());
        assert_eq!(adapter.state().invocation_count, 0);
        assert!(adapter.state().active_expr.is_none());
    }

    #[test]
    fn congested_snapshot_installs_formula_and_fills_kb() {
        let net = mnp_topology(3, 100.0, 25.0).unwrap();
        let direct = net.find_link(0, 1).unwrap();
        let flows: Vec<_> = (0..3)
            .map(|request| Flow {
                request,
                path: vec![direct],
            })
            .collect();
        let bw = [30.0; 3];
        let snap = Snapshot::capture(&net, 20.0, flows, &bw).unwrap();
        let config = GpConfig {
            max_generations: 300,
            ..GpConfig::default()
        };
        let mut adapter = Adapter::new(config, KnowledgeBase::new()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = adapter
            .adapt_step(&net, &snap, &bw, &mut rng)
            .unwrap()
            .expect("congested");
        assert_eq!(adapter.state().invocation_count, 1);
        assert_eq!(adapter.state().log.len(), 1);
        assert_eq!(adapter.state().log[0].tick, 20.0);
        assert_eq!(adapter.kb().len(), 5);
        assert_eq!(
            adapter.state().active_expr.as_ref(),
            Some(&a.plan.best.expr)
        );
        let after = Snapshot::capture(&net, 20.0, a.new_flows.clone(), &bw).unwrap();
        assert!(!detect(&after, 0.8));

        // A second congestion bootstraps from the five retained formulas.
        let mut flows = a.new_flows;
        flows.push(Flow {
            request: 3,
            path: vec![direct],
        });
        flows.push(Flow {
            request: 4,
            path: vec![direct],
        });
        let bw = [30.0; 5];
        let snap = Snapshot::capture(&net, 30.0, flows, &bw).unwrap();
        if detect(&snap, 0.8) {
            let a2 = adapter
                .adapt_step(&net, &snap, &bw, &mut rng)
                .unwrap()
                .unwrap();
            assert_eq!(a2.plan.bootstrapped, 5);
            assert_eq!(adapter.state().invocation_count, 2);
            assert_eq!(adapter.kb().len(), 5);
        }
    }

    #[test]
    fn active_formula_weights_match_trace() {
        let net = mnp_topology(3, 100.0, 25.0).unwrap();
        let state = AdaptationState {
            active_expr: Some(WeightExpr::parse(FIG_FORMULA).unwrap()),
            ..AdaptationState::default()
        };
        let mut util = vec![0.0; net.link_count()];
        util[net.find_link(0, 1).unwrap()] = 0.6;
        util[net.find_link(0, 2).unwrap()] = 0.3;
        util[net.find_link(2, 1).unwrap()] = 0.3;
        let w = state.weights(&net, &util, 0.8);
        assert_eq!(w.get(net.find_link(0, 1).unwrap()), 4);
        assert_eq!(w.get(net.find_link(0, 2).unwrap()), 1);
        assert_eq!(w.get(net.find_link(0, 3).unwrap()), 1);
        let unit = AdaptationState::default().weights(&net, &util, 0.8);
        assert_eq!(unit, WeightAssignment::uniform(net.link_count(), 1));
    }

    #[test]
    fn csv_row_quotes_formula() {
        let r = InvocationRecord {
            tick: 20.0,
            max_util: 0.9,
            generations: 3,
            best_fitness: 1.5,
            wallclock_ms: 2.0,
            formula: "(util + 1)".into(),
            bootstrapped: 0,
        };
        assert_eq!(
            r.csv_row(),
            "20.000000,0.900000,3,1.500000,2.000000,\"(util + 1)\""
        );
    }
}

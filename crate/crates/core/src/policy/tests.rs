use std::collections::BTreeMap;
use std::path::PathBuf;

use super::*;
use crate::equivalence::{interface_hashes, literal_digests};
use crate::factoring::units;
use crate::kb::{AccuracySample, ExecutionRecord, Kb};
use crate::model::{load_workflow, WorkflowDescription};
use crate::par::Parallelism;

fn fixture(name: &str) -> WorkflowDescription {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures/composition")
        .join(format!("{name}.json"));
    load_workflow(&p).unwrap()
}

fn variant(base: &str, name: &str, from: &str, to: &str) -> WorkflowDescription {
    let mut w = fixture(base);
    w.name = name.into();
    for n in &mut w.nodes {
        for a in &mut n.command.arguments {
            *a = a.replace(from, to);
        }
    }
    w
}

/// Registers `wf` and records one execution per node with the given seconds.
fn seed(kb: &mut Kb, wf: &WorkflowDescription, seconds: &[(&str, f64)]) {
    let lits = literal_digests(wf, Parallelism::Sequential).unwrap();
    kb.register_workflow(wf, Some(&lits)).unwrap();
    let hashes = interface_hashes(wf, &lits, Parallelism::Sequential).unwrap();
    for (node, s) in seconds {
        kb.record_execution(
            ExecutionRecord {
                hash: hashes[*node].digest.clone(),
                workflow: wf.name.clone(),
                node: node.to_string(),
                started: 0.0,
                ended: *s,
                exit_code: 0,
                outputs: BTreeMap::new(),
                platform: "test".into(),
                memoized: false,
                wall_seconds: *s,
            },
            &[],
        )
        .unwrap();
    }
}

/// generate-relax-a at 10+1 / 20+1 seconds, alternates: generate-b 4+1,
/// a third generator 6+1, relax from generate-relax-b 8+1.
fn timed() -> (Kb, WorkflowDescription) {
    let mut kb = Kb::in_memory();
    let g = fixture("generate-relax-a");
    seed(&mut kb, &g, &[("generate", 10.0), ("generate-summary", 1.0), ("relax", 20.0), ("relax-summary", 1.0)]);
    seed(&mut kb, &fixture("generate-b"), &[("generate", 4.0), ("generate-summary", 1.0)]);
    let third = variant("generate-a", "generate-c", "generate-lattice", "generate-sobol");
    seed(&mut kb, &third, &[("generate", 6.0), ("generate-summary", 1.0)]);
    seed(
        &mut kb,
        &fixture("generate-relax-b"),
        &[("generate", 4.0), ("generate-summary", 1.0), ("relax", 8.0), ("relax-summary", 1.0)],
    );
    (kb, g)
}

fn ctx_run(kb: &Kb, g: &WorkflowDescription, cost: &CostFunction, bindings: &[SurrogateBinding]) -> Vec<SubstitutionPlan> {
    let ev = Evaluator::new(g, kb, cost).unwrap();
    let ctx = AgentContext {
        wf: g,
        kb,
        evaluator: &ev,
        bindings,
        rule: AdjudicationRule::default(),
        threshold: 0.9,
    };
    run_agents(&ctx, &[&PerformanceAgent, &AccuracyAgent])
}

fn sample(binding: &str, error: f64) -> AccuracySample {
    AccuracySample {
        binding: binding.into(),
        physical_hash: "p".into(),
        surrogate_hash: "s".into(),
        error,
        comparator: "diff".into(),
        timestamp: 0.0,
    }
}

#[test]
fn adjudication_clauses() {
    let mut kb = Kb::in_memory();
    let rule = |statistic| AdjudicationRule {
        min_samples: 10,
        statistic,
        tolerance: 0.05,
    };
    assert!(matches!(
        prior_adjudicate("s", &kb, &rule(Statistic::Max)),
        Decision::Reject { clause: Clause::MinSamples, .. }
    ));
    for i in 0..20 {
        kb.record_sample(sample("s", if i == 0 { 0.2 } else { 0.0315 })).unwrap();
        kb.record_sample(sample("t", 0.01)).unwrap();
    }
    assert_eq!(prior_adjudicate("t", &kb, &rule(Statistic::Max)), Decision::Approve);
    let stats = kb.accuracy_stats("s");
    assert!(stats.mean.unwrap() <= 0.05 && stats.max.unwrap() > 0.05);
    assert_eq!(prior_adjudicate("s", &kb, &rule(Statistic::Mean)), Decision::Approve);
    assert!(matches!(
        prior_adjudicate("s", &kb, &rule(Statistic::Max)),
        Decision::Reject { clause: Clause::Tolerance, .. }
    ));
}

#[test]
fn adjudication_flips_at_the_boundary() {
    let rule = AdjudicationRule {
        min_samples: 5,
        statistic: Statistic::Max,
        tolerance: 0.1,
    };
    let mut kb = Kb::in_memory();
    for i in 0..5 {
        assert!(!prior_adjudicate("b", &kb, &rule).approved(), "{i} samples");
        kb.record_sample(sample("b", 0.1)).unwrap();
    }
    assert!(prior_adjudicate("b", &kb, &rule).approved());
    kb.record_sample(sample("b", 0.1 + 1e-9)).unwrap();
    assert!(!prior_adjudicate("b", &kb, &rule).approved());
}

#[test]
fn cost_function_checks() {
    assert!(CostFunction::weights(0.0, 0.0, 0.0).validate().is_err());
    assert!(CostFunction::weights(-1.0, 1.0, 0.0).validate().is_err());
    let cf: CostFunction = serde_json::from_str(r#"{"runtime": 1, "accuracy-risk": 0.5}"#).unwrap();
    assert_eq!(cf.accuracy_risk, 0.5);
    assert_eq!(cf.risk_default, Some(1.0));
    assert!(serde_json::from_str::<CostFunction>(r#"{"speed": 1}"#).is_err());
}

#[test]
fn baseline_cost_and_missing_data() {
    let (kb, g) = timed();
    let cf = CostFunction::weights(1.0, 0.0, 0.0);
    assert_eq!(evaluate_plan(&SubstitutionPlan::baseline(), &g, &kb, &cf).unwrap(), 1.0);
    let ev = Evaluator::new(&g, &kb, &cf).unwrap();
    assert_eq!(ev.baseline_time(), Some(32.0));
    let empty = Kb::in_memory();
    assert!(matches!(
        Evaluator::new(&g, &empty, &cf),
        Err(PolicyError::NoData { objective: Objective::Runtime, .. })
    ));
    // accuracy-only pricing needs no timings
    assert!(Evaluator::new(&g, &empty, &CostFunction::weights(0.0, 1.0, 0.0)).is_ok());
}

#[test]
fn performance_agent_picks_fastest_alternate() {
    let (kb, g) = timed();
    let cf = CostFunction::weights(1.0, 0.0, 0.0);
    let plans = ctx_run(&kb, &g, &cf, &[]);
    assert_eq!(plans.len(), 2);
    let ev = Evaluator::new(&g, &kb, &cf).unwrap();
    let gen = units(&g).0.into_iter().find(|b| b.members.contains("generate")).unwrap();
    let p = plans.iter().find(|p| p.id == format!("performance-{}", gen.id)).unwrap();
    assert_eq!(p.substitutions.len(), 1);
    // generate-b (5s) beats the third generator (7s)
    assert!((ev.costing(p).unwrap().runtime - 26.0).abs() < 1e-9);
    assert!((p.expected_deltas[&Objective::Runtime] + 6.0).abs() < 1e-9);
    for p in &plans {
        assert!(ev.cost(p).unwrap() < 1.0);
        apply_plan(&g, p, false).unwrap();
    }
}

#[test]
fn no_equivalents_no_proposals() {
    let mut kb = Kb::in_memory();
    let g = fixture("generate-relax-a");
    seed(&mut kb, &g, &[("generate", 1.0), ("generate-summary", 1.0), ("relax", 1.0), ("relax-summary", 1.0)]);
    assert!(ctx_run(&kb, &g, &CostFunction::default(), &[]).is_empty());
}

#[test]
fn pick_is_the_brute_force_minimum_and_mix_dominates() {
    let (kb, g) = timed();
    let cf = CostFunction::weights(1.0, 0.0, 0.0);
    let plans = ctx_run(&kb, &g, &cf, &[]);
    let ev = Evaluator::new(&g, &kb, &cf).unwrap();
    let (picked, cost) = superintend(&plans, &ev, Mode::Pick).unwrap();
    let brute = plans
        .iter()
        .map(|p| ev.cost(p).unwrap())
        .fold(ev.cost(&SubstitutionPlan::baseline()).unwrap(), f64::min);
    assert_eq!(cost, brute);
    assert!((cost - 20.0 / 32.0).abs() < 1e-9, "relax alternate wins: {cost}");
    assert!(picked.id.starts_with("performance-"));
    let (mixed, mcost) = superintend(&plans, &ev, Mode::Mix).unwrap();
    assert!(mcost <= cost);
    assert!((mcost - 14.0 / 32.0).abs() < 1e-9, "{mcost}");
    assert_eq!(mixed.substitutions.len(), 2);
    assert!((ev.cost(&mixed).unwrap() - mcost).abs() < 1e-12);
}

#[test]
fn ties_go_to_the_smallest_id() {
    let (kb, g) = timed();
    let cf = CostFunction::weights(1.0, 0.0, 0.0);
    let plans = ctx_run(&kb, &g, &cf, &[]);
    let ev = Evaluator::new(&g, &kb, &cf).unwrap();
    let mut a = plans[0].clone();
    a.id = "zeta".into();
    let mut b = plans[0].clone();
    b.id = "alpha".into();
    let (p, _) = superintend(&[a, b], &ev, Mode::Pick).unwrap();
    assert_eq!(p.id, "alpha");
    // nothing beats the baseline when every weight is on accuracy risk
    let acc = CostFunction::weights(0.0, 1.0, 0.0);
    let ev = Evaluator::new(&g, &kb, &acc).unwrap();
    let (p, c) = superintend(&plans, &ev, Mode::Mix).unwrap();
    assert_eq!(p.id, BASELINE);
    assert_eq!(c, 0.0);
}

#[test]
fn measured_error_raises_cost() {
    let (mut kb, g) = timed();
    let cf = CostFunction::weights(0.0, 1.0, 0.0);
    let plans = ctx_run(&kb, &g, &CostFunction::weights(1.0, 0.0, 0.0), &[]);
    let sub = &plans[0].substitutions[0];
    let key = sub.sample_key().unwrap().to_string();
    for _ in 0..3 {
        kb.record_sample(sample(&key, 0.3)).unwrap();
    }
    let ev = Evaluator::new(&g, &kb, &cf).unwrap();
    let c = ev.cost(&plans[0]).unwrap();
    assert!((c - 0.3 / 0.05).abs() < 1e-9);
    assert!(c > ev.cost(&SubstitutionPlan::baseline()).unwrap());
    let strict = CostFunction {
        risk_default: None,
        ..cf
    };
    let ev = Evaluator::new(&g, &kb, &strict).unwrap();
    assert!(matches!(ev.cost(&plans[1]), Err(PolicyError::NoData { .. })));
}

#[test]
fn accuracy_agent_respects_the_rule() {
    let (mut kb, g) = timed();
    let donor = fixture("generate-relax-b");
    let relax = units(&donor).0.into_iter().find(|b| b.members.contains("relax")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    crate::substitution::extract_patch(&donor, &relax)
        .unwrap()
        .save(&dir.path().join("surrogate"))
        .unwrap();
    std::fs::write(
        dir.path().join("bindings.json"),
        r#"[{"id": "fast-relax", "physical": ["relax", "relax-summary"], "patch": "surrogate", "comparator": ["true"]}]"#,
    )
    .unwrap();
    let bindings = load_bindings(&dir.path().join("bindings.json")).unwrap();
    assert_eq!(bindings[0].mode, BindingMode::Canary);
    let cf = CostFunction::weights(1.0, 1.0, 0.0);
    let accuracy = |kb: &Kb| {
        ctx_run(kb, &g, &cf, &bindings)
            .into_iter()
            .filter(|p| p.agent == "accuracy")
            .count()
    };
    assert_eq!(accuracy(&kb), 0);
    for _ in 0..10 {
        kb.record_sample(sample("fast-relax", 0.01)).unwrap();
    }
    assert_eq!(accuracy(&kb), 1);
}

#[test]
fn overlapping_plans_are_refused() {
    let (kb, g) = timed();
    let plans = ctx_run(&kb, &g, &CostFunction::default(), &[]);
    let mut p = plans[0].clone();
    p.substitutions.push(p.substitutions[0].clone());
    assert!(matches!(apply_plan(&g, &p, false), Err(PolicyError::Overlap(_))));
}

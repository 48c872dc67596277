use std::path::Path;

use serde_json::json;

use super::*;
use crate::factoring::block_of;
use crate::kb::KbConfig;
use crate::model::parse_workflow;
use crate::policy::{AdjudicationRule, Statistic};
use crate::substitution::extract_patch;

fn wf(v: serde_json::Value) -> WorkflowDescription {
    parse_workflow(&v.to_string()).unwrap()
}

fn sh(name: &str, script: &str, refs: &[(&str, &str)], outs: &[&str]) -> serde_json::Value {
    json!({
        "name": name,
        "command": {"executable": "sh", "arguments": ["-c", script]},
        "inputs": refs.iter().map(|(n, o)| json!({
            "name": o,
            "source": {"kind": "reference", "node": n, "output": o}
        })).collect::<Vec<_>>(),
        "outputs": outs.iter().map(|o| json!({"name": o, "path": o})).collect::<Vec<_>>(),
    })
}

fn chain() -> WorkflowDescription {
    wf(json!({"name": "chain", "nodes": [
        sh("a", "echo 1 > a.txt", &[], &["a.txt"]),
        sh("b", "cat a.txt > b.txt; echo 2 >> b.txt", &[("a", "a.txt")], &["b.txt"]),
        sh("c", "cat b.txt > c.txt; : > empty.txt", &[("b", "b.txt")], &["c.txt", "empty.txt"]),
    ]}))
}

fn opts(dir: &Path) -> RunOptions {
    RunOptions {
        runs_dir: dir.join("runs"),
        ..Default::default()
    }
}

fn digests(r: &RunReport) -> BTreeMap<String, BTreeMap<String, String>> {
    r.nodes
        .iter()
        .map(|n| {
            (
                n.node.clone(),
                n.outputs.iter().map(|(k, v)| (k.clone(), v.digest.clone())).collect(),
            )
        })
        .collect()
}

#[test]
fn cold_then_warm() {
    let dir = tempfile::tempdir().unwrap();
    let mut kb = Kb::in_memory();
    let g = chain();
    let cold = execute(&g, Some(&mut kb), &opts(dir.path())).unwrap();
    assert!(cold.succeeded);
    assert_eq!(cold.task_attempts, 3);
    assert!(cold.nodes.iter().all(|n| n.state == NodeState::Succeeded));
    assert!(cold.run_dir.join(REPORT_FILE).is_file());
    assert!(cold.nodes[0].attempts[0].stdout.is_file());

    let warm = execute(&g, Some(&mut kb), &opts(dir.path())).unwrap();
    assert!(warm.succeeded);
    assert_eq!(warm.task_attempts, 0);
    assert_eq!(warm.memo_hits, 3);
    assert!(warm.nodes.iter().all(|n| n.memo_record.is_some()));
    assert_eq!(digests(&warm), digests(&cold));
    let empty = &warm.node("c").unwrap().outputs["empty.txt"];
    assert_eq!(std::fs::metadata(&empty.path).unwrap().len(), 0);
    assert_eq!(kb.executions().len(), 3);
}

#[test]
fn no_memo_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let mut kb = Kb::in_memory();
    let g = chain();
    execute(&g, Some(&mut kb), &opts(dir.path())).unwrap();
    let o = RunOptions {
        memoize: false,
        ..opts(dir.path())
    };
    assert_eq!(execute(&g, Some(&mut kb), &o).unwrap().task_attempts, 3);
    let none = execute(&g, None, &opts(dir.path())).unwrap();
    assert_eq!(none.task_attempts, 3);
    assert!(!none.memoize);
    assert_eq!(none.warnings.len(), 1);
}

#[test]
fn hits_cross_platforms() {
    let dir = tempfile::tempdir().unwrap();
    let mut kb = Kb::in_memory();
    let g = chain();
    let on = |tag: &str| RunOptions {
        platform: Some(ParameterLayer::new(tag, [])),
        ..opts(dir.path())
    };
    let cold = execute(&g, Some(&mut kb), &on("laptop")).unwrap();
    assert_eq!(cold.platform, "laptop");
    let warm = execute(&g, Some(&mut kb), &on("ci")).unwrap();
    assert_eq!(warm.memo_hits, 3);
    assert!(memoize_check(&g, "b", &kb).is_some());
    assert!(memoize_check(&chain_with_literal(dir.path(), "x"), "b", &kb).is_none());
}

fn chain_with_literal(dir: &Path, content: &str) -> WorkflowDescription {
    std::fs::write(dir.join("seed.txt"), content).unwrap();
    let mut w = wf(json!({"name": "lit", "nodes": [
        {
            "name": "a",
            "command": {"executable": "sh", "arguments": ["-c", "cat seed.txt > a.txt"]},
            "inputs": [{"name": "seed.txt", "source": {"kind": "literal-file", "path": "seed.txt"}}],
            "outputs": [{"name": "a.txt", "path": "a.txt"}]
        },
        sh("b", "cat a.txt > b.txt", &[("a", "a.txt")], &["b.txt"]),
    ]}));
    w.base_dir = Some(dir.to_path_buf());
    w
}

#[test]
fn literal_change_misses_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let mut kb = Kb::in_memory();
    execute(&chain_with_literal(dir.path(), "one"), Some(&mut kb), &opts(dir.path())).unwrap();
    let again = execute(&chain_with_literal(dir.path(), "one"), Some(&mut kb), &opts(dir.path())).unwrap();
    assert_eq!(again.memo_hits, 2);
    let changed = execute(&chain_with_literal(dir.path(), "two"), Some(&mut kb), &opts(dir.path())).unwrap();
    assert_eq!(changed.memo_hits, 0);
    assert_eq!(changed.task_attempts, 2);
    let text = std::fs::read_to_string(&changed.node("b").unwrap().outputs["b.txt"].path).unwrap();
    assert_eq!(text, "two");
}

#[test]
fn missing_blob_degrades_to_execution() {
    let dir = tempfile::tempdir().unwrap();
    let kb_dir = dir.path().join("kb");
    Kb::init(&kb_dir, KbConfig::default()).unwrap();
    let mut kb = Kb::open_writer(&kb_dir).unwrap();
    let g = chain();
    let cold = execute(&g, Some(&mut kb), &opts(dir.path())).unwrap();
    let digest = &cold.node("a").unwrap().outputs["a.txt"].digest;
    std::fs::remove_file(kb_dir.join("objects").join(&digest[..2]).join(&digest[2..])).unwrap();
    let warm = execute(&g, Some(&mut kb), &opts(dir.path())).unwrap();
    assert!(warm.succeeded);
    let a = warm.node("a").unwrap();
    assert_eq!(a.state, NodeState::Succeeded);
    assert!(a.degraded_hit);
    assert_eq!(warm.memo_hits, 2);
    assert_eq!(digests(&warm), digests(&cold));
}

#[test]
fn diamond_branches_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let g = wf(json!({"name": "diamond", "nodes": [
        sh("a", "echo a > a.txt", &[], &["a.txt"]),
        sh("b", "sleep 0.4; cat a.txt > b.txt", &[("a", "a.txt")], &["b.txt"]),
        sh("c", "sleep 0.4; cat a.txt > c.txt", &[("a", "a.txt")], &["c.txt"]),
        sh("d", "cat b.txt c.txt > d.txt", &[("b", "b.txt"), ("c", "c.txt")], &["d.txt"]),
    ]}));
    let o = RunOptions {
        max_parallel: 2,
        ..opts(dir.path())
    };
    let r = execute(&g, None, &o).unwrap();
    assert!(r.succeeded);
    let (b, c, d) = (r.node("b").unwrap(), r.node("c").unwrap(), r.node("d").unwrap());
    assert!(b.started.unwrap() < c.ended.unwrap() && c.started.unwrap() < b.ended.unwrap());
    assert!(d.started.unwrap() >= b.ended.unwrap().max(c.ended.unwrap()));

    let serial = RunOptions {
        max_parallel: 1,
        ..opts(dir.path())
    };
    let r = execute(&g, None, &serial).unwrap();
    let (b, c) = (r.node("b").unwrap(), r.node("c").unwrap());
    assert!(b.ended.unwrap() <= c.started.unwrap() || c.ended.unwrap() <= b.started.unwrap());
}

#[test]
fn retries_and_skips() {
    let dir = tempfile::tempdir().unwrap();
    let mark = dir.path().join("mark");
    let flaky = format!("if [ -f {0} ]; then echo ok > out.txt; else touch {0}; exit 3; fi", mark.display());
    let g = wf(json!({"name": "flaky", "nodes": [
        sh("f", &flaky, &[], &["out.txt"]),
        sh("after", "cat out.txt > done.txt", &[("f", "out.txt")], &["done.txt"]),
    ]}));
    let r = execute(&g, None, &opts(dir.path())).unwrap();
    assert!(r.succeeded);
    let f = r.node("f").unwrap();
    assert_eq!(f.attempts.len(), 2);
    assert_eq!(f.attempts[0].exit_code, Some(3));
    assert_ne!(f.attempts[0].sandbox, f.attempts[1].sandbox);

    std::fs::remove_file(&mark).unwrap();
    let once = RunOptions {
        restart_limit: 0,
        ..opts(dir.path())
    };
    let mut kb = Kb::in_memory();
    let r = execute(&g, Some(&mut kb), &once).unwrap();
    assert!(!r.succeeded);
    assert_eq!(r.node("f").unwrap().state, NodeState::Failed);
    assert_eq!(r.node("after").unwrap().state, NodeState::Skipped);
    assert!(kb.lookup_execution(&r.node("f").unwrap().hash).is_none());
    assert_eq!(kb.executions().len(), 1);
}

#[test]
fn missing_output_fails_without_retry() {
    let dir = tempfile::tempdir().unwrap();
    let g = wf(json!({"name": "lazy", "nodes": [sh("n", "true", &[], &["never.txt"])]}));
    let r = execute(&g, None, &opts(dir.path())).unwrap();
    assert!(!r.succeeded);
    assert_eq!(r.node("n").unwrap().attempts.len(), 1);
}

#[test]
fn argument_references_are_materialized() {
    let dir = tempfile::tempdir().unwrap();
    let g = wf(json!({"name": "args", "nodes": [
        sh("a", "echo hi > a.txt", &[], &["a.txt"]),
        {
            "name": "b",
            "command": {"executable": "cp", "arguments": ["{{ref:a/a.txt}}", "b.txt"]},
            "outputs": [{"name": "b.txt", "path": "b.txt"}]
        },
    ]}));
    let r = execute(&g, None, &opts(dir.path())).unwrap();
    assert!(r.succeeded);
    assert_eq!(
        r.node("a").unwrap().outputs["a.txt"].digest,
        r.node("b").unwrap().outputs["b.txt"].digest
    );
}

fn calc(name: &str, expr: &str) -> serde_json::Value {
    sh(
        name,
        &format!("awk '{{print {expr}}}' n.txt > x.txt"),
        &[("src", "n.txt")],
        &["x.txt"],
    )
}

fn host_and_binding(dir: &Path, surrogate_expr: &str, comparator_ok: bool) -> (WorkflowDescription, SurrogateBinding) {
    let host = wf(json!({"name": "host", "nodes": [
        sh("src", "echo 3 > n.txt", &[], &["n.txt"]),
        calc("calc", "$1*2"),
        sh("sink", "cat x.txt > final.txt", &[("calc", "x.txt")], &["final.txt"]),
    ]}));
    let donor = wf(json!({"name": "donor", "nodes": [
        sh("src", "echo 3 > n.txt", &[], &["n.txt"]),
        calc("approx", surrogate_expr),
        sh("sink", "cat x.txt > final.txt", &[("approx", "x.txt")], &["final.txt"]),
    ]}));
    let patch_dir = dir.join(format!("patch-{}", surrogate_expr.len()));
    extract_patch(&donor, &block_of(&donor, ["approx".to_string()].into()))
        .unwrap()
        .save(&patch_dir)
        .unwrap();
    let script = if comparator_ok {
        r#"a=$(cat "$1/x.txt"); b=$(cat "$2/x.txt"); awk -v a="$a" -v b="$b" 'BEGIN{d=a-b; if (d<0) d=-d; print d}'"#
    } else {
        "echo not-a-number"
    };
    let binding = SurrogateBinding {
        id: "calc-surrogate".into(),
        physical: ["calc".to_string()].into(),
        patch: patch_dir,
        comparator: vec!["sh".into(), "-c".into(), script.into(), "cmp".into()],
        mode: BindingMode::Canary,
    };
    (host, binding)
}

#[test]
fn canary_records_samples_without_interference() {
    let dir = tempfile::tempdir().unwrap();
    let (host, binding) = host_and_binding(dir.path(), "$1*2+0.5", true);
    let plain = execute(&host, None, &opts(dir.path())).unwrap();
    let mut kb = Kb::in_memory();
    for n in 1..=3 {
        let o = RunOptions {
            memoize: false,
            ..opts(dir.path())
        };
        let r = canary_run(&host, std::slice::from_ref(&binding), Some(&mut kb), &o).unwrap();
        assert!(r.succeeded);
        assert_eq!(r.leaf_outputs(&host), plain.leaf_outputs(&host));
        assert_eq!(digests(&r), digests(&plain));
        assert_eq!(r.canary.len(), 1);
        assert_eq!(r.canary[0].error, Some(0.5), "{:?}", r.canary[0]);
        assert_eq!(kb.accuracy_stats("calc-surrogate").count, n);
    }
}

#[test]
fn crashing_surrogate_or_bad_comparator_adds_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let plain = {
        let (host, _) = host_and_binding(dir.path(), "$1*2", true);
        execute(&host, None, &opts(dir.path())).unwrap()
    };
    for (expr, ok) in [("$1*2; exit 1", true), ("$1*2+1", false)] {
        let (host, binding) = host_and_binding(dir.path(), expr, ok);
        let mut kb = Kb::in_memory();
        let r = canary_run(&host, &[binding], Some(&mut kb), &opts(dir.path())).unwrap();
        assert!(r.succeeded);
        assert_eq!(digests(&r), digests(&plain));
        assert_eq!(kb.accuracy_stats("calc-surrogate").count, 0);
        assert!(r.canary[0].note.is_some());
    }
}

#[test]
fn adjudication_decides_the_substitution() {
    let dir = tempfile::tempdir().unwrap();
    let (host, binding) = host_and_binding(dir.path(), "$1*2+0.5", true);
    let rule = AdjudicationRule {
        min_samples: 10,
        statistic: Statistic::Max,
        tolerance: 0.05,
    };
    let sample = |error| crate::kb::AccuracySample {
        binding: "calc-surrogate".into(),
        physical_hash: "p".into(),
        surrogate_hash: "s".into(),
        error,
        comparator: "cmp".into(),
        timestamp: 0.0,
    };
    let final_text = |r: &RunReport| std::fs::read_to_string(&r.node("sink").unwrap().outputs["final.txt"].path).unwrap();
    let o = RunOptions {
        memoize: false,
        ..opts(dir.path())
    };

    let mut kb = Kb::in_memory();
    let r = adjudicated_run(&host, std::slice::from_ref(&binding), &rule, Some(&mut kb), &o, false).unwrap();
    assert!(r.substitutions.is_empty());
    assert_eq!(final_text(&r), "6\n");

    for i in 0..20 {
        kb.record_sample(sample(if i == 0 { 0.2 } else { 0.01 })).unwrap();
    }
    // mean is within tolerance, max is not
    let r = adjudicated_run(&host, std::slice::from_ref(&binding), &rule, Some(&mut kb), &o, false).unwrap();
    assert!(r.substitutions.is_empty());

    let mut kb = Kb::in_memory();
    for _ in 0..20 {
        kb.record_sample(sample(0.01)).unwrap();
    }
    let r = adjudicated_run(&host, std::slice::from_ref(&binding), &rule, Some(&mut kb), &o, true).unwrap();
    assert_eq!(r.substitutions, vec!["calc-surrogate".to_string()]);
    assert!(r.node("calc").is_none() && r.node("approx").is_some());
    assert_eq!(final_text(&r), "6.5\n");
    assert!(r.canary.is_empty());
}

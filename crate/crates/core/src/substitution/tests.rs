use std::path::PathBuf;

use serde_json::json;

use super::*;
use crate::equivalence::SubGraph;
use crate::factoring::{block_of, units, Block};
use crate::kb::Kb;
use crate::model::{load_workflow, parse_workflow, validate, WorkflowDescription};
use crate::par::Parallelism;

fn fixture(name: &str) -> WorkflowDescription {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures/composition")
        .join(format!("{name}.json"));
    load_workflow(&p).unwrap()
}

const LIBRARY: [&str; 6] = [
    "generate-relax-a",
    "generate-relax-b",
    "relax-analyse-a",
    "relax-analyse-b",
    "generate-a",
    "generate-b",
];

fn wf(v: serde_json::Value) -> WorkflowDescription {
    parse_workflow(&v.to_string()).unwrap()
}

fn node(name: &str, args: &[&str], refs: &[(&str, &str)], outs: &[&str]) -> serde_json::Value {
    json!({
        "name": name,
        "command": {"executable": "sh", "arguments": args},
        "inputs": refs.iter().map(|(n, o)| json!({
            "name": o,
            "source": {"kind": "reference", "node": n, "output": o}
        })).collect::<Vec<_>>(),
        "outputs": outs.iter().map(|o| json!({"name": o, "path": o})).collect::<Vec<_>>(),
    })
}

fn block(w: &WorkflowDescription, members: &[&str]) -> Block {
    block_of(w, members.iter().map(|s| s.to_string()).collect())
}

fn unit_with(w: &WorkflowDescription, member: &str) -> Block {
    units(w).0.into_iter().find(|b| b.members.contains(member)).unwrap()
}

fn chain() -> WorkflowDescription {
    wf(json!({"name": "chain", "nodes": [
        node("a", &["make x"], &[], &["x.dat"]),
        node("b", &["step"], &[("a", "x.dat")], &["y.dat"]),
        node("c", &["finish"], &[("b", "y.dat")], &["z.dat"]),
    ]}))
}

fn substitute(g: &WorkflowDescription, patch: &Patch) -> (WorkflowDescription, Vec<Conflict>) {
    let splice = identify_splice_points(g, patch, DEFAULT_THRESHOLD, false);
    apply_patch(g, patch, &splice, false).unwrap()
}

#[test]
fn one_node_block_with_upstream_reference() {
    let g = chain();
    let p = extract_patch(&g, &block(&g, &["b"])).unwrap();
    assert_eq!(p.graph.nodes.len(), 1);
    assert_eq!(p.input_schema.len(), 1);
    assert_eq!(p.input_schema[0].id, "a/x.dat");
    assert_eq!(p.output_schema.len(), 1);
    assert_eq!(p.output_schema[0].consumers, vec!["c".to_string()]);
}

#[test]
fn source_block_has_no_inputs() {
    let g = chain();
    let p = extract_patch(&g, &block(&g, &["a"])).unwrap();
    assert!(p.input_schema.is_empty());
    assert_eq!(p.removals(), vec!["a"]);
}

#[test]
fn missing_literal_is_an_error() {
    let mut g = fixture("generate-a");
    g.base_dir = Some(PathBuf::from("/nonexistent"));
    let err = extract_patch(&g, &unit_with(&g, "generate")).unwrap_err();
    assert!(matches!(err, SubstitutionError::MissingPayload { .. }));
}

#[test]
fn identity_round_trip_on_every_unit() {
    for name in LIBRARY {
        let g = fixture(name);
        for b in units(&g).0 {
            let p = extract_patch(&g, &b).unwrap();
            let (out, conflicts) = substitute(&g, &p);
            assert!(conflicts.is_empty(), "{name}: {conflicts:?}");
            assert!(isomorphic(&g, &out), "{name} block {:?}", b.members);
        }
    }
}

#[test]
fn identity_round_trip_on_single_nodes() {
    let g = chain();
    for n in ["a", "b", "c"] {
        let p = extract_patch(&g, &block(&g, &[n])).unwrap();
        let (out, conflicts) = substitute(&g, &p);
        assert!(conflicts.is_empty());
        assert!(isomorphic(&g, &out));
    }
}

#[test]
fn isomorphism_sees_commands_and_edges() {
    let g = chain();
    let mut renamed = g.clone();
    renamed.rename_node("b", "middle");
    assert!(isomorphic(&g, &renamed));
    let mut changed = g.clone();
    changed.nodes[1].command.arguments = vec!["other".into()];
    assert!(!isomorphic(&g, &changed));
    let rewired = wf(json!({"name": "chain", "nodes": [
        node("a", &["make x"], &[], &["x.dat"]),
        node("b", &["step"], &[], &["y.dat"]),
        node("c", &["finish"], &[("b", "y.dat")], &["z.dat"]),
    ]}));
    assert!(!isomorphic(&g, &rewired));
}

#[test]
fn empty_patch_is_identity() {
    let g = chain();
    let p = Patch::empty();
    let splice = identify_splice_points(&g, &p, DEFAULT_THRESHOLD, false);
    assert!(splice.removal.is_empty());
    let (out, conflicts) = apply_patch(&g, &p, &splice, false).unwrap();
    assert!(conflicts.is_empty());
    assert_eq!(out, g);
}

#[test]
fn two_source_splice_points() {
    // target: two sources feed a two-node middle section whose result c consumes
    let g = wf(json!({"name": "target", "nodes": [
        node("a", &["gen a"], &[], &["x.dat"]),
        node("b", &["gen b"], &[], &["y.dat"]),
        node("m1", &["mix"], &[("a", "x.dat"), ("b", "y.dat")], &["mid.dat"]),
        node("m2", &["refine"], &[("m1", "mid.dat")], &["z.dat"]),
        node("c", &["use"], &[("m2", "z.dat")], &["final.dat"]),
    ]}));
    let h = wf(json!({"name": "donor", "nodes": [
        node("src-a", &["gen a"], &[], &["x.dat"]),
        node("src-b", &["gen b"], &[], &["y.dat"]),
        node("p", &["combine"], &[("src-a", "x.dat"), ("src-b", "y.dat")], &["z.dat"]),
        node("sink", &["use"], &[("p", "z.dat")], &["final.dat"]),
    ]}));
    let patch = extract_patch(&h, &block(&h, &["p"])).unwrap();
    assert_eq!(patch.input_schema.len(), 2);
    let splice = identify_splice_points(&g, &patch, DEFAULT_THRESHOLD, false);
    assert!(splice.conflicts.is_empty(), "{:?}", splice.conflicts);
    assert_eq!(splice.inputs.len(), 2);
    assert_eq!(splice.inputs["src-a/x.dat"].node, "a");
    assert_eq!(splice.inputs["src-b/y.dat"].node, "b");
    assert_eq!(splice.inputs["src-a/x.dat"].score, 1.0);
    assert_eq!(splice.outputs.len(), 1);
    assert_eq!(splice.outputs[0].consumer, "c");
    assert_eq!(splice.removal, ["m1", "m2"].iter().map(|s| s.to_string()).collect());

    let (out, conflicts) = apply_patch(&g, &patch, &splice, false).unwrap();
    assert!(conflicts.is_empty());
    let names: Vec<&str> = out.nodes.iter().map(|n| n.name.as_str()).collect();
    assert_eq!(names, ["a", "b", "p", "c"]);
    let expected = wf(json!({"name": "target", "nodes": [
        node("a", &["gen a"], &[], &["x.dat"]),
        node("b", &["gen b"], &[], &["y.dat"]),
        node("p", &["combine"], &[("a", "x.dat"), ("b", "y.dat")], &["z.dat"]),
        node("c", &["use"], &[("p", "z.dat")], &["final.dat"]),
    ]}));
    assert!(isomorphic(&out, &expected));
}

#[test]
fn identical_exports_are_ambiguous() {
    let g = wf(json!({"name": "g", "nodes": [
        node("a1", &["gen"], &[], &["x.dat"]),
        node("a2", &["gen2"], &[], &["x.dat"]),
        node("c", &["use"], &[("a1", "x.dat")], &["y.dat"]),
    ]}));
    let h = wf(json!({"name": "h", "nodes": [
        node("src", &["gen"], &[], &["x.dat"]),
        node("q", &["use better"], &[("src", "x.dat")], &["y.dat"]),
    ]}));
    let patch = extract_patch(&h, &block(&h, &["q"])).unwrap();
    let splice = identify_splice_points(&g, &patch, DEFAULT_THRESHOLD, false);
    assert_eq!(splice.conflicts.len(), 1);
    assert_eq!(splice.conflicts[0].kind, ConflictKind::AmbiguousSplice);
    let (out, conflicts) = apply_patch(&g, &patch, &splice, false).unwrap();
    assert_eq!(out, g);
    assert_eq!(conflicts.len(), 1);

    let forced = identify_splice_points(&g, &patch, DEFAULT_THRESHOLD, true);
    assert!(forced.conflicts.is_empty());
    assert_eq!(forced.warnings.len(), 1);
    assert_eq!(forced.inputs["src/x.dat"].node, "a1");
}

#[test]
fn unmapped_input_below_threshold() {
    let g = chain();
    let h = wf(json!({"name": "h", "nodes": [
        node("src", &["gen"], &[], &["w.dat"]),
        node("q", &["use"], &[("src", "w.dat")], &["y.dat"]),
    ]}));
    let patch = extract_patch(&h, &block(&h, &["q"])).unwrap();
    let splice = identify_splice_points(&g, &patch, DEFAULT_THRESHOLD, false);
    assert_eq!(splice.conflicts.len(), 1);
    assert_eq!(splice.conflicts[0].kind, ConflictKind::UnmappedInput);
    // forcing cannot repair a dangling reference
    let err = apply_patch(&g, &patch, &splice, true).unwrap_err();
    assert!(matches!(err, SubstitutionError::Invalid(_)));
}

#[test]
fn deleted_output_is_one_argument_expectation() {
    let g = chain();
    let mut patch = extract_patch(&g, &block(&g, &["b"])).unwrap();
    patch.graph.nodes[0].outputs.clear();
    patch.output_schema.clear();
    let splice = identify_splice_points(&g, &patch, DEFAULT_THRESHOLD, false);
    assert_eq!(splice.conflicts.len(), 1);
    assert_eq!(splice.conflicts[0].kind, ConflictKind::ArgumentExpectation);
    assert_eq!(splice.conflicts[0].locus, "c:input `y.dat`");
    let (out, conflicts) = apply_patch(&g, &patch, &splice, false).unwrap();
    assert_eq!(out, g);
    assert_eq!(conflicts.len(), 1);
}

#[test]
fn expected_arguments_are_checked() {
    let mut g = chain();
    g.nodes[2]
        .annotations
        .insert(crate::model::EXPECTS_ARGS.into(), json!(["--precise"]));
    let p = extract_patch(&g, &block(&g, &["b"])).unwrap();
    let splice = identify_splice_points(&g, &p, DEFAULT_THRESHOLD, false);
    assert_eq!(splice.conflicts.len(), 1);
    assert_eq!(splice.conflicts[0].kind, ConflictKind::ArgumentExpectation);

    g.nodes[1].command.arguments = vec!["step --precise".into()];
    let p = extract_patch(&g, &block(&g, &["b"])).unwrap();
    assert!(identify_splice_points(&g, &p, DEFAULT_THRESHOLD, false).conflicts.is_empty());
}

#[test]
fn dangling_consumer_when_patch_is_empty() {
    let g = chain();
    let mut p = Patch::empty();
    p.instructions.push(Instruction::Remove { node: "b".into() });
    let splice = identify_splice_points(&g, &p, DEFAULT_THRESHOLD, false);
    assert_eq!(splice.conflicts.len(), 1);
    assert_eq!(splice.conflicts[0].kind, ConflictKind::DanglingConsumer);
}

#[test]
fn name_collisions_are_suffixed() {
    let g = chain();
    let h = wf(json!({"name": "h", "nodes": [
        node("src", &["make x"], &[], &["x.dat"]),
        node("c", &["step fast"], &[("src", "x.dat")], &["y.dat"]),
        node("sink", &["finish"], &[("c", "y.dat")], &["z.dat"]),
    ]}));
    let mut patch = extract_patch(&h, &block(&h, &["c"])).unwrap();
    patch.instructions = vec![Instruction::Remove { node: "b".into() }];
    let (out, conflicts) = substitute(&g, &patch);
    assert!(conflicts.is_empty());
    let names: Vec<&str> = out.nodes.iter().map(|n| n.name.as_str()).collect();
    assert_eq!(names, ["a", "c-p", "c"]);
    assert_eq!(out.node("c").unwrap().producers().into_iter().collect::<Vec<_>>(), ["c-p"]);
    assert_eq!(out.node("c-p").unwrap().producers().into_iter().collect::<Vec<_>>(), ["a"]);
}

#[test]
fn modify_instruction_is_applied() {
    let g = chain();
    let mut p = extract_patch(&g, &block(&g, &["b"])).unwrap();
    p.instructions.push(Instruction::Modify {
        node: "c".into(),
        arguments: Some(vec!["finish --fast".into()]),
        environment: [("MODE".to_string(), "fast".to_string())].into(),
    });
    let (out, _) = substitute(&g, &p);
    let c = out.node("c").unwrap();
    assert_eq!(c.command.arguments, ["finish --fast"]);
    assert_eq!(c.command.environment["MODE"], "fast");
}

#[test]
fn both_units_swapped_for_the_alternate() {
    let g = fixture("generate-relax-a");
    let donor = fixture("generate-relax-b");
    let (g1, c1) = substitute(&g, &extract_patch(&donor, &unit_with(&donor, "generate")).unwrap());
    assert!(c1.is_empty(), "{c1:?}");
    let (g2, c2) = substitute(&g1, &extract_patch(&donor, &unit_with(&donor, "relax")).unwrap());
    assert!(c2.is_empty(), "{c2:?}");
    validate(&g2).unwrap();
    let whole = |w: &WorkflowDescription| {
        let s = SubGraph::whole(w);
        (s.domain(), s.codomain())
    };
    assert_eq!(whole(&g2), whole(&g));
    assert!(!isomorphic(&g2, &g));
    assert!(isomorphic(&g2, &donor));
}

#[test]
fn patch_directory_round_trip() {
    let g = fixture("generate-relax-a");
    let p = extract_patch(&g, &unit_with(&g, "generate")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let saved = p.save(dir.path()).unwrap();
    let loaded = Patch::load(dir.path()).unwrap();
    assert_eq!(loaded, saved);
    assert_eq!(loaded.graph, p.graph);
    let file = &loaded.payload["data/seed.json"];
    let stored = loaded.payload_path("data/seed.json").unwrap();
    assert_eq!(crate::canon::digest_file(&stored).unwrap(), file.digest);

    // applied somewhere the literal does not resolve, the payload copy is used
    let mut elsewhere = g.clone();
    elsewhere.base_dir = Some(dir.path().join("nowhere"));
    let (out, conflicts) = substitute(&elsewhere, &loaded);
    assert!(conflicts.is_empty());
    let crate::model::InputSource::LiteralFile { path } = &out.node("generate").unwrap().inputs[0].source else {
        panic!("literal expected")
    };
    assert!(PathBuf::from(path).is_absolute());
    assert_eq!(crate::canon::digest_file(std::path::Path::new(path)).unwrap(), file.digest);
}

fn library() -> (Kb, Vec<LibraryEntry>) {
    let mut kb = Kb::in_memory();
    let mut lib = Vec::new();
    for name in LIBRARY {
        let w = fixture(name);
        kb.register_workflow(&w, None).unwrap();
        lib.push(LibraryEntry::new(w));
    }
    kb.compute_edges(None, Parallelism::default()).unwrap();
    (kb, lib)
}

#[test]
fn composition_adds_ten() {
    let (kb, lib) = library();
    let cands = enumerate_compositions(&lib, &kb, DEFAULT_THRESHOLD).unwrap();
    let count = |k| cands.iter().filter(|c| c.kind == k).count();
    assert_eq!(cands.len(), 10);
    assert_eq!(count(CandidateKind::Recombination), 6);
    assert_eq!(count(CandidateKind::Standalone), 4);
    for c in &cands {
        validate(&c.workflow).unwrap();
        for entry in &lib {
            assert!(!isomorphic(&c.workflow, &entry.workflow), "{} repeats {}", c.name, entry.workflow.name);
        }
    }
    let digests: std::collections::BTreeSet<_> = cands.iter().map(|c| &c.wl_digest).collect();
    assert_eq!(digests.len(), 10);

    let again = enumerate_compositions(&lib, &kb, DEFAULT_THRESHOLD).unwrap();
    let names = |cs: &[CompositionCandidate]| cs.iter().map(|c| c.name.clone()).collect::<Vec<_>>();
    assert_eq!(names(&again), names(&cands));
}

#[test]
fn single_workflow_library_adds_nothing() {
    let mut kb = Kb::in_memory();
    let w = fixture("generate-a");
    kb.register_workflow(&w, None).unwrap();
    kb.compute_edges(None, Parallelism::Sequential).unwrap();
    let cands = enumerate_compositions(&[LibraryEntry::new(w)], &kb, DEFAULT_THRESHOLD).unwrap();
    assert!(cands.is_empty());
}

#[test]
fn incompatible_blocks_do_not_combine() {
    let (kb, lib) = library();
    let cands = enumerate_compositions(&lib, &kb, 1.01).unwrap();
    assert!(cands.iter().all(|c| c.kind == CandidateKind::Standalone));
}

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use awf_core::equivalence::{
    function_similarity, interface_hashes, jaccard, literal_digests, LabelMode, Metric, SubGraph, WlConfig,
};
use awf_core::factoring::{extract_block_workflow, factor, units, Block};
use awf_core::kb::{workflow_digest, Kb, KbConfig, KbNodeEntry, Scope, SourceRef};
use awf_core::model::{load_workflow, validate, ParameterLayer, WorkflowDescription};
use awf_core::par::Parallelism;
use awf_core::policy::{
    apply_plan, load_bindings, run_agents, superintend, AccuracyAgent, AdjudicationRule, AgentContext,
    CostFunction, Evaluator, Mode, PerformanceAgent, Statistic, SubstitutionPlan,
};
use awf_core::runtime::{adjudicated_run, canary_run, execute, RunOptions, RunReport};
use awf_core::substitution::{
    apply_patch, enumerate_compositions, extract_patch, identify_splice_points, LibraryEntry, Patch,
    DEFAULT_THRESHOLD,
};

#[derive(Parser)]
#[command(name = "awf", version, about = "Approximation-aware workflow engine")]
struct Cli {
    /// Knowledge-base directory
    #[arg(long, global = true, env = "AWF_KB")]
    kb: Option<PathBuf>,

    /// Output format
    #[arg(long, global = true, value_enum, default_value_t = Format::Human)]
    format: Format,

    /// More logging (repeatable)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Human,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Check a workflow description
    Validate { workflow: PathBuf },
    /// Execute a workflow
    Run(RunArgs),
    /// Print interface hashes
    Hash {
        workflow: PathBuf,
        #[arg(long)]
        node: Option<String>,
    },
    /// Score two workflows against each other
    Similarity {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_parser = parse_metric)]
        metric: Metric,
        #[arg(long, value_parser = parse_mode, default_value = "name")]
        wl_mode: LabelMode,
    },
    /// Partition a workflow into blocks
    Factor {
        workflow: PathBuf,
        /// Write each unit as a standalone workflow plus boundary.json
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Extract or apply patches
    #[command(subcommand)]
    Patch(PatchCommand),
    /// Enumerate new workflows from a library of workflows
    Compose {
        #[arg(long)]
        library: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Propose a substitution plan
    Propose {
        workflow: PathBuf,
        /// Weights file: {"runtime": w1, "accuracy-risk": w2, "monetary": w3}
        #[arg(long)]
        objectives: PathBuf,
        #[arg(long, value_parser = parse_pick_mode, default_value = "pick")]
        mode: Mode,
        #[arg(long)]
        bindings: Option<PathBuf>,
        /// Minimum name-mode function similarity for an alternate
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        #[command(flatten)]
        rule: RuleArgs,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Apply a substitution plan
    ApplyPlan {
        workflow: PathBuf,
        plan: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Knowledge-base maintenance
    #[command(subcommand)]
    Kb(KbCommand),
}

#[derive(Args)]
struct RunArgs {
    workflow: PathBuf,
    /// Parameter layer file
    #[arg(long)]
    platform: Option<PathBuf>,
    #[arg(long)]
    no_memo: bool,
    #[arg(long)]
    max_parallel: Option<usize>,
    /// Retries after a non-zero exit
    #[arg(long, default_value_t = 1)]
    restart_limit: u32,
    #[arg(long)]
    bindings: Option<PathBuf>,
    /// Substitute bindings the prior policy approves
    #[arg(long, conflicts_with = "canary", requires = "bindings")]
    adjudicate: bool,
    /// Shadow canary-mode bindings next to the physical run
    #[arg(long, requires = "bindings")]
    canary: bool,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    #[arg(long)]
    run_id: Option<String>,
    #[command(flatten)]
    rule: RuleArgs,
}

#[derive(Args)]
struct RuleArgs {
    #[arg(long, default_value_t = 10)]
    min_samples: usize,
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
    #[arg(long, value_enum, default_value_t = Stat::Mean)]
    statistic: Stat,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stat {
    Mean,
    Max,
}

impl RuleArgs {
    fn rule(&self) -> AdjudicationRule {
        AdjudicationRule {
            min_samples: self.min_samples,
            tolerance: self.tolerance,
            statistic: match self.statistic {
                Stat::Mean => Statistic::Mean,
                Stat::Max => Statistic::Max,
            },
        }
    }
}

#[derive(Subcommand)]
enum PatchCommand {
    /// Write a block of a workflow as a patch directory
    Extract {
        workflow: PathBuf,
        /// Block id as printed by `awf factor`
        #[arg(long, conflicts_with = "nodes", required_unless_present = "nodes")]
        block: Option<String>,
        #[arg(long, value_delimiter = ',')]
        nodes: Vec<String>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Splice a patch into a workflow
    Apply {
        workflow: PathBuf,
        patch: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        force: bool,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum KbCommand {
    /// Create an empty knowledge base
    Init { dir: PathBuf },
    /// Register a workflow's units, or one sub-graph with --nodes
    Register {
        workflow: PathBuf,
        #[arg(long, value_delimiter = ',')]
        nodes: Vec<String>,
    },
    /// List edges, or recompute similarity edges first
    Edges {
        #[arg(long)]
        recompute: bool,
    },
    /// Look up an execution record or equivalent entries
    Query {
        #[arg(long, conflicts_with = "equivalent_to", required_unless_present = "equivalent_to")]
        hash: Option<String>,
        #[arg(long)]
        equivalent_to: Option<String>,
        #[arg(long, value_parser = parse_metric, default_value = "function")]
        metric: Metric,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        #[arg(long, value_parser = parse_mode, default_value = "name")]
        wl_mode: LabelMode,
    },
    /// Count entries, edges and execution records
    Stats,
    /// Check every stored blob against its digest
    Verify,
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<LabelMode, String> {
    s.parse()
}

fn parse_pick_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|_| format!("unknown mode `{s}` (pick|mix)"))
}

/// What a command prints, and whether it counts as success.
struct Report {
    json: Value,
    human: String,
    ok: bool,
}

impl Report {
    fn ok(json: Value, human: impl Into<String>) -> Self {
        Report {
            json,
            human: human.into(),
            ok: true,
        }
    }

    fn fail(json: Value, human: impl Into<String>) -> Self {
        Report {
            json,
            human: human.into(),
            ok: false,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let format = cli.format;
    match dispatch(cli) {
        Ok(r) => {
            match format {
                Format::Json => emit(&serde_json::to_string_pretty(&r.json).expect("json value")),
                Format::Human if r.human.is_empty() => {}
                Format::Human => emit(r.human.trim_end()),
            }
            if r.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            if format == Format::Json {
                emit(&json!({"error": format!("{e:#}")}).to_string());
            }
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<UsageError>() { 2 } else { 1 })
        }
    }
}

fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn dispatch(cli: Cli) -> Result<Report> {
    let kb_dir = cli.kb;
    match cli.command {
        Command::Validate { workflow } => cmd_validate(&workflow),
        Command::Run(args) => cmd_run(args, kb_dir.as_deref()),
        Command::Hash { workflow, node } => cmd_hash(&workflow, node.as_deref()),
        Command::Similarity { a, b, metric, wl_mode } => cmd_similarity(&a, &b, metric, wl_mode),
        Command::Factor { workflow, output } => cmd_factor(&workflow, output.as_deref()),
        Command::Patch(PatchCommand::Extract {
            workflow,
            block,
            nodes,
            output,
        }) => cmd_extract(&workflow, block.as_deref(), nodes, &output),
        Command::Patch(PatchCommand::Apply {
            workflow,
            patch,
            threshold,
            force,
            output,
        }) => cmd_apply(&workflow, &patch, threshold, force, &output),
        Command::Compose {
            library,
            threshold,
            output,
        } => cmd_compose(&library, threshold, &output),
        Command::Propose {
            workflow,
            objectives,
            mode,
            bindings,
            threshold,
            rule,
            output,
        } => {
            let kb = Kb::open(&need_kb(kb_dir.as_deref())?)?;
            cmd_propose(&workflow, &objectives, mode, bindings.as_deref(), threshold, rule.rule(), &kb, &output)
        }
        Command::ApplyPlan {
            workflow,
            plan,
            force,
            output,
        } => cmd_apply_plan(&workflow, &plan, force, &output),
        Command::Kb(KbCommand::Init { dir }) => {
            Kb::init(&dir, KbConfig::default())?;
            Ok(Report::ok(json!({"initialized": dir}), format!("initialized {}", dir.display())))
        }
        Command::Kb(cmd) => cmd_kb(cmd, &need_kb(kb_dir.as_deref())?),
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn need_kb(dir: Option<&Path>) -> Result<PathBuf> {
    dir.map(Path::to_path_buf)
        .ok_or_else(|| UsageError("no knowledge base given (use --kb or set AWF_KB)".into()).into())
}

fn load(path: &Path) -> Result<WorkflowDescription> {
    load_workflow(path).with_context(|| format!("loading {}", path.display()))
}

fn write_json(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_validate(path: &Path) -> Result<Report> {
    let checked = load_workflow(path).and_then(|wf| validate(&wf).map(|_| wf));
    Ok(match checked {
        Ok(wf) => Report::ok(
            json!({"valid": true, "workflow": wf.name, "nodes": wf.nodes.len()}),
            format!("{}: ok ({} nodes)", wf.name, wf.nodes.len()),
        ),
        Err(e) => Report::fail(
            json!({"valid": false, "error": e.to_string()}),
            format!("{}: {e}", path.display()),
        ),
    })
}

fn cmd_run(args: RunArgs, kb_dir: Option<&Path>) -> Result<Report> {
    let wf = load(&args.workflow)?;
    let platform = args.platform.as_deref().map(ParameterLayer::load).transpose()?;
    let mut options = RunOptions {
        memoize: !args.no_memo,
        restart_limit: args.restart_limit,
        platform,
        runs_dir: args.runs_dir,
        run_id: args.run_id,
        ..RunOptions::default()
    };
    if let Some(n) = args.max_parallel {
        options.max_parallel = n.max(1);
    }
    let mut kb = match kb_dir {
        Some(dir) => match Kb::open_writer(dir) {
            Ok(kb) => Some(kb),
            Err(e) => {
                log::warn!("knowledge base unavailable: {e}");
                None
            }
        },
        None => None,
    };
    let bindings = args.bindings.as_deref().map(load_bindings).transpose()?.unwrap_or_default();
    let report = if args.adjudicate {
        adjudicated_run(&wf, &bindings, &args.rule.rule(), kb.as_mut(), &options, true)?
    } else if !bindings.is_empty() {
        canary_run(&wf, &bindings, kb.as_mut(), &options)?
    } else {
        execute(&wf, kb.as_mut(), &options)?
    };
    let human = run_summary(&report);
    let json = serde_json::to_value(&report)?;
    Ok(if report.succeeded {
        Report::ok(json, human)
    } else {
        Report::fail(json, human)
    })
}

fn run_summary(r: &RunReport) -> String {
    let mut s = format!(
        "run {} of {}: {} in {:.2}s, {} memo hits, {} task attempts\n",
        r.run_id,
        r.workflow,
        if r.succeeded { "succeeded" } else { "failed" },
        r.wall_seconds,
        r.memo_hits,
        r.task_attempts
    );
    for n in &r.nodes {
        s += &format!("  {:<24} {:?}\n", n.node, n.state);
    }
    for c in &r.canary {
        match c.error {
            Some(e) => s += &format!("  canary {}: error {e}\n", c.binding),
            None => s += &format!("  canary {}: {}\n", c.binding, c.note.as_deref().unwrap_or("no sample")),
        }
    }
    for w in &r.warnings {
        s += &format!("  warning: {w}\n");
    }
    s += &format!("report: {}", r.run_dir.join(awf_core::runtime::REPORT_FILE).display());
    s
}

fn cmd_hash(path: &Path, node: Option<&str>) -> Result<Report> {
    let wf = load(path)?;
    validate(&wf)?;
    let lits = literal_digests(&wf, Parallelism::default())?;
    let hashes = interface_hashes(&wf, &lits, Parallelism::default())?;
    let picked: BTreeMap<&str, &str> = match node {
        Some(n) => {
            let h = hashes.get(n).ok_or_else(|| anyhow!("unknown node `{n}`"))?;
            BTreeMap::from([(n, h.digest.as_str())])
        }
        None => wf
            .nodes
            .iter()
            .map(|n| (n.name.as_str(), hashes[&n.name].digest.as_str()))
            .collect(),
    };
    let human = match node {
        Some(n) => picked[n].to_string(),
        None => wf
            .nodes
            .iter()
            .map(|n| format!("{}  {}", picked[n.name.as_str()], n.name))
            .collect::<Vec<_>>()
            .join("\n"),
    };
    Ok(Report::ok(json!(picked), human))
}

fn cmd_similarity(a: &Path, b: &Path, metric: Metric, mode: LabelMode) -> Result<Report> {
    let (wa, wb) = (load(a)?, load(b)?);
    let (sa, sb) = (SubGraph::whole(&wa), SubGraph::whole(&wb));
    let value = match metric {
        Metric::Domain => jaccard(&sa.domain(), &sb.domain()),
        Metric::Codomain => jaccard(&sa.codomain(), &sb.codomain()),
        Metric::Function => function_similarity(&sa, &sb, &WlConfig::new(mode))?.value,
    };
    Ok(Report::ok(
        json!({"metric": metric, "wl-mode": mode, "score": value}),
        format!("{value:.4}"),
    ))
}

fn block_json(b: &Block) -> Value {
    json!({"id": b.id, "members": b.members, "inputs": b.inputs.0, "outputs": b.outputs.0})
}

fn cmd_factor(path: &Path, out: Option<&Path>) -> Result<Report> {
    let wf = load(path)?;
    validate(&wf)?;
    let (blocks, quotient) = factor(&wf);
    let (unit_blocks, unit_quotient) = units(&wf);
    let mut human = format!("{}: {} blocks, {} units\n", wf.name, blocks.len(), unit_blocks.len());
    for b in &unit_blocks {
        human += &format!("  unit {}  {}\n", b.id, b.members.iter().cloned().collect::<Vec<_>>().join(" "));
    }
    for (x, y) in &unit_quotient.edges {
        human += &format!("  {x} -> {y}\n");
    }
    if let Some(dir) = out {
        let mut schemas = Vec::new();
        for b in &unit_blocks {
            let (block_wf, schema) = extract_block_workflow(&wf, b);
            write_json(&dir.join(format!("{}.json", b.id)), &block_wf.to_json())?;
            schemas.push(schema);
        }
        write_json(&dir.join("boundary.json"), &serde_json::to_string_pretty(&schemas)?)?;
        human += &format!("wrote {} blocks to {}", unit_blocks.len(), dir.display());
    }
    Ok(Report::ok(
        json!({
            "workflow": wf.name,
            "blocks": blocks.iter().map(block_json).collect::<Vec<_>>(),
            "quotient": quotient,
            "units": unit_blocks.iter().map(block_json).collect::<Vec<_>>(),
            "unit-quotient": unit_quotient,
        }),
        human,
    ))
}

fn cmd_extract(path: &Path, block: Option<&str>, nodes: Vec<String>, out: &Path) -> Result<Report> {
    let wf = load(path)?;
    validate(&wf)?;
    let chosen = match block {
        Some(id) => {
            let (mut all, _) = units(&wf);
            all.extend(factor(&wf).0);
            all.into_iter()
                .find(|b| b.id == id)
                .ok_or_else(|| anyhow!("no block `{id}` in {}", wf.name))?
        }
        None => {
            let members: BTreeSet<String> = nodes.into_iter().collect();
            if let Some(m) = members.iter().find(|m| wf.node(m).is_none()) {
                bail!("unknown node `{m}`");
            }
            awf_core::factoring::block_of(&wf, members)
        }
    };
    let patch = extract_patch(&wf, &chosen)?.save(out)?;
    Ok(Report::ok(
        json!({"patch": out, "block": chosen.id, "inputs": patch.input_schema.len(), "outputs": patch.output_schema.len()}),
        format!(
            "wrote patch for block {} ({} inputs, {} outputs) to {}",
            chosen.id,
            patch.input_schema.len(),
            patch.output_schema.len(),
            out.display()
        ),
    ))
}

fn cmd_apply(path: &Path, patch_dir: &Path, threshold: f64, force: bool, out: &Path) -> Result<Report> {
    let wf = load(path)?;
    validate(&wf)?;
    let patch = Patch::load(patch_dir)?;
    let splice = identify_splice_points(&wf, &patch, threshold, force);
    for w in &splice.warnings {
        log::warn!("{w}");
    }
    let (result, conflicts) = apply_patch(&wf, &patch, &splice, force)?;
    if !conflicts.is_empty() && !force {
        let human = conflicts.iter().map(|c| format!("conflict: {c}")).collect::<Vec<_>>().join("\n");
        return Ok(Report::fail(json!({"applied": false, "conflicts": conflicts}), human));
    }
    write_json(out, &result.to_json())?;
    Ok(Report::ok(
        json!({
            "applied": true,
            "output": out,
            "removed": splice.removal,
            "input-splices": splice.inputs.len(),
            "output-splices": splice.outputs.len(),
            "conflicts": conflicts,
            "warnings": splice.warnings,
        }),
        format!(
            "removed {} nodes, {} input and {} output splice points; wrote {}",
            splice.removal.len(),
            splice.inputs.len(),
            splice.outputs.len(),
            out.display()
        ),
    ))
}

/// Every file in `dir` that parses as a workflow, in name order.
fn load_library(dir: &Path) -> Result<Vec<WorkflowDescription>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        match load_workflow(&p).and_then(|w| validate(&w).map(|_| w)) {
            Ok(w) => out.push(w),
            Err(e) => log::info!("skipping {}: {e}", p.display()),
        }
    }
    Ok(out)
}

fn cmd_compose(dir: &Path, threshold: f64, out: &Path) -> Result<Report> {
    let workflows = load_library(dir)?;
    let mut kb = Kb::in_memory();
    for w in &workflows {
        kb.register_workflow(w, None)?;
    }
    kb.compute_edges(None, Parallelism::default())?;
    let library: Vec<LibraryEntry> = workflows.into_iter().map(LibraryEntry::new).collect();
    let candidates = enumerate_compositions(&library, &kb, threshold)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut listed = Vec::new();
    let mut human = String::new();
    for c in &candidates {
        let file = out.join(format!("{}.json", c.name));
        write_json(&file, &c.workflow.to_json())?;
        human += &format!("{}  {}  {}\n", c.name, json!(c.kind).as_str().unwrap_or_default(), c.units.join(" + "));
        listed.push(json!({"name": c.name, "kind": c.kind, "units": c.units, "wl-digest": c.wl_digest, "file": file}));
    }
    human += &format!("{} candidates from {} workflows", candidates.len(), library.len());
    Ok(Report::ok(json!({"library": library.len(), "candidates": listed}), human))
}

#[allow(clippy::too_many_arguments)]
fn cmd_propose(
    path: &Path,
    objectives: &Path,
    mode: Mode,
    bindings: Option<&Path>,
    threshold: f64,
    rule: AdjudicationRule,
    kb: &Kb,
    out: &Path,
) -> Result<Report> {
    let wf = load(path)?;
    validate(&wf)?;
    let cost = CostFunction::load(objectives)?;
    let bindings = bindings.map(load_bindings).transpose()?.unwrap_or_default();
    let evaluator = Evaluator::new(&wf, kb, &cost)?;
    let ctx = AgentContext {
        wf: &wf,
        kb,
        evaluator: &evaluator,
        bindings: &bindings,
        rule,
        threshold,
    };
    let proposals = run_agents(&ctx, &[&PerformanceAgent, &AccuracyAgent]);
    let (mut plan, plan_cost) = superintend(&proposals, &evaluator, mode)?;
    if plan.expected_deltas.is_empty() {
        plan.expected_deltas = evaluator.deltas(&plan);
    }
    let priced: Vec<Value> = proposals
        .iter()
        .map(|p| json!({"id": p.id, "agent": p.agent, "cost": evaluator.cost(p).ok()}))
        .collect();
    write_json(out, &serde_json::to_string_pretty(&plan)?)?;
    let mut human = String::new();
    for p in &priced {
        human += &format!("  proposal {} ({}): cost {}\n", p["id"], p["agent"], p["cost"]);
    }
    human += &format!("chose {} at cost {plan_cost:.4}; wrote {}", plan.id, out.display());
    Ok(Report::ok(
        json!({"plan": plan.id, "cost": plan_cost, "proposals": priced, "output": out}),
        human,
    ))
}

fn cmd_apply_plan(path: &Path, plan_path: &Path, force: bool, out: &Path) -> Result<Report> {
    let wf = load(path)?;
    validate(&wf)?;
    let plan = SubstitutionPlan::load(plan_path)?;
    match apply_plan(&wf, &plan, force) {
        Ok(result) => {
            write_json(out, &result.to_json())?;
            Ok(Report::ok(
                json!({"applied": true, "plan": plan.id, "substitutions": plan.substitutions.len(), "output": out}),
                format!("applied {} ({} substitutions); wrote {}", plan.id, plan.substitutions.len(), out.display()),
            ))
        }
        Err(awf_core::policy::PolicyError::Conflicts { target, conflicts }) => {
            let human = conflicts
                .iter()
                .map(|c| format!("conflict at {target}: {c}"))
                .collect::<Vec<_>>()
                .join("\n");
            Ok(Report::fail(json!({"applied": false, "target": target, "conflicts": conflicts}), human))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_kb(cmd: KbCommand, dir: &Path) -> Result<Report> {
    match cmd {
        KbCommand::Init { .. } => unreachable!("handled by dispatch"),
        KbCommand::Register { workflow, nodes } => {
            let wf = load(&workflow)?;
            validate(&wf)?;
            let mut kb = Kb::open_writer(dir)?;
            let lits = literal_digests(&wf, Parallelism::default()).ok();
            if nodes.is_empty() {
                let reg = kb.register_workflow(&wf, lits.as_ref())?;
                let human = reg
                    .units
                    .iter()
                    .map(|(b, id)| format!("{id}  unit {}", b.members.iter().cloned().collect::<Vec<_>>().join(" ")))
                    .chain(reg.workflow_entry.iter().map(|id| format!("{id}  workflow {}", wf.name)))
                    .collect::<Vec<_>>()
                    .join("\n");
                let units: Vec<Value> = reg
                    .units
                    .iter()
                    .map(|(b, id)| json!({"id": id, "block": b.id, "members": b.members}))
                    .collect();
                Ok(Report::ok(
                    json!({"workflow": wf.name, "units": units, "workflow-entry": reg.workflow_entry}),
                    human,
                ))
            } else {
                let sub = SubGraph::new(&wf, nodes)?;
                let hashes = lits
                    .as_ref()
                    .and_then(|l| interface_hashes(&wf, l, Parallelism::Sequential).ok());
                let source = SourceRef {
                    workflow: wf.name.clone(),
                    workflow_digest: workflow_digest(&wf),
                    nodes: sub.members.clone(),
                    instance_hashes: hashes
                        .map(|h| {
                            sub.members
                                .iter()
                                .filter_map(|m| h.get(m).map(|x| (m.clone(), x.digest.clone())))
                                .collect()
                        })
                        .unwrap_or_default(),
                    base_dir: None,
                };
                let rep = kb.representation(&sub)?;
                let id = kb.register_subgraph(KbNodeEntry::new(rep, Scope::Unit, source))?;
                Ok(Report::ok(json!({"workflow": wf.name, "id": id, "members": sub.members}), id))
            }
        }
        KbCommand::Edges { recompute } => {
            let mut written = None;
            let kb = if recompute {
                let mut kb = Kb::open_writer(dir)?;
                written = Some(kb.compute_edges(None, Parallelism::default())?);
                kb
            } else {
                Kb::open(dir)?
            };
            let edges: Vec<_> = kb.edges().cloned().collect();
            let mut human: String = edges
                .iter()
                .map(|e| serde_json::to_string(e).expect("edge serializes") + "\n")
                .collect();
            if let Some(n) = written {
                human += &format!("{n} edges written");
            }
            Ok(Report::ok(json!({"written": written, "edges": edges}), human))
        }
        KbCommand::Query {
            hash,
            equivalent_to,
            metric,
            threshold,
            wl_mode,
        } => {
            let kb = Kb::open(dir)?;
            if let Some(h) = hash {
                return Ok(match kb.lookup_execution(&h) {
                    Some(r) => Report::ok(json!({"record": r}), serde_json::to_string_pretty(r)?),
                    None => Report::fail(json!({"record": null}), format!("no execution record for {h}")),
                });
            }
            let id = equivalent_to.expect("clap requires one of the two");
            let found = kb.find_equivalents(&id, metric, threshold, wl_mode, false)?;
            let human = found.iter().map(|(x, s)| format!("{s:.4}  {x}")).collect::<Vec<_>>().join("\n");
            let list: Vec<Value> = found.iter().map(|(x, s)| json!({"id": x, "score": s})).collect();
            Ok(Report::ok(json!({"entry": id, "metric": metric, "equivalents": list}), human))
        }
        KbCommand::Stats => {
            let stats = Kb::open(dir)?.stats();
            let json = serde_json::to_value(&stats)?;
            let human = json
                .as_object()
                .expect("stats is an object")
                .iter()
                .map(|(k, v)| format!("{k:<22} {v}"))
                .collect::<Vec<_>>()
                .join("\n");
            Ok(Report::ok(json, human))
        }
        KbCommand::Verify => {
            let report = Kb::open(dir)?.verify();
            let json = serde_json::to_value(&report)?;
            let human = format!(
                "{} blobs checked, {} corrupt, {} missing",
                report.blobs_checked,
                report.corrupt_blobs.len(),
                report.missing_blobs.len()
            );
            Ok(if report.ok() {
                Report::ok(json, human)
            } else {
                Report::fail(json, human)
            })
        }
    }
}

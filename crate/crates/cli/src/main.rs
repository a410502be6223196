use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use taxlog::audit::{
    administer, build_bcq, build_bdq, position_bias, quiz_text, read_jsonl, report_from_responses,
    responder, simulate, write_jsonl, AuditRun, FileVariants, LlmResponder, LlmVariants,
    PerturbationSource, QuizItem, Responder, ResponderKind, Response, SynonymPerturber,
};
use taxlog::bundled;
use taxlog::corpus::{
    compose_facts, load_cases, write_cases, Blocklist, CaseInstance, StatuteKB, ALL_SPLITS,
};
use taxlog::eval::{run_cases, run_split, Mode, RunContext, RunOutput};
use taxlog::llm::{
    Bridge, ChatProvider, HttpProvider, MockProvider, ProviderConfig, ReferenceCode, Templates,
};
use taxlog::parser::parse_program_with_id;
use taxlog::util::sha256_hex;
use taxlog::variants::{generate, perturb_rule_numbers, split_recipe, PerturbationSpec};
use taxlog::{parse_query, render_program, solve, SolveConfig, SolveOutcome};

#[derive(Parser, Debug)]
#[command(
    name = "taxlog",
    version,
    about = "Run tax-law logic programs, score LLM pipelines, audit contamination, generate perturbed splits"
)]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve one query against statutes plus case facts.
    Solve(SolveArgs),
    /// Evaluate a case file in one of the three modes and write a report.
    Eval(EvalArgs),
    /// Build, take and score contamination quizzes.
    #[command(subcommand)]
    Quiz(QuizCommand),
    /// Generate perturbed test splits.
    Gen(GenArgs),
}

#[derive(Subcommand, Debug)]
enum QuizCommand {
    /// Build bias-detector quizzes from cases, or contamination quizzes from BDQ responses.
    Build(QuizBuildArgs),
    /// Answer a quiz file with a simulated responder or the configured provider.
    Run(QuizRunArgs),
    /// Contamination report from BDQ and BCQ response files.
    Report(QuizReportArgs),
    /// Run the whole audit on a synthetic bank with a simulated responder.
    Simulate(QuizSimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum RulesetArg {
    /// Each case under the rule set its split names.
    Auto,
    R,
    #[value(name = "r_prime")]
    RPrime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ModeArg {
    #[value(name = "gold_facts")]
    GoldFacts,
    #[value(name = "llm_translated")]
    LlmTranslated,
    #[value(name = "direct_qa")]
    DirectQa,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::GoldFacts => Mode::GoldFacts,
            ModeArg::LlmTranslated => Mode::LlmTranslated,
            ModeArg::DirectQa => Mode::DirectQa,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ProviderKind {
    /// Canned replies from a rules file (offline).
    Mock,
    /// OpenAI-compatible chat-completions endpoint.
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Stage {
    Bdq,
    Bcq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum PerturberArg {
    /// Offline synonym swaps.
    Synonym,
    /// The provider, through the perturbation prompt.
    Llm,
    /// Pre-generated variants from --variants.
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ResponderArg {
    Memorizer,
    Uniform,
    #[value(name = "anti_original")]
    AntiOriginal,
    /// The configured provider.
    Llm,
}

#[derive(Args, Debug, Serialize)]
struct KbArgs {
    /// Statute program (.pl). Defaults to the bundled mini statutes.
    #[arg(long)]
    statutes: Option<PathBuf>,
    /// Natural-language statute text for direct QA.
    #[arg(long)]
    statute_text: Option<PathBuf>,
    /// Computed-predicate blocklist, one name/arity per line.
    #[arg(long)]
    blocklist: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct LimitArgs {
    #[arg(long, default_value_t = 4096)]
    max_depth: usize,
    /// Concurrent workers (and provider request cap).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug, Serialize)]
struct ProviderArgs {
    #[arg(long, value_enum, default_value_t = ProviderKind::Mock)]
    provider: ProviderKind,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "TAXLOG_API_KEY")]
    api_key_env: String,
    /// Mock reply rules (JSON). Defaults to the bundled replies.
    #[arg(long)]
    mock_responses: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    max_retries: u32,
    #[arg(long, default_value_t = 60_000)]
    timeout_ms: u64,
}

#[derive(Args, Debug, Serialize)]
struct SolveArgs {
    #[command(flatten)]
    kb: KbArgs,
    /// Case facts (.pl).
    #[arg(long)]
    facts: Option<PathBuf>,
    #[arg(long)]
    query: String,
    #[arg(long, value_enum, default_value_t = RulesetArg::R)]
    ruleset: RulesetArg,
    /// Seed for deriving the perturbed rule set.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4096)]
    max_depth: usize,
    #[arg(long)]
    max_solutions: Option<usize>,
    #[arg(long)]
    no_occurs_check: bool,
    /// Directory for a run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    kb: KbArgs,
    /// Case records (.jsonl). Defaults to the bundled suite.
    #[arg(long)]
    cases: Option<PathBuf>,
    /// Only these splits (repeatable).
    #[arg(long)]
    split: Vec<String>,
    #[arg(long, value_enum, default_value_t = ModeArg::GoldFacts)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = RulesetArg::Auto)]
    ruleset: RulesetArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    limits: LimitArgs,
    #[command(flatten)]
    provider: ProviderArgs,
    /// Event reference code for translation prompts.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Utility reference code for translation prompts.
    #[arg(long)]
    utils: Option<PathBuf>,
    #[arg(long, default_value = "out/eval")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    #[command(flatten)]
    kb: KbArgs,
    #[arg(long)]
    cases: Option<PathBuf>,
    /// Paraphrase file for Ee_c ({"id","text"} per line).
    #[arg(long)]
    paraphrases: Option<PathBuf>,
    /// Splits to emit (repeatable); all ten by default.
    #[arg(long)]
    split: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Perturbed copies per base case in numeric-changed splits.
    #[arg(long, default_value_t = 1)]
    replicas: usize,
    #[command(flatten)]
    limits: LimitArgs,
    #[arg(long, default_value = "out/gen")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct QuizBuildArgs {
    #[arg(long, value_enum, default_value_t = Stage::Bdq)]
    stage: Stage,
    /// Source cases for the BDQ stage.
    #[arg(long)]
    cases: Option<PathBuf>,
    #[arg(long)]
    split: Vec<String>,
    #[arg(long, value_enum, default_value_t = PerturberArg::Synonym)]
    perturber: PerturberArg,
    /// Variants file for --perturber file.
    #[arg(long)]
    variants: Option<PathBuf>,
    /// BDQ items (BCQ stage).
    #[arg(long)]
    bdq: Option<PathBuf>,
    /// BDQ responses (BCQ stage).
    #[arg(long)]
    responses: Option<PathBuf>,
    /// Original option texts (BCQ stage).
    #[arg(long)]
    originals: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    provider: ProviderArgs,
    #[arg(long, default_value = "out/quiz")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct QuizRunArgs {
    #[arg(long)]
    quiz: PathBuf,
    #[arg(long, value_enum, default_value_t = ResponderArg::Llm)]
    responder: ResponderArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "test")]
    split_name: String,
    #[arg(long, default_value = "SARA")]
    dataset_name: String,
    #[command(flatten)]
    provider: ProviderArgs,
    /// Responses file (.jsonl).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct QuizReportArgs {
    #[arg(long)]
    bdq: PathBuf,
    #[arg(long)]
    bcq: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Report file (.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct QuizSimulateArgs {
    #[arg(long, value_enum)]
    responder: ResponderArg,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Files written by the current run, removed again if it fails.
#[derive(Default)]
struct Outputs {
    written: Vec<PathBuf>,
}

impl Outputs {
    fn write(&mut self, path: &Path, contents: &str) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path.to_path_buf());
        Ok(())
    }

    fn write_json(&mut self, path: &Path, v: &Value) -> Result<()> {
        self.write(path, &(serde_json::to_string_pretty(v)? + "\n"))
    }

    fn manifest(
        &mut self,
        path: &Path,
        command: &str,
        config: &impl Serialize,
        extra: Value,
    ) -> Result<()> {
        let mut m = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
        });
        if let (Value::Object(m), Value::Object(extra)) = (&mut m, extra) {
            m.extend(extra);
        }
        self.write_json(path, &m)
    }

    fn remove_all(&self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_kb(args: &KbArgs) -> Result<StatuteKB> {
    let Some(path) = &args.statutes else {
        let mut kb = bundled::statutes();
        if let Some(b) = &args.blocklist {
            kb.blocklist = Blocklist::load(b)?;
        }
        if let Some(t) = &args.statute_text {
            kb.text = Some(read(t)?);
        }
        return Ok(kb);
    };
    let mut kb = StatuteKB::from_source(&read(path)?, &path.display().to_string())
        .with_context(|| format!("loading {}", path.display()))?;
    if let Some(b) = &args.blocklist {
        kb.blocklist = Blocklist::load(b)?;
    }
    if let Some(t) = &args.statute_text {
        kb.text = Some(read(t)?);
    }
    Ok(kb)
}

fn load_case_file(path: &Option<PathBuf>, splits: &[String]) -> Result<Vec<CaseInstance>> {
    let mut cases = match path {
        Some(p) => load_cases(p)?,
        None => bundled::cases(),
    };
    for s in splits {
        if !ALL_SPLITS.contains(&s.as_str()) {
            bail!(
                "unknown split {s:?} (expected one of {})",
                ALL_SPLITS.join(", ")
            );
        }
    }
    if !splits.is_empty() {
        cases.retain(|c| splits.contains(&c.split.name()));
    }
    if cases.is_empty() {
        bail!("no cases selected");
    }
    Ok(cases)
}

fn provider_config(p: &ProviderArgs, jobs: usize) -> ProviderConfig {
    let d = ProviderConfig::default();
    ProviderConfig {
        provider: match p.provider {
            ProviderKind::Mock => "mock".into(),
            ProviderKind::Http => "http".into(),
        },
        endpoint: p.endpoint.clone().unwrap_or(d.endpoint),
        model: p.model.clone().unwrap_or(d.model),
        api_key_env: p.api_key_env.clone(),
        max_retries: p.max_retries,
        request_timeout_ms: p.timeout_ms,
        concurrent_cap: jobs.max(1),
        retry_base_ms: if p.provider == ProviderKind::Mock {
            0
        } else {
            d.retry_base_ms
        },
        ..d
    }
}

fn make_bridge(p: &ProviderArgs, jobs: usize) -> Result<Bridge> {
    let cfg = provider_config(p, jobs);
    let templates = match &p.templates {
        Some(dir) => Templates::load_dir(dir)?,
        None => Templates::builtin(),
    };
    let provider: Arc<dyn ChatProvider> = match p.provider {
        ProviderKind::Mock => Arc::new(match &p.mock_responses {
            Some(path) => MockProvider::load(path).map_err(|e| anyhow!(e))?,
            None => bundled::mock_provider(),
        }),
        ProviderKind::Http => Arc::new(HttpProvider::from_env(&cfg)?),
    };
    Ok(Bridge::new(provider, cfg, templates))
}

fn r_prime(r: &StatuteKB, seed: u64) -> Result<StatuteKB> {
    Ok(perturb_rule_numbers(r, &PerturbationSpec::default().with_seed(seed))?.kb)
}

fn fmt_metric(m: Option<f64>) -> String {
    m.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

// ---------------------------------------------------------------------------

fn cmd_solve(args: &SolveArgs, out: &mut Outputs) -> Result<u8> {
    let mut kb = load_kb(&args.kb)?;
    if args.ruleset == RulesetArg::RPrime {
        kb = r_prime(&kb, args.seed)?;
    }
    let facts = match &args.facts {
        Some(p) => parse_program_with_id(&read(p)?, &p.display().to_string())
            .map_err(|e| anyhow!("{}: {e}", p.display()))?,
        None => taxlog::Program::new("none"),
    };
    let query = parse_query(&args.query).map_err(|e| anyhow!("query: {e}"))?;
    let composed = compose_facts(&kb, "cli", &facts, false)?;
    let cfg = SolveConfig {
        max_depth: args.max_depth.max(1),
        max_solutions: args.max_solutions,
        occurs_check: !args.no_occurs_check,
    };
    let vars = query.variables();
    let (lines, code, outcome) = match solve(&composed, &query, &cfg) {
        Err(e) => (vec![format!("Abstain (parse_failure): {e}")], 2, "abstain"),
        Ok(SolveOutcome::ResourceExhausted { .. }) => (
            vec!["Abstain (resource_exhausted)".to_string()],
            2,
            "abstain",
        ),
        Ok(SolveOutcome::NoSolution) if vars.is_empty() => {
            (vec!["Contradiction".to_string()], 0, "contradiction")
        }
        Ok(SolveOutcome::NoSolution) => (
            vec!["Abstain (parse_failure): no derivation".to_string()],
            2,
            "abstain",
        ),
        Ok(SolveOutcome::Solutions(_)) if vars.is_empty() => {
            (vec!["Entailment".to_string()], 0, "entailment")
        }
        Ok(SolveOutcome::Solutions(sols)) => {
            let lines = sols
                .iter()
                .map(|b| {
                    vars.iter()
                        .map(|v| {
                            format!(
                                "{v} = {}",
                                b.get(v).map_or("_".to_string(), |t| t.to_string())
                            )
                        })
                        .collect::<Vec<_>>()
                        .join(", ")
                })
                .collect();
            (lines, 0, "value")
        }
    };
    for l in &lines {
        println!("{l}");
    }
    if let Some(dir) = &args.out {
        out.manifest(
            &dir.join("manifest.json"),
            "solve",
            args,
            json!({"ruleset": kb.ruleset_id, "outcome": outcome, "output": lines, "exit_code": code}),
        )?;
    }
    Ok(code)
}

fn cmd_eval(args: &EvalArgs, out: &mut Outputs) -> Result<u8> {
    let kb = load_kb(&args.kb)?;
    let cases = load_case_file(&args.cases, &args.split)?;
    let mode: Mode = args.mode.into();
    let bridge = match mode {
        Mode::GoldFacts => None,
        _ => Some(make_bridge(&args.provider, args.limits.jobs)?),
    };
    let reference = ReferenceCode {
        events_pl: match &args.events {
            Some(p) => read(p)?,
            None => bundled::EVENTS_PL.to_string(),
        },
        utils_pl: match &args.utils {
            Some(p) => read(p)?,
            None => bundled::UTILS_PL.to_string(),
        },
    };
    let ctx = RunContext {
        solve: SolveConfig::default().with_max_depth(args.limits.max_depth),
        bridge: bridge.as_ref(),
        reference,
        jobs: args.limits.jobs,
        timing: args.provider.provider != ProviderKind::Mock,
    };
    let result: RunOutput = match args.ruleset {
        RulesetArg::R => run_split(&kb, &cases, mode, &ctx)?,
        RulesetArg::RPrime => run_split(&r_prime(&kb, args.seed)?, &cases, mode, &ctx)?,
        RulesetArg::Auto => {
            let needs = cases
                .iter()
                .any(|c| c.split.rule == taxlog::corpus::RuleVariant::RPrime);
            let rp = if needs {
                Some(r_prime(&kb, args.seed)?)
            } else {
                None
            };
            run_cases(&kb, rp.as_ref(), &cases, mode, &ctx)?
        }
    };
    let r = &result.report;
    let mut report = result.to_json();
    report["ruleset"] = json!(args.ruleset);
    out.write_json(&args.out.join("report.json"), &report)?;
    let mut extra = json!({
        "n_cases": cases.len(),
        "cases_hash": sha256_hex(write_cases(&cases).as_bytes()),
        "metrics": r,
    });
    if let Some(b) = &bridge {
        extra["provider"] = json!(b.cfg);
        let log: Vec<Value> = b
            .audit_log()
            .iter()
            .map(|e| json!({"seq": e.seq, "attempt": e.attempt, "ok": e.ok, "error": e.error}))
            .collect();
        extra["provider_calls"] = json!(log.len());
    }
    out.manifest(&args.out.join("manifest.json"), "eval", args, extra)?;
    println!(
        "EM {}  Err {:.3}  Acc {}  M10 {}  n {}  abstained {}",
        fmt_metric(r.em),
        r.err,
        fmt_metric(r.acc),
        fmt_metric(r.m10),
        r.counts.total,
        r.counts.abstained
    );
    Ok(0)
}

fn cmd_gen(args: &GenArgs, out: &mut Outputs) -> Result<u8> {
    let kb = load_kb(&args.kb)?;
    let cases = load_case_file(&args.cases, &[])?;
    let names: Vec<String> = if args.split.is_empty() {
        ALL_SPLITS.iter().map(|s| s.to_string()).collect()
    } else {
        args.split.clone()
    };
    for n in &names {
        split_recipe(n)?;
    }
    let paraphrases = match &args.paraphrases {
        Some(p) => Some(
            bundled::parse_paraphrases(&read(p)?).map_err(|e| anyhow!("{}: {e}", p.display()))?,
        ),
        None if args.cases.is_none() => Some(bundled::paraphrases()),
        None => None,
    };
    let spec = PerturbationSpec {
        replicas: args.replicas,
        ..PerturbationSpec::default().with_seed(args.seed)
    };
    let generation = generate(
        &cases,
        &kb,
        &names,
        &spec,
        paraphrases.as_ref(),
        SolveConfig::default().with_max_depth(args.limits.max_depth),
        args.limits.jobs,
    )?;
    for s in &generation.splits {
        out.write(
            &args.out.join(format!("{}.jsonl", s.tag.name())),
            &write_cases(&s.cases),
        )?;
        println!(
            "{}: {} items, {} dropped",
            s.tag.name(),
            s.cases.len(),
            s.manifest.drops.len()
        );
    }
    out.write(
        &args.out.join("r_prime.pl"),
        &render_program(&generation.r_prime.program),
    )?;
    if let Some(t) = &generation.r_prime.text {
        out.write(&args.out.join("r_prime.txt"), t)?;
    }
    out.manifest(
        &args.out.join("manifest.json"),
        "gen",
        args,
        json!({"generation": generation.manifest}),
    )?;
    Ok(0)
}

#[derive(Serialize, serde::Deserialize)]
struct Original {
    id: String,
    text: String,
}

fn cmd_quiz_build(args: &QuizBuildArgs, out: &mut Outputs) -> Result<u8> {
    match args.stage {
        Stage::Bdq => {
            let cases = load_case_file(&args.cases, &args.split)?;
            let sources: Vec<(String, String)> =
                cases.iter().map(|c| (c.id.clone(), quiz_text(c))).collect();
            let bridge;
            let file;
            let synonym;
            let source: &dyn PerturbationSource = match args.perturber {
                PerturberArg::Synonym => {
                    synonym = SynonymPerturber::new(args.seed);
                    &synonym
                }
                PerturberArg::File => {
                    let path = args
                        .variants
                        .as_ref()
                        .ok_or_else(|| anyhow!("--perturber file needs --variants"))?;
                    file = FileVariants::parse(&read(path)?)
                        .map_err(|e| anyhow!("{}: {e}", path.display()))?;
                    &file
                }
                PerturberArg::Llm => {
                    bridge = make_bridge(&args.provider, 1)?;
                    &LlmVariants(&bridge)
                }
            };
            let built = build_bdq(&sources, source, args.seed);
            if built.items.is_empty() {
                bail!(
                    "no BDQ item could be built ({} sources skipped)",
                    built.skipped.len()
                );
            }
            let originals: Vec<Original> = sources
                .into_iter()
                .map(|(id, text)| Original { id, text })
                .collect();
            out.write(&args.out.join("bdq.jsonl"), &write_jsonl(&built.items))?;
            out.write(&args.out.join("originals.jsonl"), &write_jsonl(&originals))?;
            let skipped: Vec<Value> = built
                .skipped
                .iter()
                .map(|(id, why)| json!({"id": id, "reason": why}))
                .collect();
            out.manifest(
                &args.out.join("bdq.manifest.json"),
                "quiz build",
                args,
                json!({"items": built.items.len(), "skipped": skipped}),
            )?;
            println!(
                "BDQ: {} items, {} skipped",
                built.items.len(),
                built.skipped.len()
            );
        }
        Stage::Bcq => {
            let need = |p: &Option<PathBuf>, flag: &str| {
                p.clone()
                    .ok_or_else(|| anyhow!("--stage bcq needs --{flag}"))
            };
            let bdq: Vec<QuizItem> = read_jsonl(need(&args.bdq, "bdq")?).map_err(|e| anyhow!(e))?;
            let responses: Vec<Response> =
                read_jsonl(need(&args.responses, "responses")?).map_err(|e| anyhow!(e))?;
            let originals: Vec<Original> =
                read_jsonl(need(&args.originals, "originals")?).map_err(|e| anyhow!(e))?;
            let originals: HashMap<String, String> =
                originals.into_iter().map(|o| (o.id, o.text)).collect();
            let profile = position_bias(&responses)?;
            let plan = build_bcq(&bdq, &originals, &profile);
            let items: Vec<QuizItem> = plan.splits.values().flatten().cloned().collect();
            out.write(&args.out.join("bcq.jsonl"), &write_jsonl(&items))?;
            out.manifest(
                &args.out.join("bcq.manifest.json"),
                "quiz build",
                args,
                json!({"profile": profile, "fallback": plan.fallback, "items": items.len()}),
            )?;
            let positions: Vec<String> = plan.splits.keys().map(|p| p.to_string()).collect();
            println!(
                "BCQ: {} items at position(s) {}",
                items.len(),
                positions.join(",")
            );
        }
    }
    Ok(0)
}

fn sidecar(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.manifest.json"))
}

fn responder_kind(r: ResponderArg) -> Option<ResponderKind> {
    match r {
        ResponderArg::Memorizer => Some(ResponderKind::Memorizer),
        ResponderArg::Uniform => Some(ResponderKind::Uniform),
        ResponderArg::AntiOriginal => Some(ResponderKind::AntiOriginal),
        ResponderArg::Llm => None,
    }
}

fn cmd_quiz_run(args: &QuizRunArgs, out: &mut Outputs) -> Result<u8> {
    let items: Vec<QuizItem> = read_jsonl(&args.quiz).map_err(|e| anyhow!(e))?;
    let bridge;
    let mut r: Box<dyn Responder + '_> = match responder_kind(args.responder) {
        Some(kind) => responder(kind, args.seed),
        None => {
            bridge = make_bridge(&args.provider, 1)?;
            Box::new(LlmResponder {
                bridge: &bridge,
                split_name: args.split_name.clone(),
                dataset_name: args.dataset_name.clone(),
            })
        }
    };
    let responses = administer(&items, r.as_mut());
    let unanswered = responses.iter().filter(|r| r.chosen.is_none()).count();
    out.write(&args.out, &write_jsonl(&responses))?;
    out.manifest(
        &sidecar(&args.out),
        "quiz run",
        args,
        json!({"items": items.len(), "non_responses": unanswered}),
    )?;
    println!(
        "{} responses, {} non-responses",
        responses.len(),
        unanswered
    );
    Ok(0)
}

fn print_report(run: &AuditRun) {
    let rep = &run.report;
    println!(
        "min_contamination {}  max_contamination {}  headline_kappa {}  best_position {}",
        fmt_metric(rep.min_contamination),
        fmt_metric(rep.max_contamination),
        fmt_metric(rep.headline_kappa),
        rep.best_position.map_or("-".to_string(), |p| p.to_string())
    );
    for k in &rep.per_position {
        println!(
            "  {}: p_o {:.3}  p_e {:.3}  kappa {}",
            k.position,
            k.p_o,
            k.p_e,
            fmt_metric(k.kappa)
        );
    }
}

fn cmd_quiz_report(args: &QuizReportArgs, out: &mut Outputs) -> Result<u8> {
    let bdq: Vec<Response> = read_jsonl(&args.bdq).map_err(|e| anyhow!(e))?;
    let bcq: Vec<Response> = read_jsonl(&args.bcq).map_err(|e| anyhow!(e))?;
    let run = report_from_responses(&bdq, &bcq, args.seed)?;
    print_report(&run);
    if let Some(path) = &args.out {
        out.write_json(path, &json!(run))?;
        out.manifest(&sidecar(path), "quiz report", args, json!({}))?;
    }
    Ok(0)
}

fn cmd_quiz_simulate(args: &QuizSimulateArgs, out: &mut Outputs) -> Result<u8> {
    let kind = responder_kind(args.responder)
        .ok_or_else(|| anyhow!("simulate needs a simulated responder"))?;
    let run = simulate(kind, args.n, args.seed);
    print_report(&run);
    if let Some(path) = &args.out {
        out.write_json(path, &json!(run))?;
        out.manifest(&sidecar(path), "quiz simulate", args, json!({}))?;
    }
    Ok(0)
}

fn run(cli: &Cli, out: &mut Outputs) -> Result<u8> {
    match &cli.command {
        Command::Solve(a) => cmd_solve(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Gen(a) => cmd_gen(a, out),
        Command::Quiz(QuizCommand::Build(a)) => cmd_quiz_build(a, out),
        Command::Quiz(QuizCommand::Run(a)) => cmd_quiz_run(a, out),
        Command::Quiz(QuizCommand::Report(a)) => cmd_quiz_report(a, out),
        Command::Quiz(QuizCommand::Simulate(a)) => cmd_quiz_simulate(a, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let mut out = Outputs::default();
    match run(&cli, &mut out) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            out.remove_all();
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

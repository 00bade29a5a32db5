//! Subcommand implementations.
//!
//! Every command validates its inputs fully before writing anything, stamps
//! {tool version, config hash, seed} into whatever it writes, and refuses
//! to overwrite existing artifacts unless `--force` is given. Exit codes:
//! 0 success, 1 validation error, 2 runtime failure (partial results kept).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use acomm_core::costmodel::{self, cost_report, CostParams};
use acomm_core::engine::{DecodeStrategy, DecodingConfig, Model, ModelConfig};
use acomm_core::grafting::{CombineKind, CombineSpec, GraftConfig, GraftScope};
use acomm_core::mapper::{collect_pairs, train_map, TrainParams};
use acomm_core::protocols::{
    run_ac, run_nl, run_nld, run_silent, run_skyline, AcVariant, Agent, ModelAgent, ProtocolRun,
};
use acomm_core::rng::{derive_seed, SeededRng};
use acomm_core::tasks::{
    bootstrap_ci, gen_countries, gen_tipsheets, score_with, Game, TaskInstance,
};
use clap::Args;

use acomm::config::{config_hash, resolve, resolve_opt, resolve_seed, FileConfig};
use acomm::format::{save_map, save_model, MapMeta, Provenance};
use acomm::records::{
    read_jsonl_with_digest, write_json, write_jsonl, CostRecord, DatasetRecord, MatrixRecord, Meta,
    ReportRecord, RunRecord, TrainRecord,
};
use acomm::{sha256_hex, tool_version};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

impl From<acomm::config::ConfigError> for CliError {
    fn from(e: acomm::config::ConfigError) -> Self {
        invalid(e.to_string())
    }
}

impl From<acomm::format::FormatError> for CliError {
    fn from(e: acomm::format::FormatError) -> Self {
        invalid(e.to_string())
    }
}

impl From<acomm::records::RecordError> for CliError {
    fn from(e: acomm::records::RecordError) -> Self {
        invalid(e.to_string())
    }
}

fn ensure_writable(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(invalid(format!(
            "refusing to overwrite {} (pass --force to allow)",
            path.display()
        )));
    }
    Ok(())
}

fn load_model_with_digest(path: &Path) -> Result<(Model, String), CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| invalid(format!("cannot read model {}: {e}", path.display())))?;
    let digest = sha256_hex(&bytes);
    let (model, _) = acomm::format::decode_model(&bytes)?;
    Ok((model, digest))
}

/// Runs `f` over `0..n` on up to `jobs` threads; output order is by index.
fn parallel_map<T, F>(n: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let value = f(i);
                *slots[i].lock().expect("worker slot") = Some(value);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("slot filled"))
        .collect()
}

fn parse_game(name: &str) -> Result<Game, CliError> {
    match name {
        "countries" => Ok(Game::Countries),
        "tipsheets" => Ok(Game::TipSheets),
        other => Err(invalid(format!(
            "unknown game {other:?} (countries|tipsheets)"
        ))),
    }
}

fn parse_kind(name: &str) -> Result<CombineKind, CliError> {
    match name {
        "sum" => Ok(CombineKind::Sum),
        "mean" => Ok(CombineKind::Mean),
        "replace" => Ok(CombineKind::Replace),
        other => Err(invalid(format!(
            "unknown combine function {other:?} (sum|mean|replace)"
        ))),
    }
}

fn parse_scope(name: &str) -> Result<GraftScope, CliError> {
    match name {
        "last" => Ok(GraftScope::LastToken),
        "all" => Ok(GraftScope::AllTokens),
        other => Err(invalid(format!("unknown scope {other:?} (last|all)"))),
    }
}

fn parse_variant(name: &str) -> Result<AcVariant, CliError> {
    match name {
        "base" => Ok(AcVariant::Base),
        "cot" => Ok(AcVariant::Cot),
        "self" => Ok(AcVariant::SelfSample),
        other => Err(invalid(format!(
            "unknown variant {other:?} (base|cot|self)"
        ))),
    }
}

fn parse_strategy(name: &str, p: f32, temperature: f32) -> Result<DecodeStrategy, CliError> {
    match name {
        "greedy" => Ok(DecodeStrategy::Greedy),
        "nucleus" => Ok(DecodeStrategy::Nucleus { p }),
        "temperature" => Ok(DecodeStrategy::Temperature { temperature }),
        other => Err(invalid(format!(
            "unknown decoding strategy {other:?} (greedy|nucleus|temperature)"
        ))),
    }
}

/// Inclusive `lo..hi` range or comma-separated list of layer indices.
fn parse_layer_range(text: &str) -> Result<Vec<usize>, CliError> {
    let bad = || {
        invalid(format!(
            "cannot parse layer range {text:?} (use lo..hi or a,b,c)"
        ))
    };
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        if hi < lo {
            return Err(bad());
        }
        Ok((lo..=hi).collect())
    } else {
        text.split(',')
            .map(|v| v.trim().parse().map_err(|_| bad()))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// gen-tasks

#[derive(Args)]
pub struct GenTasksArgs {
    /// Which game to generate: countries | tipsheets
    #[arg(long)]
    pub game: String,
    /// Number of instances (defaults: 100 countries, 70 tipsheets)
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output JSONL path
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite an existing output file
    #[arg(long)]
    pub force: bool,
}

pub fn cmd_gen_tasks(args: GenTasksArgs) -> Result<(), CliError> {
    let game = parse_game(&args.game)?;
    let n = args.n.unwrap_or(match game {
        Game::Countries => 100,
        Game::TipSheets => 70,
    });
    if n == 0 {
        return Err(invalid("need at least one task instance"));
    }
    let seed = resolve_seed(args.seed, None);
    ensure_writable(&args.out, args.force)?;

    let mut settings = BTreeMap::new();
    settings.insert("game".into(), args.game.clone());
    settings.insert("n".into(), n.to_string());
    settings.insert("seed".into(), seed.to_string());
    let hash = config_hash("gen-tasks", &settings);

    let tasks = match game {
        Game::Countries => gen_countries(n, seed),
        Game::TipSheets => gen_tipsheets(n, seed),
    };
    let meta = Meta {
        seed,
        tool_version: tool_version().into(),
        config_hash: hash,
    };
    let records: Vec<DatasetRecord> = tasks
        .into_iter()
        .map(|task| DatasetRecord {
            task,
            meta: meta.clone(),
        })
        .collect();
    write_jsonl(&args.out, &records)?;
    println!("wrote {n} {} tasks to {}", args.game, args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// init-model

#[derive(Args)]
pub struct InitModelArgs {
    /// Architecture preset (currently: toy). Default when no config file is given.
    #[arg(long)]
    pub preset: Option<String>,
    /// Config file with n_layers, n_heads, key_size, ffn_size, model_dim,
    /// vocab_size, max_seq_len, ln_epsilon
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output ACWT path
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn model_config_from_file(cfg: &FileConfig) -> Result<ModelConfig, CliError> {
    let need = |key: &str| -> Result<usize, CliError> {
        cfg.get::<usize>(key)?
            .ok_or_else(|| invalid(format!("model config is missing {key}")))
    };
    Ok(ModelConfig {
        n_layers: need("n_layers")?,
        n_heads: need("n_heads")?,
        key_size: need("key_size")?,
        ffn_size: need("ffn_size")?,
        model_dim: need("model_dim")?,
        vocab_size: need("vocab_size")?,
        max_seq_len: need("max_seq_len")?,
        ln_epsilon: cfg.get::<f32>("ln_epsilon")?.unwrap_or(1e-5),
    })
}

pub fn cmd_init_model(args: InitModelArgs) -> Result<(), CliError> {
    let config = match (&args.preset, &args.config) {
        (Some(_), Some(_)) => return Err(invalid("pass either --preset or --config, not both")),
        (None, Some(path)) => model_config_from_file(&FileConfig::load(path)?)?,
        (Some(name), None) if name == "toy" => ModelConfig::toy(),
        (Some(name), None) => return Err(invalid(format!("unknown model preset {name:?}"))),
        (None, None) => ModelConfig::toy(),
    };
    config.validate().map_err(|e| invalid(e.to_string()))?;
    let seed = resolve_seed(args.seed, None);
    ensure_writable(&args.out, args.force)?;

    let mut settings = BTreeMap::new();
    settings.insert("n_layers".into(), config.n_layers.to_string());
    settings.insert("n_heads".into(), config.n_heads.to_string());
    settings.insert("key_size".into(), config.key_size.to_string());
    settings.insert("ffn_size".into(), config.ffn_size.to_string());
    settings.insert("model_dim".into(), config.model_dim.to_string());
    settings.insert("vocab_size".into(), config.vocab_size.to_string());
    settings.insert("max_seq_len".into(), config.max_seq_len.to_string());
    settings.insert("ln_epsilon".into(), config.ln_epsilon.to_string());
    settings.insert("seed".into(), seed.to_string());
    let hash = config_hash("init-model", &settings);

    let model = Model::random(config, seed).map_err(|e| invalid(e.to_string()))?;
    let provenance = Provenance {
        tool_version: tool_version().into(),
        seed: Some(seed),
        config_hash: Some(hash),
    };
    save_model(&args.out, &model, provenance)?;
    let digest = sha256_hex(&std::fs::read(&args.out).map_err(|e| runtime(e.to_string()))?);
    println!("wrote model to {} (sha256 {digest})", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// run

#[derive(Args)]
#[command(
    after_help = "Config file keys mirror the long flags with underscores: protocol, \
variant, model_a, model_b, tasks, out, k, j, f, scope, map, decoding, p, temperature, \
max_new_tokens, message_budget, rounds, seed, strict, jobs. Flags win over file entries."
)]
pub struct RunArgs {
    /// Flat key = value config file; flags override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// silent | skyline | nl | nld | ac
    #[arg(long)]
    pub protocol: Option<String>,
    /// AC variant: base | cot | self
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub model_a: Option<PathBuf>,
    #[arg(long)]
    pub model_b: Option<PathBuf>,
    /// Task dataset (JSONL)
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Output results path (JSONL)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Graft source layer k (A side)
    #[arg(long)]
    pub k: Option<usize>,
    /// Graft target layer j (B side)
    #[arg(long)]
    pub j: Option<usize>,
    /// Combine function: sum | mean | replace
    #[arg(long)]
    pub f: Option<String>,
    /// Token scope: last | all
    #[arg(long)]
    pub scope: Option<String>,
    /// Trained map file, or "none"
    #[arg(long)]
    pub map: Option<String>,
    /// greedy | nucleus | temperature
    #[arg(long)]
    pub decoding: Option<String>,
    /// Nucleus mass threshold
    #[arg(long)]
    pub p: Option<f32>,
    #[arg(long)]
    pub temperature: Option<f32>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// NL message token budget M
    #[arg(long)]
    pub message_budget: Option<usize>,
    /// Debate rounds r
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable answer normalization in scoring
    #[arg(long)]
    pub strict: bool,
    /// Worker threads for fanning out over tasks
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

struct RunPlan {
    protocol: String,
    variant: AcVariant,
    model_a: Option<PathBuf>,
    model_b: PathBuf,
    tasks: PathBuf,
    out: PathBuf,
    graft_k: Option<usize>,
    graft_j: Option<usize>,
    kind: CombineKind,
    scope: GraftScope,
    map: Option<PathBuf>,
    strategy: DecodeStrategy,
    max_new_tokens: usize,
    message_budget: usize,
    rounds: usize,
    seed: u64,
    strict: bool,
    jobs: usize,
    config_hash: String,
}

fn resolve_run_plan(args: &RunArgs) -> Result<RunPlan, CliError> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let file_path = |key: &str| file.raw(key).map(PathBuf::from);

    let protocol = resolve(
        args.protocol.clone(),
        file.raw("protocol").map(String::from),
        String::new(),
    );
    if protocol.is_empty() {
        return Err(invalid("missing --protocol (silent|skyline|nl|nld|ac)"));
    }
    if !matches!(
        protocol.as_str(),
        "silent" | "skyline" | "nl" | "nld" | "ac"
    ) {
        return Err(invalid(format!("unknown protocol {protocol:?}")));
    }
    let variant = parse_variant(&resolve(
        args.variant.clone(),
        file.raw("variant").map(String::from),
        "base".into(),
    ))?;
    let kind = parse_kind(&resolve(
        args.f.clone(),
        file.raw("f").map(String::from),
        "replace".into(),
    ))?;
    let scope = parse_scope(&resolve(
        args.scope.clone(),
        file.raw("scope").map(String::from),
        "last".into(),
    ))?;
    let map_text = resolve(
        args.map.clone(),
        file.raw("map").map(String::from),
        "none".into(),
    );
    let map = if map_text == "none" {
        None
    } else {
        Some(PathBuf::from(map_text))
    };

    let decoding_name = resolve(
        args.decoding.clone(),
        file.raw("decoding").map(String::from),
        "greedy".into(),
    );
    let p = resolve(args.p, file.get("p")?, 0.9);
    let temperature = resolve(args.temperature, file.get("temperature")?, 0.7);
    let strategy = parse_strategy(&decoding_name, p, temperature)?;

    let tasks = resolve_opt(args.tasks.clone(), file_path("tasks"))
        .ok_or_else(|| invalid("missing --tasks"))?;
    let out =
        resolve_opt(args.out.clone(), file_path("out")).ok_or_else(|| invalid("missing --out"))?;
    let model_b = resolve_opt(args.model_b.clone(), file_path("model_b"))
        .ok_or_else(|| invalid("missing --model-b"))?;
    let model_a = resolve_opt(args.model_a.clone(), file_path("model_a"));

    let seed = resolve_seed(args.seed, file.get("seed")?);
    let strict = args.strict || file.get::<bool>("strict")?.unwrap_or(false);
    let plan = RunPlan {
        graft_k: resolve_opt(args.k, file.get("k")?),
        graft_j: resolve_opt(args.j, file.get("j")?),
        kind,
        scope,
        map,
        strategy,
        max_new_tokens: resolve(args.max_new_tokens, file.get("max_new_tokens")?, 32),
        message_budget: resolve(args.message_budget, file.get("message_budget")?, 32),
        rounds: resolve(args.rounds, file.get("rounds")?, 2),
        seed,
        strict,
        jobs: resolve(args.jobs, file.get("jobs")?, 1),
        config_hash: String::new(),
        protocol,
        variant,
        model_a,
        model_b,
        tasks,
        out,
    };
    Ok(plan)
}

/// Settings that feed the config hash. Inputs enter as content digests
/// rather than path strings, so identical runs hash identically no matter
/// where their files live; output paths are excluded for the same reason.
fn run_settings_map(
    plan: &RunPlan,
    ctx: &RunContext,
    tasks_digest: &str,
) -> BTreeMap<String, String> {
    let mut s = BTreeMap::new();
    let opt = |v: &Option<usize>| v.map(|x| x.to_string()).unwrap_or_else(|| "none".into());
    s.insert("protocol".into(), plan.protocol.clone());
    s.insert("variant".into(), plan.variant.to_string());
    s.insert(
        "model_a_digest".into(),
        ctx.model_a
            .as_ref()
            .map(|(_, d)| d.clone())
            .unwrap_or_else(|| "none".into()),
    );
    s.insert("model_b_digest".into(), ctx.model_b.1.clone());
    s.insert("tasks_digest".into(), tasks_digest.into());
    s.insert("k".into(), opt(&plan.graft_k));
    s.insert("j".into(), opt(&plan.graft_j));
    s.insert("f".into(), plan.kind.to_string());
    s.insert(
        "scope".into(),
        match plan.scope {
            GraftScope::LastToken => "last".into(),
            GraftScope::AllTokens => "all".into(),
        },
    );
    s.insert(
        "map_digest".into(),
        ctx.map_digest.clone().unwrap_or_else(|| "none".into()),
    );
    s.insert(
        "decoding".into(),
        match plan.strategy {
            DecodeStrategy::Greedy => "greedy".into(),
            DecodeStrategy::Nucleus { p } => format!("nucleus p={p}"),
            DecodeStrategy::Temperature { temperature } => format!("temperature t={temperature}"),
        },
    );
    s.insert("max_new_tokens".into(), plan.max_new_tokens.to_string());
    s.insert("message_budget".into(), plan.message_budget.to_string());
    s.insert("rounds".into(), plan.rounds.to_string());
    s.insert("seed".into(), plan.seed.to_string());
    s.insert("strict".into(), plan.strict.to_string());
    s
}

/// Loaded models plus the validated graft configuration.
struct RunContext {
    model_a: Option<(Model, String)>,
    model_b: (Model, String),
    graft: Option<GraftConfig>,
    map_digest: Option<String>,
}

fn prepare_run_context(plan: &RunPlan) -> Result<RunContext, CliError> {
    let needs_a = matches!(plan.protocol.as_str(), "nl" | "nld" | "ac");
    let model_b = load_model_with_digest(&plan.model_b)?;
    let model_a = match (&plan.model_a, needs_a) {
        (Some(path), _) => Some(load_model_with_digest(path)?),
        (None, true) => {
            return Err(invalid(format!(
                "protocol {} needs --model-a",
                plan.protocol
            )))
        }
        (None, false) => None,
    };

    let mut map_digest = None;
    let graft = if plan.protocol == "ac" {
        let k = plan
            .graft_k
            .ok_or_else(|| invalid("protocol ac needs --k"))?;
        let j = plan
            .graft_j
            .ok_or_else(|| invalid("protocol ac needs --j"))?;
        let a = &model_a.as_ref().expect("model A loaded for ac").0;
        if k > a.depth() {
            return Err(invalid(format!(
                "k = {k} exceeds model A depth {}",
                a.depth()
            )));
        }
        if j > model_b.0.depth() {
            return Err(invalid(format!(
                "j = {j} exceeds model B depth {}",
                model_b.0.depth()
            )));
        }
        let pre_map = match &plan.map {
            None => None,
            Some(path) => {
                let bytes = std::fs::read(path)
                    .map_err(|e| invalid(format!("cannot read map {}: {e}", path.display())))?;
                map_digest = Some(sha256_hex(&bytes));
                let (map, header) = acomm::format::decode_map(&bytes)?;
                let a_digest = &model_a.as_ref().expect("model A loaded").1;
                let b_digest = &model_b.1;
                if header.source_model_digest.as_deref() != Some(a_digest.as_str())
                    || header.target_model_digest.as_deref() != Some(b_digest.as_str())
                {
                    return Err(invalid(format!(
                        "map {} was trained for a different model pair",
                        path.display()
                    )));
                }
                Some(map)
            }
        };
        let combine = CombineSpec::with_map(plan.kind, plan.scope, pre_map)
            .map_err(|e| invalid(e.to_string()))?;
        Some(GraftConfig {
            source_layer: k,
            target_layer: j,
            combine,
        })
    } else {
        None
    };

    Ok(RunContext {
        model_a,
        model_b,
        graft,
        map_digest,
    })
}

fn execute_task(
    plan: &RunPlan,
    ctx: &RunContext,
    task: &TaskInstance,
    index: usize,
) -> Result<ProtocolRun, String> {
    let decoding = DecodingConfig {
        strategy: plan.strategy,
        max_new_tokens: plan.max_new_tokens,
        seed: 0,
    };
    let agent_b = Agent::Model(ModelAgent {
        model: &ctx.model_b.0,
        decoding,
        role: "B".into(),
    });
    let seed = derive_seed(plan.seed, index as u64);
    let result = match plan.protocol.as_str() {
        "silent" => run_silent(&agent_b, task, seed),
        "skyline" => run_skyline(&agent_b, task, seed),
        "nl" | "nld" | "ac" => {
            let model_a = &ctx.model_a.as_ref().expect("model A validated").0;
            let agent_a = Agent::Model(ModelAgent {
                model: model_a,
                decoding,
                role: "A".into(),
            });
            match plan.protocol.as_str() {
                "nl" => run_nl(&agent_a, &agent_b, task, plan.message_budget, seed),
                "nld" => {
                    let agents = [agent_a, agent_b];
                    run_nld(&agents, task, plan.rounds, seed)
                }
                _ => run_ac(
                    &agent_a,
                    &agent_b,
                    task,
                    ctx.graft.as_ref().expect("graft validated"),
                    plan.variant,
                    seed,
                ),
            }
        }
        other => unreachable!("protocol {other} validated earlier"),
    };
    result.map_err(|e| e.to_string())
}

pub fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let mut plan = resolve_run_plan(&args)?;
    let (tasks, tasks_digest): (Vec<TaskInstance>, String) = read_jsonl_with_digest(&plan.tasks)?;
    let ctx = prepare_run_context(&plan)?;
    plan.config_hash = config_hash("run", &run_settings_map(&plan, &ctx, &tasks_digest));
    ensure_writable(&plan.out, args.force)?;

    let version = tool_version();
    let records = parallel_map(tasks.len(), plan.jobs, |i| {
        let task = &tasks[i];
        match execute_task(&plan, &ctx, task, i) {
            Ok(run) => {
                let score = score_with(&run.answer, &run.gold, plan.strict);
                RunRecord::from_run(run, score, version, &plan.config_hash)
            }
            Err(message) => RunRecord::from_failure(
                task,
                &plan.protocol,
                derive_seed(plan.seed, i as u64),
                message,
                version,
                &plan.config_hash,
            ),
        }
    });
    write_jsonl(&plan.out, &records)?;

    let scores: Vec<f32> = records.iter().map(|r| r.score as f32).collect();
    let report =
        bootstrap_ci(&scores, 1000, 0.95, plan.seed).map_err(|e| runtime(e.to_string()))?;
    println!(
        "{} on {} tasks: accuracy {:.4} (95% CI [{:.4}, {:.4}]) -> {}",
        plan.protocol,
        report.n,
        report.accuracy,
        report.ci_low,
        report.ci_high,
        plan.out.display()
    );

    let failures = records.iter().filter(|r| r.error.is_some()).count();
    if failures > 0 {
        return Err(runtime(format!(
            "{failures} of {} runs failed; partial results in {}",
            records.len(),
            plan.out.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Args)]
#[command(
    after_help = "Config file keys mirror the long flags with underscores: model_a, \
model_b, tasks, out, k_range, j_range, f, scope, map, decoding, p, temperature, \
max_new_tokens, seed, strict, jobs. Flags win over file entries."
)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model_a: Option<PathBuf>,
    #[arg(long)]
    pub model_b: Option<PathBuf>,
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Output matrix JSON path
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Source layers: lo..hi (inclusive) or a,b,c
    #[arg(long)]
    pub k_range: Option<String>,
    /// Target layers: lo..hi (inclusive) or a,b,c
    #[arg(long)]
    pub j_range: Option<String>,
    #[arg(long)]
    pub f: Option<String>,
    #[arg(long)]
    pub scope: Option<String>,
    #[arg(long)]
    pub map: Option<String>,
    #[arg(long)]
    pub decoding: Option<String>,
    #[arg(long)]
    pub p: Option<f32>,
    #[arg(long)]
    pub temperature: Option<f32>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub strict: bool,
    /// Worker threads for fanning out over grid cells
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

pub fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let run_args = RunArgs {
        config: args.config.clone(),
        protocol: Some("ac".into()),
        variant: Some("base".into()),
        model_a: args.model_a.clone(),
        model_b: args.model_b.clone(),
        tasks: args.tasks.clone(),
        out: args.out.clone(),
        k: Some(0),
        j: Some(0),
        f: args.f.clone(),
        scope: args.scope.clone(),
        map: args.map.clone(),
        decoding: args.decoding.clone(),
        p: args.p,
        temperature: args.temperature,
        max_new_tokens: args.max_new_tokens,
        message_budget: None,
        rounds: None,
        seed: args.seed,
        strict: args.strict,
        jobs: args.jobs,
        force: args.force,
    };
    let mut plan = resolve_run_plan(&run_args)?;

    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let k_text = resolve(
        args.k_range.clone(),
        file.raw("k_range").map(String::from),
        String::new(),
    );
    let j_text = resolve(
        args.j_range.clone(),
        file.raw("j_range").map(String::from),
        String::new(),
    );
    if k_text.is_empty() || j_text.is_empty() {
        return Err(invalid("sweep needs --k-range and --j-range"));
    }
    let k_values = parse_layer_range(&k_text)?;
    let j_values = parse_layer_range(&j_text)?;

    let (tasks, tasks_digest): (Vec<TaskInstance>, String) = read_jsonl_with_digest(&plan.tasks)?;
    plan.graft_k = Some(*k_values.iter().max().expect("non-empty range"));
    plan.graft_j = Some(*j_values.iter().max().expect("non-empty range"));
    let ctx = prepare_run_context(&plan)?; // validates deepest cell and the map

    let mut settings = run_settings_map(&plan, &ctx, &tasks_digest);
    settings.remove("k");
    settings.remove("j");
    settings.remove("variant");
    settings.remove("message_budget");
    settings.remove("rounds");
    settings.insert("k_range".into(), k_text.clone());
    settings.insert("j_range".into(), j_text.clone());
    plan.config_hash = config_hash("sweep", &settings);
    ensure_writable(&plan.out, args.force)?;

    let model_a = &ctx.model_a.as_ref().expect("model A validated").0;
    let model_b = &ctx.model_b.0;
    let spec = ctx.graft.as_ref().expect("graft validated").combine.clone();
    let decoding = DecodingConfig {
        strategy: plan.strategy,
        max_new_tokens: plan.max_new_tokens,
        seed: 0,
    };

    let cells: Vec<(usize, usize)> = k_values
        .iter()
        .flat_map(|&k| j_values.iter().map(move |&j| (k, j)))
        .collect();
    let accuracies = parallel_map(cells.len(), plan.jobs, |c| {
        let (k, j) = cells[c];
        let agent_a = Agent::Model(ModelAgent {
            model: model_a,
            decoding,
            role: "A".into(),
        });
        let agent_b = Agent::Model(ModelAgent {
            model: model_b,
            decoding,
            role: "B".into(),
        });
        acomm_core::protocols::sweep_layers(
            &agent_a,
            &agent_b,
            &tasks,
            &[k],
            &[j],
            &spec,
            plan.seed,
            plan.strict,
        )
        .map(|m| m[0][0])
        .map_err(|e| e.to_string())
    });
    let mut accuracy = vec![vec![0.0f64; j_values.len()]; k_values.len()];
    for (idx, cell) in accuracies.into_iter().enumerate() {
        let value = cell.map_err(runtime)?;
        accuracy[idx / j_values.len()][idx % j_values.len()] = value;
    }

    let record = MatrixRecord {
        k_values,
        j_values,
        accuracy,
        meta: Meta {
            seed: plan.seed,
            tool_version: tool_version().into(),
            config_hash: plan.config_hash.clone(),
        },
    };
    write_json(&plan.out, &record)?;
    println!(
        "swept {}x{} cells over {} tasks -> {}",
        record.k_values.len(),
        record.j_values.len(),
        tasks.len(),
        plan.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-map

#[derive(Args)]
pub struct TrainMapArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model_a: Option<PathBuf>,
    #[arg(long)]
    pub model_b: Option<PathBuf>,
    /// Layer of model A to read activations from
    #[arg(long)]
    pub k: Option<usize>,
    /// Layer of model B whose activations are the regression target
    #[arg(long)]
    pub j: Option<usize>,
    /// Corpus file (one sentence per line); omitted = synthesize one
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Size of the synthesized corpus when no file is given
    #[arg(long)]
    pub corpus_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output map path (ACWT)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training-report JSON path (default: <out>.train.json)
    #[arg(long)]
    pub report_out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

/// Desk-scale training corpus: prompts from both task generators plus
/// seeded random printable strings.
fn synth_corpus(n: usize, seed: u64, max_len: usize) -> Vec<String> {
    let third = n.div_ceil(3);
    let countries = gen_countries(third.max(1), derive_seed(seed, 1));
    let tips = gen_tipsheets(third.max(1), derive_seed(seed, 2));
    let mut rng = SeededRng::new(derive_seed(seed, 3));
    let mut out = Vec::with_capacity(n);
    let mut i = 0usize;
    while out.len() < n {
        let mut s = match out.len() % 3 {
            0 => countries[i % countries.len()].prompt_a.clone(),
            1 => tips[i % tips.len()].prompt_a.clone(),
            _ => {
                let len = 8 + rng.index(56);
                (0..len)
                    .map(|_| (32 + rng.index(95)) as u8 as char)
                    .collect()
            }
        };
        if s.len() + 1 > max_len {
            s.truncate(max_len - 1);
        }
        out.push(s);
        i += 1;
    }
    out
}

pub fn cmd_train_map(args: TrainMapArgs) -> Result<(), CliError> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let file_path = |key: &str| file.raw(key).map(PathBuf::from);
    let model_a_path = resolve_opt(args.model_a.clone(), file_path("model_a"))
        .ok_or_else(|| invalid("missing --model-a"))?;
    let model_b_path = resolve_opt(args.model_b.clone(), file_path("model_b"))
        .ok_or_else(|| invalid("missing --model-b"))?;
    let out =
        resolve_opt(args.out.clone(), file_path("out")).ok_or_else(|| invalid("missing --out"))?;
    let k = resolve_opt(args.k, file.get("k")?).ok_or_else(|| invalid("missing --k"))?;
    let j = resolve_opt(args.j, file.get("j")?).ok_or_else(|| invalid("missing --j"))?;
    let corpus_path = resolve_opt(args.corpus.clone(), file_path("corpus"));
    let corpus_size = resolve(args.corpus_size, file.get("corpus_size")?, 3072);
    let params = TrainParams {
        epochs: resolve(args.epochs, file.get("epochs")?, 10),
        batch_size: resolve(args.batch_size, file.get("batch_size")?, 32),
        learning_rate: resolve(args.learning_rate, file.get("learning_rate")?, 0.001),
    };
    let seed = resolve_seed(args.seed, file.get("seed")?);
    let report_out = args
        .report_out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.train.json", out.display())));

    let (model_a, digest_a) = load_model_with_digest(&model_a_path)?;
    let (model_b, digest_b) = load_model_with_digest(&model_b_path)?;
    if k > model_a.depth() {
        return Err(invalid(format!(
            "k = {k} exceeds model A depth {}",
            model_a.depth()
        )));
    }
    if j > model_b.depth() {
        return Err(invalid(format!(
            "j = {j} exceeds model B depth {}",
            model_b.depth()
        )));
    }

    let max_len = model_a.config.max_seq_len.min(model_b.config.max_seq_len);
    let (corpus, corpus_digest): (Vec<String>, String) = match &corpus_path {
        Some(path) => {
            let bytes = std::fs::read(path)
                .map_err(|e| invalid(format!("cannot read corpus {}: {e}", path.display())))?;
            let digest = sha256_hex(&bytes);
            let text = String::from_utf8(bytes)
                .map_err(|_| invalid(format!("corpus {} is not UTF-8", path.display())))?;
            let lines: Vec<String> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| l.to_string())
                .collect();
            for line in &lines {
                if line.len() + 1 > max_len {
                    return Err(invalid(format!(
                        "corpus sentence of {} bytes exceeds max_seq_len {max_len}",
                        line.len()
                    )));
                }
            }
            (lines, digest)
        }
        None => (synth_corpus(corpus_size, seed, max_len), "synthetic".into()),
    };
    if corpus.is_empty() {
        return Err(invalid("corpus is empty"));
    }

    let mut settings = BTreeMap::new();
    settings.insert("model_a_digest".into(), digest_a.clone());
    settings.insert("model_b_digest".into(), digest_b.clone());
    settings.insert("k".into(), k.to_string());
    settings.insert("j".into(), j.to_string());
    settings.insert("corpus_digest".into(), corpus_digest);
    settings.insert("corpus_size".into(), corpus.len().to_string());
    settings.insert("epochs".into(), params.epochs.to_string());
    settings.insert("batch_size".into(), params.batch_size.to_string());
    settings.insert("learning_rate".into(), params.learning_rate.to_string());
    settings.insert("seed".into(), seed.to_string());
    let hash = config_hash("train-map", &settings);

    ensure_writable(&out, args.force)?;
    ensure_writable(&report_out, args.force)?;

    let sentences: Vec<&str> = corpus.iter().map(String::as_str).collect();
    let dataset = collect_pairs(&model_a, &model_b, &sentences, k, j)
        .map_err(|e| runtime(format!("pair collection failed: {e}")))?;
    let (map, report) =
        train_map(&dataset, params, seed).map_err(|e| runtime(format!("training failed: {e}")))?;

    let meta = MapMeta {
        source_model_digest: digest_a,
        target_model_digest: digest_b,
        source_layer: k,
        target_layer: j,
    };
    let provenance = Provenance {
        tool_version: tool_version().into(),
        seed: Some(seed),
        config_hash: Some(hash.clone()),
    };
    save_map(&out, &map, &meta, provenance)?;

    let record = TrainRecord {
        epoch_losses: report.epoch_losses,
        final_loss: report.final_loss,
        epochs: params.epochs,
        batch_size: params.batch_size,
        learning_rate: params.learning_rate,
        corpus_size: corpus.len(),
        k,
        j,
        source_model_digest: meta.source_model_digest.clone(),
        target_model_digest: meta.target_model_digest.clone(),
        meta: Meta {
            seed,
            tool_version: tool_version().into(),
            config_hash: hash,
        },
    };
    write_json(&report_out, &record)?;
    println!(
        "trained {}x{} map over {} sentences, final loss {:.6} -> {}",
        map.rows(),
        map.cols(),
        corpus.len(),
        record.final_loss,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// cost

#[derive(Args)]
pub struct CostArgs {
    /// Architecture preset: toy | llama1b | llama3b | llama8b
    #[arg(long, default_value = "toy")]
    pub preset: String,
    /// Normalization reference preset
    #[arg(long, default_value = "llama1b")]
    pub reference: String,
    #[arg(long)]
    pub n_layers: Option<u64>,
    #[arg(long)]
    pub n_heads: Option<u64>,
    #[arg(long)]
    pub key_size: Option<u64>,
    #[arg(long)]
    pub ffn_size: Option<u64>,
    #[arg(long)]
    pub model_dim: Option<u64>,
    #[arg(long)]
    pub vocab_size: Option<u64>,
    /// Prompt tokens
    #[arg(long = "P")]
    pub prompt_tokens: Option<u64>,
    /// Message tokens
    #[arg(long = "M")]
    pub message_tokens: Option<u64>,
    /// Output tokens
    #[arg(long = "T")]
    pub output_tokens: Option<u64>,
    /// Graft layer (defaults to half the depth)
    #[arg(long = "k")]
    pub graft_layer: Option<u64>,
    /// Learned-map dimensions "d_A,d_B"; sets the O(d_A d_B) combine term
    #[arg(long)]
    pub map_dims: Option<String>,
    /// Also write the report to a file
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

pub fn cmd_cost(args: CostArgs) -> Result<(), CliError> {
    let mut arch = costmodel::preset(&args.preset).map_err(invalid)?;
    if let Some(v) = args.n_layers {
        arch.n_layers = v;
    }
    if let Some(v) = args.n_heads {
        arch.n_heads = v;
    }
    if let Some(v) = args.key_size {
        arch.key_size = v;
    }
    if let Some(v) = args.ffn_size {
        arch.ffn_size = v;
    }
    if let Some(v) = args.model_dim {
        arch.model_dim = v;
    }
    if let Some(v) = args.vocab_size {
        arch.vocab_size = v;
    }
    let reference = costmodel::preset(&args.reference).map_err(invalid)?;

    let mut params: CostParams = arch.with_tokens(
        args.prompt_tokens.unwrap_or(256),
        args.message_tokens.unwrap_or(256),
        args.output_tokens.unwrap_or(256),
    );
    params.graft_layer = args.graft_layer.unwrap_or(arch.n_layers / 2);
    if let Some(dims) = &args.map_dims {
        let (a, b) = dims
            .split_once(',')
            .ok_or_else(|| invalid("--map-dims expects \"d_A,d_B\""))?;
        params.map_used = true;
        params.d_a = a
            .trim()
            .parse()
            .map_err(|_| invalid("bad d_A in --map-dims"))?;
        params.d_b = b
            .trim()
            .parse()
            .map_err(|_| invalid("bad d_B in --map-dims"))?;
    }

    if params.graft_layer > params.n_layers {
        return Err(invalid(format!(
            "k = {} exceeds depth {}",
            params.graft_layer, params.n_layers
        )));
    }
    const LIMIT: u64 = 1 << 40;
    for (name, v) in [
        ("n_layers", params.n_layers),
        ("n_heads", params.n_heads),
        ("key_size", params.key_size),
        ("ffn_size", params.ffn_size),
        ("model_dim", params.model_dim),
        ("vocab_size", params.vocab_size),
        ("P", params.prompt_tokens),
        ("M", params.message_tokens),
        ("T", params.output_tokens),
        ("d_A", params.d_a),
        ("d_B", params.d_b),
    ] {
        if v > LIMIT {
            return Err(invalid(format!(
                "{name} = {v} is beyond the supported range"
            )));
        }
    }

    let mut settings = BTreeMap::new();
    settings.insert("preset".into(), args.preset.clone());
    settings.insert("reference".into(), args.reference.clone());
    settings.insert(
        "params".into(),
        serde_json::to_string(&params).expect("params serialize"),
    );
    let hash = config_hash("cost", &settings);

    let report = cost_report(&params, &reference);
    let record = CostRecord {
        params,
        reference: args.reference.clone(),
        report,
        tool_version: tool_version().into(),
        config_hash: hash,
    };
    let text = serde_json::to_string_pretty(&record).expect("record serializes");
    println!("{text}");
    if let Some(out) = &args.out {
        ensure_writable(out, args.force)?;
        write_json(out, &record)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report

#[derive(Args)]
pub struct ReportArgs {
    /// Results JSONL produced by `run`
    #[arg(long)]
    pub results: PathBuf,
    /// Bootstrap resamples
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    /// Confidence level
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the report to a file
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

pub fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let (records, results_digest): (Vec<RunRecord>, String) =
        read_jsonl_with_digest(&args.results)?;
    let seed = resolve_seed(args.seed, None);
    let scores: Vec<f32> = records.iter().map(|r| r.score as f32).collect();
    let eval =
        bootstrap_ci(&scores, args.iters, args.level, seed).map_err(|e| invalid(e.to_string()))?;

    let mut settings = BTreeMap::new();
    settings.insert("results_digest".into(), results_digest);
    settings.insert("iters".into(), args.iters.to_string());
    settings.insert("level".into(), args.level.to_string());
    settings.insert("seed".into(), seed.to_string());
    let hash = config_hash("report", &settings);

    let record = ReportRecord {
        eval,
        tool_version: tool_version().into(),
        config_hash: hash,
    };
    let text = serde_json::to_string_pretty(&record).expect("record serializes");
    println!("{text}");
    if let Some(out) = &args.out {
        ensure_writable(out, args.force)?;
        write_json(out, &record)?;
    }
    Ok(())
}

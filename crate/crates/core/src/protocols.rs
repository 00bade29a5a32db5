//! Two-agent communication protocols: silent, skyline, single-message NL,
//! multi-round NL debate, and activation communication with its variants.
//!
//! Every run is a pure function of (agents, task, seed): decode calls draw
//! their seeds from the run seed in execution order, so fixed seeds give
//! identical runs. Agents are either live models or scripted lookup tables;
//! the scripted kind answers gold exactly when its enabling fact is visible
//! in its prompt, which lets the routing logic be tested independently of
//! model quality.
//!
//! The transcript records inter-agent messages only (the NL message, every
//! debate-round answer); an agent's final answer to the task is the run's
//! `answer`, not a message. Analytical cost uses the answering model B's
//! architecture with `P = max(t_A, t_B)`, `M` = tokens actually sent to B,
//! and `T` = tokens of B's final answer.

use alloc::borrow::ToOwned;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::Cell;

use crate::costmodel::{cost_report, ArchParams, CostParams, CostReport};
use crate::engine::{
    decode, detokenize, forward_until, tokenize_bytes, DecodingConfig, EngineError, GraftHook,
    Model, TokenSeq,
};
use crate::grafting::{graft_rows, CombineKind, CombineSpec, GraftConfig, GraftError};
use crate::rng::derive_seed;
use crate::tasks::TaskInstance;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Graft(#[from] GraftError),
    #[error("invalid agents: {0}")]
    InvalidAgents(&'static str),
    #[error("debate needs at least one round")]
    InvalidRounds,
    #[error("{which} layer {layer} out of range for depth {depth}")]
    LayerOutOfRange {
        which: &'static str,
        layer: usize,
        depth: usize,
    },
    #[error("empty {0} range")]
    EmptyRange(&'static str),
    #[error("map shape {rows}x{cols} does not fit model pair ({d_b}, {d_a})")]
    MapModelMismatch {
        rows: usize,
        cols: usize,
        d_b: usize,
        d_a: usize,
    },
}

/// Prompt templates shipped with the crate. These are fixed text resources;
/// their digests are folded into run metadata by the CLI layer.
pub mod templates {
    /// Separator between the two prompts in the skyline concatenation.
    pub const SKYLINE_SEPARATOR: &str = "\n";
    /// Message-eliciting template for the NL protocol (agent A side).
    pub const NL_MESSAGE: &str =
        "{prompt}\nWrite one short message telling your teammate the key fact above.\nMessage:";
    /// Refinement template for debate rounds after the first.
    pub const NLD_REFINE: &str = "{prompt}\nYour previous answer: {own}\nOther agents' answers: {peers}\nGive your refined final answer.\nAnswer:";
    /// Chain-of-thought elicitation used by the `cot` variant.
    pub const COT: &str = "{prompt}\nLet's think step by step, then state the key conclusion.\n";

    /// Every template with a stable name, for hashing into run metadata.
    pub fn all() -> [(&'static str, &'static str); 4] {
        [
            ("skyline_separator", SKYLINE_SEPARATOR),
            ("nl_message", NL_MESSAGE),
            ("nld_refine", NLD_REFINE),
            ("cot", COT),
        ]
    }
}

/// A live model with its decoding configuration.
pub struct ModelAgent<'a> {
    pub model: &'a Model,
    pub decoding: DecodingConfig,
    pub role: String,
}

/// One substring-triggered answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptRule {
    pub pattern: String,
    pub answer: String,
}

/// Deterministic lookup-table agent: the first rule whose pattern occurs in
/// the visible prompt wins, otherwise the fallback answer is returned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedAgent {
    pub rules: Vec<ScriptRule>,
    pub fallback: String,
    pub role: String,
}

impl ScriptedAgent {
    pub fn new(rules: Vec<ScriptRule>, fallback: &str, role: &str) -> Self {
        Self {
            rules,
            fallback: fallback.to_owned(),
            role: role.to_owned(),
        }
    }

    fn lookup(&self, visible: &[u8]) -> &str {
        self.rules
            .iter()
            .find(|r| bytes_contain(visible, r.pattern.as_bytes()))
            .map(|r| r.answer.as_str())
            .unwrap_or(self.fallback.as_str())
    }
}

fn bytes_contain(haystack: &[u8], needle: &[u8]) -> bool {
    needle.is_empty() || haystack.windows(needle.len()).any(|w| w == needle)
}

/// Either a live model or a scripted oracle.
pub enum Agent<'a> {
    Model(ModelAgent<'a>),
    Scripted(ScriptedAgent),
}

impl<'a> Agent<'a> {
    pub fn role(&self) -> &str {
        match self {
            Agent::Model(m) => &m.role,
            Agent::Scripted(s) => &s.role,
        }
    }

    fn is_model(&self) -> bool {
        matches!(self, Agent::Model(_))
    }

    /// Decodes (or looks up) an answer to the visible prompt. Model agents
    /// use their decoding config with the given seed and optional token
    /// budget; scripted agents ignore both.
    ///
    /// Prompts and replies travel as raw bytes: the byte-level tokenizer
    /// makes every generated token one byte, so nothing a model says is
    /// altered before the next agent reads it.
    fn respond(
        &self,
        visible: &[u8],
        budget: Option<usize>,
        seed: u64,
    ) -> Result<Reply, ProtocolError> {
        match self {
            Agent::Scripted(s) => Ok(Reply::from_text(s.lookup(visible))),
            Agent::Model(m) => {
                let prompt = tokenize_bytes(visible, m.model.config.max_seq_len)?;
                let cfg = DecodingConfig {
                    strategy: m.decoding.strategy,
                    max_new_tokens: budget.unwrap_or(m.decoding.max_new_tokens),
                    seed,
                };
                let generated = decode(m.model, &prompt, &cfg, None)?;
                Ok(Reply::from_tokens(&generated))
            }
        }
    }
}

/// A reply as raw bytes; `tokens` is its length under the byte-level
/// tokenizer (BOS and a terminal EOS excluded).
struct Reply {
    bytes: Vec<u8>,
    tokens: usize,
}

impl Reply {
    fn from_tokens(generated: &TokenSeq) -> Self {
        let bytes = detokenize(&generated.ids);
        let tokens = bytes.len();
        Self { bytes, tokens }
    }

    fn from_text(text: &str) -> Self {
        Self {
            bytes: text.as_bytes().to_vec(),
            tokens: text.len(),
        }
    }

    /// Display form; invalid UTF-8 becomes U+FFFD.
    fn text(&self) -> String {
        String::from_utf8_lossy(&self.bytes).into_owned()
    }
}

/// Splices `{key}` placeholders of a static template with byte values.
/// Values are never rescanned, so model output cannot inject placeholders.
fn render(template: &str, pairs: &[(&str, &[u8])]) -> Vec<u8> {
    let mut out = Vec::with_capacity(template.len() + 64);
    let mut rest = template;
    while !rest.is_empty() {
        let mut earliest: Option<(usize, usize, &[u8])> = None;
        for (key, value) in pairs {
            let pat = alloc::format!("{{{key}}}");
            if let Some(pos) = rest.find(&pat) {
                if earliest.is_none_or(|(e, _, _)| pos < e) {
                    earliest = Some((pos, pat.len(), value));
                }
            }
        }
        match earliest {
            Some((pos, len, value)) => {
                out.extend_from_slice(&rest.as_bytes()[..pos]);
                out.extend_from_slice(value);
                rest = &rest[pos + len..];
            }
            None => {
                out.extend_from_slice(rest.as_bytes());
                break;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ProtocolKind {
    Silent,
    Skyline,
    Nl,
    Nld,
    Ac,
}

impl core::fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let s = match self {
            ProtocolKind::Silent => "silent",
            ProtocolKind::Skyline => "skyline",
            ProtocolKind::Nl => "nl",
            ProtocolKind::Nld => "nld",
            ProtocolKind::Ac => "ac",
        };
        write!(f, "{s}")
    }
}

/// Activation-communication variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum AcVariant {
    /// Graft the final-token activation of A's prompt.
    Base,
    /// A first writes out a chain-of-thought response; the graft source is
    /// the final token of prompt ∘ response.
    Cot,
    /// A is an instance of B's model; a completion is sampled with
    /// temperature and the graft source is its final token.
    #[cfg_attr(feature = "serde", serde(rename = "self"))]
    SelfSample,
}

impl core::fmt::Display for AcVariant {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let s = match self {
            AcVariant::Base => "base",
            AcVariant::Cot => "cot",
            AcVariant::SelfSample => "self",
        };
        write!(f, "{s}")
    }
}

/// One inter-agent message.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Message {
    pub author: String,
    pub text: String,
    pub tokens: usize,
}

/// Everything observable about one protocol execution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolRun {
    pub task_id: String,
    pub protocol: ProtocolKind,
    pub variant: Option<AcVariant>,
    pub prompt_a: String,
    pub prompt_b: String,
    pub graft_k: Option<usize>,
    pub graft_j: Option<usize>,
    pub combine_kind: Option<CombineKind>,
    /// B's final answer, rendered as text (invalid UTF-8 becomes U+FFFD).
    pub answer: String,
    /// Token count of the raw answer bytes; the `T` of the cost model.
    pub answer_tokens: usize,
    pub gold: String,
    pub transcript: Vec<Message>,
    pub cost: CostReport,
    pub seed: u64,
}

fn arch_of(model: &Model) -> ArchParams {
    let c = &model.config;
    ArchParams {
        n_layers: c.n_layers as u64,
        n_heads: c.n_heads as u64,
        key_size: c.key_size as u64,
        ffn_size: c.ffn_size as u64,
        model_dim: c.model_dim as u64,
        vocab_size: c.vocab_size as u64,
    }
}

/// Cost of a run under B's architecture. `P` is the larger of the two
/// prompts' token counts (BOS included).
#[allow(clippy::too_many_arguments)]
fn run_cost(
    agent_b: &Agent<'_>,
    task: &TaskInstance,
    message_toks: usize,
    output_toks: usize,
    graft_layer: usize,
    map_used: bool,
    d_a: usize,
    d_b: usize,
) -> CostReport {
    // scripted runs still get a cost model; use the toy architecture
    let arch = match agent_b {
        Agent::Model(m) => arch_of(m.model),
        Agent::Scripted(_) => crate::costmodel::preset("toy").expect("builtin preset"),
    };
    let p = (task.prompt_a.len().max(task.prompt_b.len()) + 1) as u64;
    let params = CostParams {
        prompt_tokens: p,
        message_tokens: message_toks as u64,
        output_tokens: output_toks as u64,
        graft_layer: graft_layer as u64,
        map_used,
        d_a: d_a as u64,
        d_b: d_b as u64,
        ..arch.with_tokens(p, 0, 0)
    };
    cost_report(&params, &arch)
}

/// B answers from its own prompt alone; the transcript stays empty.
pub fn run_silent(
    agent_b: &Agent<'_>,
    task: &TaskInstance,
    seed: u64,
) -> Result<ProtocolRun, ProtocolError> {
    let reply = agent_b.respond(task.prompt_b.as_bytes(), None, derive_seed(seed, 0))?;
    let (d_a, d_b) = agent_dims(agent_b, agent_b);
    let cost = run_cost(agent_b, task, 0, reply.tokens, 0, false, d_a, d_b);
    Ok(ProtocolRun {
        task_id: task.id.clone(),
        protocol: ProtocolKind::Silent,
        variant: None,
        prompt_a: task.prompt_a.clone(),
        prompt_b: task.prompt_b.clone(),
        graft_k: None,
        graft_j: None,
        combine_kind: None,
        answer: reply.text(),
        answer_tokens: reply.tokens,
        gold: task.gold.clone(),
        transcript: Vec::new(),
        cost,
        seed,
    })
}

/// A single model answers from the concatenation of both prompts (the
/// upper-bound baseline). An empty `prompt_a` degenerates to the silent
/// prompt with no separator.
pub fn run_skyline(
    agent: &Agent<'_>,
    task: &TaskInstance,
    seed: u64,
) -> Result<ProtocolRun, ProtocolError> {
    let mut visible = Vec::new();
    if !task.prompt_a.is_empty() {
        visible.extend_from_slice(task.prompt_a.as_bytes());
        visible.extend_from_slice(templates::SKYLINE_SEPARATOR.as_bytes());
    }
    visible.extend_from_slice(task.prompt_b.as_bytes());
    let reply = agent.respond(&visible, None, derive_seed(seed, 0))?;
    let (d_a, d_b) = agent_dims(agent, agent);
    let cost = run_cost(agent, task, 0, reply.tokens, 0, false, d_a, d_b);
    Ok(ProtocolRun {
        task_id: task.id.clone(),
        protocol: ProtocolKind::Skyline,
        variant: None,
        prompt_a: task.prompt_a.clone(),
        prompt_b: task.prompt_b.clone(),
        graft_k: None,
        graft_j: None,
        combine_kind: None,
        answer: reply.text(),
        answer_tokens: reply.tokens,
        gold: task.gold.clone(),
        transcript: Vec::new(),
        cost,
        seed,
    })
}

/// A writes one message (at most `message_budget` tokens) from a
/// message-eliciting template over its prompt; B answers from
/// `prompt_b ∘ message`. A zero budget sends nothing and degenerates to the
/// silent setup.
pub fn run_nl(
    agent_a: &Agent<'_>,
    agent_b: &Agent<'_>,
    task: &TaskInstance,
    message_budget: usize,
    seed: u64,
) -> Result<ProtocolRun, ProtocolError> {
    let mut transcript = Vec::new();
    let mut b_visible = task.prompt_b.as_bytes().to_vec();
    let mut message_toks = 0usize;
    let mut calls = 0u64;

    if message_budget > 0 {
        let a_visible = render(
            templates::NL_MESSAGE,
            &[("prompt", task.prompt_a.as_bytes())],
        );
        let msg = agent_a.respond(&a_visible, Some(message_budget), derive_seed(seed, calls))?;
        calls += 1;
        message_toks = msg.tokens;
        b_visible.push(b'\n');
        b_visible.extend_from_slice(&msg.bytes);
        transcript.push(Message {
            author: agent_a.role().to_owned(),
            text: msg.text(),
            tokens: message_toks,
        });
    }

    let reply = agent_b.respond(&b_visible, None, derive_seed(seed, calls))?;
    let (d_a, d_b) = agent_dims(agent_a, agent_b);
    let cost = run_cost(
        agent_b,
        task,
        message_toks,
        reply.tokens,
        0,
        false,
        d_a,
        d_b,
    );
    Ok(ProtocolRun {
        task_id: task.id.clone(),
        protocol: ProtocolKind::Nl,
        variant: None,
        prompt_a: task.prompt_a.clone(),
        prompt_b: task.prompt_b.clone(),
        graft_k: None,
        graft_j: None,
        combine_kind: None,
        answer: reply.text(),
        answer_tokens: reply.tokens,
        gold: task.gold.clone(),
        transcript,
        cost,
        seed,
    })
}

/// Natural-language debate: each agent answers its prompt, then for each of
/// the remaining `rounds - 1` rounds refines given its own and all peers'
/// previous answers. The first agent reads `prompt_a`, all others read
/// `prompt_b`. The final answer is the majority over final-round answers;
/// ties go to the latest-listed tied agent (agent B in a two-agent run).
pub fn run_nld(
    agents: &[Agent<'_>],
    task: &TaskInstance,
    rounds: usize,
    seed: u64,
) -> Result<ProtocolRun, ProtocolError> {
    if rounds == 0 {
        return Err(ProtocolError::InvalidRounds);
    }
    if agents.len() < 2 {
        return Err(ProtocolError::InvalidAgents(
            "debate needs at least two agents",
        ));
    }
    if agents.iter().filter(|a| a.is_model()).count() > 2 {
        return Err(ProtocolError::InvalidAgents(
            "at most two live model agents per debate",
        ));
    }

    let prompt_of = |i: usize| {
        if i == 0 {
            task.prompt_a.as_bytes()
        } else {
            task.prompt_b.as_bytes()
        }
    };
    let mut transcript = Vec::new();
    let mut calls = 0u64;
    let mut current: Vec<Reply> = Vec::with_capacity(agents.len());

    for (i, agent) in agents.iter().enumerate() {
        let reply = agent.respond(prompt_of(i), None, derive_seed(seed, calls))?;
        calls += 1;
        transcript.push(Message {
            author: agent.role().to_owned(),
            text: reply.text(),
            tokens: reply.tokens,
        });
        current.push(reply);
    }

    for _ in 1..rounds {
        let previous: Vec<Vec<u8>> = current.iter().map(|r| r.bytes.clone()).collect();
        for (i, agent) in agents.iter().enumerate() {
            let mut peers = Vec::new();
            for (p, ans) in previous.iter().enumerate() {
                if p != i {
                    if !peers.is_empty() {
                        peers.extend_from_slice(b"; ");
                    }
                    peers.extend_from_slice(ans);
                }
            }
            let visible = render(
                templates::NLD_REFINE,
                &[
                    ("prompt", prompt_of(i)),
                    ("own", &previous[i]),
                    ("peers", &peers),
                ],
            );
            let reply = agent.respond(&visible, None, derive_seed(seed, calls))?;
            calls += 1;
            transcript.push(Message {
                author: agent.role().to_owned(),
                text: reply.text(),
                tokens: reply.tokens,
            });
            current[i] = reply;
        }
    }

    // majority over final-round answers, ties to the latest tied agent
    let count_of = |ans: &[u8]| current.iter().filter(|c| c.bytes == ans).count();
    let mut winner = current.len() - 1;
    let mut best = count_of(&current[winner].bytes);
    for (i, reply) in current.iter().enumerate() {
        let c = count_of(&reply.bytes);
        if c > best {
            winner = i;
            best = c;
        }
    }
    let answer = &current[winner];

    // tokens the final agent received from its peers over rounds 1..r-1
    let b_idx = agents.len() - 1;
    let peer_tokens: usize = transcript
        .iter()
        .take(agents.len() * (rounds - 1))
        .enumerate()
        .filter(|(idx, _)| idx % agents.len() != b_idx)
        .map(|(_, m)| m.tokens)
        .sum();
    let t_tokens = current[b_idx].tokens;

    let agent_b = &agents[b_idx];
    let (d_a, d_b) = agent_dims(&agents[0], agent_b);
    let cost = run_cost(agent_b, task, peer_tokens, t_tokens, 0, false, d_a, d_b);
    Ok(ProtocolRun {
        task_id: task.id.clone(),
        protocol: ProtocolKind::Nld,
        variant: None,
        prompt_a: task.prompt_a.clone(),
        prompt_b: task.prompt_b.clone(),
        graft_k: None,
        graft_j: None,
        combine_kind: None,
        answer: answer.text(),
        answer_tokens: answer.tokens,
        gold: task.gold.clone(),
        transcript,
        cost,
        seed,
    })
}

fn agent_dims(agent_a: &Agent<'_>, agent_b: &Agent<'_>) -> (usize, usize) {
    let dim = |a: &Agent<'_>| match a {
        Agent::Model(m) => m.model.dim(),
        Agent::Scripted(_) => 0,
    };
    (dim(agent_a), dim(agent_b))
}

/// Activation communication: A's residual activation at layer k is combined
/// into B's layer-j stream while B decodes its answer. No natural-language
/// message is exchanged.
///
/// Variants: `Base` grafts the final token of A's prompt; `Cot` first has A
/// decode a chain-of-thought response and grafts the final token of
/// prompt ∘ response; `SelfSample` does the same from a temperature-sampled
/// completion (A being an instance of B's model).
///
/// A scripted B answers from its own prompt and the graft is a no-op (it
/// has no activations to edit).
pub fn run_ac(
    agent_a: &Agent<'_>,
    agent_b: &Agent<'_>,
    task: &TaskInstance,
    graft: &GraftConfig,
    variant: AcVariant,
    seed: u64,
) -> Result<ProtocolRun, ProtocolError> {
    let spec = &graft.combine;
    let mut calls = 0u64;

    let make_run = |reply: &Reply| {
        let map_used = spec.pre_map.is_some();
        let (d_a, d_b) = agent_dims(agent_a, agent_b);
        let cost = run_cost(
            agent_b,
            task,
            0,
            reply.tokens,
            graft.source_layer,
            map_used,
            d_a,
            d_b,
        );
        ProtocolRun {
            task_id: task.id.clone(),
            protocol: ProtocolKind::Ac,
            variant: Some(variant),
            prompt_a: task.prompt_a.clone(),
            prompt_b: task.prompt_b.clone(),
            graft_k: Some(graft.source_layer),
            graft_j: Some(graft.target_layer),
            combine_kind: Some(spec.kind),
            answer: reply.text(),
            answer_tokens: reply.tokens,
            gold: task.gold.clone(),
            transcript: Vec::new(),
            cost,
            seed,
        }
    };

    let model_b = match agent_b {
        Agent::Scripted(s) => {
            // grafting does not affect a lookup table
            let reply = Reply::from_text(s.lookup(task.prompt_b.as_bytes()));
            return Ok(make_run(&reply));
        }
        Agent::Model(m) => m,
    };
    let model_a = match agent_a {
        Agent::Model(m) => m,
        Agent::Scripted(_) => {
            return Err(ProtocolError::InvalidAgents(
                "activation communication needs a live model as agent A",
            ))
        }
    };

    let depth_a = model_a.model.depth();
    if graft.source_layer > depth_a {
        return Err(ProtocolError::LayerOutOfRange {
            which: "source",
            layer: graft.source_layer,
            depth: depth_a,
        });
    }
    let depth_b = model_b.model.depth();
    if graft.target_layer > depth_b {
        return Err(ProtocolError::LayerOutOfRange {
            which: "target",
            layer: graft.target_layer,
            depth: depth_b,
        });
    }
    if let Some(map) = &spec.pre_map {
        if map.rows() != model_b.model.dim() || map.cols() != model_a.model.dim() {
            return Err(ProtocolError::MapModelMismatch {
                rows: map.rows(),
                cols: map.cols(),
                d_b: model_b.model.dim(),
                d_a: model_a.model.dim(),
            });
        }
    }

    // graft source sequence: the prompt, optionally extended by A's own output
    let mut source_bytes = task.prompt_a.as_bytes().to_vec();
    match variant {
        AcVariant::Base => {}
        AcVariant::Cot => {
            let visible = render(templates::COT, &[("prompt", task.prompt_a.as_bytes())]);
            let reply = agent_a.respond(&visible, None, derive_seed(seed, calls))?;
            calls += 1;
            source_bytes.extend_from_slice(&reply.bytes);
        }
        AcVariant::SelfSample => {
            let reply =
                agent_a.respond(task.prompt_a.as_bytes(), None, derive_seed(seed, calls))?;
            calls += 1;
            source_bytes.extend_from_slice(&reply.bytes);
        }
    }
    let source_tokens = tokenize_bytes(&source_bytes, model_a.model.config.max_seq_len)?;
    let h_a = forward_until(model_a.model, &source_tokens, graft.source_layer)?;
    if !h_a.values.is_finite() {
        return Err(ProtocolError::Graft(GraftError::NonFinite(
            "source activation",
        )));
    }

    let graft_failure: Cell<Option<GraftError>> = Cell::new(None);
    let edit = |data: &mut [f32], rows: usize, cols: usize| {
        if let Err(e) = graft_rows(data, rows, cols, &h_a, spec) {
            graft_failure.set(Some(e));
        }
    };
    let hook = GraftHook {
        layer: graft.target_layer,
        edit: &edit,
    };

    let prompt_b = model_b.model.tokenize(&task.prompt_b)?;
    let cfg = DecodingConfig {
        strategy: model_b.decoding.strategy,
        max_new_tokens: model_b.decoding.max_new_tokens,
        seed: derive_seed(seed, calls),
    };
    let generated = decode(model_b.model, &prompt_b, &cfg, Some(&hook))?;
    if let Some(e) = graft_failure.take() {
        return Err(e.into());
    }
    let reply = Reply::from_tokens(&generated);
    Ok(make_run(&reply))
}

/// Accuracy over `tasks` for every (k, j) grid cell, with per-task seeds
/// held fixed across cells. `strict` disables answer normalization.
#[allow(clippy::too_many_arguments)]
pub fn sweep_layers(
    agent_a: &Agent<'_>,
    agent_b: &Agent<'_>,
    tasks: &[TaskInstance],
    k_range: &[usize],
    j_range: &[usize],
    spec: &CombineSpec,
    seed: u64,
    strict: bool,
) -> Result<Vec<Vec<f64>>, ProtocolError> {
    if k_range.is_empty() {
        return Err(ProtocolError::EmptyRange("k"));
    }
    if j_range.is_empty() {
        return Err(ProtocolError::EmptyRange("j"));
    }
    let mut matrix = Vec::with_capacity(k_range.len());
    for &k in k_range {
        let mut row = Vec::with_capacity(j_range.len());
        for &j in j_range {
            let graft = GraftConfig {
                source_layer: k,
                target_layer: j,
                combine: spec.clone(),
            };
            let mut correct = 0usize;
            for (idx, task) in tasks.iter().enumerate() {
                let run = run_ac(
                    agent_a,
                    agent_b,
                    task,
                    &graft,
                    AcVariant::Base,
                    derive_seed(seed, idx as u64),
                )?;
                correct += crate::tasks::score_with(&run.answer, &run.gold, strict) as usize;
            }
            row.push(correct as f64 / tasks.len().max(1) as f64);
        }
        matrix.push(row);
    }
    Ok(matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{flops_ac, flops_nl};
    use crate::engine::{DecodeStrategy, ModelConfig};
    use crate::grafting::GraftScope;
    use crate::tasks::{gen_countries, score_exact, Game};

    fn scripted_pair(tasks: &[TaskInstance]) -> (ScriptedAgent, ScriptedAgent) {
        let mut a_rules = Vec::new();
        let mut b_rules = Vec::new();
        for t in tasks {
            a_rules.push(ScriptRule {
                pattern: t.prompt_a.clone(),
                answer: t.prompt_a.clone(),
            });
            b_rules.push(ScriptRule {
                pattern: t.prompt_a.clone(),
                answer: t.gold.clone(),
            });
        }
        (
            ScriptedAgent::new(a_rules, "I do not know", "A"),
            ScriptedAgent::new(b_rules, "I do not know", "B"),
        )
    }

    fn model_agent(model: &Model, max_new: usize) -> Agent<'_> {
        Agent::Model(ModelAgent {
            model,
            decoding: DecodingConfig::greedy(max_new),
            role: "B".into(),
        })
    }

    #[test]
    fn scripted_routing_silent_skyline_nl() {
        let tasks = gen_countries(20, 5);
        let (a, b) = scripted_pair(&tasks);
        let (a, b) = (Agent::Scripted(a), Agent::Scripted(b));
        for (i, task) in tasks.iter().enumerate() {
            let seed = i as u64;
            let silent = run_silent(&b, task, seed).unwrap();
            assert_eq!(score_exact(&silent.answer, &task.gold), 0);
            assert!(silent.transcript.is_empty());

            let skyline = run_skyline(&b, task, seed).unwrap();
            assert_eq!(score_exact(&skyline.answer, &task.gold), 1);

            let nl = run_nl(&a, &b, task, 64, seed).unwrap();
            assert_eq!(score_exact(&nl.answer, &task.gold), 1);
            assert_eq!(nl.transcript.len(), 1);
            assert_eq!(nl.transcript[0].author, "A");
        }
    }

    #[test]
    fn nl_zero_budget_degenerates_to_silent() {
        let tasks = gen_countries(5, 6);
        let (a, b) = scripted_pair(&tasks);
        let (a, b) = (Agent::Scripted(a), Agent::Scripted(b));
        for task in &tasks {
            let nl = run_nl(&a, &b, task, 0, 1).unwrap();
            let silent = run_silent(&b, task, 1).unwrap();
            assert_eq!(nl.answer, silent.answer);
            assert!(nl.transcript.is_empty());
        }
    }

    #[test]
    fn skyline_with_empty_prompt_a_equals_silent() {
        let model = Model::random(ModelConfig::toy(), 2).unwrap();
        let agent = model_agent(&model, 8);
        let task = TaskInstance {
            id: "t".into(),
            game: Game::Countries,
            prompt_a: String::new(),
            prompt_b: "Which country is Alice located in?".into(),
            gold: "Greece".into(),
        };
        let skyline = run_skyline(&agent, &task, 3).unwrap();
        let silent = run_silent(&agent, &task, 3).unwrap();
        assert_eq!(skyline.answer, silent.answer);
    }

    #[test]
    fn skyline_includes_separator_once() {
        let tasks = gen_countries(1, 9);
        let task = &tasks[0];
        let expected = alloc::format!(
            "{}{}{}",
            task.prompt_a,
            templates::SKYLINE_SEPARATOR,
            task.prompt_b
        );
        // scripted agent keyed on the exact concatenation
        let agent = Agent::Scripted(ScriptedAgent::new(
            alloc::vec![ScriptRule {
                pattern: expected,
                answer: "seen".into()
            }],
            "missing",
            "B",
        ));
        let run = run_skyline(&agent, task, 0).unwrap();
        assert_eq!(run.answer, "seen");
    }

    #[test]
    fn nld_round_structure_and_majority() {
        let tasks = gen_countries(3, 8);
        let task = &tasks[0];
        let unanimous = [
            Agent::Scripted(ScriptedAgent::new(Vec::new(), "Greece", "A")),
            Agent::Scripted(ScriptedAgent::new(Vec::new(), "Greece", "B")),
        ];
        let run = run_nld(&unanimous, task, 1, 0).unwrap();
        assert_eq!(run.answer, "Greece");
        assert_eq!(run.transcript.len(), 2);

        let run = run_nld(&unanimous, task, 2, 0).unwrap();
        assert_eq!(run.transcript.len(), 4);

        // disagreement: tie goes to the last-listed agent (B)
        let split = [
            Agent::Scripted(ScriptedAgent::new(Vec::new(), "France", "A")),
            Agent::Scripted(ScriptedAgent::new(Vec::new(), "Greece", "B")),
        ];
        let run = run_nld(&split, task, 2, 0).unwrap();
        assert_eq!(run.answer, "Greece");

        // a real majority beats the tie rule
        let majority = [
            Agent::Scripted(ScriptedAgent::new(Vec::new(), "France", "A1")),
            Agent::Scripted(ScriptedAgent::new(Vec::new(), "France", "A2")),
            Agent::Scripted(ScriptedAgent::new(Vec::new(), "Greece", "B")),
        ];
        let run = run_nld(&majority, task, 1, 0).unwrap();
        assert_eq!(run.answer, "France");
    }

    #[test]
    fn nld_rejects_bad_setups() {
        let tasks = gen_countries(1, 8);
        let solo = [Agent::Scripted(ScriptedAgent::new(Vec::new(), "x", "A"))];
        assert!(matches!(
            run_nld(&solo, &tasks[0], 2, 0),
            Err(ProtocolError::InvalidAgents(_))
        ));
        let pair = [
            Agent::Scripted(ScriptedAgent::new(Vec::new(), "x", "A")),
            Agent::Scripted(ScriptedAgent::new(Vec::new(), "y", "B")),
        ];
        assert!(matches!(
            run_nld(&pair, &tasks[0], 0, 0),
            Err(ProtocolError::InvalidRounds)
        ));
    }

    #[test]
    fn transcript_conservation_with_scripted_agents() {
        let tasks = gen_countries(2, 11);
        let task = &tasks[0];
        let agents = [
            Agent::Scripted(ScriptedAgent::new(Vec::new(), "alpha", "A")),
            Agent::Scripted(ScriptedAgent::new(Vec::new(), "bravo", "B")),
        ];
        let rounds = 3;
        let run = run_nld(&agents, task, rounds, 0).unwrap();
        assert_eq!(run.transcript.len(), 2 * rounds);
        for (i, m) in run.transcript.iter().enumerate() {
            let expected = if i % 2 == 0 {
                ("A", "alpha")
            } else {
                ("B", "bravo")
            };
            assert_eq!((m.author.as_str(), m.text.as_str()), expected);
            assert_eq!(m.tokens, m.text.len());
        }
    }

    #[test]
    fn ac_noop_identity_with_identical_models() {
        let model = Model::random(ModelConfig::toy(), 21).unwrap();
        let tasks = gen_countries(4, 2);
        for strategy in [DecodeStrategy::Greedy, DecodeStrategy::Nucleus { p: 0.9 }] {
            for (idx, base_task) in tasks.iter().enumerate() {
                // identical prompts on both sides
                let mut task = base_task.clone();
                task.prompt_a = task.prompt_b.clone();
                let decoding = DecodingConfig {
                    strategy,
                    max_new_tokens: 8,
                    seed: 0,
                };
                let a = Agent::Model(ModelAgent {
                    model: &model,
                    decoding,
                    role: "A".into(),
                });
                let b = Agent::Model(ModelAgent {
                    model: &model,
                    decoding,
                    role: "B".into(),
                });
                for layer in [0, 2, model.depth()] {
                    let graft = GraftConfig {
                        source_layer: layer,
                        target_layer: layer,
                        combine: CombineSpec::new(CombineKind::Replace, GraftScope::LastToken)
                            .unwrap(),
                    };
                    let seed = idx as u64;
                    let ac = run_ac(&a, &b, &task, &graft, AcVariant::Base, seed).unwrap();
                    let silent = run_silent(&b, &task, seed).unwrap();
                    assert_eq!(ac.answer, silent.answer);
                    assert!(ac.transcript.is_empty());
                }
            }
        }
    }

    #[test]
    fn ac_cost_accounting_matches_formulas() {
        let model_a = Model::random(ModelConfig::toy(), 31).unwrap();
        let model_b = Model::random(ModelConfig::toy(), 32).unwrap();
        let task = &gen_countries(1, 3)[0];
        let a = Agent::Model(ModelAgent {
            model: &model_a,
            decoding: DecodingConfig::greedy(6),
            role: "A".into(),
        });
        let b = Agent::Model(ModelAgent {
            model: &model_b,
            decoding: DecodingConfig::greedy(6),
            role: "B".into(),
        });
        let graft = GraftConfig {
            source_layer: 3,
            target_layer: 2,
            combine: CombineSpec::new(CombineKind::Sum, GraftScope::LastToken).unwrap(),
        };
        let run = run_ac(&a, &b, task, &graft, AcVariant::Base, 5).unwrap();
        let arch = arch_of(&model_b);
        let p = (task.prompt_a.len().max(task.prompt_b.len()) + 1) as u64;
        let mut params = arch.with_tokens(p, 0, run.answer_tokens as u64);
        params.graft_layer = 3;
        assert_eq!(run.cost.ac_flops, flops_ac(&params));
        assert_eq!(run.graft_k, Some(3));
        assert_eq!(run.graft_j, Some(2));
    }

    #[test]
    fn nl_cost_accounting_matches_formula() {
        let model_a = Model::random(ModelConfig::toy(), 41).unwrap();
        let model_b = Model::random(ModelConfig::toy(), 42).unwrap();
        let task = &gen_countries(1, 4)[0];
        let a = Agent::Model(ModelAgent {
            model: &model_a,
            decoding: DecodingConfig::greedy(6),
            role: "A".into(),
        });
        let b = Agent::Model(ModelAgent {
            model: &model_b,
            decoding: DecodingConfig::greedy(6),
            role: "B".into(),
        });
        let run = run_nl(&a, &b, task, 5, 9).unwrap();
        let message_toks = run.transcript[0].tokens as u64;
        assert!(message_toks <= 5);
        let arch = arch_of(&model_b);
        let p = (task.prompt_a.len().max(task.prompt_b.len()) + 1) as u64;
        let params = arch.with_tokens(p, message_toks, run.answer_tokens as u64);
        assert_eq!(run.cost.nl_flops, flops_nl(&params));
    }

    #[test]
    fn ac_rejects_invalid_layers_and_scripted_a() {
        let model = Model::random(ModelConfig::toy(), 1).unwrap();
        let task = &gen_countries(1, 1)[0];
        let b = model_agent(&model, 4);
        let scripted = Agent::Scripted(ScriptedAgent::new(Vec::new(), "x", "A"));
        let graft = GraftConfig {
            source_layer: 0,
            target_layer: 0,
            combine: CombineSpec::new(CombineKind::Replace, GraftScope::LastToken).unwrap(),
        };
        assert!(matches!(
            run_ac(&scripted, &b, task, &graft, AcVariant::Base, 0),
            Err(ProtocolError::InvalidAgents(_))
        ));

        let a = model_agent(&model, 4);
        let bad = GraftConfig {
            source_layer: 99,
            ..graft.clone()
        };
        assert!(matches!(
            run_ac(&a, &b, task, &bad, AcVariant::Base, 0),
            Err(ProtocolError::LayerOutOfRange {
                which: "source",
                ..
            })
        ));
        let bad = GraftConfig {
            target_layer: 99,
            ..graft
        };
        assert!(matches!(
            run_ac(&a, &b, task, &bad, AcVariant::Base, 0),
            Err(ProtocolError::LayerOutOfRange {
                which: "target",
                ..
            })
        ));
    }

    #[test]
    fn ac_map_shape_validated_against_model_pair() {
        let model = Model::random(ModelConfig::toy(), 1).unwrap();
        let task = &gen_countries(1, 1)[0];
        let a = model_agent(&model, 4);
        let b = model_agent(&model, 4);
        let map = crate::mapper::MapMatrix::from_vec(2, 2, alloc::vec![1.0, 0.0, 0.0, 1.0]);
        let graft = GraftConfig {
            source_layer: 1,
            target_layer: 1,
            combine: CombineSpec::with_map(CombineKind::Replace, GraftScope::LastToken, Some(map))
                .unwrap(),
        };
        assert!(matches!(
            run_ac(&a, &b, task, &graft, AcVariant::Base, 0),
            Err(ProtocolError::MapModelMismatch { .. })
        ));
    }

    #[test]
    fn ac_variants_are_deterministic() {
        let model = Model::random(ModelConfig::toy(), 55).unwrap();
        let task = &gen_countries(1, 6)[0];
        let decoding = DecodingConfig {
            strategy: DecodeStrategy::Temperature { temperature: 0.7 },
            max_new_tokens: 12,
            seed: 0,
        };
        let a = Agent::Model(ModelAgent {
            model: &model,
            decoding,
            role: "A".into(),
        });
        let b = Agent::Model(ModelAgent {
            model: &model,
            decoding,
            role: "B".into(),
        });
        let graft = GraftConfig {
            source_layer: 2,
            target_layer: 2,
            combine: CombineSpec::new(CombineKind::Replace, GraftScope::LastToken).unwrap(),
        };
        for variant in [AcVariant::Base, AcVariant::Cot, AcVariant::SelfSample] {
            let r1 = run_ac(&a, &b, task, &graft, variant, 77).unwrap();
            let r2 = run_ac(&a, &b, task, &graft, variant, 77).unwrap();
            assert_eq!(r1, r2);
        }
    }

    #[test]
    fn self_variant_at_published_settings() {
        // temperature 0.7, 512-token completion budget
        let mut config = ModelConfig::toy();
        config.max_seq_len = 1024;
        let model = Model::random(config, 90).unwrap();
        let task = &gen_countries(1, 15)[0];
        let decoding = DecodingConfig {
            strategy: DecodeStrategy::Temperature { temperature: 0.7 },
            max_new_tokens: 512,
            seed: 0,
        };
        let a = Agent::Model(ModelAgent {
            model: &model,
            decoding,
            role: "A".into(),
        });
        let b = Agent::Model(ModelAgent {
            model: &model,
            decoding,
            role: "B".into(),
        });
        let graft = GraftConfig {
            source_layer: 2,
            target_layer: 2,
            combine: CombineSpec::new(CombineKind::Replace, GraftScope::LastToken).unwrap(),
        };
        let r1 = run_ac(&a, &b, task, &graft, AcVariant::SelfSample, 33).unwrap();
        let r2 = run_ac(&a, &b, task, &graft, AcVariant::SelfSample, 33).unwrap();
        assert_eq!(r1, r2);
        let r3 = run_ac(&a, &b, task, &graft, AcVariant::SelfSample, 34).unwrap();
        assert_ne!(r1.answer, r3.answer);
    }

    #[test]
    fn sweep_shapes_and_scripted_constancy() {
        let tasks = gen_countries(6, 12);
        let (a, b) = scripted_pair(&tasks);
        let (a, b) = (Agent::Scripted(a), Agent::Scripted(b));
        let spec = CombineSpec::new(CombineKind::Replace, GraftScope::LastToken).unwrap();
        let matrix = sweep_layers(&a, &b, &tasks, &[0, 1, 2], &[1, 3], &spec, 4, false).unwrap();
        assert_eq!(matrix.len(), 3);
        assert!(matrix.iter().all(|row| row.len() == 2));
        let first = matrix[0][0];
        assert!(matrix.iter().flatten().all(|&v| v == first));

        assert!(matches!(
            sweep_layers(&a, &b, &tasks, &[], &[1], &spec, 4, false),
            Err(ProtocolError::EmptyRange("k"))
        ));
    }

    #[test]
    fn sweep_single_cell_matches_direct_run() {
        let model_a = Model::random(ModelConfig::toy(), 71).unwrap();
        let model_b = Model::random(ModelConfig::toy(), 72).unwrap();
        let tasks = gen_countries(3, 13);
        let a = Agent::Model(ModelAgent {
            model: &model_a,
            decoding: DecodingConfig::greedy(4),
            role: "A".into(),
        });
        let b = Agent::Model(ModelAgent {
            model: &model_b,
            decoding: DecodingConfig::greedy(4),
            role: "B".into(),
        });
        let spec = CombineSpec::new(CombineKind::Sum, GraftScope::LastToken).unwrap();
        let seed = 31;
        let matrix = sweep_layers(&a, &b, &tasks, &[2], &[3], &spec, seed, false).unwrap();

        let graft = GraftConfig {
            source_layer: 2,
            target_layer: 3,
            combine: spec,
        };
        let mut correct = 0;
        for (idx, task) in tasks.iter().enumerate() {
            let run = run_ac(
                &a,
                &b,
                task,
                &graft,
                AcVariant::Base,
                derive_seed(seed, idx as u64),
            )
            .unwrap();
            correct += score_exact(&run.answer, &run.gold);
        }
        assert_eq!(matrix[0][0], correct as f64 / tasks.len() as f64);
    }

    #[test]
    fn protocol_runs_deterministic_across_invocations() {
        let model = Model::random(ModelConfig::toy(), 81).unwrap();
        let task = &gen_countries(1, 14)[0];
        let decoding = DecodingConfig {
            strategy: DecodeStrategy::Nucleus { p: 0.9 },
            max_new_tokens: 10,
            seed: 0,
        };
        let b = Agent::Model(ModelAgent {
            model: &model,
            decoding,
            role: "B".into(),
        });
        assert_eq!(
            run_silent(&b, task, 9).unwrap(),
            run_silent(&b, task, 9).unwrap()
        );
        assert_ne!(
            run_silent(&b, task, 9).unwrap().answer,
            run_silent(&b, task, 10).unwrap().answer
        );
    }
}

//! Draft, Debug and Improve operators: prompt assembly, one completion,
//! and parsing of the reply into a new solution node.
//!
//! Draft prompts carry the three diversity mechanisms (sibling memory,
//! complexity cue, diversity instruction); the wording lives in a
//! versioned template file.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, CompletionRequest, RequestLog, RequestLogEntry};
use crate::diversity::{extract_labels, ArchTaxonomy, UNKNOWN_FAMILY};
use crate::model::{
    DiversityMode, ExecStatus, ExecutionOutcome, NodeId, Operator, SolutionNode, TaskSpec,
    MAX_DRAFTS,
};

const BUILTIN_TEMPLATES: &str = include_str!("../data/prompts_v1.toml");

/// Characters of execution log shown to Debug.
pub const DEBUG_LOG_CHARS: usize = 4_000;
pub const SUMMARY_MAX_CHARS: usize = 1_000;

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("draft index {0} outside 1..=5")]
    OutOfRange(u8),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("prompt templates: {0}")]
    Template(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityInstruction {
    EncourageDifferent,
    RequestSimilar,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiversityConfig {
    pub sibling_memory: bool,
    pub adaptive_complexity: bool,
    pub diversity_instruction: DiversityInstruction,
}

impl DiversityConfig {
    pub const BASELINE: DiversityConfig = DiversityConfig {
        sibling_memory: true,
        adaptive_complexity: true,
        diversity_instruction: DiversityInstruction::EncourageDifferent,
    };

    pub const ABLATED: DiversityConfig = DiversityConfig {
        sibling_memory: true,
        adaptive_complexity: false,
        diversity_instruction: DiversityInstruction::RequestSimilar,
    };

    pub fn for_mode(mode: DiversityMode) -> Self {
        match mode {
            DiversityMode::Baseline => Self::BASELINE,
            DiversityMode::Ablated => Self::ABLATED,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComplexityCue {
    Minimal,
    Moderate,
    Advanced,
}

/// Complexity requested from the `draft_index`-th initial idea.
pub fn complexity_cue(draft_index: u8) -> Result<ComplexityCue, OperatorError> {
    match draft_index {
        1 => Ok(ComplexityCue::Minimal),
        2 | 3 => Ok(ComplexityCue::Moderate),
        4 | 5 => Ok(ComplexityCue::Advanced),
        i => Err(OperatorError::OutOfRange(i)),
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Clauses {
    pub complexity_minimal: String,
    pub complexity_moderate: String,
    pub complexity_advanced: String,
    pub encourage_different: String,
    pub request_similar: String,
    pub siblings_header: String,
    pub sibling_block: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PromptPair {
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PromptTemplates {
    pub version: u32,
    pub clauses: Clauses,
    pub draft: PromptPair,
    pub debug: PromptPair,
    pub improve: PromptPair,
}

const PLACEHOLDERS: &[&str] = &[
    "task_description",
    "complexity_cue",
    "diversity_clause",
    "sibling_blocks",
    "target_plan",
    "target_code",
    "target_score",
    "exec_log",
    "draft_index",
];

impl PromptTemplates {
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN_TEMPLATES).expect("builtin templates are valid")
    }

    pub fn load(path: &Path) -> Result<Self, OperatorError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| OperatorError::Template(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, OperatorError> {
        let t: PromptTemplates =
            toml::from_str(text).map_err(|e| OperatorError::Template(e.to_string()))?;
        for (name, body) in [
            ("draft.system", &t.draft.system),
            ("draft.user", &t.draft.user),
            ("debug.system", &t.debug.system),
            ("debug.user", &t.debug.user),
            ("improve.system", &t.improve.system),
            ("improve.user", &t.improve.user),
        ] {
            for p in placeholders_in(body) {
                if !PLACEHOLDERS.contains(&p) {
                    return Err(OperatorError::Template(format!(
                        "{name}: unknown placeholder {{{p}}}"
                    )));
                }
            }
        }
        if !t.draft.user.contains("{task_description}") {
            return Err(OperatorError::Template(
                "draft.user must include {task_description}".into(),
            ));
        }
        Ok(t)
    }

    fn cue_text(&self, cue: ComplexityCue) -> &str {
        match cue {
            ComplexityCue::Minimal => &self.clauses.complexity_minimal,
            ComplexityCue::Moderate => &self.clauses.complexity_moderate,
            ComplexityCue::Advanced => &self.clauses.complexity_advanced,
        }
    }

    fn instruction_text(&self, instruction: DiversityInstruction) -> Option<&str> {
        match instruction {
            DiversityInstruction::EncourageDifferent => Some(&self.clauses.encourage_different),
            DiversityInstruction::RequestSimilar => Some(&self.clauses.request_similar),
            DiversityInstruction::None => None,
        }
    }
}

fn placeholders_in(template: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_ident(&after[..close]) => {
                out.push(&after[..close]);
                rest = &after[close + 1..];
            }
            _ => rest = after,
        }
    }
    out
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

/// Single-pass substitution: values are never re-scanned, so braces in
/// task descriptions or code survive untouched.
pub fn render(template: &str, values: &BTreeMap<&str, String>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_ident(&after[..close]) && values.contains_key(&after[..close]) => {
                out.push_str(&values[&after[..close]]);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out.trim_end().to_string()
}

fn paragraph(text: &str) -> String {
    format!("{text}\n\n")
}

/// Inputs of one operator call.
#[derive(Debug, Clone)]
pub struct OperatorContext<'a> {
    pub task: &'a TaskSpec,
    pub target: Option<&'a SolutionNode>,
    sibling_summaries: Vec<String>,
    pub draft_index: u8,
    pub diversity: DiversityConfig,
}

impl<'a> OperatorContext<'a> {
    /// Sibling summaries are dropped unless sibling memory is on.
    pub fn for_draft(
        task: &'a TaskSpec,
        draft_index: u8,
        diversity: DiversityConfig,
        sibling_summaries: &[String],
    ) -> Self {
        Self {
            task,
            target: None,
            sibling_summaries: if diversity.sibling_memory {
                sibling_summaries.to_vec()
            } else {
                Vec::new()
            },
            draft_index,
            diversity,
        }
    }

    pub fn for_target(task: &'a TaskSpec, target: &'a SolutionNode, diversity: DiversityConfig) -> Self {
        Self {
            task,
            target: Some(target),
            sibling_summaries: Vec::new(),
            draft_index: target.draft_index.unwrap_or(1),
            diversity,
        }
    }

    pub fn sibling_summaries(&self) -> &[String] {
        &self.sibling_summaries
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

fn base_values(task: &TaskSpec) -> BTreeMap<&'static str, String> {
    let mut v = BTreeMap::new();
    v.insert("task_description", task.description.clone());
    v
}

pub fn build_draft_prompt(
    ctx: &OperatorContext<'_>,
    templates: &PromptTemplates,
) -> Result<Prompt, OperatorError> {
    if ctx.target.is_some() {
        return Err(OperatorError::Precondition("draft takes no target".into()));
    }
    let cue = complexity_cue(ctx.draft_index)?;
    let mut values = base_values(ctx.task);
    values.insert("draft_index", ctx.draft_index.to_string());
    values.insert(
        "complexity_cue",
        if ctx.diversity.adaptive_complexity {
            paragraph(templates.cue_text(cue))
        } else {
            String::new()
        },
    );
    values.insert(
        "diversity_clause",
        templates
            .instruction_text(ctx.diversity.diversity_instruction)
            .map(paragraph)
            .unwrap_or_default(),
    );
    let siblings = if ctx.diversity.sibling_memory && !ctx.sibling_summaries.is_empty() {
        let mut s = paragraph(&templates.clauses.siblings_header);
        for (i, summary) in ctx.sibling_summaries.iter().enumerate() {
            let mut block_values = BTreeMap::new();
            block_values.insert("index", (i + 1).to_string());
            block_values.insert("summary", summary.clone());
            s.push_str(&paragraph(&render(&templates.clauses.sibling_block, &block_values)));
        }
        s
    } else {
        String::new()
    };
    values.insert("sibling_blocks", siblings);
    Ok(Prompt {
        system: render(&templates.draft.system, &values),
        user: render(&templates.draft.user, &values),
    })
}

fn tail_chars(s: &str, n: usize) -> &str {
    let count = s.chars().count();
    if count <= n {
        return s;
    }
    let skip = count - n;
    let idx = s.char_indices().nth(skip).map_or(s.len(), |(i, _)| i);
    &s[idx..]
}

fn target_values(task: &TaskSpec, target: &SolutionNode) -> BTreeMap<&'static str, String> {
    let mut v = base_values(task);
    v.insert("target_plan", target.plan.clone());
    v.insert("target_code", target.code.clone());
    v.insert(
        "target_score",
        target.score.map_or_else(|| "n/a".to_string(), |s| format!("{s}")),
    );
    v.insert("exec_log", tail_chars(&target.exec.log_excerpt, DEBUG_LOG_CHARS).to_string());
    v
}

pub fn build_debug_prompt(
    ctx: &OperatorContext<'_>,
    templates: &PromptTemplates,
) -> Result<Prompt, OperatorError> {
    let target = ctx
        .target
        .ok_or_else(|| OperatorError::Precondition("debug needs a target".into()))?;
    if !target.exec.status.is_failure() {
        return Err(OperatorError::Precondition(format!(
            "debug target {} has status {:?}",
            target.node_id, target.exec.status
        )));
    }
    let values = target_values(ctx.task, target);
    Ok(Prompt {
        system: render(&templates.debug.system, &values),
        user: render(&templates.debug.user, &values),
    })
}

pub fn build_improve_prompt(
    ctx: &OperatorContext<'_>,
    templates: &PromptTemplates,
) -> Result<Prompt, OperatorError> {
    let target = ctx
        .target
        .ok_or_else(|| OperatorError::Precondition("improve needs a target".into()))?;
    if target.exec.status != ExecStatus::Success {
        return Err(OperatorError::Precondition(format!(
            "improve target {} has status {:?}",
            target.node_id, target.exec.status
        )));
    }
    let values = target_values(ctx.task, target);
    Ok(Prompt {
        system: render(&templates.improve.system, &values),
        user: render(&templates.improve.user, &values),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCompletion {
    pub plan: String,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{reason}")]
pub struct ParseFailure {
    pub reason: String,
    /// Whatever plan text could be recovered.
    pub plan: String,
}

fn is_fence(line: &str) -> bool {
    line.trim_start().starts_with("```")
}

fn extract_plan(prose: &str) -> String {
    match prose.find("PLAN:") {
        Some(i) => prose[i + "PLAN:".len()..].trim().to_string(),
        None => prose.trim().to_string(),
    }
}

/// Splits a completion into its plan and its single fenced code block.
pub fn parse_completion(text: &str) -> Result<ParsedCompletion, ParseFailure> {
    let lines: Vec<&str> = text.lines().collect();
    let fences: Vec<usize> = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| is_fence(l))
        .map(|(i, _)| i)
        .collect();
    let prose_end = fences.first().copied().unwrap_or(lines.len());
    let plan = extract_plan(&lines[..prose_end].join("\n"));
    match fences.len() {
        2 => {
            let code = lines[fences[0] + 1..fences[1]].join("\n");
            Ok(ParsedCompletion { plan, code })
        }
        0 => Err(ParseFailure {
            reason: "no fenced code block".into(),
            plan,
        }),
        n if n % 2 == 1 => Err(ParseFailure {
            reason: "unterminated code fence".into(),
            plan,
        }),
        n => Err(ParseFailure {
            reason: format!("expected one code block, found {}", n / 2),
            plan,
        }),
    }
}

/// Backend plus the bookkeeping each operator call needs.
pub struct OperatorEnv<'a> {
    pub backend: &'a dyn Backend,
    pub templates: &'a PromptTemplates,
    pub temperature: f64,
    pub run_id: &'a str,
    pub request_log: Option<&'a RequestLog>,
}

/// Identity given to a freshly proposed node.
#[derive(Debug, Clone, Copy)]
pub struct NodeStamp {
    pub node_id: NodeId,
    pub created_at: DateTime<Utc>,
}

fn call(env: &OperatorEnv<'_>, prompt: &Prompt, stamp: NodeStamp) -> Result<String, OperatorError> {
    let req = CompletionRequest::new(prompt.system.clone(), prompt.user.clone())
        .with_temperature(env.temperature);
    let result = env.backend.complete(&req)?;
    if let Some(log) = env.request_log {
        log.record(&RequestLogEntry {
            run_id: env.run_id.to_string(),
            node_id: stamp.node_id.to_string(),
            temperature: req.temperature,
            prompt_sha256: req.fingerprint(),
            latency_s: result.latency_s,
        })?;
    }
    Ok(result.text)
}

fn node_from_reply(
    reply: &str,
    stamp: NodeStamp,
    operator: Operator,
    parent_id: Option<NodeId>,
    draft_index: Option<u8>,
) -> SolutionNode {
    let (plan, code, exec, finished_at) = match parse_completion(reply) {
        Ok(p) => (p.plan, p.code, ExecutionOutcome::not_run(), None),
        Err(f) => (
            f.plan,
            String::new(),
            ExecutionOutcome {
                status: ExecStatus::Buggy,
                wall_time_s: 0.0,
                log_excerpt: format!("parse failure: {}", f.reason),
            },
            Some(stamp.created_at),
        ),
    };
    SolutionNode {
        node_id: stamp.node_id,
        parent_id,
        operator,
        draft_index,
        plan,
        code,
        exec,
        score: None,
        created_at: stamp.created_at,
        finished_at,
    }
}

/// Proposes a new initial idea. An unparseable reply yields a Buggy node
/// with empty code.
pub fn draft(
    env: &OperatorEnv<'_>,
    ctx: &OperatorContext<'_>,
    stamp: NodeStamp,
) -> Result<SolutionNode, OperatorError> {
    if !(1..=MAX_DRAFTS as u8).contains(&ctx.draft_index) {
        return Err(OperatorError::OutOfRange(ctx.draft_index));
    }
    let prompt = build_draft_prompt(ctx, env.templates)?;
    let reply = call(env, &prompt, stamp)?;
    Ok(node_from_reply(
        &reply,
        stamp,
        Operator::Draft,
        None,
        Some(ctx.draft_index),
    ))
}

pub fn debug(
    env: &OperatorEnv<'_>,
    ctx: &OperatorContext<'_>,
    stamp: NodeStamp,
) -> Result<SolutionNode, OperatorError> {
    let prompt = build_debug_prompt(ctx, env.templates)?;
    let parent = ctx.target.map(|t| t.node_id);
    let reply = call(env, &prompt, stamp)?;
    Ok(node_from_reply(&reply, stamp, Operator::Debug, parent, None))
}

pub fn improve(
    env: &OperatorEnv<'_>,
    ctx: &OperatorContext<'_>,
    stamp: NodeStamp,
) -> Result<SolutionNode, OperatorError> {
    let prompt = build_improve_prompt(ctx, env.templates)?;
    let parent = ctx.target.map(|t| t.node_id);
    let reply = call(env, &prompt, stamp)?;
    Ok(node_from_reply(&reply, stamp, Operator::Improve, parent, None))
}

fn first_sentence(text: &str) -> &str {
    let text = text.trim();
    let mut end = text.len();
    for (i, c) in text.char_indices() {
        if c == '\n' {
            end = i;
            break;
        }
        if matches!(c, '.' | '!' | '?') {
            let next = text[i + c.len_utf8()..].chars().next();
            if next.is_none_or(char::is_whitespace) {
                end = i + c.len_utf8();
                break;
            }
        }
    }
    text[..end].trim()
}

fn truncate_chars(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Short description of a node for sibling memory: the plan's first
/// sentence plus the model family, at most 1,000 characters.
pub fn summarize_node(node: &SolutionNode, taxonomy: &ArchTaxonomy) -> String {
    let sentence = first_sentence(&node.plan);
    if sentence.is_empty() {
        return String::new();
    }
    let label = extract_labels(&node.plan, taxonomy);
    let suffix = if label.family != UNKNOWN_FAMILY {
        format!(" [model: {}]", label.family)
    } else {
        String::new()
    };
    let budget = SUMMARY_MAX_CHARS.saturating_sub(suffix.chars().count());
    format!("{}{}", truncate_chars(sentence, budget), suffix)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complexity_schedule() {
        assert_eq!(complexity_cue(1).unwrap(), ComplexityCue::Minimal);
        assert_eq!(complexity_cue(2).unwrap(), ComplexityCue::Moderate);
        assert_eq!(complexity_cue(3).unwrap(), ComplexityCue::Moderate);
        assert_eq!(complexity_cue(4).unwrap(), ComplexityCue::Advanced);
        assert_eq!(complexity_cue(5).unwrap(), ComplexityCue::Advanced);
        assert!(matches!(complexity_cue(0), Err(OperatorError::OutOfRange(0))));
        assert!(matches!(complexity_cue(6), Err(OperatorError::OutOfRange(6))));
    }

    #[test]
    fn render_is_single_pass() {
        let mut v = BTreeMap::new();
        v.insert("task_description", "uses {exec_log} and {x}".to_string());
        v.insert("exec_log", "LOG".to_string());
        let out = render("A {task_description} B {exec_log} {unknown}", &v);
        assert_eq!(out, "A uses {exec_log} and {x} B LOG {unknown}");
    }

    #[test]
    fn templates_reject_unknown_placeholders() {
        let bad = BUILTIN_TEMPLATES.replace("{target_score}", "{score_of_target}");
        assert!(PromptTemplates::from_toml(&bad).is_err());
    }

    #[test]
    fn parser_contract() {
        let p = parse_completion("PLAN: use gradient boosting\n```\nprint(1)\n```").unwrap();
        assert_eq!(p.plan, "use gradient boosting");
        assert_eq!(p.code, "print(1)");
        let p = parse_completion("Some idea\n```python\na = 1\nb = 2\n```\ntrailing").unwrap();
        assert_eq!(p.plan, "Some idea");
        assert_eq!(p.code, "a = 1\nb = 2");
        assert!(parse_completion("PLAN: nothing to run").is_err());
        assert!(parse_completion("PLAN: x\n```\na\n```\n```\nb\n```").is_err());
        assert!(parse_completion("PLAN: x\n```\na").is_err());
    }

    #[test]
    fn log_tail_respects_char_boundaries() {
        let s = "é".repeat(10);
        assert_eq!(tail_chars(&s, 3), "ééé");
        assert_eq!(tail_chars("ab", 5), "ab");
    }

    #[test]
    fn summary_contract() {
        let tax = ArchTaxonomy::builtin();
        let mut node = SolutionNode {
            node_id: NodeId(0),
            parent_id: None,
            operator: Operator::Draft,
            draft_index: Some(1),
            plan: "Finetune EfficientNet-B4 end to end. Then ensemble.".into(),
            code: String::new(),
            exec: ExecutionOutcome::not_run(),
            score: None,
            created_at: DateTime::<Utc>::UNIX_EPOCH,
            finished_at: None,
        };
        let s = summarize_node(&node, &tax);
        assert!(s.contains("EfficientNet"));
        assert!(s.starts_with("Finetune EfficientNet-B4 end to end."));
        assert!(!s.contains("ensemble"));
        node.plan = String::new();
        assert_eq!(summarize_node(&node, &tax), "");
        node.plan = "word ".repeat(2_000);
        assert!(summarize_node(&node, &tax).chars().count() <= SUMMARY_MAX_CHARS);
    }
}

//! Proposing a verdict and continuing generation from an edited trace.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{FinishReason, Gateway, GatewayError, GenerationRequest, Message};
use crate::model::{
    render_continuation_prefix, segment_trace, split_blocks, Claim, EvidenceDocument, LabelSet,
    ModelError, SegmentPolicy, Solution, SolutionFlags, StepOrigin, ThinkMarkers, ThinkingTrace,
};

#[derive(Debug, Error)]
pub enum VerifierError {
    #[error("model output has no VERDICT line")]
    MissingVerdictLine,
    #[error("model output has no EXPLANATION block")]
    MissingExplanation,
    #[error("model output has an empty thinking trace")]
    EmptyTrace,
    #[error("backend re-emitted the continuation prefix")]
    PrefixEchoed,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub system: String,
    /// Placeholders: `{claim}`, `{evidence}`, `{labels}`, `{format}`.
    pub user: String,
    pub format: String,
    /// Placeholder: `{feedback}`.
    pub dialogue_feedback: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            system: include_str!("../assets/prompts/verifier_system.txt").trim().to_string(),
            user: include_str!("../assets/prompts/verifier_user.txt").trim().to_string(),
            format: include_str!("../assets/prompts/verifier_format.txt").trim().to_string(),
            dialogue_feedback: include_str!("../assets/prompts/dialogue_feedback.txt")
                .trim()
                .to_string(),
        }
    }
}

impl PromptTemplates {
    /// Replace any of the shipped templates with same-named files found in `dir`.
    pub fn with_overrides(mut self, dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let dir = dir.as_ref();
        for (name, slot) in [
            ("verifier_system.txt", &mut self.system),
            ("verifier_user.txt", &mut self.user),
            ("verifier_format.txt", &mut self.format),
            ("dialogue_feedback.txt", &mut self.dialogue_feedback),
        ] {
            let path = dir.join(name);
            if path.exists() {
                *slot = std::fs::read_to_string(&path)?.trim().to_string();
                tracing::info!(path = %path.display(), "prompt template overridden");
            }
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifierConfig {
    pub max_tokens: u32,
    pub propose_temperature: f64,
    pub continue_temperature: f64,
    /// Per-document character budget in the evidence block.
    pub evidence_char_budget: usize,
    pub markers: ThinkMarkers,
    pub templates: PromptTemplates,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            max_tokens: 4096,
            propose_temperature: 0.6,
            continue_temperature: 0.6,
            evidence_char_budget: 4000,
            markers: ThinkMarkers::default(),
            templates: PromptTemplates::default(),
        }
    }
}

pub const TRUNCATION_MARKER: &str = " [...]";

/// Everything the verifier sees for one claim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierPromptBundle {
    pub system: String,
    pub claim: String,
    pub evidence_block: String,
    pub labels_block: String,
    pub format: String,
    pub user_template: String,
}

impl VerifierPromptBundle {
    pub fn build(
        claim: &Claim,
        evidence: &[EvidenceDocument],
        labels: &LabelSet,
        config: &VerifierConfig,
    ) -> Self {
        Self {
            system: config.templates.system.clone(),
            claim: claim.text.trim().to_string(),
            evidence_block: render_evidence(evidence, config.evidence_char_budget),
            labels_block: labels
                .labels()
                .iter()
                .map(|l| format!("- {l}"))
                .collect::<Vec<_>>()
                .join("\n"),
            format: config.templates.format.clone(),
            user_template: config.templates.user.clone(),
        }
    }

    pub fn user_prompt(&self) -> String {
        self.user_template
            .replace("{claim}", &self.claim)
            .replace("{evidence}", &self.evidence_block)
            .replace("{labels}", &self.labels_block)
            .replace("{format}", &self.format)
    }

    pub fn messages(&self) -> Vec<Message> {
        vec![Message::system(self.system.clone()), Message::user(self.user_prompt())]
    }
}

pub fn render_evidence(evidence: &[EvidenceDocument], budget: usize) -> String {
    if evidence.is_empty() {
        return "(no evidence documents were retrieved)".to_string();
    }
    evidence
        .iter()
        .enumerate()
        .map(|(i, doc)| {
            let mut header = format!("[{}]", i + 1);
            if !doc.title.trim().is_empty() {
                header.push(' ');
                header.push_str(doc.title.trim());
            }
            if !doc.locator.trim().is_empty() {
                header.push_str(&format!(" ({})", doc.locator.trim()));
            }
            let text = doc.text.trim();
            let body = match text.char_indices().nth(budget) {
                Some((cut, _)) => {
                    tracing::info!(doc = %doc.id, chars = text.chars().count(), budget, "evidence truncated");
                    format!("{}{TRUNCATION_MARKER}", &text[..cut])
                }
                None => text.to_string(),
            };
            format!("{header}\n{body}")
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Verdict section of a model output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedVerdict {
    pub label: String,
    pub explanation: String,
}

fn strip_decoration(line: &str) -> &str {
    line.trim().trim_start_matches(['*', '#', '>', ' ']).trim()
}

fn field<'a>(line: &'a str, name: &str) -> Option<&'a str> {
    let line = strip_decoration(line);
    let head = line.get(..name.len())?;
    if head.eq_ignore_ascii_case(name) {
        Some(line[name.len()..].trim_start_matches('*').trim())
    } else {
        None
    }
}

/// Parse `VERDICT: <label>` and `EXPLANATION: <text>` from the post-thinking text.
pub fn parse_verdict(text: &str) -> Result<ParsedVerdict, VerifierError> {
    let lines: Vec<&str> = text.lines().collect();
    let verdict_at = lines
        .iter()
        .position(|l| field(l, "VERDICT:").is_some())
        .ok_or(VerifierError::MissingVerdictLine)?;
    let label = field(lines[verdict_at], "VERDICT:")
        .unwrap_or_default()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '*' || c == '.')
        .trim()
        .to_string();
    if label.is_empty() {
        return Err(VerifierError::MissingVerdictLine);
    }
    let explanation_at = lines
        .iter()
        .position(|l| field(l, "EXPLANATION:").is_some())
        .ok_or(VerifierError::MissingExplanation)?;
    let mut explanation = field(lines[explanation_at], "EXPLANATION:")
        .unwrap_or_default()
        .to_string();
    for line in &lines[explanation_at + 1..] {
        if field(line, "VERDICT:").is_some() {
            break;
        }
        explanation.push('\n');
        explanation.push_str(line);
    }
    let explanation = explanation.trim().to_string();
    if explanation.is_empty() {
        return Err(VerifierError::MissingExplanation);
    }
    Ok(ParsedVerdict { label, explanation })
}

/// Split raw output into (thinking text, post-thinking text).
fn split_thinking<'a>(raw: &'a str, markers: &ThinkMarkers) -> (&'a str, &'a str) {
    let trimmed = raw.trim_start();
    let body = trimmed.strip_prefix(markers.open.as_str()).unwrap_or(trimmed);
    match body.find(markers.close.as_str()) {
        Some(at) => (&body[..at], &body[at + markers.close.len()..]),
        None => {
            // No closing marker: everything before the verdict line is reasoning.
            let verdict_at = body
                .match_indices('\n')
                .map(|(i, _)| i + 1)
                .chain(std::iter::once(0))
                .filter(|&i| field(&body[i..], "VERDICT:").is_some())
                .min();
            match verdict_at {
                Some(at) => (&body[..at], &body[at..]),
                None => (body, ""),
            }
        }
    }
}

fn resolve_label(parsed: ParsedVerdict, labels: &LabelSet) -> (String, String, bool) {
    match labels.resolve(&parsed.label) {
        Some(canonical) => (canonical.to_string(), parsed.explanation, false),
        None => {
            tracing::warn!(label = %parsed.label, "verdict outside the label set");
            (parsed.label, parsed.explanation, true)
        }
    }
}

/// Parse a complete model output into a solution.
pub fn parse_solution(
    raw: &str,
    labels: &LabelSet,
    markers: &ThinkMarkers,
    empty_evidence: bool,
) -> Result<Solution, VerifierError> {
    let (thinking, rest) = split_thinking(raw, markers);
    let trace = segment_trace(thinking, SegmentPolicy::default());
    if trace.is_empty() {
        return Err(VerifierError::EmptyTrace);
    }
    let (label, explanation, out_of_set) = resolve_label(parse_verdict(rest)?, labels);
    Ok(Solution {
        label,
        explanation,
        trace,
        flags: SolutionFlags {
            out_of_set_label: out_of_set,
            empty_evidence,
        },
    })
}

/// The output contract rendered back from a solution, e.g. as an assistant turn.
pub fn render_solution(solution: &Solution, markers: &ThinkMarkers) -> String {
    format!(
        "{}\n{}\n{}\nVERDICT: {}\nEXPLANATION: {}",
        markers.open,
        solution.trace.body(),
        markers.close,
        solution.label,
        solution.explanation
    )
}

#[derive(Debug, Clone)]
pub struct Verifier {
    gateway: Gateway,
    config: VerifierConfig,
}

impl Verifier {
    pub fn new(gateway: Gateway, config: VerifierConfig) -> Self {
        Self { gateway, config }
    }

    pub fn config(&self) -> &VerifierConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn bundle(
        &self,
        claim: &Claim,
        evidence: &[EvidenceDocument],
        labels: &LabelSet,
    ) -> VerifierPromptBundle {
        VerifierPromptBundle::build(claim, evidence, labels, &self.config)
    }

    pub fn propose(
        &self,
        claim: &Claim,
        evidence: &[EvidenceDocument],
        labels: &LabelSet,
    ) -> Result<Solution, VerifierError> {
        claim.validate()?;
        let bundle = self.bundle(claim, evidence, labels);
        self.generate_chat(bundle.messages(), labels, evidence.is_empty())
    }

    /// Full generation from an arbitrary message history.
    pub fn generate_chat(
        &self,
        messages: Vec<Message>,
        labels: &LabelSet,
        empty_evidence: bool,
    ) -> Result<Solution, VerifierError> {
        self.generate_chat_at(messages, labels, empty_evidence, self.config.propose_temperature)
    }

    pub fn generate_chat_at(
        &self,
        messages: Vec<Message>,
        labels: &LabelSet,
        empty_evidence: bool,
        temperature: f64,
    ) -> Result<Solution, VerifierError> {
        let request = GenerationRequest::chat(messages, self.config.max_tokens, temperature);
        let out = self.gateway.generate(&request)?;
        if out.finish_reason == FinishReason::Length {
            tracing::warn!("verifier output hit the token limit");
        }
        parse_solution(&out.text, labels, &self.config.markers, empty_evidence)
    }

    /// Resume generation inside the thinking block after `prefix_trace`.
    ///
    /// The result keeps every prefix step unchanged, then the guidance (as its
    /// own step), then the newly generated steps.
    pub fn continue_from(
        &self,
        prefix_trace: &ThinkingTrace,
        bundle: &VerifierPromptBundle,
        labels: &LabelSet,
        empty_evidence: bool,
    ) -> Result<Solution, VerifierError> {
        prefix_trace.validate()?;
        let markers = &self.config.markers;
        let prefix = render_continuation_prefix(prefix_trace, markers);
        let request = GenerationRequest {
            messages: bundle.messages(),
            prefix: Some(prefix),
            max_tokens: self.config.max_tokens,
            temperature: self.config.continue_temperature,
            stop: Vec::new(),
        };
        let out = self.gateway.generate(&request)?;
        let continuation = out.text.as_str();
        if continuation.trim_start().starts_with(markers.open.as_str()) {
            return Err(VerifierError::PrefixEchoed);
        }
        let (thinking, rest) = match continuation.find(markers.close.as_str()) {
            Some(at) => (&continuation[..at], &continuation[at + markers.close.len()..]),
            None => split_thinking(continuation, markers),
        };
        let mut trace = prefix_trace.clone();
        trace.fold_guidance();
        trace.extend_texts(split_blocks(thinking), StepOrigin::Continuation);
        if trace.is_empty() {
            return Err(VerifierError::EmptyTrace);
        }
        let (label, explanation, out_of_set) = resolve_label(parse_verdict(rest)?, labels);
        Ok(Solution {
            label,
            explanation,
            trace,
            flags: SolutionFlags {
                out_of_set_label: out_of_set,
                empty_evidence,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Capabilities, ProviderProfile, Role, ScriptedTransport};
    use crate::model::{apply_edits, TraceEdit};
    use std::sync::Arc;

    fn labels() -> LabelSet {
        LabelSet::new(["true", "false", "mixture"]).unwrap()
    }

    fn verifier(t: ScriptedTransport) -> Verifier {
        let g = Gateway::new(Role::Verifier, ProviderProfile::new("verifier", Capabilities::all()), Arc::new(t));
        Verifier::new(g, VerifierConfig::default())
    }

    const OUTPUT: &str = "<think>\nS1\n\nS2\n\nS3\n</think>\nVERDICT: TRUE\nEXPLANATION: Because.";

    #[test]
    fn propose_parses_and_normalizes() {
        let v = verifier(ScriptedTransport::new().on_generate(&["Claim: X"], [OUTPUT]));
        let claim = Claim::new("c", "X").unwrap();
        let s = v.propose(&claim, &[], &labels()).unwrap();
        assert_eq!(s.trace.len(), 3);
        assert_eq!(s.label, "true");
        assert_eq!(s.explanation, "Because.");
        assert!(!s.flags.out_of_set_label);
        assert!(s.flags.empty_evidence);
    }

    #[test]
    fn rendered_solution_parses_back() {
        let s = parse_solution(OUTPUT, &labels(), &ThinkMarkers::default(), false).unwrap();
        let again = parse_solution(&render_solution(&s, &ThinkMarkers::default()), &labels(), &ThinkMarkers::default(), false).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn out_of_set_label_kept_verbatim() {
        let raw = "<think>\nA\n</think>\nVERDICT: Pants on Fire\nEXPLANATION: e";
        let s = parse_solution(raw, &labels(), &ThinkMarkers::default(), false).unwrap();
        assert_eq!(s.label, "Pants on Fire");
        assert!(s.flags.out_of_set_label);
    }

    #[test]
    fn contract_violations() {
        let m = ThinkMarkers::default();
        assert!(matches!(
            parse_solution("<think>\nA\n</think>\nEXPLANATION: e", &labels(), &m, false),
            Err(VerifierError::MissingVerdictLine)
        ));
        assert!(matches!(
            parse_solution("<think>\n\n</think>\nVERDICT: true\nEXPLANATION: e", &labels(), &m, false),
            Err(VerifierError::EmptyTrace)
        ));
        assert!(matches!(
            parse_solution("<think>\nA\n</think>\nVERDICT: true", &labels(), &m, false),
            Err(VerifierError::MissingExplanation)
        ));
    }

    #[test]
    fn decorated_fields_and_multiline_explanation() {
        let raw = "<think>A</think>\n**VERDICT:** mixture\n**EXPLANATION:** line one\nline two";
        let s = parse_solution(raw, &labels(), &ThinkMarkers::default(), false).unwrap();
        assert_eq!(s.label, "mixture");
        assert_eq!(s.explanation, "line one\nline two");
    }

    #[test]
    fn evidence_truncated_with_marker() {
        let doc = EvidenceDocument {
            id: "d".into(),
            title: "T".into(),
            locator: "http://x".into(),
            text: "é".repeat(10),
            retrieval_score: 1.0,
        };
        let block = render_evidence(&[doc], 4);
        assert_eq!(block, format!("[1] T (http://x)\néééé{TRUNCATION_MARKER}"));
    }

    #[test]
    fn continuation_appends_after_guidance() {
        let t = ScriptedTransport::new().on_generate(
            &["Claim: X", "<think>"],
            ["C1\n\nC2</think>\nVERDICT: mixture\nEXPLANATION: Partly."],
        );
        let v = verifier(t);
        let claim = Claim::new("c", "X").unwrap();
        let bundle = v.bundle(&claim, &[], &labels());
        let base = ThinkingTrace::from_texts(["S1", "S2"]);
        let edited = apply_edits(&base, &[TraceEdit::guide("check dates", 0).unwrap()]).unwrap();
        let s = v.continue_from(&edited, &bundle, &labels(), true).unwrap();
        assert_eq!(s.label, "mixture");
        assert_eq!(s.trace.len(), 5);
        assert_eq!(s.trace.steps[2].origin, StepOrigin::Guidance);
        assert!(s.trace.body().starts_with(&edited.body()));
        assert_eq!(s.trace.steps[4].index, 4);
    }

    #[test]
    fn echoed_prefix_is_rejected() {
        let t = ScriptedTransport::new().on_generate(&["Claim: X"], ["<think>\nagain</think>\nVERDICT: true\nEXPLANATION: e"]);
        let v = verifier(t);
        let claim = Claim::new("c", "X").unwrap();
        let bundle = v.bundle(&claim, &[], &labels());
        let base = ThinkingTrace::from_texts(["S1"]);
        assert!(matches!(
            v.continue_from(&base, &bundle, &labels(), true),
            Err(VerifierError::PrefixEchoed)
        ));
    }
}

//! Turning feedback instructions into trace edits.
//!
//! Each instruction is classified (remove / modify / guide) and localized,
//! candidate edits are sampled, and a reward model picks the best candidate
//! against per-kind criteria. Guide items are later rendered into a single
//! guidance block by [`crate::model::apply_edits`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{Criterion, Gateway, GatewayError, GenerationRequest, Message, RewardScores};
use crate::model::{
    Claim, EditKind, EvidenceDocument, FeedbackInstruction, ModelError, ThinkingTrace, TraceEdit,
};
use crate::verifier::render_evidence;

const CLASSIFY_PROMPT: &str = include_str!("../assets/prompts/editor_classify.txt");
const MODIFY_PROMPT: &str = include_str!("../assets/prompts/editor_modify.txt");
const GUIDE_PROMPT: &str = include_str!("../assets/prompts/editor_guide.txt");
const CRITERIA_FILE: &str = include_str!("../assets/criteria/editor.json");

const REASK: &str =
    "Your reply did not follow the required form. Reply with one line only: KIND=<REMOVE|MODIFY|GUIDE>; STEP=<step id or NONE>";

#[derive(Debug, Error)]
pub enum EditorError {
    #[error("no feedback instructions to compile")]
    NoInstructions,
    #[error("classifier output unparseable after re-asks: {0:?}")]
    Unparseable(String),
    #[error("no candidate edits to select from")]
    NoCandidates,
    #[error("every instruction failed: {}", .0.join("; "))]
    AllInstructionsFailed(Vec<String>),
    #[error("criteria file: {0}")]
    Criteria(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardCriterion {
    pub kind: EditKind,
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub examples: Vec<Value>,
}

#[derive(Debug, Deserialize)]
struct CriteriaFile {
    version: u32,
    criteria: Vec<RewardCriterion>,
}

/// Parse a criteria file; the shipped one is [`default_criteria`].
pub fn parse_criteria(json: &str) -> Result<Vec<RewardCriterion>, EditorError> {
    let file: CriteriaFile =
        serde_json::from_str(json).map_err(|e| EditorError::Criteria(e.to_string()))?;
    if file.version != 1 {
        return Err(EditorError::Criteria(format!("unsupported version {}", file.version)));
    }
    if file.criteria.iter().any(|c| c.kind == EditKind::Remove) {
        return Err(EditorError::Criteria("removals are not reward-scored".into()));
    }
    Ok(file.criteria)
}

pub fn default_criteria() -> Vec<RewardCriterion> {
    parse_criteria(CRITERIA_FILE).expect("shipped editor criteria are valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditorConfig {
    /// Candidates sampled per modify/guide instruction.
    pub samples: usize,
    pub sample_temperature: f64,
    pub max_tokens: u32,
    pub classify_reasks: usize,
    pub use_reward_model: bool,
    pub allow_remove_modify: bool,
    pub allow_guidance: bool,
}

impl Default for EditorConfig {
    fn default() -> Self {
        Self {
            samples: 4,
            sample_temperature: 0.8,
            max_tokens: 1024,
            classify_reasks: 2,
            use_reward_model: true,
            allow_remove_modify: true,
            allow_guidance: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub kind: EditKind,
    pub target_index: Option<u32>,
    /// Set when a remove/modify answer was turned into a guide.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downgraded: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredEdit {
    pub edit: TraceEdit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<RewardScores>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub chosen: usize,
    pub pool: Vec<ScoredEdit>,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum PlanOutcome {
    Chosen {
        edit: TraceEdit,
        pool: Vec<ScoredEdit>,
        rationale: String,
    },
    Skipped {
        reason: String,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub instruction_id: u32,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<Classification>,
    #[serde(flatten)]
    pub outcome: PlanOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditPlan {
    pub entries: Vec<PlanEntry>,
    pub guidance_items: Vec<String>,
}

impl EditPlan {
    /// Chosen edits in instruction order.
    pub fn edits(&self) -> Vec<TraceEdit> {
        self.entries
            .iter()
            .filter_map(|e| match &e.outcome {
                PlanOutcome::Chosen { edit, .. } => Some(edit.clone()),
                _ => None,
            })
            .collect()
    }
}

/// Parse `KIND=...; STEP=...`.
pub fn parse_classification(text: &str) -> Option<(EditKind, Option<u32>)> {
    let upper = text.to_uppercase();
    let value_after = |key: &str| -> Option<String> {
        let at = upper.find(key)? + key.len();
        let rest = upper[at..].trim_start_matches([' ', '=', ':']);
        let value: String = rest
            .chars()
            .take_while(|c| c.is_ascii_alphanumeric())
            .collect();
        (!value.is_empty()).then_some(value)
    };
    let kind = match value_after("KIND")?.as_str() {
        "REMOVE" => EditKind::Remove,
        "MODIFY" => EditKind::Modify,
        "GUIDE" => EditKind::Guide,
        _ => return None,
    };
    let step = match value_after("STEP") {
        None => None,
        Some(v) if v == "NONE" => None,
        Some(v) => Some(v.parse().ok()?),
    };
    if kind != EditKind::Guide && step.is_none() {
        return None;
    }
    Some((kind, step))
}

fn render_trace(trace: &ThinkingTrace) -> String {
    trace
        .steps
        .iter()
        .map(|s| format!("STEP {}: {}", s.index, s.text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn clean_candidate(text: &str, kind: EditKind) -> String {
    let t = text.trim().trim_matches(|c| c == '"' || c == '“' || c == '”').trim();
    match kind {
        EditKind::Guide => t.lines().next().unwrap_or("").trim().trim_end_matches('.').to_string(),
        _ => t.to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct Editor {
    gateway: Gateway,
    reward: Option<Gateway>,
    config: EditorConfig,
    criteria: Vec<RewardCriterion>,
}

impl Editor {
    pub fn new(gateway: Gateway, reward: Option<Gateway>, config: EditorConfig) -> Self {
        Self {
            gateway,
            reward,
            config,
            criteria: default_criteria(),
        }
    }

    pub fn with_criteria(mut self, criteria: Vec<RewardCriterion>) -> Self {
        self.criteria = criteria;
        self
    }

    pub fn config(&self) -> &EditorConfig {
        &self.config
    }

    pub fn criteria_for(&self, kind: EditKind) -> Vec<&RewardCriterion> {
        self.criteria.iter().filter(|c| c.kind == kind).collect()
    }

    fn reward_active(&self) -> bool {
        self.config.use_reward_model && self.reward.is_some()
    }

    fn pool_size(&self) -> usize {
        if self.reward_active() {
            self.config.samples.max(1)
        } else {
            1
        }
    }

    pub fn classify_instruction(
        &self,
        claim: &Claim,
        instruction: &FeedbackInstruction,
        trace: &ThinkingTrace,
    ) -> Result<Classification, EditorError> {
        if trace.is_empty() || !self.config.allow_remove_modify {
            return Ok(Classification {
                kind: EditKind::Guide,
                target_index: None,
                downgraded: None,
            });
        }
        let allowed = if self.config.allow_guidance {
            String::new()
        } else {
            "Guidance is unavailable: answer REMOVE or MODIFY whenever a step can be identified.\n"
                .to_string()
        };
        let prompt = CLASSIFY_PROMPT
            .replace("{claim}", claim.text.trim())
            .replace("{trace}", &render_trace(trace))
            .replace("{instruction}", instruction.text.trim())
            .replace("{allowed}", &allowed);
        let mut messages = vec![Message::user(prompt)];
        let mut last = String::new();
        for attempt in 0..=self.config.classify_reasks {
            let out = self
                .gateway
                .generate(&GenerationRequest::chat(messages.clone(), 64, 0.0))?;
            if let Some((kind, step)) = parse_classification(&out.text) {
                return Ok(match (kind, step) {
                    (EditKind::Guide, _) => Classification {
                        kind,
                        target_index: None,
                        downgraded: None,
                    },
                    (_, Some(index)) if trace.step(index).is_some() => Classification {
                        kind,
                        target_index: Some(index),
                        downgraded: None,
                    },
                    (_, step) => {
                        let reason = format!(
                            "{kind:?} targets step {step:?}, which is not in the trace"
                        );
                        tracing::info!(instruction = instruction.id, "{reason}; downgraded to guide");
                        Classification {
                            kind: EditKind::Guide,
                            target_index: None,
                            downgraded: Some(reason),
                        }
                    }
                });
            }
            tracing::debug!(attempt, reply = %out.text, "unparseable classification");
            last = out.text.clone();
            messages.push(Message::assistant(out.text));
            messages.push(Message::user(REASK));
        }
        Err(EditorError::Unparseable(last))
    }

    /// Distinct candidates for a modify or guide edit. Removal has exactly one.
    pub fn sample_edit_candidates(
        &self,
        claim: &Claim,
        instruction: &FeedbackInstruction,
        classification: &Classification,
        trace: &ThinkingTrace,
        evidence: &[EvidenceDocument],
        k: usize,
    ) -> Result<Vec<TraceEdit>, EditorError> {
        let k = k.max(1);
        let prompt = match (classification.kind, classification.target_index) {
            (EditKind::Remove, Some(index)) => {
                return Ok(vec![TraceEdit::remove(index, instruction.id)]);
            }
            (EditKind::Modify, Some(index)) => {
                let step = trace.step(index).ok_or(ModelError::UnknownStepIndex(index))?;
                MODIFY_PROMPT
                    .replace("{claim}", claim.text.trim())
                    .replace("{evidence}", &render_evidence(evidence, 4000))
                    .replace("{step}", &step.text)
                    .replace("{instruction}", instruction.text.trim())
            }
            (EditKind::Guide, _) => GUIDE_PROMPT
                .replace("{claim}", claim.text.trim())
                .replace("{instruction}", instruction.text.trim()),
            (kind, None) => {
                return Err(EditorError::Unparseable(format!("{kind:?} without a target step")))
            }
        };
        let request = GenerationRequest::chat(
            vec![Message::user(prompt)],
            self.config.max_tokens,
            self.config.sample_temperature,
        );
        let mut texts: Vec<String> = Vec::new();
        // Bounded resampling: duplicates are dropped rather than retried forever.
        for _ in 0..(2 * k) {
            let out = self.gateway.generate(&request)?;
            let text = clean_candidate(&out.text, classification.kind);
            if !text.is_empty() && !texts.contains(&text) {
                texts.push(text);
            }
            if texts.len() == k {
                break;
            }
        }
        if texts.len() < k {
            tracing::info!(instruction = instruction.id, wanted = k, got = texts.len(), "fewer distinct candidates than requested");
        }
        texts
            .into_iter()
            .map(|t| match classification.target_index {
                Some(index) if classification.kind == EditKind::Modify => {
                    TraceEdit::modify(index, t, instruction.id)
                }
                _ => TraceEdit::guide(t, instruction.id),
            })
            .collect::<Result<_, _>>()
            .map_err(Into::into)
    }

    /// Score every candidate and keep the argmax total; ties keep the earliest.
    pub fn select_edit(
        &self,
        candidates: Vec<TraceEdit>,
        context: &str,
    ) -> Result<Selection, EditorError> {
        if candidates.is_empty() {
            return Err(EditorError::NoCandidates);
        }
        let reward = match (&self.reward, candidates.len()) {
            (Some(r), n) if n > 1 && self.config.use_reward_model => r,
            _ => {
                return Ok(Selection {
                    chosen: 0,
                    pool: candidates
                        .into_iter()
                        .map(|edit| ScoredEdit { edit, scores: None })
                        .collect(),
                    rationale: "single candidate".into(),
                })
            }
        };
        let kind = candidates[0].kind();
        let owned: Vec<&RewardCriterion> = self.criteria_for(kind);
        let criteria: Vec<Criterion> = owned
            .iter()
            .map(|c| Criterion::new(c.name.clone(), c.description.clone()))
            .collect();
        let context = with_examples(context, &owned);
        let mut pool: Vec<ScoredEdit> = Vec::with_capacity(candidates.len());
        for edit in candidates.iter() {
            let subject = match edit {
                TraceEdit::Modify { replacement, .. } => replacement.clone(),
                TraceEdit::Guide { guidance_item, .. } => guidance_item.clone(),
                TraceEdit::Remove { target_index, .. } => format!("remove step {target_index}"),
            };
            match reward.score_reward(&criteria, &subject, &context) {
                Ok(scores) => pool.push(ScoredEdit {
                    edit: edit.clone(),
                    scores: Some(scores),
                }),
                Err(GatewayError::Transport(msg)) => {
                    tracing::warn!("reward model unavailable ({msg}); falling back to the first candidate");
                    return Ok(Selection {
                        chosen: 0,
                        pool: candidates
                            .into_iter()
                            .map(|edit| ScoredEdit { edit, scores: None })
                            .collect(),
                        rationale: format!("reward fallback: {msg}"),
                    });
                }
                Err(e) => return Err(e.into()),
            }
        }
        let totals: Vec<u32> = pool
            .iter()
            .map(|s| s.scores.as_ref().map_or(0, |r| r.total))
            .collect();
        let chosen = argmax_first(&totals);
        Ok(Selection {
            chosen,
            rationale: format!("highest reward total {} of {:?}", totals[chosen], totals),
            pool,
        })
    }

    fn plan_one(
        &self,
        claim: &Claim,
        instruction: &FeedbackInstruction,
        trace: &ThinkingTrace,
        evidence: &[EvidenceDocument],
    ) -> Result<(Classification, PlanOutcome), EditorError> {
        let classification = self.classify_instruction(claim, instruction, trace)?;
        if classification.kind == EditKind::Guide && !self.config.allow_guidance {
            return Ok((
                classification,
                PlanOutcome::Skipped {
                    reason: "guidance disabled".into(),
                },
            ));
        }
        let candidates = self.sample_edit_candidates(
            claim,
            instruction,
            &classification,
            trace,
            evidence,
            self.pool_size(),
        )?;
        let mut context = format!(
            "Claim: {}\nFeedback instruction: {}",
            claim.text.trim(),
            instruction.text.trim()
        );
        if let Some(step) = classification.target_index.and_then(|i| trace.step(i)) {
            context.push_str(&format!("\nOriginal step: {}", step.text));
        }
        if classification.kind == EditKind::Modify {
            context.push_str(&format!("\nEvidence:\n{}", render_evidence(evidence, 4000)));
        }
        let selection = self.select_edit(candidates, &context)?;
        let edit = selection.pool[selection.chosen].edit.clone();
        Ok((
            classification,
            PlanOutcome::Chosen {
                edit,
                pool: selection.pool,
                rationale: selection.rationale,
            },
        ))
    }

    pub fn compile_plan(
        &self,
        claim: &Claim,
        instructions: &[FeedbackInstruction],
        trace: &ThinkingTrace,
        evidence: &[EvidenceDocument],
    ) -> Result<EditPlan, EditorError> {
        if instructions.is_empty() {
            return Err(EditorError::NoInstructions);
        }
        // Sequential on purpose: sampled mock responses are consumed in call order.
        let mut entries = Vec::with_capacity(instructions.len());
        let mut failures = Vec::new();
        for instruction in instructions {
            let (classification, outcome) = match self.plan_one(claim, instruction, trace, evidence) {
                Ok((c, o)) => (Some(c), o),
                Err(e) => {
                    tracing::warn!(instruction = instruction.id, "instruction failed: {e}");
                    failures.push(format!("instruction {}: {e}", instruction.id));
                    (None, PlanOutcome::Failed { error: e.to_string() })
                }
            };
            entries.push(PlanEntry {
                instruction_id: instruction.id,
                instruction: instruction.text.clone(),
                classification,
                outcome,
            });
        }
        if failures.len() == instructions.len() {
            return Err(EditorError::AllInstructionsFailed(failures));
        }
        resolve_conflicts(&mut entries, self.config.allow_guidance)?;
        let mut guidance_items: Vec<String> = Vec::new();
        for entry in &entries {
            if let PlanOutcome::Chosen {
                edit: TraceEdit::Guide { guidance_item, .. },
                ..
            } = &entry.outcome
            {
                let item = guidance_item.trim().to_string();
                if !guidance_items.contains(&item) {
                    guidance_items.push(item);
                }
            }
        }
        Ok(EditPlan {
            entries,
            guidance_items,
        })
    }
}

/// Earlier instructions keep their target step. A later edit on the same step
/// becomes a guide carrying the instruction text verbatim.
fn resolve_conflicts(entries: &mut [PlanEntry], allow_guidance: bool) -> Result<(), EditorError> {
    let mut owner: HashMap<u32, u32> = HashMap::new();
    for entry in entries.iter_mut() {
        let PlanOutcome::Chosen { edit, .. } = &entry.outcome else {
            continue;
        };
        let Some(index) = edit.target_index() else {
            continue;
        };
        match owner.get(&index) {
            None => {
                owner.insert(index, entry.instruction_id);
            }
            Some(first) => {
                tracing::info!(
                    step = index,
                    kept = first,
                    converted = entry.instruction_id,
                    "conflicting edits on one step; later instruction becomes guidance"
                );
                entry.outcome = if allow_guidance {
                    PlanOutcome::Chosen {
                        edit: TraceEdit::guide(entry.instruction.trim(), entry.instruction_id)?,
                        pool: Vec::new(),
                        rationale: format!("conflict on step {index} with instruction {first}"),
                    }
                } else {
                    PlanOutcome::Skipped {
                        reason: format!("conflict on step {index} with instruction {first}"),
                    }
                };
            }
        }
    }
    Ok(())
}

fn with_examples(context: &str, criteria: &[&RewardCriterion]) -> String {
    let mut out = context.to_string();
    let examples: Vec<String> = criteria
        .iter()
        .flat_map(|c| {
            c.examples
                .iter()
                .map(move |e| format!("[{}] {}", c.name, e))
        })
        .collect();
    if !examples.is_empty() {
        out.push_str("\n\nScored examples:\n");
        out.push_str(&examples.join("\n"));
    }
    out
}

/// Index of the first maximum.
pub fn argmax_first(values: &[u32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Capabilities, Operation, ProviderProfile, Role, ScriptedTransport};
    use serde_json::json;
    use std::sync::Arc;

    fn editor(t: ScriptedTransport, config: EditorConfig) -> (Editor, Arc<ScriptedTransport>) {
        let t = Arc::new(t);
        let g = Gateway::new(Role::Editor, ProviderProfile::new("editor", Capabilities::all()), t.clone());
        let r = Gateway::new(Role::Reward, ProviderProfile::new("reward", Capabilities::all()), t.clone());
        (Editor::new(g, Some(r), config), t)
    }

    fn claim() -> Claim {
        Claim::new("c", "X happened").unwrap()
    }

    fn instr(id: u32, text: &str) -> FeedbackInstruction {
        FeedbackInstruction::new(id, text, crate::model::Author::Human).unwrap()
    }

    fn trace3() -> ThinkingTrace {
        ThinkingTrace::from_texts(["a", "b", "c"])
    }

    #[test]
    fn shipped_criteria_match_kinds() {
        let c = default_criteria();
        let names = |k| c.iter().filter(|x| x.kind == k).map(|x| x.name.as_str()).collect::<Vec<_>>();
        assert_eq!(
            names(EditKind::Modify),
            vec!["Correctness", "Adherence to feedback", "Speculative nature", "Focus on the claim"]
        );
        assert_eq!(names(EditKind::Guide), vec!["Adherence to feedback", "Focus on the claim"]);
        assert!(c.iter().all(|x| x.examples.len() == 3));
    }

    #[test]
    fn classification_parsing() {
        assert_eq!(parse_classification("KIND=REMOVE; STEP=2"), Some((EditKind::Remove, Some(2))));
        assert_eq!(parse_classification("kind = guide; step = none"), Some((EditKind::Guide, None)));
        assert_eq!(parse_classification("KIND=MODIFY; STEP=NONE"), None);
        assert_eq!(parse_classification("remove the second step"), None);
    }

    #[test]
    fn classify_localizes_and_downgrades() {
        let t = ScriptedTransport::new()
            .on_generate(&["KIND=", "drop b"], ["KIND=REMOVE; STEP=1"])
            .on_generate(&["KIND=", "fix it"], ["KIND=MODIFY; STEP=9"])
            .on_generate(&["KIND=", "broader"], ["KIND=GUIDE; STEP=NONE"]);
        let (e, _) = editor(t, EditorConfig::default());
        let c = e.classify_instruction(&claim(), &instr(1, "drop b"), &trace3()).unwrap();
        assert_eq!((c.kind, c.target_index), (EditKind::Remove, Some(1)));
        let c = e.classify_instruction(&claim(), &instr(1, "fix it"), &trace3()).unwrap();
        assert_eq!(c.kind, EditKind::Guide);
        assert!(c.downgraded.is_some());
        let c = e.classify_instruction(&claim(), &instr(1, "broader"), &trace3()).unwrap();
        assert_eq!(c.kind, EditKind::Guide);
    }

    #[test]
    fn classify_reasks_then_fails() {
        let t = ScriptedTransport::new().on_generate(&["KIND="], ["I would remove it"]);
        let (e, t) = editor(t, EditorConfig::default());
        let err = e.classify_instruction(&claim(), &instr(1, "x"), &trace3()).unwrap_err();
        assert!(matches!(err, EditorError::Unparseable(_)));
        assert_eq!(t.request_count(Operation::Generate), 3);
    }

    #[test]
    fn empty_trace_forces_guide_without_calls() {
        let (e, t) = editor(ScriptedTransport::new(), EditorConfig::default());
        let c = e.classify_instruction(&claim(), &instr(1, "x"), &ThinkingTrace::default()).unwrap();
        assert_eq!(c.kind, EditKind::Guide);
        assert_eq!(t.requests().len(), 0);
    }

    #[test]
    fn removal_has_one_canonical_candidate() {
        let (e, t) = editor(ScriptedTransport::new(), EditorConfig::default());
        let c = Classification { kind: EditKind::Remove, target_index: Some(2), downgraded: None };
        let pool = e.sample_edit_candidates(&claim(), &instr(4, "x"), &c, &trace3(), &[], 4).unwrap();
        assert_eq!(pool, vec![TraceEdit::remove(2, 4)]);
        assert_eq!(t.requests().len(), 0);
    }

    #[test]
    fn sampling_keeps_distinct_candidates() {
        let t = ScriptedTransport::new().on_generate(&["Step to rewrite"], ["r1", "r2", "r2", "r3", "r4"]);
        let (e, _) = editor(t, EditorConfig::default());
        let c = Classification { kind: EditKind::Modify, target_index: Some(0), downgraded: None };
        let pool = e.sample_edit_candidates(&claim(), &instr(1, "x"), &c, &trace3(), &[], 4).unwrap();
        let texts: Vec<_> = pool
            .iter()
            .map(|p| match p {
                TraceEdit::Modify { replacement, .. } => replacement.as_str(),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(texts, vec!["r1", "r2", "r3", "r4"]);
    }

    fn reward_for(subject: &str, total: u32) -> ScriptEntryBuilder {
        // Four modify criteria; split the total as evenly as the 1..=10 range allows.
        let base = total / 4;
        let extra = total % 4;
        let scores: Vec<u32> = (0..4).map(|i| base + u32::from(i < extra)).collect();
        ScriptEntryBuilder {
            subject: subject.to_string(),
            value: json!({
                "scores": {
                    "Correctness": scores[0], "Adherence to feedback": scores[1],
                    "Speculative nature": scores[2], "Focus on the claim": scores[3]
                },
                "total": total
            }),
        }
    }

    struct ScriptEntryBuilder {
        subject: String,
        value: Value,
    }

    #[test]
    fn select_takes_first_maximum() {
        let mut t = ScriptedTransport::new();
        for (s, total) in [("m1", 21), ("m2", 30), ("m3", 18), ("m4", 30)] {
            let b = reward_for(s, total);
            t = t.on(Operation::Reward, &[&format!("\"subject\":\"{}\"", b.subject)], vec![b.value]);
        }
        let (e, _) = editor(t, EditorConfig::default());
        let pool: Vec<TraceEdit> = ["m1", "m2", "m3", "m4"]
            .iter()
            .map(|s| TraceEdit::modify(0, *s, 1).unwrap())
            .collect();
        let sel = e.select_edit(pool, "ctx").unwrap();
        assert_eq!(sel.chosen, 1);
    }

    #[test]
    fn reward_transport_failure_falls_back_to_first() {
        let t = ScriptedTransport::new().on(Operation::Reward, &[], vec![json!({"error": "fatal"})]);
        let (e, _) = editor(t, EditorConfig::default());
        let pool = vec![TraceEdit::guide("g1", 1).unwrap(), TraceEdit::guide("g2", 1).unwrap()];
        let sel = e.select_edit(pool, "ctx").unwrap();
        assert_eq!(sel.chosen, 0);
        assert!(sel.rationale.starts_with("reward fallback"));
    }

    #[test]
    fn unparseable_reward_propagates() {
        let t = ScriptedTransport::new().on(Operation::Reward, &[], vec![json!({"scores": {}})]);
        let (e, _) = editor(t, EditorConfig::default());
        let pool = vec![TraceEdit::guide("g1", 1).unwrap(), TraceEdit::guide("g2", 1).unwrap()];
        assert!(matches!(
            e.select_edit(pool, "ctx"),
            Err(EditorError::Gateway(GatewayError::UnparseableScore(_)))
        ));
    }

    #[test]
    fn conflicting_edits_keep_the_earlier_instruction() {
        let t = ScriptedTransport::new()
            .on_generate(&["KIND=", "rewrite a"], ["KIND=MODIFY; STEP=0"])
            .on_generate(&["KIND=", "delete a"], ["KIND=REMOVE; STEP=0"])
            .on_generate(&["Step to rewrite"], ["a fixed"])
            .with_default_reward(5);
        let (e, _) = editor(t, EditorConfig { samples: 1, ..EditorConfig::default() });
        let plan = e
            .compile_plan(&claim(), &[instr(1, "rewrite a"), instr(2, "delete a")], &trace3(), &[])
            .unwrap();
        assert_eq!(
            plan.edits(),
            vec![TraceEdit::modify(0, "a fixed", 1).unwrap(), TraceEdit::guide("delete a", 2).unwrap()]
        );
        assert_eq!(plan.guidance_items, vec!["delete a"]);
    }

    #[test]
    fn guides_merge_in_order_and_dedup() {
        let t = ScriptedTransport::new()
            .on_generate(&["KIND="], ["KIND=GUIDE; STEP=NONE"])
            .on_generate(&["condense", "alpha"], ["the origin"])
            .on_generate(&["condense", "beta"], ["the harm"])
            .on_generate(&["condense", "gamma"], ["the origin"]);
        let (e, t) = editor(t, EditorConfig { use_reward_model: false, ..EditorConfig::default() });
        let plan = e
            .compile_plan(&claim(), &[instr(1, "alpha"), instr(2, "beta"), instr(3, "gamma")], &trace3(), &[])
            .unwrap();
        assert_eq!(plan.guidance_items, vec!["the origin", "the harm"]);
        assert_eq!(t.request_count(Operation::Reward), 0);
    }

    #[test]
    fn ablations_restrict_edit_kinds() {
        let (e, t) = editor(
            ScriptedTransport::new().on_generate(&["condense"], ["g"]),
            EditorConfig { allow_remove_modify: false, use_reward_model: false, ..EditorConfig::default() },
        );
        let plan = e.compile_plan(&claim(), &[instr(1, "drop step 1")], &trace3(), &[]).unwrap();
        assert_eq!(plan.edits(), vec![TraceEdit::guide("g", 1).unwrap()]);
        assert!(t.requests().iter().all(|(_, _, p)| !p.to_string().contains("KIND=")));

        let (e, _) = editor(
            ScriptedTransport::new().on_generate(&["KIND="], ["KIND=GUIDE; STEP=NONE"]),
            EditorConfig { allow_guidance: false, ..EditorConfig::default() },
        );
        let plan = e.compile_plan(&claim(), &[instr(1, "broader")], &trace3(), &[]).unwrap();
        assert!(plan.edits().is_empty());
        assert!(matches!(plan.entries[0].outcome, PlanOutcome::Skipped { .. }));
    }

    #[test]
    fn plan_fails_only_when_every_instruction_fails() {
        let t = ScriptedTransport::new()
            .on_generate(&["KIND=", "good"], ["KIND=REMOVE; STEP=1"])
            .on_generate(&["KIND="], ["no idea"]);
        let (e, _) = editor(t, EditorConfig::default());
        let plan = e.compile_plan(&claim(), &[instr(1, "bad"), instr(2, "good")], &trace3(), &[]).unwrap();
        assert!(matches!(plan.entries[0].outcome, PlanOutcome::Failed { .. }));
        assert_eq!(plan.edits(), vec![TraceEdit::remove(1, 2)]);
        assert!(matches!(
            e.compile_plan(&claim(), &[instr(1, "bad")], &trace3(), &[]),
            Err(EditorError::AllInstructionsFailed(_))
        ));
    }

    #[test]
    fn argmax_oracle() {
        assert_eq!(argmax_first(&[21, 30, 18, 30]), 1);
        assert_eq!(argmax_first(&[5, 5, 5]), 0);
        assert_eq!(argmax_first(&[1]), 0);
    }
}

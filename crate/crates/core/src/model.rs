//! Domain types and the pure trace-edit algebra.
//!
//! A [`ThinkingTrace`] is an ordered list of [`ReasoningStep`]s whose indices are
//! stable across edits: removing a step never renumbers its neighbours, and new
//! steps are numbered from a high-water mark so anchors used by feedback and the
//! review UI stay valid for the whole session.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default marker opening the model's thinking block.
pub const THINK_OPEN: &str = "<think>";
/// Default marker closing the model's thinking block.
pub const THINK_CLOSE: &str = "</think>";

const GUIDANCE_HEAD: &str = "\n\nBefore finalizing, I must also account for the following points: ";
const GUIDANCE_TAIL: &str = ". Let me revise my analysis accordingly.\n";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("claim text is empty")]
    EmptyClaim,
    #[error("a veracity label set needs at least two labels, got {0}")]
    TooFewLabels(usize),
    #[error("duplicate veracity label {0:?}")]
    DuplicateLabel(String),
    #[error("empty veracity label")]
    EmptyLabel,
    #[error("{0} text is empty")]
    EmptyText(&'static str),
    #[error("step {0} does not exist in the trace")]
    UnknownStepIndex(u32),
    #[error("more than one remove/modify edit targets step {0}")]
    ConflictingEdits(u32),
    #[error("evidence score is not finite")]
    NonFiniteScore,
    #[error("step indices are not strictly increasing at {0}")]
    UnorderedSteps(u32),
}

fn fold(label: &str) -> String {
    label.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl Claim {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, ModelError> {
        let claim = Self {
            id: id.into(),
            text: text.into(),
            source: None,
        };
        claim.validate()?;
        Ok(claim)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.text.trim().is_empty() {
            return Err(ModelError::EmptyClaim);
        }
        Ok(())
    }
}

/// User-supplied, organization-specific veracity scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn new<I, S>(labels: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(ModelError::TooFewLabels(labels.len()));
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if label.trim().is_empty() {
                return Err(ModelError::EmptyLabel);
            }
            if !seen.insert(fold(label)) {
                return Err(ModelError::DuplicateLabel(label.clone()));
            }
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Case-folded, trimmed lookup. Returns the canonical spelling from the set.
    pub fn resolve(&self, raw: &str) -> Option<&str> {
        let wanted = fold(raw);
        self.labels
            .iter()
            .find(|l| fold(l) == wanted)
            .map(String::as_str)
    }

    pub fn contains(&self, raw: &str) -> bool {
        self.resolve(raw).is_some()
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = ModelError;

    fn try_from(labels: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(labels)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(set: LabelSet) -> Self {
        set.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOrigin {
    Initial,
    Continuation,
    Modified,
    /// Guidance tokens folded into the trace when generation continued past them.
    Guidance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub index: u32,
    pub text: String,
    pub origin: StepOrigin,
}

/// The shared scratchpad.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ThinkingTrace {
    pub steps: Vec<ReasoningStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<String>,
    /// Lowest index never handed out in this trace's lineage.
    #[serde(default)]
    next_index: u32,
}

impl ThinkingTrace {
    pub fn new(steps: Vec<ReasoningStep>) -> Self {
        let next_index = steps.iter().map(|s| s.index + 1).max().unwrap_or(0);
        Self {
            steps,
            guidance: None,
            next_index,
        }
    }

    pub fn from_texts<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(
            texts
                .into_iter()
                .enumerate()
                .map(|(i, t)| ReasoningStep {
                    index: i as u32,
                    text: t.into(),
                    origin: StepOrigin::Initial,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step(&self, index: u32) -> Option<&ReasoningStep> {
        self.steps.iter().find(|s| s.index == index)
    }

    /// Index the next appended step receives.
    pub fn next_index(&self) -> u32 {
        let from_steps = self.steps.iter().map(|s| s.index + 1).max().unwrap_or(0);
        self.next_index.max(from_steps)
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().map(|s| s.text.as_str())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut prev: Option<u32> = None;
        for step in &self.steps {
            if step.text.trim().is_empty() {
                return Err(ModelError::EmptyText("reasoning step"));
            }
            if let Some(p) = prev {
                if step.index <= p {
                    return Err(ModelError::UnorderedSteps(step.index));
                }
            }
            prev = Some(step.index);
        }
        if matches!(&self.guidance, Some(g) if g.trim().is_empty()) {
            return Err(ModelError::EmptyText("guidance"));
        }
        Ok(())
    }

    /// Step texts followed by the guidance block, joined by blank lines.
    ///
    /// This is the canonical serialization: [`segment_trace`] inverts it.
    pub fn body(&self) -> String {
        let mut blocks: Vec<&str> = self.steps.iter().map(|s| s.text.as_str()).collect();
        if let Some(g) = &self.guidance {
            blocks.push(g.trim());
        }
        blocks.join("\n\n")
    }

    /// Moves pending guidance into the step list as a [`StepOrigin::Guidance`] step.
    pub fn fold_guidance(&mut self) {
        if let Some(g) = self.guidance.take() {
            let index = self.next_index();
            self.steps.push(ReasoningStep {
                index,
                text: g.trim().to_string(),
                origin: StepOrigin::Guidance,
            });
            self.next_index = index + 1;
        }
    }

    /// Appends new steps, numbering them from the high-water mark.
    pub fn extend_texts<I, S>(&mut self, texts: I, origin: StepOrigin)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut index = self.next_index();
        for text in texts {
            self.steps.push(ReasoningStep {
                index,
                text: text.into(),
                origin,
            });
            index += 1;
        }
        self.next_index = index;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SolutionFlags {
    /// The predicted label did not match any entry of the label set.
    #[serde(default)]
    pub out_of_set_label: bool,
    /// The verifier ran without any retrieved evidence.
    #[serde(default)]
    pub empty_evidence: bool,
}

/// Verdict triple: label, explanation, trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Solution {
    pub label: String,
    pub explanation: String,
    pub trace: ThinkingTrace,
    #[serde(default)]
    pub flags: SolutionFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Author {
    Human,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackInstruction {
    pub id: u32,
    pub text: String,
    pub author: Author,
}

impl FeedbackInstruction {
    pub fn new(id: u32, text: impl Into<String>, author: Author) -> Result<Self, ModelError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ModelError::EmptyText("feedback instruction"));
        }
        Ok(Self { id, text, author })
    }

    pub fn human_batch<I, S>(texts: I) -> Result<Vec<Self>, ModelError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        texts
            .into_iter()
            .enumerate()
            .map(|(i, t)| Self::new(i as u32 + 1, t, Author::Human))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Remove,
    Modify,
    Guide,
}

/// One targeted change to a trace. `provenance` is the originating instruction id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEdit {
    Remove {
        target_index: u32,
        provenance: u32,
    },
    Modify {
        target_index: u32,
        replacement: String,
        provenance: u32,
    },
    Guide {
        guidance_item: String,
        provenance: u32,
    },
}

impl TraceEdit {
    pub fn remove(target_index: u32, provenance: u32) -> Self {
        Self::Remove {
            target_index,
            provenance,
        }
    }

    pub fn modify(
        target_index: u32,
        replacement: impl Into<String>,
        provenance: u32,
    ) -> Result<Self, ModelError> {
        let replacement = replacement.into();
        if replacement.trim().is_empty() {
            return Err(ModelError::EmptyText("modify replacement"));
        }
        Ok(Self::Modify {
            target_index,
            replacement,
            provenance,
        })
    }

    pub fn guide(item: impl Into<String>, provenance: u32) -> Result<Self, ModelError> {
        let guidance_item = item.into();
        if guidance_item.trim().is_empty() {
            return Err(ModelError::EmptyText("guidance item"));
        }
        Ok(Self::Guide {
            guidance_item,
            provenance,
        })
    }

    pub fn kind(&self) -> EditKind {
        match self {
            Self::Remove { .. } => EditKind::Remove,
            Self::Modify { .. } => EditKind::Modify,
            Self::Guide { .. } => EditKind::Guide,
        }
    }

    pub fn target_index(&self) -> Option<u32> {
        match self {
            Self::Remove { target_index, .. } | Self::Modify { target_index, .. } => {
                Some(*target_index)
            }
            Self::Guide { .. } => None,
        }
    }

    pub fn provenance(&self) -> u32 {
        match self {
            Self::Remove { provenance, .. }
            | Self::Modify { provenance, .. }
            | Self::Guide { provenance, .. } => *provenance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceDocument {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default, alias = "url")]
    pub locator: String,
    pub text: String,
    #[serde(default)]
    pub retrieval_score: f64,
}

impl EvidenceDocument {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.text.trim().is_empty() {
            return Err(ModelError::EmptyText("evidence document"));
        }
        if !self.retrieval_score.is_finite() {
            return Err(ModelError::NonFiniteScore);
        }
        Ok(())
    }
}

/// Split a raw thinking block into steps at blank-line boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentPolicy {
    pub first_index: u32,
    pub origin: StepOrigin,
}

impl Default for SegmentPolicy {
    fn default() -> Self {
        Self {
            first_index: 0,
            origin: StepOrigin::Initial,
        }
    }
}

/// Non-empty blocks of `raw` separated by whitespace-only lines.
pub fn split_blocks(raw: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in raw.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                blocks.push(current.join("\n").trim().to_string());
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        blocks.push(current.join("\n").trim().to_string());
    }
    blocks.retain(|b| !b.is_empty());
    blocks
}

pub fn segment_trace(raw: &str, policy: SegmentPolicy) -> ThinkingTrace {
    let steps: Vec<ReasoningStep> = split_blocks(raw)
        .into_iter()
        .enumerate()
        .map(|(i, text)| ReasoningStep {
            index: policy.first_index + i as u32,
            text,
            origin: policy.origin,
        })
        .collect();
    let mut trace = ThinkingTrace::new(steps);
    trace.next_index = trace.next_index.max(policy.first_index);
    trace
}

/// Render guide items with the fixed guidance template.
pub fn render_guidance(items: &[String]) -> String {
    let listed: Vec<String> = items
        .iter()
        .enumerate()
        .map(|(i, item)| format!("{}) {}", i + 1, item.trim()))
        .collect();
    format!("{GUIDANCE_HEAD}{}{GUIDANCE_TAIL}", listed.join("; "))
}

pub fn apply_edits(trace: &ThinkingTrace, edits: &[TraceEdit]) -> Result<ThinkingTrace, ModelError> {
    let mut targeted: HashMap<u32, &TraceEdit> = HashMap::new();
    let mut guide_items: Vec<String> = Vec::new();
    for edit in edits {
        match edit.target_index() {
            Some(index) => {
                if trace.step(index).is_none() {
                    return Err(ModelError::UnknownStepIndex(index));
                }
                if targeted.insert(index, edit).is_some() {
                    return Err(ModelError::ConflictingEdits(index));
                }
            }
            None => {
                if let TraceEdit::Guide { guidance_item, .. } = edit {
                    let item = guidance_item.trim().to_string();
                    if !guide_items.contains(&item) {
                        guide_items.push(item);
                    }
                }
            }
        }
    }

    let mut out = trace.clone();
    if !guide_items.is_empty() {
        // Guidance left over from an earlier round keeps its place in the step list.
        out.fold_guidance();
    }
    out.next_index = out.next_index();
    out.steps = out
        .steps
        .into_iter()
        .filter_map(|step| match targeted.get(&step.index) {
            Some(TraceEdit::Remove { .. }) => None,
            Some(TraceEdit::Modify { replacement, .. }) => Some(ReasoningStep {
                index: step.index,
                text: replacement.trim().to_string(),
                origin: StepOrigin::Modified,
            }),
            _ => Some(step),
        })
        .collect();
    if !guide_items.is_empty() {
        out.guidance = Some(render_guidance(&guide_items));
    }
    Ok(out)
}

/// Thinking-block markers; configurable per backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThinkMarkers {
    pub open: String,
    pub close: String,
}

impl Default for ThinkMarkers {
    fn default() -> Self {
        Self {
            open: THINK_OPEN.to_string(),
            close: THINK_CLOSE.to_string(),
        }
    }
}

/// Serialize a trace as an open thinking block to continue from.
///
/// The closing marker is never emitted, so the backend resumes inside the
/// thinking block instead of repeating the previous verdict.
pub fn render_continuation_prefix(trace: &ThinkingTrace, markers: &ThinkMarkers) -> String {
    let body = trace.body();
    if body.is_empty() {
        format!("{}\n", markers.open)
    } else {
        format!("{}\n{}\n", markers.open, body)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "change", rename_all = "snake_case")]
pub enum StepChange {
    Kept { index: u32 },
    Removed { index: u32 },
    Modified { step: ReasoningStep },
    Appended { step: ReasoningStep },
}

impl StepChange {
    pub fn index(&self) -> u32 {
        match self {
            Self::Kept { index } | Self::Removed { index } => *index,
            Self::Modified { step } | Self::Appended { step } => step.index,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Kept { .. } => "kept",
            Self::Removed { .. } => "removed",
            Self::Modified { .. } => "modified",
            Self::Appended { .. } => "appended",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceDiff {
    pub changes: Vec<StepChange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<String>,
}

impl TraceDiff {
    /// Rebuild the `after` trace from `before` and this diff.
    pub fn replay(&self, before: &ThinkingTrace) -> ThinkingTrace {
        let by_index: HashMap<u32, &ReasoningStep> =
            before.steps.iter().map(|s| (s.index, s)).collect();
        let mut steps: BTreeMap<u32, ReasoningStep> = BTreeMap::new();
        for change in &self.changes {
            match change {
                StepChange::Kept { index } => {
                    if let Some(step) = by_index.get(index) {
                        steps.insert(*index, (*step).clone());
                    }
                }
                StepChange::Removed { .. } => {}
                StepChange::Modified { step } | StepChange::Appended { step } => {
                    steps.insert(step.index, step.clone());
                }
            }
        }
        let mut trace = ThinkingTrace::new(steps.into_values().collect());
        trace.next_index = trace.next_index.max(before.next_index());
        trace.guidance = self.guidance.clone();
        trace
    }
}

pub fn diff_traces(before: &ThinkingTrace, after: &ThinkingTrace) -> TraceDiff {
    let after_by_index: HashMap<u32, &ReasoningStep> =
        after.steps.iter().map(|s| (s.index, s)).collect();
    let before_indices: HashSet<u32> = before.steps.iter().map(|s| s.index).collect();
    let mut changes = Vec::with_capacity(before.len().max(after.len()));
    for step in &before.steps {
        match after_by_index.get(&step.index) {
            None => changes.push(StepChange::Removed { index: step.index }),
            Some(now) if *now == step => changes.push(StepChange::Kept { index: step.index }),
            Some(now) => changes.push(StepChange::Modified {
                step: (*now).clone(),
            }),
        }
    }
    for step in &after.steps {
        if !before_indices.contains(&step.index) {
            changes.push(StepChange::Appended { step: step.clone() });
        }
    }
    TraceDiff {
        changes,
        guidance: after.guidance.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace3() -> ThinkingTrace {
        ThinkingTrace::from_texts(["r0", "r1", "r2"])
    }

    #[test]
    fn empty_raw_gives_empty_trace() {
        assert!(segment_trace("", SegmentPolicy::default()).is_empty());
        assert!(segment_trace("  \n \n\t\n", SegmentPolicy::default()).is_empty());
    }

    #[test]
    fn two_paragraphs_two_steps() {
        let t = segment_trace("A.\n\nB.", SegmentPolicy::default());
        let got: Vec<(u32, &str)> = t.steps.iter().map(|s| (s.index, s.text.as_str())).collect();
        assert_eq!(got, vec![(0, "A."), (1, "B.")]);
    }

    #[test]
    fn blank_lines_with_whitespace_split_and_single_newlines_do_not() {
        let t = segment_trace("line one\nline two\n  \n\n\nnext", SegmentPolicy::default());
        assert_eq!(t.len(), 2);
        assert_eq!(t.steps[0].text, "line one\nline two");
        assert_eq!(t.steps[1].text, "next");
    }

    #[test]
    fn crlf_input_segments() {
        let t = segment_trace("A.\r\n\r\nB.\r\n", SegmentPolicy::default());
        assert_eq!(t.texts().collect::<Vec<_>>(), vec!["A.", "B."]);
    }

    #[test]
    fn remove_keeps_indices() {
        let out = apply_edits(&trace3(), &[TraceEdit::remove(1, 1)]).unwrap();
        let idx: Vec<u32> = out.steps.iter().map(|s| s.index).collect();
        assert_eq!(idx, vec![0, 2]);
    }

    #[test]
    fn empty_edit_list_is_identity() {
        let t = trace3();
        assert_eq!(apply_edits(&t, &[]).unwrap(), t);
    }

    #[test]
    fn modify_and_guide_render_template() {
        let t = ThinkingTrace::from_texts(["r0", "r1"]);
        let edits = vec![
            TraceEdit::modify(0, "X", 1).unwrap(),
            TraceEdit::guide("check source authenticity", 2).unwrap(),
        ];
        let out = apply_edits(&t, &edits).unwrap();
        assert_eq!(
            out.steps[0],
            ReasoningStep {
                index: 0,
                text: "X".into(),
                origin: StepOrigin::Modified
            }
        );
        assert_eq!(out.steps[1], t.steps[1]);
        let expected = "\n\nBefore finalizing, I must also account for the following points: \
                        1) check source authenticity. Let me revise my analysis accordingly.\n";
        assert_eq!(out.guidance.as_deref(), Some(expected));
    }

    #[test]
    fn guide_items_deduplicated_in_order() {
        let t = trace3();
        let edits = vec![
            TraceEdit::guide("b", 1).unwrap(),
            TraceEdit::guide("a", 2).unwrap(),
            TraceEdit::guide("b", 3).unwrap(),
        ];
        let out = apply_edits(&t, &edits).unwrap();
        assert_eq!(out.guidance.unwrap(), render_guidance(&["b".into(), "a".into()]));
    }

    #[test]
    fn unknown_index_and_conflicts_rejected() {
        let t = trace3();
        assert_eq!(
            apply_edits(&t, &[TraceEdit::remove(7, 1)]),
            Err(ModelError::UnknownStepIndex(7))
        );
        let edits = vec![TraceEdit::remove(1, 1), TraceEdit::modify(1, "y", 2).unwrap()];
        assert_eq!(apply_edits(&t, &edits), Err(ModelError::ConflictingEdits(1)));
    }

    #[test]
    fn input_is_untouched() {
        let t = trace3();
        let snapshot = t.clone();
        let _ = apply_edits(&t, &[TraceEdit::modify(2, "z", 1).unwrap()]).unwrap();
        assert_eq!(t, snapshot);
    }

    #[test]
    fn prefix_rendering() {
        let m = ThinkMarkers::default();
        assert_eq!(render_continuation_prefix(&ThinkingTrace::default(), &m), "<think>\n");
        let t = ThinkingTrace::from_texts(["A", "B"]);
        assert_eq!(render_continuation_prefix(&t, &m), "<think>\nA\n\nB\n");
        let mut g = ThinkingTrace::from_texts(["A"]);
        g.guidance = Some("G".into());
        let out = render_continuation_prefix(&g, &m);
        assert!(out.ends_with("G\n"));
        assert!(!out.contains("</think>"));
    }

    #[test]
    fn templated_guidance_renders_byte_exact() {
        let t = apply_edits(
            &ThinkingTrace::from_texts(["A"]),
            &[TraceEdit::guide("x", 1).unwrap()],
        )
        .unwrap();
        let expected = format!("<think>\nA{}", render_guidance(&["x".into()]));
        assert_eq!(render_continuation_prefix(&t, &ThinkMarkers::default()), expected);
    }

    #[test]
    fn diff_examples() {
        let t = trace3();
        assert!(diff_traces(&t, &t)
            .changes
            .iter()
            .all(|c| matches!(c, StepChange::Kept { .. })));
        let after = apply_edits(&t, &[TraceEdit::remove(1, 1)]).unwrap();
        let removed: Vec<u32> = diff_traces(&t, &after)
            .changes
            .iter()
            .filter(|c| matches!(c, StepChange::Removed { .. }))
            .map(StepChange::index)
            .collect();
        assert_eq!(removed, vec![1]);
    }

    #[test]
    fn appended_steps_never_reuse_removed_indices() {
        let t = trace3();
        let mut after = apply_edits(&t, &[TraceEdit::remove(2, 1)]).unwrap();
        after.extend_texts(["new"], StepOrigin::Continuation);
        assert_eq!(after.steps.last().unwrap().index, 3);
        let diff = diff_traces(&t, &after);
        assert_eq!(diff.replay(&t), after);
    }

    #[test]
    fn fold_guidance_becomes_a_step() {
        let mut t = apply_edits(&trace3(), &[TraceEdit::guide("g", 1).unwrap()]).unwrap();
        let body = t.body();
        t.fold_guidance();
        assert!(t.guidance.is_none());
        assert_eq!(t.steps.last().unwrap().origin, StepOrigin::Guidance);
        assert_eq!(t.body(), body);
    }

    #[test]
    fn label_set_rules() {
        assert_eq!(LabelSet::new(["true"]), Err(ModelError::TooFewLabels(1)));
        assert!(matches!(
            LabelSet::new(["True", " true "]),
            Err(ModelError::DuplicateLabel(_))
        ));
        let set = LabelSet::new(["true", "mixture", "false"]).unwrap();
        assert_eq!(set.resolve(" TRUE "), Some("true"));
        assert_eq!(set.resolve("mostly true"), None);
    }

    #[test]
    fn claim_and_edit_invariants() {
        assert_eq!(Claim::new("c", "   "), Err(ModelError::EmptyClaim));
        assert!(TraceEdit::modify(0, " ", 1).is_err());
        assert!(TraceEdit::guide("", 1).is_err());
        assert!(FeedbackInstruction::new(1, "\n", Author::Human).is_err());
    }

    #[test]
    fn serde_shapes() {
        let edit = TraceEdit::remove(2, 5);
        let json = serde_json::to_value(&edit).unwrap();
        assert_eq!(json["kind"], "remove");
        assert_eq!(json["target_index"], 2);
        let set: LabelSet = serde_json::from_str(r#"["a","b"]"#).unwrap();
        assert_eq!(set.len(), 2);
        assert!(serde_json::from_str::<LabelSet>(r#"["a"]"#).is_err());
    }
}

//! Rubric-driven grading of a solution against a gold fact-check.
//!
//! The oracle stands in for the human expert during automatic evaluation.
//! Closed-set checks on the label are programmatic; the remaining rubric rows
//! are put to a judge, one call per row (one call covers all steps).

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{overlap_entailment, Gateway, GatewayError, GenerationRequest, Message};
use crate::model::{
    Author, Claim, EvidenceDocument, FeedbackInstruction, LabelSet, Solution, StepOrigin,
};
use crate::verifier::render_evidence;

const RUBRIC_FILE: &str = include_str!("../assets/criteria/oracle.json");
const ROW_PROMPT: &str = include_str!("../assets/prompts/oracle_row.txt");
const STEPS_PROMPT: &str = include_str!("../assets/prompts/oracle_steps.txt");

pub const OUT_OF_SET_FEEDBACK: &str =
    "The predicted label is outside the provided set of veracity labels; choose exactly one label from the set.";
pub const LABEL_MISMATCH_FEEDBACK: &str =
    "The veracity label is not supported by the facts of the case; re-examine which label the evidence actually supports.";

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("expert knowledge is incomplete: {0}")]
    IncompleteKnowledge(&'static str),
    #[error("rubric file: {0}")]
    Rubric(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Gold fact-check available only to the oracle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticExpertKnowledge {
    pub gold_label: String,
    pub gold_explanation: String,
    pub article: String,
}

impl SyntheticExpertKnowledge {
    pub fn validate(&self, labels: &LabelSet) -> Result<(), OracleError> {
        if !labels.contains(&self.gold_label) {
            return Err(OracleError::IncompleteKnowledge("gold label outside the label set"));
        }
        if self.gold_explanation.trim().is_empty() {
            return Err(OracleError::IncompleteKnowledge("empty gold explanation"));
        }
        if self.article.trim().is_empty() {
            return Err(OracleError::IncompleteKnowledge("empty article"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowTarget {
    Veracity,
    Explanation,
    Step,
    Trace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowCheck {
    Programmatic,
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerForm {
    YesNo,
    CorrectIncorrect,
}

impl AnswerForm {
    fn options(self) -> &'static str {
        match self {
            Self::YesNo => "Yes or No",
            Self::CorrectIncorrect => "Correct or Incorrect",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricRow {
    pub id: String,
    pub criterion: String,
    pub target: RowTarget,
    pub check: RowCheck,
    pub question: String,
    pub answer_form: AnswerForm,
}

#[derive(Debug, Deserialize)]
struct RubricFile {
    version: u32,
    rows: Vec<RubricRow>,
}

pub fn parse_rubric(json: &str) -> Result<Vec<RubricRow>, OracleError> {
    let file: RubricFile =
        serde_json::from_str(json).map_err(|e| OracleError::Rubric(e.to_string()))?;
    if file.version != 1 {
        return Err(OracleError::Rubric(format!("unsupported version {}", file.version)));
    }
    if file.rows.is_empty() {
        return Err(OracleError::Rubric("no rows".into()));
    }
    Ok(file.rows)
}

pub fn default_rubric() -> Vec<RubricRow> {
    parse_rubric(RUBRIC_FILE).expect("shipped oracle rubric is valid")
}

/// What a finding is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Veracity,
    Explanation,
    Step(u32),
    Trace,
}

impl Target {
    /// Prefix for the feedback instruction derived from a finding.
    pub fn anchor(self) -> String {
        match self {
            Self::Veracity => "Verdict".into(),
            Self::Explanation => "Explanation".into(),
            Self::Step(i) => format!("Step {i}"),
            Self::Trace => "Trace".into(),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Veracity => f.write_str("veracity"),
            Self::Explanation => f.write_str("explanation"),
            Self::Step(i) => write!(f, "step:{i}"),
            Self::Trace => f.write_str("trace"),
        }
    }
}

impl Serialize for Target {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Target {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        match raw.as_str() {
            "veracity" => Ok(Self::Veracity),
            "explanation" => Ok(Self::Explanation),
            "trace" => Ok(Self::Trace),
            other => other
                .strip_prefix("step:")
                .and_then(|i| i.parse().ok())
                .map(Self::Step)
                .ok_or_else(|| serde::de::Error::custom(format!("unknown target {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Judgment {
    Pass,
    Fail,
    /// The judge's answer could not be read; never turned into feedback.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub criterion: String,
    pub target: Target,
    pub judgment: Judgment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
}

impl Finding {
    pub fn pass(criterion: &str, target: Target) -> Self {
        Self {
            criterion: criterion.to_string(),
            target,
            judgment: Judgment::Pass,
            feedback: None,
        }
    }

    pub fn fail(criterion: &str, target: Target, feedback: impl Into<String>) -> Self {
        Self {
            criterion: criterion.to_string(),
            target,
            judgment: Judgment::Fail,
            feedback: Some(feedback.into()),
        }
    }

    fn inconclusive(criterion: &str, target: Target) -> Self {
        Self {
            criterion: criterion.to_string(),
            target,
            judgment: Judgment::Inconclusive,
            feedback: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OracleReport {
    pub findings: Vec<Finding>,
}

impl OracleReport {
    pub fn count(&self, judgment: Judgment) -> usize {
        self.findings.iter().filter(|f| f.judgment == judgment).count()
    }

    pub fn accepted(&self) -> bool {
        self.count(Judgment::Fail) == 0
    }
}

/// Who answers the model-checked rubric rows.
#[derive(Debug, Clone)]
pub enum OracleJudge {
    Model(Gateway),
    /// Offline stand-in: token-overlap rules against the gold fact-check.
    Overlap { threshold: f64 },
}

/// Everything the oracle looks at for one solution.
#[derive(Debug, Clone, Copy)]
pub struct OracleInput<'a> {
    pub claim: &'a Claim,
    pub labels: &'a LabelSet,
    pub evidence: &'a [EvidenceDocument],
    pub solution: &'a Solution,
}

#[derive(Debug, Clone)]
pub struct Oracle {
    judge: OracleJudge,
    rows: Vec<RubricRow>,
}

fn parse_answer(text: &str, form: AnswerForm) -> Option<(bool, Option<String>)> {
    let mut answer = None;
    let mut feedback = String::new();
    let mut in_feedback = false;
    for line in text.lines() {
        let trimmed = line.trim().trim_start_matches('*');
        let upper = trimmed.to_uppercase();
        if let Some(rest) = upper.strip_prefix("ANSWER:") {
            let word: String = rest.trim().chars().take_while(|c| c.is_alphabetic()).collect();
            answer = match (form, word.as_str()) {
                (AnswerForm::YesNo, "YES") | (AnswerForm::CorrectIncorrect, "CORRECT") => Some(true),
                (AnswerForm::YesNo, "NO") | (AnswerForm::CorrectIncorrect, "INCORRECT") => Some(false),
                _ => None,
            };
            in_feedback = false;
        } else if upper.starts_with("FEEDBACK:") {
            feedback = trimmed["FEEDBACK:".len()..].trim().to_string();
            in_feedback = true;
        } else if in_feedback {
            feedback.push('\n');
            feedback.push_str(line);
        }
    }
    let feedback = feedback.trim().to_string();
    let feedback = (!feedback.is_empty() && !feedback.eq_ignore_ascii_case("none")).then_some(feedback);
    answer.map(|a| (a, feedback))
}

/// `STEP <id>: Correct` / `STEP <id>: Incorrect - feedback` lines.
pub fn parse_step_judgments(text: &str) -> Vec<(u32, bool, Option<String>)> {
    let mut out = Vec::new();
    for line in text.lines() {
        let t = line.trim().trim_start_matches(['*', '-', ' ']);
        let Some(rest) = t.get(..4).filter(|h| h.eq_ignore_ascii_case("STEP")).map(|_| &t[4..]) else {
            continue;
        };
        let rest = rest.trim_start();
        let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
        let Ok(index) = digits.parse::<u32>() else {
            continue;
        };
        let Some(verdict) = rest[digits.len()..].trim_start().strip_prefix(':') else {
            continue;
        };
        let verdict = verdict.trim().trim_start_matches('*').trim();
        let word: String = verdict.chars().take_while(|c| c.is_alphabetic()).collect();
        match word.to_uppercase().as_str() {
            "CORRECT" => out.push((index, true, None)),
            "INCORRECT" => {
                let fb = verdict[word.len()..]
                    .trim_start_matches(['*', ' ', '-', ':', '–'])
                    .trim()
                    .to_string();
                out.push((index, false, (!fb.is_empty()).then_some(fb)));
            }
            _ => {}
        }
    }
    out
}

fn generic_feedback(row: &RubricRow) -> String {
    format!("This does not yet satisfy the criterion \"{}\"; revisit it.", row.criterion)
}

impl Oracle {
    pub fn new(judge: OracleJudge) -> Self {
        Self {
            judge,
            rows: default_rubric(),
        }
    }

    pub fn with_rows(mut self, rows: Vec<RubricRow>) -> Self {
        self.rows = rows;
        self
    }

    pub fn rows(&self) -> &[RubricRow] {
        &self.rows
    }

    pub fn evaluate(
        &self,
        input: OracleInput<'_>,
        knowledge: &SyntheticExpertKnowledge,
    ) -> Result<OracleReport, OracleError> {
        knowledge.validate(input.labels)?;
        let mut findings = Vec::new();
        for row in &self.rows {
            match (row.check, row.target) {
                (RowCheck::Programmatic, _) => findings.push(self.programmatic(row, input, knowledge)),
                (RowCheck::Model, RowTarget::Step) => {
                    findings.extend(self.judge_steps(row, input, knowledge)?)
                }
                (RowCheck::Model, _) => findings.push(self.judge_row(row, input, knowledge)?),
            }
        }
        Ok(OracleReport { findings })
    }

    fn programmatic(
        &self,
        row: &RubricRow,
        input: OracleInput<'_>,
        knowledge: &SyntheticExpertKnowledge,
    ) -> Finding {
        let predicted = input.solution.label.trim();
        let ok = match row.id.as_str() {
            "label_in_set" => input.labels.contains(predicted),
            // Both sides are case-folded; the gold label is never echoed back.
            _ => predicted.to_lowercase() == knowledge.gold_label.trim().to_lowercase(),
        };
        if ok {
            Finding::pass(&row.id, Target::Veracity)
        } else if row.id == "label_in_set" {
            Finding::fail(&row.id, Target::Veracity, OUT_OF_SET_FEEDBACK)
        } else {
            Finding::fail(&row.id, Target::Veracity, LABEL_MISMATCH_FEEDBACK)
        }
    }

    fn judge_row(
        &self,
        row: &RubricRow,
        input: OracleInput<'_>,
        knowledge: &SyntheticExpertKnowledge,
    ) -> Result<Finding, OracleError> {
        let (target, artifact_name, artifact) = match row.target {
            RowTarget::Explanation => (Target::Explanation, "fact-checking explanation", input.solution.explanation.clone()),
            _ => (Target::Trace, "reasoning trace", input.solution.trace.body()),
        };
        let gateway = match &self.judge {
            OracleJudge::Overlap { threshold } => {
                let score = match row.id.as_str() {
                    "justification" => overlap_entailment(
                        &format!("{}\n{}", knowledge.gold_explanation, knowledge.article),
                        &artifact,
                    ),
                    "exact_wording" => overlap_entailment(&artifact, &input.claim.text),
                    _ => overlap_entailment(&artifact, &knowledge.article),
                };
                return Ok(if score >= *threshold {
                    Finding::pass(&row.id, target)
                } else {
                    Finding::fail(&row.id, target, generic_feedback(row))
                });
            }
            OracleJudge::Model(g) => g,
        };
        let reference_extra = if row.target == RowTarget::Explanation {
            format!("\nReference explanation:\n{}\n", knowledge.gold_explanation.trim())
        } else {
            String::new()
        };
        let prompt = ROW_PROMPT
            .replace("{claim}", input.claim.text.trim())
            .replace("{article}", knowledge.article.trim())
            .replace("{reference_extra}", &reference_extra)
            .replace("{artifact_name}", artifact_name)
            .replace("{artifact}", &artifact)
            .replace("{question}", &row.question)
            .replace("{answers}", row.answer_form.options());
        let out = gateway.generate(&GenerationRequest::chat(vec![Message::user(prompt)], 1024, 0.0))?;
        Ok(match parse_answer(&out.text, row.answer_form) {
            Some((true, _)) => Finding::pass(&row.id, target),
            Some((false, feedback)) => {
                Finding::fail(&row.id, target, feedback.unwrap_or_else(|| generic_feedback(row)))
            }
            None => {
                tracing::warn!(row = %row.id, reply = %out.text, "unparseable judge answer; row inconclusive");
                Finding::inconclusive(&row.id, target)
            }
        })
    }

    fn judge_steps(
        &self,
        row: &RubricRow,
        input: OracleInput<'_>,
        knowledge: &SyntheticExpertKnowledge,
    ) -> Result<Vec<Finding>, OracleError> {
        // Guidance steps are our own steering text, not the model's reasoning.
        let steps: Vec<_> = input
            .solution
            .trace
            .steps
            .iter()
            .filter(|s| s.origin != StepOrigin::Guidance)
            .collect();
        if steps.is_empty() {
            return Ok(vec![Finding::pass(&row.id, Target::Trace)]);
        }
        let verdicts: Vec<(u32, bool, Option<String>)> = match &self.judge {
            OracleJudge::Overlap { threshold } => steps
                .iter()
                .map(|s| {
                    let ok = overlap_entailment(&knowledge.article, &s.text) >= *threshold;
                    (s.index, ok, None)
                })
                .collect(),
            OracleJudge::Model(gateway) => {
                let listed = steps
                    .iter()
                    .map(|s| format!("STEP {}: {}", s.index, s.text))
                    .collect::<Vec<_>>()
                    .join("\n\n");
                let prompt = STEPS_PROMPT
                    .replace("{claim}", input.claim.text.trim())
                    .replace("{evidence}", &render_evidence(input.evidence, 4000))
                    .replace("{article}", knowledge.article.trim())
                    .replace("{steps}", &listed)
                    .replace("{question}", &row.question);
                let out = gateway
                    .generate(&GenerationRequest::chat(vec![Message::user(prompt)], 2048, 0.0))?;
                parse_step_judgments(&out.text)
            }
        };
        Ok(steps
            .iter()
            .map(|s| {
                let target = Target::Step(s.index);
                match verdicts.iter().find(|(i, _, _)| *i == s.index) {
                    Some((_, true, _)) => Finding::pass(&row.id, target),
                    Some((_, false, fb)) => Finding::fail(
                        &row.id,
                        target,
                        fb.clone().unwrap_or_else(|| generic_feedback(row)),
                    ),
                    None => {
                        tracing::warn!(step = s.index, "judge gave no verdict for step; inconclusive");
                        Finding::inconclusive(&row.id, target)
                    }
                }
            })
            .collect())
    }
}

/// One anchored instruction per failing finding, in report order, at most `cap`.
///
/// An empty result means the solution is accepted.
pub fn report_to_feedback(report: &OracleReport, cap: usize) -> Vec<FeedbackInstruction> {
    report
        .findings
        .iter()
        .filter(|f| f.judgment == Judgment::Fail)
        .take(cap)
        .enumerate()
        .map(|(i, f)| FeedbackInstruction {
            id: i as u32 + 1,
            text: format!(
                "{}: {}",
                f.target.anchor(),
                f.feedback.as_deref().unwrap_or("revisit this part").trim()
            ),
            author: Author::Oracle,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Capabilities, Operation, ProviderProfile, Role, ScriptedTransport};
    use crate::model::ThinkingTrace;
    use std::sync::Arc;

    fn labels() -> LabelSet {
        LabelSet::new(["true", "false", "mixture"]).unwrap()
    }

    fn knowledge() -> SyntheticExpertKnowledge {
        SyntheticExpertKnowledge {
            gold_label: "false".into(),
            gold_explanation: "The ban covered only assault weapons.".into(),
            article: "The proposal covered assault weapons.\n\nIt did not cover handguns.".into(),
        }
    }

    fn solution(label: &str) -> Solution {
        Solution {
            label: label.into(),
            explanation: "e".into(),
            trace: ThinkingTrace::from_texts(["s0", "s1", "s2"]),
            flags: Default::default(),
        }
    }

    fn model_oracle(t: ScriptedTransport) -> (Oracle, Arc<ScriptedTransport>) {
        let t = Arc::new(t);
        let g = Gateway::new(Role::Oracle, ProviderProfile::new("oracle", Capabilities::all()), t.clone());
        (Oracle::new(OracleJudge::Model(g)), t)
    }

    #[test]
    fn shipped_rubric_rows() {
        let ids: Vec<String> = default_rubric().into_iter().map(|r| r.id).collect();
        assert_eq!(
            ids,
            vec!["label_match", "label_in_set", "justification", "step_correctness", "missing_reasoning", "harm_potential", "exact_wording"]
        );
    }

    #[test]
    fn programmatic_rows_need_no_model() {
        let (o, t) = model_oracle(ScriptedTransport::new());
        let o = o.with_rows(default_rubric().into_iter().filter(|r| r.check == RowCheck::Programmatic).collect());
        let claim = Claim::new("c", "x").unwrap();
        let s = solution("FALSE");
        let r = o
            .evaluate(OracleInput { claim: &claim, labels: &labels(), evidence: &[], solution: &s }, &knowledge())
            .unwrap();
        assert!(r.accepted());
        assert_eq!(t.requests().len(), 0);

        let s = solution("pants on fire");
        let r = o
            .evaluate(OracleInput { claim: &claim, labels: &labels(), evidence: &[], solution: &s }, &knowledge())
            .unwrap();
        assert_eq!(r.findings[1].feedback.as_deref(), Some(OUT_OF_SET_FEEDBACK));
        assert!(OUT_OF_SET_FEEDBACK.contains("outside the provided set"));
    }

    #[test]
    fn scripted_step_failure_becomes_anchored_finding() {
        let t = ScriptedTransport::new()
            .on_generate(&["Reasoning steps:"], ["STEP 0: Correct\nSTEP 1: Correct\nSTEP 2: Incorrect - drop the speculation"])
            .on_generate(&["ANSWER:"], ["ANSWER: Yes\nFEEDBACK: NONE"]);
        let (o, t) = model_oracle(t.on_generate(&[], ["unused"]));
        let claim = Claim::new("c", "x").unwrap();
        let s = solution("false");
        let r = o
            .evaluate(OracleInput { claim: &claim, labels: &labels(), evidence: &[], solution: &s }, &knowledge())
            .unwrap();
        let fail = r.findings.iter().find(|f| f.judgment == Judgment::Fail).unwrap();
        assert_eq!(fail.target, Target::Step(2));
        assert_eq!(fail.feedback.as_deref(), Some("drop the speculation"));
        let f = report_to_feedback(&r, 5);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].text, "Step 2: drop the speculation");
        // five model rows, one call each
        assert_eq!(t.request_count(Operation::Generate), 5);
    }

    #[test]
    fn unparseable_row_is_inconclusive_and_silent() {
        let t = ScriptedTransport::new()
            .on_generate(&["Reasoning steps:"], ["STEP 0: Correct\nSTEP 1: Correct"])
            .on_generate(&["ANSWER:"], ["I think it is mostly fine"]);
        let (o, _) = model_oracle(t);
        let claim = Claim::new("c", "x").unwrap();
        let s = solution("false");
        let r = o
            .evaluate(OracleInput { claim: &claim, labels: &labels(), evidence: &[], solution: &s }, &knowledge())
            .unwrap();
        // four single-answer rows plus the step the judge skipped
        assert_eq!(r.count(Judgment::Inconclusive), 5);
        assert!(report_to_feedback(&r, 5).is_empty());
    }

    #[test]
    fn feedback_cap_and_order() {
        let findings = (0..7)
            .map(|i| Finding::fail("step_correctness", Target::Step(i), format!("f{i}")))
            .collect();
        let f = report_to_feedback(&OracleReport { findings }, 5);
        let texts: Vec<_> = f.iter().map(|i| i.text.as_str()).collect();
        assert_eq!(texts, vec!["Step 0: f0", "Step 1: f1", "Step 2: f2", "Step 3: f3", "Step 4: f4"]);
        assert!(f.iter().all(|i| i.author == Author::Oracle));
    }

    #[test]
    fn gold_solution_passes_under_overlap_judge() {
        let k = knowledge();
        let claim = Claim::new("c", "The proposal covered handguns").unwrap();
        let s = Solution {
            label: k.gold_label.clone(),
            explanation: k.gold_explanation.clone(),
            trace: ThinkingTrace::from_texts(crate::model::split_blocks(&k.article)),
            flags: Default::default(),
        };
        let o = Oracle::new(OracleJudge::Overlap { threshold: 0.6 });
        let r = o
            .evaluate(OracleInput { claim: &claim, labels: &labels(), evidence: &[], solution: &s }, &k)
            .unwrap();
        assert!(r.accepted(), "{r:?}");
        assert!(report_to_feedback(&r, 5).is_empty());
    }

    #[test]
    fn target_serialization() {
        for t in [Target::Veracity, Target::Explanation, Target::Step(3), Target::Trace] {
            let s = serde_json::to_string(&t).unwrap();
            assert_eq!(serde_json::from_str::<Target>(&s).unwrap(), t);
        }
        assert_eq!(serde_json::to_string(&Target::Step(3)).unwrap(), "\"step:3\"");
    }

    #[test]
    fn step_line_parsing() {
        let v = parse_step_judgments("STEP 1: Correct\n**STEP 2:** Incorrect – remove it\nSTEP x: Correct");
        assert_eq!(v, vec![(1, true, None), (2, false, Some("remove it".into()))]);
    }
}

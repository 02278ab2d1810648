//! Autonomous test-time scaling over the verifier: best-of-N with an outcome
//! reward model, self-refinement, and step-level tree search scored by a
//! process reward model. None of these see gold data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Criterion, Gateway, GatewayError, GenerationRequest, Message};
use crate::model::{
    render_continuation_prefix, Claim, EvidenceDocument, LabelSet, Solution, ThinkingTrace,
};
use crate::verifier::{
    parse_verdict, render_evidence, render_solution, Verifier, VerifierError,
};

const PRM_FILE: &str = include_str!("../assets/criteria/prm.json");
const ORM_FILE: &str = include_str!("../assets/criteria/orm.json");
const CRITIQUE_PROMPT: &str = include_str!("../assets/prompts/self_critique.txt");
const REVISE_PROMPT: &str = include_str!("../assets/prompts/self_revise.txt");

#[derive(Debug, Error)]
pub enum ScalingError {
    #[error("{0}")]
    Precondition(String),
    #[error("every candidate failed: {}", .0.join("; "))]
    AllCandidatesFailed(Vec<String>),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Deserialize)]
struct CriteriaFile {
    criteria: Vec<Criterion>,
}

pub fn prm_criteria() -> Vec<Criterion> {
    serde_json::from_str::<CriteriaFile>(PRM_FILE)
        .expect("shipped PRM criteria are valid")
        .criteria
}

pub fn orm_criteria() -> Vec<Criterion> {
    serde_json::from_str::<CriteriaFile>(ORM_FILE)
        .expect("shipped ORM criteria are valid")
        .criteria
}

fn context_block(claim: &Claim, evidence: &[EvidenceDocument]) -> String {
    format!(
        "Claim: {}\n\nEvidence:\n{}",
        claim.text.trim(),
        render_evidence(evidence, 4000)
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub solution: Solution,
    pub total: u32,
    pub scores: Vec<(String, u8)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BestOfN {
    pub chosen: usize,
    /// One slot per sample; `None` where proposing or scoring failed.
    pub candidates: Vec<Option<ScoredCandidate>>,
}

impl BestOfN {
    pub fn solution(&self) -> &Solution {
        &self.candidates[self.chosen]
            .as_ref()
            .expect("chosen candidate is scored")
            .solution
    }
}

pub fn best_of_n(
    verifier: &Verifier,
    orm: &Gateway,
    claim: &Claim,
    evidence: &[EvidenceDocument],
    labels: &LabelSet,
    n: usize,
) -> Result<BestOfN, ScalingError> {
    if n < 2 {
        return Err(ScalingError::Precondition("best-of-N needs N >= 2".into()));
    }
    let criteria = orm_criteria();
    let context = context_block(claim, evidence);
    let markers = &verifier.config().markers;
    let mut candidates = Vec::with_capacity(n);
    let mut errors = Vec::new();
    for i in 0..n {
        let scored = verifier
            .propose(claim, evidence, labels)
            .map_err(ScalingError::from)
            .and_then(|solution| {
                let scores =
                    orm.score_reward(&criteria, &render_solution(&solution, markers), &context)?;
                Ok(ScoredCandidate {
                    solution,
                    total: scores.total,
                    scores: scores.scores,
                })
            });
        match scored {
            Ok(c) => candidates.push(Some(c)),
            Err(e) => {
                tracing::warn!(candidate = i, "candidate excluded: {e}");
                errors.push(format!("candidate {i}: {e}"));
                candidates.push(None);
            }
        }
    }
    let mut chosen: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if let Some(c) = c {
            if chosen.is_none_or(|b| c.total > candidates[b].as_ref().map_or(0, |x| x.total)) {
                chosen = Some(i);
            }
        }
    }
    match chosen {
        Some(chosen) => Ok(BestOfN { chosen, candidates }),
        None => Err(ScalingError::AllCandidatesFailed(errors)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfRefine {
    pub solution: Solution,
    pub critiques: Vec<String>,
    pub revisions: usize,
    pub stopped_early: bool,
    /// Set when a later round failed and the last good solution was kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn says_no_issues(critique: &str) -> bool {
    critique.to_lowercase().contains("no issues")
}

pub fn self_refine(
    verifier: &Verifier,
    claim: &Claim,
    evidence: &[EvidenceDocument],
    labels: &LabelSet,
    rounds: usize,
) -> Result<SelfRefine, ScalingError> {
    if rounds == 0 {
        return Err(ScalingError::Precondition("self-refine needs at least one round".into()));
    }
    let bundle = verifier.bundle(claim, evidence, labels);
    let markers = verifier.config().markers.clone();
    let mut current = verifier.propose(claim, evidence, labels)?;
    let mut out = SelfRefine {
        solution: current.clone(),
        critiques: Vec::new(),
        revisions: 0,
        stopped_early: false,
        error: None,
    };
    for round in 1..=rounds {
        let mut messages = bundle.messages();
        messages.push(Message::assistant(render_solution(&current, &markers)));
        messages.push(Message::user(CRITIQUE_PROMPT.trim()));
        let critique = match verifier.gateway().generate(&GenerationRequest::chat(
            messages.clone(),
            verifier.config().max_tokens,
            0.0,
        )) {
            Ok(c) => c.text.trim().to_string(),
            Err(e) => {
                out.error = Some(format!("round {round} critique: {e}"));
                break;
            }
        };
        out.critiques.push(critique.clone());
        if says_no_issues(&critique) {
            out.stopped_early = true;
            break;
        }
        messages.push(Message::assistant(critique.clone()));
        messages.push(Message::user(REVISE_PROMPT.trim().replace("{critique}", &critique)));
        match verifier.generate_chat(messages, labels, evidence.is_empty()) {
            Ok(s) => {
                current = s;
                out.revisions += 1;
                out.solution = current.clone();
            }
            Err(e) => {
                out.error = Some(format!("round {round} revision: {e}"));
                break;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MctsConfig {
    /// Number of expansions.
    pub budget: usize,
    pub branching: usize,
    pub exploration: f64,
    pub temperature: f64,
    pub step_max_tokens: u32,
    /// Nodes this deep are not expanded further.
    pub max_depth: usize,
}

impl Default for MctsConfig {
    fn default() -> Self {
        Self {
            budget: 16,
            branching: 3,
            exploration: 1.414,
            temperature: 0.8,
            step_max_tokens: 512,
            max_depth: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Full step prefix from the root.
    pub steps: Vec<String>,
    pub visits: u32,
    pub total_value: f64,
    /// Process reward of this node's last step, normalized to [0, 1].
    pub prior: f64,
    pub terminal: bool,
    pub expanded: bool,
    /// Text after the closing marker, for terminal nodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail: Option<String>,
}

impl SearchNode {
    pub fn q(&self) -> f64 {
        if self.visits == 0 {
            self.prior
        } else {
            self.total_value / f64::from(self.visits)
        }
    }
}

pub fn uct(child_q: f64, parent_visits: u32, child_visits: u32, c: f64) -> f64 {
    let n = f64::from(parent_visits.max(1));
    child_q + c * (n.ln() / (f64::from(child_visits) + 1.0)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTree {
    pub nodes: Vec<SearchNode>,
    pub passes: usize,
}

impl SearchTree {
    fn new() -> Self {
        Self {
            nodes: vec![SearchNode {
                id: 0,
                parent: None,
                children: Vec::new(),
                steps: Vec::new(),
                visits: 0,
                total_value: 0.0,
                prior: 0.0,
                terminal: false,
                expanded: false,
                tail: None,
            }],
            passes: 0,
        }
    }

    fn add(&mut self, parent: usize, step: String, prior: f64, terminal: bool, tail: Option<String>) -> usize {
        let id = self.nodes.len();
        let mut steps = self.nodes[parent].steps.clone();
        steps.push(step);
        self.nodes.push(SearchNode {
            id,
            parent: Some(parent),
            children: Vec::new(),
            steps,
            visits: 0,
            total_value: 0.0,
            prior,
            terminal,
            expanded: false,
            tail,
        });
        self.nodes[parent].children.push(id);
        id
    }

    fn backprop(&mut self, from: usize, value: f64) {
        let mut at = Some(from);
        while let Some(i) = at {
            self.nodes[i].visits += 1;
            self.nodes[i].total_value += value;
            at = self.nodes[i].parent;
        }
    }

    /// A node is a dead end when expanding it produced nothing new and it cannot close.
    fn dead(&self, i: usize) -> bool {
        let n = &self.nodes[i];
        !n.terminal && n.expanded && n.children.iter().all(|&c| self.dead(c))
    }

    fn select(&self, c: f64) -> Option<usize> {
        let mut at = 0;
        loop {
            let node = &self.nodes[at];
            if node.terminal || !node.expanded {
                return Some(at);
            }
            let live: Vec<usize> = node.children.iter().copied().filter(|&ch| !self.dead(ch)).collect();
            if live.is_empty() {
                return None;
            }
            let mut best = live[0];
            let mut best_score = f64::NEG_INFINITY;
            for ch in live {
                let child = &self.nodes[ch];
                let score = uct(child.q(), node.visits, child.visits, c);
                if score > best_score {
                    best = ch;
                    best_score = score;
                }
            }
            at = best;
        }
    }

    /// Mean prior over the path from the root's child down to `i`.
    pub fn path_value(&self, i: usize) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut at = i;
        while let Some(p) = self.nodes[at].parent {
            sum += self.nodes[at].prior;
            count += 1;
            at = p;
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// Best by mean path value, then visits, then lower creation index.
    pub fn best_of(&self, candidates: impl Iterator<Item = usize>) -> Option<usize> {
        let mut best: Option<usize> = None;
        for i in candidates {
            best = match best {
                None => Some(i),
                Some(b) => {
                    let (vi, vb) = (self.path_value(i), self.path_value(b));
                    let better = vi > vb
                        || (vi == vb && self.nodes[i].visits > self.nodes[b].visits)
                        || (vi == vb && self.nodes[i].visits == self.nodes[b].visits && i < b);
                    Some(if better { i } else { b })
                }
            };
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MctsOutcome {
    pub solution: Solution,
    pub tree: SearchTree,
    pub chosen_node: usize,
    pub reached_terminal: bool,
}

pub fn mcts(
    verifier: &Verifier,
    prm: &Gateway,
    claim: &Claim,
    evidence: &[EvidenceDocument],
    labels: &LabelSet,
    config: &MctsConfig,
) -> Result<MctsOutcome, ScalingError> {
    if config.budget == 0 || config.branching == 0 {
        return Err(ScalingError::Precondition("MCTS needs a positive budget and branching".into()));
    }
    let criteria = prm_criteria();
    let scale = 10.0 * criteria.len() as f64;
    let bundle = verifier.bundle(claim, evidence, labels);
    let markers = verifier.config().markers.clone();
    let context = context_block(claim, evidence);
    let mut tree = SearchTree::new();

    for _ in 0..config.budget {
        let Some(leaf) = tree.select(config.exploration) else {
            tracing::debug!("search tree exhausted");
            break;
        };
        tree.passes += 1;
        if tree.nodes[leaf].terminal || tree.nodes[leaf].steps.len() >= config.max_depth {
            let v = tree.nodes[leaf].prior;
            tree.nodes[leaf].expanded = true;
            tree.backprop(leaf, v);
            continue;
        }
        let prefix_trace = ThinkingTrace::from_texts(tree.nodes[leaf].steps.clone());
        let request = GenerationRequest {
            messages: bundle.messages(),
            prefix: Some(render_continuation_prefix(&prefix_trace, &markers)),
            max_tokens: config.step_max_tokens,
            temperature: config.temperature,
            stop: vec!["\n\n".to_string()],
        };
        let mut best_new: Option<f64> = None;
        for _ in 0..config.branching {
            let text = verifier.gateway().generate(&request)?.text;
            let (step, terminal, tail) = match text.find(markers.close.as_str()) {
                Some(at) => (
                    text[..at].trim().to_string(),
                    true,
                    Some(text[at + markers.close.len()..].to_string()),
                ),
                None => (text.trim().to_string(), false, None),
            };
            if step.is_empty() {
                if terminal && leaf != 0 {
                    // The model closes right after this prefix.
                    tree.nodes[leaf].terminal = true;
                    tree.nodes[leaf].tail = tail;
                }
                continue;
            }
            if tree.nodes[leaf]
                .children
                .iter()
                .any(|&c| tree.nodes[c].steps.last() == Some(&step))
            {
                continue;
            }
            let previous = tree.nodes[leaf].steps.join("\n\n");
            let subject_context = format!("{context}\n\nPrevious reasoning steps:\n{previous}");
            let value = match prm.score_reward(&criteria, &step, &subject_context) {
                Ok(s) => f64::from(s.total) / scale,
                Err(GatewayError::UnparseableScore(e)) => {
                    tracing::warn!("step excluded, unparseable process reward: {e}");
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            tree.add(leaf, step, value, terminal, tail);
            best_new = Some(best_new.map_or(value, |b: f64| b.max(value)));
        }
        tree.nodes[leaf].expanded = true;
        let v = best_new.unwrap_or(tree.nodes[leaf].prior);
        tree.backprop(leaf, v);
    }

    let terminals = (1..tree.nodes.len()).filter(|&i| tree.nodes[i].terminal);
    let (chosen, reached_terminal) = match tree.best_of(terminals) {
        Some(i) => (i, true),
        None => {
            let frontier = (1..tree.nodes.len()).filter(|&i| tree.nodes[i].children.is_empty());
            (tree.best_of(frontier).unwrap_or(0), false)
        }
    };
    let node = &tree.nodes[chosen];
    let prefix_trace = ThinkingTrace::from_texts(node.steps.clone());
    let from_tail = node
        .tail
        .as_deref()
        .and_then(|t| parse_verdict(t).ok())
        .map(|v| (v.label, v.explanation));
    let solution = match from_tail {
        Some((label, explanation)) => {
            let (label, out_of_set) = match labels.resolve(&label) {
                Some(c) => (c.to_string(), false),
                None => (label, true),
            };
            Solution {
                label,
                explanation,
                trace: prefix_trace,
                flags: crate::model::SolutionFlags {
                    out_of_set_label: out_of_set,
                    empty_evidence: evidence.is_empty(),
                },
            }
        }
        None => verifier.continue_from(&prefix_trace, &bundle, labels, evidence.is_empty())?,
    };
    Ok(MctsOutcome {
        solution,
        chosen_node: chosen,
        reached_terminal,
        tree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Capabilities, Operation, ProviderProfile, Role, ScriptedTransport};
    use crate::verifier::VerifierConfig;
    use serde_json::json;
    use std::sync::Arc;

    fn setup(t: ScriptedTransport) -> (Verifier, Gateway, Arc<ScriptedTransport>) {
        let t = Arc::new(t);
        let v = Verifier::new(
            Gateway::new(Role::Verifier, ProviderProfile::new("verifier", Capabilities::all()), t.clone()),
            VerifierConfig::default(),
        );
        let r = Gateway::new(Role::Orm, ProviderProfile::new("rm", Capabilities::all()), t.clone());
        (v, r, t)
    }

    fn labels() -> LabelSet {
        LabelSet::new(["true", "false"]).unwrap()
    }

    fn claim() -> Claim {
        Claim::new("c", "X").unwrap()
    }

    fn out(step: &str, label: &str) -> String {
        format!("<think>\n{step}\n</think>\nVERDICT: {label}\nEXPLANATION: because {step}")
    }

    fn reward(names: &[Criterion], total: u32) -> serde_json::Value {
        let n = names.len() as u32;
        let mut scores = serde_json::Map::new();
        for (i, c) in names.iter().enumerate() {
            let s = total / n + u32::from((i as u32) < total % n);
            scores.insert(c.name.clone(), json!(s));
        }
        json!({"scores": scores, "total": total})
    }

    #[test]
    fn shipped_criteria_sizes() {
        assert_eq!(prm_criteria().len(), 3);
        assert_eq!(orm_criteria().len(), 4);
    }

    #[test]
    fn best_of_n_argmax() {
        let orm = orm_criteria();
        let t = ScriptedTransport::new()
            .on_generate(&["Claim: X"], [out("a", "true"), out("b", "false"), out("c", "true")])
            .on(Operation::Reward, &["because a"], vec![reward(&orm, 22)])
            .on(Operation::Reward, &["because b"], vec![reward(&orm, 31)])
            .on(Operation::Reward, &["because c"], vec![reward(&orm, 25)]);
        let (v, r, _) = setup(t);
        let b = best_of_n(&v, &r, &claim(), &[], &labels(), 3).unwrap();
        assert_eq!(b.chosen, 1);
        assert_eq!(b.solution().label, "false");
    }

    #[test]
    fn best_of_n_ties_and_exclusion() {
        let t = ScriptedTransport::new()
            .on_generate(&["Claim: X"], [out("a", "true")])
            .with_default_reward(6);
        let (v, r, _) = setup(t);
        assert_eq!(best_of_n(&v, &r, &claim(), &[], &labels(), 2).unwrap().chosen, 0);

        let t = ScriptedTransport::new()
            .on_generate(&["Claim: X"], [out("a", "true"), out("b", "true")])
            .on(Operation::Reward, &["because a"], vec![json!({"scores": {}})])
            .with_default_reward(5);
        let (v, r, _) = setup(t);
        let b = best_of_n(&v, &r, &claim(), &[], &labels(), 2).unwrap();
        assert!(b.candidates[0].is_none());
        assert_eq!(b.chosen, 1);
        assert!(matches!(best_of_n(&v, &r, &claim(), &[], &labels(), 1), Err(ScalingError::Precondition(_))));
    }

    #[test]
    fn self_refine_early_stop_and_rounds() {
        let t = ScriptedTransport::new()
            .on_generate(&["NO ISSUES", "because a"], ["NO ISSUES"])
            .on_generate(&["Claim: X"], [out("a", "true")]);
        let (v, _, _) = setup(t);
        let r = self_refine(&v, &claim(), &[], &labels(), 3).unwrap();
        assert!(r.stopped_early);
        assert_eq!(r.revisions, 0);
        assert_eq!(r.solution.trace.steps[0].text, "a");

        let t = ScriptedTransport::new()
            .on_generate(&["critique of your previous answer"], [out("r1", "false"), out("r2", "true"), out("r3", "false")])
            .on_generate(&["NO ISSUES"], ["Step one is unsupported."])
            .on_generate(&["Claim: X"], [out("a", "true")]);
        let (v, _, _) = setup(t);
        let r = self_refine(&v, &claim(), &[], &labels(), 3).unwrap();
        assert_eq!(r.revisions, 3);
        assert_eq!(r.solution.trace.steps[0].text, "r3");
        assert_eq!(r.solution.label, "false");

        let t = ScriptedTransport::new()
            .on_generate(&["critique of your previous answer"], [out("r1", "false")])
            .on_generate(&["NO ISSUES"], ["Step one is unsupported."])
            .on_generate(&["Claim: X"], [out("a", "true")]);
        let (v, _, _) = setup(t);
        let r = self_refine(&v, &claim(), &[], &labels(), 1).unwrap();
        assert_eq!(r.revisions, 1);
        assert_eq!(r.solution.trace.steps[0].text, "r1");
    }

    #[test]
    fn uct_formula() {
        let v = uct(0.5, 4, 1, 1.414);
        assert!((v - (0.5 + 1.414 * (4f64.ln() / 2.0).sqrt())).abs() < 1e-12);
        assert_eq!(uct(0.3, 0, 0, 1.414), 0.3);
    }

    #[test]
    fn degenerate_search_matches_single_proposal() {
        let t = ScriptedTransport::new()
            .on_generate(&["<think>"], ["only step\n</think>\nVERDICT: true\nEXPLANATION: fine"])
            .with_default_reward(7);
        let (v, r, _) = setup(t);
        let cfg = MctsConfig { budget: 1, branching: 1, ..MctsConfig::default() };
        let o = mcts(&v, &r, &claim(), &[], &labels(), &cfg).unwrap();
        assert!(o.reached_terminal);
        assert_eq!(o.solution.trace.steps[0].text, "only step");
        assert_eq!(o.solution.label, "true");
        assert_eq!(o.tree.nodes[0].visits, 1);
    }

    #[test]
    fn high_value_branch_wins() {
        let prm = prm_criteria();
        // Root expansion yields two branches; each then closes.
        let t = ScriptedTransport::new()
            .on_generate(&["<think>\ngood"], ["</think>\nVERDICT: false\nEXPLANATION: good path"])
            .on_generate(&["<think>\nbad"], ["</think>\nVERDICT: true\nEXPLANATION: bad path"])
            .on_generate(&["<think>"], ["good", "bad"])
            .on(Operation::Reward, &["\"subject\":\"good\""], vec![reward(&prm, 27)])
            .on(Operation::Reward, &["\"subject\":\"bad\""], vec![reward(&prm, 6)]);
        let (v, r, _) = setup(t);
        let cfg = MctsConfig { budget: 4, branching: 2, ..MctsConfig::default() };
        let o = mcts(&v, &r, &claim(), &[], &labels(), &cfg).unwrap();
        assert!(o.reached_terminal);
        assert_eq!(o.solution.trace.steps[0].text, "good");
        assert_eq!(o.solution.label, "false");
        let visits: u32 = o.tree.nodes[0].visits;
        assert_eq!(visits as usize, o.tree.passes);
        for n in &o.tree.nodes[1..] {
            let parent = &o.tree.nodes[n.parent.unwrap()];
            assert_eq!(n.steps.len(), parent.steps.len() + 1);
            assert_eq!(n.steps[..parent.steps.len()], parent.steps[..]);
        }
        // UCT with c=1.414 first re-selects the 0.9 branch.
        let good = o.tree.nodes.iter().find(|n| n.steps == ["good"]).unwrap();
        let bad = o.tree.nodes.iter().find(|n| n.steps == ["bad"]).unwrap();
        assert!(good.visits > bad.visits);
        assert!((good.prior - 0.9).abs() < 1e-12 && (bad.prior - 0.2).abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_lower_creation_index() {
        let mut tree = SearchTree::new();
        let a = tree.add(0, "a".into(), 0.5, true, None);
        let b = tree.add(0, "b".into(), 0.5, true, None);
        assert_eq!(tree.best_of([b, a].into_iter()), Some(a));
        tree.backprop(b, 0.5);
        assert_eq!(tree.best_of([a, b].into_iter()), Some(b));
    }

    #[test]
    fn no_terminal_completes_best_frontier() {
        let t = ScriptedTransport::new()
            .on_generate(&["<think>\nstep"], ["</think>\nVERDICT: true\nEXPLANATION: done"])
            .on_generate(&["<think>"], ["step"])
            .with_default_reward(5);
        let (v, r, _) = setup(t);
        // depth cap of 1 keeps the search from ever closing on its own
        let cfg = MctsConfig { budget: 2, branching: 1, max_depth: 1, ..MctsConfig::default() };
        let o = mcts(&v, &r, &claim(), &[], &labels(), &cfg).unwrap();
        assert!(!o.reached_terminal);
        assert_eq!(o.solution.label, "true");
        assert_eq!(o.solution.trace.steps[0].text, "step");
    }
}

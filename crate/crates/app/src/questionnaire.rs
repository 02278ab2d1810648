//! Post-session comparison questionnaire. The schema ships as a versioned
//! JSON asset; answers are validated against it before they reach the store.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Deserialize;
use serde_json::{json, Map, Value};

const SCHEMA_JSON: &str = include_str!("../assets/questionnaire.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Comparison,
    Likert,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Question {
    pub id: String,
    pub criterion: String,
    pub kind: QuestionKind,
    pub required: bool,
    pub text: String,
    #[serde(default)]
    pub levels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct QuestionnaireSchema {
    pub schema_version: u32,
    pub comparison_options: BTreeMap<String, String>,
    pub questions: Vec<Question>,
}

pub fn schema() -> &'static QuestionnaireSchema {
    static SCHEMA: OnceLock<QuestionnaireSchema> = OnceLock::new();
    SCHEMA.get_or_init(|| serde_json::from_str(SCHEMA_JSON).expect("bundled questionnaire schema is valid"))
}

pub fn schema_json() -> Value {
    serde_json::from_str(SCHEMA_JSON).expect("bundled questionnaire schema is valid")
}

impl QuestionnaireSchema {
    /// Check an answer map and return the value to store, tagged with the
    /// schema version. Unknown ids, missing required answers and values
    /// outside a question's options are rejected.
    pub fn validate(&self, answers: &Value) -> Result<Value, String> {
        let Value::Object(map) = answers else {
            return Err("answers must be an object".into());
        };
        for key in map.keys() {
            if !self.questions.iter().any(|q| &q.id == key) {
                return Err(format!("unknown question {key:?}"));
            }
        }
        let mut clean = Map::new();
        for q in &self.questions {
            let Some(v) = map.get(&q.id).filter(|v| !v.is_null()) else {
                if q.required {
                    return Err(format!("missing answer to {:?}", q.id));
                }
                continue;
            };
            let ok = match q.kind {
                QuestionKind::Comparison => v.as_str().is_some_and(|s| self.comparison_options.contains_key(s)),
                QuestionKind::Likert => v.as_u64().is_some_and(|n| q.levels.contains_key(&n.to_string())),
            };
            if !ok {
                return Err(format!("invalid answer {v} to {:?}", q.id));
            }
            clean.insert(q.id.clone(), v.clone());
        }
        Ok(json!({ "schema_version": self.schema_version, "answers": clean }))
    }
}

//! Evaluation harness: multiple-choice scoring under both normalization
//! rules and closed-book QA with exact match, over line-delimited task
//! files.

mod qa;
mod score;

pub use qa::{exact_match, extract_answer, format_qa_prompt, normalize_answer};
pub use score::{
    completion_logprob, score_choice_answer_norm, score_choice_char_norm, select_choice,
    EncodingMode,
};

use crate::error::{Error, Result};
use crate::generate::{generate, SampleParams};
use crate::model::Model;
use crate::tokenizer::Tokenizer;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultipleChoice,
    GenerativeQa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormRule {
    Char,
    AnswerConditional,
}

impl Default for NormRule {
    fn default() -> Self {
        NormRule::Char
    }
}

/// One evaluation item. Multiple choice scores `choices` against `context`;
/// generative QA builds a few-shot prompt from `fewshot_exemplars` and
/// `question`, generates greedily, and exact-matches against `answers`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalTask {
    pub kind: TaskKind,
    #[serde(default)]
    pub context: String,
    #[serde(default)]
    pub choices: Vec<String>,
    #[serde(default)]
    pub gold_index: Option<usize>,
    #[serde(default)]
    pub question: String,
    #[serde(default)]
    pub answers: Vec<String>,
    /// (question, answer) pairs; used by the QA prompt, in order.
    #[serde(default)]
    pub fewshot_exemplars: Vec<(String, String)>,
    #[serde(default)]
    pub norm_rule: NormRule,
}

impl EvalTask {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::MultipleChoice => {
                if self.choices.len() < 2 {
                    return Err(Error::Input(format!(
                        "multiple choice needs at least 2 choices, got {}",
                        self.choices.len()
                    )));
                }
                if self.choices.iter().any(String::is_empty) {
                    return Err(Error::Input("choices must be non-empty strings".into()));
                }
                match self.gold_index {
                    Some(g) if g < self.choices.len() => {}
                    Some(g) => {
                        return Err(Error::Input(format!(
                            "gold_index {g} out of range for {} choices",
                            self.choices.len()
                        )));
                    }
                    None => return Err(Error::Input("multiple choice needs gold_index".into())),
                }
            }
            TaskKind::GenerativeQa => {
                if self.answers.is_empty() {
                    return Err(Error::Input(
                        "generative QA needs at least one acceptable answer".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Tasks parsed from a line-delimited file, plus non-fatal warnings
/// (currently: unknown fields, reported with their line numbers).
#[derive(Debug, Clone)]
pub struct LoadedTasks {
    pub tasks: Vec<EvalTask>,
    pub warnings: Vec<String>,
}

/// Parses one JSON task per line; blank lines are skipped. Any malformed
/// line fails the whole load with its line number.
pub fn load_tasks(text: &str) -> Result<LoadedTasks> {
    #[derive(Deserialize)]
    struct Raw {
        #[serde(flatten)]
        task: EvalTask,
        #[serde(flatten)]
        extra: serde_json::Map<String, serde_json::Value>,
    }

    let mut tasks = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: Raw = serde_json::from_str(line)
            .map_err(|e| Error::TaskFile { line: line_no, detail: e.to_string() })?;
        raw.task
            .validate()
            .map_err(|e| Error::TaskFile { line: line_no, detail: e.to_string() })?;
        if !raw.extra.is_empty() {
            let names: Vec<&str> = raw.extra.keys().map(String::as_str).collect();
            warnings.push(format!("line {line_no}: ignoring unknown fields: {}", names.join(", ")));
        }
        tasks.push(raw.task);
    }
    Ok(LoadedTasks { tasks, warnings })
}

pub fn load_tasks_file(path: &Path) -> Result<LoadedTasks> {
    load_tasks(&std::fs::read_to_string(path)?)
}

/// Harness controls for [`run_eval`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    pub encoding: EncodingMode,
    /// Decoding for generative QA items. Greedy by default; a newline stop
    /// string is always added.
    pub sample: SampleParams,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            encoding: EncodingMode::Joint,
            sample: SampleParams { max_new_tokens: 32, ..SampleParams::default() },
        }
    }
}

/// Per-item outcome inside a report.
#[derive(Debug, Clone, Serialize)]
pub struct ItemRecord {
    pub index: usize,
    pub kind: TaskKind,
    pub shots: usize,
    /// Per-choice scores (multiple choice only).
    pub scores: Vec<f64>,
    pub chosen: Option<usize>,
    /// Raw completion before extraction (QA only).
    pub generated: Option<String>,
    /// Extracted answer (QA only).
    pub answer: Option<String>,
    pub correct: bool,
}

/// Evaluation outcome: one record per task plus the aggregate accuracy,
/// which always equals the mean of the item `correct` flags.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub model_params: u64,
    /// SHA-256 of the tasks' canonical JSON serialization.
    pub task_hash: String,
    pub encoding: EncodingMode,
    pub items: Vec<ItemRecord>,
    pub accuracy: f64,
}

/// Scores every task against the model and assembles a report.
pub fn run_eval(
    model: &Model,
    tokenizer: &Tokenizer,
    tasks: &[EvalTask],
    params: &EvalParams,
) -> Result<EvalReport> {
    let mut items = Vec::with_capacity(tasks.len());
    for (index, task) in tasks.iter().enumerate() {
        task.validate()?;
        let record = match task.kind {
            TaskKind::MultipleChoice => {
                let mut scores = Vec::with_capacity(task.choices.len());
                for choice in &task.choices {
                    scores.push(match task.norm_rule {
                        NormRule::Char => score_choice_char_norm(
                            model,
                            tokenizer,
                            &task.context,
                            choice,
                            params.encoding,
                        )?,
                        NormRule::AnswerConditional => score_choice_answer_norm(
                            model,
                            tokenizer,
                            &task.context,
                            choice,
                            params.encoding,
                        )?,
                    });
                }
                let chosen = select_choice(&scores);
                let correct = Some(chosen) == task.gold_index;
                ItemRecord {
                    index,
                    kind: task.kind,
                    shots: task.fewshot_exemplars.len(),
                    scores,
                    chosen: Some(chosen),
                    generated: None,
                    answer: None,
                    correct,
                }
            }
            TaskKind::GenerativeQa => {
                let prompt = format_qa_prompt(&task.fewshot_exemplars, &task.question);
                let mut sample = params.sample.clone();
                if !sample.stop_strings.iter().any(|s| s == "\n") {
                    sample.stop_strings.push("\n".to_string());
                }
                let g = generate(model, tokenizer, &prompt, &sample)?;
                let answer = extract_answer(&g.completion);
                let correct = exact_match(&answer, &task.answers);
                ItemRecord {
                    index,
                    kind: task.kind,
                    shots: task.fewshot_exemplars.len(),
                    scores: Vec::new(),
                    chosen: None,
                    generated: Some(g.completion),
                    answer: Some(answer),
                    correct,
                }
            }
        };
        items.push(record);
    }

    let hits = items.iter().filter(|r| r.correct).count();
    let accuracy = if items.is_empty() { 0.0 } else { hits as f64 / items.len() as f64 };
    Ok(EvalReport {
        model_params: model.config().count_params(),
        task_hash: task_hash(tasks),
        encoding: params.encoding,
        items,
        accuracy,
    })
}

/// SHA-256 over the canonical JSON serialization of the tasks.
fn task_hash(tasks: &[EvalTask]) -> String {
    let json = serde_json::to_string(tasks).expect("tasks serialize");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ForwardOptions, ModelConfig};
    use crate::train::{train_loop, TrainConfig};

    fn mc(context: &str, choices: &[&str], gold: usize) -> EvalTask {
        EvalTask {
            kind: TaskKind::MultipleChoice,
            context: context.to_string(),
            choices: choices.iter().map(|s| s.to_string()).collect(),
            gold_index: Some(gold),
            question: String::new(),
            answers: Vec::new(),
            fewshot_exemplars: Vec::new(),
            norm_rule: NormRule::Char,
        }
    }

    /// Model overfit on a tiny QA-formatted corpus, so both the memorized
    /// continuation and the QA answer are deterministic.
    fn overfit_setup() -> (Model, Tokenizer) {
        let doc = "Answer these questions:\nQ: what sat on the mat?\nA: the cat\n";
        let text = doc.repeat(8);
        let tok = Tokenizer::train(&[text.as_str()], 300).unwrap();
        let cfg = ModelConfig {
            dim: 32,
            n_heads: 2,
            n_layers: 2,
            vocab_size: tok.vocab_size(),
            max_seq_len: 48,
            ffn_multiple: 8,
            ..ModelConfig::default()
        };
        let mut model = Model::init(cfg, 1).unwrap();
        let corpus = tok.encode(&text, false);
        let train_cfg = TrainConfig {
            max_lr: 1e-2,
            total_steps: 150,
            warmup_steps: 10,
            batch_size: 96,
            seed: 0,
            ..TrainConfig::default()
        };
        train_loop(&mut model, &corpus, &train_cfg, &ForwardOptions::default()).unwrap();
        (model, tok)
    }

    #[test]
    fn load_parses_tasks_and_skips_blank_lines() {
        let text = r#"{"kind":"multiple_choice","context":"the cat","choices":[" sat"," ran"],"gold_index":0}

{"kind":"generative_qa","question":"what sat?","answers":["the cat"],"fewshot_exemplars":[["q1","a1"]]}
"#;
        let loaded = load_tasks(text).unwrap();
        assert_eq!(loaded.tasks.len(), 2);
        assert!(loaded.warnings.is_empty());
        assert_eq!(loaded.tasks[0].kind, TaskKind::MultipleChoice);
        assert_eq!(loaded.tasks[0].norm_rule, NormRule::Char);
        assert_eq!(loaded.tasks[1].fewshot_exemplars, vec![("q1".to_string(), "a1".to_string())]);
    }

    #[test]
    fn unknown_fields_warn_with_line_number() {
        let text = r#"{"kind":"generative_qa","question":"q","answers":["a"],"split":"dev","extra_notes":1}"#;
        let loaded = load_tasks(text).unwrap();
        assert_eq!(loaded.tasks.len(), 1);
        assert_eq!(loaded.warnings.len(), 1);
        assert!(loaded.warnings[0].contains("line 1"), "{}", loaded.warnings[0]);
        assert!(loaded.warnings[0].contains("split"), "{}", loaded.warnings[0]);
        assert!(loaded.warnings[0].contains("extra_notes"), "{}", loaded.warnings[0]);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let text = "{\"kind\":\"generative_qa\",\"question\":\"q\",\"answers\":[\"a\"]}\nnot json\n";
        let err = load_tasks(text).unwrap_err();
        assert!(matches!(err, Error::TaskFile { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn invalid_tasks_are_rejected_at_load() {
        let out_of_range = r#"{"kind":"multiple_choice","context":"c","choices":["x","y"],"gold_index":2}"#;
        let err = load_tasks(out_of_range).unwrap_err();
        assert!(matches!(err, Error::TaskFile { line: 1, .. }), "{err:?}");

        let one_choice = r#"{"kind":"multiple_choice","context":"c","choices":["x"],"gold_index":0}"#;
        assert!(load_tasks(one_choice).is_err());

        let no_answers = r#"{"kind":"generative_qa","question":"q","answers":[]}"#;
        assert!(load_tasks(no_answers).is_err());

        let no_gold = r#"{"kind":"multiple_choice","context":"c","choices":["x","y"]}"#;
        assert!(load_tasks(no_gold).is_err());
    }

    #[test]
    fn overfit_model_gets_memorized_multiple_choice_right() {
        let (model, tok) = overfit_setup();
        let tasks = vec![
            mc("Q: what sat on the mat?\nA:", &[" the cat", " the dog", " a door"], 0),
            mc("Q: what sat on the", &[" mat?", " dog?", " rug?"], 0),
        ];
        let report = run_eval(&model, &tok, &tasks, &EvalParams::default()).unwrap();
        assert_eq!(report.accuracy, 1.0, "{:#?}", report.items);
        assert!(report.items.iter().all(|r| r.chosen == Some(0)));
    }

    #[test]
    fn overfit_model_answers_generative_qa() {
        let (model, tok) = overfit_setup();
        let task = EvalTask {
            kind: TaskKind::GenerativeQa,
            context: String::new(),
            choices: Vec::new(),
            gold_index: None,
            question: "what sat on the mat?".to_string(),
            answers: vec!["the cat".to_string()],
            fewshot_exemplars: Vec::new(),
            norm_rule: NormRule::Char,
        };
        let report = run_eval(&model, &tok, &[task], &EvalParams::default()).unwrap();
        assert_eq!(report.accuracy, 1.0, "{:#?}", report.items);
        let item = &report.items[0];
        assert_eq!(item.answer.as_deref(), Some("the cat"));
        assert!(item.generated.is_some());
        assert_eq!(item.shots, 0);
    }

    #[test]
    fn accuracy_is_the_mean_of_item_flags_and_order_invariant() {
        let (model, tok) = overfit_setup();
        let a = mc("Q: what sat on the mat?\nA:", &[" the cat", " the dog"], 0);
        let b = mc("Q: what sat on the mat?\nA:", &[" the cat", " the dog"], 1); // wrong gold
        let c = mc("Q: what sat on the", &[" mat?", " dog?"], 0);

        let fwd = run_eval(&model, &tok, &[a.clone(), b.clone(), c.clone()], &EvalParams::default())
            .unwrap();
        let rev = run_eval(&model, &tok, &[c, b, a], &EvalParams::default()).unwrap();

        let mean = |r: &EvalReport| {
            r.items.iter().filter(|i| i.correct).count() as f64 / r.items.len() as f64
        };
        assert_eq!(fwd.accuracy, mean(&fwd));
        assert_eq!(fwd.accuracy, rev.accuracy);
        assert!((fwd.accuracy - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn run_eval_validates_tasks() {
        let (model, tok) = overfit_setup();
        let mut bad = mc("c", &["x", "y"], 0);
        bad.gold_index = None;
        assert!(run_eval(&model, &tok, &[bad], &EvalParams::default()).is_err());
    }

    #[test]
    fn report_metadata_is_filled() {
        let (model, tok) = overfit_setup();
        let tasks = vec![mc("Q: what sat on the", &[" mat?", " dog?"], 0)];
        let report = run_eval(&model, &tok, &tasks, &EvalParams::default()).unwrap();
        assert_eq!(report.model_params, model.config().count_params());
        assert_eq!(report.task_hash.len(), 64);
        assert_eq!(report.task_hash, run_eval(&model, &tok, &tasks, &EvalParams::default()).unwrap().task_hash);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"accuracy\""));
    }
}

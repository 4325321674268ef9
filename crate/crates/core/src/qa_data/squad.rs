use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::RawExample;
use crate::error::{Result, SwepError};

#[derive(Debug, Serialize, Deserialize)]
struct SquadFile {
    #[serde(default = "default_version")]
    version: String,
    data: Vec<Article>,
}

fn default_version() -> String {
    "1.1".into()
}

#[derive(Debug, Serialize, Deserialize)]
struct Article {
    #[serde(default)]
    title: String,
    paragraphs: Vec<Paragraph>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Paragraph {
    context: String,
    qas: Vec<Qa>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Qa {
    id: String,
    question: String,
    #[serde(default)]
    answers: Vec<Answer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Answer {
    text: String,
    answer_start: usize,
}

/// Result of reading a SQuAD file: valid examples plus the per-example
/// problems that were skipped.
#[derive(Debug, Default)]
pub struct SquadLoad {
    pub examples: Vec<RawExample>,
    pub errors: Vec<SwepError>,
    pub skipped_unanswerable: usize,
}

/// Reads SQuAD v1.1 JSON. The first answer of each question becomes the
/// training target; the remaining answer strings are kept for evaluation.
pub fn load_squad_json(path: &Path) -> Result<SquadLoad> {
    let text = fs::read_to_string(path).map_err(|e| SwepError::io(path, e))?;
    let file: SquadFile = serde_json::from_str(&text).map_err(|e| SwepError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;

    let mut load = SquadLoad::default();
    for article in file.data {
        for para in article.paragraphs {
            for qa in para.qas {
                let Some((first, rest)) = qa.answers.split_first() else {
                    load.skipped_unanswerable += 1;
                    continue;
                };
                let mut extra: Vec<String> = Vec::new();
                for a in rest {
                    if a.text != first.text && !extra.contains(&a.text) {
                        extra.push(a.text.clone());
                    }
                }
                let ex = RawExample {
                    id: qa.id,
                    question: qa.question,
                    context: para.context.clone(),
                    answer_text: first.text.clone(),
                    answer_char_start: first.answer_start,
                    extra_answers: extra,
                };
                match ex.validate() {
                    Ok(()) => load.examples.push(ex),
                    Err(e) => load.errors.push(e),
                }
            }
        }
    }
    if load.skipped_unanswerable > 0 {
        info!(
            "{}: skipped {} questions without answers",
            path.display(),
            load.skipped_unanswerable
        );
    }
    Ok(load)
}

/// Writes examples as SQuAD v1.1 JSON, one paragraph per example.
pub fn write_squad_json(path: &Path, examples: &[RawExample]) -> Result<()> {
    let file = SquadFile {
        version: "1.1".into(),
        data: vec![Article {
            title: "swep".into(),
            paragraphs: examples
                .iter()
                .map(|ex| Paragraph {
                    context: ex.context.clone(),
                    qas: vec![Qa {
                        id: ex.id.clone(),
                        question: ex.question.clone(),
                        answers: std::iter::once(Answer {
                            text: ex.answer_text.clone(),
                            answer_start: ex.answer_char_start,
                        })
                        .chain(ex.extra_answers.iter().map(|t| {
                            Answer {
                                text: t.clone(),
                                answer_start: ex
                                    .context
                                    .find(t.as_str())
                                    .map(|b| ex.context[..b].chars().count())
                                    .unwrap_or(0),
                            }
                        }))
                        .collect(),
                    }],
                })
                .collect(),
        }],
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| SwepError::Parse {
        path: path.into(),
        message: e.to_string(),
    })?;
    fs::write(path, text).map_err(|e| SwepError::io(path, e))
}

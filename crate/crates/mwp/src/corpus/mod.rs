//! Problem corpus: records, tokenisation, vocabulary, and JSONL IO.
//!
//! A [`Problem`] couples a tokenised question with a gold arithmetic
//! expression and its exact answer. [`Dataset`] enforces the corpus
//! invariants (unique ids, gold expressions that evaluate to their stated
//! answers). [`Vocab`] maps tokens to ids and tracks which ids the decoder
//! may emit.

pub mod synthetic;

use crate::expr;
use num::rational::BigRational;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: invalid JSON: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line} (id `{id}`): {message}")]
    Record { line: usize, id: String, message: String },
    #[error("duplicate problem id `{id}`")]
    DuplicateId { id: String },
    #[error("problem `{id}`: {message}")]
    Invalid { id: String, message: String },
    #[error("dataset is empty")]
    Empty,
    #[error("synthetic generator: {0}")]
    Synthetic(String),
}

/// One word problem with its gold expression and exact answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub id: String,
    pub question: Vec<String>,
    pub expression: Vec<String>,
    pub answer: BigRational,
    /// `family/paraphrase` tag set by the synthetic generator.
    pub template: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// A split-tagged list of problems with unique ids and verified golds.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: Split,
    problems: Vec<Problem>,
    by_id: HashMap<String, usize>,
}

impl Dataset {
    /// Validates ids and gold expressions; fails on an empty list.
    pub fn new(split: Split, problems: Vec<Problem>) -> Result<Dataset, CorpusError> {
        if problems.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut by_id = HashMap::with_capacity(problems.len());
        for (i, p) in problems.iter().enumerate() {
            if p.id.is_empty() {
                return Err(CorpusError::Invalid { id: format!("#{i}"), message: "empty id".into() });
            }
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId { id: p.id.clone() });
            }
            let ast = expr::parse(&p.expression).map_err(|e| CorpusError::Invalid {
                id: p.id.clone(),
                message: format!("gold expression does not parse: {e}"),
            })?;
            let value = expr::evaluate(&ast).map_err(|e| CorpusError::Invalid {
                id: p.id.clone(),
                message: format!("gold expression does not evaluate: {e}"),
            })?;
            if value != p.answer {
                return Err(CorpusError::Invalid {
                    id: p.id.clone(),
                    message: format!(
                        "gold expression evaluates to {} but answer is {}",
                        expr::rational_to_string(&value),
                        expr::rational_to_string(&p.answer)
                    ),
                });
            }
        }
        Ok(Dataset { split, problems, by_id })
    }

    pub fn problems(&self) -> &[Problem] {
        &self.problems
    }

    pub fn len(&self) -> usize {
        self.problems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.problems.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Problem> {
        self.by_id.get(id).map(|&i| &self.problems[i])
    }
}

fn is_operator_char(c: char) -> bool {
    matches!(c, '+' | '\u{2212}' | '\u{00D7}' | '\u{00F7}' | '(' | ')')
}

/// Tokenise question or equation text.
///
/// Digit runs, with an optional single decimal point and an optional
/// trailing `%`, form one token; the operator glyphs `+ − × ÷ ( )` are
/// single-character tokens; any other maximal run of non-space characters
/// between those boundaries is a word token.
pub fn tokenize_text(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < chars.len() && chars[i] == '%' {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        } else if is_operator_char(c) {
            out.push(c.to_string());
            i += 1;
        } else {
            let start = i;
            while i < chars.len()
                && !chars[i].is_whitespace()
                && !chars[i].is_ascii_digit()
                && !is_operator_char(chars[i])
            {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        }
    }
    out
}

/// Map lone ASCII operator spellings to the canonical glyphs.
fn canonical_op_token(tok: String) -> String {
    match tok.as_str() {
        "-" => expr::OP_SUB.to_string(),
        "*" => expr::OP_MUL.to_string(),
        "/" => expr::OP_DIV.to_string(),
        _ => tok,
    }
}

/// Drop a leading `x =` from an equation string if present.
fn strip_solution_prefix(eq: &str) -> &str {
    let t = eq.trim_start();
    if let Some(rest) = t.strip_prefix('x') {
        if let Some(rhs) = rest.trim_start().strip_prefix('=') {
            return rhs;
        }
    }
    t
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    question: String,
    equation: String,
    answer: serde_json::Value,
    #[serde(rename = "template_id", default)]
    template: Option<String>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    id: &'a str,
    question: String,
    equation: String,
    answer: String,
    #[serde(rename = "template_id", skip_serializing_if = "Option::is_none")]
    template: &'a Option<String>,
}

fn raw_to_problem(raw: RawRecord, line: usize) -> Result<Problem, CorpusError> {
    let record_err = |id: &str, message: String| CorpusError::Record { line, id: id.to_string(), message };
    let question = tokenize_text(&raw.question);
    let expression: Vec<String> = tokenize_text(strip_solution_prefix(&raw.equation))
        .into_iter()
        .map(canonical_op_token)
        .collect();
    let answer = match &raw.answer {
        serde_json::Value::String(s) => expr::parse_rational(s),
        serde_json::Value::Number(n) => expr::parse_rational(&n.to_string()),
        _ => None,
    }
    .ok_or_else(|| record_err(&raw.id, format!("unparseable answer {}", raw.answer)))?;
    let ast = expr::parse(&expression)
        .map_err(|e| record_err(&raw.id, format!("equation does not parse: {e}")))?;
    let value = expr::evaluate(&ast)
        .map_err(|e| record_err(&raw.id, format!("equation does not evaluate: {e}")))?;
    if value != answer {
        return Err(record_err(
            &raw.id,
            format!(
                "equation evaluates to {} but answer is {}",
                expr::rational_to_string(&value),
                expr::rational_to_string(&answer)
            ),
        ));
    }
    Ok(Problem { id: raw.id, question, expression, answer, template: raw.template })
}

/// Load a JSONL corpus. Each line must carry `id`, `question`, `equation`
/// (optionally prefixed `x =`), and `answer` (string or number); blank
/// lines are skipped. Every record is validated on the way in.
pub fn load_jsonl(path: &Path, split: Split) -> Result<Dataset, CorpusError> {
    let text = fs::read_to_string(path)
        .map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    let mut problems = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line)
            .map_err(|source| CorpusError::Json { line: idx + 1, source })?;
        problems.push(raw_to_problem(raw, idx + 1)?);
    }
    Dataset::new(split, problems)
}

/// Write a dataset as JSONL; inverse of [`load_jsonl`] up to tokenisation.
pub fn save_jsonl(dataset: &Dataset, path: &Path) -> Result<(), CorpusError> {
    let mut out = String::new();
    for p in dataset.problems() {
        let rec = OutRecord {
            id: &p.id,
            question: p.question.join(" "),
            equation: p.expression.join(" "),
            answer: expr::rational_to_string(&p.answer),
            template: &p.template,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serialises"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    gen: Vec<u32>,
}

/// Token table with the four reserved ids and the generation set `V_gen`
/// (expression tokens seen in training, plus the end marker) that the
/// decoder may emit without copying.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    gen: Vec<u32>,
}

impl Vocab {
    /// Build from a training set. Tokens with frequency below `min_freq`
    /// map to `UNK`; ids follow first occurrence (questions before
    /// expressions within each problem).
    pub fn build(train: &Dataset, min_freq: usize) -> Vocab {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for p in train.problems() {
            for t in p.question.iter().chain(p.expression.iter()) {
                *freq.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        let mut tokens: Vec<String> =
            vec![PAD_TOKEN.into(), UNK_TOKEN.into(), BOS_TOKEN.into(), EOS_TOKEN.into()];
        let mut ids: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let mut gen: Vec<u32> = vec![EOS];
        for p in train.problems() {
            for t in p.question.iter().chain(p.expression.iter()) {
                if freq[t.as_str()] >= min_freq && !ids.contains_key(t) {
                    ids.insert(t.clone(), tokens.len() as u32);
                    tokens.push(t.clone());
                }
            }
            for t in &p.expression {
                if let Some(&id) = ids.get(t) {
                    if !gen.contains(&id) {
                        gen.push(id);
                    }
                }
            }
        }
        gen.sort_unstable();
        Vocab { tokens, ids, gen }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id for a token, `UNK` when absent.
    pub fn id(&self, tok: &str) -> u32 {
        self.ids.get(tok).copied().unwrap_or(UNK)
    }

    pub fn lookup(&self, tok: &str) -> Option<u32> {
        self.ids.get(tok).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode(&self, toks: &[String]) -> Vec<u32> {
        toks.iter().map(|t| self.id(t)).collect()
    }

    /// Ids the generation head scores, ascending.
    pub fn gen_ids(&self) -> &[u32] {
        &self.gen
    }

    pub fn is_gen(&self, id: u32) -> bool {
        self.gen.binary_search(&id).is_ok()
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let file = VocabFile { tokens: self.tokens.clone(), gen: self.gen.clone() };
        let text = serde_json::to_string(&file).expect("vocab serialises");
        fs::write(path, text).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Vocab, CorpusError> {
        let text = fs::read_to_string(path)
            .map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
        let file: VocabFile =
            serde_json::from_str(&text).map_err(|source| CorpusError::Json { line: 1, source })?;
        let ids = file
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { tokens: file.tokens, ids, gen: file.gen })
    }
}

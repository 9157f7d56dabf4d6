//! Synthetic multi-step arithmetic corpus, GSM8K-style ingestion, and the
//! step-equation oracle.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Dev => write!(f, "dev"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One problem instance: question text, ordered reasoning steps, final answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub question: String,
    pub steps: Vec<String>,
    pub answer: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub op_labels: Option<Vec<String>>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub n_examples: usize,
    pub step_range: (usize, usize),
    pub value_range: (i64, i64),
    pub split_fracs: (f64, f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Synthetic { seed: u64, params: GenParams },
    Ingested { path: String, format: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub delimiter: String,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn of_split(&self, split: Split) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    /// Serializes to native JSONL (one example object per line), byte-stable.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.examples {
            out.push_str(&serde_json::to_string(e).expect("example serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

const NAMES: &[&str] = &["Ava", "Ben", "Cara", "Dan", "Eve", "Finn", "Gia", "Hugo"];
const ITEMS: &[&str] = &["apples", "pears", "coins", "marbles", "books", "shells", "pens", "cards"];

/// Upper bound on intermediate values so digit sequences stay short.
const VALUE_CAP: i64 = 9_999;
const MAX_RETRIES: usize = 200;

/// Generates a deterministic synthetic corpus. Every step is a line
/// `A OP B = C` over quantities introduced in the question or produced by
/// earlier steps; subtractions are non-negative, divisions exact.
pub fn generate_corpus(seed: u64, params: &GenParams) -> Result<Dataset> {
    let (min_s, max_s) = params.step_range;
    let (lo, hi) = params.value_range;
    if min_s < 1 || min_s > max_s || max_s > 8 {
        return Err(Error::Config(format!(
            "step range must satisfy 1 <= min <= max <= 8, got {min_s}..{max_s}"
        )));
    }
    if lo < 1 || lo > hi || hi > VALUE_CAP {
        return Err(Error::Config(format!(
            "value range must satisfy 1 <= lo <= hi <= {VALUE_CAP}, got {lo}..{hi}"
        )));
    }
    let (ft, fd, fe) = params.split_fracs;
    if ft < 0.0 || fd < 0.0 || fe < 0.0 || (ft + fd + fe - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got ({ft}, {fd}, {fe})"
        )));
    }
    let n = params.n_examples;
    let n_train = (n as f64 * ft).round() as usize;
    let n_dev = (n as f64 * fd).round() as usize;
    let n_dev = n_dev.min(n - n_train.min(n));
    let n_train = n_train.min(n);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    for index in 0..n {
        let split = if index < n_train {
            Split::Train
        } else if index < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
        let ex = generate_example(&mut rng, seed, index, min_s, max_s, lo, hi, split)?;
        examples.push(ex);
    }
    Ok(Dataset {
        examples,
        delimiter: "\n".into(),
        provenance: Provenance::Synthetic {
            seed,
            params: params.clone(),
        },
    })
}

#[allow(clippy::too_many_arguments)]
fn generate_example(
    rng: &mut ChaCha8Rng,
    seed: u64,
    index: usize,
    min_s: usize,
    max_s: usize,
    lo: i64,
    hi: i64,
    split: Split,
) -> Result<Example> {
    let name = NAMES[rng.gen_range(0..NAMES.len())];
    let item = ITEMS[rng.gen_range(0..ITEMS.len())];
    let n_steps = rng.gen_range(min_s..=max_s);
    let start = rng.gen_range(lo..=hi);

    let mut question = format!("{name} has {start} {item} .");
    let mut steps = Vec::with_capacity(n_steps);
    let mut labels = Vec::with_capacity(n_steps);
    let mut value = start;

    for _ in 0..n_steps {
        let mut placed = false;
        for attempt in 0..MAX_RETRIES {
            match try_step(rng, name, item, value, lo, hi) {
                Some((sentence, step, label, next)) => {
                    question.push(' ');
                    question.push_str(&sentence);
                    steps.push(step);
                    labels.push(label);
                    value = next;
                    placed = true;
                    break;
                }
                None if attempt + 1 == MAX_RETRIES => break,
                None => continue,
            }
        }
        if !placed {
            return Err(Error::Generation {
                seed,
                index,
                msg: format!("no feasible step template from value {value}"),
            });
        }
    }
    question.push(' ');
    question.push_str(&format!("How many {item} does {name} have now ?"));

    Ok(Example {
        id: format!("ex{index:05}"),
        question,
        steps,
        answer: value.to_string(),
        op_labels: Some(labels),
        split,
    })
}

/// Attempts one step template. Returns (question sentence, step line,
/// operator label, next value) or None when the sampled template is
/// infeasible at the current value.
fn try_step(
    rng: &mut ChaCha8Rng,
    name: &str,
    item: &str,
    value: i64,
    lo: i64,
    hi: i64,
) -> Option<(String, String, String, i64)> {
    match rng.gen_range(0..5u8) {
        0 => {
            // addition of a newly introduced quantity
            let b = rng.gen_range(lo..=hi);
            if value + b > VALUE_CAP {
                return None;
            }
            let sentence = format!("Then {name} gets {b} more {item} .");
            Some((sentence, eq(value, '+', b), "+".into(), value + b))
        }
        1 => {
            // non-negative subtraction
            if value < 1 {
                return None;
            }
            let b = rng.gen_range(1..=value.min(hi));
            let sentence = format!("Then {name} loses {b} {item} .");
            Some((sentence, eq(value, '-', b), "-".into(), value - b))
        }
        2 => {
            // multiplication by a small factor
            let b = rng.gen_range(3..=4i64);
            if value < 1 || value * b > VALUE_CAP {
                return None;
            }
            let word = if b == 3 { "triples" } else { "quadruples" };
            let sentence = format!("Then the pile of {item} {word} .");
            Some((sentence, eq(value, '*', b), "*".into(), value * b))
        }
        3 => {
            // "doubles": the same sentence is realized as either + or *
            if value < 1 || value * 2 > VALUE_CAP {
                return None;
            }
            let sentence = format!("Then the pile of {item} doubles .");
            if rng.gen_bool(0.5) {
                Some((sentence, eq(value, '+', value), "+".into(), value * 2))
            } else {
                Some((sentence, eq(value, '*', 2), "*".into(), value * 2))
            }
        }
        _ => {
            // exact division
            let divisors: Vec<i64> = (2..=9).filter(|d| value >= 2 && value % d == 0).collect();
            if divisors.is_empty() {
                return None;
            }
            let b = divisors[rng.gen_range(0..divisors.len())];
            let sentence =
                format!("Then {name} splits the {item} equally into {b} piles and keeps one .");
            Some((sentence, eq(value, '/', b), "/".into(), value / b))
        }
    }
}

fn eq(a: i64, op: char, b: i64) -> String {
    let c = match op {
        '+' => a + b,
        '-' => a - b,
        '*' => a * b,
        '/' => a / b,
        _ => unreachable!(),
    };
    format!("{a} {op} {b} = {c}")
}

/// Result of splitting a reasoning text into steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSteps {
    pub steps: Vec<String>,
    pub dropped_empty: usize,
}

/// Splits a reasoning text at the delimiter, dropping (and counting) empty
/// segments.
pub fn split_reasoning(reasoning: &str, delimiter: &str) -> Result<SplitSteps> {
    if delimiter.is_empty() {
        return Err(Error::Config("delimiter must be non-empty".into()));
    }
    if reasoning.is_empty() {
        return Ok(SplitSteps {
            steps: vec![],
            dropped_empty: 0,
        });
    }
    let mut steps = Vec::new();
    let mut dropped = 0;
    for seg in reasoning.split(delimiter) {
        if seg.is_empty() {
            dropped += 1;
        } else {
            steps.push(seg.to_string());
        }
    }
    // a single trailing delimiter yields one empty tail segment; per contract
    // it is trimmed, not counted as a dropped step
    if reasoning.ends_with(delimiter) && dropped > 0 {
        dropped -= 1;
    }
    Ok(SplitSteps {
        steps,
        dropped_empty: dropped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestFormat {
    Gsm8kStyle,
    Native,
}

#[derive(Debug)]
pub struct IngestReport {
    pub dataset: Dataset,
    /// (1-based line number, reason) for every skipped line.
    pub skipped: Vec<(usize, String)>,
}

/// Ingests a JSONL file. Malformed lines are skipped and reported; the call
/// only fails when the file is unreadable or contains zero valid lines.
pub fn ingest_jsonl(path: &Path, format: IngestFormat) -> Result<IngestReport> {
    let lines = io::read_lines(path)?;
    let mut examples = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, format, examples.len()) {
            Ok(ex) => examples.push(ex),
            Err(e) => skipped.push((lineno, e.to_string())),
        }
    }
    if examples.is_empty() {
        return Err(Error::Format(format!(
            "{}: no valid lines ({} skipped)",
            path.display(),
            skipped.len()
        )));
    }
    Ok(IngestReport {
        dataset: Dataset {
            examples,
            delimiter: "\n".into(),
            provenance: Provenance::Ingested {
                path: path.display().to_string(),
                format: match format {
                    IngestFormat::Gsm8kStyle => "gsm8k".into(),
                    IngestFormat::Native => "native".into(),
                },
            },
        },
        skipped,
    })
}

fn parse_line(line: &str, format: IngestFormat, index: usize) -> Result<Example> {
    match format {
        IngestFormat::Native => {
            let ex: Example = serde_json::from_str(line)?;
            if ex.steps.is_empty() {
                return Err(Error::Format("steps must be non-empty".into()));
            }
            if ex.answer.is_empty() {
                return Err(Error::Format("answer must be non-empty".into()));
            }
            if let Some(labels) = &ex.op_labels {
                if labels.len() != ex.steps.len() {
                    return Err(Error::Format("op_labels length != steps length".into()));
                }
            }
            Ok(ex)
        }
        IngestFormat::Gsm8kStyle => {
            #[derive(Deserialize)]
            struct Gsm8kLine {
                question: String,
                answer: String,
            }
            let raw: Gsm8kLine = serde_json::from_str(line)?;
            let marker_pos = raw
                .answer
                .lines()
                .position(|l| l.starts_with("#### "))
                .ok_or_else(|| Error::Format("missing \"#### \" answer marker".into()))?;
            let lines: Vec<&str> = raw.answer.lines().collect();
            let reasoning = lines[..marker_pos].join("\n");
            let answer = lines[marker_pos].trim_start_matches("#### ").trim().to_string();
            if answer.is_empty() {
                return Err(Error::Format("empty answer after \"#### \" marker".into()));
            }
            let steps = split_reasoning(&reasoning, "\n")?.steps;
            if steps.is_empty() {
                return Err(Error::Format("no reasoning steps before answer marker".into()));
            }
            Ok(Example {
                id: format!("ingested{index:05}"),
                question: raw.question,
                steps,
                answer,
                op_labels: None,
                split: Split::Train,
            })
        }
    }
}

/// Parsed arithmetic claim of a reasoning step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCheck {
    pub a: f64,
    pub op: char,
    pub b: f64,
    pub claimed: f64,
    pub actual: f64,
    pub valid: bool,
    pub div_by_zero: bool,
}

/// Outcome of the step oracle: a parsed check or a parse failure (a value,
/// not an error).
#[derive(Debug, Clone, PartialEq)]
pub enum StepParse {
    Parsed(StepCheck),
    ParseFailure,
}

impl StepParse {
    pub fn is_valid(&self) -> bool {
        matches!(self, StepParse::Parsed(c) if c.valid)
    }
}

/// Checks a step of the form `A op B = C` (whitespace tolerant) or a
/// calculator-annotated span `<<A op B=C>>`.
pub fn eval_step_oracle(step: &str) -> StepParse {
    let candidate = extract_calc_span(step).unwrap_or_else(|| step.to_string());
    match parse_equation(&candidate) {
        Some((a, op, b, claimed)) => {
            let div_by_zero = op == '/' && b == 0.0;
            let actual = match op {
                '+' => a + b,
                '-' => a - b,
                '*' => a * b,
                '/' => {
                    if div_by_zero {
                        f64::NAN
                    } else {
                        a / b
                    }
                }
                _ => f64::NAN,
            };
            let valid =
                !div_by_zero && (actual - claimed).abs() <= 1e-9 * claimed.abs().max(1.0);
            StepParse::Parsed(StepCheck {
                a,
                op,
                b,
                claimed,
                actual,
                valid,
                div_by_zero,
            })
        }
        None => StepParse::ParseFailure,
    }
}

fn extract_calc_span(step: &str) -> Option<String> {
    let start = step.find("<<")?;
    let end = step[start..].find(">>")? + start;
    Some(step[start + 2..end].to_string())
}

fn normalize_op(c: char) -> Option<char> {
    match c {
        '+' => Some('+'),
        '-' | '−' => Some('-'),
        '*' | '×' => Some('*'),
        '/' | '÷' => Some('/'),
        _ => None,
    }
}

/// Parses `A op B = C`. Numbers may carry commas and decimals; `C` may be
/// followed by trailing text (units).
fn parse_equation(s: &str) -> Option<(f64, char, f64, f64)> {
    let eq_pos = s.find('=')?;
    let lhs = &s[..eq_pos];
    let rhs = &s[eq_pos + 1..];

    let (a, rest) = parse_number_prefix(lhs.trim_start())?;
    let rest = rest.trim_start();
    let op = normalize_op(rest.chars().next()?)?;
    let after_op: &str = &rest[rest.chars().next().unwrap().len_utf8()..];
    let (b, tail) = parse_number_prefix(after_op.trim_start())?;
    if !tail.trim().is_empty() {
        return None;
    }
    let (claimed, _) = parse_number_prefix(rhs.trim_start())?;
    Some((a, op, b, claimed))
}

/// Reads one number off the front of `s`; returns (value, remainder).
fn parse_number_prefix(s: &str) -> Option<(f64, &str)> {
    let mut end = 0;
    let bytes = s.as_bytes();
    if end < bytes.len() && (bytes[end] == b'-' || bytes[end] == b'+') {
        end += 1;
    }
    let mut seen_digit = false;
    let mut seen_dot = false;
    while end < bytes.len() {
        match bytes[end] {
            b'0'..=b'9' => {
                seen_digit = true;
                end += 1;
            }
            b',' if seen_digit => end += 1,
            b'.' if !seen_dot => {
                seen_dot = true;
                end += 1;
            }
            _ => break,
        }
    }
    if !seen_digit {
        return None;
    }
    let num: String = s[..end].chars().filter(|c| *c != ',').collect();
    num.parse::<f64>().ok().map(|v| (v, &s[end..]))
}

/// All numbers appearing in a text, in order (used by the error classifier).
pub fn numbers_in_text(text: &str) -> Vec<f64> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let Some(pos) = rest.find(|c: char| c.is_ascii_digit()) else {
            break;
        };
        match parse_number_prefix(&rest[pos..]) {
            Some((v, tail)) => {
                out.push(v);
                rest = tail;
            }
            None => rest = &rest[pos + 1..],
        }
    }
    out
}

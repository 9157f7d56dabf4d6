//! Word/digit-level tokenization, planning-token vocabulary extension, and
//! annotation of examples into training sequences.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example};
use crate::error::{Error, Result};
use crate::io;

pub type TokenId = u32;
pub type PlanId = u32;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const ANS: &str = "<ans>";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
    pub base_size: usize,
    pub bos: TokenId,
    pub eos: TokenId,
    pub sep: TokenId,
    pub ans: TokenId,
    pub n_prefix: usize,
    pub n_special: usize,
    pub scheme: Option<String>,
    /// Shared prefix planning-token ids (same ids for every plan).
    pub prefix_ids: Vec<TokenId>,
    /// plan id -> its full planning-token verbalization (prefix ++ specials).
    pub plan_registry: BTreeMap<PlanId, Vec<TokenId>>,
    /// Plan id reserved for the answer (0 when not extended).
    pub answer_plan: PlanId,
    #[serde(skip)]
    lookup: HashMap<String, TokenId>,
}

/// Splits one whitespace-delimited word into tokens: digits become single
/// characters, contiguous non-digit runs stay whole.
fn word_pieces(word: &str) -> Vec<String> {
    let mut pieces = Vec::new();
    let mut run = String::new();
    for c in word.chars() {
        if c.is_ascii_digit() {
            if !run.is_empty() {
                pieces.push(std::mem::take(&mut run));
            }
            pieces.push(c.to_string());
        } else {
            run.push(c);
        }
    }
    if !run.is_empty() {
        pieces.push(run);
    }
    pieces
}

fn text_pieces(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().flat_map(word_pieces)
}

fn is_digit_token(tok: &str) -> bool {
    tok.len() == 1 && tok.as_bytes()[0].is_ascii_digit()
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.lookup
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("token not in vocabulary: {token:?}")))
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn is_planning(&self, id: TokenId) -> bool {
        (id as usize) >= self.base_size
    }

    /// Plan id of a special planning token, if this id is one.
    pub fn plan_of_special(&self, id: TokenId) -> Option<PlanId> {
        if !self.is_planning(id) || self.prefix_ids.contains(&id) {
            return None;
        }
        self.plan_registry
            .iter()
            .find(|(_, ids)| ids[self.n_prefix..].contains(&id))
            .map(|(p, _)| *p)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text_pieces(text).map(|p| self.id(&p)).collect()
    }

    /// Decodes ids to text. BOS/EOS are dropped, SEP renders as a newline,
    /// consecutive digit tokens are glued back into one number.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut prev: Option<&str> = None;
        for &id in ids {
            if id == self.bos || id == self.eos {
                continue;
            }
            if id == self.sep {
                out.push('\n');
                prev = None;
                continue;
            }
            let tok = self.token(id);
            if let Some(p) = prev {
                if !(is_digit_token(p) && is_digit_token(tok)) {
                    out.push(' ');
                }
            }
            out.push_str(tok);
            prev = Some(tok);
        }
        out
    }

    pub fn hash(&self) -> String {
        io::sha256_hex(self.tokens.join("\u{1}").as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut v: Vocabulary = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        v.rebuild_lookup();
        Ok(v)
    }

    fn rebuild_lookup(&mut self) {
        self.lookup = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
    }
}

/// Builds the base vocabulary from a dataset: specials first, then word and
/// digit tokens ordered by first occurrence.
pub fn build_vocab(dataset: &Dataset) -> Result<Vocabulary> {
    if dataset.examples.is_empty() {
        return Err(Error::Config("cannot build a vocabulary from an empty dataset".into()));
    }
    let mut tokens: Vec<String> = vec![BOS.into(), EOS.into(), SEP.into(), ANS.into()];
    let mut seen: HashMap<String, ()> = tokens.iter().map(|t| (t.clone(), ())).collect();
    let mut push = |t: String, tokens: &mut Vec<String>| {
        if !seen.contains_key(&t) {
            seen.insert(t.clone(), ());
            tokens.push(t);
        }
    };
    for ex in &dataset.examples {
        for piece in text_pieces(&ex.question) {
            push(piece, &mut tokens);
        }
        for step in &ex.steps {
            for piece in text_pieces(step) {
                push(piece, &mut tokens);
            }
        }
        for piece in text_pieces(&ex.answer) {
            push(piece, &mut tokens);
        }
    }
    let base_size = tokens.len();
    let mut vocab = Vocabulary {
        tokens,
        base_size,
        bos: 0,
        eos: 1,
        sep: 2,
        ans: 3,
        n_prefix: 0,
        n_special: 0,
        scheme: None,
        prefix_ids: vec![],
        plan_registry: BTreeMap::new(),
        answer_plan: 0,
        lookup: HashMap::new(),
    };
    vocab.rebuild_lookup();
    Ok(vocab)
}

/// Extends a base vocabulary with planning tokens: `n_prefix` shared prefix
/// tokens plus `n_special` per-plan tokens for each of `n_plans` content
/// plans and the reserved answer plan (id `n_plans + 1`).
pub fn extend_with_planning_tokens(
    vocab: &Vocabulary,
    n_plans: usize,
    n_prefix: usize,
    n_special: usize,
    scheme_name: &str,
) -> Result<Vocabulary> {
    if n_plans < 1 {
        return Err(Error::Config("need at least one content plan".into()));
    }
    if n_prefix + n_special < 1 {
        return Err(Error::Config("n_prefix + n_special must be >= 1".into()));
    }
    let mut v = vocab.clone();
    let add = |name: String, v: &mut Vocabulary| -> Result<TokenId> {
        if v.lookup.contains_key(&name) {
            return Err(Error::Config(format!("planning token collides with existing token: {name:?}")));
        }
        let id = v.tokens.len() as TokenId;
        v.tokens.push(name.clone());
        v.lookup.insert(name, id);
        Ok(id)
    };
    let mut prefix_ids = Vec::with_capacity(n_prefix);
    for k in 0..n_prefix {
        prefix_ids.push(add(format!("<prefix_{k}>"), &mut v)?);
    }
    let mut registry = BTreeMap::new();
    for p in 1..=n_plans {
        let mut ids = prefix_ids.clone();
        for j in 0..n_special {
            ids.push(add(format!("<{scheme_name}{p}_{j}>"), &mut v)?);
        }
        registry.insert(p as PlanId, ids);
    }
    let answer_plan = (n_plans + 1) as PlanId;
    let mut ans_ids = prefix_ids.clone();
    for j in 0..n_special {
        ans_ids.push(add(format!("<answer_{j}>"), &mut v)?);
    }
    registry.insert(answer_plan, ans_ids);

    v.n_prefix = n_prefix;
    v.n_special = n_special;
    v.scheme = Some(scheme_name.to_string());
    v.prefix_ids = prefix_ids;
    v.plan_registry = registry;
    v.answer_plan = answer_plan;
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Question,
    Plan,
    Step,
    AnswerPlan,
    Answer,
}

/// Per-example plan labels. Steps usually carry a single plan id; the
/// arithmetic method may assign several (one per operator found).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanAssignment {
    pub example_id: String,
    pub step_plans: Vec<Vec<PlanId>>,
    pub answer_plan: PlanId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSequence {
    pub id: String,
    pub token_ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub role_mask: Vec<Role>,
    pub plan_ids_used: Vec<PlanId>,
}

impl AnnotatedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn save_jsonl(seqs: &[AnnotatedSequence], path: &Path) -> Result<()> {
        io::write_lines(
            path,
            seqs.iter().map(|s| serde_json::to_string(s).expect("serializes")),
        )
    }

    pub fn load_jsonl(path: &Path) -> Result<Vec<AnnotatedSequence>> {
        io::read_lines(path)?
            .iter()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationMode {
    Planned,
    General,
    Pause,
    /// No planning tokens at all ("none").
    Plain,
}

impl std::str::FromStr for AnnotationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planned" => Ok(Self::Planned),
            "general" => Ok(Self::General),
            "pause" => Ok(Self::Pause),
            "none" | "plain" => Ok(Self::Plain),
            _ => Err(Error::Config(format!("unknown annotation mode {s:?}"))),
        }
    }
}

/// Lays out one training sequence: BOS, question, then per step
/// [plan tokens] step SEP, then [answer plan tokens] ANS answer EOS.
/// Question positions never contribute to the loss.
pub fn annotate(
    example: &Example,
    assignment: Option<&PlanAssignment>,
    vocab: &Vocabulary,
    mode: AnnotationMode,
) -> Result<AnnotatedSequence> {
    let mut ids = Vec::new();
    let mut loss = Vec::new();
    let mut roles = Vec::new();
    let mut plan_ids_used = Vec::new();

    let push = |id: TokenId, l: bool, r: Role, ids: &mut Vec<TokenId>, loss: &mut Vec<bool>, roles: &mut Vec<Role>| {
        ids.push(id);
        loss.push(l);
        roles.push(r);
    };

    push(vocab.bos, false, Role::Question, &mut ids, &mut loss, &mut roles);
    for id in vocab.encode(&example.question)? {
        push(id, false, Role::Question, &mut ids, &mut loss, &mut roles);
    }

    let plan_block = |plans: &[PlanId], vocab: &Vocabulary| -> Result<Vec<TokenId>> {
        let mut block = vocab.prefix_ids.clone();
        for p in plans {
            let reg = vocab
                .plan_registry
                .get(p)
                .ok_or_else(|| Error::Config(format!("plan id {p} not in registry")))?;
            block.extend_from_slice(&reg[vocab.n_prefix..]);
        }
        Ok(block)
    };

    let step_plans: Option<Vec<Vec<PlanId>>> = match mode {
        AnnotationMode::Planned => {
            let a = assignment.ok_or_else(|| {
                Error::Config("mode=planned requires a plan assignment".into())
            })?;
            if a.step_plans.len() != example.steps.len() {
                return Err(Error::Config(format!(
                    "example {}: assignment has {} step plans for {} steps",
                    example.id,
                    a.step_plans.len(),
                    example.steps.len()
                )));
            }
            Some(a.step_plans.clone())
        }
        AnnotationMode::General => Some(vec![vec![1]; example.steps.len()]),
        AnnotationMode::Pause | AnnotationMode::Plain => None,
    };

    if mode == AnnotationMode::Pause {
        for id in plan_block(&[1], vocab)? {
            push(id, true, Role::Plan, &mut ids, &mut loss, &mut roles);
        }
        plan_ids_used.push(1);
    }

    for (i, step) in example.steps.iter().enumerate() {
        if let Some(plans) = &step_plans {
            for id in plan_block(&plans[i], vocab)? {
                push(id, true, Role::Plan, &mut ids, &mut loss, &mut roles);
            }
            plan_ids_used.extend_from_slice(&plans[i]);
        }
        for id in vocab.encode(step)? {
            push(id, true, Role::Step, &mut ids, &mut loss, &mut roles);
        }
        push(vocab.sep, true, Role::Step, &mut ids, &mut loss, &mut roles);
    }

    if matches!(mode, AnnotationMode::Planned | AnnotationMode::General) {
        let ap = match (mode, assignment) {
            (AnnotationMode::Planned, Some(a)) => a.answer_plan,
            _ => vocab.answer_plan,
        };
        for id in plan_block(&[ap], vocab)? {
            push(id, true, Role::AnswerPlan, &mut ids, &mut loss, &mut roles);
        }
        plan_ids_used.push(ap);
    }
    push(vocab.ans, true, Role::Answer, &mut ids, &mut loss, &mut roles);
    for id in vocab.encode(&example.answer)? {
        push(id, true, Role::Answer, &mut ids, &mut loss, &mut roles);
    }
    push(vocab.eos, true, Role::Answer, &mut ids, &mut loss, &mut roles);

    Ok(AnnotatedSequence {
        id: example.id.clone(),
        token_ids: ids,
        loss_mask: loss,
        role_mask: roles,
        plan_ids_used,
    })
}

/// Removes all planning-token ids, preserving content order.
pub fn strip_planning(ids: &[TokenId], vocab: &Vocabulary) -> Vec<TokenId> {
    ids.iter().copied().filter(|&id| !vocab.is_planning(id)).collect()
}

/// Parameter overhead of the planning-token embedding rows.
pub fn planning_token_overhead(
    n_new_tokens: usize,
    embedding_width: usize,
    tied: bool,
    total_params: usize,
) -> (usize, f64) {
    let delta = n_new_tokens * embedding_width * if tied { 1 } else { 2 };
    (delta, delta as f64 / total_params as f64)
}

//! Evaluation: greedy decoding, answer extraction and exact match, plan
//! marginals, attention statistics on planning tokens, a rule-based error
//! taxonomy, linear/MLP probes over step embeddings, and the ablation grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{eval_step_oracle, Example, StepParse};
use crate::error::{Error, Result};
use crate::model::{argmax, AttentionMaps, Decoder, ModelState, Real};
use crate::nn::{AdamW, Mlp};
use crate::tokenizer::{
    strip_planning, PlanAssignment, PlanId, Role, TokenId, Vocabulary, ANS,
};

// ---------------------------------------------------------------- decoding

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    Eos,
    MaxLen,
}

#[derive(Debug, Clone)]
pub struct GenOutput {
    pub ids: Vec<TokenId>,
    /// decoded with planning tokens removed
    pub text: String,
    /// decoded verbatim, planning tokens included
    pub raw_text: String,
    /// plan ids recovered from emitted plan-specific tokens, in order
    pub plan_ids: Vec<PlanId>,
    pub n_new: usize,
    pub halted_by: HaltReason,
}

/// Greedy decoding from `<bos> question` until end-of-sequence, the context
/// limit, or `max_new` tokens.
pub fn generate<T: Real>(
    state: &ModelState<T>,
    vocab: &Vocabulary,
    question: &str,
    max_new: usize,
) -> Result<GenOutput> {
    if state.vocab_hash != vocab.hash() {
        return Err(Error::Vocab("model/vocabulary hash mismatch".into()));
    }
    let mut ids = vec![vocab.bos];
    ids.extend(vocab.encode(question)?);
    let mut dec = Decoder::new(state);
    let mut logits = Vec::new();
    for &id in &ids {
        logits = dec.feed(id)?;
    }
    let mut n_new = 0;
    let mut halted_by = HaltReason::MaxLen;
    while n_new < max_new && dec.pos() < state.config.context_len {
        let next = argmax(&logits) as TokenId;
        ids.push(next);
        n_new += 1;
        if next == vocab.eos {
            halted_by = HaltReason::Eos;
            break;
        }
        logits = dec.feed(next)?;
    }
    let mut plan_ids = Vec::new();
    for &id in &ids {
        if let Some(p) = vocab.plan_of_special(id) {
            plan_ids.push(p);
        }
    }
    let stripped = strip_planning(&ids, vocab);
    Ok(GenOutput {
        text: vocab.decode(&stripped),
        raw_text: vocab.decode(&ids),
        ids,
        plan_ids,
        n_new,
        halted_by,
    })
}

// ----------------------------------------------------------- answer parsing

fn first_number(s: &str) -> Option<String> {
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let neg = bytes[i] == b'-' && i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit();
        if bytes[i].is_ascii_digit() || neg {
            let start = i;
            i += if neg { 1 } else { 0 };
            while i < bytes.len()
                && (bytes[i].is_ascii_digit() || bytes[i] == b',' || bytes[i] == b'.')
            {
                i += 1;
            }
            let raw: String = s[start..i]
                .trim_end_matches('.')
                .chars()
                .filter(|&c| c != ',')
                .collect();
            return Some(raw);
        }
        i += 1;
    }
    None
}

/// Finds the final answer in generated or reference text. Recognizes the
/// answer marker token, the phrase "The answer is", and a "#### " line.
pub fn extract_answer(text: &str) -> Option<String> {
    for marker in [ANS, "The answer is", "#### "] {
        if let Some(pos) = text.rfind(marker) {
            let tail = &text[pos + marker.len()..];
            let tail = tail.trim_start_matches([':', ' ']);
            if let Some(n) = first_number(tail) {
                return Some(n);
            }
        }
    }
    None
}

/// Numeric comparison when both sides parse, exact string match otherwise.
pub fn answers_match(a: &str, b: &str) -> bool {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => (x - y).abs() < 1e-9,
        _ => a.trim() == b.trim(),
    }
}

// ------------------------------------------------------------ error classes

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    /// a step equation evaluates to the wrong value
    Computation,
    /// steps are sound but the stated answer disagrees with the final step
    Extraction,
    /// a step line does not parse as an equation
    Malformed,
    /// no answer could be found in the output
    AnswerExtractionFailure,
    /// everything parses and computes, the reasoning just reaches the
    /// wrong result
    Logic,
    /// reserved: missing world knowledge (not producible on this corpus)
    KnowledgeNa,
    /// reserved: misread question (not producible on this corpus)
    Misunderstanding,
}

/// Rule-based classification of an incorrect output, applied in priority
/// order: computation, extraction, malformed, answer-extraction, logic.
pub fn classify_error(generated: &str, extracted: Option<&str>) -> ErrorClass {
    let body = match generated.find(ANS) {
        Some(p) => &generated[..p],
        None => generated,
    };
    let mut any_malformed = false;
    let mut last_claimed: Option<f64> = None;
    let mut any_step = false;
    for line in body.lines() {
        let line = line.trim();
        if line.is_empty() || !line.contains('=') {
            continue;
        }
        any_step = true;
        match eval_step_oracle(line) {
            StepParse::Parsed(c) => {
                if !c.valid {
                    return ErrorClass::Computation;
                }
                last_claimed = Some(c.claimed);
            }
            StepParse::ParseFailure => any_malformed = true,
        }
    }
    if let (Some(ans), Some(last)) = (extracted, last_claimed) {
        if let Ok(a) = ans.parse::<f64>() {
            if (a - last).abs() > 1e-9 && !any_malformed {
                return ErrorClass::Extraction;
            }
        }
    }
    if any_malformed || !any_step {
        return ErrorClass::Malformed;
    }
    if extracted.is_none() {
        return ErrorClass::AnswerExtractionFailure;
    }
    ErrorClass::Logic
}

// ---------------------------------------------------------------- reports

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutput {
    pub example_id: String,
    pub n_steps: usize,
    pub generated: String,
    pub generated_plans: Vec<PlanId>,
    pub halted_by: HaltReason,
    pub extracted: Option<String>,
    pub expected: String,
    pub correct: bool,
    pub error: Option<ErrorClass>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub correct: usize,
    pub exact_match: f64,
    /// reference step count -> (examples, correct)
    pub by_length: BTreeMap<usize, (usize, usize)>,
    pub errors: BTreeMap<ErrorClass, usize>,
    /// distribution of content plans in the *generated* outputs, when the
    /// vocabulary carries planning tokens
    pub plan_marginal_generation: Option<Vec<f64>>,
    pub outputs: Vec<EvalOutput>,
}

pub fn evaluate<T: Real>(
    state: &ModelState<T>,
    vocab: &Vocabulary,
    examples: &[Example],
    max_new: usize,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Eval("no examples to evaluate".into()));
    }
    let mut outputs = Vec::with_capacity(examples.len());
    let mut by_length: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut errors: BTreeMap<ErrorClass, usize> = BTreeMap::new();
    let mut correct = 0;
    for ex in examples {
        let gen = generate(state, vocab, &ex.question, max_new)?;
        let extracted = extract_answer(&gen.text);
        let ok = extracted
            .as_deref()
            .map(|a| answers_match(a, &ex.answer))
            .unwrap_or(false);
        let error = if ok {
            None
        } else {
            let e = classify_error(&gen.text, extracted.as_deref());
            *errors.entry(e).or_default() += 1;
            Some(e)
        };
        if ok {
            correct += 1;
        }
        let bucket = by_length.entry(ex.steps.len()).or_default();
        bucket.0 += 1;
        bucket.1 += ok as usize;
        outputs.push(EvalOutput {
            example_id: ex.id.clone(),
            n_steps: ex.steps.len(),
            generated: gen.text,
            generated_plans: gen.plan_ids,
            halted_by: gen.halted_by,
            extracted,
            expected: ex.answer.clone(),
            correct: ok,
            error,
        });
    }
    let plan_marginal_generation = if vocab.answer_plan > 0 {
        let n_content = vocab.answer_plan as usize - 1;
        let mut counts = vec![0.0; n_content];
        let mut total = 0.0;
        for o in &outputs {
            for &p in &o.generated_plans {
                if (1..=n_content).contains(&(p as usize)) {
                    counts[p as usize - 1] += 1.0;
                    total += 1.0;
                }
            }
        }
        if total > 0.0 {
            for c in counts.iter_mut() {
                *c /= total;
            }
        }
        (n_content > 0).then_some(counts)
    } else {
        None
    };
    Ok(EvalReport {
        n: examples.len(),
        correct,
        exact_match: correct as f64 / examples.len() as f64,
        by_length,
        errors,
        plan_marginal_generation,
        outputs,
    })
}

// ------------------------------------------------------------- plan usage

/// Distribution over content plans 1..=n_content across all steps.
pub fn plan_marginals(assignments: &[PlanAssignment], n_content: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n_content];
    let mut total = 0.0;
    for a in assignments {
        for plans in &a.step_plans {
            for &p in plans {
                if (1..=n_content).contains(&(p as usize)) {
                    counts[p as usize - 1] += 1.0;
                    total += 1.0;
                }
            }
        }
    }
    if total > 0.0 {
        for c in counts.iter_mut() {
            *c /= total;
        }
    }
    counts
}

pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

// --------------------------------------------------------- attention stats

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadStat {
    pub layer: usize,
    pub head: usize,
    /// mean probability mass per planning-token key
    pub mean_plan: f64,
    /// mean probability mass per ordinary key (question included)
    pub mean_normal: f64,
    pub diff: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct AttentionStats {
    pub per_head: Vec<HeadStat>,
    pub mean_plan: f64,
    pub mean_normal: f64,
    pub n_sequences: usize,
}

struct HeadAccum {
    plan: f64,
    normal: f64,
    n: f64,
}

/// Accumulates per-key average attention separated into planning keys and
/// everything else, over all causal (query, key) pairs.
pub struct AttentionAccumulator {
    n_layers: usize,
    n_heads: usize,
    heads: Vec<HeadAccum>,
    n_sequences: usize,
}

impl AttentionAccumulator {
    pub fn new(n_layers: usize, n_heads: usize) -> Self {
        AttentionAccumulator {
            n_layers,
            n_heads,
            heads: (0..n_layers * n_heads)
                .map(|_| HeadAccum {
                    plan: 0.0,
                    normal: 0.0,
                    n: 0.0,
                })
                .collect(),
            n_sequences: 0,
        }
    }

    pub fn add(&mut self, maps: &AttentionMaps, roles: &[Role]) -> Result<()> {
        if maps.t != roles.len() {
            return Err(Error::Shape("attention map / role mask length mismatch".into()));
        }
        if maps.n_layers != self.n_layers || maps.n_heads != self.n_heads {
            return Err(Error::Shape("attention map shape mismatch".into()));
        }
        let is_plan: Vec<bool> = roles
            .iter()
            .map(|r| matches!(r, Role::Plan | Role::AnswerPlan))
            .collect();
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                let acc = &mut self.heads[l * self.n_heads + h];
                for tq in 0..maps.t {
                    let n_plan = is_plan[..=tq].iter().filter(|&&p| p).count();
                    let n_norm = tq + 1 - n_plan;
                    if n_plan == 0 || n_norm == 0 {
                        continue;
                    }
                    let row = maps.row(l, h, tq);
                    let mut plan_mass = 0.0;
                    for tk in 0..=tq {
                        if is_plan[tk] {
                            plan_mass += row[tk];
                        }
                    }
                    acc.plan += plan_mass / n_plan as f64;
                    acc.normal += (1.0 - plan_mass) / n_norm as f64;
                    acc.n += 1.0;
                }
            }
        }
        self.n_sequences += 1;
        Ok(())
    }

    pub fn finish(&self) -> AttentionStats {
        let mut per_head = Vec::new();
        let mut tp = 0.0;
        let mut tn = 0.0;
        let mut tc = 0.0;
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                let acc = &self.heads[l * self.n_heads + h];
                let n = acc.n.max(1.0);
                per_head.push(HeadStat {
                    layer: l,
                    head: h,
                    mean_plan: acc.plan / n,
                    mean_normal: acc.normal / n,
                    diff: (acc.plan - acc.normal) / n,
                });
                tp += acc.plan;
                tn += acc.normal;
                tc += acc.n;
            }
        }
        let tc = tc.max(1.0);
        AttentionStats {
            per_head,
            mean_plan: tp / tc,
            mean_normal: tn / tc,
            n_sequences: self.n_sequences,
        }
    }
}

/// Heads ranked by plan-vs-normal difference, largest first.
pub fn top_heads(stats: &AttentionStats, k: usize) -> Vec<HeadStat> {
    let mut heads = stats.per_head.clone();
    heads.sort_by(|a, b| b.diff.partial_cmp(&a.diff).unwrap());
    heads.truncate(k);
    heads
}

pub fn write_attention_csv(stats: &AttentionStats, path: &Path) -> Result<()> {
    let mut out = String::from("layer,head,mean_plan,mean_normal,diff\n");
    for s in &stats.per_head {
        writeln!(
            out,
            "{},{},{:.8},{:.8},{:.8}",
            s.layer, s.head, s.mean_plan, s.mean_normal, s.diff
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One heatmap per (layer, head) of the per-head plan-vs-normal difference.
pub fn write_attention_diff_svg(stats: &AttentionStats, path: &Path) -> Result<()> {
    let n_layers = stats.per_head.iter().map(|s| s.layer + 1).max().unwrap_or(0);
    let n_heads = stats.per_head.iter().map(|s| s.head + 1).max().unwrap_or(0);
    let cell = 40;
    let max_abs = stats
        .per_head
        .iter()
        .map(|s| s.diff.abs())
        .fold(1e-12, f64::max);
    let w = n_heads * cell + 60;
    let h = n_layers * cell + 40;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n"
    );
    for s in &stats.per_head {
        let v = s.diff / max_abs; // [-1, 1]
        let (r, g, b) = if v >= 0.0 {
            (255 - (v * 200.0) as i32, 255 - (v * 60.0) as i32, 255)
        } else {
            (255, 255 - (-v * 60.0) as i32, 255 - (-v * 200.0) as i32)
        };
        writeln!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({r},{g},{b})\" stroke=\"#888\"><title>layer {} head {} diff {:.6}</title></rect>",
            50 + s.head * cell,
            10 + s.layer * cell,
            s.layer,
            s.head,
            s.diff
        )
        .unwrap();
    }
    for l in 0..n_layers {
        writeln!(
            svg,
            "<text x=\"5\" y=\"{}\" font-size=\"11\">L{l}</text>",
            10 + l * cell + cell / 2
        )
        .unwrap();
    }
    for hd in 0..n_heads {
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\">H{hd}</text>",
            50 + hd * cell + cell / 2 - 8,
            n_layers * cell + 25
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

/// Full attention heatmap for one (layer, head) of one sequence.
pub fn write_attention_map_svg(
    maps: &AttentionMaps,
    layer: usize,
    head: usize,
    path: &Path,
) -> Result<()> {
    let t = maps.t;
    let cell = (600 / t.max(1)).clamp(2, 20);
    let w = t * cell + 20;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{w}\">\n"
    );
    for tq in 0..t {
        for tk in 0..t {
            let p = maps.get(layer, head, tq, tk);
            let shade = 255 - (p.min(1.0) * 255.0) as i32;
            writeln!(
                svg,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\"/>",
                10 + tk * cell,
                10 + tq * cell
            )
            .unwrap();
        }
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

// ---------------------------------------------------------------- probing

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeArch {
    Linear,
    Mlp2,
    Mlp6,
}

impl std::str::FromStr for ProbeArch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ProbeArch::Linear),
            "mlp2" => Ok(ProbeArch::Mlp2),
            "mlp6" => Ok(ProbeArch::Mlp6),
            _ => Err(Error::Config(format!("unknown probe arch {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeParams {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub hidden: usize,
}

impl Default for ProbeParams {
    fn default() -> Self {
        ProbeParams {
            epochs: 200,
            lr: 1e-2,
            batch: 32,
            hidden: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub model: Mlp,
    pub train_accuracy: f64,
}

fn probe_sizes(d: usize, k: usize, arch: ProbeArch, hidden: usize) -> Vec<usize> {
    match arch {
        ProbeArch::Linear => vec![d, k],
        ProbeArch::Mlp2 => vec![d, hidden, k],
        ProbeArch::Mlp6 => {
            let mut s = vec![d];
            s.extend(std::iter::repeat(hidden).take(5));
            s.push(k);
            s
        }
    }
}

fn softmax_ce_grad(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (logits[target] - m);
    let mut grad: Vec<f64> = exps.iter().map(|&e| e / z).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

/// Trains a softmax classifier from embeddings to labels 0..k.
pub fn probe_fit(
    x: &[Vec<f64>],
    y: &[usize],
    k: usize,
    arch: ProbeArch,
    seed: u64,
    params: &ProbeParams,
) -> Result<ProbeResult> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Config("probe inputs and labels must align".into()));
    }
    if y.iter().any(|&l| l >= k) {
        return Err(Error::Config("probe label out of range".into()));
    }
    let d = x[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mlp = Mlp::new(&probe_sizes(d, k, arch, params.hidden), &mut rng);
    let shapes: Vec<usize> = mlp
        .weights
        .iter()
        .chain(mlp.biases.iter())
        .map(|v| v.len())
        .collect();
    let mut opt = AdamW::new(params.lr, 1e-4, &shapes);
    let mut order: Vec<usize> = (0..x.len()).collect();
    for _ in 0..params.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for chunk in order.chunks(params.batch.max(1)) {
            let mut grads = mlp.zero_grads();
            for &i in chunk {
                let cache = mlp.forward_cached(&x[i]);
                let (_, dlogits) = softmax_ce_grad(cache.acts.last().unwrap(), y[i]);
                let scaled: Vec<f64> = dlogits.iter().map(|g| g / chunk.len() as f64).collect();
                mlp.backward(&cache, &scaled, &mut grads);
            }
            let grefs: Vec<&Vec<f64>> = grads.weights.iter().chain(grads.biases.iter()).collect();
            let mut prefs: Vec<&mut Vec<f64>> =
                mlp.weights.iter_mut().chain(mlp.biases.iter_mut()).collect();
            opt.update(&mut prefs, &grefs);
        }
    }
    let train_accuracy = probe_accuracy(&mlp, x, y);
    Ok(ProbeResult {
        model: mlp,
        train_accuracy,
    })
}

pub fn probe_accuracy(mlp: &Mlp, x: &[Vec<f64>], y: &[usize]) -> f64 {
    let mut hits = 0;
    for (xi, &yi) in x.iter().zip(y) {
        let out = mlp.forward(xi);
        let pred = out
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        hits += (pred == yi) as usize;
    }
    hits as f64 / x.len() as f64
}

/// Deterministic label permutation for the chance-level control.
pub fn permute_labels(y: &[usize], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = y.to_vec();
    for i in (1..out.len()).rev() {
        out.swap(i, rng.gen_range(0..=i));
    }
    out
}

// ---------------------------------------------------------------- ablation

/// (content plans, total planning tokens per step) grid. A total is split
/// evenly between shared prefix and plan-specific tokens, so it must be even.
pub fn ablation_grid() -> Vec<(usize, usize)> {
    let mut g = Vec::new();
    for &p in &[1usize, 3, 5, 7, 10] {
        for &t in &[2usize, 6, 10] {
            g.push((p, t));
        }
    }
    g
}

pub fn split_token_budget(total: usize) -> Result<(usize, usize)> {
    if total == 0 || total % 2 != 0 {
        return Err(Error::Config(format!(
            "token budget {total} cannot be split evenly between prefix and plan-specific tokens"
        )));
    }
    Ok((total / 2, total / 2))
}

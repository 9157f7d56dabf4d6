//! Plan inference: assigning a discrete plan id to each reasoning step.
//!
//! Three methods with a shared output shape. The arithmetic heuristic reads
//! the step text; k-means and the variational quantizer cluster step
//! embeddings extracted from a trained model's hidden states.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::io::{self, DType, StoredTensor};
use crate::model::tensor::{dot, gauss};
use crate::model::{forward, ForwardOpts, ModelState, Real};
use crate::nn::{AdamW, Mlp, MlpGrads};
use crate::tokenizer::{annotate, AnnotationMode, PlanAssignment, PlanId, Role, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMethod {
    Arithmetic,
    KMeans,
    SqVae,
}

impl std::str::FromStr for PlanMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arithmetic" => Ok(PlanMethod::Arithmetic),
            "kmeans" => Ok(PlanMethod::KMeans),
            "sqvae" => Ok(PlanMethod::SqVae),
            _ => Err(Error::Config(format!("unknown plan method {s:?}"))),
        }
    }
}

impl PlanMethod {
    /// Scheme tag used in planning-token names, e.g. "<kmeans1_0>".
    pub fn scheme(&self) -> &'static str {
        match self {
            PlanMethod::Arithmetic => "arith",
            PlanMethod::KMeans => "kmeans",
            PlanMethod::SqVae => "sqvae",
        }
    }
}

// ---------------------------------------------------------------- embeddings

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepKey {
    pub example_id: String,
    pub step_idx: usize,
}

#[derive(Debug, Clone)]
pub struct StepEmbeddings {
    pub d: usize,
    pub keys: Vec<StepKey>,
    /// row-major [keys.len() x d]
    pub data: Vec<f64>,
}

impl StepEmbeddings {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.keys.len()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "kind": "step_embeddings", "d": self.d, "index": self.keys });
        let t = StoredTensor {
            name: "embeddings".into(),
            dtype: DType::F32,
            rows: self.keys.len(),
            cols: self.d,
            trainable_tag: 0,
            data: self.data.iter().map(|&x| x as f32 as f64).collect(),
        };
        io::write_container(path, &meta.to_string(), &[t])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = io::read_container(path)?;
        let meta: serde_json::Value = serde_json::from_str(&meta)?;
        if meta["kind"] != "step_embeddings" {
            return Err(Error::Format(format!("{}: not an embedding file", path.display())));
        }
        let keys: Vec<StepKey> = serde_json::from_value(meta["index"].clone())?;
        let t = tensors
            .into_iter()
            .find(|t| t.name == "embeddings")
            .ok_or_else(|| Error::Format("missing embeddings tensor".into()))?;
        if t.rows != keys.len() {
            return Err(Error::Format("embedding index/tensor row mismatch".into()));
        }
        Ok(StepEmbeddings {
            d: t.cols,
            keys,
            data: t.data,
        })
    }
}

/// Mean of final hidden states over each step's tokens (separators excluded),
/// computed on the plain (no planning tokens) rendering of each example.
pub fn extract_step_embeddings<T: Real>(
    state: &ModelState<T>,
    vocab: &Vocabulary,
    dataset: &Dataset,
) -> Result<StepEmbeddings> {
    if state.vocab_hash != vocab.hash() {
        return Err(Error::Vocab("model/vocabulary hash mismatch".into()));
    }
    let d = state.config.d_model;
    let mut keys = Vec::new();
    let mut data = Vec::new();
    for ex in &dataset.examples {
        let seq = annotate(ex, None, vocab, AnnotationMode::Plain)?;
        let f = forward(
            state,
            &seq.token_ids,
            ForwardOpts {
                capture_attention: false,
                capture_hidden: true,
            },
        )?;
        let hidden = f.hidden.as_ref().unwrap();
        let mut step_idx = 0usize;
        let mut acc = vec![0.0f64; d];
        let mut count = 0usize;
        for (pos, role) in seq.role_mask.iter().enumerate() {
            if *role != Role::Step {
                continue;
            }
            if seq.token_ids[pos] == vocab.sep {
                if count > 0 {
                    keys.push(StepKey {
                        example_id: ex.id.clone(),
                        step_idx,
                    });
                    data.extend(acc.iter().map(|&a| a / count as f64));
                }
                acc.iter_mut().for_each(|a| *a = 0.0);
                count = 0;
                step_idx += 1;
                continue;
            }
            for (a, &h) in acc.iter_mut().zip(&hidden[pos * d..(pos + 1) * d]) {
                *a += h.to_f64();
            }
            count += 1;
        }
        if count > 0 {
            keys.push(StepKey {
                example_id: ex.id.clone(),
                step_idx,
            });
            data.extend(acc.iter().map(|&a| a / count as f64));
        }
    }
    if keys.is_empty() {
        return Err(Error::Config("no steps to embed".into()));
    }
    Ok(StepEmbeddings { d, keys, data })
}

// ------------------------------------------------------------ arithmetic

/// Content plans for the arithmetic heuristic: one per operator.
pub const ARITH_PLANS: usize = 4;

fn arith_op_plan(op: char) -> Option<PlanId> {
    match op {
        '+' => Some(1),
        '-' | '\u{2212}' => Some(2),
        '*' | '\u{00d7}' => Some(3),
        '/' | '\u{00f7}' => Some(4),
        _ => None,
    }
}

/// Plans for one step: operator occurrences in reading order, de-duplicated,
/// counting an operator only when it follows a digit (so a leading minus sign
/// is not an operation). Steps without a recognized operator fall back to
/// plan 1.
pub fn arithmetic_plan_step(step: &str) -> Vec<PlanId> {
    let mut plans = Vec::new();
    let mut last_digit = false;
    for c in step.chars() {
        if c.is_ascii_digit() {
            last_digit = true;
            continue;
        }
        if let Some(p) = arith_op_plan(c) {
            if last_digit && !plans.contains(&p) {
                plans.push(p);
            }
        }
        if !c.is_whitespace() {
            last_digit = false;
        }
    }
    if plans.is_empty() {
        plans.push(1);
    }
    plans
}

pub fn arithmetic_assignments(dataset: &Dataset) -> Vec<PlanAssignment> {
    dataset
        .examples
        .iter()
        .map(|ex| PlanAssignment {
            example_id: ex.id.clone(),
            step_plans: ex.steps.iter().map(|s| arithmetic_plan_step(s)).collect(),
            answer_plan: (ARITH_PLANS + 1) as PlanId,
        })
        .collect()
}

/// Turns flat per-step cluster labels (0-based, aligned with `keys`) into
/// per-example assignments with content plans 1..=n_content.
pub fn assignments_from_clusters(
    dataset: &Dataset,
    keys: &[StepKey],
    clusters: &[usize],
    n_content: usize,
) -> Result<Vec<PlanAssignment>> {
    if keys.len() != clusters.len() {
        return Err(Error::Shape("cluster labels do not match embedding index".into()));
    }
    let mut by_example: BTreeMap<&str, BTreeMap<usize, PlanId>> = BTreeMap::new();
    for (key, &c) in keys.iter().zip(clusters) {
        if c >= n_content {
            return Err(Error::Config(format!("cluster label {c} >= {n_content}")));
        }
        by_example
            .entry(&key.example_id)
            .or_default()
            .insert(key.step_idx, (c + 1) as PlanId);
    }
    let mut out = Vec::with_capacity(dataset.examples.len());
    for ex in &dataset.examples {
        let steps = by_example
            .get(ex.id.as_str())
            .ok_or_else(|| Error::Config(format!("no step labels for example {}", ex.id)))?;
        if steps.len() != ex.steps.len() {
            return Err(Error::Config(format!(
                "example {}: {} labeled steps, expected {}",
                ex.id,
                steps.len(),
                ex.steps.len()
            )));
        }
        out.push(PlanAssignment {
            example_id: ex.id.clone(),
            step_plans: (0..ex.steps.len()).map(|i| vec![steps[&i]]).collect(),
            answer_plan: (n_content + 1) as PlanId,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- k-means

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KMeansParams {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            max_iters: 100,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// inertia after each assignment pass, starting from the seeding
    pub inertia_history: Vec<f64>,
    pub n_iters: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; ties break toward the lowest index.
pub fn kmeans_assign(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Lloyd's algorithm with distance-weighted (k-means++) seeding. An emptied
/// cluster is reseeded from the point farthest from its current centroid.
pub fn kmeans_fit(
    data: &[Vec<f64>],
    k: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if data.len() < k {
        return Err(Error::Config(format!("{} points for k={k}", data.len())));
    }
    let d = data[0].len();
    if data.iter().any(|x| x.len() != d) {
        return Err(Error::Shape("ragged input to kmeans".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(data[rng.gen_range(0..data.len())].clone());
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..data.len())
        } else {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = data.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                r -= w;
                if r <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centroids.push(data[next].clone());
        for (dist, x) in d2.iter_mut().zip(data) {
            *dist = dist.min(sq_dist(x, centroids.last().unwrap()));
        }
    }

    let mut assignments = vec![0usize; data.len()];
    let mut inertia_history = Vec::new();
    let mut prev_inertia = f64::INFINITY;
    let mut n_iters = 0;
    for iter in 0..params.max_iters {
        n_iters = iter + 1;
        let mut inertia = 0.0;
        for (a, x) in assignments.iter_mut().zip(data) {
            *a = kmeans_assign(&centroids, x);
            inertia += sq_dist(x, &centroids[*a]);
        }
        inertia_history.push(inertia);
        if prev_inertia - inertia <= params.tol {
            break;
        }
        prev_inertia = inertia;

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (&a, x) in assignments.iter().zip(data) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // farthest point from its own centroid becomes the new seed
                let far = (0..data.len())
                    .max_by(|&i, &j| {
                        sq_dist(&data[i], &centroids[assignments[i]])
                            .partial_cmp(&sq_dist(&data[j], &centroids[assignments[j]]))
                            .unwrap()
                    })
                    .unwrap();
                centroids[c] = data[far].clone();
            } else {
                for (ci, &s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *ci = s / counts[c] as f64;
                }
            }
        }
    }
    let mut inertia = 0.0;
    for (a, x) in assignments.iter_mut().zip(data) {
        *a = kmeans_assign(&centroids, x);
        inertia += sq_dist(x, &centroids[*a]);
    }
    inertia_history.push(inertia);
    Ok(KMeansFit {
        centroids,
        assignments,
        inertia,
        inertia_history,
        n_iters,
    })
}

// ---------------------------------------------------------------- sq-vae

/// KL(N(mu, diag exp(logvar)) || N(0, I)).
pub fn kl_gauss(mu: &[f64], logvar: &[f64]) -> f64 {
    assert_eq!(mu.len(), logvar.len());
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SqVaeParams {
    pub hidden: usize,
    pub beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for SqVaeParams {
    fn default() -> Self {
        SqVaeParams {
            hidden: 32,
            beta: 1.0,
            lr: 1e-2,
            weight_decay: 0.0,
            epochs: 150,
            batch: 32,
        }
    }
}

/// Gaussian-softmax vector quantizer: the encoder's sampled latent selects a
/// soft mixture over a learned codebook, the decoder reconstructs the input
/// from the mixed code, and a standard-normal KL regularizes the latent.
#[derive(Debug, Clone)]
pub struct SqVae {
    pub enc: Mlp,
    pub dec: Mlp,
    /// [k x d] code vectors
    pub codebook: Vec<f64>,
    pub k: usize,
    pub d: usize,
    pub beta: f64,
}

pub struct SqVaeGrads {
    pub enc: MlpGrads,
    pub dec: MlpGrads,
    pub codebook: Vec<f64>,
}

impl SqVae {
    pub fn new(d: usize, k: usize, params: &SqVaeParams, rng: &mut ChaCha8Rng) -> Self {
        let enc = Mlp::new(&[d, params.hidden, 2 * k], rng);
        let dec = Mlp::new(&[d, params.hidden, d], rng);
        let codebook = (0..k * d).map(|_| gauss(rng)).collect();
        SqVae {
            enc,
            dec,
            codebook,
            k,
            d,
            beta: params.beta,
        }
    }

    pub fn zero_grads(&self) -> SqVaeGrads {
        SqVaeGrads {
            enc: self.enc.zero_grads(),
            dec: self.dec.zero_grads(),
            codebook: vec![0.0; self.codebook.len()],
        }
    }

    /// Loss for one input given the noise draw: squared-error reconstruction
    /// plus beta-weighted KL.
    pub fn loss(&self, x: &[f64], eps: &[f64]) -> f64 {
        self.loss_and_grads(x, eps, None)
    }

    pub fn loss_and_grads(&self, x: &[f64], eps: &[f64], grads: Option<&mut SqVaeGrads>) -> f64 {
        assert_eq!(x.len(), self.d);
        assert_eq!(eps.len(), self.k);
        let enc_cache = self.enc.forward_cached(x);
        let enc_out = enc_cache.acts.last().unwrap();
        let (mu, logvar) = enc_out.split_at(self.k);
        let std: Vec<f64> = logvar.iter().map(|lv| (0.5 * lv).exp()).collect();
        let z: Vec<f64> = mu
            .iter()
            .zip(&std)
            .zip(eps)
            .map(|((&m, &s), &e)| m + s * e)
            .collect();
        // softmax over the latent
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let expz: Vec<f64> = z.iter().map(|&v| (v - zmax).exp()).collect();
        let zsum: f64 = expz.iter().sum();
        let q: Vec<f64> = expz.iter().map(|&e| e / zsum).collect();
        let mut zbar = vec![0.0; self.d];
        for (i, &qi) in q.iter().enumerate() {
            for (zb, &c) in zbar.iter_mut().zip(&self.codebook[i * self.d..(i + 1) * self.d]) {
                *zb += qi * c;
            }
        }
        let dec_cache = self.dec.forward_cached(&zbar);
        let xhat = dec_cache.acts.last().unwrap();
        let recon: f64 = x.iter().zip(xhat).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let kl = kl_gauss(mu, logvar);
        let total = recon + self.beta * kl;

        if let Some(g) = grads {
            let dxhat: Vec<f64> = xhat.iter().zip(x).map(|(&h, &t)| 2.0 * (h - t)).collect();
            let dzbar = self.dec.backward(&dec_cache, &dxhat, &mut g.dec);
            let mut dq = vec![0.0; self.k];
            for i in 0..self.k {
                dq[i] = dot(&self.codebook[i * self.d..(i + 1) * self.d], &dzbar);
                for (gc, &db) in g.codebook[i * self.d..(i + 1) * self.d].iter_mut().zip(&dzbar)
                {
                    *gc += q[i] * db;
                }
            }
            let inner: f64 = q.iter().zip(&dq).map(|(&a, &b)| a * b).sum();
            let dz: Vec<f64> = q.iter().zip(&dq).map(|(&qi, &d)| qi * (d - inner)).collect();
            let mut denc = vec![0.0; 2 * self.k];
            for i in 0..self.k {
                denc[i] = dz[i] + self.beta * mu[i];
                denc[self.k + i] =
                    dz[i] * eps[i] * 0.5 * std[i] + self.beta * 0.5 * (logvar[i].exp() - 1.0);
            }
            self.enc.backward(&enc_cache, &denc, &mut g.enc);
        }
        total
    }

    /// Hard assignment: the argmax coordinate of the encoder mean.
    pub fn assign(&self, x: &[f64]) -> usize {
        let out = self.enc.forward(x);
        let mu = &out[..self.k];
        let mut best = 0;
        for (i, &m) in mu.iter().enumerate() {
            if m > mu[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
pub struct SqVaeFit {
    pub model: SqVae,
    pub assignments: Vec<usize>,
    pub loss_history: Vec<f64>,
}

/// Minibatch AdamW training; `k` is the number of content clusters.
pub fn sqvae_fit(
    data: &[Vec<f64>],
    k: usize,
    seed: u64,
    params: &SqVaeParams,
) -> Result<SqVaeFit> {
    if k < 1 {
        return Err(Error::Config("need at least one cluster".into()));
    }
    if data.is_empty() {
        return Err(Error::Config("empty input".into()));
    }
    let d = data[0].len();
    if data.iter().any(|x| x.len() != d) {
        return Err(Error::Shape("ragged input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = SqVae::new(d, k, params, &mut rng);
    // anchor the codebook on the data manifold
    for i in 0..k {
        let p = rng.gen_range(0..data.len());
        model.codebook[i * d..(i + 1) * d].copy_from_slice(&data[p]);
    }

    let shapes: Vec<usize> = model
        .enc
        .weights
        .iter()
        .chain(model.enc.biases.iter())
        .chain(model.dec.weights.iter())
        .chain(model.dec.biases.iter())
        .map(|v| v.len())
        .chain(std::iter::once(model.codebook.len()))
        .collect();
    let mut opt = AdamW::new(params.lr, params.weight_decay, &shapes);

    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_history = Vec::new();
    for _ in 0..params.epochs {
        // Fisher-Yates with the run rng
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(params.batch.max(1)) {
            let mut grads = model.zero_grads();
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let eps: Vec<f64> = (0..k).map(|_| gauss(&mut rng)).collect();
                batch_loss += model.loss_and_grads(&data[idx], &eps, Some(&mut grads));
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in grads
                .enc
                .weights
                .iter_mut()
                .chain(grads.enc.biases.iter_mut())
                .chain(grads.dec.weights.iter_mut())
                .chain(grads.dec.biases.iter_mut())
                .chain(std::iter::once(&mut grads.codebook))
            {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            epoch_loss += batch_loss;
            let grefs: Vec<&Vec<f64>> = grads
                .enc
                .weights
                .iter()
                .chain(grads.enc.biases.iter())
                .chain(grads.dec.weights.iter())
                .chain(grads.dec.biases.iter())
                .chain(std::iter::once(&grads.codebook))
                .collect();
            let mut prefs: Vec<&mut Vec<f64>> = model
                .enc
                .weights
                .iter_mut()
                .chain(model.enc.biases.iter_mut())
                .chain(model.dec.weights.iter_mut())
                .chain(model.dec.biases.iter_mut())
                .chain(std::iter::once(&mut model.codebook))
                .collect();
            opt.update(&mut prefs, &grefs);
        }
        loss_history.push(epoch_loss / n as f64);
    }
    let assignments = data.iter().map(|x| model.assign(x)).collect();
    Ok(SqVaeFit {
        model,
        assignments,
        loss_history,
    })
}

// ---------------------------------------------------------------- metrics

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut table: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut ra: BTreeMap<usize, f64> = BTreeMap::new();
    let mut rb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let c2 = |x: f64| x * (x - 1.0) / 2.0;
    let sum_ij: f64 = table.values().map(|&v| c2(v)).sum();
    let sum_a: f64 = ra.values().map(|&v| c2(v)).sum();
    let sum_b: f64 = rb.values().map(|&v| c2(v)).sum();
    let expected = sum_a * sum_b / c2(n as f64);
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_ij - expected) / (max_index - expected)
}

/// Gaussian blob mixture for clustering sanity checks.
pub fn make_blobs(
    n_per: usize,
    centers: &[Vec<f64>],
    std: f64,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (li, c) in centers.iter().enumerate() {
        for _ in 0..n_per {
            data.push(c.iter().map(|&v| v + std * gauss(&mut rng)).collect());
            labels.push(li);
        }
    }
    (data, labels)
}

//! Trial scoring: cosine similarity, metric-learned cosine with an
//! upper-triangular transform, in-domain mean adaptation, and adaptive
//! symmetric score normalization against a top-n impostor cohort.

use alloc::vec;
use alloc::vec::Vec;
use rand::RngExt;

use crate::math;
use crate::nnet::Embedding;
use crate::rng;
use crate::{Error, Result};

/// Upper-triangular D x D transform applied before cosine scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct CsmlTransform {
    dim: usize,
    /// Row-major D x D matrix; entries below the diagonal are zero.
    data: Vec<f64>,
}

impl CsmlTransform {
    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        CsmlTransform { dim, data }
    }

    pub fn from_rows(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::ShapeMismatch("transform matrix size mismatch".into()));
        }
        let t = CsmlTransform { dim, data };
        t.validate()?;
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.dim + col]
    }

    fn validate(&self) -> Result<()> {
        for r in 0..self.dim {
            for c in 0..r {
                if self.at(r, c) != 0.0 {
                    return Err(Error::InvalidInput(
                        "transform must be upper triangular".into(),
                    ));
                }
            }
            if self.at(r, r) == 0.0 {
                return Err(Error::Numeric(alloc::format!(
                    "zero diagonal entry at row {r} makes the transform singular"
                )));
            }
        }
        Ok(())
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::ShapeMismatch(alloc::format!(
                "transform is {}-dim, vector is {}-dim",
                self.dim,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.dim];
        for r in 0..self.dim {
            let row = &self.data[r * self.dim..(r + 1) * self.dim];
            // entries below the diagonal are structurally zero
            out[r] = row[r..].iter().zip(v[r..].iter()).map(|(&a, &b)| a * b).sum();
        }
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    math::sqrt(dot(a, a))
}

fn cosine_of(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch("embedding dims differ".into()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("zero-norm embedding in cosine score".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Plain cosine similarity in [-1, 1].
pub fn cosine_score(x1: &Embedding, x2: &Embedding) -> Result<f64> {
    cosine_of(&x1.vector, &x2.vector)
}

/// Cosine similarity of the transformed embeddings.
pub fn csml_score(x1: &Embedding, x2: &Embedding, transform: &CsmlTransform) -> Result<f64> {
    let a = transform.apply(&x1.vector)?;
    let b = transform.apply(&x2.vector)?;
    cosine_of(&a, &b)
}

/// Scoring backends usable wherever a pairwise scorer is expected.
#[derive(Debug, Clone)]
pub enum Scorer {
    Cosine,
    Csml(CsmlTransform),
}

impl Scorer {
    pub fn score(&self, x1: &Embedding, x2: &Embedding) -> Result<f64> {
        match self {
            Scorer::Cosine => cosine_score(x1, x2),
            Scorer::Csml(t) => csml_score(x1, x2, t),
        }
    }
}

/// Triplet-loss training options for the transform.
#[derive(Debug, Clone)]
pub struct CsmlTrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub margin: f64,
}

impl Default for CsmlTrainConfig {
    fn default() -> Self {
        CsmlTrainConfig { seed: 0, epochs: 20, learning_rate: 0.01, margin: 0.2 }
    }
}

/// Gradient of csml_score(x1, x2, A) with respect to A (upper triangle
/// only), plus the score itself.
fn csml_score_grad(
    x1: &[f64],
    x2: &[f64],
    transform: &CsmlTransform,
) -> Result<(f64, Vec<f64>)> {
    let d = transform.dim;
    let u = transform.apply(x1)?;
    let v = transform.apply(x2)?;
    let (nu, nv) = (norm(&u), norm(&v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Numeric("transform collapsed an embedding to zero".into()));
    }
    let s = dot(&u, &v) / (nu * nv);
    // dS/du = v/(|u||v|) - S u / |u|^2, dS/dv symmetric
    let mut du = vec![0.0; d];
    let mut dv = vec![0.0; d];
    for i in 0..d {
        du[i] = v[i] / (nu * nv) - s * u[i] / (nu * nu);
        dv[i] = u[i] / (nu * nv) - s * v[i] / (nv * nv);
    }
    // dS/dA[r,c] = du[r] * x1[c] + dv[r] * x2[c], upper triangle only
    let mut da = vec![0.0; d * d];
    for r in 0..d {
        for c in r..d {
            da[r * d + c] = du[r] * x1[c] + dv[r] * x2[c];
        }
    }
    Ok((s, da))
}

/// Hinge triplet objective sum(max(0, margin - S(a,p) + S(a,n))) and its
/// gradient over the upper triangle of the transform.
pub fn triplet_loss_grad(
    triplets: &[(&Embedding, &Embedding, &Embedding)],
    transform: &CsmlTransform,
    margin: f64,
) -> Result<(f64, Vec<f64>)> {
    let d = transform.dim;
    let mut loss = 0.0;
    let mut grad = vec![0.0; d * d];
    for (anchor, positive, negative) in triplets {
        let (sp, dp) = csml_score_grad(&anchor.vector, &positive.vector, transform)?;
        let (sn, dn) = csml_score_grad(&anchor.vector, &negative.vector, transform)?;
        let violation = margin - sp + sn;
        if violation > 0.0 {
            loss += violation;
            for i in 0..d * d {
                grad[i] += dn[i] - dp[i];
            }
        }
    }
    Ok((loss, grad))
}

/// Learn the upper-triangular transform by gradient descent from the
/// identity, keeping the best matrix seen so the result never scores
/// worse than the start.
pub fn train_csml(
    triplets: &[(Embedding, Embedding, Embedding)],
    config: &CsmlTrainConfig,
) -> Result<CsmlTransform> {
    if triplets.is_empty() {
        return Err(Error::InvalidInput("no triplets to train on".into()));
    }
    let d = triplets[0].0.dim();
    let mut a = CsmlTransform::identity(d);
    let refs: Vec<(&Embedding, &Embedding, &Embedding)> =
        triplets.iter().map(|(x, p, n)| (x, p, n)).collect();
    let (mut best_loss, _) = triplet_loss_grad(&refs, &a, config.margin)?;
    let mut best = a.clone();
    for epoch in 0..config.epochs {
        let (loss, grad) = triplet_loss_grad(&refs, &a, config.margin)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(alloc::format!(
                "transform training diverged at epoch {epoch}"
            )));
        }
        if loss < best_loss {
            best_loss = loss;
            best = a.clone();
        }
        if loss == 0.0 {
            break;
        }
        let scale = config.learning_rate / triplets.len() as f64;
        for r in 0..d {
            for c in r..d {
                a.data[r * d + c] -= scale * grad[r * d + c];
            }
        }
        // keep the diagonal away from zero so A stays invertible
        for r in 0..d {
            let v = a.data[r * d + r];
            if math::abs(v) < 1e-6 {
                a.data[r * d + r] = if v < 0.0 { -1e-6 } else { 1e-6 };
            }
        }
    }
    let (final_loss, _) = triplet_loss_grad(&refs, &a, config.margin)?;
    if final_loss < best_loss {
        best = a;
    }
    Ok(best)
}

/// Uniformly sampled (anchor, positive, negative) index triples over a
/// labelled embedding set.
pub fn sample_triplets(
    labels: &[usize],
    count: usize,
    seed: u64,
) -> Result<Vec<(usize, usize, usize)>> {
    let n = labels.len();
    let mut by_class: alloc::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.len() < 2 || !by_class.values().any(|v| v.len() >= 2) {
        return Err(Error::InvalidInput(
            "triplet sampling needs 2+ classes and a class with 2+ members".into(),
        ));
    }
    let mut rng = rng::from_seed(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = rng.random_range(0..n);
        let class = labels[a];
        let pool = &by_class[&class];
        if pool.len() < 2 {
            continue;
        }
        let p = loop {
            let cand = pool[rng.random_range(0..pool.len())];
            if cand != a {
                break cand;
            }
        };
        let neg = loop {
            let cand = rng.random_range(0..n);
            if labels[cand] != class {
                break cand;
            }
        };
        out.push((a, p, neg));
    }
    Ok(out)
}

/// Subtract the mean of `adapt_set` from every embedding.
pub fn mean_adapt(embeddings: &[Embedding], adapt_set: &[Embedding]) -> Result<Vec<Embedding>> {
    if adapt_set.is_empty() {
        return Err(Error::InvalidInput("empty adaptation set".into()));
    }
    let d = adapt_set[0].dim();
    let mut center = vec![0.0; d];
    for e in adapt_set {
        if e.dim() != d {
            return Err(Error::ShapeMismatch("ragged adaptation set".into()));
        }
        for (c, &v) in center.iter_mut().zip(e.vector.iter()) {
            *c += v;
        }
    }
    for c in center.iter_mut() {
        *c /= adapt_set.len() as f64;
    }
    embeddings
        .iter()
        .map(|e| {
            if e.dim() != d {
                return Err(Error::ShapeMismatch("embedding dim differs from adaptation set".into()));
            }
            let vector = e.vector.iter().zip(center.iter()).map(|(&v, &c)| v - c).collect();
            Ok(Embedding::new(e.utt_id.clone(), vector))
        })
        .collect()
}

/// Impostor embeddings with the top-n selection size.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub embeddings: Vec<Embedding>,
    pub n_top: usize,
}

impl Cohort {
    pub fn new(embeddings: Vec<Embedding>, n_top: usize) -> Result<Self> {
        if embeddings.len() < 2 {
            return Err(Error::InvalidInput("cohort needs at least 2 embeddings".into()));
        }
        // the per-side statistics need a spread, so at least 2 survivors
        if n_top < 2 || n_top > embeddings.len() {
            return Err(Error::InvalidInput(alloc::format!(
                "top-n of {n_top} invalid for a cohort of {}",
                embeddings.len()
            )));
        }
        Ok(Cohort { embeddings, n_top })
    }
}

/// Mean and population std of the top-n cohort scores for one embedding.
pub fn cohort_stats(emb: &Embedding, cohort: &Cohort, scorer: &Scorer) -> Result<(f64, f64)> {
    let mut scores: Vec<f64> = cohort
        .embeddings
        .iter()
        .map(|c| scorer.score(emb, c))
        .collect::<Result<Vec<f64>>>()?;
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.truncate(cohort.n_top);
    let mu = math::mean(&scores);
    let sigma = math::sqrt(math::variance(&scores));
    Ok((mu, sigma))
}

/// Symmetric normalization of a raw score: (raw - mu1)/sigma1 +
/// (raw - mu2)/sigma2 with per-side statistics from the top-n best
/// scoring impostors.
pub fn s_norm(
    raw: f64,
    x1: &Embedding,
    x2: &Embedding,
    cohort: &Cohort,
    scorer: &Scorer,
) -> Result<f64> {
    let (mu1, sigma1) = cohort_stats(x1, cohort, scorer)?;
    let (mu2, sigma2) = cohort_stats(x2, cohort, scorer)?;
    s_norm_from_stats(raw, (mu1, sigma1), (mu2, sigma2))
}

/// The normalization arithmetic itself, reusable with cached statistics.
pub fn s_norm_from_stats(raw: f64, side1: (f64, f64), side2: (f64, f64)) -> Result<f64> {
    let (mu1, sigma1) = side1;
    let (mu2, sigma2) = side2;
    if sigma1 <= 0.0 {
        return Err(Error::Numeric("degenerate cohort spread on the enrollment side".into()));
    }
    if sigma2 <= 0.0 {
        return Err(Error::Numeric("degenerate cohort spread on the test side".into()));
    }
    Ok((raw - mu1) / sigma1 + (raw - mu2) / sigma2)
}

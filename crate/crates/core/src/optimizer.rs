//! Sample-then-select search over demo orderings and demo sets.
//!
//! Every criterion maps an ordering to a real score where lower is better,
//! so one selection path ([`rank_and_select`]) serves all of them, including
//! the oracle (negated accuracy) and the random baseline (constant 0).

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;

use itertools::Itertools;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    label_distribution, render_prompt, Backend, BackendError, DemoSet, Example, Ordering,
    PromptTemplate,
};
use crate::label_dist::{kl_divergence, mean_distribution, normalize, DistError, LabelDist, LabelSpace};
use crate::scoring::predict_direct;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("the development set is empty")]
    EmptyDevSet,
    #[error("development example {0} has no label")]
    UnlabeledExample(usize),
    #[error("asked to keep {requested} of {available} candidates")]
    TooFew { requested: usize, available: usize },
    #[error("pool of {pool} examples cannot supply sets of {k}")]
    PoolTooSmall { pool: usize, k: usize },
    #[error("invalid selection config: {0}")]
    BadConfig(String),
}

pub type Result<T, E = OptimizerError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CriterionKind {
    PdoFewshot,
    PdoPrior,
    LocalE,
    GlobalE,
    OracleNegAcc,
    Random,
}

impl CriterionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CriterionKind::PdoFewshot => "PDO_FEWSHOT",
            CriterionKind::PdoPrior => "PDO_PRIOR",
            CriterionKind::LocalE => "LOCAL_E",
            CriterionKind::GlobalE => "GLOBAL_E",
            CriterionKind::OracleNegAcc => "ORACLE_NEG_ACC",
            CriterionKind::Random => "RANDOM",
        }
    }
}

/// A selection criterion together with the data it is allowed to see.
///
/// Dev-set criteria receive only texts; only the oracle sees labels.
#[derive(Debug, Clone, Copy)]
pub enum Criterion<'a> {
    /// KL of the null-input distribution to uniform.
    PdoFewshot,
    /// KL of the mean dev-set distribution to `prior` (uniform prior gives FewShotU).
    PdoPrior {
        dev: &'a [String],
        prior: &'a LabelDist,
    },
    /// Sum over the dev set of per-example KL to uniform.
    LocalE { dev: &'a [String] },
    /// KL of the predicted-label histogram to uniform.
    GlobalE { dev: &'a [String] },
    /// Negated Direct accuracy on a labeled dev set.
    Oracle { dev: &'a [Example] },
    Random,
}

impl Criterion<'_> {
    pub fn kind(&self) -> CriterionKind {
        match self {
            Criterion::PdoFewshot => CriterionKind::PdoFewshot,
            Criterion::PdoPrior { .. } => CriterionKind::PdoPrior,
            Criterion::LocalE { .. } => CriterionKind::LocalE,
            Criterion::GlobalE { .. } => CriterionKind::GlobalE,
            Criterion::Oracle { .. } => CriterionKind::OracleNegAcc,
            Criterion::Random => CriterionKind::Random,
        }
    }

    pub fn score(&self, ctx: &OrderingContext<'_>, ordering: &Ordering) -> Result<f64> {
        match *self {
            Criterion::PdoFewshot => criterion_fewshot(ctx, ordering),
            Criterion::PdoPrior { dev, prior } => criterion_prior(ctx, ordering, dev, prior),
            Criterion::LocalE { dev } => criterion_local_e(ctx, ordering, dev),
            Criterion::GlobalE { dev } => criterion_global_e(ctx, ordering, dev),
            Criterion::Oracle { dev } => criterion_oracle(ctx, ordering, dev),
            Criterion::Random => Ok(0.0),
        }
    }
}

/// Everything a criterion needs besides the ordering and its own data.
#[derive(Clone, Copy)]
pub struct OrderingContext<'a> {
    pub backend: &'a dyn Backend,
    pub template: &'a PromptTemplate,
    pub space: &'a LabelSpace,
    pub demos: &'a DemoSet,
}

impl OrderingContext<'_> {
    pub fn distribution(&self, ordering: &Ordering, query: Option<&str>) -> Result<LabelDist> {
        let prompt = render_prompt(self.template, self.space, self.demos, ordering, query)?;
        Ok(label_distribution(self.backend, &prompt, self.space)?)
    }

    /// One backend query per dev text, in dev-set order.
    pub fn dev_distributions(&self, ordering: &Ordering, dev: &[String]) -> Result<Vec<LabelDist>> {
        if dev.is_empty() {
            return Err(OptimizerError::EmptyDevSet);
        }
        dev.iter()
            .map(|x| self.distribution(ordering, Some(x)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredOrdering {
    pub ordering: Ordering,
    pub score: f64,
    pub criterion: CriterionKind,
    /// Position in the sampled candidate list; breaks score ties.
    pub sample_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Orderings sampled per demo set.
    pub num_orderings: usize,
    /// Orderings kept.
    pub keep: usize,
    pub seed: u64,
    /// Candidate demo sets for example-set selection.
    pub num_sets: usize,
    /// Demo sets kept.
    pub keep_sets: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            num_orderings: 24,
            keep: 4,
            seed: 0,
            num_sets: 120,
            keep_sets: 20,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.keep == 0 || self.keep > self.num_orderings {
            return Err(OptimizerError::BadConfig(format!(
                "need 1 <= keep ({}) <= num_orderings ({})",
                self.keep, self.num_orderings
            )));
        }
        if self.keep_sets == 0 || self.keep_sets > self.num_sets {
            return Err(OptimizerError::BadConfig(format!(
                "need 1 <= keep_sets ({}) <= num_sets ({})",
                self.keep_sets, self.num_sets
            )));
        }
        Ok(())
    }
}

/// `k!`, saturating at `usize::MAX`.
pub fn factorial(k: usize) -> usize {
    (1..=k).try_fold(1usize, |acc, i| acc.checked_mul(i)).unwrap_or(usize::MAX)
}

/// Samples `count` distinct permutations of `0..k`.
///
/// When `count >= k!` every permutation is returned once, in lexicographic
/// order. Otherwise permutations are drawn uniformly and duplicates rejected.
pub fn sample_orderings(k: usize, count: usize, seed: u64) -> Vec<Ordering> {
    if count >= factorial(k) {
        return (0..k)
            .permutations(k)
            .map(|p| Ordering::new(p).expect("permutations are valid"))
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let mut perm: Vec<usize> = (0..k).collect();
    while out.len() < count {
        perm.shuffle(&mut rng);
        if seen.insert(perm.clone()) {
            out.push(Ordering::new(perm.clone()).expect("shuffle preserves permutation"));
        }
    }
    out
}

/// KL(P(Y | ordering, null) || Unif): one backend query.
pub fn criterion_fewshot(ctx: &OrderingContext<'_>, ordering: &Ordering) -> Result<f64> {
    let null = ctx.distribution(ordering, None)?;
    Ok(kl_divergence(&null, &ctx.space.uniform())?)
}

/// KL(mean_x P(Y | ordering, x) || prior): one backend query per dev text.
pub fn criterion_prior(
    ctx: &OrderingContext<'_>,
    ordering: &Ordering,
    dev: &[String],
    prior: &LabelDist,
) -> Result<f64> {
    let dists = ctx.dev_distributions(ordering, dev)?;
    let observed = mean_distribution(&dists)?;
    Ok(kl_divergence(&observed, prior)?)
}

/// Sum over dev texts of KL(P(Y | ordering, x) || Unif).
pub fn criterion_local_e(
    ctx: &OrderingContext<'_>,
    ordering: &Ordering,
    dev: &[String],
) -> Result<f64> {
    let uniform = ctx.space.uniform();
    let mut total = 0.0;
    for d in ctx.dev_distributions(ordering, dev)? {
        total += kl_divergence(&d, &uniform)?;
    }
    Ok(total)
}

/// KL(histogram of Direct predictions over dev || Unif).
pub fn criterion_global_e(
    ctx: &OrderingContext<'_>,
    ordering: &Ordering,
    dev: &[String],
) -> Result<f64> {
    let mut counts = vec![0.0; ctx.space.len()];
    for d in ctx.dev_distributions(ordering, dev)? {
        counts[predict_direct(&d).label] += 1.0;
    }
    let hist = normalize(ctx.space.id(), &counts)?;
    Ok(kl_divergence(&hist, &ctx.space.uniform())?)
}

/// Negated Direct accuracy on labeled dev examples.
pub fn criterion_oracle(
    ctx: &OrderingContext<'_>,
    ordering: &Ordering,
    dev: &[Example],
) -> Result<f64> {
    if dev.is_empty() {
        return Err(OptimizerError::EmptyDevSet);
    }
    let gold = dev
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let label = ex.label.as_deref().ok_or(OptimizerError::UnlabeledExample(i))?;
            ctx.space
                .index_of(label)
                .ok_or_else(|| BackendError::UnknownLabel(label.to_string()).into())
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut correct = 0usize;
    for (ex, &y) in dev.iter().zip(&gold) {
        let d = ctx.distribution(ordering, Some(&ex.text))?;
        if predict_direct(&d).label == y {
            correct += 1;
        }
    }
    Ok(-(correct as f64) / dev.len() as f64)
}

/// Runs `f` over `0..n` on up to `workers` threads, keeping results in index order.
pub(crate) fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, AtomicOrdering::SeqCst);
                if i >= n {
                    break;
                }
                let value = f(i);
                slots.lock().expect("result lock poisoned")[i] = Some(value);
            });
        }
    });
    slots
        .into_inner()
        .expect("result lock poisoned")
        .into_iter()
        .map(|v| v.expect("every index is filled"))
        .collect()
}

/// Scores each ordering; `sample_index` is the ordering's position in `orderings`.
pub fn score_orderings(
    ctx: &OrderingContext<'_>,
    criterion: &Criterion<'_>,
    orderings: &[Ordering],
    max_in_flight: usize,
) -> Result<Vec<ScoredOrdering>> {
    let kind = criterion.kind();
    parallel_map(orderings.len(), max_in_flight, |i| {
        criterion.score(ctx, &orderings[i]).map(|score| ScoredOrdering {
            ordering: orderings[i].clone(),
            score,
            criterion: kind,
            sample_index: i,
        })
    })
    .into_iter()
    .collect()
}

/// The `m` lowest-scoring entries in ascending order; ties keep sampling order.
pub fn rank_and_select(scored: &[ScoredOrdering], m: usize) -> Result<Vec<ScoredOrdering>> {
    if m > scored.len() {
        return Err(OptimizerError::TooFew {
            requested: m,
            available: scored.len(),
        });
    }
    let mut ranked = scored.to_vec();
    ranked.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.sample_index.cmp(&b.sample_index))
    });
    ranked.truncate(m);
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDemoSet {
    pub demos: DemoSet,
    /// Indices of the demos in the pool, in the set's storage order.
    pub pool_indices: Vec<usize>,
    /// The single ordering that was scored for this set.
    pub ordering: Ordering,
    pub score: f64,
    pub criterion: CriterionKind,
    pub sample_index: usize,
}

/// Samples `num_sets` demo sets of size `k` from `pool`, scores one random
/// ordering of each, and keeps the `keep_sets` lowest-scoring sets.
#[allow(clippy::too_many_arguments)]
pub fn select_example_sets(
    backend: &dyn Backend,
    template: &PromptTemplate,
    space: &LabelSpace,
    pool: &[Example],
    k: usize,
    num_sets: usize,
    keep_sets: usize,
    criterion: &Criterion<'_>,
    seed: u64,
    max_in_flight: usize,
) -> Result<Vec<ScoredDemoSet>> {
    if k == 0 || pool.len() < k {
        return Err(OptimizerError::PoolTooSmall { pool: pool.len(), k });
    }
    if keep_sets == 0 || keep_sets > num_sets {
        return Err(OptimizerError::BadConfig(format!(
            "need 1 <= keep_sets ({keep_sets}) <= num_sets ({num_sets})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates = Vec::with_capacity(num_sets);
    for _ in 0..num_sets {
        let pool_indices = index::sample(&mut rng, pool.len(), k).into_vec();
        let demos = DemoSet::new(pool_indices.iter().map(|&i| pool[i].clone()).collect())?;
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        candidates.push((pool_indices, demos, Ordering::new(perm)?));
    }

    let kind = criterion.kind();
    let scores = parallel_map(candidates.len(), max_in_flight, |i| {
        let (_, demos, ordering) = &candidates[i];
        let ctx = OrderingContext {
            backend,
            template,
            space,
            demos,
        };
        criterion.score(&ctx, ordering)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;

    let mut scored: Vec<ScoredDemoSet> = candidates
        .into_iter()
        .zip(scores)
        .enumerate()
        .map(|(i, ((pool_indices, demos, ordering), score))| ScoredDemoSet {
            demos,
            pool_indices,
            ordering,
            score,
            criterion: kind,
            sample_index: i,
        })
        .collect();
    scored.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.sample_index.cmp(&b.sample_index))
    });
    scored.truncate(keep_sets);
    Ok(scored)
}

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

/// Smoothed log-proportional task probabilities:
/// `P(k) = (ln|D(k)| + δ) / Σ (ln|D(j)| + δ)`.
pub fn sampling_distribution(sizes: &[usize], delta: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Config("sampling distribution needs at least one task".into()));
    }
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Config(format!("smoothing factor must be > 0, got {delta}")));
    }
    if let Some(i) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("task {i} has an empty training set")));
    }
    let weights: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln() + delta).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Splits a budget of `budget` batches across tasks by largest remainder on
/// `budget · P(t)`, then lifts any zero allocation to 1 by taking from the
/// largest allocation.
pub fn plan_epoch(probs: &[f64], budget: usize) -> Result<Vec<usize>> {
    let n = probs.len();
    if n == 0 {
        return Err(Error::Config("cannot plan an epoch without tasks".into()));
    }
    if budget < n {
        return Err(Error::Config(format!("batch budget {budget} is smaller than the {n} tasks")));
    }
    let quotas: Vec<f64> = probs.iter().map(|p| p * budget as f64).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    // Largest fractional part first; ties to the lower index.
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(budget.saturating_sub(assigned)) {
        alloc[i] += 1;
    }
    while let Some(zero) = alloc.iter().position(|&a| a == 0) {
        let donor = (0..n).max_by(|&a, &b| alloc[a].cmp(&alloc[b]).then(b.cmp(&a))).unwrap();
        alloc[donor] -= 1;
        alloc[zero] = 1;
    }
    debug_assert_eq!(alloc.iter().sum::<usize>(), budget);
    Ok(alloc)
}

/// Task probabilities plus a seeded stream for drawing task indices.
#[derive(Debug, Clone)]
pub struct SamplerState {
    task_ids: Vec<String>,
    sizes: Vec<usize>,
    delta: f64,
    probs: Vec<f64>,
    dist: WeightedIndex<f64>,
    rng: Rng,
}

impl SamplerState {
    pub fn new(tasks: &[(String, usize)], delta: f64, seed: u64) -> Result<Self> {
        let sizes: Vec<usize> = tasks.iter().map(|(_, n)| *n).collect();
        let probs = sampling_distribution(&sizes, delta)?;
        let dist = WeightedIndex::new(&probs).map_err(|e| Error::Config(format!("bad task weights: {e}")))?;
        Ok(Self {
            task_ids: tasks.iter().map(|(t, _)| t.clone()).collect(),
            sizes,
            delta,
            probs,
            dist,
            rng: stream(seed, "task-sampler"),
        })
    }

    pub fn task_ids(&self) -> &[String] {
        &self.task_ids
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Index of a task drawn with probability `P`.
    pub fn draw(&mut self) -> usize {
        self.dist.sample(&mut self.rng)
    }

    pub fn plan_epoch(&self, budget: usize) -> Result<Vec<(String, usize)>> {
        let alloc = plan_epoch(&self.probs, budget)?;
        Ok(self.task_ids.iter().cloned().zip(alloc).collect())
    }
}

//! Random hyperparameter search scored on held-out context pairs.

use rand::seq::IndexedRandom;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embed::sgns::{sigmoid, train_pairs, NegativeSampler, SgnsConfig};
use crate::embed::slice::{event_pairs, TimeSlice};
use crate::embed::token::Vocabulary;
use crate::error::{Error, Result};
use crate::rng;
use crate::time::{self, Timestamp};

const HOLDOUT_FRACTION: f64 = 0.1;

/// Candidate values per tuned setting. Every list must be non-empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rates: Vec<f64>,
    pub negatives: Vec<usize>,
    #[serde(with = "duration_list")]
    pub windows: Vec<i64>,
    pub epochs: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            learning_rates: vec![0.01, 0.025, 0.05],
            negatives: vec![2, 5, 10],
            windows: vec![time::HOUR, 2 * time::HOUR, 4 * time::HOUR, 8 * time::HOUR],
            epochs: vec![3, 5, 10],
        }
    }
}

mod duration_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Item(#[serde(with = "crate::time::duration_serde")] i64);

    pub fn serialize<S: Serializer>(v: &[i64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|&x| Item(x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<i64>, D::Error> {
        Ok(Vec::<Item>::deserialize(d)?.into_iter().map(|i| i.0).collect())
    }
}

impl SearchSpace {
    pub fn single(config: &SgnsConfig) -> Self {
        Self {
            learning_rates: vec![config.learning_rate],
            negatives: vec![config.negatives],
            windows: vec![config.window],
            epochs: vec![config.epochs],
        }
    }

    /// The config built from the smallest value of every list.
    pub fn lower_bounds(&self, base: &SgnsConfig) -> Result<SgnsConfig> {
        self.check()?;
        let min_f = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(SgnsConfig {
            learning_rate: min_f(&self.learning_rates),
            min_learning_rate: base.min_learning_rate.min(min_f(&self.learning_rates)),
            negatives: *self.negatives.iter().min().unwrap(),
            window: *self.windows.iter().min().unwrap(),
            epochs: *self.epochs.iter().min().unwrap(),
            ..base.clone()
        })
    }

    fn check(&self) -> Result<()> {
        let empty: Vec<&str> = [
            ("learning_rates", self.learning_rates.is_empty()),
            ("negatives", self.negatives.is_empty()),
            ("windows", self.windows.is_empty()),
            ("epochs", self.epochs.is_empty()),
        ]
        .iter()
        .filter(|(_, e)| *e)
        .map(|(n, _)| *n)
        .collect();
        if empty.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("empty search space: {}", empty.join(", "))))
        }
    }

    fn sample(&self, base: &SgnsConfig, rng: &mut rng::Rng) -> SgnsConfig {
        let learning_rate = *self.learning_rates.choose(rng).unwrap();
        SgnsConfig {
            learning_rate,
            min_learning_rate: base.min_learning_rate.min(learning_rate),
            negatives: *self.negatives.choose(rng).unwrap(),
            window: *self.windows.choose(rng).unwrap(),
            epochs: *self.epochs.choose(rng).unwrap(),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trial {
    pub config: SgnsConfig,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneResult {
    pub best: SgnsConfig,
    pub objective: f64,
    pub trials: Vec<Trial>,
}

/// Mean over non-empty slices of the held-out margin: `σ(y·c)` of a
/// held-out positive pair minus the mean `σ(y·cₙ)` over `k` sampled
/// negatives. The 10% holdout and the negatives depend only on `eval_seed`.
pub fn evaluate_config(slices: &[TimeSlice], config: &SgnsConfig, eval_seed: u64) -> Result<f64> {
    let mut margins = Vec::new();
    for slice in slices.iter().filter(|s| !s.is_empty()) {
        let (vocab, event_tokens) = Vocabulary::build(&slice.events, config.granularity);
        let times: Vec<Timestamp> = slice.events.iter().map(|e| e.sent_time).collect();
        let mut pairs = event_pairs(&times, config.window);
        if pairs.len() < 2 {
            continue;
        }
        let mut split = rng::stream(eval_seed, slice.index as u64);
        pairs.shuffle(&mut split);
        let held = ((pairs.len() as f64 * HOLDOUT_FRACTION).ceil() as usize).clamp(1, pairs.len() - 1);
        let (test, train) = pairs.split_at(held);
        let seed = rng::derive_seed(config.seed, slice.index as u64);
        let trained = train_pairs(vocab.len(), &event_tokens, train, &vocab.counts, config, seed)?;
        let sampler = NegativeSampler::new(&vocab.counts, config.alpha)?;
        let d = config.dim;
        let row = |m: &[f64], i: usize| m[i * d..(i + 1) * d].to_vec();
        let score = |a: usize, b: usize| {
            let y = row(&trained.activity, a);
            let c = row(&trained.context, b);
            sigmoid(y.iter().zip(&c).map(|(p, q)| p * q).sum())
        };
        let mut neg_rng = rng::stream(eval_seed, 1_000_000 + slice.index as u64);
        let mut total = 0.0;
        for &(i, j) in test {
            let (a, b) = (event_tokens[i], event_tokens[j]);
            let neg: f64 = (0..config.negatives).map(|_| score(a, sampler.sample(&mut neg_rng))).sum::<f64>()
                / config.negatives as f64;
            total += score(a, b) - neg;
        }
        margins.push(total / test.len() as f64);
    }
    if margins.is_empty() {
        return Err(Error::InvalidInput("no slice has enough context pairs to evaluate".into()));
    }
    Ok(margins.iter().sum::<f64>() / margins.len() as f64)
}

/// Random search: `budget` configs drawn from `space` (other settings from
/// `base`), best by held-out margin, ties to the earliest trial.
pub fn tune_hyperparameters(
    slices: &[TimeSlice],
    space: &SearchSpace,
    base: &SgnsConfig,
    budget: usize,
    seed: u64,
) -> Result<TuneResult> {
    space.check()?;
    if budget < 1 {
        return Err(Error::InvalidInput("tuning budget must be at least 1".into()));
    }
    let mut r = rng::seeded(seed);
    let eval_seed = eval_seed(seed);
    let mut trials = Vec::with_capacity(budget);
    for _ in 0..budget {
        let config = space.sample(base, &mut r);
        let objective = evaluate_config(slices, &config, eval_seed)?;
        log::debug!("tune trial {:?} -> {objective:.6}", config);
        trials.push(Trial { config, objective });
    }
    let best = trials
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.objective.total_cmp(&b.objective).then(j.cmp(i)))
        .map(|(_, t)| t.clone())
        .expect("budget >= 1");
    Ok(TuneResult { best: best.config, objective: best.objective, trials })
}

/// Seed used by `tune_hyperparameters` for its holdout split and negatives.
pub fn eval_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, 0xE7A1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::sgns::tests::community_slice;
    use crate::time::HOUR;

    fn base() -> SgnsConfig {
        SgnsConfig { dim: 16, subsample: 0.0, ..SgnsConfig::default() }
    }

    #[test]
    fn single_point_and_budget_one() {
        let slices = vec![community_slice(60)];
        let space = SearchSpace::single(&SgnsConfig { window: 2 * HOUR, ..base() });
        let r = tune_hyperparameters(&slices, &space, &base(), 3, 5).unwrap();
        assert_eq!(r.best.window, 2 * HOUR);
        assert_eq!(r.trials.len(), 3);

        let one = tune_hyperparameters(&slices, &SearchSpace::default(), &base(), 1, 5).unwrap();
        assert_eq!(one.best, one.trials[0].config);
        let again = tune_hyperparameters(&slices, &SearchSpace::default(), &base(), 1, 5).unwrap();
        assert_eq!(one, again);
    }

    #[test]
    fn empty_space_or_budget_rejected() {
        let slices = vec![community_slice(10)];
        let space = SearchSpace { negatives: vec![], ..SearchSpace::default() };
        assert!(tune_hyperparameters(&slices, &space, &base(), 2, 1).is_err());
        assert!(tune_hyperparameters(&slices, &SearchSpace::default(), &base(), 0, 1).is_err());
    }

    #[test]
    fn search_beats_lower_bounds() {
        let slices = vec![community_slice(150)];
        let space = SearchSpace::default();
        let r = tune_hyperparameters(&slices, &space, &base(), 20, 11).unwrap();
        let floor = evaluate_config(&slices, &space.lower_bounds(&base()).unwrap(), eval_seed(11)).unwrap();
        assert!(r.objective >= floor, "{} < {}", r.objective, floor);
    }

    #[test]
    fn search_space_json() {
        let s: SearchSpace =
            serde_json::from_str(r#"{"learning_rates":[0.02],"negatives":[5],"windows":["4h",60],"epochs":[1]}"#).unwrap();
        assert_eq!(s.windows, vec![4 * HOUR, 60]);
    }
}

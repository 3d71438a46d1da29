//! Precision/recall evaluation and random-search tuning with a
//! no-improvement stopping window.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::robust::lambda_grid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: u16,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassMetrics {
    /// Reference count of the class.
    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }
}

/// One-vs-rest counts for `class`. An empty prediction set has precision 1
/// and a class absent from the reference has recall 1.
pub fn class_metrics(labels: &[u16], reference: &[u16], class: u16) -> Result<ClassMetrics> {
    if labels.len() != reference.len() {
        return Err(invalid(format!(
            "label count {} differs from reference count {}",
            labels.len(),
            reference.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&l, &r) in labels.iter().zip(reference) {
        match (l == class, r == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    Ok(ClassMetrics {
        class,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        tp,
        fp,
        fn_,
    })
}

pub fn precision_recall(labels: &[u16], reference: &[u16], class: u16) -> Result<(f64, f64)> {
    class_metrics(labels, reference, class).map(|m| (m.precision, m.recall))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    /// Foreground classes only.
    pub per_class: Vec<ClassMetrics>,
    pub precision: f64,
    pub recall: f64,
}

impl Metrics {
    pub fn score(&self) -> f64 {
        0.5 * (self.precision + self.recall)
    }

    /// Pools several evaluations (e.g. all resolutions) by summing counts.
    pub fn pooled(parts: &[Metrics]) -> Result<Metrics> {
        let first = parts.first().ok_or_else(|| invalid("nothing to pool"))?;
        let per_class: Vec<ClassMetrics> = first
            .per_class
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let (tp, fp, fn_) = parts.iter().fold((0, 0, 0), |acc, p| {
                    let c = &p.per_class[i];
                    (acc.0 + c.tp, acc.1 + c.fp, acc.2 + c.fn_)
                });
                let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
                ClassMetrics { class: m.class, precision: ratio(tp, tp + fp), recall: ratio(tp, tp + fn_), tp, fp, fn_ }
            })
            .collect();
        Ok(Self::from_classes(per_class))
    }

    fn from_classes(per_class: Vec<ClassMetrics>) -> Self {
        let k = per_class.len().max(1) as f64;
        let precision = per_class.iter().map(|m| m.precision).sum::<f64>() / k;
        let recall = per_class.iter().map(|m| m.recall).sum::<f64>() / k;
        Self { per_class, precision, recall }
    }
}

/// Per-class metrics for every class except `background`, and their averages.
pub fn evaluate(labels: &[u16], reference: &[u16], n_clas: usize, background: usize) -> Result<Metrics> {
    if reference.is_empty() {
        return Err(invalid("empty validation set"));
    }
    if background >= n_clas {
        return Err(invalid(format!("background class {background} outside {n_clas} classes")));
    }
    let per_class = (0..n_clas)
        .filter(|&c| c != background)
        .map(|c| class_metrics(labels, reference, c as u16))
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics::from_classes(per_class))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TunerConfig {
    pub grid: Vec<f64>,
    pub window: usize,
    pub seed: u64,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self { grid: lambda_grid(), window: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    /// What was tuned, e.g. `lambda_prior[2]` or `lambda_hcrf`.
    pub target: String,
    pub trial: usize,
    pub value: f64,
    pub precision: f64,
    pub recall: f64,
    pub per_class: Vec<ClassMetrics>,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneOutcome {
    pub target: String,
    pub best: f64,
    pub best_trial: usize,
    pub trials: Vec<TrialRecord>,
}

/// Random search over `config.grid`.
///
/// The first `|grid|` trials visit the grid in a random order; afterwards
/// values are drawn uniformly with replacement. A trial improves when both
/// its averaged precision and recall strictly exceed those of every trial in
/// the preceding window. The search stops after `window` consecutive trials
/// without improvement. The best trial maximizes `(precision + recall) / 2`,
/// the earliest winning ties.
pub fn tune<F>(config: &TunerConfig, stream: u64, target: &str, mut objective: F) -> Result<TuneOutcome>
where
    F: FnMut(f64) -> Result<Metrics>,
{
    if config.grid.is_empty() || config.window == 0 {
        return Err(invalid("tuning needs a non-empty grid and a positive window"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let mut first_pass = config.grid.clone();
    first_pass.shuffle(&mut rng);
    let mut trials: Vec<TrialRecord> = Vec::new();
    let mut stale = 0;
    while stale < config.window {
        let t = trials.len();
        let value = match first_pass.get(t) {
            Some(&v) => v,
            None => config.grid[rng.random_range(0..config.grid.len())],
        };
        let m = objective(value)?;
        let window = &trials[t.saturating_sub(config.window)..];
        let improved = window.iter().all(|p| m.precision > p.precision && m.recall > p.recall);
        stale = if improved { 0 } else { stale + 1 };
        log::debug!("{target} trial {t}: value {value} precision {} recall {}", m.precision, m.recall);
        trials.push(TrialRecord {
            target: target.to_string(),
            trial: t,
            value,
            precision: m.precision,
            recall: m.recall,
            per_class: m.per_class,
            improved,
        });
    }
    let mut best = 0;
    for (i, tr) in trials.iter().enumerate() {
        if tr.precision + tr.recall > trials[best].precision + trials[best].recall {
            best = i;
        }
    }
    Ok(TuneOutcome { target: target.to_string(), best: trials[best].value, best_trial: best, trials })
}

/// Tunes one prior weight per resolution, coarsest first. The objective gets
/// the resolution and the candidate value; layers already tuned are frozen in
/// `tuned`, indexed by resolution.
pub fn tune_layers<F>(config: &TunerConfig, n_lay: usize, mut objective: F) -> Result<Vec<TuneOutcome>>
where
    F: FnMut(usize, f64, &[Option<f64>]) -> Result<Metrics>,
{
    let mut tuned: Vec<Option<f64>> = vec![None; n_lay + 1];
    let mut outcomes = Vec::with_capacity(n_lay + 1);
    for r in (0..=n_lay).rev() {
        let frozen = tuned.clone();
        let out = tune(config, r as u64, &format!("lambda_prior[{r}]"), |v| objective(r, v, &frozen))?;
        tuned[r] = Some(out.best);
        outcomes.push(out);
    }
    outcomes.reverse();
    Ok(outcomes)
}

/// Tunes the fusion coupling on its own random stream.
pub fn tune_hcrf<F>(config: &TunerConfig, objective: F) -> Result<TuneOutcome>
where
    F: FnMut(f64) -> Result<Metrics>,
{
    tune(config, u64::MAX, "lambda_hcrf", objective)
}

/// One JSON object per trial and line.
pub fn write_trial_log<W: Write>(outcomes: &[&TuneOutcome], mut out: W) -> Result<()> {
    for o in outcomes {
        for t in &o.trials {
            serde_json::to_writer(&mut out, t)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn synthetic(v: f64) -> Metrics {
        // peaked at 0.7
        let q = 1.0 - (v - 0.7).abs();
        Metrics { per_class: Vec::new(), precision: q, recall: q * q }
    }

    fn constant(_: f64) -> Metrics {
        Metrics { per_class: Vec::new(), precision: 0.5, recall: 0.5 }
    }

    #[test]
    fn metric_examples() {
        assert_eq!(precision_recall(&[1, 0, 1], &[1, 0, 1], 1).unwrap(), (1.0, 1.0));
        assert_eq!(precision_recall(&[0, 0, 0], &[1, 0, 1], 1).unwrap(), (1.0, 0.0));
        assert_eq!(precision_recall(&[0, 0], &[0, 0], 1).unwrap(), (1.0, 1.0));
        let pred = [1, 1, 1, 1, 1, 0, 0];
        let refr = [1, 1, 1, 1, 0, 1, 0];
        assert_eq!(precision_recall(&pred, &refr, 1).unwrap(), (0.8, 0.8));
        assert!(precision_recall(&[0], &[0, 1], 1).is_err());
        assert!(evaluate(&[], &[], 2, 0).is_err());
    }

    #[test]
    fn averages_skip_background() {
        let m = evaluate(&[0, 1, 2, 2], &[0, 1, 2, 1], 3, 0).unwrap();
        assert_eq!(m.per_class.iter().map(|c| c.class).collect::<Vec<_>>(), vec![1, 2]);
        assert!((m.precision - 0.75).abs() < 1e-15);
        assert!((m.recall - 0.75).abs() < 1e-15);
        let pooled = Metrics::pooled(&[m.clone(), m.clone()]).unwrap();
        assert_eq!(pooled.precision, m.precision);
    }

    #[test]
    fn finds_unique_maximum() {
        for seed in 0..50 {
            let cfg = TunerConfig { seed, ..Default::default() };
            let out = tune(&cfg, 0, "x", |v| Ok(synthetic(v))).unwrap();
            assert_eq!(out.best, 0.7);
            assert!(out.trials.iter().all(|t| cfg.grid.contains(&t.value)));
        }
    }

    #[test]
    fn constant_objective_stops_after_window_plus_one() {
        let out = tune(&TunerConfig::default(), 0, "x", |v| Ok(constant(v))).unwrap();
        assert_eq!(out.trials.len(), 21);
        assert!(out.trials[0].improved);
        assert!(out.trials[1..].iter().all(|t| !t.improved));
        assert_eq!(out.best_trial, 0);
    }

    #[test]
    fn log_is_reproducible() {
        let run = || {
            let cfg = TunerConfig { seed: 9, ..Default::default() };
            let out = tune(&cfg, 3, "x", |v| Ok(synthetic(v))).unwrap();
            let mut buf = Vec::new();
            write_trial_log(&[&out], &mut buf).unwrap();
            buf
        };
        let a = run();
        assert_eq!(a, run());
        let first: serde_json::Value = serde_json::from_slice(a.split(|&b| b == b'\n').next().unwrap()).unwrap();
        assert_eq!(first["trial"], 0);
    }

    #[test]
    fn layers_are_tuned_coarse_to_fine() {
        let mut seen = Vec::new();
        let out = tune_layers(&TunerConfig::default(), 2, |r, v, frozen| {
            if seen.last() != Some(&r) {
                seen.push(r);
                // every coarser layer is already fixed
                assert!(frozen[r + 1..].iter().all(Option::is_some));
                assert!(frozen[..=r].iter().all(Option::is_none));
            }
            Ok(synthetic(v))
        })
        .unwrap();
        assert_eq!(seen, vec![2, 1, 0]);
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|o| o.best == 0.7));
        assert_eq!(out[1].target, "lambda_prior[1]");
    }

    proptest! {
        #[test]
        fn stopping_bound(seed in 0u64..1000, noise in 0u64..1000) {
            let cfg = TunerConfig { seed, ..Default::default() };
            let out = tune(&cfg, 0, "x", |v| {
                let h = ((v * 1000.0) as u64 ^ noise) % 97;
                Ok(Metrics { per_class: Vec::new(), precision: h as f64 / 97.0, recall: ((h * 31) % 97) as f64 / 97.0 })
            }).unwrap();
            let improvements = out.trials.iter().filter(|t| t.improved).count();
            prop_assert!(out.trials.len() <= (improvements + 1) * cfg.window + cfg.grid.len());
        }

        #[test]
        fn confusion_identity(labels in proptest::collection::vec(0u16..3, 1..60), seed in 0u16..3) {
            let reference: Vec<u16> = labels.iter().map(|&l| (l + seed) % 3).collect();
            for c in 0..3u16 {
                let m = class_metrics(&labels, &reference, c).unwrap();
                prop_assert_eq!(m.support(), reference.iter().filter(|&&r| r == c).count());
                prop_assert!((0.0..=1.0).contains(&m.precision) && (0.0..=1.0).contains(&m.recall));
            }
        }
    }
}

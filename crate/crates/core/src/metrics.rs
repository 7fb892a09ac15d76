//! Evaluation metrics over step records.
//!
//! - Type: predicted action kind equals the ground-truth kind.
//! - SR: step fully correct (kind plus arguments, see [`match_step`]).
//! - TSR: every step of a trajectory fully correct.
//! - Intervention quality: confusion counts of the gate against ground-truth
//!   scores, summarised as HSR, IP and AP.
//! - RE: human steps over steps actually taken.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::match_step;
use crate::controller::{ReplayRecord, Verdict};
use crate::types::{Action, ActionKind, ScreenDims};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),
    #[error("ratio must lie strictly between 0 and 1, got {0}")]
    InvalidRatio(f64),
}

/// One evaluated step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalStep {
    pub pred: Action,
    pub gt: Action,
    pub dims: ScreenDims,
}

/// Report columns; kinds are grouped by their ground-truth action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Column {
    Scroll,
    Press,
    Stop,
    Click,
    Type,
}

impl Column {
    pub const ALL: [Column; 5] = [Column::Scroll, Column::Press, Column::Stop, Column::Click, Column::Type];

    pub fn of(kind: ActionKind) -> Self {
        match kind {
            ActionKind::Click => Column::Click,
            ActionKind::Scroll => Column::Scroll,
            ActionKind::Type => Column::Type,
            ActionKind::PressBack | ActionKind::PressHome => Column::Press,
            ActionKind::Complete | ActionKind::Impossible => Column::Stop,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Column::Scroll => "SCROLL",
            Column::Press => "PRESS",
            Column::Stop => "STOP",
            Column::Click => "CLICK",
            Column::Type => "TYPE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Accuracy {
    pub steps: usize,
    pub type_correct: usize,
    pub full_correct: usize,
}

impl Accuracy {
    pub fn type_rate(&self) -> Option<f64> {
        ratio(self.type_correct, self.steps)
    }

    pub fn sr(&self) -> Option<f64> {
        ratio(self.full_correct, self.steps)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub trajectories: usize,
    pub successful_trajectories: usize,
    pub total: Accuracy,
    pub columns: BTreeMap<Column, Accuracy>,
}

impl AccuracyReport {
    pub fn type_rate(&self) -> f64 {
        self.total.type_rate().unwrap_or(0.0)
    }

    pub fn sr(&self) -> f64 {
        self.total.sr().unwrap_or(0.0)
    }

    pub fn tsr(&self) -> f64 {
        self.successful_trajectories as f64 / self.trajectories as f64
    }
}

/// Type / SR / TSR over trajectories of evaluated steps. An empty
/// trajectory counts as unsuccessful.
pub fn eval_dataset(trajectories: &[Vec<EvalStep>]) -> Result<AccuracyReport, MetricsError> {
    if trajectories.iter().all(Vec::is_empty) {
        return Err(MetricsError::EmptyDataset);
    }
    let mut total = Accuracy::default();
    let mut columns: BTreeMap<Column, Accuracy> = Column::ALL.iter().map(|&c| (c, Accuracy::default())).collect();
    let mut successful = 0;
    for traj in trajectories {
        let mut all_correct = !traj.is_empty();
        for step in traj {
            let m = match_step(&step.pred, &step.gt, step.dims);
            let col = columns.get_mut(&Column::of(step.gt.kind())).expect("every column present");
            for acc in [&mut total, col] {
                acc.steps += 1;
                acc.type_correct += usize::from(m.type_match);
                acc.full_correct += usize::from(m.full_match);
            }
            all_correct &= m.full_match;
        }
        successful += usize::from(all_correct);
    }
    Ok(AccuracyReport { trajectories: trajectories.len(), successful_trajectories: successful, total, columns })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Confusion {
    Tp,
    Fp,
    Tn,
    Fn,
}

/// Compares the gate's choice on the predicted score with the choice the
/// ground-truth score would have made. "Positive" means acting
/// autonomously (score at or above the threshold).
pub fn classify_intervention(pred_score: u8, gt_score: u8, gamma: f64) -> Confusion {
    let pred_auto = f64::from(pred_score) >= gamma;
    let gt_auto = f64::from(gt_score) >= gamma;
    match (pred_auto, gt_auto) {
        (true, true) => Confusion::Tp,
        (false, false) => Confusion::Tn,
        (true, false) => Confusion::Fp,
        (false, true) => Confusion::Fn,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn add(&mut self, c: Confusion) {
        match c {
            Confusion::Tp => self.tp += 1,
            Confusion::Fp => self.fp += 1,
            Confusion::Tn => self.tn += 1,
            Confusion::Fn => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Rates are `None` when their denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InterventionRates {
    pub hsr: Option<f64>,
    pub ip: Option<f64>,
    pub ap: Option<f64>,
}

pub fn hsr_ip_ap(c: ConfusionCounts) -> InterventionRates {
    InterventionRates {
        hsr: ratio(c.tp + c.tn, c.total()),
        ip: ratio(c.tn, c.tn + c.fn_),
        ap: ratio(c.tp, c.tp + c.fp),
    }
}

pub fn relative_efficiency(human_steps: usize, actual_steps: usize) -> Result<f64, MetricsError> {
    if actual_steps == 0 {
        return Err(MetricsError::DivisionByZero("actual steps"));
    }
    Ok(human_steps as f64 / actual_steps as f64)
}

/// Number of training items for `n` items at `ratio`, rounding half up.
pub fn train_size(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 + 0.5).floor() as usize).min(n)
}

/// Splits whole items into `(train, test)` after a seeded shuffle; each part
/// keeps the original relative order.
pub fn split_dataset<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), MetricsError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(MetricsError::InvalidRatio(ratio));
    }
    if items.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; items.len()];
    for &i in &order[..train_size(items.len(), ratio)] {
        in_train[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (item, train_side) in items.iter().zip(in_train) {
        if train_side { &mut train } else { &mut test }.push(item.clone());
    }
    Ok((train, test))
}

/// Everything reported for one gated replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub gamma: f64,
    /// Raw policy predictions, no intervention.
    pub static_eval: AccuracyReport,
    /// Executed actions, with intervened steps replaced by ground truth.
    pub gated_eval: AccuracyReport,
    pub confusion: ConfusionCounts,
    pub rates: InterventionRates,
    pub interventions: usize,
    pub steps: usize,
}

pub fn evaluate_replay(records: &[Vec<ReplayRecord>], gamma: f64) -> Result<MetricsReport, MetricsError> {
    let to_eval = |pick: fn(&ReplayRecord) -> &Action| -> Vec<Vec<EvalStep>> {
        records
            .iter()
            .map(|t| {
                t.iter().map(|r| EvalStep { pred: pick(r).clone(), gt: r.gt_action.clone(), dims: r.dims }).collect()
            })
            .collect()
    };
    let static_eval = eval_dataset(&to_eval(|r| &r.pred_action))?;
    let gated_eval = eval_dataset(&to_eval(|r| &r.executed))?;
    let mut confusion = ConfusionCounts::default();
    let mut interventions = 0;
    for r in records.iter().flatten() {
        confusion.add(classify_intervention(r.pred_score, r.gt_score, gamma));
        interventions += usize::from(r.verdict == Verdict::Interactive);
    }
    Ok(MetricsReport {
        gamma,
        static_eval,
        gated_eval,
        rates: hsr_ip_ap(confusion),
        confusion,
        interventions,
        steps: confusion.total(),
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

impl fmt::Display for AccuracyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let col = |c: Column| self.columns.get(&c).copied().unwrap_or_default();
        writeln!(
            f,
            "{:>8} {:>8} {:>8} {:>10} {:>8} {:>10} {:>8} {:>10} {:>8} {:>8}",
            "SCROLL",
            "PRESS",
            "STOP",
            "CLICK.Type",
            "CLICK.SR",
            "TYPE.Type",
            "TYPE.SR",
            "Total.Type",
            "Total.SR",
            "TSR"
        )?;
        write!(
            f,
            "{:>8} {:>8} {:>8} {:>10} {:>8} {:>10} {:>8} {:>10} {:>8} {:>8}",
            pct(col(Column::Scroll).sr()),
            pct(col(Column::Press).sr()),
            pct(col(Column::Stop).sr()),
            pct(col(Column::Click).type_rate()),
            pct(col(Column::Click).sr()),
            pct(col(Column::Type).type_rate()),
            pct(col(Column::Type).sr()),
            pct(self.total.type_rate()),
            pct(self.total.sr()),
            pct(Some(self.tsr())),
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gamma = {}  steps = {}  interventions = {}", self.gamma, self.steps, self.interventions)?;
        writeln!(f, "\nstatic (no intervention)\n{}", self.static_eval)?;
        writeln!(f, "\ngated (interventions replaced by ground truth)\n{}", self.gated_eval)?;
        let c = &self.confusion;
        writeln!(f, "\nTP {}  FP {}  TN {}  FN {}", c.tp, c.fp, c.tn, c.fn_)?;
        write!(f, "HSR {}  IP {}  AP {}", pct(self.rates.hsr), pct(self.rates.ip), pct(self.rates.ap))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn dims() -> ScreenDims {
        ScreenDims::new(1000, 2000).unwrap()
    }

    fn step(pred: Action, gt: Action) -> EvalStep {
        EvalStep { pred, gt, dims: dims() }
    }

    #[test]
    fn two_trajectory_example() {
        let good = || step(Action::click(10, 10), Action::click(12, 12));
        let bad = step(Action::click(900, 900), Action::click(10, 10));
        let r = eval_dataset(&[vec![good(), good(), good()], vec![good(), bad, good()]]).unwrap();
        assert_eq!(r.sr(), 5.0 / 6.0);
        assert_eq!(r.tsr(), 0.5);
        assert_eq!(r.type_rate(), 1.0);
    }

    #[test]
    fn type_only_and_perfect() {
        let r = eval_dataset(&[vec![step(Action::typed("a"), Action::typed("b"))]]).unwrap();
        assert_eq!((r.type_rate(), r.sr(), r.tsr()), (1.0, 0.0, 0.0));
        let r = eval_dataset(&[vec![step(Action::Complete, Action::Complete)]]).unwrap();
        assert_eq!((r.type_rate(), r.sr(), r.tsr()), (1.0, 1.0, 1.0));
        assert_eq!(r.columns[&Column::Stop].steps, 1);
        assert_eq!(eval_dataset(&[]), Err(MetricsError::EmptyDataset));
        assert_eq!(eval_dataset(&[vec![]]), Err(MetricsError::EmptyDataset));
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(classify_intervention(5, 5, 4.0), Confusion::Tp);
        assert_eq!(classify_intervention(5, 2, 4.0), Confusion::Fp);
        assert_eq!(classify_intervention(2, 5, 4.0), Confusion::Fn);
        assert_eq!(classify_intervention(2, 3, 4.0), Confusion::Tn);
        assert_eq!(classify_intervention(4, 4, 4.0), Confusion::Tp);
    }

    #[test]
    fn rate_examples() {
        let r = hsr_ip_ap(ConfusionCounts { tp: 3, tn: 2, fp: 1, fn_: 0 });
        assert_eq!((r.hsr, r.ip, r.ap), (Some(5.0 / 6.0), Some(1.0), Some(0.75)));
        assert_eq!(hsr_ip_ap(ConfusionCounts::default()), InterventionRates::default());
        let r = hsr_ip_ap(ConfusionCounts { tn: 10, ..Default::default() });
        assert_eq!((r.hsr, r.ip, r.ap), (Some(1.0), Some(1.0), None));
    }

    #[test]
    fn relative_efficiency_rows() {
        for (actual, expected) in [(302, 75.83), (397, 57.68), (359, 63.79), (245, 93.47), (265, 86.42)] {
            let re = 100.0 * relative_efficiency(229, actual).unwrap();
            assert!((re - expected).abs() <= 0.01, "{actual}: {re}");
        }
        assert!(relative_efficiency(1, 0).is_err());
    }

    #[test]
    fn split_examples() {
        let items: Vec<u32> = (0..10).collect();
        let (train, test) = split_dataset(&items, 0.8, 3).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert_eq!(split_dataset(&items, 0.8, 3).unwrap(), (train, test));
        let (train, test) = split_dataset(&[1, 2, 3], 0.5, 0).unwrap();
        assert_eq!((train.len(), test.len()), (2, 1));
        assert!(split_dataset(&items, 1.0, 0).is_err());
        assert!(split_dataset::<u32>(&[], 0.5, 0).is_err());
    }

    #[test]
    fn report_text_has_table_columns() {
        let r = eval_dataset(&[vec![step(Action::click(1, 1), Action::click(1, 1))]]).unwrap();
        let text = r.to_string();
        assert!(text.starts_with("  SCROLL    PRESS     STOP"));
        assert!(text.lines().nth(1).unwrap().trim_end().ends_with("100.00"));
    }

    #[test]
    fn tsr_can_exceed_sr_with_unequal_lengths() {
        let ok = step(Action::Complete, Action::Complete);
        let wrong = || step(Action::PressBack, Action::Complete);
        let r = eval_dataset(&[vec![ok], (0..5).map(|_| wrong()).collect()]).unwrap();
        assert_eq!((r.tsr(), r.sr()), (0.5, 1.0 / 6.0));
    }

    fn arb_step() -> impl Strategy<Value = EvalStep> {
        let action = prop_oneof![
            (0u32..1000, 0u32..2000).prop_map(|(x, y)| Action::click(x, y)),
            Just(Action::typed("a")),
            Just(Action::typed("A ")),
            Just(Action::PressBack),
            Just(Action::Complete),
        ];
        (action.clone(), action).prop_map(|(pred, gt)| step(pred, gt))
    }

    proptest! {
        #[test]
        fn tsr_le_sr_le_type(
            data in (1usize..6).prop_flat_map(|len| prop::collection::vec(prop::collection::vec(arb_step(), len), 1..8)),
        ) {
            let r = eval_dataset(&data).unwrap();
            prop_assert!(r.tsr() <= r.sr() + 1e-12);
            prop_assert!(r.sr() <= r.type_rate() + 1e-12);
        }

        #[test]
        fn confusion_partitions(scores in prop::collection::vec((1u8..=5, 1u8..=5), 0..50), gamma in 0.0f64..6.0) {
            let mut c = ConfusionCounts::default();
            for &(p, g) in &scores {
                c.add(classify_intervention(p, g, gamma));
            }
            prop_assert_eq!(c.total(), scores.len());
            let r = hsr_ip_ap(c);
            for v in [r.hsr, r.ip, r.ap].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if let Some(h) = r.hsr {
                prop_assert_eq!(h == 1.0, c.fp == 0 && c.fn_ == 0);
            }
        }

        #[test]
        fn split_partitions(n in 1usize..60, ratio in 0.01f64..0.99, seed in any::<u64>()) {
            let items: Vec<usize> = (0..n).collect();
            let (train, test) = split_dataset(&items, ratio, seed).unwrap();
            prop_assert_eq!(train.len(), train_size(n, ratio));
            let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
            all.sort();
            prop_assert_eq!(all, items);
            prop_assert!(train.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(test.windows(2).all(|w| w[0] < w[1]));
        }
    }
}

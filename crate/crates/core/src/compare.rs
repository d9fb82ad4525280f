//! Trains one model per head kind under identical seeds and data order.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::heads::HeadKind;
use crate::par::{map_range, ExecMode};
use crate::train::{train_on, TrainConfig, TrainOutcome};

pub const COMPARE_HEADER: &str = "head,top1,gap";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub head: HeadKind,
    /// Final-epoch test accuracy.
    pub top1: f64,
    /// `top1 - top1(Learned)`; negative means worse than the learned head.
    pub gap: f64,
}

pub struct Comparison {
    pub rows: Vec<CompareRow>,
    pub runs: Vec<TrainOutcome>,
}

/// Trains `base` once per head. Runs are independent, so with
/// `ExecMode::Parallel` they run concurrently; results do not depend on it.
/// `Learned` is trained as the reference even when not listed.
pub fn compare_heads(base: &TrainConfig, heads: &[HeadKind], train_set: &Dataset, test_set: &Dataset) -> Result<Comparison> {
    if heads.is_empty() {
        return Err(Error::Config("no heads to compare".into()));
    }
    let mut kinds = heads.to_vec();
    if !kinds.contains(&HeadKind::Learned) {
        kinds.insert(0, HeadKind::Learned);
    }
    let outer = if kinds.len() > 1 { base.exec } else { ExecMode::Sequential };
    let outcomes = map_range(outer, kinds.len(), |i| {
        let cfg = TrainConfig {
            head: kinds[i],
            ..base.clone()
        };
        train_on(&cfg, train_set, test_set, None)
    });
    let runs = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let top1 = |r: &TrainOutcome| r.metrics.last().map_or(0.0, |m| m.test_acc);
    let reference = kinds
        .iter()
        .position(|&k| k == HeadKind::Learned)
        .map(|i| top1(&runs[i]))
        .expect("learned run present");
    let rows = kinds
        .iter()
        .zip(&runs)
        .filter(|(k, _)| heads.contains(k))
        .map(|(&head, r)| CompareRow {
            head,
            top1: top1(r),
            gap: top1(r) - reference,
        })
        .collect();
    Ok(Comparison { rows, runs })
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = format!("{COMPARE_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.head, r.top1, r.gap);
    }
    s
}

pub fn write_compare_csv(path: impl AsRef<Path>, rows: &[CompareRow]) -> Result<()> {
    write_atomic(path.as_ref(), compare_csv(rows).as_bytes())
}

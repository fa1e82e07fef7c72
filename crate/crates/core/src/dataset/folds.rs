use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::frame::LabeledFrame;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub test_floor: String,
    pub train_floors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// Leave-one-floor-out folds, floors in sorted order.
pub fn make_folds(frames: &[LabeledFrame]) -> Result<FoldPlan> {
    let floors: BTreeSet<&str> = frames.iter().map(|f| f.floor.as_str()).collect();
    if floors.len() < 2 {
        return Err(Error::Corpus(format!(
            "cross-validation needs at least 2 floors, found {}",
            floors.len()
        )));
    }
    let folds = floors
        .iter()
        .map(|&test| Fold {
            test_floor: test.to_string(),
            train_floors: floors.iter().filter(|&&f| f != test).map(|f| f.to_string()).collect(),
        })
        .collect();
    Ok(FoldPlan { folds })
}

impl Fold {
    pub fn split<'a>(&self, frames: &'a [LabeledFrame]) -> (Vec<&'a LabeledFrame>, Vec<&'a LabeledFrame>) {
        let train = frames.iter().filter(|f| self.train_floors.contains(&f.floor)).collect();
        let test = frames.iter().filter(|f| f.floor == self.test_floor).collect();
        (train, test)
    }
}

/// Deterministic validation subset: every `stride`-th training frame
/// (at least one), the rest stay in training. Needs two or more frames.
pub fn validation_split<'a>(train: &[&'a LabeledFrame], stride: usize) -> (Vec<&'a LabeledFrame>, Vec<&'a LabeledFrame>) {
    if train.len() < 2 {
        return (train.to_vec(), Vec::new());
    }
    let stride = stride.max(2);
    let mut fit = Vec::new();
    let mut val = Vec::new();
    for (i, f) in train.iter().enumerate() {
        if i % stride == stride - 1 {
            val.push(*f);
        } else {
            fit.push(*f);
        }
    }
    if val.is_empty() {
        val.push(fit.pop().expect("two or more frames"));
    }
    (fit, val)
}

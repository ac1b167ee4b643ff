use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{FoldTag, SynergySample};

pub const SPLIT_FOLDS: usize = 5;
pub const SPLIT_FORMAT_VERSION: u32 = 1;
const TEST_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Random,
    CLine,
    DrugComb,
    DrugSingle,
    DrugDouble,
}

impl SplitMode {
    pub const ALL: [SplitMode; 5] = [
        SplitMode::Random,
        SplitMode::CLine,
        SplitMode::DrugComb,
        SplitMode::DrugSingle,
        SplitMode::DrugDouble,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitMode::Random => "random",
            SplitMode::CLine => "cline",
            SplitMode::DrugComb => "drugcomb",
            SplitMode::DrugSingle => "drugsingle",
            SplitMode::DrugDouble => "drugdouble",
        }
    }

    fn is_drug_holdout(self) -> bool {
        matches!(self, SplitMode::DrugSingle | SplitMode::DrugDouble)
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SplitMode::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown split mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Sample indices for the held-out test set and the cross-validation folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub version: u32,
    pub mode: SplitMode,
    pub seed: u64,
    #[serde(default)]
    pub data_digest: String,
    /// Strata are carved per mode for the test set too.
    pub stratified_test: bool,
    pub test: Vec<usize>,
    pub folds: Vec<Fold>,
    /// Samples used nowhere (mixed pairs in the drug hold-out modes).
    pub discarded: Vec<usize>,
}

impl SplitPlan {
    /// Copies of the fold's samples tagged by role.
    pub fn tagged(
        &self,
        samples: &[SynergySample],
        fold: usize,
    ) -> (Vec<SynergySample>, Vec<SynergySample>, Vec<SynergySample>) {
        let take = |idx: &[usize], tag| idx.iter().map(|&i| samples[i].tagged(tag)).collect();
        let f = &self.folds[fold];
        (
            take(&f.train, FoldTag::Train),
            take(&f.validation, FoldTag::Validation),
            take(&self.test, FoldTag::Test),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SplitPlan> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: SplitPlan = serde_json::from_str(&body)?;
        if plan.version != SPLIT_FORMAT_VERSION {
            return Err(Error::Integrity(format!(
                "split format version {} (expected {SPLIT_FORMAT_VERSION})",
                plan.version
            )));
        }
        Ok(plan)
    }
}

fn stratum_key(mode: SplitMode, s: &SynergySample) -> (usize, usize) {
    match mode {
        SplitMode::CLine => (s.cell, 0),
        SplitMode::DrugComb => s.drug_pair(),
        _ => unreachable!("stratum keys only for cell line and pair modes"),
    }
}

/// Role of a sample under a drug hold-out: `Some(true)` held out,
/// `Some(false)` retained, `None` discarded.
fn drug_role(mode: SplitMode, s: &SynergySample, drugs: &HashSet<usize>) -> Option<bool> {
    let n = drugs.contains(&s.drug_a) as usize + drugs.contains(&s.drug_b) as usize;
    match mode {
        SplitMode::DrugSingle => Some(n >= 1),
        SplitMode::DrugDouble => match n {
            0 => Some(false),
            2 => Some(true),
            _ => None,
        },
        _ => unreachable!(),
    }
}

/// Builds a deterministic split.
///
/// The test set is carved first using the mode's own strata, taking
/// shuffled strata while the test set stays within 10% of the samples and at
/// least five strata remain for cross-validation. The remainder is divided
/// into five folds: single samples for `Random`, whole cell lines for
/// `CLine`, whole unordered drug pairs for `DrugComb`, and a partition of
/// the remaining drugs for `DrugSingle`/`DrugDouble`.
pub fn make_split(samples: &[SynergySample], mode: SplitMode, seed: u64) -> Result<SplitPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples.len();
    let budget = (TEST_FRACTION * n as f64).floor() as usize;

    let (mut test, mut discarded, folds) = if mode == SplitMode::Random {
        if n < SPLIT_FOLDS {
            return Err(Error::Config(format!("{n} samples cannot fill {SPLIT_FOLDS} folds")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let test = idx[..budget].to_vec();
        let rest = idx[budget..].to_vec();
        let k = rest.len();
        let folds = (0..SPLIT_FOLDS)
            .map(|f| {
                let (lo, hi) = (f * k / SPLIT_FOLDS, (f + 1) * k / SPLIT_FOLDS);
                let mut validation = rest[lo..hi].to_vec();
                let mut train: Vec<usize> = rest[..lo].iter().chain(&rest[hi..]).copied().collect();
                validation.sort_unstable();
                train.sort_unstable();
                Fold { train, validation }
            })
            .collect();
        (test, Vec::new(), folds)
    } else if mode.is_drug_holdout() {
        let drugs: BTreeSet<usize> = samples.iter().flat_map(|s| [s.drug_a, s.drug_b]).collect();
        check_strata(mode, drugs.len(), "drugs")?;
        let mut order: Vec<usize> = drugs.into_iter().collect();
        order.shuffle(&mut rng);

        let mut test_drugs = HashSet::new();
        let mut remaining = order.len();
        for &d in &order {
            if remaining <= SPLIT_FOLDS {
                break;
            }
            test_drugs.insert(d);
            let size = samples
                .iter()
                .filter(|s| drug_role(mode, s, &test_drugs) == Some(true))
                .count();
            if size > budget {
                test_drugs.remove(&d);
            } else {
                remaining -= 1;
            }
        }
        let mut test = Vec::new();
        let mut rest = Vec::new();
        let mut discarded = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            match drug_role(mode, s, &test_drugs) {
                Some(true) => test.push(i),
                Some(false) => rest.push(i),
                None => discarded.push(i),
            }
        }
        let pool: Vec<usize> = order.into_iter().filter(|d| !test_drugs.contains(d)).collect();
        let mut folds = Vec::with_capacity(SPLIT_FOLDS);
        for f in 0..SPLIT_FOLDS {
            let held: HashSet<usize> = pool.iter().skip(f).step_by(SPLIT_FOLDS).copied().collect();
            let mut fold = Fold {
                train: Vec::new(),
                validation: Vec::new(),
            };
            for &i in &rest {
                match drug_role(mode, &samples[i], &held) {
                    Some(true) => fold.validation.push(i),
                    Some(false) => fold.train.push(i),
                    None => {}
                }
            }
            folds.push(fold);
        }
        (test, discarded, folds)
    } else {
        let mut strata: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            strata.entry(stratum_key(mode, s)).or_default().push(i);
        }
        let what = if mode == SplitMode::CLine {
            "cell lines"
        } else {
            "drug pairs"
        };
        check_strata(mode, strata.len(), what)?;
        let mut groups: Vec<Vec<usize>> = strata.into_values().collect();
        groups.shuffle(&mut rng);

        let mut test = Vec::new();
        let mut kept = Vec::new();
        let mut remaining = groups.len();
        for g in groups {
            if remaining > SPLIT_FOLDS && test.len() + g.len() <= budget {
                test.extend_from_slice(&g);
                remaining -= 1;
            } else {
                kept.push(g);
            }
        }
        let mut sizes = [0usize; SPLIT_FOLDS];
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); SPLIT_FOLDS];
        for g in &kept {
            let f = (0..SPLIT_FOLDS).min_by_key(|&f| (sizes[f], f)).unwrap();
            sizes[f] += g.len();
            members[f].extend_from_slice(g);
        }
        let folds = (0..SPLIT_FOLDS)
            .map(|f| {
                let mut validation = members[f].clone();
                let mut train: Vec<usize> = (0..SPLIT_FOLDS)
                    .filter(|&o| o != f)
                    .flat_map(|o| members[o].clone())
                    .collect();
                validation.sort_unstable();
                train.sort_unstable();
                Fold { train, validation }
            })
            .collect();
        (test, Vec::new(), folds)
    };
    for (f, fold) in folds.iter().enumerate() {
        if fold.validation.is_empty() || fold.train.is_empty() {
            return Err(Error::Config(format!(
                "{mode} split leaves fold {f} with an empty {} set; try a different split mode or seed",
                if fold.validation.is_empty() {
                    "validation"
                } else {
                    "training"
                }
            )));
        }
    }
    test.sort_unstable();
    discarded.sort_unstable();
    Ok(SplitPlan {
        version: SPLIT_FORMAT_VERSION,
        mode,
        seed,
        data_digest: String::new(),
        stratified_test: true,
        test,
        folds,
        discarded,
    })
}

fn check_strata(mode: SplitMode, count: usize, what: &str) -> Result<()> {
    if count < SPLIT_FOLDS {
        return Err(Error::Config(format!(
            "{mode} split needs at least {SPLIT_FOLDS} distinct {what}, found {count}"
        )));
    }
    Ok(())
}

use std::collections::BTreeMap;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datasets::{Dataset, SplitPlan};
use crate::error::{Error, Result};

use super::{cross_validate, TrainConfig};

/// Field name → candidate values.
pub type Grid = BTreeMap<String, Vec<Value>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config: TrainConfig,
    pub fold_aurocs: Vec<f64>,
    pub mean_auroc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub best: usize,
}

impl GridResult {
    pub fn best_config(&self) -> &TrainConfig {
        &self.rows[self.best].config
    }
}

/// Every grid point applied over `base`, in lexicographic field order with
/// the last field varying fastest.
pub fn expand_grid(base: &TrainConfig, grid: &Grid) -> Result<Vec<TrainConfig>> {
    if grid.is_empty() || grid.values().any(Vec::is_empty) {
        return Err(Error::Config("grid is empty".into()));
    }
    let base = serde_json::to_value(base)?;
    let Value::Object(base) = base else { unreachable!() };
    let fields: Vec<(&String, &Vec<Value>)> = grid.iter().collect();
    for (name, _) in &fields {
        if !base.contains_key(*name) {
            return Err(Error::Config(format!("unknown grid field `{name}`")));
        }
    }
    let total: usize = fields.iter().map(|(_, v)| v.len()).product();
    let mut out = Vec::with_capacity(total);
    for mut k in 0..total {
        let mut point = base.clone();
        for (name, values) in fields.iter().rev() {
            point.insert((*name).clone(), values[k % values.len()].clone());
            k /= values.len();
        }
        let config: TrainConfig = serde_json::from_value(Value::Object(point.clone())).map_err(|e| {
            let bad = fields
                .iter()
                .find(|(name, _)| {
                    let mut probe = base.clone();
                    probe.insert((*name).clone(), point[name.as_str()].clone());
                    serde_json::from_value::<TrainConfig>(Value::Object(probe)).is_err()
                })
                .map_or("?", |(name, _)| name.as_str());
            Error::Config(format!("invalid value for grid field `{bad}`: {e}"))
        })?;
        config
            .validate()
            .map_err(|e| Error::Config(format!("grid point {}: {e}", out.len())))?;
        out.push(config);
    }
    Ok(out)
}

/// Cross-validates every grid point and picks the highest mean validation
/// AUROC (first wins ties). Point `i` runs with seed `seed ^ i`, and its row
/// echoes that seed so the config replays as is.
pub fn grid_search(
    data: &Dataset,
    plan: &SplitPlan,
    base: &TrainConfig,
    grid: &Grid,
    jobs: usize,
) -> Result<GridResult> {
    let configs = expand_grid(base, grid)?;
    let mut rows = Vec::with_capacity(configs.len());
    for (i, mut config) in configs.into_iter().enumerate() {
        config.seed ^= i as u64;
        let cv = cross_validate(data, plan, &config, jobs)?;
        let row = GridRow {
            fold_aurocs: cv.validation_aurocs(),
            mean_auroc: cv.mean_validation_auroc(),
            config,
        };
        info!("grid point {i}: mean validation auroc {:.4}", row.mean_auroc);
        rows.push(row);
    }
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.mean_auroc > rows[best].mean_auroc {
            best = i;
        }
    }
    Ok(GridResult { rows, best })
}

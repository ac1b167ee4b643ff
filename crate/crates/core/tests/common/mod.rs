//! Independent reference implementations and fixtures shared by the
//! integration suites. Everything here is written with explicit loops and
//! never calls the library's own forward code.
#![allow(dead_code)]

use std::collections::BTreeSet;

use hypersyn::datasets::SynergySample;
use hypersyn::hypernet::ResidualMode;
use hypersyn::tensor::{Activation, Binding, Matrix, ParamId, ParamStore, Tape, Var};
use hypersyn::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.ncols(), b.nrows());
    let mut out = Matrix::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[[i, k]] * b[[k, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

pub fn act(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Identity => x,
        Activation::Relu => x.max(0.0),
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Activation::Tanh => x.tanh(),
    }
}

/// `P_ij = sum_e H_ie H_je / (d_i * e_e)`, zero for zero degrees.
pub fn propagation_oracle(h: &Matrix) -> Matrix {
    let (n, m) = h.dim();
    let d: Vec<f64> = (0..n).map(|i| (0..m).map(|e| h[[i, e]]).sum()).collect();
    let e: Vec<f64> = (0..m).map(|k| (0..n).map(|i| h[[i, k]]).sum()).collect();
    let mut p = Matrix::zeros((n, n));
    for i in 0..n {
        if d[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..m {
                if e[k] > 0.0 {
                    s += h[[i, k]] * h[[j, k]] / e[k];
                }
            }
            p[[i, j]] = s / d[i];
        }
    }
    p
}

pub struct HgnnParams<'a> {
    pub w_conv: &'a Matrix,
    pub w_gate: &'a Matrix,
    pub b_gate: &'a Matrix,
    pub conv: Activation,
    pub mode: ResidualMode,
}

pub fn hgnn_oracle(x: &Matrix, p: &Matrix, params: &HgnnParams) -> Matrix {
    let px = naive_matmul(p, x);
    let c = naive_matmul(&px, params.w_conv).mapv(|v| act(params.conv, v));
    match params.mode {
        ResidualMode::NoResidual => c,
        ResidualMode::PlainResidual => x + &c,
        ResidualMode::GatedResidual => {
            let pre = naive_matmul(&c, params.w_gate);
            let mut out = x.clone();
            for i in 0..x.nrows() {
                for j in 0..x.ncols() {
                    let g = act(Activation::Sigmoid, pre[[i, j]] + params.b_gate[[0, j]]);
                    out[[i, j]] += g * x[[i, j]];
                }
            }
            out
        }
    }
}

pub struct GtnParams<'a> {
    pub w_self: &'a Matrix,
    pub w_message: &'a Matrix,
    pub w_query: Vec<&'a Matrix>,
    pub w_key: Vec<&'a Matrix>,
    pub head_dim: usize,
    pub act: Activation,
}

/// Attention weights of one head, computed pair by pair.
pub fn attention_oracle(a: &Matrix, adj: &Matrix, w_query: &Matrix, w_key: &Matrix, head_dim: usize) -> Matrix {
    let n = a.nrows();
    let q = naive_matmul(a, w_query);
    let k = naive_matmul(a, w_key);
    let mut alpha = Matrix::zeros((n, n));
    for i in 0..n {
        let neigh: Vec<usize> = (0..n).filter(|&j| adj[[i, j]] != 0.0).collect();
        if neigh.is_empty() {
            continue;
        }
        let logits: Vec<f64> = neigh
            .iter()
            .map(|&j| (0..head_dim).map(|t| q[[i, t]] * k[[j, t]]).sum::<f64>() / (head_dim as f64).sqrt())
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
        for (&j, l) in neigh.iter().zip(&logits) {
            alpha[[i, j]] = (l - top).exp() / z;
        }
    }
    alpha
}

pub fn gtn_oracle(a: &Matrix, adj: &Matrix, params: &GtnParams) -> Matrix {
    let n = a.nrows();
    let d = params.head_dim;
    let self_term = naive_matmul(a, params.w_self);
    let messages = naive_matmul(a, params.w_message);
    let mut out = self_term;
    for h in 0..params.w_query.len() {
        let alpha = attention_oracle(a, adj, params.w_query[h], params.w_key[h], d);
        for i in 0..n {
            for j in 0..n {
                if alpha[[i, j]] == 0.0 {
                    continue;
                }
                for t in 0..d {
                    out[[i, h * d + t]] += alpha[[i, j]] * messages[[j, h * d + t]];
                }
            }
        }
    }
    out.mapv(|v| act(params.act, v))
}

pub fn dense_oracle(x: &Matrix, layers: &[(&Matrix, &Matrix, Activation)]) -> Matrix {
    let mut h = x.clone();
    for (w, b, a) in layers {
        let mut z = naive_matmul(&h, w);
        for i in 0..z.nrows() {
            for j in 0..z.ncols() {
                z[[i, j]] = act(*a, z[[i, j]] + b[[0, j]]);
            }
        }
        h = z;
    }
    h
}

/// Fraction of positive/negative pairs ranked correctly, ties counting 1/2.
pub fn auroc_brute(scores: &[f64], labels: &[bool]) -> f64 {
    let mut good = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    good += 1.0;
                } else if scores[i] == scores[j] {
                    good += 0.5;
                }
            }
        }
    }
    good / pairs
}

/// Average precision by sweeping every distinct score as a threshold.
pub fn auprc_sweep(scores: &[f64], labels: &[bool]) -> f64 {
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l).count() as f64;
        let pp = scores.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * (tp / pp);
        prev_recall = recall;
    }
    ap
}

/// Scalar loss `sum(out ⊙ r)` used to probe gradients.
fn probe(tape: &mut Tape, out: Var, r: &Matrix) -> Result<Var> {
    let r = tape.constant(r.clone())?;
    let m = tape.mul(out, r)?;
    tape.sum(m)
}

/// Largest relative error, over the given parameter tensors, between
/// analytic gradients and central differences of `sum(forward ⊙ r)`.
pub fn fd_check(
    store: &mut ParamStore,
    ids: &[ParamId],
    r: &Matrix,
    forward: &dyn Fn(&mut Tape, &Binding) -> Result<Var>,
) -> f64 {
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape).unwrap();
    let out = forward(&mut tape, &bind).unwrap();
    let loss = probe(&mut tape, out, r).unwrap();
    let grads = tape.backward(loss).unwrap();

    let eval = |store: &ParamStore| {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let out = forward(&mut tape, &bind).unwrap();
        tape.value(out).iter().zip(r.iter()).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut worst = 0.0f64;
    for &id in ids {
        let analytic = grads.get_or_zeros(&tape, bind[id]);
        let mut numeric = Matrix::zeros(analytic.dim());
        for idx in 0..numeric.len() {
            let (i, j) = (idx / numeric.ncols(), idx % numeric.ncols());
            let orig = store.get(id).value()[[i, j]];
            store.get_mut(id).value_mut()[[i, j]] = orig + FD_STEP;
            let up = eval(store);
            store.get_mut(id).value_mut()[[i, j]] = orig - FD_STEP;
            let down = eval(store);
            store.get_mut(id).value_mut()[[i, j]] = orig;
            numeric[[i, j]] = (up - down) / (2.0 * FD_STEP);
        }
        let diff = (&analytic - &numeric).mapv(|v| v * v).sum().sqrt();
        let scale = analytic
            .mapv(|v| v * v)
            .sum()
            .sqrt()
            .max(numeric.mapv(|v| v * v).sum().sqrt());
        let rel = if scale < 1e-8 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}

/// Smallest |x| over a matrix; used to keep finite differences away from
/// ReLU kinks.
pub fn min_abs(m: &Matrix) -> f64 {
    m.iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()))
}

/// Random hypergraph incidence with mixed triplet (weight 1) and pair
/// (random weight) columns.
pub fn random_incidence<R: Rng>(rng: &mut R, max_nodes: usize, max_edges: usize) -> Matrix {
    let n = rng.gen_range(3..=max_nodes);
    let m = rng.gen_range(1..=max_edges);
    let mut h = Matrix::zeros((n, m));
    for e in 0..m {
        let triplet = rng.gen_bool(0.5);
        let size = if triplet { 3 } else { 2 };
        let w = if triplet { 1.0 } else { rng.gen_range(0.01..1.0) };
        let mut picked = BTreeSet::new();
        while picked.len() < size {
            picked.insert(rng.gen_range(0..n));
        }
        for i in picked {
            h[[i, e]] = w;
        }
    }
    h
}

/// `count` distinct unordered triples over the given entity counts.
pub fn fixture_samples<R: Rng>(rng: &mut R, drugs: usize, cells: usize, count: usize) -> Vec<SynergySample> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = rng.gen_range(0..drugs);
        let b = rng.gen_range(0..drugs);
        let c = rng.gen_range(0..cells);
        if a == b || !seen.insert((a.min(b), a.max(b), c)) {
            continue;
        }
        out.push(SynergySample::new(a, b, c, rng.gen_range(-20.0..60.0)));
    }
    out
}

/// Exhaustive scan of a split plan's disjointness and coverage contracts.
pub fn check_split(samples: &[SynergySample], plan: &hypersyn::datasets::SplitPlan) -> std::result::Result<(), String> {
    use hypersyn::datasets::SplitMode;
    use std::collections::HashSet;

    let n = samples.len();
    let set = |idx: &[usize], what: &str| -> std::result::Result<HashSet<usize>, String> {
        let s: HashSet<usize> = idx.iter().copied().collect();
        if s.len() != idx.len() {
            return Err(format!("{what} has duplicate indices"));
        }
        if let Some(i) = idx.iter().find(|&&i| i >= n) {
            return Err(format!("{what} index {i} out of range"));
        }
        Ok(s)
    };
    let cells = |s: &HashSet<usize>| s.iter().map(|&i| samples[i].cell).collect::<HashSet<_>>();
    let pairs = |s: &HashSet<usize>| s.iter().map(|&i| samples[i].drug_pair()).collect::<HashSet<_>>();
    let drugs = |s: &HashSet<usize>| {
        s.iter()
            .flat_map(|&i| [samples[i].drug_a, samples[i].drug_b])
            .collect::<HashSet<_>>()
    };

    if plan.folds.len() != 5 {
        return Err(format!("{} folds", plan.folds.len()));
    }
    let test = set(&plan.test, "test")?;
    let discarded = set(&plan.discarded, "discarded")?;
    if !test.is_disjoint(&discarded) {
        return Err("test overlaps discarded".into());
    }
    for (f, fold) in plan.folds.iter().enumerate() {
        let train = set(&fold.train, "train")?;
        let val = set(&fold.validation, "validation")?;
        if train.is_empty() || val.is_empty() {
            return Err(format!("fold {f} has an empty role"));
        }
        for (a, b, what) in [
            (&train, &val, "train/validation"),
            (&train, &test, "train/test"),
            (&val, &test, "validation/test"),
            (&train, &discarded, "train/discarded"),
            (&val, &discarded, "validation/discarded"),
        ] {
            if !a.is_disjoint(b) {
                return Err(format!("fold {f}: {what} overlap"));
            }
        }
        let used: HashSet<usize> = train.union(&val).chain(&test).chain(&discarded).copied().collect();
        let cv: HashSet<usize> = train.union(&val).copied().collect();
        match plan.mode {
            SplitMode::Random => {
                if used.len() != n {
                    return Err(format!("fold {f}: random split covers {} of {n}", used.len()));
                }
            }
            SplitMode::CLine => {
                if used.len() != n {
                    return Err(format!("fold {f}: coverage {} of {n}", used.len()));
                }
                if !cells(&train).is_disjoint(&cells(&val)) {
                    return Err(format!("fold {f}: cell line in train and validation"));
                }
                if !cells(&test).is_disjoint(&cells(&cv)) {
                    return Err(format!("fold {f}: test cell line seen in cross-validation"));
                }
            }
            SplitMode::DrugComb => {
                if used.len() != n {
                    return Err(format!("fold {f}: coverage {} of {n}", used.len()));
                }
                if !pairs(&train).is_disjoint(&pairs(&val)) {
                    return Err(format!("fold {f}: drug pair in train and validation"));
                }
                if !pairs(&test).is_disjoint(&pairs(&cv)) {
                    return Err(format!("fold {f}: test pair seen in cross-validation"));
                }
            }
            SplitMode::DrugSingle => {
                if used.len() != n {
                    return Err(format!("fold {f}: coverage {} of {n}", used.len()));
                }
                let seen = drugs(&train);
                for &i in &val {
                    let s = &samples[i];
                    if seen.contains(&s.drug_a) && seen.contains(&s.drug_b) {
                        return Err(format!("fold {f}: validation sample {i} has no unseen drug"));
                    }
                }
                let seen_cv = drugs(&cv);
                for &i in &test {
                    let s = &samples[i];
                    if seen_cv.contains(&s.drug_a) && seen_cv.contains(&s.drug_b) {
                        return Err(format!("test sample {i} has no unseen drug"));
                    }
                }
            }
            SplitMode::DrugDouble => {
                let seen = drugs(&train);
                for &i in &val {
                    let s = &samples[i];
                    if seen.contains(&s.drug_a) || seen.contains(&s.drug_b) {
                        return Err(format!("fold {f}: validation sample {i} has a training drug"));
                    }
                }
                let seen_cv = drugs(&cv);
                for &i in &test {
                    let s = &samples[i];
                    if seen_cv.contains(&s.drug_a) || seen_cv.contains(&s.drug_b) {
                        return Err(format!("test sample {i} has a cross-validation drug"));
                    }
                }
                // A sample left out of this fold cannot have both drugs on
                // the same side: it would belong to training or validation.
                let held = drugs(&val);
                for i in (0..n).filter(|i| !used.contains(i)) {
                    let s = &samples[i];
                    let both_seen = seen.contains(&s.drug_a) && seen.contains(&s.drug_b);
                    let both_held = held.contains(&s.drug_a) && held.contains(&s.drug_b);
                    if both_seen || both_held {
                        return Err(format!("fold {f}: sample {i} dropped without being mixed"));
                    }
                }
            }
        }
    }
    Ok(())
}

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::DataPaths;

/// Substructure carried by every motif drug; no other drug contains sulfur.
pub const MOTIF: &str = "S(=O)(=O)N";

const LINKERS: &[&str] = &[
    "C",
    "CC",
    "O",
    "N",
    "C(=O)",
    "C(C)",
    "c1ccc(cc1)",
    "C1CCC(CC1)",
    "c1ccc(nc1)",
];
const TERMINALS: &[&str] = &["F", "Cl", "O", "N", "C#N", "C(=O)O", "Br"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub drugs: usize,
    pub cells: usize,
    pub diseases: usize,
    pub samples: usize,
    pub noise: f64,
    pub genes: usize,
    pub disease_dim: usize,
    pub motif_fraction: f64,
    pub group_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            drugs: 40,
            cells: 15,
            diseases: 8,
            samples: 4000,
            noise: 0.05,
            genes: 24,
            disease_dim: 16,
            motif_fraction: 0.7,
            group_fraction: 2.0 / 3.0,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub smiles: Vec<(String, String)>,
    pub motif: Vec<bool>,
    pub cell_group: Vec<bool>,
    pub genes: Vec<String>,
    /// cells × genes, nonnegative raw values.
    pub expression: Vec<Vec<f64>>,
    pub disease_embeddings: Vec<Vec<f64>>,
    pub pairs: Vec<(usize, usize)>,
    /// (drug a, drug b, cell, score)
    pub synergy: Vec<(usize, usize, usize, f64)>,
    /// Planted-rule label before noise, per synergy row.
    pub clean_labels: Vec<bool>,
    pub flips: usize,
}

fn drug_id(i: usize) -> String {
    format!("D{i:03}")
}

fn cell_id(i: usize) -> String {
    format!("CL{i:03}")
}

fn disease_id(i: usize) -> String {
    format!("DIS{i:03}")
}

fn random_smiles<R: Rng>(rng: &mut R, motif: bool) -> String {
    let links = rng.gen_range(2..=4);
    let mut parts: Vec<&str> = (0..links).map(|_| *LINKERS.choose(rng).unwrap()).collect();
    if motif {
        let at = rng.gen_range(0..=parts.len());
        parts.insert(at, MOTIF);
    }
    parts.push(TERMINALS.choose(rng).unwrap());
    parts.concat()
}

/// Generates a dataset with a planted rule: a sample is synergistic iff both
/// drugs carry [`MOTIF`] and the cell line is in the designated group, with
/// a `noise` fraction of labels flipped.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthData> {
    let pairs_available = spec.drugs * spec.drugs.saturating_sub(1) / 2 * spec.cells;
    if spec.drugs < 2 || spec.cells == 0 || spec.samples > pairs_available {
        return Err(Error::Config(format!(
            "cannot draw {} distinct samples from {} drugs and {} cell lines",
            spec.samples, spec.drugs, spec.cells
        )));
    }
    if spec.genes == 0 || spec.disease_dim == 0 || !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::Config(
            "synthetic spec needs genes, disease_dim > 0 and noise in [0, 1]".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).unwrap();

    let n_motif = ((spec.drugs as f64 * spec.motif_fraction).round() as usize).clamp(1, spec.drugs);
    let mut motif: Vec<bool> = (0..spec.drugs).map(|i| i < n_motif).collect();
    motif.shuffle(&mut rng);
    let mut seen = BTreeSet::new();
    let mut smiles = Vec::with_capacity(spec.drugs);
    for (i, &m) in motif.iter().enumerate() {
        let s = loop {
            let s = random_smiles(&mut rng, m);
            if seen.insert(s.clone()) {
                break s;
            }
        };
        smiles.push((drug_id(i), s));
    }

    let n_group = ((spec.cells as f64 * spec.group_fraction).round() as usize).clamp(1, spec.cells);
    let mut cell_group: Vec<bool> = (0..spec.cells).map(|i| i < n_group).collect();
    cell_group.shuffle(&mut rng);
    let centers: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..spec.genes).map(|_| 3.0 + 1.5 * unit.sample(&mut rng)).collect())
        .collect();
    let genes: Vec<String> = (0..spec.genes).map(|g| format!("G{g:03}")).collect();
    let expression: Vec<Vec<f64>> = cell_group
        .iter()
        .map(|&g| {
            centers[g as usize]
                .iter()
                .map(|&c| {
                    let log = (c + 0.4 * unit.sample(&mut rng)).max(0.0);
                    log.exp2() - 1.0
                })
                .collect()
        })
        .collect();

    let disease_embeddings: Vec<Vec<f64>> = (0..spec.diseases)
        .map(|_| (0..spec.disease_dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let mut pairs = BTreeSet::new();
    for z in 0..spec.diseases {
        for _ in 0..rng.gen_range(1..=3) {
            pairs.insert((rng.gen_range(0..spec.drugs), z));
        }
    }
    let pairs: Vec<(usize, usize)> = pairs.into_iter().collect();

    let mut triples = BTreeSet::new();
    let mut synergy = Vec::with_capacity(spec.samples);
    let mut clean_labels = Vec::with_capacity(spec.samples);
    let mut flips = 0;
    while synergy.len() < spec.samples {
        let a = rng.gen_range(0..spec.drugs);
        let b = rng.gen_range(0..spec.drugs);
        let c = rng.gen_range(0..spec.cells);
        if a == b || !triples.insert((a.min(b), a.max(b), c)) {
            continue;
        }
        let clean = motif[a] && motif[b] && cell_group[c];
        let flip = rng.gen_bool(spec.noise);
        flips += flip as usize;
        let score = if clean != flip {
            rng.gen_range(35.0..80.0)
        } else {
            rng.gen_range(-40.0..25.0)
        };
        synergy.push((a, b, c, score));
        clean_labels.push(clean);
    }

    Ok(SynthData {
        spec: spec.clone(),
        smiles,
        motif,
        cell_group,
        genes,
        expression,
        disease_embeddings,
        pairs,
        synergy,
        clean_labels,
        flips,
    })
}

impl SynthData {
    /// Writes all five input files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<DataPaths> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = DataPaths {
            synergy: dir.join("synergy.csv"),
            smiles: dir.join("smiles.tsv"),
            expression: dir.join("expression.csv"),
            disease_embeddings: Some(dir.join("disease_embeddings.csv")),
            drug_disease: Some(dir.join("drug_disease.tsv")),
        };
        let put = |path: &Path, body: String| std::fs::write(path, body).map_err(|e| Error::io(path, e));

        let mut s = String::from("drug_a,drug_b,cell_line,score\n");
        for &(a, b, c, score) in &self.synergy {
            writeln!(s, "{},{},{},{score}", drug_id(a), drug_id(b), cell_id(c)).unwrap();
        }
        put(&paths.synergy, s)?;

        let mut s = String::new();
        for (id, smi) in &self.smiles {
            writeln!(s, "{id}\t{smi}").unwrap();
        }
        put(&paths.smiles, s)?;

        let mut s = format!("cell_line,{}\n", self.genes.join(","));
        for (c, row) in self.expression.iter().enumerate() {
            s.push_str(&cell_id(c));
            for v in row {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        put(&paths.expression, s)?;

        let dims: Vec<String> = (1..=self.spec.disease_dim).map(|k| format!("v{k}")).collect();
        let mut s = format!("disease_id,{}\n", dims.join(","));
        for (z, row) in self.disease_embeddings.iter().enumerate() {
            s.push_str(&disease_id(z));
            for v in row {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        put(paths.disease_embeddings.as_ref().unwrap(), s)?;

        let mut s = String::new();
        for &(d, z) in &self.pairs {
            writeln!(s, "{}\t{}", drug_id(d), disease_id(z)).unwrap();
        }
        put(paths.drug_disease.as_ref().unwrap(), s)?;
        Ok(paths)
    }
}

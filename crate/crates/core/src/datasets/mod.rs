//! Input tables, normalization, split plans and the synthetic fixture
//! generator.

mod io;
mod split;
mod synth;

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::entity::EntityIndex;
use crate::error::{Error, Result};
use crate::molgraph::{parse_smiles, MolecularGraph};
use crate::tensor::Matrix;

pub use io::{
    link_diseases, load_disease_embeddings, load_drug_disease, load_expression, load_smiles, load_synergy,
    DiseaseTable, ExpressionMatrix, SynergyTable,
};
pub use split::{make_split, Fold, SplitMode, SplitPlan, SPLIT_FOLDS, SPLIT_FORMAT_VERSION};
pub use synth::{synth_dataset, SynthData, SynthSpec, MOTIF};

/// Scores strictly above this are synergistic.
pub const SYNERGY_THRESHOLD: f64 = 30.0;

pub fn label_for(score: f64) -> bool {
    score > SYNERGY_THRESHOLD
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldTag {
    Train,
    Validation,
    Test,
}

/// One drug pair on one cell line. Entities are rows of the owning
/// [`Dataset`]'s indexes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynergySample {
    pub drug_a: usize,
    pub drug_b: usize,
    pub cell: usize,
    pub raw_score: f64,
    pub label: bool,
    pub fold_tag: Option<FoldTag>,
}

impl SynergySample {
    pub fn new(drug_a: usize, drug_b: usize, cell: usize, raw_score: f64) -> Self {
        SynergySample {
            drug_a,
            drug_b,
            cell,
            raw_score,
            label: label_for(raw_score),
            fold_tag: None,
        }
    }

    pub fn drug_pair(&self) -> (usize, usize) {
        (self.drug_a.min(self.drug_b), self.drug_a.max(self.drug_b))
    }

    pub fn tagged(&self, tag: FoldTag) -> Self {
        SynergySample {
            fold_tag: Some(tag),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPaths {
    pub synergy: PathBuf,
    pub smiles: PathBuf,
    pub expression: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disease_embeddings: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drug_disease: Option<PathBuf>,
}

impl DataPaths {
    /// The conventional file names inside `dir`. The disease files are
    /// included only when both exist.
    pub fn in_dir(dir: &Path) -> DataPaths {
        let (emb, pairs) = (dir.join("disease_embeddings.csv"), dir.join("drug_disease.tsv"));
        let both = emb.is_file() && pairs.is_file();
        DataPaths {
            synergy: dir.join("synergy.csv"),
            smiles: dir.join("smiles.tsv"),
            expression: dir.join("expression.csv"),
            disease_embeddings: both.then_some(emb),
            drug_disease: both.then_some(pairs),
        }
    }

    /// Paths relative to `base` are resolved against it.
    pub fn resolve(&self, base: &Path) -> DataPaths {
        let join = |p: &PathBuf| if p.is_relative() { base.join(p) } else { p.clone() };
        DataPaths {
            synergy: join(&self.synergy),
            smiles: join(&self.smiles),
            expression: join(&self.expression),
            disease_embeddings: self.disease_embeddings.as_ref().map(join),
            drug_disease: self.drug_disease.as_ref().map(join),
        }
    }

    pub fn files(&self) -> Vec<(&'static str, &Path)> {
        let mut files = vec![
            ("synergy", self.synergy.as_path()),
            ("smiles", self.smiles.as_path()),
            ("expression", self.expression.as_path()),
        ];
        if let Some(p) = &self.disease_embeddings {
            files.push(("disease_embeddings", p));
        }
        if let Some(p) = &self.drug_disease {
            files.push(("drug_disease", p));
        }
        files
    }
}

/// SHA-256 of a file, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    pub synergy_rows: usize,
    pub dropped_samples: usize,
    pub duplicate_samples: usize,
    pub dropped_pairs: usize,
    pub dropped_diseases: usize,
}

/// Everything the model consumes, aligned by entity row.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub drugs: EntityIndex,
    pub cells: EntityIndex,
    pub diseases: EntityIndex,
    pub molecules: Vec<MolecularGraph>,
    pub genes: Vec<String>,
    /// cells × genes, normalized.
    pub expression: Matrix,
    /// diseases × embedding dim.
    pub disease_embeddings: Matrix,
    pub drug_disease: Vec<(usize, usize)>,
    pub samples: Vec<SynergySample>,
    pub file_digests: Vec<(String, String)>,
    pub digest: String,
    pub stats: LoadStats,
}

impl Dataset {
    pub fn load(paths: &DataPaths) -> Result<Dataset> {
        let smiles = load_smiles(&paths.smiles)?;
        let expr = load_expression(&paths.expression, None)?;
        let table = load_synergy(
            &paths.synergy,
            |d| smiles.iter().any(|(id, _)| id == d),
            |c| expr.cells.contains(c),
        )?;

        let mut molecules = Vec::with_capacity(table.drugs.len());
        for id in table.drugs.ids() {
            let (_, s) = smiles.iter().find(|(d, _)| d == id).expect("filtered on load");
            let mol = parse_smiles(s).map_err(|e| Error::Data(format!("drug {id}: {e}")))?;
            molecules.push(mol);
        }
        let rows: Vec<usize> = table
            .cells
            .ids()
            .iter()
            .map(|c| expr.cells.get(c).expect("filtered on load"))
            .collect();
        let expression = expr.values.select(ndarray::Axis(0), &rows);

        let mut stats = LoadStats {
            synergy_rows: table.rows,
            dropped_samples: table.dropped,
            duplicate_samples: table.duplicates,
            ..LoadStats::default()
        };
        let diseases = match (&paths.disease_embeddings, &paths.drug_disease) {
            (Some(emb), Some(pairs)) => {
                let (ids, matrix) = load_disease_embeddings(emb)?;
                let pairs = load_drug_disease(pairs)?;
                link_diseases(&pairs, &table.drugs, &ids, &matrix)?
            }
            (None, None) => DiseaseTable::empty(),
            _ => {
                return Err(Error::Config(
                    "disease embeddings and drug-disease pairs must be given together".into(),
                ))
            }
        };
        stats.dropped_pairs = diseases.dropped_pairs;
        stats.dropped_diseases = diseases.dropped_diseases;

        let mut file_digests = Vec::new();
        let mut hasher = Sha256::new();
        for (name, path) in paths.files() {
            let d = file_digest(path)?;
            hasher.update(name.as_bytes());
            hasher.update(d.as_bytes());
            file_digests.push((name.to_string(), d));
        }

        let data = Dataset {
            drugs: table.drugs,
            cells: table.cells,
            diseases: diseases.diseases,
            molecules,
            genes: expr.genes,
            expression,
            disease_embeddings: diseases.embeddings,
            drug_disease: diseases.pairs,
            samples: table.samples,
            file_digests,
            digest: hex::encode(hasher.finalize()),
            stats,
        };
        info!(
            "loaded {} samples over {} drugs, {} cell lines, {} diseases",
            data.samples.len(),
            data.drugs.len(),
            data.cells.len(),
            data.diseases.len()
        );
        Ok(data)
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label).count()
    }

    /// Node ids in hypergraph order.
    pub fn node_ids(&self) -> Vec<String> {
        let tag = |p: &str, ids: &[String]| ids.iter().map(|i| format!("{p}:{i}")).collect::<Vec<_>>();
        let mut ids = tag("drug", self.drugs.ids());
        ids.extend(tag("cell", self.cells.ids()));
        ids.extend(tag("disease", self.diseases.ids()));
        ids
    }
}

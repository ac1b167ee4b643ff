use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::path::Path;

use log::warn;

use crate::entity::EntityIndex;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::SynergySample;

fn reader(path: &Path, delimiter: u8) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let tsv = delimiter == b'\t';
    Ok(csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(!tsv)
        .quoting(!tsv)
        .comment(tsv.then_some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn record_line(record: &csv::StringRecord) -> usize {
    record.position().map_or(0, |p| p.line() as usize)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::parse(path, line, format!("{kind:?}")),
    }
}

fn parse_f64(path: &Path, line: usize, field: &str, what: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::parse(path, line, format!("{what}: `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("{what}: `{field}` is not finite")));
    }
    Ok(v)
}

fn check_header(path: &Path, rdr: &mut csv::Reader<File>, expected: &[&str]) -> Result<csv::StringRecord> {
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let ok = expected.iter().enumerate().all(|(i, col)| header.get(i) == Some(col));
    if !ok {
        return Err(Error::Schema {
            path: path.into(),
            message: format!("expected header starting `{}`", expected.join(",")),
        });
    }
    Ok(header)
}

/// Two-column tab-separated file with no header. Blank lines and lines
/// starting with `#` are skipped.
fn load_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let mut rdr = reader(path, b'\t')?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = record_line(&rec);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != 2 || rec[1].is_empty() {
            return Err(Error::parse(
                path,
                line,
                format!("expected 2 tab-separated fields, got {}", rec.len()),
            ));
        }
        out.push((rec[0].to_string(), rec[1].to_string()));
    }
    Ok(out)
}

/// `drug_id<TAB>smiles`. Duplicate drug ids are an error.
pub fn load_smiles(path: &Path) -> Result<Vec<(String, String)>> {
    let rows = load_pairs(path)?;
    let mut seen = HashSet::new();
    for (id, _) in &rows {
        if !seen.insert(id.as_str()) {
            return Err(Error::Data(format!("drug `{id}` listed twice in {}", path.display())));
        }
    }
    Ok(rows)
}

/// `drug_id<TAB>disease_id`.
pub fn load_drug_disease(path: &Path) -> Result<Vec<(String, String)>> {
    load_pairs(path)
}

#[derive(Clone, Debug)]
pub struct SynergyTable {
    pub drugs: EntityIndex,
    pub cells: EntityIndex,
    pub samples: Vec<SynergySample>,
    /// Data rows read, including dropped ones.
    pub rows: usize,
    /// Rows naming a drug or cell line without features.
    pub dropped: usize,
    pub duplicates: usize,
}

/// Reads `drug_a,drug_b,cell_line,score`. Entities are interned in order of
/// first appearance among kept rows. A repeated triple (drug order ignored)
/// keeps its first occurrence.
pub fn load_synergy(
    path: &Path,
    has_drug: impl Fn(&str) -> bool,
    has_cell: impl Fn(&str) -> bool,
) -> Result<SynergyTable> {
    let mut rdr = reader(path, b',')?;
    check_header(path, &mut rdr, &["drug_a", "drug_b", "cell_line", "score"])?;
    let mut table = SynergyTable {
        drugs: EntityIndex::new(),
        cells: EntityIndex::new(),
        samples: Vec::new(),
        rows: 0,
        dropped: 0,
        duplicates: 0,
    };
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = record_line(&rec);
        if rec.len() != 4 {
            return Err(Error::parse(
                path,
                line,
                format!("expected 4 fields, got {}", rec.len()),
            ));
        }
        if rec.iter().take(3).any(str::is_empty) {
            return Err(Error::parse(path, line, "empty entity id"));
        }
        let score = parse_f64(path, line, &rec[3], "score")?;
        table.rows += 1;
        let (a, b, c) = (&rec[0], &rec[1], &rec[2]);
        if !has_drug(a) || !has_drug(b) || !has_cell(c) {
            table.dropped += 1;
            continue;
        }
        let key = if a <= b {
            (a.to_string(), b.to_string(), c.to_string())
        } else {
            (b.to_string(), a.to_string(), c.to_string())
        };
        if !seen.insert(key) {
            warn!(
                "{}:{line}: duplicate triple ({a}, {b}, {c}); keeping the first",
                path.display()
            );
            table.duplicates += 1;
            continue;
        }
        let (a, b, c) = (table.drugs.intern(a), table.drugs.intern(b), table.cells.intern(c));
        table.samples.push(SynergySample::new(a, b, c, score));
    }
    if table.dropped > 0 {
        warn!(
            "{}: dropped {} rows referencing drugs without SMILES or cell lines without expression",
            path.display(),
            table.dropped
        );
    }
    Ok(table)
}

#[derive(Clone, Debug)]
pub struct ExpressionMatrix {
    pub cells: EntityIndex,
    pub genes: Vec<String>,
    pub values: Matrix,
}

impl ExpressionMatrix {
    /// log2(x + 1) then per-gene z-score with population std; constant genes
    /// become zeros.
    pub fn normalize(cells: EntityIndex, genes: Vec<String>, raw: Matrix) -> Result<Self> {
        if let Some(&v) = raw.iter().find(|&&v| v < 0.0) {
            return Err(Error::Data(format!("negative expression value {v}")));
        }
        let mut values = raw.mapv(|x| (x + 1.0).log2());
        let n = values.nrows() as f64;
        for (j, mut col) in values.columns_mut().into_iter().enumerate() {
            let mean = col.sum() / n;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if std <= 1e-12 * mean.abs().max(1.0) {
                warn!("gene `{}` is constant across cell lines; zeroed", genes[j]);
                col.fill(0.0);
            } else {
                col.mapv_inplace(|x| (x - mean) / std);
            }
        }
        Ok(ExpressionMatrix { cells, genes, values })
    }

    /// Every column has mean 0 and population std 1 (or is all zero).
    pub fn is_normalized(&self, tol: f64) -> bool {
        let n = self.values.nrows() as f64;
        self.values.columns().into_iter().all(|col| {
            let mean = col.sum() / n;
            let std = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            mean.abs() <= tol && ((std - 1.0).abs() <= tol || col.iter().all(|&x| x == 0.0))
        })
    }
}

/// Reads `cell_line,<genes…>`, restricted to `gene_list` in its order when
/// given, then normalized.
pub fn load_expression(path: &Path, gene_list: Option<&[String]>) -> Result<ExpressionMatrix> {
    let mut rdr = reader(path, b',')?;
    let header = check_header(path, &mut rdr, &["cell_line"])?;
    let file_genes: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let columns: Vec<usize> = match gene_list {
        None => (0..file_genes.len()).collect(),
        Some(list) => list
            .iter()
            .map(|g| {
                file_genes.iter().position(|f| f == g).ok_or_else(|| Error::Schema {
                    path: path.into(),
                    message: format!("missing gene column `{g}`"),
                })
            })
            .collect::<Result<_>>()?,
    };
    if columns.is_empty() {
        return Err(Error::Schema {
            path: path.into(),
            message: "no gene columns".into(),
        });
    }
    let genes: Vec<String> = columns.iter().map(|&c| file_genes[c].clone()).collect();

    let mut cells = EntityIndex::new();
    let mut data = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = record_line(&rec);
        if rec.len() != file_genes.len() + 1 {
            return Err(Error::parse(
                path,
                line,
                format!("expected {} fields, got {}", file_genes.len() + 1, rec.len()),
            ));
        }
        if cells.contains(&rec[0]) {
            return Err(Error::parse(
                path,
                line,
                format!("cell line `{}` listed twice", &rec[0]),
            ));
        }
        cells.intern(&rec[0]);
        for &c in &columns {
            let v = parse_f64(path, line, &rec[c + 1], &file_genes[c])?;
            if v < 0.0 {
                return Err(Error::Data(format!(
                    "{}:{line}: negative expression {v} for gene `{}`",
                    path.display(),
                    file_genes[c]
                )));
            }
            data.push(v);
        }
    }
    if cells.is_empty() {
        return Err(Error::Data(format!("{}: no cell lines", path.display())));
    }
    let raw = Matrix::from_shape_vec((cells.len(), genes.len()), data).expect("row lengths checked");
    ExpressionMatrix::normalize(cells, genes, raw)
}

/// Reads `disease_id,v1,…,vk`.
pub fn load_disease_embeddings(path: &Path) -> Result<(EntityIndex, Matrix)> {
    let mut rdr = reader(path, b',')?;
    let header = check_header(path, &mut rdr, &["disease_id"])?;
    let dim = header.len() - 1;
    if dim == 0 {
        return Err(Error::Schema {
            path: path.into(),
            message: "no embedding columns".into(),
        });
    }
    let mut ids = EntityIndex::new();
    let mut data = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = record_line(&rec);
        if rec.len() != dim + 1 {
            return Err(Error::parse(
                path,
                line,
                format!("expected {} fields, got {}", dim + 1, rec.len()),
            ));
        }
        if ids.contains(&rec[0]) {
            return Err(Error::parse(path, line, format!("disease `{}` listed twice", &rec[0])));
        }
        ids.intern(&rec[0]);
        for f in rec.iter().skip(1) {
            data.push(parse_f64(path, line, f, "embedding")?);
        }
    }
    let m = Matrix::from_shape_vec((ids.len(), dim), data).expect("row lengths checked");
    Ok((ids, m))
}

#[derive(Clone, Debug)]
pub struct DiseaseTable {
    pub diseases: EntityIndex,
    pub embeddings: Matrix,
    /// (drug row, disease row), deduplicated.
    pub pairs: Vec<(usize, usize)>,
    pub dropped_pairs: usize,
    pub dropped_diseases: usize,
}

impl DiseaseTable {
    pub fn empty() -> Self {
        DiseaseTable {
            diseases: EntityIndex::new(),
            embeddings: Matrix::zeros((0, 1)),
            pairs: Vec::new(),
            dropped_pairs: 0,
            dropped_diseases: 0,
        }
    }
}

/// Keeps pairs whose drug is in `drugs`; keeps only diseases with a
/// surviving pair. A surviving pair naming a disease without an embedding is
/// a reference error.
pub fn link_diseases(
    pairs: &[(String, String)],
    drugs: &EntityIndex,
    embedding_ids: &EntityIndex,
    embeddings: &Matrix,
) -> Result<DiseaseTable> {
    let mut diseases = EntityIndex::new();
    let mut kept = BTreeSet::new();
    let mut dropped = 0;
    let mut order = Vec::new();
    for (drug, disease) in pairs {
        let Some(d) = drugs.get(drug) else {
            dropped += 1;
            continue;
        };
        if !embedding_ids.contains(disease) {
            return Err(Error::Reference {
                kind: "disease",
                id: disease.clone(),
            });
        }
        let z = diseases.intern(disease.as_str());
        if kept.insert((d, z)) {
            order.push((d, z));
        }
    }
    if dropped > 0 {
        warn!("dropped {dropped} drug-disease pairs naming drugs absent from the synergy data");
    }
    let rows: Vec<usize> = diseases.ids().iter().map(|z| embedding_ids.get(z).unwrap()).collect();
    let dim = embeddings.ncols().max(1);
    let embeddings = if rows.is_empty() {
        Matrix::zeros((0, dim))
    } else {
        embeddings.select(ndarray::Axis(0), &rows)
    };
    Ok(DiseaseTable {
        dropped_diseases: embedding_ids.len() - diseases.len(),
        diseases,
        embeddings,
        pairs: order,
        dropped_pairs: dropped,
    })
}

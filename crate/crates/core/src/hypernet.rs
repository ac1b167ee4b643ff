//! Dual-relationship hypergraph over drugs, cell lines and diseases, and the
//! degree-normalized hypergraph convolution with gated residual connections
//! used to refine the concatenated entity embeddings.
//!
//! Node order is always drugs, then cell lines, then diseases. Columns of
//! the incidence matrix are either synergy triplets (two drugs and a cell
//! line, weight 1) or drug-disease indications (weight `interaction_weight`).

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{FoldTag, SynergySample};
use crate::error::{Error, Result};
use crate::tensor::{glorot, Activation, Binding, Matrix, ParamId, ParamStore, Tape, Var};

/// Bias the gates start at, so each gated layer begins close to the identity.
pub const EBI_GATE_BIAS: f64 = -6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    SynergyTriplet,
    DrugDisease,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// `X + sigmoid(C W_gate + b_gate) ⊙ X`
    GatedResidual,
    /// `X + C`
    PlainResidual,
    /// `C`
    NoResidual,
}

/// Sizes of the three node blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeLayout {
    pub drugs: usize,
    pub cells: usize,
    pub diseases: usize,
}

impl NodeLayout {
    pub fn total(&self) -> usize {
        self.drugs + self.cells + self.diseases
    }

    pub fn drug(&self, i: usize) -> usize {
        i
    }

    pub fn cell(&self, i: usize) -> usize {
        self.drugs + i
    }

    pub fn disease(&self, i: usize) -> usize {
        self.drugs + self.cells + i
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypergraph {
    incidence: Matrix,
    edge_kinds: Vec<EdgeKind>,
    node_degree: Vec<f64>,
    edge_degree: Vec<f64>,
}

impl Hypergraph {
    /// Hypergraph from an explicit nonnegative incidence matrix.
    pub fn from_incidence(incidence: Matrix, edge_kinds: Vec<EdgeKind>) -> Result<Self> {
        if edge_kinds.len() != incidence.ncols() {
            return Err(Error::Dimension {
                op: "hypergraph",
                lhs: incidence.dim(),
                rhs: (edge_kinds.len(), 0),
            });
        }
        if incidence.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("incidence weights must be finite and nonnegative".into()));
        }
        let node_degree = incidence.rows().into_iter().map(|r| r.sum()).collect();
        let edge_degree = incidence.columns().into_iter().map(|c| c.sum()).collect();
        Ok(Hypergraph {
            incidence,
            edge_kinds,
            node_degree,
            edge_degree,
        })
    }

    /// One triplet column per positive training sample and one pair column
    /// per drug-disease indication.
    ///
    /// Negative samples are skipped. Any sample tagged for validation or
    /// test is rejected, which keeps held-out synergies out of the graph.
    pub fn build(
        layout: NodeLayout,
        samples: &[SynergySample],
        drug_disease: &[(usize, usize)],
        interaction_weight: f64,
    ) -> Result<Self> {
        if !(interaction_weight >= 0.0 && interaction_weight.is_finite()) {
            return Err(Error::Config(format!(
                "interaction weight must be nonnegative, got {interaction_weight}"
            )));
        }
        if let Some(s) = samples
            .iter()
            .find(|s| matches!(s.fold_tag, Some(FoldTag::Validation | FoldTag::Test)))
        {
            return Err(Error::Contract(format!(
                "held-out sample ({}, {}, {}) passed to hypergraph construction",
                s.drug_a, s.drug_b, s.cell
            )));
        }
        let check = |kind: &'static str, i: usize, n: usize| {
            if i < n {
                Ok(())
            } else {
                Err(Error::Reference {
                    kind,
                    id: format!("#{i}"),
                })
            }
        };
        let positives: Vec<_> = samples.iter().filter(|s| s.label).collect();
        for s in &positives {
            check("drug", s.drug_a, layout.drugs)?;
            check("drug", s.drug_b, layout.drugs)?;
            check("cell line", s.cell, layout.cells)?;
        }
        for &(d, z) in drug_disease {
            check("drug", d, layout.drugs)?;
            check("disease", z, layout.diseases)?;
        }

        let edges = positives.len() + drug_disease.len();
        let mut incidence = Matrix::zeros((layout.total(), edges));
        let mut kinds = Vec::with_capacity(edges);
        for (e, s) in positives.iter().enumerate() {
            incidence[[layout.drug(s.drug_a), e]] = 1.0;
            incidence[[layout.drug(s.drug_b), e]] = 1.0;
            incidence[[layout.cell(s.cell), e]] = 1.0;
            kinds.push(EdgeKind::SynergyTriplet);
        }
        for (k, &(d, z)) in drug_disease.iter().enumerate() {
            let e = positives.len() + k;
            incidence[[layout.drug(d), e]] = interaction_weight;
            incidence[[layout.disease(z), e]] = interaction_weight;
            kinds.push(EdgeKind::DrugDisease);
        }
        Hypergraph::from_incidence(incidence, kinds)
    }

    pub fn incidence(&self) -> &Matrix {
        &self.incidence
    }

    pub fn edge_kinds(&self) -> &[EdgeKind] {
        &self.edge_kinds
    }

    pub fn node_degree(&self) -> &[f64] {
        &self.node_degree
    }

    pub fn edge_degree(&self) -> &[f64] {
        &self.edge_degree
    }

    pub fn num_nodes(&self) -> usize {
        self.incidence.nrows()
    }

    pub fn num_edges(&self) -> usize {
        self.incidence.ncols()
    }

    /// Nodes with zero degree; they receive no messages.
    pub fn isolated_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&i| self.node_degree[i] == 0.0).collect()
    }

    /// `D^-1 H E^-1 H^T`, with zero-degree rows/columns contributing zeros.
    pub fn propagation_matrix(&self) -> Matrix {
        let inv = |d: f64| if d > 0.0 { 1.0 / d } else { 0.0 };
        let mut left = self.incidence.clone();
        for (mut row, &d) in left.rows_mut().into_iter().zip(&self.node_degree) {
            row *= inv(d);
        }
        for (mut col, &e) in left.columns_mut().into_iter().zip(&self.edge_degree) {
            col *= inv(e);
        }
        left.dot(&self.incidence.t())
    }

    /// Writes nonzero incidence entries as `node_id<TAB>edge_index<TAB>weight`.
    pub fn write_triplets<W: Write>(&self, mut out: W, node_ids: &[String]) -> std::io::Result<()> {
        assert_eq!(node_ids.len(), self.num_nodes(), "one id per node");
        for e in 0..self.num_edges() {
            for (n, id) in node_ids.iter().enumerate().take(self.num_nodes()) {
                let w = self.incidence[[n, e]];
                if w != 0.0 {
                    writeln!(out, "{id}\t{e}\t{w}")?;
                }
            }
        }
        Ok(())
    }
}

/// One refinement layer: convolution `C = act(P X W_conv)` combined with its
/// input according to the residual mode.
#[derive(Clone, Debug)]
pub struct HgnnLayer {
    pub w_conv: ParamId,
    pub w_gate: ParamId,
    pub b_gate: ParamId,
    pub conv_activation: Activation,
    pub mode: ResidualMode,
}

impl HgnnLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        mode: ResidualMode,
        gate_bias: f64,
        rng: &mut R,
    ) -> Self {
        HgnnLayer {
            w_conv: store.add(format!("{prefix}.w_conv"), glorot(dim, dim, rng)),
            w_gate: store.add(format!("{prefix}.w_gate"), glorot(dim, dim, rng)),
            b_gate: store.add(format!("{prefix}.b_gate"), Matrix::from_elem((1, dim), gate_bias)),
            conv_activation: Activation::Relu,
            mode,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var, propagation: Var) -> Result<Var> {
        let (n, dim) = tape.shape(x);
        let p = tape.shape(propagation);
        if p != (n, n) {
            return Err(Error::Dimension {
                op: "hgnn_layer",
                lhs: (n, dim),
                rhs: p,
            });
        }
        let mixed = tape.matmul(propagation, x)?;
        let conv = tape.matmul(mixed, bind[self.w_conv])?;
        let conv = tape.activate(conv, self.conv_activation)?;
        match self.mode {
            ResidualMode::NoResidual => Ok(conv),
            ResidualMode::PlainResidual => tape.add(x, conv),
            ResidualMode::GatedResidual => {
                let g = tape.matmul(conv, bind[self.w_gate])?;
                let g = tape.add(g, bind[self.b_gate])?;
                let g = tape.sigmoid(g)?;
                let gated = tape.mul(g, x)?;
                tape.add(x, gated)
            }
        }
    }
}

/// Applies the layers in order.
pub fn refine(tape: &mut Tape, bind: &Binding, x0: Var, propagation: Var, layers: &[HgnnLayer]) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Config("refinement needs at least one layer".into()));
    }
    layers
        .iter()
        .try_fold(x0, |x, layer| layer.forward(tape, bind, x, propagation))
}

/// Mean Euclidean distance over all unordered row pairs.
pub fn mean_pairwise_distance(x: &Matrix) -> f64 {
    let n = x.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = &x.row(i) - &x.row(j);
            total += d.dot(&d).sqrt();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

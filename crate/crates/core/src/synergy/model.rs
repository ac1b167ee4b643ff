use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, SynergySample};
use crate::encoders::{AtomGraph, DrugEncoder, Mlp};
use crate::error::{Error, Result};
use crate::hypernet::{refine, HgnnLayer, NodeLayout};
use crate::molgraph::ATOM_FEATURES;
use crate::tensor::{Activation, Binding, Matrix, ParamStore, Tape, Var};

use super::TrainConfig;

/// Input widths and node counts a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub atom_features: usize,
    pub genes: usize,
    pub disease_dim: usize,
    pub layout: NodeLayout,
}

/// Raw per-entity features in node order.
#[derive(Clone, Debug)]
pub struct ModelInputs {
    pub atoms: Vec<AtomGraph>,
    pub expression: Matrix,
    pub diseases: Matrix,
}

impl ModelInputs {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let atoms = data
            .molecules
            .iter()
            .map(AtomGraph::from_molecule)
            .collect::<Result<_>>()?;
        Ok(ModelInputs {
            atoms,
            expression: data.expression.clone(),
            diseases: data.disease_embeddings.clone(),
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            atom_features: self.atoms.first().map_or(ATOM_FEATURES, |a| a.features.ncols()),
            genes: self.expression.ncols(),
            disease_dim: self.diseases.ncols(),
            layout: NodeLayout {
                drugs: self.atoms.len(),
                cells: self.expression.nrows(),
                diseases: self.diseases.nrows(),
            },
        }
    }
}

/// Encoders, refinement stack and prediction head over one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub store: ParamStore,
    pub drug_encoder: DrugEncoder,
    pub cell_encoder: Mlp,
    pub disease_encoder: Mlp,
    pub refinement: Vec<HgnnLayer>,
    pub head: Mlp,
}

impl Model {
    pub fn new<R: Rng>(config: &TrainConfig, dims: ModelDims, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.common_dim;
        let mut store = ParamStore::new();
        let drug_encoder = DrugEncoder::new(&mut store, dims.atom_features, d, config.heads, config.gtn_layers, rng)?;
        let cell_encoder = Mlp::new(&mut store, "cell", &[dims.genes, d], &[Activation::Relu], rng);
        let disease_encoder = Mlp::new(&mut store, "disease", &[dims.disease_dim, d], &[Activation::Relu], rng);
        let refinement = (0..config.refinement_layers)
            .map(|l| {
                HgnnLayer::new(
                    &mut store,
                    &format!("hgnn{l}"),
                    d,
                    config.residual_mode,
                    config.gate_bias,
                    rng,
                )
            })
            .collect();
        let mut widths = vec![3 * d];
        widths.extend(&config.head_hidden);
        widths.push(1);
        let mut acts = vec![Activation::Relu; config.head_hidden.len()];
        acts.push(Activation::Sigmoid);
        let head = Mlp::new(&mut store, "head", &widths, &acts, rng);
        Ok(Model {
            config: config.clone(),
            dims,
            store,
            drug_encoder,
            cell_encoder,
            disease_encoder,
            refinement,
            head,
        })
    }

    fn check_inputs(&self, inputs: &ModelInputs) -> Result<()> {
        let mut got = inputs.dims();
        if got.layout.diseases == 0 {
            got.disease_dim = self.dims.disease_dim;
        }
        if got != self.dims {
            return Err(Error::Contract(format!(
                "model built for {:?}, given inputs {:?}",
                self.dims, got
            )));
        }
        Ok(())
    }

    /// Initial embeddings for every node, stacked drugs, cells, diseases.
    pub fn embed(&self, tape: &mut Tape, bind: &Binding, inputs: &ModelInputs) -> Result<Var> {
        self.check_inputs(inputs)?;
        let drugs = self
            .drug_encoder
            .encode_all(tape, bind, &inputs.atoms, self.config.aggregation())?;
        let expr = tape.constant(inputs.expression.clone())?;
        let cells = self.cell_encoder.forward(tape, bind, expr)?;
        let mut blocks = vec![drugs, cells];
        if inputs.diseases.nrows() > 0 {
            let z = tape.constant(inputs.diseases.clone())?;
            blocks.push(self.disease_encoder.forward(tape, bind, z)?);
        }
        tape.concat_rows(&blocks)
    }

    /// Refined node embeddings under the given propagation matrix.
    pub fn refined(&self, tape: &mut Tape, bind: &Binding, inputs: &ModelInputs, propagation: &Matrix) -> Result<Var> {
        let x0 = self.embed(tape, bind, inputs)?;
        let p = tape.constant(propagation.clone())?;
        refine(tape, bind, x0, p, &self.refinement)
    }

    /// Head scores for ordered triples `(drug, drug, cell)`.
    pub fn score<R: Rng>(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        refined: Var,
        triples: &[(usize, usize, usize)],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let layout = self.dims.layout;
        for &(a, b, c) in triples {
            if a >= layout.drugs || b >= layout.drugs {
                return Err(Error::Reference {
                    kind: "drug",
                    id: format!("#{}", a.max(b)),
                });
            }
            if c >= layout.cells {
                return Err(Error::Reference {
                    kind: "cell line",
                    id: format!("#{c}"),
                });
            }
        }
        let rows = |f: &dyn Fn(&(usize, usize, usize)) -> usize| triples.iter().map(f).collect::<Vec<_>>();
        let da = tape.gather_rows(refined, &rows(&|t| layout.drug(t.0)))?;
        let db = tape.gather_rows(refined, &rows(&|t| layout.drug(t.1)))?;
        let cl = tape.gather_rows(refined, &rows(&|t| layout.cell(t.2)))?;
        let x = tape.concat_cols(&[da, db, cl])?;
        self.head
            .forward_with_dropout(tape, bind, x, self.config.dropout_rate, training, rng)
    }

    /// Order-invariant scores: each sample gets the mean of its two drug
    /// orders, both evaluated at fixed batch positions.
    pub fn predict(&self, inputs: &ModelInputs, propagation: &Matrix, samples: &[SynergySample]) -> Result<Vec<f64>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape)?;
        let refined = self.refined(&mut tape, &bind, inputs, propagation)?;
        self.predict_from(&mut tape, &bind, refined, samples)
    }

    pub fn predict_from(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        refined: Var,
        samples: &[SynergySample],
    ) -> Result<Vec<f64>> {
        let n = samples.len();
        let mut triples = Vec::with_capacity(2 * n);
        for s in samples {
            let (lo, hi) = s.drug_pair();
            triples.push((lo, hi, s.cell));
        }
        for s in samples {
            let (lo, hi) = s.drug_pair();
            triples.push((hi, lo, s.cell));
        }
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let out = self.score(tape, bind, refined, &triples, false, &mut unused)?;
        let v = tape.value(out);
        Ok((0..n).map(|i| 0.5 * (v[[i, 0]] + v[[n + i, 0]])).collect())
    }
}

/// Each sample followed by its drug-swapped twin; self-pairs are not
/// duplicated.
pub fn augment(samples: &[SynergySample]) -> Vec<SynergySample> {
    let mut out = Vec::with_capacity(2 * samples.len());
    for s in samples {
        out.push(s.clone());
        if s.drug_a != s.drug_b {
            out.push(SynergySample {
                drug_a: s.drug_b,
                drug_b: s.drug_a,
                ..s.clone()
            });
        }
    }
    out
}

/// Mean binary cross-entropy of `predicted` (N×1) against `labels`.
pub fn bce_loss(tape: &mut Tape, predicted: Var, labels: &[bool]) -> Result<Var> {
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    tape.bce(predicted, &y)
}

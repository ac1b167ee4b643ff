//! Modality encoders mapping drugs, cell lines and diseases into a shared
//! embedding width.
//!
//! Drugs go through stacked multi-head graph-transformer layers over their
//! atom graphs followed by column max-pooling. Cell lines and diseases go
//! through small MLPs.

use rand::Rng;

use crate::entity::{EntityIndex, EntityKind};
use crate::error::{Error, Result};
use crate::molgraph::MolecularGraph;
use crate::tensor::{glorot, Activation, Binding, Matrix, ParamId, ParamStore, Tape, Var};

/// How a GTN layer weighs neighbor messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Scaled dot-product attention, softmax-normalized over each neighbor set.
    Attention,
    /// Uniform `1/|N(i)|` weights (the attention-free ablation).
    Mean,
}

/// Atom features and neighborhood of one molecule, ready for the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomGraph {
    pub features: Matrix,
    pub adjacency: Matrix,
    mean_weights: Matrix,
}

impl AtomGraph {
    pub fn new(features: Matrix, adjacency: Matrix) -> Result<Self> {
        let n = adjacency.nrows();
        if adjacency.ncols() != n || features.nrows() != n {
            return Err(Error::Dimension {
                op: "atom_graph",
                lhs: features.dim(),
                rhs: adjacency.dim(),
            });
        }
        if n == 0 {
            return Err(Error::Contract("molecule without atoms".into()));
        }
        for i in 0..n {
            if adjacency[[i, i]] != 0.0 {
                return Err(Error::Contract(format!("adjacency has a self loop at atom {i}")));
            }
            for j in 0..i {
                if adjacency[[i, j]] != adjacency[[j, i]] {
                    return Err(Error::Contract("adjacency is not symmetric".into()));
                }
            }
        }
        let mut mean_weights = adjacency.clone();
        for mut row in mean_weights.rows_mut() {
            let degree = row.sum();
            if degree > 0.0 {
                row /= degree;
            }
        }
        Ok(AtomGraph {
            features,
            adjacency,
            mean_weights,
        })
    }

    pub fn from_molecule(graph: &MolecularGraph) -> Result<Self> {
        AtomGraph::new(graph.featurize().value().clone(), graph.adjacency().value().clone())
    }

    pub fn num_atoms(&self) -> usize {
        self.adjacency.nrows()
    }
}

/// One graph-transformer layer:
/// `a'_i = act(W_self a_i + sum_{j in N(i)} alpha_ij W_message a_j)` with per-head
/// attention `alpha = softmax_N(i)((W_query a_i) . (W_key a_j) / sqrt(d))`.
///
/// Weights are stored input-major (`x · W`), so `W_self` and `W_message` are
/// `input_dim × heads·d` and each per-head `W_query`/`W_key` is `input_dim × d`.
#[derive(Clone, Debug)]
pub struct GtnLayer {
    pub w_self: ParamId,
    pub w_message: ParamId,
    pub w_query: Vec<ParamId>,
    pub w_key: Vec<ParamId>,
    pub input_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub activation: Activation,
}

impl GtnLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        heads: usize,
        head_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let out = heads * head_dim;
        let w_self = store.add(format!("{prefix}.w_self"), glorot(input_dim, out, rng));
        let w_message = store.add(format!("{prefix}.w_message"), glorot(input_dim, out, rng));
        let mut w_query = Vec::with_capacity(heads);
        let mut w_key = Vec::with_capacity(heads);
        for h in 0..heads {
            w_query.push(store.add(format!("{prefix}.w_query.{h}"), glorot(input_dim, head_dim, rng)));
            w_key.push(store.add(format!("{prefix}.w_key.{h}"), glorot(input_dim, head_dim, rng)));
        }
        GtnLayer {
            w_self,
            w_message,
            w_query,
            w_key,
            input_dim,
            heads,
            head_dim,
            activation,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Attention coefficients of head `head`, masked to the neighbor sets.
    pub fn attention(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        atoms: Var,
        adjacency: &Matrix,
        head: usize,
    ) -> Result<Var> {
        let q = tape.matmul(atoms, bind[self.w_query[head]])?;
        let k = tape.matmul(atoms, bind[self.w_key[head]])?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.head_dim as f64).sqrt())?;
        tape.masked_row_softmax(scores, adjacency)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        atoms: Var,
        graph: &AtomGraph,
        aggregation: Aggregation,
    ) -> Result<Var> {
        let (n, width) = tape.shape(atoms);
        if n != graph.num_atoms() || width != self.input_dim {
            return Err(Error::Dimension {
                op: "gtn_layer",
                lhs: (n, width),
                rhs: (graph.num_atoms(), self.input_dim),
            });
        }
        let self_term = tape.matmul(atoms, bind[self.w_self])?;
        let messages = tape.matmul(atoms, bind[self.w_message])?;
        let mut heads = Vec::with_capacity(self.heads);
        let uniform = match aggregation {
            Aggregation::Mean => Some(tape.constant(graph.mean_weights.clone())?),
            Aggregation::Attention => None,
        };
        for h in 0..self.heads {
            let weights = match uniform {
                Some(w) => w,
                None => self.attention(tape, bind, atoms, &graph.adjacency, h)?,
            };
            let head_messages = tape.slice_cols(messages, h * self.head_dim, (h + 1) * self.head_dim)?;
            heads.push(tape.matmul(weights, head_messages)?);
        }
        let aggregated = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let pre = tape.add(self_term, aggregated)?;
        tape.activate(pre, self.activation)
    }
}

/// Stacked GTN layers followed by max-pooling over atoms.
#[derive(Clone, Debug)]
pub struct DrugEncoder {
    pub layers: Vec<GtnLayer>,
}

impl DrugEncoder {
    /// `depth` layers of `heads` heads; every layer outputs `output_dim`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        input_dim: usize,
        output_dim: usize,
        heads: usize,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !output_dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "embedding width {output_dim} is not divisible by {heads} attention heads"
            )));
        }
        if depth == 0 {
            return Err(Error::Config("drug encoder needs at least one layer".into()));
        }
        let layers = (0..depth)
            .map(|l| {
                let input = if l == 0 { input_dim } else { output_dim };
                GtnLayer::new(
                    store,
                    &format!("drug.gtn{l}"),
                    input,
                    heads,
                    output_dim / heads,
                    Activation::Relu,
                    rng,
                )
            })
            .collect();
        Ok(DrugEncoder { layers })
    }

    /// 1 × output_dim embedding of one molecule.
    pub fn encode(&self, tape: &mut Tape, bind: &Binding, graph: &AtomGraph, aggregation: Aggregation) -> Result<Var> {
        let mut h = tape.constant(graph.features.clone())?;
        for layer in &self.layers {
            h = layer.forward(tape, bind, h, graph, aggregation)?;
        }
        tape.column_max_pool(h)
    }

    /// Embeddings of all molecules stacked in order.
    pub fn encode_all(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        graphs: &[AtomGraph],
        aggregation: Aggregation,
    ) -> Result<Var> {
        let rows = graphs
            .iter()
            .map(|g| self.encode(tape, bind, g, aggregation))
            .collect::<Result<Vec<_>>>()?;
        tape.concat_rows(&rows)
    }
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

/// Fully connected stack; row `i` of the input maps to row `i` of the output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// `dims` lists widths from input to output; `activations` has one entry
    /// per layer.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Self {
        assert_eq!(dims.len(), activations.len() + 1, "one activation per layer");
        let layers = dims
            .windows(2)
            .zip(activations)
            .enumerate()
            .map(|(l, (w, &activation))| DenseLayer {
                weight: store.add(format!("{prefix}.{l}.weight"), glorot(w[0], w[1], rng)),
                bias: store.add(format!("{prefix}.{l}.bias"), Matrix::zeros((1, w[1]))),
                activation,
            })
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        self.forward_with_dropout(tape, bind, x, 0.0, false, &mut rand::rngs::mock::StepRng::new(0, 0))
    }

    /// Forward pass with inverted dropout after every hidden layer.
    pub fn forward_with_dropout<R: Rng>(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            h = tape.matmul(h, bind[layer.weight])?;
            h = tape.add(h, bind[layer.bias])?;
            h = tape.activate(h, layer.activation)?;
            if l + 1 < self.layers.len() {
                h = tape.dropout(h, rate, training, rng)?;
            }
        }
        Ok(h)
    }
}

/// Per-entity embedding rows for one modality.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingMatrix<'a> {
    pub kind: EntityKind,
    pub index: &'a EntityIndex,
    pub rows: Var,
}

impl EmbeddingMatrix<'_> {
    pub fn row_of(&self, id: &str) -> Result<usize> {
        self.index.get(id).ok_or_else(|| Error::Reference {
            kind: match self.kind {
                EntityKind::Drug => "drug",
                EntityKind::Cell => "cell line",
                EntityKind::Disease => "disease",
            },
            id: id.to_string(),
        })
    }
}

fn encode_rows<'a>(
    tape: &mut Tape,
    bind: &Binding,
    kind: EntityKind,
    raw: Var,
    params: &Mlp,
    index: &'a EntityIndex,
) -> Result<EmbeddingMatrix<'a>> {
    let (rows, _) = tape.shape(raw);
    if rows != index.len() {
        return Err(Error::Dimension {
            op: "encode_rows",
            lhs: (rows, 0),
            rhs: (index.len(), 0),
        });
    }
    let rows = params.forward(tape, bind, raw)?;
    Ok(EmbeddingMatrix { kind, index, rows })
}

/// Cell-line embeddings `act(W c_i + b)` from normalized expression rows.
pub fn encode_cells<'a>(
    tape: &mut Tape,
    bind: &Binding,
    expression: Var,
    params: &Mlp,
    index: &'a EntityIndex,
) -> Result<EmbeddingMatrix<'a>> {
    encode_rows(tape, bind, EntityKind::Cell, expression, params, index)
}

/// Disease embeddings projected from precomputed text-embedding vectors.
pub fn encode_diseases<'a>(
    tape: &mut Tape,
    bind: &Binding,
    embeddings: Var,
    params: &Mlp,
    index: &'a EntityIndex,
) -> Result<EmbeddingMatrix<'a>> {
    encode_rows(tape, bind, EntityKind::Disease, embeddings, params, index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::parse_smiles;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn single_atom_identity_layer() {
        let mut store = ParamStore::new();
        let layer = GtnLayer::new(&mut store, "l", 3, 1, 3, Activation::Identity, &mut rng());
        store.get_mut(layer.w_self).value_mut().assign(&Matrix::eye(3));
        let graph = AtomGraph::new(array![[0.3, -1.0, 2.0]], Matrix::zeros((1, 1))).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let x = tape.constant(graph.features.clone()).unwrap();
        let y = layer
            .forward(&mut tape, &bind, x, &graph, Aggregation::Attention)
            .unwrap();
        assert_eq!(tape.value(y), &graph.features);
    }

    #[test]
    fn singleton_and_symmetric_attention() {
        let mut store = ParamStore::new();
        let layer = GtnLayer::new(&mut store, "l", 2, 1, 2, Activation::Relu, &mut rng());
        let wk = store.get(layer.w_query[0]).value().clone();
        store.get_mut(layer.w_key[0]).value_mut().assign(&wk);

        let pair = AtomGraph::new(array![[1.0, 0.5], [1.0, 0.5]], array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let x = tape.constant(pair.features.clone()).unwrap();
        let a = layer.attention(&mut tape, &bind, x, &pair.adjacency, 0).unwrap();
        assert_eq!(tape.value(a), &array![[0.0, 1.0], [1.0, 0.0]]);

        let star = AtomGraph::new(
            array![[0.2, 0.9], [1.0, -0.5], [1.0, -0.5]],
            array![[0.0, 1.0, 1.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
        )
        .unwrap();
        let x = tape.constant(star.features.clone()).unwrap();
        let a = layer.attention(&mut tape, &bind, x, &star.adjacency, 0).unwrap();
        assert_eq!(tape.value(a).row(0).to_vec(), vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn mean_aggregation_matches_attention_with_one_neighbor() {
        let mut store = ParamStore::new();
        let layer = GtnLayer::new(&mut store, "l", 42, 4, 3, Activation::Relu, &mut rng());
        let graph = AtomGraph::from_molecule(&parse_smiles("CO").unwrap()).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let x = tape.constant(graph.features.clone()).unwrap();
        let att = layer
            .forward(&mut tape, &bind, x, &graph, Aggregation::Attention)
            .unwrap();
        let mean = layer.forward(&mut tape, &bind, x, &graph, Aggregation::Mean).unwrap();
        assert_eq!(tape.value(att), tape.value(mean));
    }

    #[test]
    fn atom_graph_rejects_bad_adjacency() {
        assert!(AtomGraph::new(Matrix::zeros((2, 1)), array![[0.0, 1.0], [0.0, 0.0]]).is_err());
        assert!(AtomGraph::new(Matrix::zeros((1, 1)), array![[1.0]]).is_err());
        assert!(AtomGraph::new(Matrix::zeros((0, 1)), Matrix::zeros((0, 0))).is_err());
    }

    #[test]
    fn drug_encoder_smoke() {
        let mut store = ParamStore::new();
        let enc = DrugEncoder::new(&mut store, 42, 16, 4, 2, &mut rng()).unwrap();
        let methane = AtomGraph::from_molecule(&parse_smiles("C").unwrap()).unwrap();
        let ethanol = AtomGraph::from_molecule(&parse_smiles("CCO").unwrap()).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let a = enc.encode(&mut tape, &bind, &methane, Aggregation::Attention).unwrap();
        let b = enc.encode(&mut tape, &bind, &ethanol, Aggregation::Attention).unwrap();
        assert_eq!(tape.shape(a), (1, 16));
        assert_ne!(tape.value(a), tape.value(b));
        assert!(DrugEncoder::new(&mut store, 42, 10, 4, 2, &mut rng()).is_err());
    }

    #[test]
    fn cell_encoder_identity_and_bias_only() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "cell", &[3, 3], &[Activation::Identity], &mut rng());
        store.get_mut(mlp.layers[0].weight).value_mut().assign(&Matrix::eye(3));
        let index = EntityIndex::from_ids(["c1", "c2"]);
        let expr = array![[0.5, -1.0, 2.0], [0.0, 0.0, 0.0]];
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let x = tape.constant(expr.clone()).unwrap();
        let emb = encode_cells(&mut tape, &bind, x, &mlp, &index).unwrap();
        assert_eq!(tape.value(emb.rows), &expr);
        assert_eq!(emb.row_of("c2").unwrap(), 1);
        assert!(matches!(emb.row_of("zz"), Err(Error::Reference { .. })));

        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "cell", &[3, 2], &[Activation::Sigmoid], &mut rng());
        store
            .get_mut(mlp.layers[0].bias)
            .value_mut()
            .assign(&array![[0.0, 2.0]]);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let x = tape.constant(Matrix::zeros((1, 3))).unwrap();
        let y = mlp.forward(&mut tape, &bind, x).unwrap();
        assert_eq!(tape.value(y), &array![[0.5, crate::tensor::sigmoid(2.0)]]);

        let bad = tape.constant(Matrix::zeros((2, 4))).unwrap();
        assert!(matches!(
            encode_cells(&mut tape, &bind, bad, &mlp, &index),
            Err(Error::Dimension { .. })
        ));
    }
}

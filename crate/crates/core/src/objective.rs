//! Supervised contrastive loss with hard and in-batch negatives.
//!
//! For query `i` the candidate set is every positive and every hard negative in
//! the batch (`2B` documents); its own positive is the target:
//!
//! ```text
//! loss = −(1/B) Σ_i log( exp(cos(q_i,p_i)/τ) / Σ_j [exp(cos(q_i,p_j)/τ) + exp(cos(q_i,n_j)/τ)] )
//! ```

use crate::data::ContrastiveTuple;
use crate::error::{Error, Result};
use crate::model::{ProjectionDelta, Transformer};
use crate::numeric::{Graph, Tensor, Var};
use crate::pooling::{embed_layers_in, InstructedSeq};

pub const DEFAULT_TEMPERATURE: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub queries: Tensor,
    pub positives: Tensor,
    pub hard_negatives: Tensor,
    pub temperature: f64,
}

impl ContrastiveBatch {
    fn validate(&self) -> Result<()> {
        let q = self.queries.shape();
        if q.len() != 2 || q[0] == 0 {
            return Err(Error::Shape {
                op: "info_nce",
                lhs: q.to_vec(),
                rhs: vec![],
            });
        }
        for other in [&self.positives, &self.hard_negatives] {
            if other.shape() != q {
                return Err(Error::Shape {
                    op: "info_nce",
                    lhs: q.to_vec(),
                    rhs: other.shape().to_vec(),
                });
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Loss value of a batch of precomputed embeddings.
pub fn info_nce(batch: &ContrastiveBatch) -> Result<f64> {
    batch.validate()?;
    let mut g = Graph::new();
    let q = g.constant(batch.queries.clone());
    let p = g.constant(batch.positives.clone());
    let n = g.constant(batch.hard_negatives.clone());
    let loss = info_nce_in(&mut g, q, p, n, batch.temperature)?;
    Ok(g.value(loss).item())
}

/// Differentiable loss over `[B, d]` query, positive and hard-negative embeddings.
pub fn info_nce_in(g: &mut Graph, q: Var, p: Var, n: Var, temperature: f64) -> Result<Var> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let b = g.value(q).shape()[0];
    let qn = g.l2_normalize(q)?;
    let docs = g.concat_rows(&[p, n])?;
    let dn = g.l2_normalize(docs)?;
    let sims = g.linear(qn, dn)?;
    let logits = g.scale(sims, 1.0 / temperature)?;
    let targets: Vec<usize> = (0..b).collect();
    g.cross_entropy(logits, &targets)
}

/// Sequences of a tuple batch laid out as `[queries; positives; hard negatives]`.
pub fn batch_sequences(tuples: &[&ContrastiveTuple]) -> Vec<InstructedSeq> {
    let mut queries = Vec::with_capacity(tuples.len());
    let mut positives = Vec::with_capacity(tuples.len());
    let mut negatives = Vec::with_capacity(tuples.len());
    for t in tuples {
        queries.push(t.query_seq());
        positives.push(t.document_seq(&t.positive));
        negatives.push(t.document_seq(&t.hard_negative));
    }
    queries.extend(positives);
    queries.extend(negatives);
    queries
}

/// One forward pass over a tuple batch; returns the loss at each requested layer.
pub fn batch_losses_in(
    g: &mut Graph,
    model: &Transformer,
    tuples: &[&ContrastiveTuple],
    layers: &[usize],
    temperature: f64,
    delta: Option<&dyn ProjectionDelta>,
) -> Result<Vec<Var>> {
    let b = tuples.len();
    let seqs = batch_sequences(tuples);
    let pooled = embed_layers_in(g, model, &seqs, layers, delta)?;
    pooled
        .into_iter()
        .map(|e| {
            let q = g.slice_rows(e, 0, b)?;
            let p = g.slice_rows(e, b, b)?;
            let n = g.slice_rows(e, 2 * b, b)?;
            info_nce_in(g, q, p, n, temperature)
        })
        .collect()
}

/// Mean contrastive loss over consecutive batches of `batch_size` tuples, evaluated on
/// the pooled output of `layer`.
pub fn layer_loss(
    model: &Transformer,
    tuples: &[ContrastiveTuple],
    layer: usize,
    batch_size: usize,
    temperature: f64,
) -> Result<f64> {
    if tuples.is_empty() {
        return Err(Error::Data("layer_loss needs at least one tuple".into()));
    }
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in tuples.chunks(batch_size.max(1)) {
        let refs: Vec<&ContrastiveTuple> = chunk.iter().collect();
        let mut g = Graph::new();
        let loss = batch_losses_in(&mut g, model, &refs, &[layer], temperature, None)?;
        total += g.value(loss[0]).item();
        batches += 1;
    }
    Ok(total / batches as f64)
}

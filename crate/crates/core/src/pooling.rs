//! Weighted mean pooling with instruction and padding exclusion.
//!
//! Kept tokens are ranked `1..=L` in order and token `t` gets weight
//! `t / (L(L+1)/2)`, so later tokens count more and the weights sum to one.
//! Instruction tokens and padding are removed before ranking.

use crate::error::{Error, Result};
use crate::model::{ProjectionDelta, TokenBatch, Transformer};
use crate::numeric::{Graph, Tensor, Var};

/// A token sequence whose first `instruction_len` tokens are an instruction prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructedSeq {
    pub tokens: Vec<u32>,
    pub instruction_len: usize,
}

impl InstructedSeq {
    pub fn new(instruction: &[u32], content: &[u32]) -> Self {
        let mut tokens = instruction.to_vec();
        tokens.extend_from_slice(content);
        InstructedSeq {
            tokens,
            instruction_len: instruction.len(),
        }
    }

    pub fn plain(content: &[u32]) -> Self {
        InstructedSeq::new(&[], content)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolingMask {
    batch: usize,
    seq: usize,
    keep: Vec<bool>,
    /// 1-based rank among kept positions, 0 where not kept.
    positions: Vec<usize>,
}

impl PoolingMask {
    pub fn from_keep(batch: usize, seq: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != batch * seq {
            return Err(Error::Shape {
                op: "pooling_mask",
                lhs: vec![batch, seq],
                rhs: vec![keep.len()],
            });
        }
        let mut positions = vec![0; keep.len()];
        for b in 0..batch {
            let mut rank = 0;
            for s in 0..seq {
                if keep[b * seq + s] {
                    rank += 1;
                    positions[b * seq + s] = rank;
                }
            }
            if rank == 0 {
                return Err(Error::EmptyMask(b));
            }
        }
        Ok(PoolingMask {
            batch,
            seq,
            keep,
            positions,
        })
    }

    /// Keeps positions `instruction_len..length` of each row.
    pub fn for_batch(batch: &TokenBatch, instruction_lens: &[usize]) -> Result<Self> {
        let seq = batch.seq_len();
        let mut keep = vec![false; batch.batch() * seq];
        for (b, (&len, &inst)) in batch.lengths().iter().zip(instruction_lens).enumerate() {
            for s in inst.min(len)..len {
                keep[b * seq + s] = true;
            }
        }
        PoolingMask::from_keep(batch.batch(), seq, keep)
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Pooling weight of every position, row-major `[batch, seq]`.
    pub fn weights(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.keep.len()];
        for b in 0..self.batch {
            let row = &self.positions[b * self.seq..(b + 1) * self.seq];
            let kept = *row.iter().max().unwrap() as f64;
            let total = kept * (kept + 1.0) / 2.0;
            for (s, &rank) in row.iter().enumerate() {
                if rank > 0 {
                    out[b * self.seq + s] = rank as f64 / total;
                }
            }
        }
        out
    }
}

/// Linear position weights for `len` kept tokens.
pub fn position_weights(len: usize) -> Vec<f64> {
    let total = (len * (len + 1)) as f64 / 2.0;
    (1..=len).map(|t| t as f64 / total).collect()
}

/// Pools `hidden[batch, seq, d]` into `[batch, d]`.
pub fn weighted_mean_pool(hidden: &Tensor, mask: &PoolingMask) -> Result<Tensor> {
    let mut g = Graph::new();
    let h = g.constant(hidden.clone());
    let out = pool_in(&mut g, h, mask)?;
    Ok(g.value(out).clone())
}

pub fn pool_in(g: &mut Graph, hidden: Var, mask: &PoolingMask) -> Result<Var> {
    let shape = g.value(hidden).shape();
    if shape.len() != 3 || shape[0] != mask.batch || shape[1] != mask.seq {
        return Err(Error::Shape {
            op: "weighted_mean_pool",
            lhs: shape.to_vec(),
            rhs: vec![mask.batch, mask.seq],
        });
    }
    g.weighted_seq_sum(hidden, &mask.weights())
}

fn check_layer(model: &Transformer, layer: usize) -> Result<()> {
    if layer == 0 || layer > model.n_layers() {
        return Err(Error::LayerOutOfRange {
            layer,
            n_layers: model.n_layers(),
        });
    }
    Ok(())
}

fn batch_and_mask(seqs: &[InstructedSeq]) -> Result<(TokenBatch, PoolingMask)> {
    let tokens: Vec<&[u32]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
    let batch = TokenBatch::new(&tokens)?;
    let inst: Vec<usize> = seqs.iter().map(|s| s.instruction_len).collect();
    let mask = PoolingMask::for_batch(&batch, &inst)?;
    Ok((batch, mask))
}

/// Records the forward pass on `g` and returns the pooled embedding of every layer in
/// `layers` (1-based), all from the same pass.
pub fn embed_layers_in(
    g: &mut Graph,
    model: &Transformer,
    seqs: &[InstructedSeq],
    layers: &[usize],
    delta: Option<&dyn ProjectionDelta>,
) -> Result<Vec<Var>> {
    for &l in layers {
        check_layer(model, l)?;
    }
    let (batch, mask) = batch_and_mask(seqs)?;
    let states = model.forward_all_in(g, &batch, delta)?;
    layers.iter().map(|&l| pool_in(g, states[l], &mask)).collect()
}

/// Pooled embeddings of `seqs` at `layer` (default: last layer), instructions excluded.
pub fn embed(model: &Transformer, seqs: &[InstructedSeq], layer: Option<usize>) -> Result<Tensor> {
    let layer = layer.unwrap_or(model.n_layers());
    let mut g = Graph::new();
    let out = embed_layers_in(&mut g, model, seqs, &[layer], None)?;
    Ok(g.value(out[0]).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn single_token_passes_through() {
        let h = t(&[1, 1, 3], &[0.5, -1.0, 2.0]);
        let mask = PoolingMask::from_keep(1, 1, vec![true]).unwrap();
        assert_eq!(weighted_mean_pool(&h, &mask).unwrap().data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn three_token_hand_case() {
        let h = t(&[1, 3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let mask = PoolingMask::from_keep(1, 3, vec![true; 3]).unwrap();
        let out = weighted_mean_pool(&h, &mask).unwrap();
        assert!((out.data()[0] - 4.0 / 6.0).abs() < 1e-15);
        assert!((out.data()[1] - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn instruction_positions_are_excluded() {
        let with_inst = t(&[1, 4, 2], &[9.0, 9.0, -7.0, 3.0, 1.0, 2.0, 3.0, 4.0]);
        let mask = PoolingMask::from_keep(1, 4, vec![false, false, true, true]).unwrap();
        assert_eq!(mask.positions(), &[0, 0, 1, 2]);
        let content = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let plain = PoolingMask::from_keep(1, 2, vec![true, true]).unwrap();
        assert_eq!(
            weighted_mean_pool(&with_inst, &mask).unwrap(),
            weighted_mean_pool(&content, &plain).unwrap()
        );
    }

    #[test]
    fn all_masked_row_errors() {
        assert!(matches!(
            PoolingMask::from_keep(2, 2, vec![true, false, false, false]),
            Err(Error::EmptyMask(1))
        ));
        let batch = TokenBatch::new(&[vec![1u32, 2]]).unwrap();
        assert!(PoolingMask::for_batch(&batch, &[2]).is_err());
    }

    fn model(layers: usize) -> Transformer {
        Transformer::init(ModelConfig {
            vocab_size: 40,
            d_model: 8,
            n_layers: layers,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn embed_layer_range() {
        let m = model(3);
        let seqs = [InstructedSeq::plain(&[1, 2, 3])];
        assert!(matches!(embed(&m, &seqs, Some(0)), Err(Error::LayerOutOfRange { .. })));
        assert!(matches!(embed(&m, &seqs, Some(4)), Err(Error::LayerOutOfRange { .. })));
        assert_eq!(embed(&m, &seqs, None).unwrap(), embed(&m, &seqs, Some(3)).unwrap());
    }

    #[test]
    fn identical_sequences_identical_rows() {
        let m = model(2);
        let s = InstructedSeq::new(&[5, 6], &[7, 8, 9]);
        let out = embed(&m, &[s.clone(), s.clone(), s], None).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(1), out.row(2));
    }

    #[test]
    fn padding_never_affects_output() {
        let m = model(2);
        let short = InstructedSeq::new(&[5], &[7, 8]);
        let long = InstructedSeq::plain(&[1, 2, 3, 4, 5, 6, 7, 8]);
        let alone = embed(&m, std::slice::from_ref(&short), None).unwrap();
        let padded = embed(&m, &[short, long], None).unwrap();
        assert_eq!(alone.row(0), padded.row(0));
    }

    proptest! {
        #[test]
        fn weights_normalized_and_increasing(len in 1usize..200) {
            let w = position_weights(len);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for pair in w.windows(2) {
                prop_assert!(pair[1] > pair[0]);
            }
        }

        #[test]
        fn mask_weights_sum_to_one(keep in proptest::collection::vec(any::<bool>(), 1..40)) {
            prop_assume!(keep.iter().any(|&k| k));
            let n = keep.len();
            let mask = PoolingMask::from_keep(1, n, keep.clone()).unwrap();
            let w = mask.weights();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (k, wv) in keep.iter().zip(&w) {
                prop_assert_eq!(*k, *wv > 0.0);
            }
        }
    }
}

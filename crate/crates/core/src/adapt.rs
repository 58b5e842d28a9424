//! Low-rank adapters and the contrastive finetuning loop.
//!
//! Each adapted projection computes `x·Wᵀ + (α/r)·(x·Aᵀ)·Bᵀ` with `W` frozen,
//! `A ~ N(0, 1/d_in)` and `B = 0` at attach time, so a fresh adapter is exactly
//! transparent. Training updates `A` and `B` only, with Adam and a linear
//! learning-rate warm-up followed by a constant rate.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ContrastiveTuple, EpochSampler};
use crate::error::{Error, Result};
use crate::model::{Projection, ProjectionDelta, Transformer};
use crate::numeric::{Graph, Tensor, Var};
use crate::objective::{batch_losses_in, DEFAULT_TEMPERATURE};
use crate::pooling::{embed_layers_in, InstructedSeq};

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// 0-based block index.
    pub layer: usize,
    pub target: Projection,
    /// `[rank, d_in]`
    pub a: Tensor,
    /// `[d_out, rank]`
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `(α/r)·B·A`, shaped like the target weight.
    pub fn delta_weight(&self) -> Tensor {
        let (d_out, d_in) = (self.b.shape()[0], self.a.shape()[1]);
        let mut out = vec![0.0; d_out * d_in];
        crate::numeric::kernels::gemm_nn(self.b.data(), self.a.data(), &mut out, d_out, self.rank, d_in);
        let s = self.scale();
        out.iter_mut().for_each(|v| *v *= s);
        Tensor::new(&[d_out, d_in], out).expect("finite adapter weights")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Projection names (`wq`, `wk`, `wv`, `wo`, `w_gate`, `w_up`, `w_down`) adapted in every block.
    pub targets: Vec<String>,
    pub seed: u64,
}

impl LoraConfig {
    pub fn new(rank: usize, alpha: f64, seed: u64) -> Self {
        LoraConfig {
            rank,
            alpha,
            targets: default_targets(),
            seed,
        }
    }
}

pub fn default_targets() -> Vec<String> {
    Projection::ALL.iter().map(|p| p.name().to_string()).collect()
}

#[derive(Clone, Debug)]
pub struct AdaptedModel {
    pub base: Transformer,
    adapters: Vec<LoraAdapter>,
    merged: bool,
}

pub fn attach_lora(model: &Transformer, config: &LoraConfig) -> Result<AdaptedModel> {
    if config.rank == 0 || !(config.alpha > 0.0) {
        return Err(Error::Adapter("rank and alpha must be positive".into()));
    }
    let mut targets = Vec::new();
    for name in &config.targets {
        let p = Projection::from_name(name)
            .ok_or_else(|| Error::Adapter(format!("unknown target matrix {name:?}")))?;
        if !targets.contains(&p) {
            targets.push(p);
        }
    }
    targets.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adapters = Vec::new();
    for layer in 0..model.n_layers() {
        for &target in &targets {
            let (d_out, d_in) = target.dims(&model.config);
            adapters.push(LoraAdapter {
                layer,
                target,
                a: Tensor::randn(&[config.rank, d_in], 1.0 / (d_in as f64).sqrt(), &mut rng),
                b: Tensor::zeros(&[d_out, config.rank]),
                rank: config.rank,
                alpha: config.alpha,
            });
        }
    }
    Ok(AdaptedModel {
        base: model.clone(),
        adapters,
        merged: false,
    })
}

struct BoundAdapters {
    map: BTreeMap<(usize, Projection), (Var, Var, f64)>,
}

impl ProjectionDelta for BoundAdapters {
    fn delta(&self, g: &mut Graph, layer: usize, proj: Projection, x: Var) -> Result<Option<Var>> {
        let Some(&(a, b, scale)) = self.map.get(&(layer, proj)) else {
            return Ok(None);
        };
        let down = g.linear(x, a)?;
        let up = g.linear(down, b)?;
        g.scale(up, scale).map(Some)
    }
}

impl AdaptedModel {
    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    /// Σ r·(d_in + d_out) over all adapters.
    pub fn trainable_params(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::param_count).sum()
    }

    /// Registers adapter factors on `g`; returns the delta hook and the `(A, B)` vars.
    fn bind(&self, g: &mut Graph, trainable: bool) -> (BoundAdapters, Vec<(Var, Var)>) {
        let mut map = BTreeMap::new();
        let mut vars = Vec::with_capacity(self.adapters.len());
        for ad in &self.adapters {
            let a = g.leaf(ad.a.clone(), trainable);
            let b = g.leaf(ad.b.clone(), trainable);
            map.insert((ad.layer, ad.target), (a, b, ad.scale()));
            vars.push((a, b));
        }
        (BoundAdapters { map }, vars)
    }

    /// Pooled embeddings through the adapter path (adapters not folded in).
    pub fn embed(&self, seqs: &[InstructedSeq], layer: Option<usize>) -> Result<Tensor> {
        let mut g = Graph::new();
        let (hook, _) = self.bind(&mut g, false);
        let delta: Option<&dyn ProjectionDelta> = if self.merged { None } else { Some(&hook) };
        let layer = layer.unwrap_or(self.base.n_layers());
        let out = embed_layers_in(&mut g, &self.base, seqs, &[layer], delta)?;
        Ok(g.value(out[0]).clone())
    }

    /// Folds `(α/r)·B·A` into every target weight and returns the plain model.
    /// Adapters are consumed: a second call fails.
    pub fn merge(&mut self) -> Result<Transformer> {
        if self.merged {
            return Err(Error::Adapter("adapters were already merged".into()));
        }
        for ad in &self.adapters {
            let delta = ad.delta_weight();
            let w = self.base.layers[ad.layer].weight_mut(ad.target);
            for (wv, dv) in w.data_mut().iter_mut().zip(delta.data()) {
                *wv += dv;
            }
        }
        self.merged = true;
        Ok(self.base.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Small enough to train a toy model in seconds.
    pub fn desk() -> Self {
        TrainConfig {
            steps: 300,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 90,
            lora_rank: 4,
            lora_alpha: 8.0,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
        }
    }

    /// 1000 steps of batch 64, lr 2e-4 with 300 warm-up steps, rank 16.
    pub fn paper() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 64,
            lr: 2e-4,
            warmup_steps: 300,
            lora_rank: 16,
            lora_alpha: 32.0,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lora_rank == 0 {
            return Err(Error::Config("batch_size and lora_rank must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lora_alpha > 0.0 && self.temperature > 0.0) {
            return Err(Error::Config("lr, lora_alpha and temperature must be positive".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        Ok(())
    }

    /// Learning rate for 1-based `step`: `lr·step/warmup` during warm-up, then `lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig::new(self.lora_rank, self.lora_alpha, self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainPoint {
    pub step: usize,
    pub loss: f64,
    /// Milliseconds since the start of training, measured after this step.
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainCurve {
    pub points: Vec<TrainPoint>,
}

impl TrainCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,wall_ms\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{:.3}\n", p.step, p.loss, p.wall_ms));
        }
        s
    }

    /// Mean loss of the first `n` steps.
    pub fn head_mean(&self, n: usize) -> f64 {
        mean(self.points.iter().take(n).map(|p| p.loss))
    }

    /// Mean loss of the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        mean(self.points.iter().rev().take(n).map(|p| p.loss))
    }

    pub fn total_ms(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.wall_ms)
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(sizes: impl Iterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update of every parameter slot; `grads[i]` matches `params[i]`.
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Contrastive finetuning of the adapters on `dataset`, loss taken at the last layer.
pub fn train(
    mut model: AdaptedModel,
    dataset: &[ContrastiveTuple],
    config: &TrainConfig,
) -> Result<(AdaptedModel, TrainCurve)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    if model.merged {
        return Err(Error::Adapter("cannot train merged adapters".into()));
    }
    let mut curve = TrainCurve::default();
    if config.steps == 0 {
        return Ok((model, curve));
    }
    let mut sampler = EpochSampler::new(dataset.len(), config.seed)?;
    let mut adam = Adam::new(model.adapters.iter().flat_map(|a| [a.a.numel(), a.b.numel()]));
    let batch = config.batch_size.min(dataset.len());
    let last_layer = model.base.n_layers();
    let start = Instant::now();
    for step in 1..=config.steps {
        let ids = sampler.take(batch);
        let tuples: Vec<&ContrastiveTuple> = ids.iter().map(|&i| &dataset[i]).collect();
        let diverged = |e: Error| {
            if e.is_numeric() {
                Error::Diverged {
                    step,
                    batch: ids.clone(),
                }
            } else {
                e
            }
        };
        let mut g = Graph::new();
        let (hook, vars) = model.bind(&mut g, true);
        let loss = batch_losses_in(&mut g, &model.base, &tuples, &[last_layer], config.temperature, Some(&hook))
            .map_err(diverged)?[0];
        let loss_value = g.value(loss).item();
        g.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .flat_map(|&(a, b)| [a, b])
            .map(|v| g.grad(v).expect("adapter factors require grad"))
            .collect();
        if grads.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged { step, batch: ids });
        }
        let mut params: Vec<&mut Tensor> = model
            .adapters
            .iter_mut()
            .flat_map(|a| [&mut a.a, &mut a.b])
            .collect();
        adam.step(&mut params, &grads, config.lr_at(step));
        curve.points.push(TrainPoint {
            step,
            loss: loss_value,
            wall_ms: start.elapsed().as_secs_f64() * 1000.0,
        });
    }
    Ok((model, curve))
}

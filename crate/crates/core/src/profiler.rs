//! Zero-shot layerwise loss profile and the two-minima prune-point selection.
//!
//! [`profile`] embeds a seeded sample of tuples at every layer using a single
//! forward pass per batch and records the mean contrastive loss per layer.
//! [`l3prune_select`] then picks the loss minimum in each half of the stack:
//! the first-half minimum gives the `small` variant, the second-half minimum
//! the `large` one.

use std::fmt;

use crate::data::{ContrastiveTuple, EpochSampler};
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::numeric::Graph;
use crate::objective::{batch_losses_in, DEFAULT_TEMPERATURE};
use crate::prune::{prune_layers, PruneReport, PruneSpec};

pub const DEFAULT_SAMPLE_COUNT: usize = 256;
pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileConfig {
    pub sample_count: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub temperature: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            sample_count: DEFAULT_SAMPLE_COUNT,
            seed: 0,
            batch_size: DEFAULT_BATCH_SIZE,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerLossProfile {
    /// `losses[l - 1]` is the mean loss at layer `l`.
    pub losses: Vec<f64>,
    pub sample_count: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl LayerLossProfile {
    pub fn n_layers(&self) -> usize {
        self.losses.len()
    }

    /// `layer,loss` rows, layers 1-based.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, l));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut losses = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let perr = |msg: &str| Error::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let (layer, loss) = line.split_once(',').ok_or_else(|| perr("expected layer,loss"))?;
            let layer: usize = layer.trim().parse().map_err(|_| perr("bad layer index"))?;
            if layer != losses.len() + 1 {
                return Err(perr("layers must be consecutive from 1"));
            }
            let loss: f64 = loss.trim().parse().map_err(|_| perr("bad loss value"))?;
            if !loss.is_finite() {
                return Err(perr("loss is not finite"));
            }
            losses.push(loss);
        }
        Ok(LayerLossProfile {
            losses,
            sample_count: 0,
            seed: 0,
            batch_size: 0,
        })
    }
}

/// Indices of `count` distinct tuples drawn with the seeded sampler.
pub fn sample_indices(len: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 || count > len {
        return Err(Error::Data(format!("sample count {count} must be in 1..={len}")));
    }
    Ok(EpochSampler::new(len, seed)?.take(count))
}

pub fn profile(model: &Transformer, dataset: &[ContrastiveTuple], config: &ProfileConfig) -> Result<LayerLossProfile> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot profile on an empty dataset".into()));
    }
    let picked = sample_indices(dataset.len(), config.sample_count, config.seed)?;
    let layers: Vec<usize> = (1..=model.n_layers()).collect();
    let mut sums = vec![0.0; layers.len()];
    let mut batches = 0;
    for chunk in picked.chunks(config.batch_size.max(1)) {
        let tuples: Vec<&ContrastiveTuple> = chunk.iter().map(|&i| &dataset[i]).collect();
        let mut g = Graph::new();
        let losses = batch_losses_in(&mut g, model, &tuples, &layers, config.temperature, None)?;
        for (s, l) in sums.iter_mut().zip(losses) {
            *s += g.value(l).item();
        }
        batches += 1;
    }
    Ok(LayerLossProfile {
        losses: sums.into_iter().map(|s| s / batches as f64).collect(),
        sample_count: config.sample_count,
        seed: config.seed,
        batch_size: config.batch_size,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct L3Selection {
    pub small_layer: usize,
    pub large_layer: usize,
    pub midpoint: usize,
}

impl L3Selection {
    pub fn to_text(&self) -> String {
        format!(
            "small_layer={}\nlarge_layer={}\nmidpoint={}\n",
            self.small_layer, self.large_layer, self.midpoint
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut small = None;
        let mut large = None;
        let mut mid = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| perr(format!("expected key=value, got {line:?}")))?;
            let v: usize = v.trim().parse().map_err(|_| perr(format!("bad value for {k}")))?;
            match k.trim() {
                "small_layer" => small = Some(v),
                "large_layer" => large = Some(v),
                "midpoint" => mid = Some(v),
                _ => {}
            }
        }
        let missing = |k: &str| Error::Selection(format!("selection is missing {k}"));
        let sel = L3Selection {
            small_layer: small.ok_or_else(|| missing("small_layer"))?,
            large_layer: large.ok_or_else(|| missing("large_layer"))?,
            midpoint: mid.ok_or_else(|| missing("midpoint"))?,
        };
        if !(1 <= sel.small_layer && sel.small_layer <= sel.midpoint && sel.midpoint < sel.large_layer) {
            return Err(Error::Selection(format!("inconsistent selection {sel}")));
        }
        Ok(sel)
    }
}

impl fmt::Display for L3Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "small={} large={} midpoint={}",
            self.small_layer, self.large_layer, self.midpoint
        )
    }
}

/// 1-based position of the minimum of `losses[range]`, first index on ties.
fn argmin(losses: &[f64], from: usize, to: usize) -> usize {
    let mut best = from;
    for layer in from..=to {
        if losses[layer - 1] < losses[best - 1] {
            best = layer;
        }
    }
    best
}

/// Minimum over layers `1..=⌊n/2⌋` (small) and `⌊n/2⌋+1..=n` (large).
pub fn l3prune_select(profile: &LayerLossProfile) -> Result<L3Selection> {
    select_from_losses(&profile.losses)
}

pub fn select_from_losses(losses: &[f64]) -> Result<L3Selection> {
    let n = losses.len();
    if n < 2 {
        return Err(Error::Selection(format!("selection needs at least 2 layers, got {n}")));
    }
    let midpoint = n / 2;
    Ok(L3Selection {
        small_layer: argmin(losses, 1, midpoint),
        large_layer: argmin(losses, midpoint + 1, n),
        midpoint,
    })
}

#[derive(Clone, Debug)]
pub struct Variant {
    pub model: Transformer,
    pub report: PruneReport,
}

/// Prunes `model` to the selected depths; returns `(large, small)`.
pub fn make_variants(model: &Transformer, selection: &L3Selection) -> Result<(Variant, Variant)> {
    if selection.large_layer > model.n_layers() || selection.midpoint != model.n_layers() / 2 {
        return Err(Error::Selection(format!(
            "selection {selection} does not fit a {}-layer model",
            model.n_layers()
        )));
    }
    let build = |k: usize, name: &str| -> Result<Variant> {
        let (model, report) = prune_layers(model, &PruneSpec::layers(k).with_provenance(name))?;
        Ok(Variant { model, report })
    };
    Ok((
        build(selection.large_layer, "l3prune-large")?,
        build(selection.small_layer, "l3prune-small")?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use crate::model::ModelConfig;
    use crate::objective::layer_loss;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(n: usize) -> Transformer {
        Transformer::init(ModelConfig {
            vocab_size: 128,
            d_model: 8,
            n_layers: n,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 24,
            seed: 21,
        })
        .unwrap()
    }

    fn data() -> Vec<ContrastiveTuple> {
        synth_generate(&SynthSpec::new(128, 6, 40, 0.1, 4)).unwrap()
    }

    fn cfg(samples: usize) -> ProfileConfig {
        ProfileConfig {
            sample_count: samples,
            seed: 8,
            batch_size: 8,
            temperature: 0.05,
        }
    }

    #[test]
    fn selection_examples() {
        let s = select_from_losses(&[5.0, 3.0, 4.0, 6.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.small_layer, s.large_layer, s.midpoint), (2, 5, 3));
        let s = select_from_losses(&[1.0; 4]).unwrap();
        assert_eq!((s.small_layer, s.large_layer), (1, 3));
        let s = select_from_losses(&[7.0, 0.5]).unwrap();
        assert_eq!((s.small_layer, s.large_layer), (1, 2));
        assert!(select_from_losses(&[1.0]).is_err());
    }

    #[test]
    fn selection_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.random_range(2..30);
            let losses: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let shifted: Vec<f64> = losses.iter().map(|l| l + 3.25).collect();
            assert_eq!(select_from_losses(&losses).unwrap(), select_from_losses(&shifted).unwrap());
        }
    }

    #[test]
    fn selection_text_round_trip() {
        let s = L3Selection {
            small_layer: 5,
            large_layer: 25,
            midpoint: 16,
        };
        assert_eq!(L3Selection::parse(&s.to_text()).unwrap(), s);
        assert!(L3Selection::parse("small_layer=9\nlarge_layer=25\nmidpoint=8\n").is_err());
    }

    #[test]
    fn reference_picks_produce_expected_depths() {
        let m = model(32);
        for (small, large) in [(5, 25), (8, 22), (8, 25)] {
            let sel = L3Selection {
                small_layer: small,
                large_layer: large,
                midpoint: 16,
            };
            let (l, s) = make_variants(&m, &sel).unwrap();
            assert_eq!((l.model.n_layers(), s.model.n_layers()), (large, small));
            assert_eq!(l.report.provenance, "l3prune-large");
            assert_eq!(s.report.provenance, "l3prune-small");
        }
    }

    #[test]
    fn profile_is_deterministic_and_single_pass() {
        let m = model(4);
        let d = data();
        let a = profile(&m, &d, &cfg(20)).unwrap();
        assert_eq!(m.forward_passes(), 3); // ⌈20 / 8⌉
        let b = profile(&m, &d, &cfg(20)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_layers(), 4);
        assert!(a.losses.iter().all(|l| l.is_finite() && *l > 0.0));
    }

    #[test]
    fn profile_matches_per_layer_recomputation() {
        let m = model(4);
        let d = data();
        let config = cfg(20);
        let prof = profile(&m, &d, &config).unwrap();
        let picked: Vec<ContrastiveTuple> = sample_indices(d.len(), 20, config.seed)
            .unwrap()
            .into_iter()
            .map(|i| d[i].clone())
            .collect();
        for layer in 1..=4 {
            let oracle = layer_loss(&m, &picked, layer, config.batch_size, config.temperature).unwrap();
            assert!((prof.losses[layer - 1] - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_blocks_give_flat_profile() {
        let mut m = model(5);
        for block in &mut m.layers {
            for t in block.tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let prof = profile(&m, &data(), &cfg(16)).unwrap();
        for l in &prof.losses {
            assert_eq!(l.to_bits(), prof.losses[0].to_bits());
        }
    }

    #[test]
    fn profile_errors() {
        let m = model(2);
        assert!(profile(&m, &[], &cfg(1)).is_err());
        assert!(profile(&m, &data(), &cfg(41)).is_err());
        assert!(profile(&m, &data(), &cfg(0)).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let p = LayerLossProfile {
            losses: vec![2.5, 1.0 / 3.0, 4.0],
            sample_count: 1,
            seed: 0,
            batch_size: 1,
        };
        let csv = p.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(LayerLossProfile::from_csv(&csv).unwrap().losses, p.losses);
    }
}

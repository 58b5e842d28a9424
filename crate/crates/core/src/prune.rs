//! Depth pruning: keep the first `n*` blocks, drop the rest, rewrite the config.
//!
//! For a pruning fraction `p` the kept depth is `n* = ⌊n · (1 − p)⌋`. The final
//! norm and embedding are retained and no block is treated specially.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::Transformer;

/// Slack applied before flooring so that products such as `20 · 0.35` that are
/// integral in exact arithmetic but land a few ulps low still floor correctly.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PruneMode {
    /// Fraction of layers to remove, in `[0, 1)`.
    Percent(f64),
    /// Number of layers to keep.
    Layers(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneSpec {
    pub mode: PruneMode,
    pub provenance: String,
}

impl PruneSpec {
    pub fn percent(p: f64) -> Self {
        PruneSpec {
            mode: PruneMode::Percent(p),
            provenance: format!("percent-{p}"),
        }
    }

    pub fn layers(k: usize) -> Self {
        PruneSpec {
            mode: PruneMode::Layers(k),
            provenance: format!("layers-{k}"),
        }
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    /// Number of layers kept out of `n`.
    pub fn target_layers(&self, n: usize) -> Result<usize> {
        match self.mode {
            PruneMode::Percent(p) => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::Prune(format!("fraction {p} outside [0, 1)")));
                }
                let kept = pruned_depth(n, p);
                if kept < 1 {
                    return Err(Error::Prune(format!("pruning {p} of {n} layers leaves none")));
                }
                Ok(kept)
            }
            PruneMode::Layers(k) => {
                if k < 1 || k > n {
                    return Err(Error::Prune(format!("layer count {k} outside 1..={n}")));
                }
                Ok(k)
            }
        }
    }

    /// Fraction of layers removed: `p` itself, or `(n − k)/n` for an explicit count.
    pub fn fraction(&self, n: usize) -> f64 {
        match self.mode {
            PruneMode::Percent(p) => p,
            PruneMode::Layers(k) => (n.saturating_sub(k)) as f64 / n as f64,
        }
    }
}

/// `⌊n · (1 − p)⌋`.
pub fn pruned_depth(n: usize, p: f64) -> usize {
    (n as f64 * (1.0 - p) + FLOOR_SLACK).floor().max(0.0) as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    pub provenance: String,
    pub fraction: f64,
    pub layers_before: usize,
    pub layers_after: usize,
    pub params_before: usize,
    pub params_after: usize,
    pub percent_params_kept: f64,
}

impl PruneReport {
    pub const CSV_HEADER: &'static str = "p,layers_before,layers_after,params_before,params_after,percent_kept";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.4}",
            self.fraction,
            self.layers_before,
            self.layers_after,
            self.params_before,
            self.params_after,
            self.percent_params_kept
        )
    }

    pub fn to_csv(reports: &[PruneReport]) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in reports {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn layer_delta(&self) -> i64 {
        self.layers_after as i64 - self.layers_before as i64
    }
}

impl fmt::Display for PruneReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} -> {} layers ({}), {} -> {} params ({:.1}% kept)",
            self.provenance,
            self.layers_before,
            self.layers_after,
            self.layer_delta(),
            self.params_before,
            self.params_after,
            self.percent_params_kept
        )
    }
}

/// Copies the first `n*` blocks into a new model. The input is left untouched.
pub fn prune_layers(model: &Transformer, spec: &PruneSpec) -> Result<(Transformer, PruneReport)> {
    let n = model.n_layers();
    let kept = spec.target_layers(n)?;
    let mut config = model.config.clone();
    config.n_layers = kept;
    let pruned = Transformer::from_parts(
        config,
        model.token_embedding.clone(),
        model.layers[..kept].to_vec(),
        model.final_norm.clone(),
    );
    let params_before = model.count_params();
    let params_after = pruned.count_params();
    let report = PruneReport {
        provenance: spec.provenance.clone(),
        fraction: spec.fraction(n),
        layers_before: n,
        layers_after: kept,
        params_before,
        params_after,
        percent_params_kept: 100.0 * params_after as f64 / params_before as f64,
    };
    Ok((pruned, report))
}

/// One report per fraction, sorted by fraction.
pub fn sweep(model: &Transformer, percents: &[f64]) -> Result<Vec<PruneReport>> {
    let mut sorted = percents.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .into_iter()
        .map(|p| prune_layers(model, &PruneSpec::percent(p)).map(|(_, r)| r))
        .collect()
}

//! Activation masks, the batch-based OUI, and flip statistics between masks.
//!
//! For a hidden layer with `d` units evaluated on a probe batch of `B` rows,
//! `s_j` counts the rows on which unit `j` has a strictly positive
//! preactivation. The layer score averages `min(s_j, B − s_j) / ⌊B/2⌋` over
//! units: 1 when every unit splits the batch evenly, 0 when every unit is
//! always on or always off.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::envs::ProbeBatch;
use crate::error::{contract, LabError, Result};
use crate::nn::{forward, ForwardTrace, Network};

/// Strict-positivity indicators of hidden preactivations, one `B × d_l` matrix per layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationMask {
    layers: Vec<Array2<bool>>,
}

impl ActivationMask {
    pub fn from_layers(layers: Vec<Array2<bool>>) -> Result<Self> {
        contract!(!layers.is_empty(), "mask needs at least one layer");
        let rows = layers[0].nrows();
        contract!(
            layers.iter().all(|l| l.nrows() == rows),
            "mask layers disagree on batch size"
        );
        Ok(Self { layers })
    }

    pub fn from_trace(trace: &ForwardTrace) -> Result<Self> {
        Self::from_layers(trace.preactivations.iter().map(|z| z.mapv(|v| v > 0.0)).collect())
    }

    pub fn layers(&self) -> &[Array2<bool>] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> ArrayView2<'_, bool> {
        self.layers[l].view()
    }

    pub fn batch_size(&self) -> usize {
        self.layers[0].nrows()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.ncols()).collect()
    }

    pub fn complement(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| l.mapv(|b| !b)).collect(),
        }
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        contract!(
            self.layers.len() == other.layers.len()
                && self.layers.iter().zip(&other.layers).all(|(a, b)| a.dim() == b.dim()),
            "masks have different shapes: {:?}×{} vs {:?}×{}",
            self.layer_sizes(),
            self.batch_size(),
            other.layer_sizes(),
            other.batch_size()
        );
        Ok(())
    }
}

/// Column sums `s_j` of one layer mask.
pub fn positive_counts(mask: ArrayView2<'_, bool>) -> Vec<u64> {
    mask.axis_iter(Axis(1))
        .map(|col| col.iter().filter(|&&b| b).count() as u64)
        .collect()
}

/// Evaluates the network on the probe batch and thresholds every hidden preactivation at 0.
pub fn compute_mask(net: &Network, probe: &ProbeBatch) -> Result<ActivationMask> {
    contract!(
        probe.obs_dim() == net.input_dim(),
        "probe width {} does not match network input {}",
        probe.obs_dim(),
        net.input_dim()
    );
    contract!(net.num_hidden() > 0, "network has no hidden layers");
    ActivationMask::from_trace(&forward(net, probe.observations().view())?)
}

/// Layer OUI from positivity counts over a batch of `batch` rows.
pub fn oui_from_counts(counts: &[u64], batch: u64) -> Result<f64> {
    if batch < 2 {
        return Err(LabError::Config(format!(
            "OUI needs a batch of at least 2, got {batch}"
        )));
    }
    contract!(!counts.is_empty(), "OUI needs at least one unit");
    contract!(
        counts.iter().all(|&s| s <= batch),
        "positivity count exceeds batch size {batch}"
    );
    let half = batch / 2;
    let total: u64 = counts.iter().map(|&s| s.min(batch - s)).sum();
    Ok(total as f64 / (half as f64 * counts.len() as f64))
}

pub fn oui_layer(mask: ArrayView2<'_, bool>) -> Result<f64> {
    oui_from_counts(&positive_counts(mask), mask.nrows() as u64)
}

/// Balance form `(1/d)·Σ_j (1 − 2|p_j − ½|)`; equal to [`oui_layer`] for even batches.
pub fn oui_balance_form(mask: ArrayView2<'_, bool>) -> Result<f64> {
    let batch = mask.nrows();
    if batch < 2 {
        return Err(LabError::Config(format!(
            "OUI needs a batch of at least 2, got {batch}"
        )));
    }
    contract!(mask.ncols() > 0, "OUI needs at least one unit");
    let counts = positive_counts(mask);
    let sum: f64 = counts
        .iter()
        .map(|&s| 1.0 - 2.0 * (s as f64 / batch as f64 - 0.5).abs())
        .sum();
    Ok(sum / counts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuiReport {
    pub per_layer: Vec<f64>,
    pub branch_mean: f64,
    pub s_counts: Vec<Vec<u64>>,
    pub p_fractions: Vec<Vec<f64>>,
}

impl OuiReport {
    pub fn from_mask(mask: &ActivationMask) -> Result<Self> {
        let batch = mask.batch_size() as u64;
        let s_counts: Vec<Vec<u64>> = mask.layers.iter().map(|l| positive_counts(l.view())).collect();
        let per_layer = s_counts
            .iter()
            .map(|s| oui_from_counts(s, batch))
            .collect::<Result<Vec<_>>>()?;
        let p_fractions = s_counts
            .iter()
            .map(|s| s.iter().map(|&c| c as f64 / batch as f64).collect())
            .collect();
        Ok(Self {
            branch_mean: per_layer.iter().sum::<f64>() / per_layer.len() as f64,
            per_layer,
            s_counts,
            p_fractions,
        })
    }
}

/// OUI of every hidden layer of one branch (actor or critic); the head is excluded.
pub fn oui_branch(net: &Network, probe: &ProbeBatch) -> Result<OuiReport> {
    OuiReport::from_mask(&compute_mask(net, probe)?)
}

/// Fraction of (sample, unit) entries whose bit differs, pooled over all hidden layers.
pub fn flip_fraction(prev: &ActivationMask, curr: &ActivationMask) -> Result<f64> {
    prev.check_same_shape(curr)?;
    let (mut flips, mut total) = (0u64, 0u64);
    for (a, b) in prev.layers.iter().zip(&curr.layers) {
        flips += a.iter().zip(b.iter()).filter(|(x, y)| x != y).count() as u64;
        total += a.len() as u64;
    }
    Ok(flips as f64 / total as f64)
}

/// Fraction of units with at least one changed bit anywhere in the probe batch.
pub fn unit_flip_fraction(prev: &ActivationMask, curr: &ActivationMask) -> Result<f64> {
    prev.check_same_shape(curr)?;
    let (mut changed, mut units) = (0u64, 0u64);
    for (a, b) in prev.layers.iter().zip(&curr.layers) {
        for (ca, cb) in a.axis_iter(Axis(1)).zip(b.axis_iter(Axis(1))) {
            changed += u64::from(ca != cb);
            units += 1;
        }
    }
    Ok(changed as f64 / units as f64)
}

//! Utility histograms, routing entropy, edge ablation and calibration, with CSV export.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, GradedModel};
use crate::routing::RoutingState;
use crate::tape::Act;
use crate::tensor::sigmoid;

/// Equal-width bins on `[lo, hi]`; values outside land in the end bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::config("bins", format!("{bins} bins on [{lo}, {hi}]")));
        }
        let mut counts = vec![0; bins];
        for &v in values {
            counts[Self::bin_of(v, bins, lo, hi)] += 1;
        }
        Ok(Self { lo, hi, counts })
    }

    fn bin_of(v: f64, bins: usize, lo: f64, hi: f64) -> usize {
        let x = ((v - lo) / (hi - lo) * bins as f64).floor();
        if x.is_nan() || x < 0.0 {
            0
        } else {
            (x as usize).min(bins - 1)
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + i as f64 * w, self.lo + (i + 1) as f64 * w)
    }
}

/// `[min, max]` of finite values, widened when degenerate.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (-0.5, 0.5)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeUtilities {
    pub layer: usize,
    pub edge: String,
    pub histogram: Histogram,
    pub mean: f64,
    pub positive_fraction: f64,
}

/// Per-edge histograms of `ΔL_t(e)`, sharing one range per layer.
pub fn utility_histograms(model: &GradedModel, states: &[RoutingState], bins: usize) -> Result<Vec<EdgeUtilities>> {
    let mut out = Vec::new();
    for (l, st) in states.iter().enumerate() {
        let (lo, hi) = range(st.utilities.data().iter().copied());
        let n = st.utilities.rows();
        for (i, e) in model.layers[l].edges.edges().iter().enumerate() {
            let col: Vec<f64> = (0..n).map(|t| st.utilities.get(t, i)).collect();
            out.push(EdgeUtilities {
                layer: l,
                edge: e.to_string(),
                histogram: Histogram::new(&col, bins, lo, hi)?,
                mean: col.iter().sum::<f64>() / n as f64,
                positive_fraction: col.iter().filter(|&&v| v > 0.0).count() as f64 / n as f64,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub layer: usize,
    /// Mean `−Σ α log α` per token.
    pub entropy: f64,
    /// Mean number of edges with `α > support_threshold`.
    pub support: f64,
    /// `log |E|`, the entropy of uniform gates.
    pub max_entropy: f64,
}

pub const SUPPORT_THRESHOLD: f64 = 1e-2;

pub fn routing_entropy(states: &[RoutingState]) -> Vec<EntropySummary> {
    states
        .iter()
        .enumerate()
        .map(|(l, st)| {
            let (n, k) = (st.alpha.rows(), st.alpha.cols());
            let mut h = 0.0;
            let mut support = 0usize;
            for t in 0..n {
                for &a in st.alpha.row(t) {
                    h -= Act::XLogX.eval(a);
                    support += usize::from(a > SUPPORT_THRESHOLD);
                }
            }
            EntropySummary {
                layer: l,
                entropy: h / n as f64,
                support: support as f64 / n as f64,
                max_entropy: (k as f64).ln(),
            }
        })
        .collect()
}

/// Least-squares slope of a trace against its index.
pub fn trend(trace: &[f64]) -> f64 {
    let n = trace.len() as f64;
    if trace.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = trace.iter().sum::<f64>() / n;
    let cov: f64 = trace.iter().enumerate().map(|(i, y)| (i as f64 - mx) * (y - my)).sum();
    let var: f64 = (0..trace.len()).map(|i| (i as f64 - mx).powi(2)).sum();
    cov / var
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    /// `(layer, edge label)` pairs with gates forced to 0.
    pub edges: Vec<(usize, String)>,
    pub base_loss: f64,
    pub ablated_loss: f64,
    /// `ablated − base`, positive when the edges were useful.
    pub mean_degradation: f64,
    pub per_token: Vec<f64>,
}

/// Loss change from zeroing the gates of `edges` (`(layer, edge index)`).
pub fn ablate(model: &GradedModel, batch: &Batch, edges: &[(usize, usize)]) -> Result<Ablation> {
    let base = model.ablated_token_losses(batch, &[])?;
    let abl = model.ablated_token_losses(batch, edges)?;
    let per_token: Vec<f64> = abl.iter().zip(&base).map(|(a, b)| a - b).collect();
    let n = base.len() as f64;
    let (bl, al) = (base.iter().sum::<f64>() / n, abl.iter().sum::<f64>() / n);
    Ok(Ablation {
        edges: edges
            .iter()
            .map(|&(l, e)| (l, model.layers[l].edges.get(e).to_string()))
            .collect(),
        base_loss: bl,
        ablated_loss: al,
        mean_degradation: al - bl,
        per_token,
    })
}

/// Every `(layer, edge)` of the model.
pub fn all_edges(model: &GradedModel) -> Vec<(usize, usize)> {
    model
        .layers
        .iter()
        .enumerate()
        .flat_map(|(l, layer)| (0..layer.edges.len()).map(move |e| (l, e)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean `σ(ℓ̃)`.
    pub predicted: f64,
    /// Fraction with `ΔL > 0`.
    pub realized: f64,
}

/// Bins every token-edge pair by augmented logit; predicted usefulness is `σ(ℓ̃)`.
pub fn calibration(states: &[RoutingState], bins: usize) -> Result<Vec<CalibrationBin>> {
    let pairs: Vec<(f64, f64)> = states
        .iter()
        .flat_map(|st| st.augmented.data().iter().copied().zip(st.utilities.data().iter().copied()))
        .collect();
    let (lo, hi) = range(pairs.iter().map(|p| p.0));
    let hist = Histogram::new(&[], bins, lo, hi)?;
    let mut out: Vec<CalibrationBin> = (0..bins)
        .map(|i| {
            let (a, b) = hist.bin_edges(i);
            CalibrationBin {
                lo: a,
                hi: b,
                count: 0,
                predicted: 0.0,
                realized: 0.0,
            }
        })
        .collect();
    for &(l, dl) in &pairs {
        let b = &mut out[Histogram::bin_of(l, bins, lo, hi)];
        b.count += 1;
        b.predicted += sigmoid(l);
        b.realized += f64::from(u8::from(dl > 0.0));
    }
    for b in &mut out {
        if b.count > 0 {
            b.predicted /= b.count as f64;
            b.realized /= b.count as f64;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsBundle {
    pub tokens: usize,
    pub utilities: Vec<EdgeUtilities>,
    pub entropy: Vec<EntropySummary>,
    pub ablations: Vec<Ablation>,
    pub calibration: Vec<CalibrationBin>,
}

/// All four diagnostics on one batch, ablating each edge separately.
pub fn diagnose(model: &GradedModel, batch: &Batch, bins: usize) -> Result<DiagnosticsBundle> {
    let states = model.routing_states(batch)?;
    let ablations = all_edges(model)
        .into_iter()
        .map(|e| ablate(model, batch, &[e]))
        .collect::<Result<Vec<_>>>()?;
    Ok(DiagnosticsBundle {
        tokens: batch.len(),
        utilities: utility_histograms(model, &states, bins)?,
        entropy: routing_entropy(&states),
        ablations,
        calibration: calibration(&states, bins)?,
    })
}

impl DiagnosticsBundle {
    /// Writes `diagnostics.json` and one CSV per diagnostic into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("diagnostics.json"), serde_json::to_string_pretty(self)?)?;

        let mut w = fs::File::create(dir.join("utility_hist.csv"))?;
        writeln!(w, "layer,edge,bin_lo,bin_hi,count")?;
        for u in &self.utilities {
            for (i, c) in u.histogram.counts.iter().enumerate() {
                let (a, b) = u.histogram.bin_edges(i);
                writeln!(w, "{},{},{a},{b},{c}", u.layer, u.edge)?;
            }
        }

        let mut w = fs::File::create(dir.join("entropy.csv"))?;
        writeln!(w, "layer,entropy,support,max_entropy")?;
        for e in &self.entropy {
            writeln!(w, "{},{},{},{}", e.layer, e.entropy, e.support, e.max_entropy)?;
        }

        let mut w = fs::File::create(dir.join("ablation.csv"))?;
        writeln!(w, "layer,edge,base_loss,ablated_loss,mean_degradation")?;
        for a in &self.ablations {
            let (l, e) = &a.edges[0];
            writeln!(w, "{l},{e},{},{},{}", a.base_loss, a.ablated_loss, a.mean_degradation)?;
        }

        let mut w = fs::File::create(dir.join("calibration.csv"))?;
        writeln!(w, "bin_lo,bin_hi,count,predicted,realized")?;
        for b in &self.calibration {
            writeln!(w, "{},{},{},{},{}", b.lo, b.hi, b.count, b.predicted, b.realized)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graded::NormKind;
    use crate::model::tests::small_model;
    use crate::routing::GateKind;

    #[test]
    fn histogram_keeps_every_value() {
        let h = Histogram::new(&[-5.0, 0.0, 0.2, 0.99, 1.0, 7.0, f64::NAN], 4, 0.0, 1.0).unwrap();
        assert_eq!(h.total(), 7);
        assert_eq!(h.counts, vec![4, 0, 0, 3]);
    }

    #[test]
    fn bundle_conserves_counts() {
        let (m, b) = small_model(NormKind::LayerNorm, GateKind::SoftmaxGlobal);
        let d = diagnose(&m, &b, 5).unwrap();
        let hist_total: usize = d.utilities.iter().map(|u| u.histogram.total()).sum();
        assert_eq!(hist_total, b.len() * 3);
        assert_eq!(d.calibration.iter().map(|c| c.count).sum::<usize>(), b.len() * 3);
        assert_eq!(d.ablations.len(), 3);
    }

    #[test]
    fn zero_router_gives_uniform_entropy() {
        let (mut m, b) = small_model(NormKind::None, GateKind::SoftmaxGlobal);
        m.layers[0].routing.utility_in_logits = false;
        m.layers[0].router.w.iter_mut().for_each(|w| *w = w.scale(0.0));
        let e = &routing_entropy(&m.routing_states(&b).unwrap())[0];
        assert!((e.entropy - 3f64.ln()).abs() < 1e-12);
        assert_eq!(e.support, 3.0);
    }

    #[test]
    fn ablating_everything_leaves_the_residual_path() {
        let (m, b) = small_model(NormKind::None, GateKind::SoftmaxGlobal);
        let a = ablate(&m, &b, &all_edges(&m)).unwrap();
        let resid = m.readout.losses(&b.z0, &b.targets).unwrap();
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        assert!((a.ablated_loss - mean).abs() < 1e-12);
        assert!(ablate(&m, &b, &[(0, 9)]).is_err());
    }

    #[test]
    fn trend_sign() {
        assert!(trend(&[3.0, 2.0, 1.5, 1.0]) < 0.0);
        assert_eq!(trend(&[1.0]), 0.0);
    }
}

//! Width selection from learnt gates: histograms, the largest-gap threshold,
//! and pruning with weight compaction.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use crate::error::{Error, Result};
use crate::gates::{GateGranularity, GateParams};
use crate::network::{LayerKind, LayerParams, Network, NetworkSpec};
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 10;

/// Equal-width bins over `[0, 1]`; 1.0 lands in the last bin.
pub fn gate_histogram(k: &[f64], bins: usize) -> Vec<usize> {
    assert!(bins >= 2, "need at least two bins");
    let mut counts = vec![0; bins];
    for &v in k {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

/// Midpoint of the largest gap between consecutive sorted values, or 0 (keep
/// everything) when all values are equal. The first of several equal gaps wins.
pub fn select_threshold_by_gap(k: &[f64]) -> f64 {
    assert!(k.len() >= 2, "need at least two gate values");
    let mut sorted = k.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (0.0, 0.0);
    for w in sorted.windows(2) {
        let gap = w[1] - w[0];
        if gap > best.0 {
            best = (gap, 0.5 * (w[0] + w[1]));
        }
    }
    best.1
}

fn prunable(g: &GateParams) -> bool {
    matches!(g.granularity, GateGranularity::PerUnit | GateGranularity::PerChannel)
}

/// Gap thresholds for every prunable site of `net`.
pub fn auto_thresholds(net: &Network) -> Result<BTreeMap<String, f64>> {
    let map: BTreeMap<String, f64> = net
        .layer_gates
        .iter()
        .flatten()
        .filter(|g| prunable(g) && g.len() >= 2)
        .map(|g| (g.site.clone(), select_threshold_by_gap(&g.k)))
        .collect();
    if map.is_empty() {
        return Err(Error::Config("network has no prunable (per-unit or per-channel) gates".into()));
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPruneRow {
    pub name: String,
    pub original_width: usize,
    pub surviving_width: usize,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub architecture_before: String,
    pub architecture_after: String,
    pub layers: Vec<LayerPruneRow>,
    pub param_count_before: usize,
    pub param_count_after: usize,
    /// Gate histogram (before pruning) per gated site, [`HISTOGRAM_BINS`] bins.
    pub histograms: Vec<(String, Vec<usize>)>,
    /// Test error before/after, filled in by callers that have data.
    pub error_before: Option<f64>,
    pub error_after: Option<f64>,
}

fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl PruneReport {
    pub fn surviving_hidden_width(&self) -> usize {
        self.layers.iter().map(|l| l.surviving_width).sum()
    }

    /// Text table with Architecture / Error (%) / No. of Params columns,
    /// followed by per-layer widths.
    pub fn to_table(&self) -> String {
        let err = |e: Option<f64>| e.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:<20} {:>10} {:>14}", "Model", "Architecture", "Error (%)", "No. of Params");
        let _ = writeln!(
            s,
            "{:<10} {:<20} {:>10} {:>14}",
            "original",
            self.architecture_before,
            err(self.error_before),
            group_thousands(self.param_count_before)
        );
        let _ = writeln!(
            s,
            "{:<10} {:<20} {:>10} {:>14}",
            "pruned",
            self.architecture_after,
            err(self.error_after),
            group_thousands(self.param_count_after)
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<10} {:>8} {:>10} {:>10}", "layer", "original", "surviving", "threshold");
        for l in &self.layers {
            let t = l.threshold.map_or("-".to_string(), |t| format!("{t:.4}"));
            let _ = writeln!(
                s,
                "{:<10} {:>8} {:>10} {:>10}",
                l.name, l.original_width, l.surviving_width, t
            );
        }
        s
    }

    /// `layer,bin_lo,bin_hi,count` rows.
    pub fn write_histogram_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["layer", "bin_lo", "bin_hi", "count"])?;
        for (name, counts) in &self.histograms {
            let bins = counts.len() as f64;
            for (i, c) in counts.iter().enumerate() {
                w.write_record([
                    name.clone(),
                    (i as f64 / bins).to_string(),
                    ((i + 1) as f64 / bins).to_string(),
                    c.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<histogram csv>", e))?;
        Ok(())
    }
}

fn select_cols(w: &[f64], rows: usize, cols: usize, keep_rows: &[usize], keep_cols: &[usize]) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    let mut out = Vec::with_capacity(keep_rows.len() * keep_cols.len());
    for &r in keep_rows {
        let row = &w[r * cols..(r + 1) * cols];
        out.extend(keep_cols.iter().map(|&c| row[c]));
    }
    out
}

/// Input-side indices of layer `i` that survive, given the surviving output
/// units of layer `i − 1`.
fn surviving_inputs(net: &Network, i: usize, keep: &[Vec<usize>]) -> Vec<usize> {
    let plan = &net.plans()[i];
    if i == 0 {
        return match plan.kind {
            LayerKind::Conv5 => (0..plan.in_shape[0]).collect(),
            _ => (0..plan.in_shape[0]).collect(),
        };
    }
    let prev = &net.plans()[i - 1];
    match (prev.kind, plan.kind) {
        (LayerKind::Conv5, LayerKind::Conv5) => keep[i - 1].clone(),
        (LayerKind::Conv5, _) => {
            let spatial = prev.out_shape[1] * prev.out_shape[2];
            keep[i - 1]
                .iter()
                .flat_map(|&c| c * spatial..(c + 1) * spatial)
                .collect()
        }
        _ => keep[i - 1].clone(),
    }
}

/// Removes every unit/channel whose gate is below its layer's threshold.
///
/// Surviving weights and gates are copied verbatim. Layers missing from
/// `thresholds` are left alone. Only per-unit and per-channel gates can be pruned.
pub fn prune(net: &Network, thresholds: &BTreeMap<String, f64>) -> Result<(Network, PruneReport)> {
    let plans = net.plans();
    for site in thresholds.keys() {
        let gate = net
            .layer_gates
            .iter()
            .flatten()
            .find(|g| &g.site == site)
            .ok_or_else(|| Error::Config(format!("no prunable gated layer named `{site}`")))?;
        if !prunable(gate) {
            return Err(Error::Config(format!(
                "layer `{site}` has {:?} gates, which are not prunable units",
                gate.granularity
            )));
        }
    }

    let mut keep: Vec<Vec<usize>> = Vec::with_capacity(plans.len());
    let mut rows = Vec::new();
    for (plan, gate) in plans.iter().zip(&net.layer_gates) {
        let width = plan.out_shape[0];
        let threshold = gate.as_ref().and_then(|g| thresholds.get(&g.site).copied());
        let kept: Vec<usize> = match (gate, threshold) {
            (Some(g), Some(t)) => (0..width).filter(|&j| g.k[j] >= t).collect(),
            _ => (0..width).collect(),
        };
        if kept.is_empty() {
            return Err(Error::EmptyLayer {
                layer: plan.name.clone(),
            });
        }
        if plan.kind != LayerKind::DenseOutput {
            rows.push(LayerPruneRow {
                name: plan.name.clone(),
                original_width: width,
                surviving_width: kept.len(),
                threshold,
            });
        }
        keep.push(kept);
    }

    let mut spec: NetworkSpec = net.spec().clone();
    for (l, k) in spec.layers.iter_mut().zip(&keep) {
        l.width = k.len();
    }

    let mut layers = Vec::with_capacity(plans.len());
    for (i, (plan, params)) in plans.iter().zip(&net.layers).enumerate() {
        let ins = surviving_inputs(net, i, &keep);
        let outs = &keep[i];
        let weight = match plan.kind {
            LayerKind::Conv5 => {
                let [f, c, kh, kw] = [
                    plan.weight_shape[0],
                    plan.weight_shape[1],
                    plan.weight_shape[2],
                    plan.weight_shape[3],
                ];
                let kk = kh * kw;
                let src = params.weight.data();
                let mut data = Vec::with_capacity(outs.len() * ins.len() * kk);
                for &fo in outs {
                    for &ci in &ins {
                        let start = (fo * c + ci) * kk;
                        data.extend_from_slice(&src[start..start + kk]);
                    }
                }
                debug_assert!(outs.iter().all(|&o| o < f));
                Tensor::new(vec![outs.len(), ins.len(), kh, kw], data)?
            }
            LayerKind::Dense | LayerKind::DenseOutput => {
                let (d, o) = (plan.weight_shape[0], plan.weight_shape[1]);
                Tensor::new(
                    vec![ins.len(), outs.len()],
                    select_cols(params.weight.data(), d, o, &ins, outs),
                )?
            }
        };
        let bias = Tensor::new(
            vec![outs.len()],
            outs.iter().map(|&j| params.bias.data()[j]).collect(),
        )?;
        layers.push(LayerParams { weight, bias });
    }

    let new_plans = spec.plan()?;
    let layer_gates = net
        .layer_gates
        .iter()
        .zip(&keep)
        .zip(&new_plans)
        .map(|((g, kept), p)| {
            g.as_ref()
                .map(|g| {
                    let k = if prunable(g) {
                        kept.iter().map(|&j| g.k[j]).collect()
                    } else {
                        g.k.clone()
                    };
                    GateParams::with_values(g.site.clone(), g.granularity, &p.out_shape, k)
                })
                .transpose()
        })
        .collect::<Result<Vec<_>>>()?;

    let pruned = Network::from_parts(&spec, layers, net.input_gate.clone(), layer_gates)?;
    let report = PruneReport {
        architecture_before: net.spec().architecture(),
        architecture_after: spec.architecture(),
        layers: rows,
        param_count_before: net.param_count(),
        param_count_after: crate::network::param_count(&spec)?,
        histograms: net
            .layer_gates
            .iter()
            .flatten()
            .map(|g| (g.site.clone(), gate_histogram(&g.k, HISTOGRAM_BINS)))
            .collect(),
        error_before: None,
        error_after: None,
    };
    Ok((pruned, report))
}

/// Multiplies each foldable gate into the next layer's incoming weights and
/// resets it to 1. Per-activation gates feeding a conv layer cannot be folded
/// (kernels are shared across positions) and are left as they are.
pub fn fold_gates(net: &Network) -> Result<Network> {
    let mut out = net.clone();
    let plans = net.plans().to_vec();

    if let Some(g) = &net.input_gate {
        if plans[0].kind != LayerKind::Conv5 {
            scale_dense_rows(&mut out.layers[0].weight, &g.k, 1);
            reset(out.input_gate.as_mut());
        }
    }
    for i in 0..plans.len().saturating_sub(1) {
        let Some(g) = net.layer_gates[i].as_ref() else {
            continue;
        };
        let next = &plans[i + 1];
        match (g.granularity, next.kind) {
            (GateGranularity::PerUnit, _) => {
                scale_dense_rows(&mut out.layers[i + 1].weight, &g.k, 1);
            }
            (GateGranularity::PerChannel, LayerKind::Conv5) => {
                let [f, c, kh, kw] = [
                    next.weight_shape[0],
                    next.weight_shape[1],
                    next.weight_shape[2],
                    next.weight_shape[3],
                ];
                let w = out.layers[i + 1].weight.data_mut();
                for fo in 0..f {
                    for (ci, &k) in g.k.iter().enumerate().take(c) {
                        let s = (fo * c + ci) * kh * kw;
                        w[s..s + kh * kw].iter_mut().for_each(|v| *v *= k);
                    }
                }
            }
            (GateGranularity::PerChannel, _) => {
                let spatial = plans[i].out_shape[1] * plans[i].out_shape[2];
                scale_dense_rows(&mut out.layers[i + 1].weight, &g.k, spatial);
            }
            (GateGranularity::PerActivation, LayerKind::Conv5) => continue,
            (GateGranularity::PerActivation, _) => {
                scale_dense_rows(&mut out.layers[i + 1].weight, &g.k, 1);
            }
        }
        reset(out.layer_gates[i].as_mut());
    }
    Ok(out)
}

fn scale_dense_rows(weight: &mut Tensor, k: &[f64], rows_per_gate: usize) {
    let cols = weight.shape()[1];
    let w = weight.data_mut();
    for (j, &kj) in k.iter().enumerate() {
        let kj = kj.clamp(0.0, 1.0);
        let start = j * rows_per_gate * cols;
        w[start..start + rows_per_gate * cols]
            .iter_mut()
            .for_each(|v| *v *= kj);
    }
}

fn reset(g: Option<&mut GateParams>) {
    if let Some(g) = g {
        g.k.iter_mut().for_each(|k| *k = 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerSpec;

    #[test]
    fn histogram_examples() {
        assert_eq!(gate_histogram(&[0.0, 1.0], 2), vec![1, 1]);
        let h = gate_histogram(&[0.05, 0.07, 0.96], 10);
        assert_eq!(h[0], 2);
        assert_eq!(h[9], 1);
        assert_eq!(h.iter().sum::<usize>(), 3);
    }

    #[test]
    fn gap_threshold_examples() {
        assert!((select_threshold_by_gap(&[0.01, 0.03, 0.95, 0.97]) - 0.49).abs() < 1e-12);
        assert_eq!(select_threshold_by_gap(&[0.5, 0.5, 0.5]), 0.0);
        let mut k: Vec<f64> = (0..30).map(|i| 0.1 * i as f64 / 29.0).collect();
        k.extend((0..10).map(|i| 0.9 + 0.1 * i as f64 / 9.0));
        let t = select_threshold_by_gap(&k);
        assert!(t > 0.1 && t < 0.9);
        assert_eq!(k.iter().filter(|&&v| v >= t).count(), 10);
    }

    fn small_lenet() -> Network {
        let spec = NetworkSpec {
            input: crate::network::InputShape::Image {
                channels: 1,
                height: 16,
                width: 16,
            },
            input_gate: None,
            layers: vec![
                LayerSpec::conv5(4).gated(GateGranularity::PerChannel, 1.0),
                LayerSpec::dense(6).gated(GateGranularity::PerUnit, 1.0),
                LayerSpec::output(3),
            ],
        };
        Network::build(&spec, 8).unwrap()
    }

    #[test]
    fn per_unit_threshold() {
        let spec = NetworkSpec::mlp(4, &[3], 2).gate_hidden(GateGranularity::PerUnit, 1.0);
        let mut net = Network::build(&spec, 0).unwrap();
        net.gate_mut("fc1").unwrap().k = vec![0.9, 0.02, 0.6];
        let (p, r) = prune(&net, &BTreeMap::from([("fc1".to_string(), 0.5)])).unwrap();
        assert_eq!(r.layers[0].surviving_width, 2);
        assert_eq!(p.gate("fc1").unwrap().k, vec![0.9, 0.6]);
        assert_eq!(r.param_count_after, crate::network::param_count(p.spec()).unwrap());
        assert_eq!(r.param_count_after, 4 * 2 + 2 + 2 * 2 + 2);
    }

    #[test]
    fn refuses_empty_layer_and_unprunable_gates() {
        let net = small_lenet();
        assert!(matches!(
            prune(&net, &BTreeMap::from([("fc1".to_string(), 2.0)])),
            Err(Error::EmptyLayer { layer }) if layer == "fc1"
        ));
        let mut spec = net.spec().clone();
        spec.layers[0].gate = Some(crate::network::GateSpec {
            granularity: GateGranularity::PerActivation,
            init: 1.0,
        });
        let net = Network::build(&spec, 1).unwrap();
        assert!(prune(&net, &BTreeMap::from([("conv1".to_string(), 0.5)])).is_err());
    }

    #[test]
    fn zero_gate_pruning_is_exact_across_conv_to_dense() {
        let mut net = small_lenet();
        net.gate_mut("conv1").unwrap().k[2] = 0.0;
        net.gate_mut("fc1").unwrap().k[0] = 0.0;
        net.gate_mut("fc1").unwrap().k[4] = 0.0;
        let th = BTreeMap::from([("conv1".to_string(), 0.5), ("fc1".to_string(), 0.5)]);
        let (pruned, report) = prune(&net, &th).unwrap();
        assert_eq!(pruned.spec().architecture(), "3-4-3");
        assert_eq!(report.architecture_before, "4-6-3");
        let x = Tensor::new(
            vec![5, 1, 16, 16],
            (0..5 * 256).map(|i| ((i * 37 % 101) as f64) / 101.0).collect(),
        )
        .unwrap();
        assert_eq!(net.predict(&x).unwrap(), pruned.predict(&x).unwrap());
    }

    #[test]
    fn folding_preserves_eval_outputs() {
        let mut net = small_lenet();
        net.gate_mut("conv1").unwrap().k = vec![0.3, 1.0, 0.7, 0.1];
        net.gate_mut("fc1").unwrap().k = vec![0.5, 0.9, 0.2, 1.0, 0.4, 0.6];
        let folded = fold_gates(&net).unwrap();
        assert!(folded.gate_sites().iter().all(|g| g.k.iter().all(|&k| k == 1.0)));
        let x = Tensor::new(
            vec![3, 1, 16, 16],
            (0..3 * 256).map(|i| ((i * 13 % 29) as f64) / 29.0).collect(),
        )
        .unwrap();
        let d = net.predict(&x).unwrap().max_abs_diff(&folded.predict(&x).unwrap());
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn report_table_shape() {
        let mut net = small_lenet();
        net.gate_mut("conv1").unwrap().k[1] = 0.0;
        let (_, r) = prune(&net, &BTreeMap::from([("conv1".to_string(), 0.5)])).unwrap();
        let t = r.to_table();
        assert!(t.contains("Architecture"));
        assert!(t.contains("No. of Params"));
        assert!(t.contains("3-6-3"));
        let mut buf = Vec::new();
        r.write_histogram_csv(&mut buf).unwrap();
        let csv = String::from_utf8(buf).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * HISTOGRAM_BINS);
        assert_eq!(group_thousands(29886), "29,886");
        assert_eq!(group_thousands(431080), "431,080");
        assert_eq!(group_thousands(999), "999");
    }
}

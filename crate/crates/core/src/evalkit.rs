//! Evaluation metrics (overall/mean accuracy, average recall @N and @1%) and
//! the analytic cost model comparing the full-precision and binary twins.

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::model::{HeadConfig, ModelConfig};

// --- Retrieval metrics -------------------------------------------------------

/// One database or query entry: id, 2-D pose, descriptor.
#[derive(Debug, Clone)]
pub struct DescriptorEntry {
    pub id: usize,
    pub pose: [f64; 2],
    pub descriptor: Array1<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct DescriptorDb {
    pub entries: Vec<DescriptorEntry>,
}

impl DescriptorDb {
    pub fn push(&mut self, id: usize, pose: [f64; 2], descriptor: Array1<f64>) {
        self.entries.push(DescriptorEntry { id, pose, descriptor });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn pose_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn desc_dist2(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Average recall @n: the fraction of queries whose top-n nearest descriptors
/// contain at least one database entry within `positive_radius` of the query
/// pose. Queries with no ground-truth positive are excluded.
pub fn recall_at_n(
    db: &DescriptorDb,
    queries: &DescriptorDb,
    n: usize,
    positive_radius: f64,
) -> Result<f64> {
    if db.is_empty() {
        return Err(Error::Data("empty descriptor database".into()));
    }
    if n == 0 {
        return Err(Error::Contract("recall@n requires n ≥ 1".into()));
    }
    let mut eligible = 0usize;
    let mut hits = 0usize;
    for q in &queries.entries {
        let has_positive =
            db.entries.iter().any(|e| pose_dist(e.pose, q.pose) <= positive_radius);
        if !has_positive {
            continue;
        }
        eligible += 1;
        let mut order: Vec<usize> = (0..db.len()).collect();
        order.sort_by(|&a, &b| {
            desc_dist2(&db.entries[a].descriptor, &q.descriptor)
                .partial_cmp(&desc_dist2(&db.entries[b].descriptor, &q.descriptor))
                .expect("finite distances")
                .then(a.cmp(&b))
        });
        let hit = order
            .iter()
            .take(n)
            .any(|&i| pose_dist(db.entries[i].pose, q.pose) <= positive_radius);
        if hit {
            hits += 1;
        }
    }
    if eligible == 0 {
        return Err(Error::Data("no query has a ground-truth positive".into()));
    }
    Ok(hits as f64 / eligible as f64)
}

/// n for recall@1%: 1% of the database size, round-half-up, minimum 1.
pub fn one_percent_n(db_len: usize) -> usize {
    (((db_len as f64) * 0.01) + 0.5).floor().max(1.0) as usize
}

/// Average recall @1% of the database size.
pub fn recall_at_1percent(
    db: &DescriptorDb,
    queries: &DescriptorDb,
    positive_radius: f64,
) -> Result<f64> {
    recall_at_n(db, queries, one_percent_n(db.len()), positive_radius)
}

// --- Classification metrics --------------------------------------------------

/// Overall accuracy and unweighted mean of per-class accuracies (over classes
/// present in the labels).
pub fn classification_metrics(predictions: &[usize], labels: &[usize]) -> Result<(f64, f64)> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::Data("predictions and labels must be non-empty and aligned".into()));
    }
    let correct = predictions.iter().zip(labels.iter()).filter(|(p, l)| p == l).count();
    let oa = correct as f64 / labels.len() as f64;
    let max_class = *labels.iter().max().expect("non-empty");
    let mut per_total = vec![0usize; max_class + 1];
    let mut per_correct = vec![0usize; max_class + 1];
    for (&p, &l) in predictions.iter().zip(labels.iter()) {
        per_total[l] += 1;
        if p == l {
            per_correct[l] += 1;
        }
    }
    let mut acc_sum = 0.0;
    let mut present = 0usize;
    for c in 0..=max_class {
        if per_total[c] > 0 {
            acc_sum += per_correct[c] as f64 / per_total[c] as f64;
            present += 1;
        }
    }
    Ok((oa, acc_sum / present as f64))
}

// --- Cost model ---------------------------------------------------------------

/// Default lane-op convention: one 64-bit lane instruction covers 64 bit-ops.
pub const DEFAULT_BOPS_DIVISOR: u64 = 64;

/// Per-layer cost row. `flops_fp` is the full-precision twin; the binary twin
/// replaces binarized matrix products by `bops` counted as `bops / divisor`
/// effective FLOPs and stores 1 bit per weight plus per-row scales.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub binary: bool,
    pub params: u64,
    pub bytes_fp: u64,
    pub bytes_bin: u64,
    pub flops_fp: u64,
    pub bops: u64,
    pub eff_flops_bin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub rows: Vec<LayerCost>,
    pub bops_divisor: u64,
    pub total_params: u64,
    pub total_binary_params: u64,
    pub total_bytes_fp: u64,
    pub total_bytes_bin: u64,
    pub total_flops_fp: u64,
    pub total_bops: u64,
    pub total_eff_flops_bin: f64,
    pub size_reduction_pct: f64,
    pub flops_reduction_pct: f64,
}

struct CostBuilder {
    rows: Vec<LayerCost>,
    divisor: u64,
}

impl CostBuilder {
    /// Matrix product of `m×k` by `k×n` over `rows_in_flight` independent rows
    /// is already folded into m; weights: `params` values with `scale_rows`
    /// α entries when binarized.
    fn linear(
        &mut self,
        name: &str,
        rows: u64,
        in_w: u64,
        out_w: u64,
        binary: bool,
        bias: bool,
    ) {
        let params = in_w * out_w + if bias { out_w } else { 0 };
        let mut flops = 2 * rows * in_w * out_w;
        if bias {
            flops += rows * out_w;
        }
        let (bytes_bin, bops, eff) = if binary {
            // 1 bit per weight + one 32-bit α per output row
            let bytes_bin = (in_w * out_w).div_ceil(8) + 4 * out_w;
            let bops = 2 * rows * in_w * out_w;
            (bytes_bin, bops, bops as f64 / self.divisor as f64)
        } else {
            (4 * params, 0, flops as f64)
        };
        self.rows.push(LayerCost {
            name: name.to_string(),
            binary,
            params,
            bytes_fp: 4 * params,
            bytes_bin,
            flops_fp: flops,
            bops,
            eff_flops_bin: eff,
        });
    }

    /// Activation × activation product (no parameters).
    fn matmul(&mut self, name: &str, m: u64, k: u64, n: u64, binary: bool) {
        let flops = 2 * m * k * n;
        let (bops, eff) =
            if binary { (flops, flops as f64 / self.divisor as f64) } else { (0, flops as f64) };
        self.rows.push(LayerCost {
            name: name.to_string(),
            binary,
            params: 0,
            bytes_fp: 0,
            bytes_bin: 0,
            flops_fp: flops,
            bops,
            eff_flops_bin: eff,
        });
    }

    /// Batch norm: 2 learnable + 2 running values per feature; identical work
    /// in both twins.
    fn batchnorm(&mut self, name: &str, rows: u64, width: u64) {
        let params = 2 * width;
        let stored = 4 * width; // γ, β + running mean/var
        let flops = 2 * rows * width;
        self.rows.push(LayerCost {
            name: format!("{name}.bn"),
            binary: false,
            params,
            bytes_fp: 4 * stored,
            bytes_bin: 4 * stored,
            flops_fp: flops,
            bops: 0,
            eff_flops_bin: flops as f64,
        });
    }

    /// Parameter-free elementwise / reduction work identical in both twins.
    fn elementwise(&mut self, name: &str, flops: u64) {
        self.rows.push(LayerCost {
            name: name.to_string(),
            binary: false,
            params: 0,
            bytes_fp: 0,
            bytes_bin: 0,
            flops_fp: flops,
            bops: 0,
            eff_flops_bin: flops as f64,
        });
    }
}

/// Analytic per-layer cost of one forward pass at `config.n_points`, for both
/// twins of the same architecture. Binary rows cover exactly the transformer
/// module; sampling/grouping index work is excluded (identical across twins).
pub fn cost_report(config: &ModelConfig, bops_divisor: u64) -> Result<CostReport> {
    config.validate()?;
    let mut b = CostBuilder { rows: Vec::new(), divisor: bops_divisor };
    let n0 = config.n_points as u64;

    let mut width = 3u64;
    let mut rows = n0;
    for (i, &w) in config.neighbor.point_mlp.iter().enumerate() {
        let name = format!("ne.point{i}");
        b.linear(&name, rows, width, w as u64, false, false);
        b.batchnorm(&name, rows, w as u64);
        b.elementwise(&format!("{name}.relu"), rows * w as u64);
        width = w as u64;
    }
    for (si, stage) in config.neighbor.stages.iter().enumerate() {
        let m = stage.centers as u64;
        let k = stage.k as u64;
        let grouped = m * k;
        let mut in_w = 2 * width;
        for li in 0..stage.mlp_layers.max(1) {
            let name = format!("ne.stage{si}.mlp{li}");
            b.linear(&name, grouped, in_w, stage.width as u64, false, false);
            b.batchnorm(&name, grouped, stage.width as u64);
            b.elementwise(&format!("{name}.relu"), grouped * stage.width as u64);
            in_w = stage.width as u64;
        }
        b.elementwise(&format!("ne.stage{si}.maxpool"), grouped * stage.width as u64);
        width = stage.width as u64;
        rows = m;
    }

    let m = rows; // transformer sequence length
    let d = config.d_model as u64;
    let qk = config.qk_width as u64;
    let mut in_w = width;
    for i in 0..2 {
        let name = format!("tf.input{i}");
        b.linear(&name, m, in_w, d, true, false);
        b.batchnorm(&name, m, d);
        b.elementwise(&format!("{name}.relu"), m * d);
        in_w = d;
    }
    for bi in 0..config.n_blocks {
        let name = format!("tf.block{bi}");
        b.linear(&format!("{name}.wq"), m, d, qk, true, false);
        b.linear(&format!("{name}.wk"), m, d, qk, true, false);
        b.linear(&format!("{name}.wv"), m, d, d, true, false);
        b.matmul(&format!("{name}.energy"), m, qk, m, true);
        b.elementwise(&format!("{name}.softmax"), 5 * m * m);
        b.elementwise(&format!("{name}.l1norm"), 2 * m * m);
        b.matmul(&format!("{name}.attn_v"), m, m, d, true);
        b.linear(&format!("{name}.offset"), m, d, d, true, false);
        b.batchnorm(&format!("{name}.offset"), m, d);
        b.elementwise(&format!("{name}.offset.relu"), m * d);
        b.elementwise(&format!("{name}.residual"), 2 * m * d);
    }
    let cat = config.concat_width() as u64;
    let out_w = config.output_width as u64;
    b.linear("tf.out", m, cat, out_w, true, false);
    b.batchnorm("tf.out", m, out_w);
    b.elementwise("tf.out.relu", m * out_w);

    match &config.head {
        HeadConfig::Descriptor { dim } => {
            b.elementwise("head.maxpool", m * out_w);
            b.elementwise("head.l2norm", 3 * *dim as u64);
        }
        HeadConfig::Classifier { num_classes, hidden } => {
            b.elementwise("head.pool", 2 * m * out_w);
            let mut in_w = 2 * out_w;
            for (i, &w) in hidden.iter().enumerate() {
                let name = format!("head.mlp{i}");
                b.linear(&name, 1, in_w, w as u64, false, false);
                b.elementwise(&format!("{name}.relu"), w as u64);
                in_w = w as u64;
            }
            b.linear("head.final", 1, in_w, *num_classes as u64, false, true);
        }
    }

    let rows = b.rows;
    let total_params: u64 = rows.iter().map(|r| r.params).sum();
    let total_binary_params: u64 =
        rows.iter().filter(|r| r.binary).map(|r| r.params).sum();
    let total_bytes_fp: u64 = rows.iter().map(|r| r.bytes_fp).sum();
    let total_bytes_bin: u64 = rows.iter().map(|r| r.bytes_bin).sum();
    let total_flops_fp: u64 = rows.iter().map(|r| r.flops_fp).sum();
    let total_bops: u64 = rows.iter().map(|r| r.bops).sum();
    let total_eff_flops_bin: f64 = rows.iter().map(|r| r.eff_flops_bin).sum();
    Ok(CostReport {
        rows,
        bops_divisor,
        total_params,
        total_binary_params,
        total_bytes_fp,
        total_bytes_bin,
        total_flops_fp,
        total_bops,
        total_eff_flops_bin,
        size_reduction_pct: 100.0 * (1.0 - total_bytes_bin as f64 / total_bytes_fp as f64),
        flops_reduction_pct: 100.0
            * (1.0 - total_eff_flops_bin / total_flops_fp as f64),
    })
}

impl CostReport {
    /// Aligned text table for human consumption.
    pub fn text_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<24} {:>3} {:>12} {:>12} {:>12} {:>14} {:>14} {:>14}\n",
            "layer", "bin", "params", "bytes_fp", "bytes_bin", "flops_fp", "bops", "eff_flops_bin"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<24} {:>3} {:>12} {:>12} {:>12} {:>14} {:>14} {:>14.1}\n",
                r.name,
                if r.binary { "yes" } else { "no" },
                r.params,
                r.bytes_fp,
                r.bytes_bin,
                r.flops_fp,
                r.bops,
                r.eff_flops_bin
            ));
        }
        s.push_str(&format!(
            "{:<24} {:>3} {:>12} {:>12} {:>12} {:>14} {:>14} {:>14.1}\n",
            "TOTAL",
            "",
            self.total_params,
            self.total_bytes_fp,
            self.total_bytes_bin,
            self.total_flops_fp,
            self.total_bops,
            self.total_eff_flops_bin
        ));
        s.push_str(&format!(
            "size reduction: {:.1}%   flops reduction: {:.1}%   (bops divisor {})\n",
            self.size_reduction_pct, self.flops_reduction_pct, self.bops_divisor
        ));
        s
    }

    /// Flat key=value document for machine consumption.
    pub fn kv_doc(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("bops_divisor={}\n", self.bops_divisor));
        s.push_str(&format!("total_params={}\n", self.total_params));
        s.push_str(&format!("total_binary_params={}\n", self.total_binary_params));
        s.push_str(&format!("total_bytes_fp={}\n", self.total_bytes_fp));
        s.push_str(&format!("total_bytes_bin={}\n", self.total_bytes_bin));
        s.push_str(&format!("total_flops_fp={}\n", self.total_flops_fp));
        s.push_str(&format!("total_bops={}\n", self.total_bops));
        s.push_str(&format!("total_eff_flops_bin={}\n", self.total_eff_flops_bin));
        s.push_str(&format!("size_reduction_pct={}\n", self.size_reduction_pct));
        s.push_str(&format!("flops_reduction_pct={}\n", self.flops_reduction_pct));
        for (i, r) in self.rows.iter().enumerate() {
            s.push_str(&format!(
                "layer.{i}={}|binary={}|params={}|bytes_fp={}|bytes_bin={}|flops_fp={}|bops={}|eff_flops_bin={}\n",
                r.name, r.binary, r.params, r.bytes_fp, r.bytes_bin, r.flops_fp, r.bops, r.eff_flops_bin
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_desc(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
        Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn recall_identical_query_hits_at_1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut db = DescriptorDb::default();
        for i in 0..20 {
            db.push(i, [i as f64 * 10.0, 0.0], random_desc(&mut rng, 8));
        }
        let mut q = DescriptorDb::default();
        q.push(100, db.entries[7].pose, db.entries[7].descriptor.clone());
        assert_eq!(recall_at_n(&db, &q, 1, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn recall_monte_carlo_matches_closed_form() {
        // one positive among D random entries, random query → P(hit@1) = 1/D
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d_entries = 10;
        let trials = 4000;
        let mut hits = 0.0;
        for _ in 0..trials {
            let mut db = DescriptorDb::default();
            for i in 0..d_entries {
                // entry 0 is the sole pose-positive
                let pose = if i == 0 { [0.0, 0.0] } else { [100.0 + i as f64, 0.0] };
                db.push(i, pose, random_desc(&mut rng, 6));
            }
            let mut q = DescriptorDb::default();
            q.push(99, [0.0, 0.0], random_desc(&mut rng, 6));
            hits += recall_at_n(&db, &q, 1, 1.0).unwrap();
        }
        let p = 1.0 / d_entries as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        let got = hits / trials as f64;
        assert!(
            (got - p).abs() < 3.0 * sigma,
            "got {got}, want {p} ± {}",
            3.0 * sigma
        );
    }

    #[test]
    fn recall_matches_exhaustive_oracle_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let nd = rng.random_range(5..40);
            let mut db = DescriptorDb::default();
            for i in 0..nd {
                db.push(i, [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)],
                    random_desc(&mut rng, 4));
            }
            let mut queries = DescriptorDb::default();
            for i in 0..10 {
                queries.push(1000 + i, [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)],
                    random_desc(&mut rng, 4));
            }
            let radius = 3.0;
            let mut prev = 0.0;
            for n in 1..=nd {
                match recall_at_n(&db, &queries, n, radius) {
                    Ok(r) => {
                        assert!(r >= prev, "recall not monotone in n");
                        prev = r;
                    }
                    Err(_) => break, // no eligible queries in this draw
                }
            }
        }
    }

    #[test]
    fn one_percent_rounding() {
        assert_eq!(one_percent_n(50), 1); // floor to minimum
        assert_eq!(one_percent_n(250), 3); // round(2.5) = 3 under half-up
        assert_eq!(one_percent_n(249), 2);
        assert_eq!(one_percent_n(1000), 10);
    }

    #[test]
    fn classification_metric_cases() {
        let (oa, macc) = classification_metrics(&[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!((oa, macc), (1.0, 1.0));

        // class A 10/10, class B 0/10 → OA 0.5, mAcc 0.5
        let mut preds = vec![0usize; 10];
        preds.extend(vec![0usize; 10]);
        let mut labels = vec![0usize; 10];
        labels.extend(vec![1usize; 10]);
        let (oa, macc) = classification_metrics(&preds, &labels).unwrap();
        assert_eq!((oa, macc), (0.5, 0.5));

        // imbalanced: A 90/90, B 0/10 → OA 0.9, mAcc 0.5
        let mut preds = vec![0usize; 90];
        preds.extend(vec![0usize; 10]);
        let mut labels = vec![0usize; 90];
        labels.extend(vec![1usize; 10]);
        let (oa, macc) = classification_metrics(&preds, &labels).unwrap();
        assert!((oa - 0.9).abs() < 1e-12);
        assert_eq!(macc, 0.5);
    }

    #[test]
    fn cost_single_dense_layer_arithmetic() {
        // 256×256 layer: 65,536 params; 262,144 bytes fp; 8,192 + 1,024 bytes binary
        let mut b = CostBuilder { rows: Vec::new(), divisor: 64 };
        b.linear("solo", 1, 256, 256, true, false);
        let r = &b.rows[0];
        assert_eq!(r.params, 65_536);
        assert_eq!(r.bytes_fp, 262_144);
        assert_eq!(r.bytes_bin, 8_192 + 256 * 4);
    }

    #[test]
    fn cost_totals_match_model_params() {
        for cfg in [
            ModelConfig::desk_classifier(4),
            ModelConfig::desk_descriptor(),
            ModelConfig::reference_classification(40),
        ] {
            let report = cost_report(&cfg, DEFAULT_BOPS_DIVISOR).unwrap();
            let model = crate::model::BptModel::init(cfg, 0).unwrap();
            assert_eq!(report.total_params as usize, model.num_params());
        }
    }

    #[test]
    fn zero_binary_layers_means_zero_reduction() {
        let report = cost_report(&ModelConfig::desk_classifier(4), 64).unwrap();
        let fp_only: Vec<_> = report.rows.iter().filter(|r| !r.binary).collect();
        for r in fp_only {
            assert_eq!(r.bytes_fp, r.bytes_bin);
            assert_eq!(r.eff_flops_bin, r.flops_fp as f64);
        }
    }

    #[test]
    fn reference_architecture_hits_reported_reductions() {
        let report =
            cost_report(&ModelConfig::reference_classification(40), DEFAULT_BOPS_DIVISOR)
                .unwrap();
        assert!(
            (report.size_reduction_pct - 56.1).abs() <= 5.0,
            "size reduction {:.2}%",
            report.size_reduction_pct
        );
        assert!(
            (report.flops_reduction_pct - 34.1).abs() <= 5.0,
            "flops reduction {:.2}%",
            report.flops_reduction_pct
        );
    }
}

//! Command implementations with distinct exit codes per failure class:
//! 0 ok, 2 configuration, 3 data, 4 checkpoint, 5 selftest failure.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use bpt_core::autodiff::Graph;
use bpt_core::checkpoint;
use bpt_core::evalkit::{
    classification_metrics, cost_report, one_percent_n, recall_at_1percent, recall_at_n,
    DescriptorDb,
};
use bpt_core::learning::{
    self, lazy_quadruplet_loss, lazy_quadruplet_loss_graph, train_classification,
    train_place_recognition, ClassificationSet, PlaceSet, Task, TrainLog,
};
use bpt_core::model::{BptModel, FrozenModel, HeadConfig, Mode, ModelConfig, Twin};
use bpt_core::pointops::{farthest_point_sampling, knn_group, PointCloud};

use crate::config::RunConfig;
use crate::data::{load_classification, load_places};
use crate::synth::{gen_synthetic_classification, gen_synthetic_places};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_SELFTEST: i32 = 5;

#[derive(Debug)]
pub struct CmdError {
    pub code: i32,
    pub source: anyhow::Error,
}

impl CmdError {
    fn config(e: impl Into<anyhow::Error>) -> Self {
        CmdError { code: EXIT_CONFIG, source: e.into() }
    }

    fn data(e: impl Into<anyhow::Error>) -> Self {
        CmdError { code: EXIT_DATA, source: e.into() }
    }

    fn checkpoint(e: impl Into<anyhow::Error>) -> Self {
        CmdError { code: EXIT_CHECKPOINT, source: e.into() }
    }
}

pub type CmdResult<T> = Result<T, CmdError>;

/// Flags shared by every command; flags win over config-file values.
#[derive(Debug, Clone, Default)]
pub struct CommonArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub twin: Option<String>,
}

impl CommonArgs {
    fn run_config(&self) -> CmdResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_path(p).map_err(CmdError::config)?,
            None => RunConfig::default(),
        };
        if let Some(t) = &self.twin {
            cfg.model.twin = t.clone();
        }
        if let Some(p) = &self.data {
            cfg.dataset.kind = "manifest".into();
            cfg.dataset.path = Some(p.display().to_string());
        }
        Ok(cfg)
    }

    fn seed(&self, cfg: &RunConfig) -> u64 {
        self.seed.unwrap_or(cfg.model.seed)
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    fn require_checkpoint(&self) -> CmdResult<PathBuf> {
        self.checkpoint
            .clone()
            .ok_or_else(|| CmdError::config(anyhow!("--checkpoint is required")))
    }
}

fn classification_data(cfg: &RunConfig, seed: u64) -> CmdResult<(ClassificationSet, ClassificationSet)> {
    match cfg.dataset.kind.as_str() {
        "manifest" => {
            let path = cfg
                .dataset
                .path
                .as_ref()
                .ok_or_else(|| CmdError::config(anyhow!("dataset.path missing")))?;
            let loaded =
                load_classification(Path::new(path), seed).map_err(CmdError::data)?;
            Ok((loaded.train, loaded.test))
        }
        "" | "synthetic-classification" => {
            let d = gen_synthetic_classification(
                cfg.dataset.n_classes,
                cfg.dataset.train_per_class,
                cfg.dataset.test_per_class,
                cfg.dataset.points_per_cloud,
                seed,
            );
            Ok((d.train, d.test))
        }
        other => Err(CmdError::config(anyhow!(
            "dataset.kind {other:?} is not a classification source"
        ))),
    }
}

fn places_data(cfg: &RunConfig, seed: u64) -> CmdResult<(PlaceSet, Vec<String>)> {
    match cfg.dataset.kind.as_str() {
        "manifest" => {
            let path = cfg
                .dataset
                .path
                .as_ref()
                .ok_or_else(|| CmdError::config(anyhow!("dataset.path missing")))?;
            let loaded = load_places(Path::new(path), seed).map_err(CmdError::data)?;
            Ok((loaded.set, loaded.splits))
        }
        "" | "synthetic-places" => {
            let d = gen_synthetic_places(&cfg.dataset.places_params(), seed);
            Ok((d.set, d.splits))
        }
        other => {
            Err(CmdError::config(anyhow!("dataset.kind {other:?} is not a place source")))
        }
    }
}

fn write_out(dir: &Path, name: &str, bytes: &[u8]) -> CmdResult<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CmdError::data(anyhow!("creating {dir:?}: {e}")))?;
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CmdError::data(anyhow!("writing {path:?}: {e}")))?;
    Ok(path)
}

fn log_jsonl(log: &TrainLog) -> String {
    let mut s = String::new();
    for r in &log.records {
        s.push_str(&format!(
            "{{\"epoch\":{},\"step\":{},\"loss\":{},\"lr\":{},\"wall_ms\":{}}}\n",
            r.epoch,
            r.step,
            serde_json::Number::from_f64(r.loss).expect("finite loss"),
            serde_json::Number::from_f64(r.lr).expect("finite lr"),
            r.wall_ms
        ));
    }
    s
}

fn print_epoch_summaries(log: &TrainLog) {
    let mut by_epoch: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for r in &log.records {
        let e = by_epoch.entry(r.epoch).or_insert((0.0, 0));
        e.0 += r.loss;
        e.1 += 1;
    }
    for (epoch, (sum, n)) in by_epoch {
        println!("epoch {epoch}: mean loss {:.5}", sum / n as f64);
    }
}

pub fn train_cls(args: &CommonArgs) -> CmdResult<()> {
    let cfg = args.run_config()?;
    let seed = args.seed(&cfg);
    let (train, _test) = classification_data(&cfg, seed)?;
    let model_cfg = cfg.model_config("desk-classifier").map_err(CmdError::config)?;
    let mut n_classes_cfg = train.num_classes;
    if let HeadConfig::Classifier { num_classes, .. } = &model_cfg.head {
        n_classes_cfg = *num_classes;
    }
    if n_classes_cfg != train.num_classes {
        return Err(CmdError::config(anyhow!(
            "model head has {n_classes_cfg} classes, dataset has {}",
            train.num_classes
        )));
    }
    let train_cfg =
        cfg.train_config(Task::Classification, seed).map_err(CmdError::config)?;
    let mut model = BptModel::init(model_cfg, seed).map_err(CmdError::config)?;
    println!(
        "training classifier: {} clouds, {} epochs, twin {:?}",
        train.clouds.len(),
        train_cfg.epochs,
        model.config.twin
    );
    let log = train_classification(&mut model, &train, &train_cfg)
        .map_err(|e| CmdError::data(anyhow!(e)))?;
    print_epoch_summaries(&log);
    let out = args.out_dir();
    let ck_path = write_out(&out, "model.bptc", &checkpoint::save_training(&model))?;
    write_out(&out, "train_log.jsonl", log_jsonl(&log).as_bytes())?;
    println!("checkpoint written to {}", ck_path.display());
    Ok(())
}

pub fn train_pr(args: &CommonArgs) -> CmdResult<()> {
    let cfg = args.run_config()?;
    let seed = args.seed(&cfg);
    let (set, splits) = places_data(&cfg, seed)?;
    // train on database clouds only, keeping queries unseen
    let mut train_set = PlaceSet {
        clouds: vec![],
        poses: vec![],
        pos_threshold: set.pos_threshold,
        neg_threshold: set.neg_threshold,
    };
    for (i, split) in splits.iter().enumerate() {
        if split != "query" {
            train_set.clouds.push(set.clouds[i].clone());
            train_set.poses.push(set.poses[i]);
        }
    }
    let model_cfg = cfg.model_config("desk-descriptor").map_err(CmdError::config)?;
    let train_cfg =
        cfg.train_config(Task::PlaceRecognition, seed).map_err(CmdError::config)?;
    let mut model = BptModel::init(model_cfg, seed).map_err(CmdError::config)?;
    println!(
        "training descriptor: {} clouds, {} epochs, twin {:?}",
        train_set.clouds.len(),
        train_cfg.epochs,
        model.config.twin
    );
    let log = train_place_recognition(&mut model, &train_set, &train_cfg)
        .map_err(|e| CmdError::data(anyhow!(e)))?;
    print_epoch_summaries(&log);
    let out = args.out_dir();
    let ck_path = write_out(&out, "model.bptc", &checkpoint::save_training(&model))?;
    write_out(&out, "train_log.jsonl", log_jsonl(&log).as_bytes())?;
    println!("checkpoint written to {}", ck_path.display());
    Ok(())
}

fn load_frozen(path: &Path) -> CmdResult<FrozenModel> {
    let bytes = fs::read(path)
        .map_err(|e| CmdError::checkpoint(anyhow!("reading {}: {e}", path.display())))?;
    let ck = checkpoint::load(&bytes).map_err(|e| CmdError::checkpoint(anyhow!(e)))?;
    FrozenModel::from_checkpoint(&ck).map_err(|e| CmdError::checkpoint(anyhow!(e)))
}

pub fn eval_cls(args: &CommonArgs) -> CmdResult<()> {
    let cfg = args.run_config()?;
    let seed = args.seed(&cfg);
    let ck_path = args.require_checkpoint()?;
    let frozen = load_frozen(&ck_path)?;
    let (_train, test) = classification_data(&cfg, seed)?;
    if test.clouds.is_empty() {
        return Err(CmdError::data(anyhow!("test split is empty")));
    }
    let mut preds = Vec::with_capacity(test.clouds.len());
    for pc in &test.clouds {
        let logits = frozen
            .classify(pc, cfg.eval.fps_seed)
            .map_err(|e| CmdError::data(anyhow!(e)))?;
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("non-empty logits");
        preds.push(pred);
    }
    let (oa, macc) =
        classification_metrics(&preds, &test.labels).map_err(|e| CmdError::data(anyhow!(e)))?;
    let doc = serde_json::json!({
        "task": "classification",
        "checkpoint": ck_path.display().to_string(),
        "seed": seed,
        "n_test": test.clouds.len(),
        "overall_accuracy": oa,
        "mean_accuracy": macc,
    });
    let out = args.out_dir();
    let path = write_out(&out, "metrics_cls.json", doc.to_string().as_bytes())?;
    println!("OA {oa:.4}  mAcc {macc:.4}  ({} test clouds)", test.clouds.len());
    println!("metrics written to {}", path.display());
    Ok(())
}

/// Build database and query descriptor sets from a place split.
pub fn descriptor_split(
    frozen: &FrozenModel,
    set: &PlaceSet,
    splits: &[String],
    fps_seed: usize,
) -> bpt_core::Result<(DescriptorDb, DescriptorDb)> {
    let mut db = DescriptorDb::default();
    let mut queries = DescriptorDb::default();
    for (i, split) in splits.iter().enumerate() {
        let d = frozen.describe(&set.clouds[i], fps_seed)?;
        if split == "query" {
            queries.push(i, set.poses[i], d);
        } else {
            db.push(i, set.poses[i], d);
        }
    }
    Ok((db, queries))
}

pub fn eval_pr(args: &CommonArgs) -> CmdResult<()> {
    let cfg = args.run_config()?;
    let seed = args.seed(&cfg);
    let ck_path = args.require_checkpoint()?;
    let frozen = load_frozen(&ck_path)?;
    let (set, splits) = places_data(&cfg, seed)?;
    let (db, queries) = descriptor_split(&frozen, &set, &splits, cfg.eval.fps_seed)
        .map_err(|e| CmdError::data(anyhow!(e)))?;
    if queries.is_empty() {
        return Err(CmdError::data(anyhow!("query set is empty")));
    }
    let radius = cfg.eval.positive_radius;
    let r1 = recall_at_n(&db, &queries, 1, radius).map_err(|e| CmdError::data(anyhow!(e)))?;
    let r1p =
        recall_at_1percent(&db, &queries, radius).map_err(|e| CmdError::data(anyhow!(e)))?;
    let doc = serde_json::json!({
        "task": "place-recognition",
        "checkpoint": ck_path.display().to_string(),
        "seed": seed,
        "n_database": db.len(),
        "n_queries": queries.len(),
        "positive_radius": radius,
        "recall_at_1": r1,
        "recall_at_1pct": r1p,
        "one_percent_n": one_percent_n(db.len()),
    });
    let out = args.out_dir();
    let path = write_out(&out, "metrics_pr.json", doc.to_string().as_bytes())?;
    println!(
        "recall@1 {r1:.4}  recall@1% {r1p:.4}  ({} queries vs {} database entries)",
        queries.len(),
        db.len()
    );
    println!("metrics written to {}", path.display());
    Ok(())
}

pub fn cost_report_cmd(args: &CommonArgs) -> CmdResult<()> {
    let cfg = args.run_config()?;
    let model_cfg =
        cfg.model_config("reference-classification").map_err(CmdError::config)?;
    let report = cost_report(&model_cfg, cfg.eval.bops_divisor)
        .map_err(|e| CmdError::config(anyhow!(e)))?;
    let table = report.text_table();
    print!("{table}");
    let out = args.out_dir();
    write_out(&out, "cost_report.txt", table.as_bytes())?;
    write_out(&out, "cost_report.kv", report.kv_doc().as_bytes())?;
    let doc = serde_json::json!({
        "bops_divisor": report.bops_divisor,
        "total_params": report.total_params,
        "total_binary_params": report.total_binary_params,
        "total_bytes_fp": report.total_bytes_fp,
        "total_bytes_bin": report.total_bytes_bin,
        "total_flops_fp": report.total_flops_fp,
        "total_bops": report.total_bops,
        "total_eff_flops_bin": report.total_eff_flops_bin,
        "size_reduction_pct": report.size_reduction_pct,
        "flops_reduction_pct": report.flops_reduction_pct,
    });
    let path = write_out(&out, "cost_report.json", doc.to_string().as_bytes())?;
    println!("cost report written to {}", path.display());
    Ok(())
}

/// Verify frozen-vs-graph equivalence on random clouds before writing the
/// deploy checkpoint.
pub fn export_binary(args: &CommonArgs) -> CmdResult<()> {
    let ck_path = args.require_checkpoint()?;
    let bytes = fs::read(&ck_path)
        .map_err(|e| CmdError::checkpoint(anyhow!("reading {}: {e}", ck_path.display())))?;
    let ck = checkpoint::load(&bytes).map_err(|e| CmdError::checkpoint(anyhow!(e)))?;
    let mut model =
        BptModel::from_checkpoint(&ck).map_err(|e| CmdError::checkpoint(anyhow!(e)))?;
    if model.config.twin != Twin::Binary {
        return Err(CmdError::checkpoint(anyhow!(
            "checkpoint holds the full-precision twin; only the binary twin exports to packed form"
        )));
    }
    let frozen = FrozenModel::from_model(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(0xB17);
    for trial in 0..5 {
        let pc = PointCloud::new(Array2::from_shape_fn((48, 3), |_| {
            rng.random_range(-1.0..1.0)
        }));
        let g = Graph::new();
        let mut bind = model.bind();
        let (dense, packed) = match model.config.head {
            HeadConfig::Descriptor { .. } => {
                let d = model
                    .describe_graph(&g, &mut bind, &pc, Mode::Eval, 0)
                    .map_err(|e| CmdError::checkpoint(anyhow!(e)))?
                    .value();
                let p = frozen.describe(&pc, 0).map_err(|e| CmdError::checkpoint(anyhow!(e)))?;
                (d, p.into_dyn())
            }
            HeadConfig::Classifier { .. } => {
                let d = model
                    .forward_graph(&g, &mut bind, &pc, Mode::Eval, 0)
                    .map_err(|e| CmdError::checkpoint(anyhow!(e)))?
                    .value();
                let p = frozen.classify(&pc, 0).map_err(|e| CmdError::checkpoint(anyhow!(e)))?;
                (d, p.into_dyn())
            }
        };
        for (a, b) in dense.iter().zip(packed.iter()) {
            let denom = a.abs().max(b.abs()).max(1.0);
            if (a - b).abs() / denom > 1e-6 {
                return Err(CmdError::checkpoint(anyhow!(
                    "two-path verification failed on trial {trial}: {a} vs {b}"
                )));
            }
        }
    }
    let deploy = checkpoint::save_deploy(&model).map_err(|e| CmdError::checkpoint(anyhow!(e)))?;
    let out = args.out_dir();
    let path = write_out(&out, "deploy.bptc", &deploy)?;
    println!(
        "deploy checkpoint written to {} ({} bytes, training checkpoint {} bytes)",
        path.display(),
        deploy.len(),
        bytes.len()
    );
    Ok(())
}

// --- selftest ------------------------------------------------------------------

fn selftest_suites() -> Vec<(&'static str, Box<dyn Fn() -> anyhow::Result<()>>)> {
    type Suite = (&'static str, Box<dyn Fn() -> anyhow::Result<()>>);
    let mut suites: Vec<Suite> = Vec::new();

    suites.push((
        "pack/unpack roundtrip",
        Box::new(|| {
            use bpt_core::bitops::{pack_signs, LaneWidth};
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for _ in 0..100 {
                let m = Array2::from_shape_fn((3, 70), |_| {
                    if rng.random::<bool>() { 1.0 } else { -1.0 }
                });
                for lw in [LaneWidth::W32, LaneWidth::W64] {
                    if pack_signs(m.view(), lw)?.unpack() != m {
                        anyhow::bail!("roundtrip mismatch");
                    }
                }
            }
            Ok(())
        }),
    ));

    suites.push((
        "bgemm vs dense matmul",
        Box::new(|| {
            use bpt_core::bitops::{bgemm, pack_signs, LaneWidth};
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            for _ in 0..100 {
                let k = rng.random_range(1..200);
                let a = Array2::from_shape_fn((4, k), |_| {
                    if rng.random::<bool>() { 1.0 } else { -1.0 }
                });
                let bt = Array2::from_shape_fn((3, k), |_| {
                    if rng.random::<bool>() { 1.0 } else { -1.0 }
                });
                let dense = a.dot(&bt.t());
                for lw in [LaneWidth::W32, LaneWidth::W64] {
                    let out =
                        bgemm(&pack_signs(a.view(), lw)?, &pack_signs(bt.view(), lw)?)?;
                    if out.to_dense() != dense {
                        anyhow::bail!("bgemm mismatch at k={k}");
                    }
                }
            }
            Ok(())
        }),
    ));

    suites.push((
        "binary linear vs dense expansion",
        Box::new(|| {
            use bpt_core::binarize::*;
            use bpt_core::bitops::LaneWidth;
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for _ in 0..100 {
                let w = LatentWeight::new(Array2::from_shape_fn((6, 24), |_| {
                    rng.random_range(-1.5..1.5)
                }));
                let a = Array2::from_shape_fn((2, 24), |_| rng.random_range(-2.0..2.0));
                let y = binary_linear(&w, a.view(), true, NONNEG_THRESHOLD)?;
                let oracle = activation_binarize(a.view(), true, 0.5, LaneWidth::W64)?
                    .to_dense()
                    .dot(&weight_binarize(&w, LaneWidth::W64).to_dense().t());
                for (g, o) in y.iter().zip(oracle.iter()) {
                    if (g - o).abs() / o.abs().max(1.0) > 1e-6 {
                        anyhow::bail!("binary linear mismatch: {g} vs {o}");
                    }
                }
            }
            Ok(())
        }),
    ));

    suites.push((
        "fps/knn brute force",
        Box::new(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            for _ in 0..20 {
                let pc = PointCloud::new(Array2::from_shape_fn((40, 3), |_| {
                    rng.random_range(-1.0..1.0)
                }));
                let picks = farthest_point_sampling(&pc, 8, 0)?;
                let mut chosen = vec![picks[0]];
                for step in 1..8 {
                    let mut best = 0;
                    let mut best_d = f64::NEG_INFINITY;
                    for i in 0..40 {
                        let d = chosen
                            .iter()
                            .map(|&c| {
                                (0..3)
                                    .map(|j| (pc.points[(i, j)] - pc.points[(c, j)]).powi(2))
                                    .sum::<f64>()
                            })
                            .fold(f64::INFINITY, f64::min);
                        if d > best_d {
                            best_d = d;
                            best = i;
                        }
                    }
                    if picks[step] != best {
                        anyhow::bail!("fps disagreement at step {step}");
                    }
                    chosen.push(best);
                }
                let g = knn_group(&pc, &picks, 5)?;
                for (ci, &c) in picks.iter().enumerate() {
                    if g.neighbor_indices[ci][0] != c {
                        anyhow::bail!("center must be its own first neighbor");
                    }
                }
            }
            Ok(())
        }),
    ));

    suites.push((
        "gradient check (small mlp)",
        Box::new(|| {
            use bpt_core::gradcheck::{finite_diff_grads, max_rel_err};
            use ndarray::{ArrayD, IxDyn};
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let x = ArrayD::from_shape_fn(IxDyn(&[3, 4]), |_| rng.random_range(-1.0..1.0));
            let w = ArrayD::from_shape_fn(IxDyn(&[2, 4]), |_| rng.random_range(-1.0..1.0));
            let build = |xs: &[ArrayD<f64>]| -> f64 {
                let g = Graph::new();
                let xv = g.leaf(xs[0].clone());
                let wv = g.leaf(xs[1].clone());
                xv.linear(&wv, None).unwrap().relu().sum_all().scalar_value()
            };
            let g = Graph::new();
            let xv = g.leaf(x.clone());
            let wv = g.leaf(w.clone());
            let loss = xv.linear(&wv, None)?.relu().sum_all();
            g.backward(&loss)?;
            let fd = finite_diff_grads(build, &[x, w], 1e-4);
            let ex = max_rel_err(&xv.grad().unwrap(), &fd[0], 1e-7);
            let ew = max_rel_err(&wv.grad().unwrap(), &fd[1], 1e-7);
            if ex > 1e-4 || ew > 1e-4 {
                anyhow::bail!("gradient mismatch: x {ex:.2e}, w {ew:.2e}");
            }
            Ok(())
        }),
    ));

    suites.push((
        "quadruplet loss double-loop oracle",
        Box::new(|| {
            use ndarray::Array1;
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            for _ in 0..100 {
                let mk = |rng: &mut ChaCha8Rng| {
                    Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0))
                };
                let a = mk(&mut rng);
                let ps: Vec<_> = (0..2).map(|_| mk(&mut rng)).collect();
                let ns: Vec<_> = (0..8).map(|_| mk(&mut rng)).collect();
                let star = mk(&mut rng);
                let got = lazy_quadruplet_loss(&a, &ps, &ns, &star, 0.5, 0.2)?;
                // exhaustive double loop
                let d2 = |x: &Array1<f64>, y: &Array1<f64>| -> f64 {
                    x.iter().zip(y.iter()).map(|(u, v)| (u - v) * (u - v)).sum()
                };
                let mut t1 = f64::NEG_INFINITY;
                let mut t2 = f64::NEG_INFINITY;
                for p in &ps {
                    for nj in &ns {
                        t1 = t1.max((d2(&a, p) - d2(&a, nj) + 0.5).max(0.0));
                        t2 = t2.max((d2(&a, p) - d2(&star, nj) + 0.2).max(0.0));
                    }
                }
                if (got - (t1 + t2)).abs() > 1e-10 {
                    anyhow::bail!("quadruplet mismatch: {got} vs {}", t1 + t2);
                }
                // graph route agrees
                let g = Graph::new();
                let av = g.leaf(a.into_dyn());
                let pv: Vec<_> = ps.into_iter().map(|p| g.leaf(p.into_dyn())).collect();
                let nv: Vec<_> = ns.into_iter().map(|n| g.leaf(n.into_dyn())).collect();
                let sv = g.leaf(star.into_dyn());
                let gv = lazy_quadruplet_loss_graph(&g, &av, &pv, &nv, &sv, 0.5, 0.2)?
                    .scalar_value();
                if (gv - got).abs() > 1e-10 {
                    anyhow::bail!("graph quadruplet mismatch");
                }
            }
            Ok(())
        }),
    ));

    suites.push((
        "two-path model equivalence",
        Box::new(|| {
            let mut model = BptModel::init(ModelConfig::desk_descriptor(), 8)?;
            let mut rng = ChaCha8Rng::seed_from_u64(88);
            for _ in 0..3 {
                let pc = PointCloud::new(Array2::from_shape_fn((40, 3), |_| {
                    rng.random_range(-1.0..1.0)
                }));
                let g = Graph::new();
                let mut bind = model.bind();
                model.forward_graph(&g, &mut bind, &pc, Mode::Train, 0)?;
            }
            let frozen = FrozenModel::from_model(&model);
            for _ in 0..3 {
                let pc = PointCloud::new(Array2::from_shape_fn((40, 3), |_| {
                    rng.random_range(-1.0..1.0)
                }));
                let g = Graph::new();
                let mut bind = model.bind();
                let dense = model.describe_graph(&g, &mut bind, &pc, Mode::Eval, 0)?.value();
                let packed = frozen.describe(&pc, 0)?;
                for (a, b) in dense.iter().zip(packed.iter()) {
                    if (a - b).abs() / a.abs().max(b.abs()).max(1.0) > 1e-6 {
                        anyhow::bail!("two-path mismatch: {a} vs {b}");
                    }
                }
            }
            Ok(())
        }),
    ));

    suites.push((
        "recall exhaustive oracle",
        Box::new(|| {
            use ndarray::Array1;
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for _ in 0..10 {
                let mut db = DescriptorDb::default();
                let nd = rng.random_range(10..60);
                for i in 0..nd {
                    db.push(
                        i,
                        [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)],
                        Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0)),
                    );
                }
                let mut qs = DescriptorDb::default();
                for i in 0..8 {
                    qs.push(
                        100 + i,
                        [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)],
                        Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0)),
                    );
                }
                let mut prev = 0.0;
                for n in 1..=nd {
                    match recall_at_n(&db, &qs, n, 3.0) {
                        Ok(r) => {
                            if r < prev {
                                anyhow::bail!("recall not monotone");
                            }
                            prev = r;
                        }
                        Err(_) => break,
                    }
                }
            }
            Ok(())
        }),
    ));

    suites
}

pub fn selftest(_args: &CommonArgs) -> CmdResult<()> {
    let mut failed = 0usize;
    for (name, suite) in selftest_suites() {
        match suite() {
            Ok(()) => println!("selftest {name}: ok"),
            Err(e) => {
                println!("selftest {name}: FAILED ({e:#})");
                failed += 1;
            }
        }
    }
    if failed > 0 {
        return Err(CmdError {
            code: EXIT_SELFTEST,
            source: anyhow!("{failed} selftest suite(s) failed"),
        });
    }
    println!("all selftest suites passed");
    Ok(())
}

/// Classification accuracy of a frozen model over a set (used by tests and
/// downstream tooling).
pub fn frozen_accuracy(
    frozen: &FrozenModel,
    set: &ClassificationSet,
    fps_seed: usize,
) -> anyhow::Result<(f64, f64)> {
    let mut preds = Vec::with_capacity(set.clouds.len());
    for pc in &set.clouds {
        let logits = frozen.classify(pc, fps_seed).context("classify")?;
        preds.push(
            logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                .map(|(i, _)| i)
                .expect("non-empty"),
        );
    }
    Ok(classification_metrics(&preds, &set.labels).map_err(|e| anyhow!(e))?)
}

/// Place-recognition recalls of a frozen model over a split set.
pub fn frozen_recalls(
    frozen: &FrozenModel,
    set: &PlaceSet,
    splits: &[String],
    radius: f64,
    fps_seed: usize,
) -> anyhow::Result<(f64, f64)> {
    let (db, queries) =
        descriptor_split(frozen, set, splits, fps_seed).map_err(|e| anyhow!(e))?;
    let r1 = recall_at_n(&db, &queries, 1, radius).map_err(|e| anyhow!(e))?;
    let r1p = recall_at_1percent(&db, &queries, radius).map_err(|e| anyhow!(e))?;
    Ok((r1, r1p))
}

pub use learning::TrainConfig as CoreTrainConfig;

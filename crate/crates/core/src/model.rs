//! The full network: full-precision neighbor embedding → binary (or
//! full-precision twin) transformer module → task head.
//!
//! The transformer module is an input linear block (two Linear+BN+ReLU
//! layers), four offset-attention blocks whose outputs are concatenated, and
//! an output linear block. In the binary twin every weight and every
//! activation inside this module is binarized; the neighbor embedding and the
//! head stay full-precision.
//!
//! Two forward paths exist and are pinned together by tests: the graph path
//! (dense expansion of the binarized operands, differentiable, used for
//! training) and the frozen path (bit-packed xnor/popcount kernels, used for
//! deployment).

use ndarray::{Array1, Array2, ArrayD, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::autodiff::{BinarizeMode, Graph, Var};
use crate::binarize::{
    activation_binarize, weight_binarize, ScaledBinary, NONNEG_THRESHOLD,
};
use crate::bitops::{self, BitMatrix, Convention, LaneWidth};
use crate::error::{Error, Result};
use crate::params::{BufferId, ParamId, ParamStore, ParamValue};
use crate::pointops::{
    grouping_plan, neighborhood_maxpool, neighborhood_maxpool_dense, normalize, relative_features_dense, NeighborEmbedConfig, PointCloud, SgStageConfig,
};

pub const EPS_L1_NORM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Twin {
    Binary,
    FullPrecision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Threshold applied to softmax outputs before the binary attention product.
/// `PaperLiteral` is the 0.5 rule; `MedianPerRow` is an extension (not the
/// reference behavior) that keeps half of each row's weights alive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnThreshold {
    PaperLiteral,
    MedianPerRow,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadConfig {
    Classifier { num_classes: usize, hidden: Vec<usize> },
    Descriptor { dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub twin: Twin,
    /// Feature width inside the transformer blocks.
    pub d_model: usize,
    /// Number of transformer blocks (the module uses four).
    pub n_blocks: usize,
    /// Query/key projection width (d_model/4 by convention).
    pub qk_width: usize,
    /// Output width of the output linear block.
    pub output_width: usize,
    pub head: HeadConfig,
    pub neighbor: NeighborEmbedConfig,
    pub attn_threshold: AttnThreshold,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub lane_width: LaneWidth,
    /// Point count the cost model assumes (forward works on any N).
    pub n_points: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks != 4 {
            return Err(Error::Contract(format!(
                "transformer module uses exactly 4 blocks, got {}",
                self.n_blocks
            )));
        }
        if let HeadConfig::Descriptor { dim } = &self.head {
            if *dim != 256 {
                return Err(Error::Contract(format!("descriptor dimension must be 256, got {dim}")));
            }
            if self.output_width != *dim {
                return Err(Error::Contract(
                    "output linear width must equal the descriptor dimension".into(),
                ));
            }
        }
        if self.neighbor.stages.is_empty() {
            return Err(Error::Contract("neighbor embedding needs at least one stage".into()));
        }
        if self.neighbor.out_width() == 0 || self.d_model == 0 || self.qk_width == 0 {
            return Err(Error::Contract("zero layer width".into()));
        }
        Ok(())
    }

    /// Width of the concatenated block outputs.
    pub fn concat_width(&self) -> usize {
        self.n_blocks * self.d_model
    }

    /// Reference classification architecture (1024 points): the configuration
    /// the cost analysis is reported for.
    pub fn reference_classification(num_classes: usize) -> Self {
        ModelConfig {
            twin: Twin::Binary,
            d_model: 256,
            n_blocks: 4,
            qk_width: 64,
            output_width: 1024,
            head: HeadConfig::Classifier { num_classes, hidden: vec![512, 256] },
            neighbor: NeighborEmbedConfig {
                point_mlp: vec![64, 64],
                stages: vec![
                    SgStageConfig { centers: 512, k: 32, width: 128, mlp_layers: 2 },
                    SgStageConfig { centers: 256, k: 32, width: 256, mlp_layers: 1 },
                ],
            },
            attn_threshold: AttnThreshold::PaperLiteral,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            lane_width: LaneWidth::W64,
            n_points: 1024,
        }
    }

    /// Small desk-scale classifier for 256-point clouds.
    pub fn desk_classifier(num_classes: usize) -> Self {
        ModelConfig {
            twin: Twin::Binary,
            d_model: 64,
            n_blocks: 4,
            qk_width: 16,
            output_width: 128,
            head: HeadConfig::Classifier { num_classes, hidden: vec![64] },
            neighbor: NeighborEmbedConfig {
                point_mlp: vec![16],
                stages: vec![
                    SgStageConfig { centers: 64, k: 8, width: 32, mlp_layers: 1 },
                    SgStageConfig { centers: 32, k: 8, width: 64, mlp_layers: 1 },
                ],
            },
            attn_threshold: AttnThreshold::PaperLiteral,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            lane_width: LaneWidth::W64,
            n_points: 256,
        }
    }

    /// Small desk-scale descriptor model (256-dim global descriptor).
    pub fn desk_descriptor() -> Self {
        ModelConfig {
            twin: Twin::Binary,
            d_model: 64,
            n_blocks: 4,
            qk_width: 16,
            output_width: 256,
            head: HeadConfig::Descriptor { dim: 256 },
            neighbor: NeighborEmbedConfig {
                point_mlp: vec![16],
                stages: vec![
                    SgStageConfig { centers: 64, k: 8, width: 32, mlp_layers: 1 },
                    SgStageConfig { centers: 32, k: 8, width: 64, mlp_layers: 1 },
                ],
            },
            attn_threshold: AttnThreshold::PaperLiteral,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            lane_width: LaneWidth::W64,
            n_points: 256,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
}

#[derive(Debug, Clone, Copy)]
struct FpLbr {
    w: ParamId,
    bn: Bn,
}

#[derive(Debug, Clone, Copy)]
struct BinLbr {
    w: ParamId,
    bn: Bn,
    signed_input: bool,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    offset: BinLbr,
}

// Head hidden layers are plain Linear+ReLU: the head sees one pooled vector
// per cloud, and batch norm over a single row is degenerate.
#[derive(Debug, Clone)]
enum Head {
    Classifier { hidden: Vec<ParamId>, final_w: ParamId, final_b: ParamId },
    Descriptor,
}

/// The trainable model: a parameter store plus the layer wiring.
#[derive(Debug, Clone)]
pub struct BptModel {
    pub config: ModelConfig,
    store: ParamStore,
    point_mlp: Vec<FpLbr>,
    stage_mlps: Vec<Vec<FpLbr>>,
    input_block: Vec<BinLbr>,
    blocks: Vec<Block>,
    out_linear: BinLbr,
    head: Head,
}

fn init_weight(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Array2<f64> {
    let std = (2.0 / inp as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    Array2::from_shape_fn((out, inp), |_| rng.sample(dist))
}

impl BptModel {
    /// Build and initialize a model. Two twins initialized with the same seed
    /// share identical parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let add_bn = |store: &mut ParamStore, name: &str, c: usize| -> Bn {
            let gamma = store.add_dense(format!("{name}.bn.gamma"), Array1::ones(c).into_dyn());
            let beta = store.add_dense(format!("{name}.bn.beta"), Array1::zeros(c).into_dyn());
            let mean = store.add_buffer(format!("{name}.bn.running_mean"), Array1::zeros(c));
            let var = store.add_buffer(format!("{name}.bn.running_var"), Array1::ones(c));
            Bn { gamma, beta, mean, var }
        };

        let mut point_mlp = Vec::new();
        let mut width = 3usize;
        for (i, &w) in config.neighbor.point_mlp.iter().enumerate() {
            let name = format!("ne.point{i}");
            let wid = store.add_dense(format!("{name}.w"), init_weight(&mut rng, w, width).into_dyn());
            point_mlp.push(FpLbr { w: wid, bn: add_bn(&mut store, &name, w) });
            width = w;
        }

        let mut stage_mlps = Vec::new();
        for (si, stage) in config.neighbor.stages.iter().enumerate() {
            let mut layers = Vec::new();
            let mut in_w = 2 * width;
            for li in 0..stage.mlp_layers.max(1) {
                let name = format!("ne.stage{si}.mlp{li}");
                let wid = store.add_dense(
                    format!("{name}.w"),
                    init_weight(&mut rng, stage.width, in_w).into_dyn(),
                );
                layers.push(FpLbr { w: wid, bn: add_bn(&mut store, &name, stage.width) });
                in_w = stage.width;
            }
            stage_mlps.push(layers);
            width = stage.width;
        }

        let d = config.d_model;
        let mut input_block = Vec::new();
        let mut in_w = width;
        for i in 0..2 {
            let name = format!("tf.input{i}");
            let wid = store.add_latent(format!("{name}.w"), init_weight(&mut rng, d, in_w));
            input_block.push(BinLbr { w: wid, bn: add_bn(&mut store, &name, d), signed_input: false });
            in_w = d;
        }

        let mut blocks = Vec::new();
        for bi in 0..config.n_blocks {
            let name = format!("tf.block{bi}");
            let wq = store.add_latent(format!("{name}.wq"), init_weight(&mut rng, config.qk_width, d));
            let wk = store.add_latent(format!("{name}.wk"), init_weight(&mut rng, config.qk_width, d));
            let wv = store.add_latent(format!("{name}.wv"), init_weight(&mut rng, d, d));
            let ow = store.add_latent(format!("{name}.offset.w"), init_weight(&mut rng, d, d));
            let offset = BinLbr {
                w: ow,
                bn: add_bn(&mut store, &format!("{name}.offset"), d),
                signed_input: true,
            };
            blocks.push(Block { wq, wk, wv, offset });
        }

        let cat_w = config.concat_width();
        let ow = store.add_latent("tf.out.w".to_string(), init_weight(&mut rng, config.output_width, cat_w));
        let out_linear =
            BinLbr { w: ow, bn: add_bn(&mut store, "tf.out", config.output_width), signed_input: false };

        let head = match &config.head {
            HeadConfig::Descriptor { .. } => Head::Descriptor,
            HeadConfig::Classifier { num_classes, hidden } => {
                let mut layers = Vec::new();
                let mut in_w = 2 * config.output_width; // max ‖ mean pooling
                for (i, &w) in hidden.iter().enumerate() {
                    let name = format!("head.mlp{i}");
                    let wid = store
                        .add_dense(format!("{name}.w"), init_weight(&mut rng, w, in_w).into_dyn());
                    layers.push(wid);
                    in_w = w;
                }
                let final_w = store.add_dense(
                    "head.final.w".to_string(),
                    init_weight(&mut rng, *num_classes, in_w).into_dyn(),
                );
                let final_b =
                    store.add_dense("head.final.b".to_string(), Array1::zeros(*num_classes).into_dyn());
                Head::Classifier { hidden: layers, final_w, final_b }
            }
        };

        Ok(BptModel {
            config,
            store,
            point_mlp,
            stage_mlps,
            input_block,
            blocks,
            out_linear,
            head,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn bind(&self) -> Binding {
        Binding::new(self.store.num_tensors())
    }

    fn bn_forward(&mut self, g: &Graph, bind: &mut Binding, bn: Bn, x: Var, mode: Mode) -> Result<Var> {
        let gamma = bind.leaf_var(g, &self.store, bn.gamma);
        let beta = bind.leaf_var(g, &self.store, bn.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = x.batchnorm(&gamma, &beta, None, self.config.bn_eps)?;
                let (mean, var) = stats.expect("train mode returns batch stats");
                let m = self.config.bn_momentum;
                let rm = self.store.buffer_mut(bn.mean);
                rm.zip_mut_with(&mean, |r, &b| *r = m * *r + (1.0 - m) * b);
                let rv = self.store.buffer_mut(bn.var);
                rv.zip_mut_with(&var, |r, &b| *r = m * *r + (1.0 - m) * b);
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.store.buffer(bn.mean).clone();
                let var = self.store.buffer(bn.var).clone();
                let (y, _) = x.batchnorm(&gamma, &beta, Some((&mean, &var)), self.config.bn_eps)?;
                Ok(y)
            }
        }
    }

    fn fp_lbr_forward(&mut self, g: &Graph, bind: &mut Binding, lbr: FpLbr, x: Var, mode: Mode) -> Result<Var> {
        let w = bind.leaf_var(g, &self.store, lbr.w);
        let y = x.linear(&w, None)?;
        Ok(self.bn_forward(g, bind, lbr.bn, y, mode)?.relu())
    }

    /// Binary (or plain, in the full-precision twin) linear projection.
    fn bin_linear_forward(
        &mut self,
        g: &Graph,
        bind: &mut Binding,
        w: ParamId,
        x: &Var,
        signed_input: bool,
    ) -> Result<Var> {
        match self.config.twin {
            Twin::FullPrecision => {
                let wv = bind.leaf_var(g, &self.store, w);
                x.linear(&wv, None)
            }
            Twin::Binary => {
                let wb = bind.weight_bits(g, &self.store, w)?;
                let alpha = bind.weight_alpha(g, &self.store, w)?;
                let mode = if signed_input {
                    BinarizeMode::Signed
                } else {
                    BinarizeMode::NonNeg { threshold: NONNEG_THRESHOLD }
                };
                let xb = x.ste_binarize(mode)?;
                let beta = x.abs_mean_all();
                xb.linear(&wb, None)?.mul_feature_scale(&alpha)?.mul_scalar_node(&beta)
            }
        }
    }

    /// One Linear(+binarize)+BN+ReLU over per-cloud feature parts. The linear
    /// side (and its activation binarization with its per-tensor β) runs per
    /// cloud; batch norm runs over the concatenated rows of the whole batch,
    /// matching batched training of the counterpart network.
    fn bin_lbr_batch(
        &mut self,
        g: &Graph,
        bind: &mut Binding,
        lbr: BinLbr,
        parts: &[Var],
        mode: Mode,
    ) -> Result<Vec<Var>> {
        let mut lin = Vec::with_capacity(parts.len());
        for p in parts {
            lin.push(self.bin_linear_forward(g, bind, lbr.w, p, lbr.signed_input)?);
        }
        let counts: Vec<usize> = lin.iter().map(|v| v.shape()[0]).collect();
        let cat = if lin.len() == 1 { lin[0].clone() } else { g.concat(&lin, 0)? };
        let y = self.bn_forward(g, bind, lbr.bn, cat, mode)?.relu();
        split_rows(&y, &counts)
    }

    /// One offset-attention block over per-cloud parts; attention is always
    /// per cloud, the offset Linear+BN+ReLU is batched like `bin_lbr_batch`.
    fn block_forward_batch(
        &mut self,
        g: &Graph,
        bind: &mut Binding,
        b: Block,
        parts: &[Var],
        mode: Mode,
    ) -> Result<Vec<Var>> {
        let mut offs = Vec::with_capacity(parts.len());
        for x in parts {
            let q = self.bin_linear_forward(g, bind, b.wq, x, false)?;
            let k = self.bin_linear_forward(g, bind, b.wk, x, false)?;
            let v = self.bin_linear_forward(g, bind, b.wv, x, false)?;
            let energy = match self.config.twin {
                Twin::FullPrecision => q.matmul(&k.transpose2()?)?,
                Twin::Binary => {
                    let qb = q.ste_binarize(BinarizeMode::Signed)?;
                    let bq = q.abs_mean_all();
                    let kb = k.ste_binarize(BinarizeMode::Signed)?;
                    let bk = k.abs_mean_all();
                    qb.matmul(&kb.transpose2()?)?.mul_scalar_node(&bq)?.mul_scalar_node(&bk)?
                }
            };
            // softmax over keys, then L1 normalization over the query axis
            let attn = energy.softmax()?.l1_normalize_axis(0, EPS_L1_NORM)?;
            let av = match self.config.twin {
                Twin::FullPrecision => attn.matmul(&v)?,
                Twin::Binary => {
                    let ab = match self.config.attn_threshold {
                        AttnThreshold::PaperLiteral => attn
                            .ste_binarize(BinarizeMode::NonNeg { threshold: NONNEG_THRESHOLD })?,
                        AttnThreshold::MedianPerRow => {
                            let t = row_medians(&attn.value());
                            attn.ste_binarize_row_thresholds(&t)?
                        }
                    };
                    let ba = attn.abs_mean_all();
                    let vb = v.ste_binarize(BinarizeMode::Signed)?;
                    let bv = v.abs_mean_all();
                    ab.matmul(&vb)?.mul_scalar_node(&ba)?.mul_scalar_node(&bv)?
                }
            };
            offs.push(x.sub(&av)?);
        }
        let offs = self.bin_lbr_batch(g, bind, b.offset, &offs, mode)?;
        parts.iter().zip(offs.iter()).map(|(x, o)| x.add(o)).collect()
    }

    /// Batched graph forward over a mini-batch of clouds: point-wise layers
    /// and batch norm see the union of all clouds' rows, attention and the
    /// heads stay per cloud. Returns per-cloud class logits `[C]` or
    /// L2-normalized descriptors `[dim]`.
    pub fn forward_batch_graph(
        &mut self,
        g: &Graph,
        bind: &mut Binding,
        clouds: &[&PointCloud],
        mode: Mode,
        fps_seed: usize,
    ) -> Result<Vec<Var>> {
        if clouds.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let pcns: Vec<PointCloud> = clouds.iter().map(|pc| normalize(pc)).collect();
        let mut plans = Vec::with_capacity(pcns.len());
        for pcn in &pcns {
            plans.push(grouping_plan(pcn, &self.config.neighbor, fps_seed)?);
        }

        // stack all clouds' coordinates row-wise
        let total: usize = pcns.iter().map(|p| p.len()).sum();
        let mut coords = Array2::<f64>::zeros((total, 3));
        let mut row = 0;
        for pcn in &pcns {
            for p in pcn.points.rows() {
                for j in 0..3 {
                    coords[(row, j)] = p[j];
                }
                row += 1;
            }
        }
        let mut x = g.constant(coords.into_dyn());
        let mut counts: Vec<usize> = pcns.iter().map(|p| p.len()).collect();

        for lbr in self.point_mlp.clone() {
            x = self.fp_lbr_forward(g, bind, lbr, x, mode)?;
        }
        for si in 0..self.config.neighbor.stages.len() {
            let k = plans[0].stages[si].k;
            if plans.iter().any(|p| p.stages[si].k != k) {
                return Err(Error::Contract(
                    "batched forward requires a uniform neighborhood size".into(),
                ));
            }
            // gather indices into the stacked rows
            let mut flat_nb = Vec::new();
            let mut flat_ct = Vec::new();
            let mut new_counts = Vec::with_capacity(plans.len());
            let mut offset = 0usize;
            for (ci, plan) in plans.iter().enumerate() {
                let group = &plan.stages[si];
                for (center, neighbors) in
                    group.center_indices.iter().zip(group.neighbor_indices.iter())
                {
                    for &nb in neighbors {
                        flat_nb.push(offset + nb);
                        flat_ct.push(offset + center);
                    }
                }
                new_counts.push(group.center_indices.len());
                offset += counts[ci];
            }
            let m_total: usize = new_counts.iter().sum();
            let neigh = x.gather_rows(&flat_nb, &[m_total * k])?;
            let cent = x.gather_rows(&flat_ct, &[m_total * k])?;
            let diff = neigh.sub(&cent)?;
            let mut y = g.concat(&[neigh, diff], 1)?;
            for lbr in self.stage_mlps[si].clone() {
                y = self.fp_lbr_forward(g, bind, lbr, y, mode)?;
            }
            x = neighborhood_maxpool(&y, m_total, k)?;
            counts = new_counts;
        }

        // transformer module on per-cloud parts
        let mut parts = split_rows(&x, &counts)?;
        for lbr in self.input_block.clone() {
            parts = self.bin_lbr_batch(g, bind, lbr, &parts, mode)?;
        }
        let mut block_outs: Vec<Vec<Var>> = vec![Vec::new(); parts.len()];
        for b in self.blocks.clone() {
            parts = self.block_forward_batch(g, bind, b, &parts, mode)?;
            for (ci, p) in parts.iter().enumerate() {
                block_outs[ci].push(p.clone());
            }
        }
        let cats: Vec<Var> = block_outs
            .iter()
            .map(|outs| g.concat(outs, 1))
            .collect::<Result<Vec<_>>>()?;
        let ys = self.bin_lbr_batch(g, bind, self.out_linear, &cats, mode)?;

        let head = self.head.clone();
        ys.into_iter()
            .map(|y| match &head {
                Head::Descriptor => y.max_axis(0)?.l2_normalize(),
                Head::Classifier { hidden, final_w, final_b } => {
                    let maxp = y.max_axis(0)?;
                    let meanp = y.mean_axis(0)?;
                    let pooled = g.concat(&[maxp, meanp], 0)?;
                    let width = pooled.shape()[0];
                    let mut h = pooled.reshape(&[1, width])?;
                    for &wid in hidden {
                        let w = bind.leaf_var(g, &self.store, wid);
                        h = h.linear(&w, None)?.relu();
                    }
                    let wv = bind.leaf_var(g, &self.store, *final_w);
                    let bv = bind.leaf_var(g, &self.store, *final_b);
                    let logits = h.linear(&wv, Some(&bv))?;
                    let c = logits.shape()[1];
                    logits.reshape(&[c])
                }
            })
            .collect()
    }

    /// Single-cloud graph forward (a batch of one).
    pub fn forward_graph(
        &mut self,
        g: &Graph,
        bind: &mut Binding,
        pc: &PointCloud,
        mode: Mode,
        fps_seed: usize,
    ) -> Result<Var> {
        Ok(self.forward_batch_graph(g, bind, &[pc], mode, fps_seed)?.remove(0))
    }

    /// Graph forward returning the 256-dim descriptor (descriptor head only).
    pub fn describe_graph(
        &mut self,
        g: &Graph,
        bind: &mut Binding,
        pc: &PointCloud,
        mode: Mode,
        fps_seed: usize,
    ) -> Result<Var> {
        if !matches!(self.head, Head::Descriptor) {
            return Err(Error::Contract("describe requires a descriptor head".into()));
        }
        self.forward_graph(g, bind, pc, mode, fps_seed)
    }
}

/// Slice a row-stacked tensor back into per-cloud parts.
fn split_rows(x: &Var, counts: &[usize]) -> Result<Vec<Var>> {
    if counts.len() == 1 {
        return Ok(vec![x.clone()]);
    }
    let mut out = Vec::with_capacity(counts.len());
    let mut offset = 0usize;
    for &n in counts {
        let idx: Vec<usize> = (offset..offset + n).collect();
        out.push(x.gather_rows(&idx, &[n])?);
        offset += n;
    }
    Ok(out)
}

fn row_medians(x: &ArrayD<f64>) -> Vec<f64> {
    let m = x.shape()[0];
    let n = x.shape()[1];
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let mut row: Vec<f64> = (0..n).map(|j| x[[i, j]]).collect();
        row.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        out.push(row[(n - 1) / 2]);
    }
    out
}

/// Per-graph cache of parameter leaves and derived binarization nodes, so a
/// parameter appears once per graph no matter how many clouds share it.
pub struct Binding {
    leaves: Vec<Option<Var>>,
    wbits: Vec<Option<Var>>,
    alphas: Vec<Option<Var>>,
}

impl Binding {
    fn new(n: usize) -> Self {
        Binding { leaves: vec![None; n], wbits: vec![None; n], alphas: vec![None; n] }
    }

    pub fn leaf_var(&mut self, g: &Graph, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = &self.leaves[id.index()] {
            return v.clone();
        }
        let v = g.leaf(store.param(id).value.to_array());
        self.leaves[id.index()] = Some(v.clone());
        v
    }

    /// sign(W − row_mean(W)) with straight-through backward.
    fn weight_bits(&mut self, g: &Graph, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(v) = &self.wbits[id.index()] {
            return Ok(v.clone());
        }
        let w = self.leaf_var(g, store, id);
        let bits = w.center_rows()?.ste_binarize(BinarizeMode::Signed)?;
        self.wbits[id.index()] = Some(bits.clone());
        Ok(bits)
    }

    /// α = per-row mean |W| (analytically differentiable).
    fn weight_alpha(&mut self, g: &Graph, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(v) = &self.alphas[id.index()] {
            return Ok(v.clone());
        }
        let w = self.leaf_var(g, store, id);
        let alpha = w.row_abs_mean()?;
        self.alphas[id.index()] = Some(alpha.clone());
        Ok(alpha)
    }

    /// Gradient collected on a parameter leaf by the last backward pass.
    pub fn grad(&self, id: ParamId) -> Option<ArrayD<f64>> {
        self.leaves[id.index()].as_ref().and_then(|v| v.grad())
    }
}

// ---------------------------------------------------------------------------
// Frozen inference path
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum FzWeight {
    Dense(Array2<f64>),
    Binary(ScaledBinary),
}

#[derive(Debug, Clone)]
struct FzBn {
    gamma: Array1<f64>,
    beta: Array1<f64>,
    mean: Array1<f64>,
    var: Array1<f64>,
}

#[derive(Debug, Clone)]
struct FzLbr {
    name: String,
    w: FzWeight,
    bn: FzBn,
    signed_input: bool,
}

#[derive(Debug, Clone)]
struct FzBlock {
    wq: (String, FzWeight),
    wk: (String, FzWeight),
    wv: (String, FzWeight),
    offset: FzLbr,
}

#[derive(Debug, Clone)]
enum FzHead {
    Classifier { hidden: Vec<Array2<f64>>, final_w: Array2<f64>, final_b: Array1<f64> },
    Descriptor,
}

/// Immutable inference model: binary-twin weights are bit-packed and all
/// products inside the transformer module run through the xnor/popcount
/// kernels; batch norm uses running statistics.
#[derive(Debug, Clone)]
pub struct FrozenModel {
    pub config: ModelConfig,
    point_mlp: Vec<FzLbr>,
    stage_mlps: Vec<Vec<FzLbr>>,
    input_block: Vec<FzLbr>,
    blocks: Vec<FzBlock>,
    out_linear: FzLbr,
    head: FzHead,
}

impl FrozenModel {
    /// Freeze a model: binarize latent weights (binary twin) or copy shadows
    /// (full-precision twin).
    pub fn from_model(m: &BptModel) -> Self {
        let store = &m.store;
        let lane = m.config.lane_width;
        let fz_weight = |id: ParamId| -> FzWeight {
            match &store.param(id).value {
                ParamValue::Dense(a) => FzWeight::Dense(
                    a.clone().into_dimensionality::<ndarray::Ix2>().expect("rank 2 weight"),
                ),
                ParamValue::Latent(w) => match m.config.twin {
                    Twin::Binary => FzWeight::Binary(weight_binarize(w, lane)),
                    Twin::FullPrecision => FzWeight::Dense(w.shadow().clone()),
                },
            }
        };
        let fz_bn = |bn: Bn| FzBn {
            gamma: store
                .param(bn.gamma)
                .value
                .to_array()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("rank 1"),
            beta: store
                .param(bn.beta)
                .value
                .to_array()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("rank 1"),
            mean: store.buffer(bn.mean).clone(),
            var: store.buffer(bn.var).clone(),
        };
        let name_of = |id: ParamId| store.param(id).name.clone();
        let fz_fp = |l: &FpLbr| FzLbr {
            name: name_of(l.w),
            w: fz_weight(l.w),
            bn: fz_bn(l.bn),
            signed_input: true,
        };
        let fz_bin = |l: &BinLbr| FzLbr {
            name: name_of(l.w),
            w: fz_weight(l.w),
            bn: fz_bn(l.bn),
            signed_input: l.signed_input,
        };
        FrozenModel {
            config: m.config.clone(),
            point_mlp: m.point_mlp.iter().map(&fz_fp).collect(),
            stage_mlps: m.stage_mlps.iter().map(|v| v.iter().map(&fz_fp).collect()).collect(),
            input_block: m.input_block.iter().map(&fz_bin).collect(),
            blocks: m
                .blocks
                .iter()
                .map(|b| FzBlock {
                    wq: (name_of(b.wq), fz_weight(b.wq)),
                    wk: (name_of(b.wk), fz_weight(b.wk)),
                    wv: (name_of(b.wv), fz_weight(b.wv)),
                    offset: fz_bin(&b.offset),
                })
                .collect(),
            out_linear: fz_bin(&m.out_linear),
            head: match &m.head {
                Head::Descriptor => FzHead::Descriptor,
                Head::Classifier { hidden, final_w, final_b } => FzHead::Classifier {
                    hidden: hidden
                        .iter()
                        .map(|&wid| {
                            store
                                .param(wid)
                                .value
                                .to_array()
                                .into_dimensionality::<ndarray::Ix2>()
                                .expect("rank 2")
                        })
                        .collect(),
                    final_w: store
                        .param(*final_w)
                        .value
                        .to_array()
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("rank 2"),
                    final_b: store
                        .param(*final_b)
                        .value
                        .to_array()
                        .into_dimensionality::<ndarray::Ix1>()
                        .expect("rank 1"),
                },
            },
        }
    }

    /// Replace a packed binary weight by parameter name (deploy-checkpoint
    /// loading). Returns false when the name does not match a binary slot.
    pub fn replace_binary(&mut self, name: &str, sb: ScaledBinary) -> bool {
        let mut slots: Vec<(&str, &mut FzWeight)> = Vec::new();
        for l in self.input_block.iter_mut().chain(std::iter::once(&mut self.out_linear)) {
            slots.push((l.name.as_str(), &mut l.w));
        }
        for b in self.blocks.iter_mut() {
            slots.push((b.wq.0.as_str(), &mut b.wq.1));
            slots.push((b.wk.0.as_str(), &mut b.wk.1));
            slots.push((b.wv.0.as_str(), &mut b.wv.1));
            slots.push((b.offset.name.as_str(), &mut b.offset.w));
        }
        for (n, w) in slots {
            if n == name {
                *w = FzWeight::Binary(sb);
                return true;
            }
        }
        false
    }

    /// Packed binary weights by name (deploy-checkpoint saving).
    pub fn binary_weights(&self) -> Vec<(String, &ScaledBinary)> {
        let mut slots: Vec<(&str, &FzWeight)> = Vec::new();
        for l in self.input_block.iter().chain(std::iter::once(&self.out_linear)) {
            slots.push((&l.name, &l.w));
        }
        for b in &self.blocks {
            slots.push((&b.wq.0, &b.wq.1));
            slots.push((&b.wk.0, &b.wk.1));
            slots.push((&b.wv.0, &b.wv.1));
            slots.push((&b.offset.name, &b.offset.w));
        }
        slots
            .into_iter()
            .filter_map(|(n, w)| match w {
                FzWeight::Binary(sb) => Some((n.to_string(), sb)),
                FzWeight::Dense(_) => None,
            })
            .collect()
    }

    fn bn_eval(&self, x: &Array2<f64>, bn: &FzBn) -> Array2<f64> {
        let eps = self.config.bn_eps;
        let inv_std: Array1<f64> = bn.var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let xhat = (*v - bn.mean[j]) * inv_std[j];
                *v = xhat * bn.gamma[j] + bn.beta[j];
            }
        }
        out
    }

    fn linear(&self, x: &Array2<f64>, w: &FzWeight, signed_input: bool) -> Result<Array2<f64>> {
        match w {
            FzWeight::Dense(wm) => Ok(x.dot(&wm.t())),
            FzWeight::Binary(sb) => {
                let ab = activation_binarize(
                    x.view(),
                    signed_input,
                    NONNEG_THRESHOLD,
                    self.config.lane_width,
                )?;
                let ints = bitops::bgemm(&sb.bits, &ab.bits)?;
                let beta = ab.scale[0];
                Ok(Array2::from_shape_fn((x.nrows(), sb.bits.rows()), |(p, i)| {
                    ints.get(i, p) as f64 * sb.scale[i] * beta
                }))
            }
        }
    }

    fn lbr(&self, x: &Array2<f64>, l: &FzLbr) -> Result<Array2<f64>> {
        let y = self.linear(x, &l.w, l.signed_input)?;
        let y = self.bn_eval(&y, &l.bn);
        Ok(y.mapv(|v| v.max(0.0)))
    }

    fn attention(&self, x: &Array2<f64>, b: &FzBlock) -> Result<Array2<f64>> {
        let q = self.linear(x, &b.wq.1, false)?;
        let k = self.linear(x, &b.wk.1, false)?;
        let v = self.linear(x, &b.wv.1, false)?;
        let binary = matches!(self.config.twin, Twin::Binary);
        let energy = if binary {
            let qb = activation_binarize(q.view(), true, NONNEG_THRESHOLD, self.config.lane_width)?;
            let kb = activation_binarize(k.view(), true, NONNEG_THRESHOLD, self.config.lane_width)?;
            let ints = bitops::bgemm(&qb.bits, &kb.bits)?;
            let (bq, bk) = (qb.scale[0], kb.scale[0]);
            Array2::from_shape_fn((q.nrows(), k.nrows()), |(i, j)| {
                ints.get(i, j) as f64 * bq * bk
            })
        } else {
            q.dot(&k.t())
        };
        let mut attn = softmax_rows(&energy);
        l1_normalize_cols(&mut attn, EPS_L1_NORM);
        let av = if binary {
            let m = attn.nrows();
            let d = v.ncols();
            let abits = match self.config.attn_threshold {
                AttnThreshold::PaperLiteral => BitMatrix::from_bit_fn(
                    m,
                    m,
                    self.config.lane_width,
                    Convention::NonNeg,
                    |i, j| attn[(i, j)] >= NONNEG_THRESHOLD,
                ),
                AttnThreshold::MedianPerRow => {
                    let t = row_medians(&attn.clone().into_dyn());
                    BitMatrix::from_bit_fn(m, m, self.config.lane_width, Convention::NonNeg, |i, j| {
                        attn[(i, j)] >= t[i]
                    })
                }
            };
            let ba = attn.iter().map(|v| v.abs()).sum::<f64>() / attn.len() as f64;
            let bv = v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
            let vt_bits = BitMatrix::from_bit_fn(d, m, self.config.lane_width, Convention::Signed, |f, p| {
                v[(p, f)] >= 0.0
            });
            let ints = bitops::bgemm(&abits, &vt_bits)?;
            Array2::from_shape_fn((m, d), |(i, f)| ints.get(i, f) as f64 * ba * bv)
        } else {
            attn.dot(&v)
        };
        let off = x - &av;
        let off = self.lbr(&off, &b.offset)?;
        Ok(x + &off)
    }

    fn backbone(&self, pc: &PointCloud, fps_seed: usize) -> Result<Array2<f64>> {
        let pcn = normalize(pc);
        let plan = grouping_plan(&pcn, &self.config.neighbor, fps_seed)?;
        let mut x = pcn.points.clone();
        for l in &self.point_mlp {
            x = self.lbr(&x, l)?;
        }
        for (si, group) in plan.stages.iter().enumerate() {
            let m = group.center_indices.len();
            let k = group.k;
            let mut y = relative_features_dense(&x, group);
            for l in &self.stage_mlps[si] {
                y = self.lbr(&y, l)?;
            }
            x = neighborhood_maxpool_dense(&y, m, k);
        }
        for l in &self.input_block {
            x = self.lbr(&x, l)?;
        }
        let mut outs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = self.attention(&x, b)?;
            outs.push(x.clone());
        }
        let views: Vec<_> = outs.iter().map(|a| a.view()).collect();
        let cat = ndarray::concatenate(Axis(1), &views).expect("concat block outputs");
        self.lbr(&cat, &self.out_linear)
    }

    /// 256-dim L2-normalized global descriptor (descriptor head).
    pub fn describe(&self, pc: &PointCloud, fps_seed: usize) -> Result<Array1<f64>> {
        if !matches!(self.head, FzHead::Descriptor) {
            return Err(Error::Contract("describe requires a descriptor head".into()));
        }
        let y = self.backbone(pc, fps_seed)?;
        let mut d = max_over_rows(&y);
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        d.mapv_inplace(|v| v / norm);
        Ok(d)
    }

    /// Class logits (classifier head).
    pub fn classify(&self, pc: &PointCloud, fps_seed: usize) -> Result<Array1<f64>> {
        let FzHead::Classifier { hidden, final_w, final_b } = &self.head else {
            return Err(Error::Contract("classify requires a classifier head".into()));
        };
        let y = self.backbone(pc, fps_seed)?;
        let maxp = max_over_rows(&y);
        let meanp = y.mean_axis(Axis(0)).expect("non-empty");
        let mut pooled = Array2::<f64>::zeros((1, maxp.len() + meanp.len()));
        for (j, v) in maxp.iter().chain(meanp.iter()).enumerate() {
            pooled[(0, j)] = *v;
        }
        let mut h = pooled;
        for w in hidden {
            h = h.dot(&w.t()).mapv(|v| v.max(0.0));
        }
        let logits = h.dot(&final_w.t()) + final_b;
        Ok(logits.row(0).to_owned())
    }
}

fn max_over_rows(x: &Array2<f64>) -> Array1<f64> {
    Array1::from_shape_fn(x.ncols(), |j| {
        x.column(j).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    })
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn l1_normalize_cols(x: &mut Array2<f64>, eps: f64) {
    let sums: Vec<f64> = (0..x.ncols()).map(|j| x.column(j).sum() + eps).collect();
    for mut row in x.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v /= sums[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointops::PointCloud;

    fn small_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0)))
    }

    /// Run a few train-mode forwards so batch-norm running statistics leave
    /// their init values; a freshly initialized binary twin is degenerate in
    /// eval mode (identity BN + 0.5 threshold zero the activations).
    fn warm_up(m: &mut BptModel, seed: u64) {
        for s in 0..3 {
            let pc = small_cloud(seed + s, 48);
            let g = Graph::new();
            let mut bind = m.bind();
            m.forward_graph(&g, &mut bind, &pc, Mode::Train, 0).unwrap();
        }
    }

    #[test]
    fn twins_share_initialization_outside_transformer() {
        let mut cfg_b = ModelConfig::desk_classifier(4);
        cfg_b.twin = Twin::Binary;
        let mut cfg_f = cfg_b.clone();
        cfg_f.twin = Twin::FullPrecision;
        let mb = BptModel::init(cfg_b, 42).unwrap();
        let mf = BptModel::init(cfg_f, 42).unwrap();
        for ((_, a), (_, b)) in mb.store().iter().zip(mf.store().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.to_array(), b.value.to_array());
        }
    }

    #[test]
    fn binarized_set_is_exactly_the_transformer_module() {
        let m = BptModel::init(ModelConfig::desk_classifier(4), 1).unwrap();
        for (_, e) in m.store().iter() {
            match &e.value {
                ParamValue::Latent(_) => assert!(
                    e.name.starts_with("tf."),
                    "latent weight outside transformer: {}",
                    e.name
                ),
                ParamValue::Dense(_) => assert!(
                    !e.name.starts_with("tf.") || e.name.contains(".bn."),
                    "dense non-BN weight inside transformer: {}",
                    e.name
                ),
            }
        }
    }

    #[test]
    fn descriptor_is_unit_norm_and_deterministic() {
        let mut m = BptModel::init(ModelConfig::desk_descriptor(), 3).unwrap();
        warm_up(&mut m, 100);
        let pc = small_cloud(7, 64);
        let g = Graph::new();
        let mut bind = m.bind();
        let d1 = m.describe_graph(&g, &mut bind, &pc, Mode::Eval, 0).unwrap().value();
        let norm: f64 = d1.iter().map(|v| v * v).sum::<f64>();
        assert!((norm - 1.0).abs() < 1e-9);
        assert_eq!(d1.len(), 256);

        let frozen = FrozenModel::from_model(&m);
        let d2 = frozen.describe(&pc, 0).unwrap();
        let d3 = frozen.describe(&pc, 0).unwrap();
        assert_eq!(d2, d3);
    }

    #[test]
    fn two_path_equivalence_end_to_end() {
        let mut m = BptModel::init(ModelConfig::desk_descriptor(), 11).unwrap();
        warm_up(&mut m, 200);
        let frozen = FrozenModel::from_model(&m);
        for seed in 0..5 {
            let pc = small_cloud(seed, 48);
            let g = Graph::new();
            let mut bind = m.bind();
            let dense = m.describe_graph(&g, &mut bind, &pc, Mode::Eval, 0).unwrap().value();
            let packed = frozen.describe(&pc, 0).unwrap();
            for (a, b) in dense.iter().zip(packed.iter()) {
                let denom = a.abs().max(b.abs()).max(1e-9);
                assert!((a - b).abs() / denom < 1e-6, "dense {a} vs packed {b}");
            }
        }
    }

    #[test]
    fn classifier_logit_shape_and_determinism() {
        let mut m = BptModel::init(ModelConfig::desk_classifier(4), 5).unwrap();
        let pc = small_cloud(9, 64);
        let g = Graph::new();
        let mut bind = m.bind();
        let l1 = m.forward_graph(&g, &mut bind, &pc, Mode::Eval, 0).unwrap().value();
        assert_eq!(l1.shape(), &[4]);
        let g2 = Graph::new();
        let mut bind2 = m.bind();
        let l2 = m.forward_graph(&g2, &mut bind2, &pc, Mode::Eval, 0).unwrap().value();
        assert_eq!(l1, l2);
    }

    #[test]
    fn config_invariants_enforced() {
        let mut cfg = ModelConfig::desk_descriptor();
        cfg.n_blocks = 3;
        assert!(BptModel::init(cfg, 0).is_err());
        let mut cfg = ModelConfig::desk_descriptor();
        cfg.head = HeadConfig::Descriptor { dim: 128 };
        assert!(BptModel::init(cfg, 0).is_err());
    }
}

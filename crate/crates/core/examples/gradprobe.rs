use bpt_core::autodiff::Graph;
use bpt_core::learning::{smoothed_one_hot, soft_cross_entropy_graph};
use bpt_core::model::{BptModel, Mode, ModelConfig, Twin};
use bpt_core::pointops::PointCloud;
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() {
    for twin in [Twin::FullPrecision, Twin::Binary] {
        let mut cfg = ModelConfig::desk_classifier(4);
        cfg.twin = twin;
        let mut m = BptModel::init(cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clouds: Vec<PointCloud> = (0..8)
            .map(|_| PointCloud::new(Array2::from_shape_fn((256, 3), |_| rng.random_range(-1.0..1.0))))
            .collect();
        let refs: Vec<&PointCloud> = clouds.iter().collect();
        let g = Graph::new();
        let mut bind = m.bind();
        let logits = m.forward_batch_graph(&g, &mut bind, &refs, Mode::Train, 0).unwrap();
        let mut losses = vec![];
        for l in &logits {
            let target = smoothed_one_hot(4, 2, 0.2);
            losses.push(soft_cross_entropy_graph(&g, l, &target).unwrap());
        }
        let total = losses.iter().skip(1).fold(losses[0].clone(), |a, b| a.add(b).unwrap()).scale(1.0/8.0);
        g.backward(&total).unwrap();
        let mut tot = 0.0;
        let mut worst: (String, f64) = (String::new(), 0.0);
        for (id, e) in m.store().iter() {
            if let Some(gr) = bind.grad(id) {
                let n = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
                tot += n * n;
                if n > worst.1 { worst = (e.name.clone(), n); }
            }
        }
        println!("{twin:?}: loss {:.4} global {:.3e} worst {} {:.3e}", total.scalar_value(), tot.sqrt(), worst.0, worst.1);
    }
}

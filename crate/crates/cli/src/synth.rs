//! Synthetic desk-scale datasets: parametric shape families for
//! classification and structured random scenes with revisits for place
//! recognition.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use bpt_core::learning::{ClassificationSet, PlaceSet};
use bpt_core::pointops::PointCloud;

use crate::data::{DatasetManifest, ManifestEntry, MANIFEST_FORMAT};

pub const SHAPE_FAMILIES: [&str; 6] = ["sphere", "cube", "cylinder", "torus", "cone", "plane"];

fn sample_shape(family: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match family {
        0 => {
            // sphere surface
            let z: f64 = rng.random_range(-1.0..1.0);
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            [r * phi.cos(), r * phi.sin(), z]
        }
        1 => {
            // cube surface
            let face = rng.random_range(0..6);
            let (u, v): (f64, f64) =
                (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            match face {
                0 => [1.0, u, v],
                1 => [-1.0, u, v],
                2 => [u, 1.0, v],
                3 => [u, -1.0, v],
                4 => [u, v, 1.0],
                _ => [u, v, -1.0],
            }
        }
        2 => {
            // cylinder: lateral 4π, caps π each
            let pick = rng.random_range(0.0..6.0);
            if pick < 4.0 {
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                [phi.cos(), phi.sin(), rng.random_range(-1.0..1.0)]
            } else {
                let r = rng.random::<f64>().sqrt();
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let z = if pick < 5.0 { 1.0 } else { -1.0 };
                [r * phi.cos(), r * phi.sin(), z]
            }
        }
        3 => {
            // torus R=1, r=0.35 with area-correct rejection on the tube angle
            let big_r = 1.0;
            let small_r = 0.35;
            let u = rng.random_range(0.0..std::f64::consts::TAU);
            let v = loop {
                let v = rng.random_range(0.0..std::f64::consts::TAU);
                let accept = (big_r + small_r * v.cos()) / (big_r + small_r);
                if rng.random::<f64>() < accept {
                    break v;
                }
            };
            [
                (big_r + small_r * v.cos()) * u.cos(),
                (big_r + small_r * v.cos()) * u.sin(),
                small_r * v.sin(),
            ]
        }
        4 => {
            // cone: lateral √2·π vs base π
            let pick = rng.random_range(0.0..(std::f64::consts::SQRT_2 + 1.0));
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            if pick < std::f64::consts::SQRT_2 {
                let s = rng.random::<f64>().sqrt();
                [s * phi.cos(), s * phi.sin(), 1.0 - s]
            } else {
                let r = rng.random::<f64>().sqrt();
                [r * phi.cos(), r * phi.sin(), 0.0]
            }
        }
        _ => {
            // plane patch
            [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0]
        }
    }
}

fn yaw_rotate(p: [f64; 3], theta: f64) -> [f64; 3] {
    let (s, c) = theta.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

#[derive(Debug, Clone)]
pub struct SynthClassification {
    pub train: ClassificationSet,
    pub test: ClassificationSet,
    pub manifest: DatasetManifest,
    /// Clouds in manifest entry order (train split first, then test).
    pub clouds: Vec<PointCloud>,
}

/// Parametric shape classification set with per-sample yaw/scale/jitter
/// augmentation. Deterministic by seed.
pub fn gen_synthetic_classification(
    n_classes: usize,
    n_train_per_class: usize,
    n_test_per_class: usize,
    points_per_cloud: usize,
    seed: u64,
) -> SynthClassification {
    assert!(
        n_classes >= 1 && n_classes <= SHAPE_FAMILIES.len(),
        "up to {} shape families",
        SHAPE_FAMILIES.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let make_cloud = |family: usize, rng: &mut ChaCha8Rng| -> PointCloud {
        let scale = rng.random_range(0.8..1.2);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let mut pts = Array2::<f64>::zeros((points_per_cloud, 3));
        for i in 0..points_per_cloud {
            let p = yaw_rotate(sample_shape(family, rng), theta);
            for j in 0..3 {
                pts[(i, j)] = scale * p[j] + 0.01 * normal(rng);
            }
        }
        PointCloud::new(pts)
    };

    let mut clouds = Vec::new();
    let mut entries = Vec::new();
    let mut train = ClassificationSet { clouds: vec![], labels: vec![], num_classes: n_classes };
    let mut test = ClassificationSet { clouds: vec![], labels: vec![], num_classes: n_classes };
    for (split, per_class, set_first) in
        [("train", n_train_per_class, true), ("test", n_test_per_class, false)]
    {
        for class in 0..n_classes {
            for s in 0..per_class {
                let pc = make_cloud(class, &mut rng);
                entries.push(ManifestEntry {
                    file: format!("clouds/{split}_{class}_{s:04}.bptp"),
                    label: Some(class),
                    pose: None,
                    split: split.to_string(),
                    sample_points: None,
                });
                if set_first {
                    train.clouds.push(pc.clone());
                    train.labels.push(class);
                } else {
                    test.clouds.push(pc.clone());
                    test.labels.push(class);
                }
                clouds.push(pc);
            }
        }
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.to_string(),
        task: "classification".to_string(),
        num_classes: Some(n_classes),
        pos_threshold: None,
        neg_threshold: None,
        normalized: false,
        entries,
    };
    SynthClassification { train, test, manifest, clouds }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller; two uniforms per draw keeps the stream simple
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generation knobs for the synthetic place benchmark.
#[derive(Debug, Clone)]
pub struct PlacesParams {
    pub n_places: usize,
    pub revisits_per_place: usize,
    pub points_per_cloud: usize,
    /// Revisit yaw is drawn from ±yaw_range.
    pub yaw_range: f64,
    pub noise_sigma: f64,
    /// Angular width of the occluded sector is drawn from [0, this].
    pub dropout_max_angle: f64,
    pub grid_spacing: f64,
    pub pos_threshold: f64,
    pub neg_threshold: f64,
}

impl Default for PlacesParams {
    fn default() -> Self {
        PlacesParams {
            n_places: 50,
            revisits_per_place: 5,
            points_per_cloud: 256,
            yaw_range: std::f64::consts::PI,
            noise_sigma: 0.01,
            dropout_max_angle: std::f64::consts::PI / 3.0,
            grid_spacing: 5.0,
            pos_threshold: 0.5,
            neg_threshold: 2.0,
        }
    }
}

/// One scene primitive: a box or a vertical cylinder sitting on the ground.
#[derive(Debug, Clone)]
enum Primitive {
    Box { center: [f64; 2], half: [f64; 3] },
    Cylinder { center: [f64; 2], radius: f64, height: f64 },
}

impl Primitive {
    fn area(&self) -> f64 {
        match self {
            Primitive::Box { half, .. } => {
                8.0 * (half[0] * half[1] + half[0] * half[2] + half[1] * half[2])
            }
            Primitive::Cylinder { radius, height, .. } => {
                std::f64::consts::TAU * radius * height + 2.0 * std::f64::consts::PI * radius * radius
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match self {
            Primitive::Box { center, half } => {
                let p = sample_shape(1, rng); // cube surface in [−1,1]³
                [
                    center[0] + p[0] * half[0],
                    center[1] + p[1] * half[1],
                    half[2] + p[2] * half[2],
                ]
            }
            Primitive::Cylinder { center, radius, height } => {
                let p = sample_shape(2, rng); // unit cylinder, z ∈ [−1,1]
                [
                    center[0] + radius * p[0],
                    center[1] + radius * p[1],
                    height * 0.5 * (p[2] + 1.0),
                ]
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthPlaces {
    pub set: PlaceSet,
    pub splits: Vec<String>,
    pub manifest: DatasetManifest,
}

/// Structured random scenes on a pose grid; each revisit re-observes its
/// scene under yaw rotation, Gaussian noise, and sector occlusion dropout.
/// Revisit 0 of every place is tagged "query", the rest "database".
pub fn gen_synthetic_places(params: &PlacesParams, seed: u64) -> SynthPlaces {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = (params.n_places as f64).sqrt().ceil() as usize;
    let mut scenes: Vec<Vec<Primitive>> = Vec::with_capacity(params.n_places);
    for _ in 0..params.n_places {
        let n_prims = rng.random_range(4..9);
        let mut prims = Vec::with_capacity(n_prims + 1);
        // ground patch as a thin box
        prims.push(Primitive::Box { center: [0.0, 0.0], half: [1.6, 1.6, 0.02] });
        for _ in 0..n_prims {
            let center = [rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2)];
            if rng.random::<bool>() {
                prims.push(Primitive::Box {
                    center,
                    half: [
                        rng.random_range(0.1..0.45),
                        rng.random_range(0.1..0.45),
                        rng.random_range(0.2..0.9),
                    ],
                });
            } else {
                prims.push(Primitive::Cylinder {
                    center,
                    radius: rng.random_range(0.08..0.35),
                    height: rng.random_range(0.4..1.6),
                });
            }
        }
        scenes.push(prims);
    }

    let mut clouds = Vec::new();
    let mut poses = Vec::new();
    let mut splits = Vec::new();
    let mut entries = Vec::new();
    for (pi, prims) in scenes.iter().enumerate() {
        let pose = [
            (pi % cols) as f64 * params.grid_spacing,
            (pi / cols) as f64 * params.grid_spacing,
        ];
        let areas: Vec<f64> = prims.iter().map(|p| p.area()).collect();
        let total: f64 = areas.iter().sum();
        for rev in 0..params.revisits_per_place {
            let theta = rng.random_range(-params.yaw_range..params.yaw_range);
            let sector_start = rng.random_range(0.0..std::f64::consts::TAU);
            let sector_width = rng.random_range(0.0..params.dropout_max_angle);
            let mut pts = Array2::<f64>::zeros((params.points_per_cloud, 3));
            let mut filled = 0usize;
            let mut guard = 0usize;
            while filled < params.points_per_cloud {
                guard += 1;
                let r = rng.random_range(0.0..total);
                let mut acc = 0.0;
                let mut idx = 0;
                for (i, a) in areas.iter().enumerate() {
                    acc += a;
                    if r < acc {
                        idx = i;
                        break;
                    }
                }
                let p = prims[idx].sample(&mut rng);
                // occlusion: drop points whose azimuth falls in the sector
                let az = p[1].atan2(p[0]).rem_euclid(std::f64::consts::TAU);
                let rel = (az - sector_start).rem_euclid(std::f64::consts::TAU);
                if rel < sector_width && guard < params.points_per_cloud * 20 {
                    continue;
                }
                let p = yaw_rotate(p, theta);
                for j in 0..3 {
                    pts[(filled, j)] = p[j] + params.noise_sigma * normal(&mut rng);
                }
                filled += 1;
            }
            let split = if rev == 0 { "query" } else { "database" };
            entries.push(ManifestEntry {
                file: format!("clouds/place{pi:03}_rev{rev}.bptp"),
                label: None,
                pose: Some(pose),
                split: split.to_string(),
                sample_points: None,
            });
            clouds.push(PointCloud::new(pts));
            poses.push(pose);
            splits.push(split.to_string());
        }
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.to_string(),
        task: "place-recognition".to_string(),
        num_classes: None,
        pos_threshold: Some(params.pos_threshold),
        neg_threshold: Some(params.neg_threshold),
        normalized: false,
        entries,
    };
    SynthPlaces {
        set: PlaceSet {
            clouds,
            poses,
            pos_threshold: params.pos_threshold,
            neg_threshold: params.neg_threshold,
        },
        splits,
        manifest,
    }
}

/// Symmetric chamfer distance between clouds (mean nearest-neighbor
/// distance, both directions).
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let one_way = |x: &PointCloud, y: &PointCloud| -> f64 {
        let mut sum = 0.0;
        for xi in x.points.rows() {
            let mut best = f64::INFINITY;
            for yi in y.points.rows() {
                let d = (xi[0] - yi[0]).powi(2) + (xi[1] - yi[1]).powi(2) + (xi[2] - yi[2]).powi(2);
                if d < best {
                    best = d;
                }
            }
            sum += best.sqrt();
        }
        sum / x.len() as f64
    };
    0.5 * (one_way(a, b) + one_way(b, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use bpt_core::pointops::normalize;

    #[test]
    fn classification_is_deterministic_and_distinct() {
        let a = gen_synthetic_classification(4, 3, 2, 64, 9);
        let b = gen_synthetic_classification(4, 3, 2, 64, 9);
        for (x, y) in a.clouds.iter().zip(b.clouds.iter()) {
            assert_eq!(x.points, y.points);
        }
        assert_eq!(a.train.clouds.len(), 12);
        assert_eq!(a.test.clouds.len(), 8);
        assert_eq!(a.manifest.entries.len(), 20);
    }

    #[test]
    fn inter_class_chamfer_exceeds_intra_class() {
        let d = gen_synthetic_classification(4, 6, 0, 128, 21);
        let norm: Vec<PointCloud> = d.train.clouds.iter().map(normalize).collect();
        let mut intra = (0.0, 0usize);
        let mut inter = (0.0, 0usize);
        for i in 0..norm.len() {
            for j in (i + 1)..norm.len() {
                let c = chamfer(&norm[i], &norm[j]);
                if d.train.labels[i] == d.train.labels[j] {
                    intra = (intra.0 + c, intra.1 + 1);
                } else {
                    inter = (inter.0 + c, inter.1 + 1);
                }
            }
        }
        let intra_mean = intra.0 / intra.1 as f64;
        let inter_mean = inter.0 / inter.1 as f64;
        assert!(
            inter_mean > intra_mean,
            "inter {inter_mean:.4} must exceed intra {intra_mean:.4}"
        );
    }

    #[test]
    fn places_poses_and_invariants() {
        let params = PlacesParams {
            n_places: 6,
            revisits_per_place: 3,
            points_per_cloud: 64,
            ..PlacesParams::default()
        };
        let d = gen_synthetic_places(&params, 5);
        assert_eq!(d.set.clouds.len(), 18);
        // revisits share a pose
        for p in 0..6 {
            for r in 1..3 {
                assert_eq!(d.set.poses[p * 3], d.set.poses[p * 3 + r]);
            }
        }
        // same-place pairs within positive radius, cross-place beyond negative
        for i in 0..18 {
            for j in 0..18 {
                let same = i / 3 == j / 3;
                let dist = d.set.pose_dist(i, j);
                if same {
                    assert!(dist < params.pos_threshold);
                } else {
                    assert!(dist > params.neg_threshold);
                }
            }
        }
        // each place has exactly one query revisit
        let queries = d.splits.iter().filter(|s| s.as_str() == "query").count();
        assert_eq!(queries, 6);
    }

    #[test]
    fn two_places_minimum_viable() {
        let params = PlacesParams {
            n_places: 2,
            revisits_per_place: 2,
            points_per_cloud: 32,
            ..PlacesParams::default()
        };
        let d = gen_synthetic_places(&params, 1);
        assert_eq!(d.set.clouds.len(), 4);
    }
}

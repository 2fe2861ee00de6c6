//! Dataset ingestion: the OFF mesh text format (with area-weighted surface
//! sampling), the native binary point-cloud container, and dataset manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use bpt_core::learning::{ClassificationSet, PlaceSet};
use bpt_core::pointops::PointCloud;

/// A parsed triangle mesh: vertices plus triangulated faces.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

/// Parse the OFF mesh interchange text format. Polygon faces are fan-
/// triangulated. Errors carry the offending line number.
pub fn parse_off(text: &str) -> anyhow::Result<Mesh> {
    let mut tokens: Vec<(usize, &str)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let body = match line.find('#') {
            Some(i) => &line[..i],
            None => line,
        };
        for tok in body.split_whitespace() {
            tokens.push((ln + 1, tok));
        }
    }
    let mut pos = 0usize;
    let mut next = |what: &str| -> anyhow::Result<(usize, &str)> {
        let t = tokens
            .get(pos)
            .copied()
            .ok_or_else(|| anyhow!("unexpected end of file while reading {what}"))?;
        pos += 1;
        Ok(t)
    };

    let (ln, magic) = next("header")?;
    // Some writers glue the counts to the OFF keyword line; token-wise both parse.
    if magic != "OFF" {
        bail!("line {ln}: expected OFF header, found {magic:?}");
    }
    let parse_count = |(ln, tok): (usize, &str), what: &str| -> anyhow::Result<usize> {
        tok.parse::<usize>()
            .map_err(|_| anyhow!("line {ln}: non-numeric {what} count {tok:?}"))
    };
    let nv = parse_count(next("vertex count")?, "vertex")?;
    let nf = parse_count(next("face count")?, "face")?;
    let _ne = parse_count(next("edge count")?, "edge")?;

    let mut vertices = Vec::with_capacity(nv);
    for i in 0..nv {
        let mut v = [0.0f64; 3];
        for c in v.iter_mut() {
            let (ln, tok) = next("vertex coordinate")
                .with_context(|| format!("vertex {i} of {nv}"))?;
            *c = tok
                .parse::<f64>()
                .map_err(|_| anyhow!("line {ln}: non-numeric vertex coordinate {tok:?}"))?;
        }
        if v.iter().any(|c| !c.is_finite()) {
            bail!("vertex {i}: non-finite coordinate");
        }
        vertices.push(v);
    }

    let mut triangles = Vec::new();
    for f in 0..nf {
        let (ln, tok) = next("face arity").with_context(|| format!("face {f} of {nf}"))?;
        let arity: usize = tok
            .parse()
            .map_err(|_| anyhow!("line {ln}: non-numeric face arity {tok:?}"))?;
        if arity < 3 {
            bail!("line {ln}: face {f} has arity {arity} < 3");
        }
        let mut idx = Vec::with_capacity(arity);
        for _ in 0..arity {
            let (ln, tok) = next("face index")?;
            let i: usize = tok
                .parse()
                .map_err(|_| anyhow!("line {ln}: non-numeric face index {tok:?}"))?;
            if i >= nv {
                bail!("line {ln}: face index {i} out of range (nv = {nv})");
            }
            idx.push(i);
        }
        for t in 1..arity - 1 {
            triangles.push([idx[0], idx[t], idx[t + 1]]);
        }
    }
    if pos != tokens.len() {
        let (ln, tok) = tokens[pos];
        bail!("line {ln}: trailing token {tok:?} after {nf} faces");
    }
    Ok(Mesh { vertices, triangles })
}

impl Mesh {
    pub fn vertex_cloud(&self) -> anyhow::Result<PointCloud> {
        if self.vertices.is_empty() {
            bail!("mesh has no vertices");
        }
        Ok(PointCloud::new(Array2::from_shape_fn((self.vertices.len(), 3), |(i, j)| {
            self.vertices[i][j]
        })))
    }

    fn triangle_area(&self, t: [usize; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cx = u[1] * v[2] - u[2] * v[1];
        let cy = u[2] * v[0] - u[0] * v[2];
        let cz = u[0] * v[1] - u[1] * v[0];
        0.5 * (cx * cx + cy * cy + cz * cz).sqrt()
    }

    /// Uniform area-weighted surface sampling, deterministic by seed.
    pub fn sample_surface(&self, n: usize, seed: u64) -> anyhow::Result<PointCloud> {
        if self.triangles.is_empty() {
            bail!("mesh has no faces to sample");
        }
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for &t in &self.triangles {
            total += self.triangle_area(t);
            cumulative.push(total);
        }
        if total <= 0.0 {
            bail!("mesh has zero surface area");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Array2::<f64>::zeros((n, 3));
        for i in 0..n {
            let r = rng.random_range(0.0..total);
            let ti = cumulative.partition_point(|&c| c < r).min(self.triangles.len() - 1);
            let [a, b, c] = self.triangles[ti].map(|v| self.vertices[v]);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
            for j in 0..3 {
                pts[(i, j)] = wa * a[j] + wb * b[j] + wc * c[j];
            }
        }
        Ok(PointCloud::new(pts))
    }
}

// --- Native binary point-cloud container ("BPTP") ---------------------------

pub const CLOUD_MAGIC: &[u8; 4] = b"BPTP";
pub const CLOUD_VERSION: u32 = 1;

pub fn write_cloud(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + pc.len() * 12);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    out.extend_from_slice(&(pc.len() as u32).to_le_bytes());
    for row in pc.points.rows() {
        for &v in row.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_cloud(bytes: &[u8]) -> anyhow::Result<PointCloud> {
    if bytes.len() < 12 || &bytes[0..4] != CLOUD_MAGIC {
        bail!("not a BPTP point-cloud file");
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CLOUD_VERSION {
        bail!("unsupported point-cloud version {version}");
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let need = 12 + n * 12;
    if bytes.len() != need {
        bail!("point-cloud payload length {} != expected {need}", bytes.len());
    }
    let mut pts = Array2::<f64>::zeros((n, 3));
    for i in 0..n {
        for j in 0..3 {
            let off = 12 + (i * 3 + j) * 4;
            pts[(i, j)] =
                f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
        }
    }
    Ok(PointCloud::new(pts))
}

// --- Dataset manifest ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pose: Option<[f64; 2]>,
    pub split: String,
    /// Sample this many surface points when the file is a mesh.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_points: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub format: String,
    pub task: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pos_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neg_threshold: Option<f64>,
    pub normalized: bool,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FORMAT: &str = "bpt-dataset-v1";

impl DatasetManifest {
    pub fn validate(&self, base: &Path) -> anyhow::Result<()> {
        if self.format != MANIFEST_FORMAT {
            bail!("unknown manifest format {:?}", self.format);
        }
        match self.task.as_str() {
            "classification" => {
                if self.num_classes.is_none() {
                    bail!("classification manifest needs num_classes");
                }
                for e in &self.entries {
                    if e.label.is_none() {
                        bail!("entry {} lacks a label", e.file);
                    }
                }
            }
            "place-recognition" => {
                if self.pos_threshold.is_none() || self.neg_threshold.is_none() {
                    bail!("place manifest needs pos_threshold and neg_threshold");
                }
                for e in &self.entries {
                    if e.pose.is_none() {
                        bail!("entry {} lacks a pose", e.file);
                    }
                }
            }
            t => bail!("unknown task {t:?}"),
        }
        for e in &self.entries {
            let p = base.join(&e.file);
            if !p.exists() {
                bail!("referenced file missing: {}", p.display());
            }
        }
        Ok(())
    }
}

fn load_entry_cloud(base: &Path, e: &ManifestEntry, seed: u64) -> anyhow::Result<PointCloud> {
    let path = base.join(&e.file);
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("");
    match ext {
        "off" => {
            let text = fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            let mesh = parse_off(&text).with_context(|| path.display().to_string())?;
            match e.sample_points {
                Some(n) => mesh.sample_surface(n, seed),
                None => mesh.vertex_cloud(),
            }
        }
        "bptp" => {
            let bytes =
                fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            read_cloud(&bytes).with_context(|| path.display().to_string())
        }
        other => bail!("{}: unsupported cloud extension {other:?}", path.display()),
    }
}

/// Classification dataset loaded from a manifest: train and test splits.
pub struct LoadedClassification {
    pub train: ClassificationSet,
    pub test: ClassificationSet,
}

pub fn load_classification(
    manifest_path: &Path,
    seed: u64,
) -> anyhow::Result<LoadedClassification> {
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let manifest: DatasetManifest = serde_json::from_str(
        &fs::read_to_string(manifest_path)
            .with_context(|| format!("reading {}", manifest_path.display()))?,
    )?;
    manifest.validate(&base)?;
    if manifest.task != "classification" {
        bail!("manifest task is {:?}, expected classification", manifest.task);
    }
    let num_classes = manifest.num_classes.unwrap();
    let mut sets = std::collections::BTreeMap::<String, ClassificationSet>::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        let cloud = load_entry_cloud(&base, e, seed.wrapping_add(i as u64))?;
        let set = sets.entry(e.split.clone()).or_insert_with(|| ClassificationSet {
            clouds: vec![],
            labels: vec![],
            num_classes,
        });
        set.clouds.push(cloud);
        set.labels.push(e.label.unwrap());
    }
    let train = sets
        .remove("train")
        .ok_or_else(|| anyhow!("manifest has no train split"))?;
    let test = sets.remove("test").ok_or_else(|| anyhow!("manifest has no test split"))?;
    Ok(LoadedClassification { train, test })
}

/// Place-recognition dataset loaded from a manifest, with per-entry splits
/// ("database" / "query").
pub struct LoadedPlaces {
    pub set: PlaceSet,
    pub splits: Vec<String>,
}

pub fn load_places(manifest_path: &Path, seed: u64) -> anyhow::Result<LoadedPlaces> {
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let manifest: DatasetManifest = serde_json::from_str(
        &fs::read_to_string(manifest_path)
            .with_context(|| format!("reading {}", manifest_path.display()))?,
    )?;
    manifest.validate(&base)?;
    if manifest.task != "place-recognition" {
        bail!("manifest task is {:?}, expected place-recognition", manifest.task);
    }
    let mut clouds = Vec::new();
    let mut poses = Vec::new();
    let mut splits = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        clouds.push(load_entry_cloud(&base, e, seed.wrapping_add(i as u64))?);
        poses.push(e.pose.unwrap());
        splits.push(e.split.clone());
    }
    Ok(LoadedPlaces {
        set: PlaceSet {
            clouds,
            poses,
            pos_threshold: manifest.pos_threshold.unwrap(),
            neg_threshold: manifest.neg_threshold.unwrap(),
        },
        splits,
    })
}

/// Write clouds + manifest under `dir` (clouds in `clouds/`).
pub fn write_dataset(
    dir: &Path,
    manifest: &DatasetManifest,
    clouds: &[PointCloud],
) -> anyhow::Result<PathBuf> {
    assert_eq!(manifest.entries.len(), clouds.len());
    fs::create_dir_all(dir.join("clouds"))?;
    for (e, pc) in manifest.entries.iter().zip(clouds.iter()) {
        fs::write(dir.join(&e.file), write_cloud(pc))?;
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(manifest)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL_OFF: &str = "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";

    #[test]
    fn parse_minimal_off() {
        let mesh = parse_off(MINIMAL_OFF).unwrap();
        assert_eq!(mesh.vertices.len(), 3);
        assert_eq!(mesh.triangles.len(), 1);
    }

    #[test]
    fn off_count_mismatch_names_line() {
        let bad = "OFF\n4 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
        let err = parse_off(bad).unwrap_err().to_string();
        assert!(err.contains("line"), "error should cite a line: {err}");
    }

    #[test]
    fn off_non_numeric_token_is_an_error() {
        let bad = "OFF\n3 1 0\n0 0 zero\n1 0 0\n0 1 0\n3 0 1 2\n";
        let err = format!("{:#}", parse_off(bad).unwrap_err());
        assert!(err.contains("non-numeric"), "{err}");
    }

    #[test]
    fn off_comments_and_polygons() {
        let text = "OFF # comment\n# full line\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        let mesh = parse_off(text).unwrap();
        assert_eq!(mesh.triangles.len(), 2); // quad fan-triangulated
    }

    #[test]
    fn surface_sampling_centroid_matches_closed_form() {
        // unit right triangle: centroid (1/3, 1/3, 0)
        let mesh = parse_off(MINIMAL_OFF).unwrap();
        let pc = mesh.sample_surface(100_000, 7).unwrap();
        let n = pc.len() as f64;
        let cx = pc.points.column(0).sum() / n;
        let cy = pc.points.column(1).sum() / n;
        assert!((cx - 1.0 / 3.0).abs() < 0.01, "cx {cx}");
        assert!((cy - 1.0 / 3.0).abs() < 0.01, "cy {cy}");

        // determinism by seed
        let a = mesh.sample_surface(64, 3).unwrap();
        let b = mesh.sample_surface(64, 3).unwrap();
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn cloud_container_roundtrip() {
        let pc = PointCloud::new(Array2::from_shape_fn((17, 3), |(i, j)| {
            (i as f64 * 0.25 - j as f64) as f32 as f64
        }));
        let bytes = write_cloud(&pc);
        let back = read_cloud(&bytes).unwrap();
        assert_eq!(back.points, pc.points);
        assert!(read_cloud(&bytes[..8]).is_err());
    }
}

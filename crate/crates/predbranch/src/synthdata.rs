//! Deterministic synthetic long-tailed relation datasets.
//!
//! Each dataset plants a coarse similarity structure: classes are assigned
//! round-robin to `n_latent_clusters` latent clusters, per-class feature means
//! sit inside their cluster, and the cluster centers are scaled so the mean
//! between-cluster distance over the mean within-cluster distance matches
//! `cluster_separation`. Class frequencies follow `rank^(-imbalance_exponent)`
//! with deterministic largest-remainder rounding.
//!
//! The prior vector `z` of a sample is the log of a distribution that puts
//! `Z_PRIOR_IN_CLUSTER_MASS` uniformly on the true class's latent cluster and
//! the remainder uniformly elsewhere, so it narrows candidates down to the
//! cluster without identifying the class.
//!
//! Generation is a pure function of the spec (including its seed): every draw
//! comes from a labeled substream, so per-class generation could run in any
//! order without changing the output.

use crate::numerics::{Matrix, Vector};
use crate::rng::stream;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Share of prior mass placed on the true class's latent cluster in `z`.
pub const Z_PRIOR_IN_CLUSTER_MASS: f64 = 0.6;

/// Supported dataset file format version.
pub const DATASET_FORMAT_VERSION: &str = "1";

/// Full description of a synthetic dataset; generation is determined by this
/// record alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Number of relation classes (`A`).
    pub num_classes: usize,
    /// Feature dimension of `e` and `u` (`P`).
    pub feature_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Power-law exponent over class frequency ranks; 0 means balanced.
    pub imbalance_exponent: f64,
    /// Number of planted similarity clusters.
    pub n_latent_clusters: usize,
    /// Target ratio of between-cluster to within-cluster mean distance.
    pub cluster_separation: f64,
    /// Isotropic noise scale around the class mean.
    pub noise_scale: f64,
    /// Samples grouped per synthetic scene (the recall@K candidate pool).
    pub scene_size: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be positive"));
        }
        if self.n_latent_clusters == 0 || self.n_latent_clusters > self.num_classes {
            return Err(Error::invalid(format!(
                "n_latent_clusters must be in 1..=num_classes, got {}",
                self.n_latent_clusters
            )));
        }
        if !(self.imbalance_exponent >= 0.0) {
            return Err(Error::invalid("imbalance_exponent must be >= 0"));
        }
        if !(self.cluster_separation > 0.0) {
            return Err(Error::invalid("cluster_separation must be > 0"));
        }
        if !(self.noise_scale > 0.0) {
            return Err(Error::invalid("noise_scale must be > 0"));
        }
        if self.scene_size == 0 {
            return Err(Error::invalid("scene_size must be positive"));
        }
        Ok(())
    }

    /// Planted latent cluster of a class (round-robin assignment).
    pub fn planted_cluster(&self, class: usize) -> usize {
        class % self.n_latent_clusters
    }
}

/// One classification instance.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationSample {
    /// Context feature, dim `P`.
    pub e: Vector,
    /// Union feature, dim `P`.
    pub u: Vector,
    /// Log-prior vector over classes, dim `A`.
    pub z: Vector,
    /// Ground-truth class index.
    pub g: usize,
    /// Scene the sample belongs to within its split.
    pub scene_id: usize,
}

/// Per-split class histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitCounts {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// A generated dataset plus the planted means it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub class_means_e: Matrix,
    pub class_means_u: Matrix,
    pub train: Vec<RelationSample>,
    pub val: Vec<RelationSample>,
    pub test: Vec<RelationSample>,
    pub class_counts: SplitCounts,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&[RelationSample]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Integer class counts proportional to the weights, by the largest-remainder
/// method. Ties in fractional parts resolve to the lower index.
fn apportion(total: usize, weights: &[f64]) -> Result<Vec<usize>> {
    if total == 0 {
        return Ok(vec![0; weights.len()]);
    }
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || !(sum > 0.0) {
        return Err(Error::invalid(
            "cannot apportion a nonzero sample request over zero total weight",
        ));
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Sort by descending fractional part, then ascending index.
    order.sort_by(|&i, &j| {
        let fi = quotas[i] - quotas[i].floor();
        let fj = quotas[j] - quotas[j].floor();
        fj.partial_cmp(&fi).unwrap().then(i.cmp(&j))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    Ok(counts)
}

fn frequency_weights(spec: &DatasetSpec) -> Vec<f64> {
    (0..spec.num_classes)
        .map(|rank| ((rank + 1) as f64).powf(-spec.imbalance_exponent))
        .collect()
}

fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Cluster center directions: orthonormalized when they fit in the ambient
/// dimension, plain unit vectors otherwise.
fn cluster_directions(rng: &mut impl Rng, k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v = unit_gaussian(rng, dim);
        if k <= dim {
            loop {
                for d in &dirs {
                    let proj: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                    for (vi, di) in v.iter_mut().zip(d) {
                        *vi -= proj * di;
                    }
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    for vi in &mut v {
                        *vi /= norm;
                    }
                    break;
                }
                v = unit_gaussian(rng, dim);
            }
        }
        dirs.push(v);
    }
    dirs
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Draws per-class means with the requested between/within distance ratio.
fn planted_means(spec: &DatasetSpec, stream_label: &str) -> Matrix {
    let (a, p, k) = (spec.num_classes, spec.feature_dim, spec.n_latent_clusters);
    let mut rng = stream(spec.seed, stream_label);
    let dirs = cluster_directions(&mut rng, k, p);
    let offsets: Vec<Vec<f64>> = (0..a).map(|_| unit_gaussian(&mut rng, p)).collect();

    let mut within = Vec::new();
    let mut cross: Vec<(usize, usize)> = Vec::new();
    for i in 0..a {
        for j in (i + 1)..a {
            if spec.planted_cluster(i) == spec.planted_cluster(j) {
                within.push(euclid(&offsets[i], &offsets[j]));
            } else {
                cross.push((i, j));
            }
        }
    }
    let within_mean = if within.is_empty() {
        1.0
    } else {
        within.iter().sum::<f64>() / within.len() as f64
    };

    let mut scale = 0.0;
    if !cross.is_empty() {
        let target = spec.cluster_separation * within_mean;
        let between_mean = |s: f64| -> f64 {
            let mut acc = 0.0;
            for &(i, j) in &cross {
                let ci = spec.planted_cluster(i);
                let cj = spec.planted_cluster(j);
                let d2: f64 = (0..p)
                    .map(|t| {
                        let diff = s * (dirs[ci][t] - dirs[cj][t]) + offsets[i][t] - offsets[j][t];
                        diff * diff
                    })
                    .sum();
                acc += d2.sqrt();
            }
            acc / cross.len() as f64
        };
        let mut hi = 1.0;
        while between_mean(hi) < target && hi < 1e9 {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if between_mean(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        scale = 0.5 * (lo + hi);
    }

    let mut means = Matrix::zeros(a, p);
    for c in 0..a {
        let dir = &dirs[spec.planted_cluster(c)];
        let row = means.row_mut(c);
        for t in 0..p {
            row[t] = scale * dir[t] + offsets[c][t];
        }
    }
    means
}

/// Log-prior over classes given the true class's latent cluster.
fn log_prior_for_class(spec: &DatasetSpec, class: usize) -> Vector {
    let cluster = spec.planted_cluster(class);
    let in_cluster: Vec<usize> = (0..spec.num_classes)
        .filter(|&c| spec.planted_cluster(c) == cluster)
        .collect();
    let n_in = in_cluster.len();
    let n_out = spec.num_classes - n_in;
    let (mass_in, mass_out) = if n_out == 0 {
        (1.0, 0.0)
    } else {
        (Z_PRIOR_IN_CLUSTER_MASS, 1.0 - Z_PRIOR_IN_CLUSTER_MASS)
    };
    let values: Vec<f64> = (0..spec.num_classes)
        .map(|c| {
            if spec.planted_cluster(c) == cluster {
                (mass_in / n_in as f64).ln()
            } else {
                (mass_out / n_out as f64).ln()
            }
        })
        .collect();
    Vector { values }
}

/// Generates the full dataset described by `spec`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let means_e = planted_means(spec, "synthdata/means/e");
    let means_u = planted_means(spec, "synthdata/means/u");
    let weights = frequency_weights(spec);
    let priors: Vec<Vector> = (0..spec.num_classes)
        .map(|c| log_prior_for_class(spec, c))
        .collect();

    let mut counts = SplitCounts { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    let mut splits: Vec<Vec<RelationSample>> = Vec::with_capacity(3);
    for (split_name, n) in [("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)] {
        let class_counts = apportion(n, &weights)?;
        let mut samples: Vec<RelationSample> = Vec::with_capacity(n);
        for (class, &count) in class_counts.iter().enumerate() {
            let mut rng = stream(
                spec.seed,
                &format!("synthdata/samples/{split_name}/class={class}"),
            );
            for _ in 0..count {
                let draw = |rng: &mut rand_chacha::ChaCha8Rng, mean: &[f64]| {
                    Vector {
                        values: mean
                            .iter()
                            .map(|m| m + spec.noise_scale * rng.sample::<f64, _>(StandardNormal))
                            .collect(),
                    }
                };
                let e = draw(&mut rng, means_e.row(class));
                let u = draw(&mut rng, means_u.row(class));
                samples.push(RelationSample {
                    e,
                    u,
                    z: priors[class].clone(),
                    g: class,
                    scene_id: 0,
                });
            }
        }
        let mut shuffle_rng = stream(spec.seed, &format!("synthdata/shuffle/{split_name}"));
        samples.shuffle(&mut shuffle_rng);
        for (i, s) in samples.iter_mut().enumerate() {
            s.scene_id = i / spec.scene_size;
        }
        match split_name {
            "train" => counts.train = class_counts,
            "val" => counts.val = class_counts,
            _ => counts.test = class_counts,
        }
        splits.push(samples);
    }

    let mut it = splits.into_iter();
    Ok(Dataset {
        spec: spec.clone(),
        class_means_e: means_e,
        class_means_u: means_u,
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
        class_counts: counts,
    })
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------
//
// UTF-8, one JSON document per line.
// Line 1: {"format_version":"1","A":…,"P":…,"scene_size":…,"spec":{…},
//          "class_means_e":[[…]…],"class_means_u":[[…]…]}
// Then one record per sample: [split_tag, scene_id, g, e[…P], u[…P], z[…A]]
// with floats at 17 significant digits.

fn floats_json(values: &[f64]) -> Result<String> {
    let mut out = String::from("[");
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&crate::jsonfmt::fmt_f64(*v)?);
    }
    out.push(']');
    Ok(out)
}

fn matrix_json(m: &Matrix) -> Result<String> {
    let mut out = String::from("[");
    for r in 0..m.rows() {
        if r > 0 {
            out.push(',');
        }
        out.push_str(&floats_json(m.row(r))?);
    }
    out.push(']');
    Ok(out)
}

/// Writes a dataset to `path`; `read_dataset` restores it exactly.
pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let spec_json = crate::jsonfmt::to_string_17(&ds.spec)?;
    writeln!(
        file,
        "{{\"format_version\":\"{}\",\"A\":{},\"P\":{},\"scene_size\":{},\"spec\":{},\"class_means_e\":{},\"class_means_u\":{}}}",
        DATASET_FORMAT_VERSION,
        ds.spec.num_classes,
        ds.spec.feature_dim,
        ds.spec.scene_size,
        spec_json,
        matrix_json(&ds.class_means_e)?,
        matrix_json(&ds.class_means_u)?,
    )?;
    for (tag, split) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        for s in split {
            writeln!(
                file,
                "[\"{}\",{},{},{},{},{}]",
                tag,
                s.scene_id,
                s.g,
                floats_json(s.e.as_slice())?,
                floats_json(s.u.as_slice())?,
                floats_json(s.z.as_slice())?,
            )?;
        }
    }
    file.flush()?;
    Ok(())
}

fn parse_float_array(v: &serde_json::Value, what: &str, expected: usize) -> Result<Vector> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::format(format!("{what}: expected an array")))?;
    if arr.len() != expected {
        return Err(Error::format(format!(
            "{what}: has {} values, expected {expected}",
            arr.len()
        )));
    }
    let mut values = Vec::with_capacity(expected);
    for (i, item) in arr.iter().enumerate() {
        let f = item
            .as_f64()
            .ok_or_else(|| Error::format(format!("{what}: entry {i} is not a number")))?;
        if !f.is_finite() {
            return Err(Error::format(format!("{what}: entry {i} is not finite")));
        }
        values.push(f);
    }
    Ok(Vector { values })
}

fn parse_means(v: &serde_json::Value, what: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::format(format!("{what}: expected an array")))?;
    if arr.len() != rows {
        return Err(Error::format(format!("{what}: has {} rows, expected {rows}", arr.len())));
    }
    let mut m = Matrix::zeros(rows, cols);
    for (r, rowv) in arr.iter().enumerate() {
        let row = parse_float_array(rowv, &format!("{what} row {r}"), cols)?;
        m.row_mut(r).copy_from_slice(row.as_slice());
    }
    Ok(m)
}

/// Reads a dataset file, validating header, record shapes, and invariants.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::format("dataset file is empty"))??;
    let header: serde_json::Value = serde_json::from_str(&header_line)
        .map_err(|e| Error::format(format!("header: {e}")))?;
    let version = header
        .get("format_version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::format("header: missing format_version"))?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported dataset format version \"{version}\" (supported: \"{DATASET_FORMAT_VERSION}\")"
        )));
    }
    let spec: DatasetSpec = serde_json::from_value(
        header
            .get("spec")
            .cloned()
            .ok_or_else(|| Error::format("header: missing spec"))?,
    )
    .map_err(|e| Error::format(format!("header spec: {e}")))?;
    spec.validate()?;
    let a = header
        .get("A")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::format("header: missing A"))? as usize;
    let p = header
        .get("P")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::format("header: missing P"))? as usize;
    let scene_size = header
        .get("scene_size")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::format("header: missing scene_size"))? as usize;
    if a != spec.num_classes || p != spec.feature_dim || scene_size != spec.scene_size {
        return Err(Error::format(
            "header A/P/scene_size do not match the embedded spec",
        ));
    }
    let class_means_e = parse_means(
        header
            .get("class_means_e")
            .ok_or_else(|| Error::format("header: missing class_means_e"))?,
        "class_means_e",
        a,
        p,
    )?;
    let class_means_u = parse_means(
        header
            .get("class_means_u")
            .ok_or_else(|| Error::format("header: missing class_means_u"))?,
        "class_means_u",
        a,
        p,
    )?;

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let record: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("record {idx}: {e}")))?;
        let arr = record
            .as_array()
            .ok_or_else(|| Error::format(format!("record {idx}: expected an array")))?;
        if arr.len() != 6 {
            return Err(Error::format(format!(
                "record {idx}: has {} fields, expected 6",
                arr.len()
            )));
        }
        let tag = arr[0]
            .as_str()
            .ok_or_else(|| Error::format(format!("record {idx}: split tag is not a string")))?;
        let scene_id = arr[1]
            .as_u64()
            .ok_or_else(|| Error::format(format!("record {idx}: scene_id is not an integer")))?
            as usize;
        let g = arr[2]
            .as_u64()
            .ok_or_else(|| Error::format(format!("record {idx}: label is not an integer")))?
            as usize;
        if g >= a {
            return Err(Error::format(format!(
                "record {idx}: label {g} out of range for A={a}"
            )));
        }
        let e = parse_float_array(&arr[3], &format!("record {idx}: e"), p)?;
        let u = parse_float_array(&arr[4], &format!("record {idx}: u"), p)?;
        let z = parse_float_array(&arr[5], &format!("record {idx}: z"), a)?;
        let sample = RelationSample { e, u, z, g, scene_id };
        match tag {
            "train" => train.push(sample),
            "val" => val.push(sample),
            "test" => test.push(sample),
            other => {
                return Err(Error::format(format!(
                    "record {idx}: unknown split tag \"{other}\""
                )))
            }
        }
    }

    let mut counts = SplitCounts {
        train: vec![0; a],
        val: vec![0; a],
        test: vec![0; a],
    };
    for (name, split, counts) in [
        ("train", &train, &mut counts.train),
        ("val", &val, &mut counts.val),
        ("test", &test, &mut counts.test),
    ] {
        let mut last_scene: Option<usize> = None;
        for (i, s) in split.iter().enumerate() {
            counts[s.g] += 1;
            match last_scene {
                None => {
                    if s.scene_id != 0 {
                        return Err(Error::format(format!(
                            "{name} split: first scene id is {}, expected 0",
                            s.scene_id
                        )));
                    }
                }
                Some(prev) => {
                    if s.scene_id != prev && s.scene_id != prev + 1 {
                        return Err(Error::format(format!(
                            "{name} split: scene ids not contiguous at record {i} ({prev} -> {})",
                            s.scene_id
                        )));
                    }
                }
            }
            last_scene = Some(s.scene_id);
        }
    }

    Ok(Dataset {
        spec,
        class_means_e,
        class_means_u,
        train,
        val,
        test,
        class_counts: counts,
    })
}

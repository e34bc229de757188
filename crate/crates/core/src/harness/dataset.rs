//! Dataset plumbing: JSON manifests pointing at PLY clouds, pose files, and
//! canonical model points, plus a synthetic-scene generator that writes them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::ply::{read_ply, write_ply};
use crate::pointcloud::synth::{sample_canonical, synth_scene, ShapeKind, SyntheticSpec};
use crate::pointcloud::PointCloud;
use crate::pose::Pose;

/// One sample's file set; paths are relative to the manifest location.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub object: String,
    pub raw: String,
    pub gt: String,
    pub pose: String,
    pub model: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: Vec<SampleRecord>,
}

/// A fully loaded sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub object: String,
    pub raw: PointCloud,
    pub gt: PointCloud,
    pub pose: Pose,
    pub model: PointCloud,
}

/// One line of 7 reals: quaternion w x y z, then translation x y z.
pub fn write_pose_file(path: &Path, pose: &Pose) -> Result<()> {
    let line = format!(
        "{} {} {} {} {} {} {}\n",
        pose.quat[0], pose.quat[1], pose.quat[2], pose.quat[3], pose.trans[0], pose.trans[1], pose.trans[2]
    );
    fs::write(path, line).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_pose_file(path: &Path) -> Result<Pose> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                detail: format!("bad number `{t}`"),
            })
        })
        .collect::<Result<_>>()?;
    if vals.len() != 7 {
        return Err(Error::Parse {
            path: path.display().to_string(),
            detail: format!("expected 7 values, got {}", vals.len()),
        });
    }
    Pose::new([vals[0], vals[1], vals[2], vals[3]], [vals[4], vals[5], vals[6]])
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::InvalidInput(format!("manifest serialization failed: {e}")))?;
    fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parse a manifest and check that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    for s in &manifest.samples {
        for rel in [&s.raw, &s.gt, &s.pose, &s.model] {
            let p = base.join(rel);
            if !p.is_file() {
                return Err(Error::InvalidInput(format!(
                    "manifest references missing file {}",
                    p.display()
                )));
            }
        }
    }
    Ok(manifest)
}

/// Load every sample of a manifest.
pub fn load_samples(manifest_path: &Path) -> Result<Vec<Sample>> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .samples
        .iter()
        .map(|s| {
            Ok(Sample {
                object: s.object.clone(),
                raw: read_ply(&base.join(&s.raw))?,
                gt: read_ply(&base.join(&s.gt))?,
                pose: read_pose_file(&base.join(&s.pose))?,
                model: read_ply(&base.join(&s.model))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub shape: ShapeKind,
    pub count: usize,
    pub n_points: usize,
    pub occlusion: f64,
    pub noise: f64,
    pub seed: u64,
    /// Vertices written to the shared canonical model PLY.
    pub model_points: usize,
}

/// Generate `count` scenes under `out_dir` and return the manifest path.
/// Deterministic: scene i uses seed `seed + i`, the model uses `seed`.
pub fn generate(out_dir: &Path, opts: &SynthOptions) -> Result<PathBuf> {
    if opts.count == 0 {
        return Err(Error::InvalidInput("count must be positive".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let model = sample_canonical(opts.shape, opts.model_points, opts.seed);
    let model_rel = format!("{}_model.ply", opts.shape.name());
    write_ply(&out_dir.join(&model_rel), &model)?;
    let mut samples = Vec::with_capacity(opts.count);
    for i in 0..opts.count {
        let (gt, corrupt, pose) = synth_scene(&SyntheticSpec {
            shape: opts.shape,
            n_points: opts.n_points,
            occlusion_fraction: opts.occlusion,
            noise_sigma: opts.noise,
            seed: opts.seed + i as u64,
        })?;
        let raw_rel = format!("scene_{i:04}_raw.ply");
        let gt_rel = format!("scene_{i:04}_gt.ply");
        let pose_rel = format!("scene_{i:04}_pose.txt");
        write_ply(&out_dir.join(&raw_rel), &corrupt)?;
        write_ply(&out_dir.join(&gt_rel), &gt)?;
        write_pose_file(&out_dir.join(&pose_rel), &pose)?;
        samples.push(SampleRecord {
            object: opts.shape.name().to_string(),
            raw: raw_rel,
            gt: gt_rel,
            pose: pose_rel,
            model: model_rel.clone(),
        });
    }
    let manifest_path = out_dir.join("manifest.json");
    write_manifest(&manifest_path, &DatasetManifest { samples })?;
    Ok(manifest_path)
}

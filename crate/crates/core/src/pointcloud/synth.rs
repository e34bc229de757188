//! Synthetic scene generator: surface-sampled shapes with a random rigid
//! pose, plus half-space occlusion and Gaussian noise corruption.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::pose::Pose;

use super::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Torus,
}

impl ShapeKind {
    pub fn parse(s: &str) -> Result<ShapeKind> {
        match s {
            "sphere" => Ok(ShapeKind::Sphere),
            "cube" => Ok(ShapeKind::Cube),
            "torus" => Ok(ShapeKind::Torus),
            _ => Err(Error::InvalidInput(format!("unknown shape `{s}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Torus => "torus",
        }
    }
}

// Canonical object dimensions, meters.
const SPHERE_RADIUS: f64 = 0.05;
const CUBE_HALF: f64 = 0.05;
const TORUS_MAJOR: f64 = 0.05;
const TORUS_MINOR: f64 = 0.02;
const TRANSLATION_RANGE: f64 = 0.15;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub shape: ShapeKind,
    pub n_points: usize,
    pub occlusion_fraction: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 8 {
            return Err(Error::InvalidInput(format!(
                "n_points must be >= 8, got {}",
                self.n_points
            )));
        }
        if !(0.0..1.0).contains(&self.occlusion_fraction) {
            return Err(Error::InvalidInput(format!(
                "occlusion_fraction must be in [0,1), got {}",
                self.occlusion_fraction
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidInput("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

fn unit_sphere(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// One point uniformly on the canonical surface of `shape`.
fn sample_surface(shape: ShapeKind, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match shape {
        ShapeKind::Sphere => {
            let d = unit_sphere(rng);
            [d[0] * SPHERE_RADIUS, d[1] * SPHERE_RADIUS, d[2] * SPHERE_RADIUS]
        }
        ShapeKind::Cube => {
            // faces have equal area; pick one of six then uniform in it
            let face = rng.gen_range(0..6u8);
            let a = rng.gen_range(-CUBE_HALF..CUBE_HALF);
            let b = rng.gen_range(-CUBE_HALF..CUBE_HALF);
            match face {
                0 => [CUBE_HALF, a, b],
                1 => [-CUBE_HALF, a, b],
                2 => [a, CUBE_HALF, b],
                3 => [a, -CUBE_HALF, b],
                4 => [a, b, CUBE_HALF],
                _ => [a, b, -CUBE_HALF],
            }
        }
        ShapeKind::Torus => {
            // rejection in the tube angle keeps area density uniform
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let phi = loop {
                let phi = rng.gen_range(0.0..std::f64::consts::TAU);
                let w = (TORUS_MAJOR + TORUS_MINOR * phi.cos()) / (TORUS_MAJOR + TORUS_MINOR);
                if rng.gen_range(0.0..1.0) < w {
                    break phi;
                }
            };
            let ring = TORUS_MAJOR + TORUS_MINOR * phi.cos();
            [
                ring * theta.cos(),
                ring * theta.sin(),
                TORUS_MINOR * phi.sin(),
            ]
        }
    }
}

/// Color derived from the canonical surface position, so texture rotates
/// rigidly with the object.
fn surface_color(p: &[f64; 3], extent: f64) -> [f64; 3] {
    [
        (0.5 + 0.5 * p[0] / extent).clamp(0.0, 1.0),
        (0.5 + 0.5 * p[1] / extent).clamp(0.0, 1.0),
        (0.5 + 0.5 * p[2] / extent).clamp(0.0, 1.0),
    ]
}

fn shape_extent(shape: ShapeKind) -> f64 {
    match shape {
        ShapeKind::Sphere => SPHERE_RADIUS,
        ShapeKind::Cube => CUBE_HALF,
        ShapeKind::Torus => TORUS_MAJOR + TORUS_MINOR,
    }
}

/// n surface points of `shape` in the canonical frame, with colors.
pub fn sample_canonical(shape: ShapeKind, n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = shape_extent(shape);
    let mut points = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for _ in 0..n {
        let p = sample_surface(shape, &mut rng);
        colors.push(surface_color(&p, extent));
        points.push(p);
    }
    PointCloud::new(points, Some(colors)).expect("canonical sample is valid")
}

pub fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let q = unit_quaternion(rng);
    let t = [
        rng.gen_range(-TRANSLATION_RANGE..TRANSLATION_RANGE),
        rng.gen_range(-TRANSLATION_RANGE..TRANSLATION_RANGE),
        rng.gen_range(-TRANSLATION_RANGE..TRANSLATION_RANGE),
    ];
    Pose::new(q, t).expect("normalized quaternion")
}

fn unit_quaternion(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            return [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        }
    }
}

/// Generate a (ground truth, corrupted, pose) triple. The ground-truth cloud
/// is the posed canonical sample; the corrupted one drops the
/// occlusion-fraction of points deepest into a random half space and adds
/// i.i.d. Gaussian noise. Deterministic in the spec seed.
pub fn synth_scene(spec: &SyntheticSpec) -> Result<(PointCloud, PointCloud, Pose)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let extent = shape_extent(spec.shape);
    let mut canonical = Vec::with_capacity(spec.n_points);
    let mut colors = Vec::with_capacity(spec.n_points);
    for _ in 0..spec.n_points {
        let p = sample_surface(spec.shape, &mut rng);
        colors.push(surface_color(&p, extent));
        canonical.push(p);
    }
    let pose = random_pose(&mut rng);
    let posed: Vec<[f64; 3]> = canonical.iter().map(|p| pose.apply(p)).collect();
    let gt = PointCloud::new(posed, Some(colors))?;

    let remove = (spec.occlusion_fraction * spec.n_points as f64).floor() as usize;
    let survivors: Vec<usize> = if remove == 0 {
        (0..spec.n_points).collect()
    } else {
        let dir = unit_sphere(&mut rng);
        let centroid = {
            let mut c = [0.0; 3];
            for p in gt.points() {
                for k in 0..3 {
                    c[k] += p[k] / spec.n_points as f64;
                }
            }
            c
        };
        let mut order: Vec<usize> = (0..spec.n_points).collect();
        // deepest along dir first
        order.sort_by(|&a, &b| {
            let da: f64 = (0..3).map(|k| (gt.points()[a][k] - centroid[k]) * dir[k]).sum();
            let db: f64 = (0..3).map(|k| (gt.points()[b][k] - centroid[k]) * dir[k]).sum();
            db.total_cmp(&da).then(a.cmp(&b))
        });
        let mut keep: Vec<usize> = order[remove..].to_vec();
        keep.sort_unstable();
        keep
    };
    if survivors.is_empty() {
        return Err(Error::InvalidInput("all points occluded".into()));
    }
    let mut corrupt = gt.subset(&survivors)?;
    if spec.noise_sigma > 0.0 {
        let noisy: Vec<[f64; 3]> = corrupt
            .points()
            .iter()
            .map(|p| {
                let mut q = *p;
                for c in q.iter_mut() {
                    let n: f64 = rng.sample(StandardNormal);
                    *c += n * spec.noise_sigma;
                }
                q
            })
            .collect();
        corrupt = PointCloud::new(noisy, corrupt.colors().map(|c| c.to_vec()))?;
    }
    Ok((gt, corrupt, pose))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: ShapeKind) -> SyntheticSpec {
        SyntheticSpec {
            shape,
            n_points: 200,
            occlusion_fraction: 0.0,
            noise_sigma: 0.0,
            seed: 7,
        }
    }

    #[test]
    fn no_corruption_clouds_match() {
        let (gt, corrupt, _) = synth_scene(&spec(ShapeKind::Sphere)).unwrap();
        assert_eq!(gt, corrupt);
    }

    #[test]
    fn half_occlusion_count() {
        let mut s = spec(ShapeKind::Cube);
        s.occlusion_fraction = 0.5;
        let (gt, corrupt, _) = synth_scene(&s).unwrap();
        assert_eq!(gt.len(), 200);
        assert_eq!(corrupt.len(), 100);
        let mut s = spec(ShapeKind::Torus);
        s.n_points = 21;
        s.occlusion_fraction = 0.5;
        let (_, corrupt, _) = synth_scene(&s).unwrap();
        assert_eq!(corrupt.len(), 11); // ceil(21/2) survive
    }

    #[test]
    fn same_seed_identical() {
        let mut s = spec(ShapeKind::Torus);
        s.occlusion_fraction = 0.3;
        s.noise_sigma = 0.01;
        let a = synth_scene(&s).unwrap();
        let b = synth_scene(&s).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2.quat, b.2.quat);
        assert_eq!(a.2.trans, b.2.trans);
    }

    #[test]
    fn sphere_points_on_surface() {
        let (gt, _, pose) = synth_scene(&spec(ShapeKind::Sphere)).unwrap();
        let inv = pose.inverse();
        for p in gt.points() {
            let c = inv.apply(p);
            let r = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            assert!((r - SPHERE_RADIUS).abs() < 1e-9);
        }
    }

    #[test]
    fn full_occlusion_rejected_by_validation() {
        let mut s = spec(ShapeKind::Sphere);
        s.occlusion_fraction = 1.0;
        assert!(synth_scene(&s).is_err());
    }
}

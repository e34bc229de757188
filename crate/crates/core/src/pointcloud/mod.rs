//! Geometry kernels: Chamfer distance, k-NN, farthest-point sampling,
//! normalization, depth back-projection, PLY I/O, and synthetic scenes.

pub mod camera;
pub mod ply;
pub mod synth;

use crate::error::{Error, Result};

/// Ordered set of 3D points in meters with optional per-point RGB in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    colors: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, colors: Option<Vec<[f64; 3]>>) -> Result<PointCloud> {
        if points.is_empty() {
            return Err(Error::InvalidInput("point cloud must be nonempty".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite coordinate".into()));
        }
        if let Some(c) = &colors {
            if c.len() != points.len() {
                return Err(Error::InvalidInput(format!(
                    "{} colors for {} points",
                    c.len(),
                    points.len()
                )));
            }
            if c.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput("color outside [0,1]".into()));
            }
        }
        Ok(PointCloud { points, colors })
    }

    pub fn from_points(points: Vec<[f64; 3]>) -> Result<PointCloud> {
        PointCloud::new(points, None)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn colors(&self) -> Option<&[[f64; 3]]> {
        self.colors.as_deref()
    }

    /// Subset by indices, carrying colors along. Indices may repeat.
    pub fn subset(&self, indices: &[usize]) -> Result<PointCloud> {
        let points = indices
            .iter()
            .map(|&i| {
                self.points
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::InvalidInput(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        let colors = self
            .colors
            .as_ref()
            .map(|c| indices.iter().map(|&i| c[i]).collect());
        PointCloud::new(points, colors)
    }

    /// Indices that order the points lexicographically by (x, y, z).
    pub fn lex_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.points.len()).collect();
        idx.sort_by(|&a, &b| {
            let (p, q) = (&self.points[a], &self.points[b]);
            p[0].total_cmp(&q[0])
                .then(p[1].total_cmp(&q[1]))
                .then(p[2].total_cmp(&q[2]))
                .then(a.cmp(&b))
        });
        idx
    }
}

pub fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Index of the nearest point of `cloud` to `p`, ties toward the lower index.
pub fn nearest_index(p: &[f64; 3], cloud: &[[f64; 3]]) -> usize {
    let mut best = 0;
    let mut best_d = dist_sq(p, &cloud[0]);
    for (i, q) in cloud.iter().enumerate().skip(1) {
        let d = dist_sq(p, q);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Symmetric Chamfer distance with squared norms:
/// mean_i min_j |p_i - q_j|^2 + mean_j min_i |q_j - p_i|^2.
pub fn chamfer(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::InvalidInput("chamfer of empty cloud".into()));
    }
    let mut forward = 0.0;
    for a in p.points() {
        forward += q
            .points()
            .iter()
            .map(|b| dist_sq(a, b))
            .fold(f64::INFINITY, f64::min);
    }
    let mut backward = 0.0;
    for b in q.points() {
        backward += p
            .points()
            .iter()
            .map(|a| dist_sq(b, a))
            .fold(f64::INFINITY, f64::min);
    }
    Ok(forward / p.len() as f64 + backward / q.len() as f64)
}

/// For each point, the indices of its k nearest other points (self excluded),
/// sorted by distance with ties broken toward the lower index.
pub fn knn(cloud: &PointCloud, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = cloud.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidInput(format!(
            "knn requires 0 < k < n, got k={k}, n={n}"
        )));
    }
    let pts = cloud.points();
    let mut out = Vec::with_capacity(n);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        for (j, q) in pts.iter().enumerate() {
            if j != i {
                order.push((dist_sq(&pts[i], q), j));
            }
        }
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.push(order[..k].iter().map(|&(_, j)| j).collect());
    }
    Ok(out)
}

/// Farthest-point sampling: greedily add the point maximizing the minimum
/// distance to the selected set; ties broken toward the lower index.
pub fn fps(cloud: &PointCloud, m: usize, start_index: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::InvalidInput(format!(
            "fps requires 1 <= m <= n, got m={m}, n={n}"
        )));
    }
    if start_index >= n {
        return Err(Error::InvalidInput(format!(
            "fps start index {start_index} out of range for {n} points"
        )));
    }
    let pts = cloud.points();
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start_index;
    selected.push(current);
    for _ in 1..m {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = dist_sq(&pts[i], &pts[current]).min(min_d[i]);
            min_d[i] = d;
            if d > best_d && !selected.contains(&i) {
                best_d = d;
                best = i;
            }
        }
        current = best;
        selected.push(current);
    }
    Ok(selected)
}

/// FPS subsets at 1/2 and 1/4 scale, both started from index 0.
pub fn downsample_scales(cloud: &PointCloud) -> Result<(PointCloud, PointCloud)> {
    if cloud.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "downsample_scales needs at least 4 points, got {}",
            cloud.len()
        )));
    }
    let half = fps(cloud, cloud.len() / 2, 0)?;
    let quarter = fps(cloud, cloud.len() / 4, 0)?;
    Ok((cloud.subset(&half)?, cloud.subset(&quarter)?))
}

/// Center at the centroid and divide by the max distance from it (1 for a
/// degenerate cloud). Returns (normalized cloud, centroid, scale).
pub fn normalize(cloud: &PointCloud) -> (PointCloud, [f64; 3], f64) {
    let n = cloud.len() as f64;
    let mut centroid = [0.0; 3];
    for p in cloud.points() {
        for c in 0..3 {
            centroid[c] += p[c] / n;
        }
    }
    let mut scale = cloud
        .points()
        .iter()
        .map(|p| dist_sq(p, &centroid).sqrt())
        .fold(0.0f64, f64::max);
    if scale < 1e-12 {
        scale = 1.0;
    }
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            [
                (p[0] - centroid[0]) / scale,
                (p[1] - centroid[1]) / scale,
                (p[2] - centroid[2]) / scale,
            ]
        })
        .collect();
    let out = PointCloud {
        points,
        colors: cloud.colors.clone(),
    };
    (out, centroid, scale)
}

/// Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as rows), unordered.
fn symmetric_eigen3(mut a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..50 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        if off < 1e-30 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for k in 0..3 {
                let (vpk, vqk) = (v[p][k], v[q][k]);
                v[p][k] = c * vpk - s * vqk;
                v[q][k] = s * vpk + c * vqk;
            }
        }
    }
    ([a[0][0], a[1][1], a[2][2]], v)
}

/// Principal axes of the centered cloud as rotation-matrix rows, ordered by
/// decreasing variance. Axis signs are fixed by the third central moment and
/// the last axis is the cross product of the first two, so the frame is
/// right-handed and deterministic. Mapping points through the returned matrix
/// canonicalizes the cloud's orientation: any rotation of the input yields
/// the same canonical cloud (up to eigenvalue degeneracy).
pub fn principal_frame(cloud: &PointCloud) -> [[f64; 3]; 3] {
    let n = cloud.len() as f64;
    let mut centroid = [0.0; 3];
    for p in cloud.points() {
        for c in 0..3 {
            centroid[c] += p[c] / n;
        }
    }
    let mut cov = [[0.0; 3]; 3];
    for p in cloud.points() {
        let d = [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j] / n;
            }
        }
    }
    let (eigvals, eigvecs) = symmetric_eigen3(cov);
    let mut order = [0, 1, 2];
    order.sort_by(|&i, &j| eigvals[j].total_cmp(&eigvals[i]));
    let mut axes = [[0.0; 3]; 3];
    for (row, &i) in order.iter().enumerate().take(2) {
        let mut axis = eigvecs[i];
        let skew: f64 = cloud
            .points()
            .iter()
            .map(|p| {
                let d = (p[0] - centroid[0]) * axis[0]
                    + (p[1] - centroid[1]) * axis[1]
                    + (p[2] - centroid[2]) * axis[2];
                d * d * d
            })
            .sum();
        if skew < 0.0 {
            for v in &mut axis {
                *v = -*v;
            }
        }
        axes[row] = axis;
    }
    axes[2] = [
        axes[0][1] * axes[1][2] - axes[0][2] * axes[1][1],
        axes[0][2] * axes[1][0] - axes[0][0] * axes[1][2],
        axes[0][0] * axes[1][1] - axes[0][1] * axes[1][0],
    ];
    axes
}

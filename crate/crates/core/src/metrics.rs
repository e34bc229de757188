//! Pose-evaluation metrics: ADD, ADD-S, area under the accuracy curve, and
//! threshold success rates, plus a small per-object report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::pointcloud::{dist_sq, PointCloud};
use crate::pose::Pose;

/// Mean distance between corresponding model points under the two poses.
pub fn add_metric(gt: &Pose, pred: &Pose, model: &PointCloud) -> f64 {
    let mut total = 0.0;
    for p in model.points() {
        total += dist_sq(&gt.apply(p), &pred.apply(p)).sqrt();
    }
    total / model.len() as f64
}

/// Mean distance from each ground-truth-posed model point to its nearest
/// predicted-posed model point; insensitive to object symmetry.
pub fn adds_metric(gt: &Pose, pred: &Pose, model: &PointCloud) -> f64 {
    let predicted: Vec<[f64; 3]> = model.points().iter().map(|p| pred.apply(p)).collect();
    let mut total = 0.0;
    for p in model.points() {
        let g = gt.apply(p);
        let nearest = predicted
            .iter()
            .map(|q| dist_sq(&g, q))
            .fold(f64::INFINITY, f64::min);
        total += nearest.sqrt();
    }
    total / model.len() as f64
}

const AUC_CELLS: usize = 1000;

/// Area under accuracy(tau) = fraction{e < tau} for tau in (0, max_threshold],
/// on a uniform grid of 1000 cells evaluated at their right edges, as a
/// percentage of the maximum area.
pub fn auc(errors: &[f64], max_threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::InvalidInput("auc of empty error list".into()));
    }
    if max_threshold <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "auc threshold must be positive, got {max_threshold}"
        )));
    }
    let mut area = 0.0;
    for i in 1..=AUC_CELLS {
        let tau = max_threshold * i as f64 / AUC_CELLS as f64;
        let hits = errors.iter().filter(|&&e| e < tau).count();
        area += hits as f64 / errors.len() as f64;
    }
    Ok(100.0 * area / AUC_CELLS as f64)
}

/// 100 * fraction{e < threshold}; ties count as failures.
pub fn success_rate(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::InvalidInput("success rate of empty error list".into()));
    }
    let hits = errors.iter().filter(|&&e| e < threshold).count();
    Ok(100.0 * hits as f64 / errors.len() as f64)
}

/// Max pairwise distance between model points.
pub fn diameter(model: &PointCloud) -> f64 {
    let pts = model.points();
    let mut best = 0.0f64;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            best = best.max(dist_sq(&pts[i], &pts[j]));
        }
    }
    best.sqrt()
}

/// One evaluated object.
#[derive(Debug, Clone)]
pub struct ObjectReport {
    pub name: String,
    pub mean_add: f64,
    pub mean_adds: f64,
    /// AUC over ADD-S for symmetric objects, over ADD otherwise.
    pub auc_pct: f64,
    pub under_2cm_pct: f64,
    pub under_decidiameter_pct: f64,
}

/// Per-object rows plus dataset-level means.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub objects: Vec<ObjectReport>,
}

impl EvalReport {
    /// Build one object row from per-sample (ADD, ADD-S) errors.
    pub fn push_object(
        &mut self,
        name: &str,
        add_errors: &[f64],
        adds_errors: &[f64],
        symmetric: bool,
        object_diameter: f64,
    ) -> Result<()> {
        if add_errors.len() != adds_errors.len() || add_errors.is_empty() {
            return Err(Error::InvalidInput(
                "per-sample error lists must be nonempty and equal length".into(),
            ));
        }
        let selected = if symmetric { adds_errors } else { add_errors };
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        self.objects.push(ObjectReport {
            name: name.to_string(),
            mean_add: mean(add_errors),
            mean_adds: mean(adds_errors),
            auc_pct: auc(selected, 0.1)?,
            under_2cm_pct: success_rate(adds_errors, 0.02)?,
            under_decidiameter_pct: success_rate(selected, 0.1 * object_diameter)?,
        });
        Ok(())
    }

    fn mean_row(&self) -> Option<ObjectReport> {
        if self.objects.is_empty() {
            return None;
        }
        let n = self.objects.len() as f64;
        let mut mean = ObjectReport {
            name: "MEAN".into(),
            mean_add: 0.0,
            mean_adds: 0.0,
            auc_pct: 0.0,
            under_2cm_pct: 0.0,
            under_decidiameter_pct: 0.0,
        };
        for o in &self.objects {
            mean.mean_add += o.mean_add / n;
            mean.mean_adds += o.mean_adds / n;
            mean.auc_pct += o.auc_pct / n;
            mean.under_2cm_pct += o.under_2cm_pct / n;
            mean.under_decidiameter_pct += o.under_decidiameter_pct / n;
        }
        Some(mean)
    }

    fn rows(&self) -> Vec<ObjectReport> {
        let mut rows = self.objects.clone();
        if let Some(m) = self.mean_row() {
            rows.push(m);
        }
        rows
    }

    /// Aligned plain-text table with a MEAN footer.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let name_w = self
            .rows()
            .iter()
            .map(|r| r.name.len())
            .chain(["object".len()].into_iter())
            .max()
            .unwrap_or(6);
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>10}  {:>10}  {:>7}  {:>7}  {:>8}",
            "object", "ADD (m)", "ADD-S (m)", "AUC%", "<2cm%", "<0.1d%"
        );
        for r in self.rows() {
            let _ = writeln!(
                out,
                "{:<name_w$}  {:>10.6}  {:>10.6}  {:>7.2}  {:>7.2}  {:>8.2}",
                r.name, r.mean_add, r.mean_adds, r.auc_pct, r.under_2cm_pct, r.under_decidiameter_pct
            );
        }
        out
    }

    /// Comma-separated form, same rows as the table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("object,add_m,adds_m,auc_pct,under_2cm_pct,under_decidiameter_pct\n");
        for r in self.rows() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.name, r.mean_add, r.mean_adds, r.auc_pct, r.under_2cm_pct, r.under_decidiameter_pct
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let q: [f64; 4] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        Pose::new(
            [q[0] / n, q[1] / n, q[2] / n, q[3] / n],
            [
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
            ],
        )
        .unwrap()
    }

    fn random_model(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::from_points(
            (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-0.05..0.05),
                        rng.gen_range(-0.05..0.05),
                        rng.gen_range(-0.05..0.05),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn add_zero_for_equal_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pose = random_pose(&mut rng);
        let model = random_model(&mut rng, 20);
        assert_eq!(add_metric(&pose, &pose, &model), 0.0);
        assert_eq!(adds_metric(&pose, &pose, &model), 0.0);
    }

    #[test]
    fn add_pure_translation_is_offset_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_pose(&mut rng);
        let model = random_model(&mut rng, 15);
        let delta = [0.01, -0.02, 0.005];
        let pred = Pose::new(
            gt.quat,
            [
                gt.trans[0] + delta[0],
                gt.trans[1] + delta[1],
                gt.trans[2] + delta[2],
            ],
        )
        .unwrap();
        let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((add_metric(&gt, &pred, &model) - norm).abs() < 1e-12);
    }

    #[test]
    fn adds_never_exceeds_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let gt = random_pose(&mut rng);
            let pred = random_pose(&mut rng);
            let model = random_model(&mut rng, 12);
            assert!(adds_metric(&gt, &pred, &model) <= add_metric(&gt, &pred, &model) + 1e-15);
        }
    }

    #[test]
    fn square_symmetry_case() {
        let model = PointCloud::from_points(vec![
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
        ])
        .unwrap();
        let gt = Pose::identity();
        // 90 degrees about z
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let pred = Pose::new([h, 0.0, 0.0, h], [0.0; 3]).unwrap();
        assert!(adds_metric(&gt, &pred, &model) < 1e-12);
        assert!(add_metric(&gt, &pred, &model) > 1.0);
    }

    #[test]
    fn metrics_invariant_under_common_left_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let gt = random_pose(&mut rng);
            let pred = random_pose(&mut rng);
            let outer = random_pose(&mut rng);
            let model = random_model(&mut rng, 10);
            let a = add_metric(&gt, &pred, &model);
            let b = add_metric(&outer.compose(&gt), &outer.compose(&pred), &model);
            assert!((a - b).abs() < 1e-10);
            let a = adds_metric(&gt, &pred, &model);
            let b = adds_metric(&outer.compose(&gt), &outer.compose(&pred), &model);
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn auc_hand_values() {
        assert_eq!(auc(&[0.0, 0.0], 0.1).unwrap(), 100.0);
        assert_eq!(auc(&[0.5, 0.9], 0.1).unwrap(), 0.0);
        let v = auc(&[0.05, 0.2], 0.1).unwrap();
        assert!((v - 25.0).abs() < 0.1, "got {v}");
    }

    #[test]
    fn auc_monotone_in_threshold() {
        let errors = [0.01, 0.04, 0.07, 0.3];
        let mut prev = 0.0;
        for t in [0.02, 0.05, 0.1, 0.2, 0.5] {
            let v = auc(&errors, t).unwrap();
            assert!(v + 1e-9 >= prev);
            prev = v;
        }
    }

    #[test]
    fn auc_constant_error_step_height() {
        let e = 0.03;
        let v = auc(&[e; 5], 0.1).unwrap();
        let expect = 100.0 * (1.0 - e / 0.1);
        assert!((v - expect).abs() <= 100.0 / 1000.0 + 1e-9);
    }

    #[test]
    fn auc_rejects_bad_input() {
        assert!(auc(&[], 0.1).is_err());
        assert!(auc(&[0.1], 0.0).is_err());
    }

    #[test]
    fn success_rate_hand_values() {
        assert_eq!(success_rate(&[0.0, 0.0], 0.5).unwrap(), 100.0);
        assert_eq!(success_rate(&[0.01, 0.03], 0.02).unwrap(), 50.0);
        assert_eq!(success_rate(&[0.0, 1.0], 0.0).unwrap(), 0.0);
        assert!(success_rate(&[], 0.1).is_err());
    }

    #[test]
    fn diameter_of_unit_segment() {
        let model =
            PointCloud::from_points(vec![[0.0; 3], [0.5, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(diameter(&model), 1.0);
    }

    #[test]
    fn report_table_and_csv() {
        let mut report = EvalReport::default();
        report
            .push_object("sphere", &[0.01, 0.03], &[0.005, 0.01], true, 0.1)
            .unwrap();
        report
            .push_object("cube", &[0.0, 0.0], &[0.0, 0.0], false, 0.1)
            .unwrap();
        let table = report.to_table();
        assert!(table.contains("sphere"));
        assert!(table.lines().last().unwrap().starts_with("MEAN"));
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 4); // header + 2 objects + MEAN
        assert!(csv.starts_with("object,add_m"));
    }
}

//! Rigid poses, per-point pose regression heads, confidence selection, and
//! the pose losses.

use rand::Rng;

use crate::autodiff::{Bindings, ParamStore, Tape, Tensor, Value};
use crate::error::{Error, Result};
use crate::nn::MlpStack;
use crate::pointcloud::{dist_sq, nearest_index};

/// Rigid transform: unit quaternion (w, x, y, z) plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub quat: [f64; 4],
    pub trans: [f64; 3],
}

impl Pose {
    /// Requires the quaternion to be unit up to 1e-6; stores it renormalized.
    pub fn new(quat: [f64; 4], trans: [f64; 3]) -> Result<Pose> {
        let n = quat.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "quaternion norm {n} not within 1e-6 of 1"
            )));
        }
        Ok(Pose {
            quat: [quat[0] / n, quat[1] / n, quat[2] / n, quat[3] / n],
            trans,
        })
    }

    pub fn identity() -> Pose {
        Pose {
            quat: [1.0, 0.0, 0.0, 0.0],
            trans: [0.0; 3],
        }
    }

    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        quat_to_matrix(&self.quat).expect("stored quaternion is unit")
    }

    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let r = self.rotation_matrix();
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.trans[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.trans[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.trans[2],
        ]
    }

    pub fn inverse(&self) -> Pose {
        let q = [self.quat[0], -self.quat[1], -self.quat[2], -self.quat[3]];
        let inv = Pose {
            quat: q,
            trans: [0.0; 3],
        };
        let t = inv.apply(&self.trans);
        Pose {
            quat: q,
            trans: [-t[0], -t[1], -t[2]],
        }
    }

    /// self ∘ other (apply `other` first).
    pub fn compose(&self, other: &Pose) -> Pose {
        let (a, b) = (&self.quat, &other.quat);
        let q = [
            a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
        ];
        let t = self.apply(&other.trans);
        Pose::new(q, t).expect("product of unit quaternions is unit")
    }

    pub fn transform_points(&self, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        points.iter().map(|p| self.apply(p)).collect()
    }
}

/// Standard quaternion-to-rotation map; errors when the input is not unit
/// within 1e-6.
pub fn quat_to_matrix(q: &[f64; 4]) -> Result<[[f64; 3]; 3]> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "quaternion norm {n} not within 1e-6 of 1"
        )));
    }
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    Ok([
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ])
}

/// K per-point pose hypotheses with confidence scores.
#[derive(Debug, Clone)]
pub struct PoseCandidates {
    pub quats: Vec<[f64; 4]>,
    pub trans: Vec<[f64; 3]>,
    pub confidences: Vec<f64>,
}

impl PoseCandidates {
    pub fn len(&self) -> usize {
        self.quats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quats.is_empty()
    }

    pub fn candidate(&self, i: usize) -> Result<Pose> {
        Pose::new(self.quats[i], self.trans[i])
    }
}

/// The candidate with the highest confidence; ties toward the lowest index.
pub fn select_pose(c: &PoseCandidates) -> Result<Pose> {
    if c.is_empty() {
        return Err(Error::InvalidInput("no pose candidates".into()));
    }
    let mut best = 0;
    for i in 1..c.len() {
        if c.confidences[i] > c.confidences[best] {
            best = i;
        }
    }
    c.candidate(best)
}

/// Mean over ground-truth-transformed model points of the squared distance to
/// the nearest prediction-transformed model point.
pub fn pose_error(gt: &Pose, pred: &Pose, model: &[[f64; 3]]) -> f64 {
    let gt_pts = gt.transform_points(model);
    let pred_pts = pred.transform_points(model);
    let mut sum = 0.0;
    for g in &gt_pts {
        sum += pred_pts
            .iter()
            .map(|p| dist_sq(g, p))
            .fold(f64::INFINITY, f64::min);
    }
    sum / model.len() as f64
}

/// (1/K) sum_i e_i (s_i - log s_i) over the candidates.
pub fn loss_pose_value(c: &PoseCandidates, gt: &Pose, model: &[[f64; 3]]) -> Result<f64> {
    if c.is_empty() {
        return Err(Error::InvalidInput("no pose candidates".into()));
    }
    let k = c.len() as f64;
    let mut total = 0.0;
    for i in 0..c.len() {
        let s = c.confidences[i];
        if s <= 0.0 {
            return Err(Error::Domain {
                op: "loss_pose",
                detail: format!("non-positive confidence {s}"),
            });
        }
        let e = pose_error(gt, &c.candidate(i)?, model);
        total += e * (s - s.ln());
    }
    Ok(total / k)
}

/// Overall objective L_pose + mu * L_prn.
pub fn loss_total(tape: &mut Tape, pose: Value, prn: Value, mu: f64) -> Result<Value> {
    let scaled = tape.scale(prn, mu);
    tape.add(pose, scaled)
}

// ----- regression heads -----

#[derive(Debug, Clone)]
pub struct PoseHeadConfig {
    pub feature_dim: usize,
    /// Hidden widths of each 4-layer branch; the output layer is appended.
    pub hidden: [usize; 3],
}

impl Default for PoseHeadConfig {
    fn default() -> Self {
        PoseHeadConfig {
            feature_dim: 256,
            hidden: [256, 128, 64],
        }
    }
}

/// Three four-layer FC branches over per-point fused features: rotation
/// (unit quaternion), translation, and a logistic confidence.
#[derive(Debug, Clone)]
pub struct PoseHeads {
    reg_r: MlpStack,
    reg_t: MlpStack,
    reg_c: MlpStack,
    pub config: PoseHeadConfig,
}

/// Graph outputs of [`PoseHeads::forward`].
pub struct HeadOutputs {
    /// K x 4, rows normalized to unit quaternions.
    pub quats: Value,
    /// K x 3 translations (in the caller's frame convention).
    pub trans: Value,
    /// K x 1 confidences in (0, 1).
    pub conf: Value,
}

impl PoseHeads {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: PoseHeadConfig) -> PoseHeads {
        let widths_r = [cfg.hidden[0], cfg.hidden[1], cfg.hidden[2], 4];
        let widths_t = [cfg.hidden[0], cfg.hidden[1], cfg.hidden[2], 3];
        let widths_c = [cfg.hidden[0], cfg.hidden[1], cfg.hidden[2], 1];
        let reg_r = MlpStack::init(store, rng, &format!("{name}.reg_r"), cfg.feature_dim, &widths_r, false);
        let reg_t = MlpStack::init(store, rng, &format!("{name}.reg_t"), cfg.feature_dim, &widths_t, false);
        let reg_c = MlpStack::init(store, rng, &format!("{name}.reg_c"), cfg.feature_dim, &widths_c, false);
        // bias the rotation output toward the identity quaternion
        let bias_name = &reg_r.layers.last().unwrap().bias;
        let b = store.get_mut(bias_name).unwrap();
        b.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        PoseHeads {
            reg_r,
            reg_t,
            reg_c,
            config: cfg,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, features: Value) -> Result<HeadOutputs> {
        let shape = tape.value(features).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.feature_dim {
            return Err(Error::InvalidShape {
                op: "pose_heads",
                shape,
                detail: format!("expected K x {}", self.config.feature_dim),
            });
        }
        let k = shape[0];
        let raw_q = self.reg_r.forward(tape, bind, features)?;
        let quats = normalize_rows(tape, raw_q, k)?;
        let trans = self.reg_t.forward(tape, bind, features)?;
        let raw_c = self.reg_c.forward(tape, bind, features)?;
        let conf = tape.sigmoid(raw_c);
        Ok(HeadOutputs { quats, trans, conf })
    }

    /// Evaluate the heads on a plain feature matrix and return candidates.
    pub fn regress(&self, store: &ParamStore, features: &Tensor) -> Result<PoseCandidates> {
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let f = tape.constant(features.clone());
        let out = self.forward(&mut tape, &bind, f)?;
        Ok(candidates_from_values(&tape, &out))
    }
}

/// Read a [`HeadOutputs`] triple out of the tape into plain candidates.
pub fn candidates_from_values(tape: &Tape, out: &HeadOutputs) -> PoseCandidates {
    let q = tape.value(out.quats);
    let t = tape.value(out.trans);
    let c = tape.value(out.conf);
    let k = q.shape()[0];
    let mut quats = Vec::with_capacity(k);
    let mut trans = Vec::with_capacity(k);
    let mut confidences = Vec::with_capacity(k);
    for i in 0..k {
        quats.push([
            q.data()[i * 4],
            q.data()[i * 4 + 1],
            q.data()[i * 4 + 2],
            q.data()[i * 4 + 3],
        ]);
        trans.push([t.data()[i * 3], t.data()[i * 3 + 1], t.data()[i * 3 + 2]]);
        confidences.push(c.data()[i]);
    }
    PoseCandidates {
        quats,
        trans,
        confidences,
    }
}

fn normalize_rows(tape: &mut Tape, x: Value, rows: usize) -> Result<Value> {
    let sq = tape.square(x);
    let sums = tape.sum_reduce_axis(sq, 1)?;
    let col = tape.reshape(sums, &[rows, 1])?;
    let guarded = tape.add_const(col, 1e-24);
    let norm = tape.sqrt(guarded)?;
    let inv = tape.recip(norm)?;
    tape.mul(x, inv)
}

/// Extract column `j` of a K x d matrix as K x 1 (constant selector matmul).
fn column(tape: &mut Tape, x: Value, d: usize, j: usize) -> Result<Value> {
    let mut sel = vec![0.0; d];
    sel[j] = 1.0;
    let s = tape.constant(Tensor::new(&[d, 1], sel)?);
    tape.matmul(x, s)
}

/// Flatten K unit quaternions into K x 9 row-major rotation matrices,
/// differentiably.
pub fn quats_to_rotations(tape: &mut Tape, quats: Value) -> Result<Value> {
    let w = column(tape, quats, 4, 0)?;
    let x = column(tape, quats, 4, 1)?;
    let y = column(tape, quats, 4, 2)?;
    let z = column(tape, quats, 4, 3)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let zz = tape.mul(z, z)?;
    let xy = tape.mul(x, y)?;
    let xz = tape.mul(x, z)?;
    let yz = tape.mul(y, z)?;
    let wx = tape.mul(w, x)?;
    let wy = tape.mul(w, y)?;
    let wz = tape.mul(w, z)?;
    let diag = |tape: &mut Tape, a: Value, b: Value| -> Result<Value> {
        let s = tape.add(a, b)?;
        let s = tape.scale(s, -2.0);
        Ok(tape.add_const(s, 1.0))
    };
    let off = |tape: &mut Tape, a: Value, b: Value, minus: bool| -> Result<Value> {
        let s = if minus { tape.sub(a, b)? } else { tape.add(a, b)? };
        Ok(tape.scale(s, 2.0))
    };
    let r00 = diag(tape, yy, zz)?;
    let r01 = off(tape, xy, wz, true)?;
    let r02 = off(tape, xz, wy, false)?;
    let r10 = off(tape, xy, wz, false)?;
    let r11 = diag(tape, xx, zz)?;
    let r12 = off(tape, yz, wx, true)?;
    let r20 = off(tape, xz, wy, true)?;
    let r21 = off(tape, yz, wx, false)?;
    let r22 = diag(tape, xx, yy)?;
    tape.concat(1, &[r00, r01, r02, r10, r11, r12, r20, r21, r22])
}

/// Apply K rotations+translations to the model points: output K x Km x 3.
pub fn transform_model_points(
    tape: &mut Tape,
    rotations: Value,
    translations: Value,
    model: &[[f64; 3]],
) -> Result<Value> {
    let k = tape.value(rotations).shape()[0];
    let km = model.len();
    // T[i, k*3+c] = sum_d R[i, 3c+d] * X[k, d] is linear in R
    let mut b = vec![0.0; 9 * km * 3];
    for (kk, p) in model.iter().enumerate() {
        for c in 0..3 {
            for d in 0..3 {
                b[(3 * c + d) * (km * 3) + kk * 3 + c] = p[d];
            }
        }
    }
    let bmat = tape.constant(Tensor::new(&[9, km * 3], b)?);
    let rotated = tape.matmul(rotations, bmat)?;
    let rotated = tape.reshape(rotated, &[k, km, 3])?;
    let t = tape.reshape(translations, &[k, 1, 3])?;
    tape.add(rotated, t)
}

/// Differentiable pose loss over head outputs (translations already in the
/// world frame): confidence-weighted nearest-model-point error with a
/// log-confidence regularizer.
pub fn loss_pose_graph(
    tape: &mut Tape,
    out: &HeadOutputs,
    gt: &Pose,
    model: &[[f64; 3]],
) -> Result<Value> {
    let k = tape.value(out.quats).shape()[0];
    let km = model.len();
    let rotations = quats_to_rotations(tape, out.quats)?;
    let pred = transform_model_points(tape, rotations, out.trans, model)?;
    let gt_pts = gt.transform_points(model);

    // nearest predicted point per (candidate, gt point), from current values
    let pred_vals = tape.value(pred).data().to_vec();
    let mut indices = Vec::with_capacity(k * km);
    let mut gt_tiled = Vec::with_capacity(k * km * 3);
    for i in 0..k {
        let rows: Vec<[f64; 3]> = (0..km)
            .map(|kk| {
                let o = (i * km + kk) * 3;
                [pred_vals[o], pred_vals[o + 1], pred_vals[o + 2]]
            })
            .collect();
        for g in &gt_pts {
            indices.push(i * km + nearest_index(g, &rows));
            gt_tiled.extend_from_slice(g);
        }
    }
    let pred_flat = tape.reshape(pred, &[k * km, 3])?;
    let gathered = tape.gather_rows(pred_flat, &indices)?;
    let gt_const = tape.constant(Tensor::new(&[k * km, 3], gt_tiled)?);
    let diff = tape.sub(gt_const, gathered)?;
    let sq = tape.square(diff);
    let per_pair = tape.sum_reduce_axis(sq, 1)?;
    let per_candidate = tape.reshape(per_pair, &[k, km])?;
    let e_sum = tape.sum_reduce_axis(per_candidate, 1)?;
    let errors = tape.scale(e_sum, 1.0 / km as f64);

    let s = tape.reshape(out.conf, &[k])?;
    let log_s = tape.log(s)?;
    let s_term = tape.sub(s, log_s)?;
    let weighted = tape.mul(errors, s_term)?;
    let total = tape.sum_reduce_axis(weighted, 0)?;
    Ok(tape.scale(total, 1.0 / k as f64))
}

//! Point Refinement Network: a three-branch multi-resolution encoder over the
//! raw cloud and its 1/2- and 1/4-scale subsets, a multi-resolution decoder
//! with broadcast-additive integration, a per-point discriminator, and the
//! refinement losses.

use rand::Rng;

use crate::autodiff::{AdamParams, Bindings, ParamStore, Tape, Tensor, Value};
use crate::error::{Error, Result};
use crate::nn::{Linear, MlpStack};
use crate::pointcloud::{self, PointCloud};

pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct PrnConfig {
    pub n_raw: usize,
    pub m_refined: usize,
    /// Per-point widths of each six-layer encoder branch.
    pub encoder_widths: [usize; 6],
    pub latent_dim: usize,
    /// Widths of the shared decoder trunk; the last must be 3 * m_refined / 8.
    pub decoder_fc_widths: [usize; 4],
    pub lambda_adv: f64,
    pub beta_mr: f64,
    /// Use -sum log D(fake) for the generator instead of the saturating form.
    pub non_saturating: bool,
}

impl PrnConfig {
    pub fn with_sizes(n_raw: usize, m_refined: usize) -> PrnConfig {
        PrnConfig {
            n_raw,
            m_refined,
            encoder_widths: [64, 64, 128, 128, 256, 256],
            latent_dim: 512,
            decoder_fc_widths: [512, 512, 256, 3 * m_refined / 8],
            lambda_adv: 0.05,
            beta_mr: 0.95,
            non_saturating: false,
        }
    }

    /// Small widths for quick experiments and gradient checks.
    pub fn tiny(n_raw: usize, m_refined: usize) -> PrnConfig {
        PrnConfig {
            n_raw,
            m_refined,
            encoder_widths: [8, 8, 8, 8, 8, 8],
            latent_dim: 16,
            decoder_fc_widths: [16, 16, 16, 3 * m_refined / 8],
            lambda_adv: 0.05,
            beta_mr: 0.95,
            non_saturating: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_refined % 8 != 0 || self.m_refined == 0 {
            return Err(Error::InvalidInput(format!(
                "m_refined must be a positive multiple of 8, got {}",
                self.m_refined
            )));
        }
        if self.n_raw < 4 {
            return Err(Error::InvalidInput("n_raw must be at least 4".into()));
        }
        if self.decoder_fc_widths[3] != 3 * self.m_refined / 8 {
            return Err(Error::InvalidInput(format!(
                "decoder output width {} must equal 3*m/8 = {}",
                self.decoder_fc_widths[3],
                3 * self.m_refined / 8
            )));
        }
        Ok(())
    }
}

/// Encoder/decoder parameters; weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct PrnModel {
    enc_full: MlpStack,
    enc_half: MlpStack,
    enc_quarter: MlpStack,
    fusion: Linear,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    fc4: Linear,
    fc21: Linear,
    mlp22: Linear,
    fc12: Linear,
    mlp13: Linear,
    mlp14: Linear,
    mlp15: Linear,
    pub config: PrnConfig,
}

impl PrnModel {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, name: &str, config: PrnConfig) -> Result<PrnModel> {
        config.validate()?;
        let ew = &config.encoder_widths;
        let enc_full = MlpStack::init(store, rng, &format!("{name}.enc_full"), 3, ew, true);
        let enc_half = MlpStack::init(store, rng, &format!("{name}.enc_half"), 3, ew, true);
        let enc_quarter = MlpStack::init(store, rng, &format!("{name}.enc_quarter"), 3, ew, true);
        let branch_out = ew[5];
        let fusion = Linear::init(store, rng, &format!("{name}.fusion"), 3 * branch_out, config.latent_dim);
        let dw = &config.decoder_fc_widths;
        let m = config.m_refined;
        let fc1 = Linear::init(store, rng, &format!("{name}.fc1"), config.latent_dim, dw[0]);
        let fc2 = Linear::init(store, rng, &format!("{name}.fc2"), dw[0], dw[1]);
        let fc3 = Linear::init(store, rng, &format!("{name}.fc3"), dw[1], dw[2]);
        let fc4 = Linear::init(store, rng, &format!("{name}.fc4"), dw[2], dw[3]);
        let fc21 = Linear::init(store, rng, &format!("{name}.fc21"), dw[1], dw[2]);
        let mlp22 = Linear::init(store, rng, &format!("{name}.mlp22"), dw[2], 3 * m / 4);
        let fc12 = Linear::init(store, rng, &format!("{name}.fc12"), dw[0], dw[2]);
        let mlp13 = Linear::init(store, rng, &format!("{name}.mlp13"), dw[2], dw[0]);
        let mlp14 = Linear::init(store, rng, &format!("{name}.mlp14"), dw[0], dw[0]);
        let mlp15 = Linear::init(store, rng, &format!("{name}.mlp15"), dw[0], 3 * m);
        Ok(PrnModel {
            enc_full,
            enc_half,
            enc_quarter,
            fusion,
            fc1,
            fc2,
            fc3,
            fc4,
            fc21,
            mlp22,
            fc12,
            mlp13,
            mlp14,
            mlp15,
            config,
        })
    }

    /// Latent code of a (normalized) cloud. Each branch applies its six-layer
    /// per-point MLP and max-pools over points; the pooled codes are fused by
    /// one more layer. The cloud is ordered canonically before the 1/2 and
    /// 1/4 subsets are drawn so the result is permutation invariant.
    pub fn encode(&self, tape: &mut Tape, bind: &Bindings, cloud: &PointCloud) -> Result<Value> {
        if cloud.len() != self.config.n_raw {
            return Err(Error::InvalidInput(format!(
                "encoder expects {} points, got {}",
                self.config.n_raw,
                cloud.len()
            )));
        }
        let sorted = cloud.subset(&cloud.lex_order())?;
        let (half, quarter) = pointcloud::downsample_scales(&sorted)?;
        let branch = |tape: &mut Tape, net: &MlpStack, c: &PointCloud| -> Result<Value> {
            let x = tape.constant(Tensor::from_rows3(c.points()));
            let h = net.forward(tape, bind, x)?;
            let pooled = tape.max_reduce_axis(h, 0)?;
            tape.reshape(pooled, &[1, net.out_dim()])
        };
        let v_full = branch(tape, &self.enc_full, &sorted)?;
        let v_half = branch(tape, &self.enc_half, &half)?;
        let v_quarter = branch(tape, &self.enc_quarter, &quarter)?;
        let cat = tape.concat(1, &[v_full, v_half, v_quarter])?;
        let fused = self.fusion.forward(tape, bind, cat)?;
        Ok(tape.relu(fused))
    }

    /// Decode a latent into coarse (M/8), mediate (M/4) and fine (M) clouds.
    /// The mediate output adds each coarse point onto its group of two, the
    /// fine output adds each mediate point onto its group of four.
    pub fn decode(&self, tape: &mut Tape, bind: &Bindings, v: Value) -> Result<(Value, Value, Value)> {
        let shape = tape.value(v).shape().to_vec();
        if shape != [1, self.config.latent_dim] {
            return Err(Error::InvalidShape {
                op: "prn_decode",
                shape,
                detail: format!("expected [1, {}]", self.config.latent_dim),
            });
        }
        let m = self.config.m_refined;
        let a1 = self.fc1.forward(tape, bind, v)?;
        let a1 = tape.relu(a1);
        let a2 = self.fc2.forward(tape, bind, a1)?;
        let a2 = tape.relu(a2);
        let a3 = self.fc3.forward(tape, bind, a2)?;
        let a3 = tape.relu(a3);
        let coarse_flat = self.fc4.forward(tape, bind, a3)?;
        let coarse = tape.reshape(coarse_flat, &[m / 8, 3])?;

        let b1 = self.fc21.forward(tape, bind, a2)?;
        let b1 = tape.relu(b1);
        let b2 = self.mlp22.forward(tape, bind, b1)?;
        let med_res = tape.reshape(b2, &[m / 8, 2, 3])?;
        let coarse_grp = tape.reshape(coarse, &[m / 8, 1, 3])?;
        let med = tape.add(med_res, coarse_grp)?;
        let mediate = tape.reshape(med, &[m / 4, 3])?;

        let c1 = self.fc12.forward(tape, bind, a1)?;
        let c1 = tape.relu(c1);
        let c2 = self.mlp13.forward(tape, bind, c1)?;
        let c2 = tape.relu(c2);
        let c3 = self.mlp14.forward(tape, bind, c2)?;
        let c3 = tape.relu(c3);
        let c4 = self.mlp15.forward(tape, bind, c3)?;
        let fine_res = tape.reshape(c4, &[m / 4, 4, 3])?;
        let med_grp = tape.reshape(mediate, &[m / 4, 1, 3])?;
        let fine = tape.add(fine_res, med_grp)?;
        let fine = tape.reshape(fine, &[m, 3])?;
        Ok((coarse, mediate, fine))
    }

    /// Full refinement pass in the raw cloud's world frame: normalize, encode,
    /// decode, then map all three resolutions back with the input's centroid
    /// and scale.
    pub fn refine_graph(&self, tape: &mut Tape, bind: &Bindings, raw: &PointCloud) -> Result<PrnForward> {
        let (normalized, centroid, scale) = pointcloud::normalize(raw);
        let v = self.encode(tape, bind, &normalized)?;
        let (coarse, mediate, fine) = self.decode(tape, bind, v)?;
        let c = tape.constant(Tensor::new(&[1, 3], centroid.to_vec())?);
        let denorm = |tape: &mut Tape, x: Value| -> Result<Value> {
            let s = tape.scale(x, scale);
            tape.add(s, c)
        };
        Ok(PrnForward {
            coarse: denorm(tape, coarse)?,
            mediate: denorm(tape, mediate)?,
            fine: denorm(tape, fine)?,
        })
    }

    /// Inference convenience: refined M-point cloud as plain data.
    pub fn refine(&self, store: &ParamStore, raw: &PointCloud) -> Result<PointCloud> {
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let out = self.refine_graph(&mut tape, &bind, raw)?;
        let t = tape.value(out.fine);
        if !t.all_finite() {
            return Err(Error::NonFinite {
                term: "refined cloud".into(),
            });
        }
        let points = t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        PointCloud::from_points(points)
    }
}

/// Decoder outputs at the three resolutions, in the world frame.
pub struct PrnForward {
    pub coarse: Value,
    pub mediate: Value,
    pub fine: Value,
}

/// Per-point real/fake classifier with a logistic output.
#[derive(Debug, Clone)]
pub struct Discriminator {
    mlp: MlpStack,
}

impl Discriminator {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, name: &str) -> Discriminator {
        Discriminator {
            mlp: MlpStack::init(store, rng, name, 3, &[64, 128, 1], false),
        }
    }

    /// P x 3 points -> P x 1 probabilities in (0, 1).
    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, points: Value) -> Result<Value> {
        let logits = self.mlp.forward(tape, bind, points)?;
        Ok(tape.sigmoid(logits))
    }
}

/// Differentiable Chamfer distance between two point matrices. The
/// nearest-neighbor assignment is held fixed at the current values, which is
/// the standard almost-everywhere gradient.
pub fn chamfer_loss(tape: &mut Tape, a: Value, b: Value) -> Result<Value> {
    let (rows_a, rows_b) = (rows_of(tape, a)?, rows_of(tape, b)?);
    let ab: Vec<usize> = rows_a.iter().map(|p| pointcloud::nearest_index(p, &rows_b)).collect();
    let ba: Vec<usize> = rows_b.iter().map(|p| pointcloud::nearest_index(p, &rows_a)).collect();
    let nb = tape.gather_rows(b, &ab)?;
    let d1 = tape.sub(a, nb)?;
    let d1 = tape.sqnorm(d1);
    let d1 = tape.scale(d1, 1.0 / rows_a.len() as f64);
    let na = tape.gather_rows(a, &ba)?;
    let d2 = tape.sub(b, na)?;
    let d2 = tape.sqnorm(d2);
    let d2 = tape.scale(d2, 1.0 / rows_b.len() as f64);
    tape.add(d1, d2)
}

fn rows_of(tape: &Tape, v: Value) -> Result<Vec<[f64; 3]>> {
    let t = tape.value(v);
    let shape = t.shape();
    if shape.len() != 2 || shape[1] != 3 || shape[0] == 0 {
        return Err(Error::InvalidShape {
            op: "chamfer_loss",
            shape: shape.to_vec(),
            detail: "expected nonempty N x 3".into(),
        });
    }
    Ok(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Multi-resolution regression loss: Chamfer of each decoder output against
/// the ground truth, summed.
pub fn loss_mr(tape: &mut Tape, outputs: &PrnForward, gt: Value) -> Result<Value> {
    let fine = chamfer_loss(tape, outputs.fine, gt)?;
    let med = chamfer_loss(tape, outputs.mediate, gt)?;
    let coarse = chamfer_loss(tape, outputs.coarse, gt)?;
    let s = tape.add(fine, med)?;
    tape.add(s, coarse)
}

/// Adversarial objectives. `disc_objective` is the discriminator's ascent
/// target sum log D(real) + sum log(1 - D(fake)); `gen_objective` is what the
/// refiner descends (the fake-dependent part, or the non-saturating variant).
pub fn loss_adv(
    tape: &mut Tape,
    bind: &Bindings,
    disc: &Discriminator,
    gt_points: Value,
    refined: Value,
    non_saturating: bool,
) -> Result<(Value, Value)> {
    let sum_log = |tape: &mut Tape, probs: Value| -> Result<Value> {
        let clamped = tape.clamp(probs, LOG_CLAMP, 1.0 - LOG_CLAMP);
        let l = tape.log(clamped)?;
        tape.sum_reduce_axis(l, 0)
    };
    let d_real = disc.forward(tape, bind, gt_points)?;
    let term_real = sum_log(tape, d_real)?;
    let d_fake = disc.forward(tape, bind, refined)?;
    let neg = tape.scale(d_fake, -1.0);
    let one_minus = tape.add_const(neg, 1.0);
    let term_fake = sum_log(tape, one_minus)?;
    let disc_objective = tape.add(term_real, term_fake)?;
    let gen_objective = if non_saturating {
        let lp = sum_log(tape, d_fake)?;
        tape.scale(lp, -1.0)
    } else {
        term_fake
    };
    Ok((disc_objective, gen_objective))
}

/// lambda * adversarial + beta * multi-resolution, per object.
pub fn loss_prn(tape: &mut Tape, mr: Value, gen_adv: Value, lambda: f64, beta: f64) -> Result<Value> {
    let a = tape.scale(gen_adv, lambda);
    let b = tape.scale(mr, beta);
    tape.add(a, b)
}

/// Losses reported by one refinement training step, taken before the updates.
#[derive(Debug, Clone, Copy)]
pub struct PrnStepLosses {
    pub disc_objective: f64,
    pub gen_loss: f64,
}

/// One GAN-alternating step: a discriminator ADAM step on the negated
/// discriminator objective with the refiner frozen, then a refiner ADAM step
/// on lambda*adv + beta*mr with the discriminator frozen.
pub fn prn_train_step(
    prn: &PrnModel,
    prn_store: &mut ParamStore,
    disc: &Discriminator,
    disc_store: &mut ParamStore,
    batch: &[(PointCloud, PointCloud)],
    lr: f64,
    adam: AdamParams,
) -> Result<PrnStepLosses> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty training batch".into()));
    }
    let cfg = &prn.config;

    // discriminator phase
    let mut tape = Tape::new();
    let bind_d = disc_store.bind(&mut tape);
    let bind_p = prn_store.bind_frozen(&mut tape);
    let mut disc_total = None;
    for (raw, gt) in batch {
        let refined = prn.refine_graph(&mut tape, &bind_p, raw)?.fine;
        let gt_pts = tape.constant(Tensor::from_rows3(gt.points()));
        let (disc_obj, _) = loss_adv(&mut tape, &bind_d, disc, gt_pts, refined, cfg.non_saturating)?;
        disc_total = Some(match disc_total {
            None => disc_obj,
            Some(acc) => tape.add(acc, disc_obj)?,
        });
    }
    let disc_total = disc_total.unwrap();
    let disc_objective = tape.value(disc_total).item();
    if !disc_objective.is_finite() {
        return Err(Error::NonFinite {
            term: "discriminator objective".into(),
        });
    }
    let disc_loss = tape.scale(disc_total, -1.0);
    let grads = tape.backward(disc_loss)?;
    disc_store.accumulate(&bind_d, &grads);
    disc_store.adam_step(lr, adam)?;

    // refiner phase
    let mut tape = Tape::new();
    let bind_p = prn_store.bind(&mut tape);
    let bind_d = disc_store.bind_frozen(&mut tape);
    let mut gen_total = None;
    for (raw, gt) in batch {
        let outputs = prn.refine_graph(&mut tape, &bind_p, raw)?;
        let gt_pts = tape.constant(Tensor::from_rows3(gt.points()));
        let mr = loss_mr(&mut tape, &outputs, gt_pts)?;
        let (_, gen_adv) = loss_adv(&mut tape, &bind_d, disc, gt_pts, outputs.fine, cfg.non_saturating)?;
        let l = loss_prn(&mut tape, mr, gen_adv, cfg.lambda_adv, cfg.beta_mr)?;
        gen_total = Some(match gen_total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let gen_total = gen_total.unwrap();
    let gen_loss = tape.value(gen_total).item();
    if !gen_loss.is_finite() {
        return Err(Error::NonFinite {
            term: "refiner loss".into(),
        });
    }
    let grads = tape.backward(gen_total)?;
    prn_store.accumulate(&bind_p, &grads);
    prn_store.adam_step(lr, adam)?;

    Ok(PrnStepLosses {
        disc_objective,
        gen_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::synth::{synth_scene, ShapeKind, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64, n: usize, m: usize) -> (PrnModel, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = PrnModel::init(&mut store, &mut rng, "prn", PrnConfig::tiny(n, m)).unwrap();
        (model, store)
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        PointCloud::from_points(pts).unwrap()
    }

    #[test]
    fn encode_latent_length() {
        let (model, store) = tiny_model(0, 16, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, 16);
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let v = model.encode(&mut tape, &bind, &cloud).unwrap();
        assert_eq!(tape.value(v).shape(), &[1, 16]);
    }

    #[test]
    fn encode_permutation_invariant() {
        let (model, store) = tiny_model(3, 16, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = random_cloud(&mut rng, 16);
        let mut perm: Vec<usize> = (0..16).rev().collect();
        perm.swap(2, 9);
        let permuted = cloud.subset(&perm).unwrap();
        let run = |c: &PointCloud| {
            let mut tape = Tape::new();
            let bind = store.bind_frozen(&mut tape);
            let v = model.encode(&mut tape, &bind, c).unwrap();
            tape.value(v).data().to_vec()
        };
        let (a, b) = (run(&cloud), run(&permuted));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn encode_distinguishes_clouds() {
        let (model, store) = tiny_model(4, 16, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_cloud(&mut rng, 16);
        let b = random_cloud(&mut rng, 16);
        let run = |c: &PointCloud| {
            let mut tape = Tape::new();
            let bind = store.bind_frozen(&mut tape);
            let v = model.encode(&mut tape, &bind, c).unwrap();
            tape.value(v).data().to_vec()
        };
        assert_ne!(run(&a), run(&b));
    }

    #[test]
    fn encode_wrong_size_errors() {
        let (model, store) = tiny_model(0, 16, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 10);
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        assert!(model.encode(&mut tape, &bind, &cloud).is_err());
    }

    #[test]
    fn decode_shape_law() {
        for m in [32usize, 512] {
            let (model, store) = tiny_model(0, 16, m);
            let mut tape = Tape::new();
            let bind = store.bind_frozen(&mut tape);
            let v = tape.constant(Tensor::zeros(&[1, 16]));
            let (c, med, f) = model.decode(&mut tape, &bind, v).unwrap();
            assert_eq!(tape.value(c).shape(), &[m / 8, 3]);
            assert_eq!(tape.value(med).shape(), &[m / 4, 3]);
            assert_eq!(tape.value(f).shape(), &[m, 3]);
        }
    }

    #[test]
    fn zeroed_residuals_broadcast_parents() {
        let (model, mut store) = tiny_model(0, 16, 32);
        for name in ["prn.mlp22.w", "prn.mlp22.b", "prn.mlp15.w", "prn.mlp15.b"] {
            let t = store.get_mut(name).unwrap();
            t.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = tape.constant(Tensor::new(
            &[1, 16],
            (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ).unwrap());
        let (c, med, f) = model.decode(&mut tape, &bind, v).unwrap();
        let cd = tape.value(c).data().to_vec();
        let md = tape.value(med).data().to_vec();
        let fd = tape.value(f).data().to_vec();
        for i in 0..4 {
            for g in 0..2 {
                for k in 0..3 {
                    assert_eq!(md[(i * 2 + g) * 3 + k], cd[i * 3 + k]);
                }
            }
        }
        for j in 0..8 {
            for g in 0..4 {
                for k in 0..3 {
                    assert_eq!(fd[(j * 4 + g) * 3 + k], md[j * 3 + k]);
                }
            }
        }
    }

    #[test]
    fn chamfer_loss_matches_plain_chamfer() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let na = rng.gen_range(1..40);
            let nb = rng.gen_range(1..40);
            let a = random_cloud(&mut rng, na);
            let b = random_cloud(&mut rng, nb);
            let mut tape = Tape::new();
            let av = tape.constant(Tensor::from_rows3(a.points()));
            let bv = tape.constant(Tensor::from_rows3(b.points()));
            let l = chamfer_loss(&mut tape, av, bv).unwrap();
            let plain = pointcloud::chamfer(&a, &b).unwrap();
            assert!((tape.value(l).item() - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_mr_singletons_by_hand() {
        let mut tape = Tape::new();
        let out = tape.constant(Tensor::from_rows3(&[[1.0, 0.0, 0.0]]));
        let gt = tape.constant(Tensor::from_rows3(&[[0.0, 0.0, 0.0]]));
        let outputs = PrnForward {
            coarse: out,
            mediate: out,
            fine: out,
        };
        let l = loss_mr(&mut tape, &outputs, gt).unwrap();
        assert!((tape.value(l).item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn loss_mr_zero_at_ground_truth() {
        let mut tape = Tape::new();
        let gt = tape.constant(Tensor::from_rows3(&[[0.5, 0.2, -0.1], [0.0, 1.0, 0.0]]));
        let outputs = PrnForward {
            coarse: gt,
            mediate: gt,
            fine: gt,
        };
        let l = loss_mr(&mut tape, &outputs, gt).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    /// Discriminator stub that always outputs 0.5 (zero weights, zero bias).
    fn half_disc() -> (Discriminator, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let disc = Discriminator::init(&mut store, &mut rng, "disc");
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            store.get_mut(&name).unwrap().data_mut().fill(0.0);
        }
        (disc, store)
    }

    #[test]
    fn adversarial_objectives_at_half() {
        let (disc, store) = half_disc();
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let gt = tape.constant(Tensor::from_rows3(&[[0.1, 0.2, 0.3]]));
        let fake = tape.constant(Tensor::from_rows3(&[[0.4, 0.5, 0.6]]));
        let (d, g) = loss_adv(&mut tape, &bind, &disc, gt, fake, false).unwrap();
        assert!((tape.value(d).item() - 2.0 * 0.5f64.ln()).abs() < 1e-9);
        assert!((tape.value(g).item() - 0.5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn loss_prn_weighting() {
        let mut tape = Tape::new();
        let mr = tape.constant(Tensor::scalar(6.0));
        let gen = tape.constant(Tensor::scalar(-0.6931));
        let l = loss_prn(&mut tape, mr, gen, 0.05, 0.95).unwrap();
        assert!((tape.value(l).item() - 5.6653).abs() < 1e-4);
        let l0 = loss_prn(&mut tape, mr, gen, 0.0, 1.0).unwrap();
        assert_eq!(tape.value(l0).item(), 6.0);
        let l1 = loss_prn(&mut tape, mr, gen, 1.0, 0.0).unwrap();
        assert_eq!(tape.value(l1).item(), tape.value(gen).item());
    }

    fn scene_pair(seed: u64, n: usize) -> (PointCloud, PointCloud) {
        let (gt, corrupt, _) = synth_scene(&SyntheticSpec {
            shape: ShapeKind::Sphere,
            n_points: n,
            occlusion_fraction: 0.4,
            noise_sigma: 0.005,
            seed,
        })
        .unwrap();
        (corrupt, gt)
    }

    fn to_n_raw(cloud: &PointCloud, n: usize) -> PointCloud {
        let mut idx = pointcloud::fps(cloud, n.min(cloud.len()), 0).unwrap();
        while idx.len() < n {
            idx.push(idx[idx.len() % cloud.len()]);
        }
        cloud.subset(&idx).unwrap()
    }

    #[test]
    fn single_pair_overfit_reduces_chamfer() {
        let (model, mut store) = tiny_model(7, 32, 64);
        let mut disc_store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let disc = Discriminator::init(&mut disc_store, &mut rng, "disc");
        let (raw, gt) = scene_pair(21, 64);
        let raw = to_n_raw(&raw, 32);
        let mut cfg_model = model;
        cfg_model.config.lambda_adv = 0.0;
        cfg_model.config.beta_mr = 1.0;
        let before = pointcloud::chamfer(&cfg_model.refine(&store, &raw).unwrap(), &gt).unwrap();
        let batch = vec![(raw.clone(), gt.clone())];
        for _ in 0..200 {
            prn_train_step(
                &cfg_model,
                &mut store,
                &disc,
                &mut disc_store,
                &batch,
                1e-3,
                AdamParams::default(),
            )
            .unwrap();
        }
        let after = pointcloud::chamfer(&cfg_model.refine(&store, &raw).unwrap(), &gt).unwrap();
        assert!(
            after <= 0.1 * before,
            "chamfer {before} -> {after}, wanted >= 90% reduction"
        );
    }

    #[test]
    fn zero_lr_keeps_losses_constant() {
        let (model, mut store) = tiny_model(7, 32, 64);
        let mut disc_store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let disc = Discriminator::init(&mut disc_store, &mut rng, "disc");
        let (raw, gt) = scene_pair(22, 64);
        let raw = to_n_raw(&raw, 32);
        let batch = vec![(raw, gt)];
        let mut seen = Vec::new();
        for _ in 0..3 {
            let l = prn_train_step(
                &model,
                &mut store,
                &disc,
                &mut disc_store,
                &batch,
                0.0,
                AdamParams::default(),
            )
            .unwrap();
            seen.push((l.disc_objective, l.gen_loss));
        }
        assert_eq!(seen[0], seen[1]);
        assert_eq!(seen[1], seen[2]);
    }

    #[test]
    fn seeded_training_is_deterministic() {
        let run = || {
            let (model, mut store) = tiny_model(7, 32, 64);
            let mut disc_store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let disc = Discriminator::init(&mut disc_store, &mut rng, "disc");
            let (raw, gt) = scene_pair(23, 64);
            let raw = to_n_raw(&raw, 32);
            let batch = vec![(raw, gt)];
            let mut losses = Vec::new();
            for _ in 0..5 {
                let l = prn_train_step(
                    &model,
                    &mut store,
                    &disc,
                    &mut disc_store,
                    &batch,
                    1e-3,
                    AdamParams::default(),
                )
                .unwrap();
                losses.push((l.disc_objective.to_bits(), l.gen_loss.to_bits()));
            }
            losses
        };
        assert_eq!(run(), run());
    }
}

//! The assembled pipeline: refinement, fusion, pose regression, the two-phase
//! training schedule, evaluation, and timing.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamParams, Bindings, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::mmf::{FusionNet, MmfConfig};
use crate::pointcloud::{self, PointCloud};
use crate::pose::{
    candidates_from_values, loss_pose_graph, select_pose, HeadOutputs, Pose, PoseHeadConfig,
    PoseHeads,
};
use crate::prn::{loss_adv, loss_mr, loss_prn, prn_train_step, Discriminator, PrnConfig, PrnModel, PrnForward};

use super::checkpoint::{load_into, save_checkpoint};
use super::config::RunConfig;
use super::dataset::Sample;

/// All networks plus their three optimizer stores: refiner, discriminator,
/// and the fusion+pose "main" parameters.
pub struct PrGcn {
    pub config: RunConfig,
    pub prn: PrnModel,
    pub disc: Discriminator,
    pub fusion: FusionNet,
    pub heads: PoseHeads,
    pub prn_store: ParamStore,
    pub disc_store: ParamStore,
    pub main_store: ParamStore,
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub phase: &'static str,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&format!(
                "epoch {:3}  phase {:5}  lr {:.2e}  loss {:.6}\n",
                e.epoch, e.phase, e.lr, e.loss
            ));
        }
        out
    }
}

/// One bench measurement.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub component: &'static str,
    pub median_ms: f64,
    pub runs: usize,
}

impl PrGcn {
    pub fn new(config: RunConfig) -> Result<PrGcn> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = |w: usize| config.scaled(w);
        let prn_cfg = PrnConfig {
            n_raw: config.n_raw,
            m_refined: config.m_refined,
            encoder_widths: [s(64), s(64), s(128), s(128), s(256), s(256)],
            latent_dim: config.latent_dim,
            decoder_fc_widths: [s(512), s(512), s(256), 3 * config.m_refined / 8],
            lambda_adv: config.lambda,
            beta_mr: config.beta,
            non_saturating: false,
        };
        let mmf_cfg = MmfConfig {
            k: config.k_nn,
            d_rgb: s(32),
            gcn_f_widths: vec![s(64), s(128), s(256)],
            gcn_ref_widths: vec![s(64), s(128), s(256)],
            t_widths: vec![s(512), s(512), s(256)],
            ref_points: config.n_raw,
        };
        let head_cfg = PoseHeadConfig {
            feature_dim: mmf_cfg.d_out(),
            hidden: [s(256), s(128), s(64)],
        };
        let mut prn_store = ParamStore::new();
        let prn = PrnModel::init(&mut prn_store, &mut rng, "prn", prn_cfg)?;
        let mut disc_store = ParamStore::new();
        let disc = Discriminator::init(&mut disc_store, &mut rng, "disc");
        let mut main_store = ParamStore::new();
        let fusion = FusionNet::init(&mut main_store, &mut rng, "mmf", mmf_cfg)?;
        let heads = PoseHeads::init(&mut main_store, &mut rng, "heads", head_cfg);
        Ok(PrGcn {
            config,
            prn,
            disc,
            fusion,
            heads,
            prn_store,
            disc_store,
            main_store,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(
            path,
            &[
                ("prn", &self.prn_store),
                ("disc", &self.disc_store),
                ("main", &self.main_store),
            ],
        )
    }

    pub fn load(&mut self, path: &std::path::Path) -> Result<()> {
        load_into(
            path,
            &mut [
                ("prn", &mut self.prn_store),
                ("disc", &mut self.disc_store),
                ("main", &mut self.main_store),
            ],
        )
    }

    /// Bring an input cloud to exactly n_raw points: farthest-point sample
    /// down if larger, resample with replacement (cyclically) if smaller.
    pub fn prepare_raw(&self, cloud: &PointCloud) -> Result<PointCloud> {
        let n = self.config.n_raw;
        if cloud.len() == n {
            return Ok(cloud.clone());
        }
        let indices: Vec<usize> = if cloud.len() > n {
            pointcloud::fps(cloud, n, 0)?
        } else {
            (0..n).map(|i| i % cloud.len()).collect()
        };
        cloud.subset(&indices)
    }

    /// Refined M-point cloud for a raw input of any size.
    pub fn refine(&self, raw: &PointCloud) -> Result<PointCloud> {
        let prepared = self.prepare_raw(raw)?;
        self.prn.refine(&self.prn_store, &prepared)
    }

    /// Refine, fuse, and regress on one prepared cloud; head translations
    /// are mapped back to the world frame of the input. Returns the head
    /// outputs and the refiner outputs for loss construction.
    fn forward_pose(
        &self,
        tape: &mut Tape,
        prn_bind: &Bindings,
        main_bind: &Bindings,
        prepared: &PointCloud,
    ) -> Result<(HeadOutputs, PrnForward)> {
        let refined = self.prn.refine_graph(tape, prn_bind, prepared)?;
        let (g_o, _sampled) = self.fusion.forward(tape, main_bind, prepared, refined.fine)?;
        let out = self.heads.forward(tape, main_bind, g_o)?;
        let (_, centroid, scale) = pointcloud::normalize(prepared);
        let scaled = tape.scale(out.trans, scale);
        let c = tape.constant(Tensor::new(&[1, 3], centroid.to_vec())?);
        let trans_world = tape.add(scaled, c)?;
        Ok((
            HeadOutputs {
                quats: out.quats,
                trans: trans_world,
                conf: out.conf,
            },
            refined,
        ))
    }

    /// Full inference: the highest-confidence candidate pose.
    pub fn predict(&self, raw: &PointCloud) -> Result<Pose> {
        let prepared = self.prepare_raw(raw)?;
        let mut tape = Tape::new();
        let prn_bind = self.prn_store.bind_frozen(&mut tape);
        let main_bind = self.main_store.bind_frozen(&mut tape);
        let (out, _) = self.forward_pose(&mut tape, &prn_bind, &main_bind, &prepared)?;
        let candidates = candidates_from_values(&tape, &out);
        if candidates
            .confidences
            .iter()
            .any(|c| !c.is_finite())
        {
            return Err(Error::NonFinite {
                term: "pose confidences".into(),
            });
        }
        select_pose(&candidates)
    }

    fn model_points_for(&self, sample: &Sample) -> Result<Vec<[f64; 3]>> {
        let m = self.config.model_points.min(sample.model.len());
        let idx = pointcloud::fps(&sample.model, m, 0)?;
        Ok(sample.model.subset(&idx)?.points().to_vec())
    }

    /// The two-phase schedule: alternating refinement-only / pose-only epochs,
    /// then joint epochs on the combined objective, with the learning rate
    /// decayed after half of the total epochs.
    pub fn train(&mut self, samples: &[Sample]) -> Result<TrainLog> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("no training samples".into()));
        }
        let items: Vec<(PointCloud, &Sample, Vec<[f64; 3]>)> = samples
            .iter()
            .map(|s| Ok((self.prepare_raw(&s.raw)?, s, self.model_points_for(s)?)))
            .collect::<Result<_>>()?;
        let adam = AdamParams::default();
        let total = self.config.alt_epochs + self.config.joint_epochs;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x7261696e);
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut log = TrainLog::default();

        for epoch in 0..total {
            let lr = if epoch >= total / 2 {
                self.config.lr * self.config.lr_decay
            } else {
                self.config.lr
            };
            order.shuffle(&mut rng);
            let (phase, loss) = if epoch < self.config.alt_epochs {
                if epoch % 2 == 0 {
                    ("prn", self.prn_epoch(&items, &order, lr, adam)?)
                } else {
                    ("pose", self.pose_epoch(&items, &order, lr, adam)?)
                }
            } else {
                ("joint", self.joint_epoch(&items, &order, lr, adam)?)
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    term: format!("{phase} loss at epoch {epoch}"),
                });
            }
            log.epochs.push(EpochLog {
                phase,
                epoch,
                lr,
                loss,
            });
        }
        Ok(log)
    }

    fn prn_epoch(
        &mut self,
        items: &[(PointCloud, &Sample, Vec<[f64; 3]>)],
        order: &[usize],
        lr: f64,
        adam: AdamParams,
    ) -> Result<f64> {
        let mut total = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<(PointCloud, PointCloud)> = chunk
                .iter()
                .map(|&i| (items[i].0.clone(), items[i].1.gt.clone()))
                .collect();
            let losses = prn_train_step(
                &self.prn,
                &mut self.prn_store,
                &self.disc,
                &mut self.disc_store,
                &batch,
                lr,
                adam,
            )?;
            total += losses.gen_loss / batch.len() as f64;
            batches += 1.0;
        }
        Ok(total / batches)
    }

    fn pose_epoch(
        &mut self,
        items: &[(PointCloud, &Sample, Vec<[f64; 3]>)],
        order: &[usize],
        lr: f64,
        adam: AdamParams,
    ) -> Result<f64> {
        let mut total = 0.0;
        for chunk in order.chunks(self.config.joint_batch_size) {
            let mut tape = Tape::new();
            let prn_bind = self.prn_store.bind_frozen(&mut tape);
            let main_bind = self.main_store.bind(&mut tape);
            let mut batch_loss = None;
            for &i in chunk {
                let (prepared, sample, model_pts) = &items[i];
                let (out, _) = self.forward_pose(&mut tape, &prn_bind, &main_bind, prepared)?;
                let l = loss_pose_graph(&mut tape, &out, &sample.pose, model_pts)?;
                total += tape.value(l).item();
                batch_loss = Some(match batch_loss {
                    None => l,
                    Some(acc) => tape.add(acc, l)?,
                });
            }
            let grads = tape.backward(batch_loss.unwrap())?;
            self.main_store.accumulate(&main_bind, &grads);
            self.main_store.adam_step(lr, adam)?;
        }
        Ok(total / items.len() as f64)
    }

    fn joint_epoch(
        &mut self,
        items: &[(PointCloud, &Sample, Vec<[f64; 3]>)],
        order: &[usize],
        lr: f64,
        adam: AdamParams,
    ) -> Result<f64> {
        let mut total = 0.0;
        for chunk in order.chunks(self.config.joint_batch_size) {
            // discriminator step on this batch first
            {
                let mut tape = Tape::new();
                let prn_bind = self.prn_store.bind_frozen(&mut tape);
                let disc_bind = self.disc_store.bind(&mut tape);
                let mut obj = None;
                for &i in chunk {
                    let (prepared, sample, _) = &items[i];
                    let refined = self.prn.refine_graph(&mut tape, &prn_bind, prepared)?;
                    let gt_pts = tape.constant(Tensor::from_rows3(sample.gt.points()));
                    let (disc_obj, _) = loss_adv(
                        &mut tape,
                        &disc_bind,
                        &self.disc,
                        gt_pts,
                        refined.fine,
                        self.prn.config.non_saturating,
                    )?;
                    obj = Some(match obj {
                        None => disc_obj,
                        Some(acc) => tape.add(acc, disc_obj)?,
                    });
                }
                let neg = tape.scale(obj.unwrap(), -1.0);
                let grads = tape.backward(neg)?;
                self.disc_store.accumulate(&disc_bind, &grads);
                self.disc_store.adam_step(lr, adam)?;
            }

            // combined objective through refiner, fusion, and heads
            let mut tape = Tape::new();
            let prn_bind = self.prn_store.bind(&mut tape);
            let main_bind = self.main_store.bind(&mut tape);
            let disc_bind = self.disc_store.bind_frozen(&mut tape);
            let mut batch_loss = None;
            for &i in chunk {
                let (prepared, sample, model_pts) = &items[i];
                let (out, refined) = self.forward_pose(&mut tape, &prn_bind, &main_bind, prepared)?;
                let pose_l = loss_pose_graph(&mut tape, &out, &sample.pose, model_pts)?;
                let gt_pts = tape.constant(Tensor::from_rows3(sample.gt.points()));
                let mr = loss_mr(&mut tape, &refined, gt_pts)?;
                let (_, gen_adv) = loss_adv(
                    &mut tape,
                    &disc_bind,
                    &self.disc,
                    gt_pts,
                    refined.fine,
                    self.prn.config.non_saturating,
                )?;
                let prn_l = loss_prn(&mut tape, mr, gen_adv, self.config.lambda, self.config.beta)?;
                let scaled = tape.scale(prn_l, self.config.mu);
                let l = tape.add(pose_l, scaled)?;
                total += tape.value(l).item();
                batch_loss = Some(match batch_loss {
                    None => l,
                    Some(acc) => tape.add(acc, l)?,
                });
            }
            let grads = tape.backward(batch_loss.unwrap())?;
            self.prn_store.accumulate(&prn_bind, &grads);
            self.main_store.accumulate(&main_bind, &grads);
            self.prn_store.adam_step(lr, adam)?;
            self.main_store.adam_step(lr, adam)?;
        }
        Ok(total / items.len() as f64)
    }

    /// Per-sample ADD/ADD-S against ground truth. `use_gt` bypasses the
    /// network and scores the ground-truth pose against itself. Failed
    /// samples are recorded and skipped; `threads > 1` fans samples out and
    /// merges in manifest order.
    pub fn eval(
        &self,
        samples: &[Sample],
        use_gt: bool,
        symmetric: bool,
        threads: usize,
    ) -> Result<(EvalReport, Vec<String>)> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("no evaluation samples".into()));
        }
        let one = |s: &Sample| -> Result<(f64, f64)> {
            let pred = if use_gt { s.pose } else { self.predict(&s.raw)? };
            Ok((
                metrics::add_metric(&s.pose, &pred, &s.model),
                metrics::adds_metric(&s.pose, &pred, &s.model),
            ))
        };
        let results: Vec<Result<(f64, f64)>> = if threads <= 1 {
            samples.iter().map(one).collect()
        } else {
            let mut slots: Vec<Option<Result<(f64, f64)>>> = (0..samples.len()).map(|_| None).collect();
            std::thread::scope(|scope| {
                let chunk = samples.len().div_ceil(threads);
                for (samples_chunk, slots_chunk) in
                    samples.chunks(chunk).zip(slots.chunks_mut(chunk))
                {
                    scope.spawn(move || {
                        for (s, slot) in samples_chunk.iter().zip(slots_chunk.iter_mut()) {
                            *slot = Some(one(s));
                        }
                    });
                }
            });
            slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
        };

        let mut failures = Vec::new();
        let mut per_object: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>, f64)> =
            Default::default();
        for (i, (sample, res)) in samples.iter().zip(results).enumerate() {
            match res {
                Ok((add, adds)) => {
                    let entry = per_object
                        .entry(sample.object.clone())
                        .or_insert_with(|| (Vec::new(), Vec::new(), metrics::diameter(&sample.model)));
                    entry.0.push(add);
                    entry.1.push(adds);
                }
                Err(e) => failures.push(format!("sample {i} ({}): {e}", sample.object)),
            }
        }
        let mut report = EvalReport::default();
        for (object, (add, adds, diam)) in &per_object {
            report.push_object(object, add, adds, symmetric, *diam)?;
        }
        Ok((report, failures))
    }

    /// Median wall-clock timings (10 runs) of point refinement (PR) and the
    /// full pose-estimation forward (PE).
    pub fn bench(&self, raw: &PointCloud) -> Result<Vec<BenchRow>> {
        const RUNS: usize = 10;
        let median = |mut v: Vec<f64>| -> f64 {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let mut pr = Vec::with_capacity(RUNS);
        for _ in 0..RUNS {
            let t = Instant::now();
            self.refine(raw)?;
            pr.push(t.elapsed().as_secs_f64() * 1e3);
        }
        let mut pe = Vec::with_capacity(RUNS);
        for _ in 0..RUNS {
            let t = Instant::now();
            self.predict(raw)?;
            pe.push(t.elapsed().as_secs_f64() * 1e3);
        }
        Ok(vec![
            BenchRow {
                component: "PR",
                median_ms: median(pr),
                runs: RUNS,
            },
            BenchRow {
                component: "PE",
                median_ms: median(pe),
                runs: RUNS,
            },
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{generate, load_samples, SynthOptions};
    use crate::pointcloud::synth::ShapeKind;

    fn tiny_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.n_raw = 16;
        c.m_refined = 32;
        c.k_nn = 4;
        c.net_scale = 0.05;
        c.latent_dim = 16;
        c.model_points = 8;
        c.batch_size = 4;
        c.joint_batch_size = 4;
        c.alt_epochs = 2;
        c.joint_epochs = 2;
        c.lr = 1e-3;
        c.seed = 11;
        c
    }

    fn tiny_samples(dir: &std::path::Path, count: usize, seed: u64) -> Vec<Sample> {
        let manifest = generate(
            dir,
            &SynthOptions {
                shape: ShapeKind::Sphere,
                count,
                n_points: 24,
                occlusion: 0.25,
                noise: 0.005,
                seed,
                model_points: 12,
            },
        )
        .unwrap();
        load_samples(&manifest).unwrap()
    }

    #[test]
    fn train_predict_eval_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_samples(dir.path(), 6, 3);
        let mut model = PrGcn::new(tiny_config()).unwrap();
        let log = model.train(&samples).unwrap();
        assert_eq!(log.epochs.len(), 4);
        assert_eq!(log.epochs[0].phase, "prn");
        assert_eq!(log.epochs[1].phase, "pose");
        assert_eq!(log.epochs[2].phase, "joint");
        assert!(log.epochs.iter().all(|e| e.loss.is_finite()));
        // lr decayed in the second half
        assert!(log.epochs[3].lr < log.epochs[0].lr);

        let pose = model.predict(&samples[0].raw).unwrap();
        let n: f64 = pose.quat.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-9);

        let (report, failures) = model.eval(&samples, false, true, 1).unwrap();
        assert!(failures.is_empty());
        assert_eq!(report.objects.len(), 1);
    }

    #[test]
    fn ground_truth_bypass_scores_perfectly() {
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_samples(dir.path(), 4, 8);
        let model = PrGcn::new(tiny_config()).unwrap();
        let (report, failures) = model.eval(&samples, true, true, 1).unwrap();
        assert!(failures.is_empty());
        let row = &report.objects[0];
        assert_eq!(row.mean_add, 0.0);
        assert_eq!(row.mean_adds, 0.0);
        assert_eq!(row.auc_pct, 100.0);
    }

    #[test]
    fn parallel_eval_matches_serial() {
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_samples(dir.path(), 5, 4);
        let model = PrGcn::new(tiny_config()).unwrap();
        let (serial, _) = model.eval(&samples, false, true, 1).unwrap();
        let (parallel, _) = model.eval(&samples, false, true, 3).unwrap();
        assert_eq!(serial.objects[0].mean_add.to_bits(), parallel.objects[0].mean_add.to_bits());
        assert_eq!(serial.objects[0].auc_pct.to_bits(), parallel.objects[0].auc_pct.to_bits());
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_samples(dir.path(), 5, 6);
        let run = || {
            let mut model = PrGcn::new(tiny_config()).unwrap();
            let log = model.train(&samples).unwrap();
            let ckpt = dir.path().join(format!("ck_{:x}.ckpt", rand::random::<u64>()));
            model.save(&ckpt).unwrap();
            let bytes = std::fs::read(&ckpt).unwrap();
            let losses: Vec<u64> = log.epochs.iter().map(|e| e.loss.to_bits()).collect();
            (losses, bytes)
        };
        let (l1, b1) = run();
        let (l2, b2) = run();
        assert_eq!(l1, l2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn zero_lr_freezes_losses() {
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_samples(dir.path(), 4, 9);
        let mut cfg = tiny_config();
        cfg.lr = 0.0;
        cfg.alt_epochs = 4;
        cfg.joint_epochs = 2;
        let mut model = PrGcn::new(cfg).unwrap();
        let log = model.train(&samples).unwrap();
        let by_phase = |p: &str| -> Vec<f64> {
            log.epochs.iter().filter(|e| e.phase == p).map(|e| e.loss).collect()
        };
        for phase in ["prn", "pose", "joint"] {
            let losses = by_phase(phase);
            for w in losses.windows(2) {
                assert!((w[0] - w[1]).abs() < 1e-12, "{phase}: {:?}", losses);
            }
        }
    }

    #[test]
    fn refine_and_prepare_sizes() {
        let model = PrGcn::new(tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_samples(dir.path(), 1, 12);
        let refined = model.refine(&samples[0].raw).unwrap();
        assert_eq!(refined.len(), 32);
        // oversized and undersized inputs both map to n_raw
        let big = crate::pointcloud::synth::sample_canonical(ShapeKind::Cube, 50, 1);
        assert_eq!(model.prepare_raw(&big).unwrap().len(), 16);
        let small = crate::pointcloud::synth::sample_canonical(ShapeKind::Cube, 5, 1);
        assert_eq!(model.prepare_raw(&small).unwrap().len(), 16);
    }

    #[test]
    fn checkpoint_roundtrip_restores_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_samples(dir.path(), 3, 5);
        let mut model = PrGcn::new(tiny_config()).unwrap();
        model.train(&samples).unwrap();
        let ckpt = dir.path().join("model.ckpt");
        model.save(&ckpt).unwrap();
        let mut fresh = PrGcn::new(tiny_config()).unwrap();
        fresh.load(&ckpt).unwrap();
        let a = model.predict(&samples[0].raw).unwrap();
        let b = fresh.predict(&samples[0].raw).unwrap();
        // equal to checkpoint (single) precision
        for (x, y) in a.quat.iter().zip(&b.quat) {
            assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in a.trans.iter().zip(&b.trans) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn bench_reports_both_components() {
        let model = PrGcn::new(tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_samples(dir.path(), 1, 2);
        let rows = model.bench(&samples[0].raw).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].component, "PR");
        assert_eq!(rows[1].component, "PE");
        assert!(rows.iter().all(|r| r.runs == 10 && r.median_ms >= 0.0));
    }
}

//! Central finite-difference verification of the autodiff engine: one check
//! per primitive and one per network, each reported as a named row with its
//! worst relative error across seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Tensor, Value};
use crate::error::Result;
use crate::mmf::{FusionNet, MmfConfig};
use crate::pointcloud::synth::{sample_canonical, synth_scene, ShapeKind, SyntheticSpec};
use crate::pose::{loss_pose_graph, Pose, PoseHeadConfig, PoseHeads};
use crate::prn::{loss_adv, loss_mr, Discriminator, PrnConfig, PrnModel};

pub const TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
pub const DEFAULT_SEEDS: u64 = 10;

#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_err: f64,
}

impl CheckRow {
    pub fn pass(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-4)
}

fn max_rel_err(ad: &[f64], fd: &[f64]) -> f64 {
    ad.iter()
        .zip(fd)
        .map(|(&a, &f)| rel_err(a, f))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function of a flat vector.
fn central_diff(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64]) -> Result<Vec<f64>> {
    let mut work = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        work[i] = x[i] + FD_STEP;
        let plus = f(&work)?;
        work[i] = x[i] - FD_STEP;
        let minus = f(&work)?;
        work[i] = x[i];
        out.push((plus - minus) / (2.0 * FD_STEP));
    }
    Ok(out)
}

// ----- primitive checks -----

/// Compare autodiff against central differences for one op: inputs are
/// leaves with the given shapes, the op output is read out as the mean of an
/// elementwise product with a fixed random weight tensor.
fn check_op(
    rng: &mut ChaCha8Rng,
    shapes: &[&[usize]],
    gen: impl Fn(&mut ChaCha8Rng) -> f64,
    build: impl Fn(&mut Tape, &[Value]) -> Result<Value>,
    grad_fudge: f64,
) -> Result<f64> {
    let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let total: usize = sizes.iter().sum();
    let x0: Vec<f64> = (0..total).map(|_| gen(rng)).collect();

    let make_leaves = |tape: &mut Tape, x: &[f64], trainable: bool| -> Vec<Value> {
        let mut leaves = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (shape, &n) in shapes.iter().zip(&sizes) {
            let t = Tensor::new(shape, x[offset..offset + n].to_vec()).unwrap();
            leaves.push(tape.leaf(t, trainable));
            offset += n;
        }
        leaves
    };

    // probe the output shape to fix the readout weights
    let out_numel = {
        let mut tape = Tape::new();
        let leaves = make_leaves(&mut tape, &x0, false);
        let out = build(&mut tape, &leaves)?;
        tape.value(out).numel()
    };
    let w: Vec<f64> = (0..out_numel).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let eval = |tape: &mut Tape, leaves: &[Value]| -> Result<Value> {
        let out = build(tape, leaves)?;
        let shape = tape.value(out).shape().to_vec();
        let wt = tape.constant(Tensor::new(&shape, w.clone()).unwrap());
        let prod = tape.mul(out, wt)?;
        Ok(tape.mean_reduce(prod))
    };

    let mut tape = Tape::new();
    let leaves = make_leaves(&mut tape, &x0, true);
    let loss = eval(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let mut ad = Vec::with_capacity(total);
    for (leaf, &n) in leaves.iter().zip(&sizes) {
        match grads.get(*leaf) {
            Some(g) => ad.extend_from_slice(g),
            None => ad.extend(std::iter::repeat(0.0).take(n)),
        }
    }
    let ad: Vec<f64> = ad.iter().map(|g| g * grad_fudge).collect();

    let fd = central_diff(
        |x| {
            let mut tape = Tape::new();
            let leaves = make_leaves(&mut tape, x, false);
            let loss = eval(&mut tape, &leaves)?;
            Ok(tape.value(loss).item())
        },
        &x0,
    )?;
    Ok(max_rel_err(&ad, &fd))
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(-1.0..1.0)
}

/// Uniform in (-1,1) but bounded away from the kink at 0.
fn away_from_zero(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let v: f64 = rng.gen_range(-1.0..1.0);
        if v.abs() > 1e-3 {
            return v;
        }
    }
}

fn positive(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(0.5..2.0)
}

/// Uniform in (-1,1) but bounded away from the clamp edges at +-0.5.
fn away_from_clamp_edges(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let v: f64 = rng.gen_range(-1.0..1.0);
        if (v.abs() - 0.5).abs() > 1e-3 {
            return v;
        }
    }
}

fn primitive_checks(seed: u64, fudge_square: f64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b9).wrapping_add(1));
    let mut rows: Vec<CheckRow> = Vec::new();
    macro_rules! check {
        ($name:expr, $shapes:expr, $gen:expr, $build:expr) => {
            check!($name, $shapes, $gen, $build, 1.0)
        };
        ($name:expr, $shapes:expr, $gen:expr, $build:expr, $fudge:expr) => {
            rows.push(CheckRow {
                name: $name.to_string(),
                max_rel_err: check_op(&mut rng, $shapes, $gen, $build, $fudge)?,
            });
        };
    }

    check!("matmul", &[&[3, 4], &[4, 2]], uniform, |t: &mut Tape, v: &[Value]| {
        t.matmul(v[0], v[1])
    });
    check!("add", &[&[3, 4], &[4]], uniform, |t: &mut Tape, v: &[Value]| {
        t.add(v[0], v[1])
    });
    check!("sub", &[&[3, 4], &[1, 4]], uniform, |t: &mut Tape, v: &[Value]| {
        t.sub(v[0], v[1])
    });
    check!("mul", &[&[3, 4], &[3, 1]], uniform, |t: &mut Tape, v: &[Value]| {
        t.mul(v[0], v[1])
    });
    check!("relu", &[&[3, 4]], away_from_zero, |t: &mut Tape, v: &[Value]| {
        Ok(t.relu(v[0]))
    });
    check!("sigmoid", &[&[3, 4]], uniform, |t: &mut Tape, v: &[Value]| {
        Ok(t.sigmoid(v[0]))
    });
    check!(
        "square",
        &[&[3, 4]],
        uniform,
        |t: &mut Tape, v: &[Value]| Ok(t.square(v[0])),
        fudge_square
    );
    check!("log", &[&[3, 4]], positive, |t: &mut Tape, v: &[Value]| t.log(v[0]));
    check!("sqrt", &[&[3, 4]], positive, |t: &mut Tape, v: &[Value]| t.sqrt(v[0]));
    check!("recip", &[&[3, 4]], positive, |t: &mut Tape, v: &[Value]| t.recip(v[0]));
    check!(
        "clamp",
        &[&[3, 4]],
        away_from_clamp_edges,
        |t: &mut Tape, v: &[Value]| Ok(t.clamp(v[0], -0.5, 0.5))
    );
    check!("scale", &[&[3, 4]], uniform, |t: &mut Tape, v: &[Value]| {
        Ok(t.scale(v[0], 1.7))
    });
    check!("add_const", &[&[3, 4]], uniform, |t: &mut Tape, v: &[Value]| {
        Ok(t.add_const(v[0], 0.3))
    });
    check!("concat", &[&[3, 2], &[3, 3]], uniform, |t: &mut Tape, v: &[Value]| {
        t.concat(1, &[v[0], v[1]])
    });
    check!("gather_rows", &[&[3, 4]], uniform, |t: &mut Tape, v: &[Value]| {
        t.gather_rows(v[0], &[2, 0, 2, 1])
    });
    check!("max_reduce_axis", &[&[3, 5]], uniform, |t: &mut Tape, v: &[Value]| {
        t.max_reduce_axis(v[0], 1)
    });
    check!("sum_reduce_axis", &[&[3, 4]], uniform, |t: &mut Tape, v: &[Value]| {
        t.sum_reduce_axis(v[0], 0)
    });
    check!("mean_reduce", &[&[3, 4]], uniform, |t: &mut Tape, v: &[Value]| {
        Ok(t.mean_reduce(v[0]))
    });
    check!("sqnorm", &[&[3, 4]], uniform, |t: &mut Tape, v: &[Value]| {
        Ok(t.sqnorm(v[0]))
    });
    check!("reshape", &[&[3, 4]], uniform, |t: &mut Tape, v: &[Value]| {
        t.reshape(v[0], &[2, 6])
    });
    Ok(rows)
}

// ----- network checks -----

/// Max relative error of d(loss)/d(params) for every parameter in `store`,
/// with `forward` evaluating the loss on an arbitrary tape.
fn check_store_grad(
    store: &mut ParamStore,
    forward: impl Fn(&mut Tape, &crate::autodiff::Bindings) -> Result<Value>,
) -> Result<f64> {
    store.zero_grads();
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let loss = forward(&mut tape, &bind)?;
    let grads = tape.backward(loss)?;
    store.accumulate(&bind, &grads);
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut ad = Vec::new();
    for name in &names {
        match store.grad(name) {
            Some(g) => ad.extend_from_slice(g),
            None => ad.extend(std::iter::repeat(0.0).take(store.get(name)?.numel())),
        }
    }
    store.zero_grads();

    let mut worst = 0.0f64;
    let mut flat_index = 0;
    for name in &names {
        let n = store.get(name)?.numel();
        for i in 0..n {
            let orig = store.get(name)?.data()[i];
            let mut eval_at = |v: f64| -> Result<f64> {
                store.get_mut(name)?.data_mut()[i] = v;
                let mut tape = Tape::new();
                let bind = store.bind_frozen(&mut tape);
                let loss = forward(&mut tape, &bind)?;
                Ok(tape.value(loss).item())
            };
            let plus = eval_at(orig + FD_STEP)?;
            let minus = eval_at(orig - FD_STEP)?;
            store.get_mut(name)?.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(ad[flat_index], fd));
            flat_index += 1;
        }
    }
    Ok(worst)
}

fn check_prn(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = PrnConfig::tiny(8, 16);
    cfg.encoder_widths = [4, 4, 4, 4, 4, 4];
    cfg.latent_dim = 8;
    cfg.decoder_fc_widths = [8, 8, 8, 6];
    let model = PrnModel::init(&mut store, &mut rng, "prn", cfg)?;
    let (gt, corrupt, _) = synth_scene(&SyntheticSpec {
        shape: ShapeKind::Torus,
        n_points: 8,
        occlusion_fraction: 0.0,
        noise_sigma: 0.01,
        seed: seed ^ 0xabcd,
    })?;
    check_store_grad(&mut store, |tape, bind| {
        let out = model.refine_graph(tape, bind, &corrupt)?;
        let gt_pts = tape.constant(Tensor::from_rows3(gt.points()));
        loss_mr(tape, &out, gt_pts)
    })
}

fn check_discriminator(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let disc = Discriminator::init(&mut store, &mut rng, "disc");
    let real = sample_canonical(ShapeKind::Sphere, 6, seed ^ 1);
    let fake = sample_canonical(ShapeKind::Cube, 6, seed ^ 2);
    check_store_grad(&mut store, |tape, bind| {
        let gt_pts = tape.constant(Tensor::from_rows3(real.points()));
        let fake_pts = tape.constant(Tensor::from_rows3(fake.points()));
        let (disc_obj, _) = loss_adv(tape, bind, &disc, gt_pts, fake_pts, false)?;
        Ok(disc_obj)
    })
}

fn check_mmf(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = MmfConfig::tiny(3, 10);
    cfg.d_rgb = 3;
    cfg.gcn_f_widths = vec![4, 4];
    cfg.gcn_ref_widths = vec![4, 4];
    cfg.t_widths = vec![6, 6];
    let net = FusionNet::init(&mut store, &mut rng, "mmf", cfg)?;
    let raw = sample_canonical(ShapeKind::Torus, 10, seed ^ 3);
    let refined = sample_canonical(ShapeKind::Torus, 14, seed ^ 4);
    let w: Vec<f64> = (0..10 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    check_store_grad(&mut store, |tape, bind| {
        let r = tape.constant(Tensor::from_rows3(refined.points()));
        let (g_o, _) = net.forward(tape, bind, &raw, r)?;
        let shape = tape.value(g_o).shape().to_vec();
        let wt = tape.constant(Tensor::new(&shape, w.clone())?);
        let prod = tape.mul(g_o, wt)?;
        Ok(tape.mean_reduce(prod))
    })
}

fn check_pose_heads(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = PoseHeadConfig {
        feature_dim: 6,
        hidden: [6, 6, 6],
    };
    let heads = PoseHeads::init(&mut store, &mut rng, "heads", cfg);
    let model: Vec<[f64; 3]> = sample_canonical(ShapeKind::Cube, 5, seed ^ 5)
        .points()
        .to_vec();
    let mut q = [
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    ];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.iter_mut().for_each(|v| *v /= n);
    let gt = Pose::new(q, [0.02, -0.01, 0.03])?;
    // The pose loss takes a min over transformed model points; a near-tie in
    // that min makes the finite difference straddle the switch. Resample the
    // features until every min has a comfortable margin.
    let features = loop {
        let features = Tensor::new(
            &[3, 6],
            (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        let cands = heads.regress(&store, &features)?;
        let gt_pts = gt.transform_points(&model);
        let mut margin = f64::INFINITY;
        for i in 0..cands.len() {
            let pred_pts = cands.candidate(i)?.transform_points(&model);
            for g in &gt_pts {
                let mut dists: Vec<f64> = pred_pts
                    .iter()
                    .map(|p| crate::pointcloud::dist_sq(g, p))
                    .collect();
                dists.sort_by(f64::total_cmp);
                margin = margin.min(dists[1] - dists[0]);
            }
        }
        if margin > 1e-3 {
            break features;
        }
    };
    check_store_grad(&mut store, |tape, bind| {
        let f = tape.constant(features.clone());
        let out = heads.forward(tape, bind, f)?;
        loss_pose_graph(tape, &out, &gt, &model)
    })
}

/// One row per primitive, worst error across `n_seeds` seeds.
pub fn check_primitives(n_seeds: u64) -> Result<Vec<CheckRow>> {
    let mut rows: Option<Vec<CheckRow>> = None;
    for seed in 0..n_seeds {
        let new = primitive_checks(seed, 1.0)?;
        rows = Some(match rows {
            None => new,
            Some(mut acc) => {
                for (a, b) in acc.iter_mut().zip(new) {
                    a.max_rel_err = a.max_rel_err.max(b.max_rel_err);
                }
                acc
            }
        });
    }
    Ok(rows.unwrap_or_default())
}

/// One row per network, worst error across `n_seeds` seeds.
pub fn check_networks(n_seeds: u64) -> Result<Vec<CheckRow>> {
    let nets: [(&str, fn(u64) -> Result<f64>); 4] = [
        ("prn encoder+decoder", check_prn),
        ("discriminator", check_discriminator),
        ("mmf-gcn", check_mmf),
        ("pose heads", check_pose_heads),
    ];
    let mut rows = Vec::with_capacity(nets.len());
    for (name, f) in nets {
        let mut worst = 0.0f64;
        for seed in 0..n_seeds {
            worst = worst.max(f(seed)?);
        }
        rows.push(CheckRow {
            name: name.to_string(),
            max_rel_err: worst,
        });
    }
    Ok(rows)
}

/// Full suite: primitives followed by networks.
pub fn check_all(n_seeds: u64) -> Result<Vec<CheckRow>> {
    let mut rows = check_primitives(n_seeds)?;
    rows.extend(check_networks(n_seeds)?);
    Ok(rows)
}

/// Sensitivity hook: rerun the primitive suite with the `square` backward
/// result deliberately scaled, so its row must FAIL while others still pass.
pub fn check_primitives_corrupted(seed: u64) -> Result<Vec<CheckRow>> {
    primitive_checks(seed, 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_two_seeds() {
        for row in check_primitives(2).unwrap() {
            assert!(row.pass(), "{} rel err {}", row.name, row.max_rel_err);
        }
    }

    #[test]
    fn networks_pass_two_seeds() {
        for row in check_networks(2).unwrap() {
            assert!(row.pass(), "{} rel err {}", row.name, row.max_rel_err);
        }
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let rows = check_primitives_corrupted(0).unwrap();
        let square = rows.iter().find(|r| r.name == "square").unwrap();
        assert!(!square.pass());
        let relu = rows.iter().find(|r| r.name == "relu").unwrap();
        assert!(relu.pass());
    }
}

//! Multi-modal fusion over a k-NN graph: per-point texture and geometry
//! features run through an EdgeConv stack, a second EdgeConv stack encodes
//! the refined cloud, and stacked FC layers mix the concatenated results
//! into per-point fusion features.

use rand::Rng;

use crate::autodiff::{Bindings, ParamStore, Tape, Tensor, Value};
use crate::error::{Error, Result};
use crate::nn::{self, Linear, MlpStack};
use crate::pointcloud::{self, PointCloud};

/// Static neighbor lists built once per forward pass from 3D coordinates.
#[derive(Debug, Clone)]
pub struct KnnGraph {
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
}

impl KnnGraph {
    pub fn build(cloud: &PointCloud, k: usize) -> Result<KnnGraph> {
        Ok(KnnGraph {
            k,
            neighbors: pointcloud::knn(cloud, k)?,
        })
    }

    pub fn from_rows(rows: &[[f64; 3]], k: usize) -> Result<KnnGraph> {
        KnnGraph::build(&PointCloud::from_points(rows.to_vec())?, k)
    }

    pub fn n_vertices(&self) -> usize {
        self.neighbors.len()
    }
}

/// One graph convolution: out_i = max_{j in N(i)} h_theta(f_i - f_j, f_i),
/// with h_theta a single linear map of width 2*d_in -> d_out and the max
/// taken elementwise over the k edge outputs.
#[derive(Debug, Clone)]
pub struct EdgeConvLayer {
    pub linear: Linear,
}

impl EdgeConvLayer {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> EdgeConvLayer {
        EdgeConvLayer {
            linear: Linear::init(store, rng, name, 2 * d_in, d_out),
        }
    }
}

pub fn edgeconv(
    tape: &mut Tape,
    bind: &Bindings,
    layer: &EdgeConvLayer,
    features: Value,
    graph: &KnnGraph,
) -> Result<Value> {
    let shape = tape.value(features).shape().to_vec();
    if shape.len() != 2 || shape[0] != graph.n_vertices() {
        return Err(Error::InvalidShape {
            op: "edgeconv",
            shape,
            detail: format!("expected {} x d_in feature rows", graph.n_vertices()),
        });
    }
    if 2 * shape[1] != layer.linear.in_dim {
        return Err(Error::InvalidShape {
            op: "edgeconv",
            shape,
            detail: format!("layer expects d_in = {}", layer.linear.in_dim / 2),
        });
    }
    let (n, k) = (graph.n_vertices(), graph.k);
    let mut center_idx = Vec::with_capacity(n * k);
    let mut nbr_idx = Vec::with_capacity(n * k);
    for (i, nbrs) in graph.neighbors.iter().enumerate() {
        if nbrs.len() != k {
            return Err(Error::InvalidInput(format!(
                "vertex {i} has {} neighbors, graph k = {k}",
                nbrs.len()
            )));
        }
        for &j in nbrs {
            if j >= n || j == i {
                return Err(Error::InvalidInput(format!(
                    "bad neighbor {j} for vertex {i}"
                )));
            }
            center_idx.push(i);
            nbr_idx.push(j);
        }
    }
    let f_i = tape.gather_rows(features, &center_idx)?;
    let f_j = tape.gather_rows(features, &nbr_idx)?;
    let diff = tape.sub(f_i, f_j)?;
    let edge_in = tape.concat(1, &[diff, f_i])?;
    let edge_out = layer.linear.forward(tape, bind, edge_in)?;
    let grouped = tape.reshape(edge_out, &[n, k, layer.linear.out_dim])?;
    tape.max_reduce_axis(grouped, 1)
}

#[derive(Debug, Clone)]
pub struct MmfConfig {
    pub k: usize,
    pub d_rgb: usize,
    pub gcn_f_widths: Vec<usize>,
    pub gcn_ref_widths: Vec<usize>,
    pub t_widths: Vec<usize>,
    /// Points the refined cloud is FPS-sampled to before GCN_ref.
    pub ref_points: usize,
}

impl Default for MmfConfig {
    fn default() -> Self {
        MmfConfig {
            k: 30,
            d_rgb: 32,
            gcn_f_widths: vec![64, 128, 256],
            gcn_ref_widths: vec![64, 128, 256],
            t_widths: vec![512, 512, 256],
            ref_points: 100,
        }
    }
}

impl MmfConfig {
    /// Small widths for quick experiments and gradient checks.
    pub fn tiny(k: usize, ref_points: usize) -> MmfConfig {
        MmfConfig {
            k,
            d_rgb: 4,
            gcn_f_widths: vec![8, 8],
            gcn_ref_widths: vec![8, 8],
            t_widths: vec![16, 16],
            ref_points,
        }
    }

    pub fn d_f(&self) -> usize {
        *self.gcn_f_widths.last().unwrap()
    }

    pub fn d_ref(&self) -> usize {
        *self.gcn_ref_widths.last().unwrap()
    }

    pub fn d_out(&self) -> usize {
        *self.t_widths.last().unwrap()
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0
            || self.ref_points <= self.k
            || self.gcn_f_widths.is_empty()
            || self.gcn_ref_widths.is_empty()
            || self.t_widths.is_empty()
            || self.d_rgb == 0
        {
            return Err(Error::InvalidInput(
                "fusion config needs k >= 1, ref_points > k, nonempty widths".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FusionNet {
    tex_mlp: MlpStack,
    gcn_f: Vec<EdgeConvLayer>,
    gcn_ref: Vec<EdgeConvLayer>,
    t_fc: MlpStack,
    pub config: MmfConfig,
}

impl FusionNet {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        config: MmfConfig,
    ) -> Result<FusionNet> {
        config.validate()?;
        let tex_mlp = MlpStack::init(
            store,
            rng,
            &format!("{name}.tex"),
            3,
            &[config.d_rgb, config.d_rgb],
            true,
        );
        fn make_stack(
            store: &mut ParamStore,
            rng: &mut impl Rng,
            prefix: &str,
            d_in: usize,
            widths: &[usize],
        ) -> Vec<EdgeConvLayer> {
            let mut layers = Vec::with_capacity(widths.len());
            let mut d = d_in;
            for (i, &w) in widths.iter().enumerate() {
                layers.push(EdgeConvLayer::init(store, rng, &format!("{prefix}.{i}"), d, w));
                d = w;
            }
            layers
        }
        let gcn_f = make_stack(
            store,
            rng,
            &format!("{name}.gcn_f"),
            config.d_rgb + 3,
            &config.gcn_f_widths,
        );
        let gcn_ref = make_stack(store, rng, &format!("{name}.gcn_ref"), 3, &config.gcn_ref_widths);
        let t_fc = MlpStack::init(
            store,
            rng,
            &format!("{name}.t"),
            config.d_f() + config.d_ref(),
            &config.t_widths,
            false,
        );
        Ok(FusionNet {
            tex_mlp,
            gcn_f,
            gcn_ref,
            t_fc,
            config,
        })
    }

    /// Per-point texture code: the RGB triple through a small MLP.
    pub fn texture_features(&self, tape: &mut Tape, bind: &Bindings, cloud: &PointCloud) -> Result<Value> {
        let colors = cloud
            .colors()
            .ok_or_else(|| Error::InvalidInput("texture features need point colors".into()))?;
        let rgb = tape.constant(Tensor::from_rows3(colors));
        self.tex_mlp.forward(tape, bind, rgb)
    }

    fn run_stack(
        tape: &mut Tape,
        bind: &Bindings,
        stack: &[EdgeConvLayer],
        mut h: Value,
        graph: &KnnGraph,
    ) -> Result<Value> {
        for layer in stack {
            h = edgeconv(tape, bind, layer, h, graph)?;
            h = tape.relu(h);
        }
        Ok(h)
    }

    /// Texture + geometry branch: concat per-point [f_rgb, f_d] (geometry =
    /// normalized coordinates) and run GCN_f on the cloud's k-NN graph.
    pub fn gcn_f_forward(&self, tape: &mut Tape, bind: &Bindings, cloud: &PointCloud) -> Result<Value> {
        if cloud.len() <= self.config.k {
            return Err(Error::InvalidInput(format!(
                "need more than k = {} points, got {}",
                self.config.k,
                cloud.len()
            )));
        }
        let (normalized, _, _) = pointcloud::normalize(cloud);
        let tex = self.texture_features(tape, bind, cloud)?;
        let geo = tape.constant(Tensor::from_rows3(normalized.points()));
        let f = tape.concat(1, &[tex, geo])?;
        let graph = KnnGraph::from_rows(normalized.points(), self.config.k)?;
        Self::run_stack(tape, bind, &self.gcn_f, f, &graph)
    }

    /// Refined-cloud branch: FPS the refined points down to `ref_points`,
    /// normalize in-graph, and run GCN_ref. `refined` may carry gradients;
    /// the FPS indices and graph are fixed at the current values. Also
    /// returns the sampled world-frame points.
    pub fn gcn_ref_forward(&self, tape: &mut Tape, bind: &Bindings, refined: Value) -> Result<(Value, Value)> {
        let rows = rows_of(tape, refined, "gcn_ref_forward")?;
        if rows.len() < self.config.ref_points {
            return Err(Error::InvalidInput(format!(
                "refined cloud has {} points, need at least {}",
                rows.len(),
                self.config.ref_points
            )));
        }
        let cloud = PointCloud::from_points(rows)?;
        let idx = pointcloud::fps(&cloud, self.config.ref_points, 0)?;
        let sampled = tape.gather_rows(refined, &idx)?;
        let (normalized, _, _) = nn::graph_normalize(tape, sampled)?;
        let norm_rows = rows_of(tape, normalized, "gcn_ref_forward")?;
        let graph = KnnGraph::from_rows(&norm_rows, self.config.k)?;
        let g = Self::run_stack(tape, bind, &self.gcn_ref, normalized, &graph)?;
        Ok((g, sampled))
    }

    /// Row-wise concat of the two branch outputs mixed by the FC stack T.
    pub fn fuse(&self, tape: &mut Tape, bind: &Bindings, g_f: Value, g_ref: Value) -> Result<Value> {
        let (a, b) = (
            tape.value(g_f).shape().to_vec(),
            tape.value(g_ref).shape().to_vec(),
        );
        if a.len() != 2 || b.len() != 2 || a[0] != b[0] {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                lhs: a,
                rhs: b,
            });
        }
        let cat = tape.concat(1, &[g_f, g_ref])?;
        self.t_fc.forward(tape, bind, cat)
    }

    /// Full fusion pass. The raw cloud must carry colors and have exactly
    /// `ref_points` points so the two branches align row-wise. Returns the
    /// per-point fusion features and the sampled refined points.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        raw: &PointCloud,
        refined: Value,
    ) -> Result<(Value, Value)> {
        if raw.len() != self.config.ref_points {
            return Err(Error::InvalidInput(format!(
                "fusion expects {} raw points, got {}",
                self.config.ref_points,
                raw.len()
            )));
        }
        let g_f = self.gcn_f_forward(tape, bind, raw)?;
        let (g_ref, sampled) = self.gcn_ref_forward(tape, bind, refined)?;
        let g_o = self.fuse(tape, bind, g_f, g_ref)?;
        Ok((g_o, sampled))
    }
}

fn rows_of(tape: &Tape, v: Value, op: &'static str) -> Result<Vec<[f64; 3]>> {
    let t = tape.value(v);
    let shape = t.shape();
    if shape.len() != 2 || shape[1] != 3 || shape[0] == 0 {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            detail: "expected nonempty N x 3".into(),
        });
    }
    Ok(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::synth::{sample_canonical, ShapeKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn edgeconv_two_point_hand_example() {
        // scalar features (0, 1), k = 1, h(a, b) = a + b
        let mut store = ParamStore::new();
        store.insert("h.w", Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
        store.insert("h.b", Tensor::new(&[1], vec![0.0]).unwrap());
        let layer = EdgeConvLayer {
            linear: Linear {
                weight: "h.w".into(),
                bias: "h.b".into(),
                in_dim: 2,
                out_dim: 1,
            },
        };
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let f = tape.constant(Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap());
        let graph = KnnGraph {
            k: 1,
            neighbors: vec![vec![1], vec![0]],
        };
        let out = edgeconv(&mut tape, &bind, &layer, f, &graph).unwrap();
        assert_eq!(tape.value(out).data(), &[-1.0, 2.0]);
    }

    fn random_layer(seed: u64, d_in: usize, d_out: usize) -> (EdgeConvLayer, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = EdgeConvLayer::init(&mut store, &mut rng, "e", d_in, d_out);
        (layer, store)
    }

    #[test]
    fn edgeconv_identical_features_drop_difference() {
        let (layer, store) = random_layer(1, 3, 5);
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let f = tape.constant(Tensor::new(&[4, 3], vec![0.3, -0.2, 0.9].repeat(4)).unwrap());
        let graph = KnnGraph {
            k: 2,
            neighbors: vec![vec![1, 2], vec![0, 3], vec![3, 0], vec![2, 1]],
        };
        let out = edgeconv(&mut tape, &bind, &layer, f, &graph).unwrap();
        let d = tape.value(out).data();
        for row in 1..4 {
            assert_eq!(&d[row * 5..(row + 1) * 5], &d[..5]);
        }
    }

    #[test]
    fn edgeconv_neighbor_order_invariant() {
        let (layer, store) = random_layer(2, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |neighbors: Vec<Vec<usize>>| {
            let mut tape = Tape::new();
            let bind = store.bind_frozen(&mut tape);
            let f = tape.constant(Tensor::new(&[6, 2], feats.clone()).unwrap());
            let graph = KnnGraph { k: 3, neighbors };
            let out = edgeconv(&mut tape, &bind, &layer, f, &graph).unwrap();
            tape.value(out).data().to_vec()
        };
        let base: Vec<Vec<usize>> = (0..6)
            .map(|i| (0..6).filter(|&j| j != i).take(3).collect())
            .collect();
        let shuffled: Vec<Vec<usize>> = base
            .iter()
            .map(|nbrs| {
                let mut v = nbrs.clone();
                v.reverse();
                v
            })
            .collect();
        assert_eq!(run(base), run(shuffled));
    }

    #[test]
    fn edgeconv_rejects_self_loop() {
        let (layer, store) = random_layer(0, 1, 1);
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let f = tape.constant(Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap());
        let graph = KnnGraph {
            k: 1,
            neighbors: vec![vec![0], vec![0]],
        };
        assert!(edgeconv(&mut tape, &bind, &layer, f, &graph).is_err());
    }

    #[test]
    fn knn_graph_matches_exhaustive_search() {
        let cloud = sample_canonical(ShapeKind::Torus, 40, 5);
        let graph = KnnGraph::build(&cloud, 6).unwrap();
        let pts = cloud.points();
        for (i, nbrs) in graph.neighbors.iter().enumerate() {
            assert_eq!(nbrs.len(), 6);
            let worst = nbrs
                .iter()
                .map(|&j| pointcloud::dist_sq(&pts[i], &pts[j]))
                .fold(0.0f64, f64::max);
            let closer = (0..40)
                .filter(|&j| j != i && pointcloud::dist_sq(&pts[i], &pts[j]) < worst)
                .count();
            assert!(closer < 6);
            assert!(!nbrs.contains(&i));
        }
    }

    fn tiny_net(seed: u64, k: usize, ref_points: usize) -> (FusionNet, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = FusionNet::init(&mut store, &mut rng, "mmf", MmfConfig::tiny(k, ref_points)).unwrap();
        (net, store)
    }

    #[test]
    fn branch_and_fuse_shapes() {
        let (net, store) = tiny_net(7, 4, 20);
        let raw = sample_canonical(ShapeKind::Sphere, 20, 1);
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let refined = tape.constant(Tensor::from_rows3(
            sample_canonical(ShapeKind::Sphere, 32, 2).points(),
        ));
        let g_f = net.gcn_f_forward(&mut tape, &bind, &raw).unwrap();
        assert_eq!(tape.value(g_f).shape(), &[20, 8]);
        let (g_ref, sampled) = net.gcn_ref_forward(&mut tape, &bind, refined).unwrap();
        assert_eq!(tape.value(g_ref).shape(), &[20, 8]);
        assert_eq!(tape.value(sampled).shape(), &[20, 3]);
        let g_o = net.fuse(&mut tape, &bind, g_f, g_ref).unwrap();
        assert_eq!(tape.value(g_o).shape(), &[20, 16]);
    }

    #[test]
    fn fuse_row_mismatch_errors() {
        let (net, store) = tiny_net(7, 4, 20);
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let a = tape.constant(Tensor::zeros(&[20, 8]));
        let b = tape.constant(Tensor::zeros(&[19, 8]));
        assert!(net.fuse(&mut tape, &bind, a, b).is_err());
    }

    #[test]
    fn identity_t_reproduces_concat() {
        let (mut net, mut store) = tiny_net(9, 4, 20);
        let d = net.config.d_f() + net.config.d_ref();
        net.t_fc = MlpStack {
            layers: vec![Linear {
                weight: "id.w".into(),
                bias: "id.b".into(),
                in_dim: d,
                out_dim: d,
            }],
            relu_last: false,
        };
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        store.insert("id.w", Tensor::new(&[d, d], eye).unwrap());
        store.insert("id.b", Tensor::new(&[d], vec![0.0; d]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..20 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let g_f = tape.constant(Tensor::new(&[20, 8], vals[..160].to_vec()).unwrap());
        let g_ref = tape.constant(Tensor::new(&[20, 8], vals[160..].to_vec()).unwrap());
        let g_o = net.fuse(&mut tape, &bind, g_f, g_ref).unwrap();
        let out = tape.value(g_o).data();
        for r in 0..20 {
            assert_eq!(&out[r * 16..r * 16 + 8], &vals[r * 8..r * 8 + 8]);
            assert_eq!(&out[r * 16 + 8..r * 16 + 16], &vals[160 + r * 8..160 + r * 8 + 8]);
        }
    }

    #[test]
    fn gcn_f_translation_invariant() {
        let (net, store) = tiny_net(13, 5, 24);
        let raw = sample_canonical(ShapeKind::Cube, 24, 3);
        let shifted = PointCloud::new(
            raw.points().iter().map(|p| [p[0] + 0.4, p[1] - 1.2, p[2] + 3.0]).collect(),
            raw.colors().map(|c| c.to_vec()),
        )
        .unwrap();
        let run = |c: &PointCloud| {
            let mut tape = Tape::new();
            let bind = store.bind_frozen(&mut tape);
            let g = net.gcn_f_forward(&mut tape, &bind, c).unwrap();
            tape.value(g).data().to_vec()
        };
        let (a, b) = (run(&raw), run(&shifted));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn gcn_f_permutation_equivariant() {
        let (net, store) = tiny_net(17, 5, 24);
        let raw = sample_canonical(ShapeKind::Torus, 24, 4);
        let mut perm: Vec<usize> = (0..24).rev().collect();
        perm.swap(3, 17);
        let permuted = raw.subset(&perm).unwrap();
        let run = |c: &PointCloud| {
            let mut tape = Tape::new();
            let bind = store.bind_frozen(&mut tape);
            let g = net.gcn_f_forward(&mut tape, &bind, c).unwrap();
            tape.value(g).data().to_vec()
        };
        let (a, b) = (run(&raw), run(&permuted));
        let d = net.config.d_f();
        for (out_row, &src_row) in perm.iter().enumerate() {
            for c in 0..d {
                let diff = (b[out_row * d + c] - a[src_row * d + c]).abs();
                assert!(diff < 1e-6, "row {out_row} col {c} differs by {diff}");
            }
        }
    }

    #[test]
    fn gcn_f_too_few_points_errors() {
        let (net, store) = tiny_net(0, 10, 20);
        let raw = sample_canonical(ShapeKind::Sphere, 10, 1);
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        assert!(net.gcn_f_forward(&mut tape, &bind, &raw).is_err());
    }

    #[test]
    fn gcn_ref_deterministic() {
        let (net, store) = tiny_net(19, 4, 20);
        let refined = sample_canonical(ShapeKind::Sphere, 40, 6);
        let run = || {
            let mut tape = Tape::new();
            let bind = store.bind_frozen(&mut tape);
            let r = tape.constant(Tensor::from_rows3(refined.points()));
            let (g, _) = net.gcn_ref_forward(&mut tape, &bind, r).unwrap();
            tape.value(g)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn texture_features_need_colors() {
        let (net, store) = tiny_net(0, 4, 20);
        let cloud = PointCloud::from_points(vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        assert!(net.texture_features(&mut tape, &bind, &cloud).is_err());
    }

    #[test]
    fn texture_features_identical_colors_identical_rows() {
        let (net, store) = tiny_net(0, 4, 20);
        let cloud = PointCloud::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]],
            Some(vec![[0.2, 0.4, 0.6]; 3]),
        )
        .unwrap();
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let t = net.texture_features(&mut tape, &bind, &cloud).unwrap();
        let d = tape.value(t).data();
        let w = net.config.d_rgb;
        assert_eq!(&d[..w], &d[w..2 * w]);
        assert_eq!(&d[..w], &d[2 * w..3 * w]);
    }
}

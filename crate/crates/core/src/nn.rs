//! Small building blocks shared by the networks: linear layers, MLP stacks,
//! and an in-graph point-cloud normalization.

use rand::Rng;

use crate::autodiff::{Bindings, ParamStore, Tape, Tensor, Value};
use crate::error::Result;

/// Fully-connected layer; weights live in a [`ParamStore`] under
/// `<name>.w` / `<name>.b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Linear {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let b: Vec<f64> = (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        let weight = format!("{name}.w");
        let bias = format!("{name}.b");
        store.insert(&weight, Tensor::new(&[in_dim, out_dim], w).unwrap());
        store.insert(&bias, Tensor::new(&[out_dim], b).unwrap());
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// x (n x in_dim) -> x W + b.
    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, x: Value) -> Result<Value> {
        let w = bind.get(&self.weight)?;
        let b = bind.get(&self.bias)?;
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Stack of linear layers with ReLU between them; `relu_last` controls
/// whether the final layer is also activated.
#[derive(Debug, Clone)]
pub struct MlpStack {
    pub layers: Vec<Linear>,
    pub relu_last: bool,
}

impl MlpStack {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        widths: &[usize],
        relu_last: bool,
    ) -> MlpStack {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::init(store, rng, &format!("{name}.{i}"), d, w));
            d = w;
        }
        MlpStack { layers, relu_last }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, x: Value) -> Result<Value> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bind, h)?;
            if i != last || self.relu_last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }
}

/// Center a point set at its centroid and divide by its max radius, in-graph
/// so gradients flow through the normalization. Returns (normalized points,
/// centroid, scale). A degenerate all-coincident cloud gets scale 1.
pub fn graph_normalize(tape: &mut Tape, points: Value) -> Result<(Value, Value, Value)> {
    let shape = tape.value(points).shape().to_vec();
    debug_assert_eq!(shape.len(), 2);
    let n = shape[0];
    let ones = tape.constant(Tensor::new(&[1, n], vec![1.0 / n as f64; n]).unwrap());
    let centroid = tape.matmul(ones, points)?; // 1 x 3
    let centered = tape.sub(points, centroid)?;
    let sq = tape.square(centered);
    let norms = tape.sum_reduce_axis(sq, 1)?; // n
    let max_sq = tape.max_reduce_axis(norms, 0)?; // scalar
    let scale = if tape.value(max_sq).item() < 1e-24 {
        tape.constant(Tensor::scalar(1.0))
    } else {
        tape.sqrt(max_sq)?
    };
    let inv = tape.recip(scale)?;
    let normalized = tape.mul(centered, inv)?;
    Ok((normalized, centroid, scale))
}

/// Inverse of [`graph_normalize`]: points * scale + centroid.
pub fn graph_denormalize(
    tape: &mut Tape,
    points: Value,
    centroid: Value,
    scale: Value,
) -> Result<Value> {
    let scaled = tape.mul(points, scale)?;
    tape.add(scaled, centroid)
}

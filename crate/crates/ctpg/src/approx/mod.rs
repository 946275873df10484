//! Function approximation with exact gradients.
//!
//! Two parameter shapes are supported: lookup tables (for suites with an
//! enumerable state space) and small feedforward ReLU networks. Reverse-mode
//! gradients are implemented for this fixed topology only, which keeps the
//! whole gradient path checkable against finite differences.

mod adam;
mod checkpoint;
mod multihead;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointData};
pub use multihead::{
    polyak, HeadShape, MultiHead, MultiHeadCache, MultiHeadGrads, MultiHeadOpt, MultiHeadSpec, Obs,
};

use crate::error::{Error, Result};

/// Layer sizes of a feedforward ReLU network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
}

impl NetSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        assert!(input_dim > 0 && output_dim > 0);
        Self {
            input_dim,
            output_dim,
            hidden,
        }
    }

    /// Layer dimensions including input and output.
    fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden.len() + 2);
        d.push(self.input_dim);
        d.extend_from_slice(&self.hidden);
        d.push(self.output_dim);
        d
    }

    pub fn param_count(&self) -> usize {
        let dims = self.dims();
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Shape descriptor of a parameter block.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Plain lookup table indexed by row, producing `cols` outputs.
    Table { rows: usize, cols: usize },
    /// Feedforward network with ReLU hidden layers and a linear output.
    Net(NetSpec),
}

impl Shape {
    pub fn param_count(&self) -> usize {
        match self {
            Shape::Table { rows, cols } => rows * cols,
            Shape::Net(spec) => spec.param_count(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Shape::Table { cols, .. } => *cols,
            Shape::Net(spec) => spec.output_dim,
        }
    }
}

/// Flat parameter vector plus its shape descriptor.
#[derive(Debug, Clone)]
pub struct ParamBlock {
    shape: Shape,
    values: Vec<f64>,
}

/// Saved activations from a cached forward pass, consumed by `backward`.
pub struct Cache {
    /// `acts[0]` is the input; `acts[l]` the post-activation output of layer l.
    acts: Vec<Vec<f64>>,
    /// Table row queried, for table-shaped blocks.
    row: Option<usize>,
}

impl ParamBlock {
    pub fn zeros(shape: Shape) -> Self {
        let n = shape.param_count();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    /// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer; biases zero.
    /// Tables start at zero so initial soft policies are uniform.
    pub fn init(shape: Shape, rng: &mut impl rand::Rng) -> Self {
        let mut block = Self::zeros(shape);
        if let Shape::Net(spec) = block.shape.clone() {
            let dims = spec.dims();
            let mut off = 0;
            for w in dims.windows(2) {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in &mut block.values[off..off + fan_in * fan_out] {
                    *v = rng.gen_range(-bound..bound);
                }
                off += fan_in * fan_out + fan_out; // skip biases, already zero
            }
        }
        block
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn from_values(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if shape.param_count() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: shape.param_count(),
                got: values.len(),
                context: "ParamBlock::from_values",
            });
        }
        Ok(Self { shape, values })
    }

    /// Table fast path: the `row`-th output vector without materializing a one-hot.
    pub fn row(&self, row: usize) -> &[f64] {
        match &self.shape {
            Shape::Table { rows, cols } => {
                assert!(row < *rows, "table row {row} out of range ({rows} rows)");
                &self.values[row * cols..(row + 1) * cols]
            }
            Shape::Net(_) => panic!("row lookup on a network-shaped block"),
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input)?.0)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<(Vec<f64>, Cache)> {
        match &self.shape {
            Shape::Table { rows, cols } => {
                if input.len() != *rows {
                    return Err(Error::DimensionMismatch {
                        expected: *rows,
                        got: input.len(),
                        context: "table forward input",
                    });
                }
                let mut out = vec![0.0; *cols];
                for (r, &x) in input.iter().enumerate() {
                    if x != 0.0 {
                        let row = &self.values[r * cols..(r + 1) * cols];
                        for (o, &w) in out.iter_mut().zip(row) {
                            *o += x * w;
                        }
                    }
                }
                Ok((
                    out,
                    Cache {
                        acts: vec![input.to_vec()],
                        row: None,
                    },
                ))
            }
            Shape::Net(spec) => {
                if input.len() != spec.input_dim {
                    return Err(Error::DimensionMismatch {
                        expected: spec.input_dim,
                        got: input.len(),
                        context: "net forward input",
                    });
                }
                let dims = spec.dims();
                let n_layers = dims.len() - 1;
                let mut acts = Vec::with_capacity(n_layers + 1);
                acts.push(input.to_vec());
                let mut off = 0;
                for (l, w) in dims.windows(2).enumerate() {
                    let (fan_in, fan_out) = (w[0], w[1]);
                    let weights = &self.values[off..off + fan_in * fan_out];
                    let biases = &self.values[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
                    let prev = &acts[l];
                    let mut z = biases.to_vec();
                    for (i, &x) in prev.iter().enumerate() {
                        if x != 0.0 {
                            let wrow = &weights[i * fan_out..(i + 1) * fan_out];
                            for (zj, &wij) in z.iter_mut().zip(wrow) {
                                *zj += x * wij;
                            }
                        }
                    }
                    if l + 1 < n_layers {
                        for zj in &mut z {
                            if *zj < 0.0 {
                                *zj = 0.0;
                            }
                        }
                    }
                    acts.push(z);
                    off += fan_in * fan_out + fan_out;
                }
                let out = acts.last().unwrap().clone();
                Ok((out, Cache { acts, row: None }))
            }
        }
    }

    /// Table fast path with cache, for a one-hot input at `row`.
    pub fn lookup_cached(&self, row: usize) -> (Vec<f64>, Cache) {
        let out = self.row(row).to_vec();
        (
            out,
            Cache {
                acts: Vec::new(),
                row: Some(row),
            },
        )
    }

    /// Accumulates the gradient of `<upstream, forward(input)>` into `grad`
    /// and returns the gradient with respect to the input.
    pub fn backward(&self, cache: &Cache, upstream: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        assert_eq!(grad.len(), self.values.len());
        match &self.shape {
            Shape::Table { rows, cols } => {
                if upstream.len() != *cols {
                    return Err(Error::DimensionMismatch {
                        expected: *cols,
                        got: upstream.len(),
                        context: "table backward upstream",
                    });
                }
                if let Some(row) = cache.row {
                    for (g, &u) in grad[row * cols..(row + 1) * cols].iter_mut().zip(upstream) {
                        *g += u;
                    }
                    return Ok(Vec::new());
                }
                let input = &cache.acts[0];
                let mut input_grad = vec![0.0; *rows];
                for (r, &x) in input.iter().enumerate() {
                    let wrow = &self.values[r * cols..(r + 1) * cols];
                    let grow = &mut grad[r * cols..(r + 1) * cols];
                    let mut ig = 0.0;
                    for ((g, &w), &u) in grow.iter_mut().zip(wrow).zip(upstream) {
                        *g += u * x;
                        ig += u * w;
                    }
                    input_grad[r] = ig;
                }
                Ok(input_grad)
            }
            Shape::Net(spec) => {
                if upstream.len() != spec.output_dim {
                    return Err(Error::DimensionMismatch {
                        expected: spec.output_dim,
                        got: upstream.len(),
                        context: "net backward upstream",
                    });
                }
                let dims = spec.dims();
                let n_layers = dims.len() - 1;
                // Offsets of each layer's weight block.
                let mut offsets = Vec::with_capacity(n_layers);
                let mut off = 0;
                for w in dims.windows(2) {
                    offsets.push(off);
                    off += w[0] * w[1] + w[1];
                }
                let mut delta = upstream.to_vec();
                for l in (0..n_layers).rev() {
                    let (fan_in, fan_out) = (dims[l], dims[l + 1]);
                    let off = offsets[l];
                    let prev = &cache.acts[l];
                    // ReLU mask on this layer's output (hidden layers only).
                    if l + 1 < n_layers {
                        let act = &cache.acts[l + 1];
                        for (d, &a) in delta.iter_mut().zip(act) {
                            if a <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    // Bias grads.
                    let bias_off = off + fan_in * fan_out;
                    for (g, &d) in grad[bias_off..bias_off + fan_out].iter_mut().zip(&delta) {
                        *g += d;
                    }
                    // Weight grads and input delta.
                    let mut prev_delta = vec![0.0; fan_in];
                    for (i, &x) in prev.iter().enumerate() {
                        let wrow = &self.values[off + i * fan_out..off + (i + 1) * fan_out];
                        let grow = &mut grad[off + i * fan_out..off + (i + 1) * fan_out];
                        let mut pd = 0.0;
                        for ((g, &w), &d) in grow.iter_mut().zip(wrow).zip(&delta) {
                            *g += d * x;
                            pd += d * w;
                        }
                        prev_delta[i] = pd;
                    }
                    delta = prev_delta;
                }
                Ok(delta)
            }
        }
    }

    /// One-shot gradient of `<upstream, forward(input)>`: (param grads, input grad).
    pub fn gradient(&self, input: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (_, cache) = self.forward_cached(input)?;
        let mut grad = vec![0.0; self.values.len()];
        let input_grad = self.backward(&cache, upstream, &mut grad)?;
        Ok((grad, input_grad))
    }

    pub fn assert_finite(&self, context: &'static str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weight_net_outputs_zero() {
        let spec = NetSpec::new(3, vec![4], 2);
        let block = ParamBlock::zeros(Shape::Net(spec));
        let out = block.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        // Single linear layer (no hidden), weights = identity, bias = 0.
        let spec = NetSpec::new(3, vec![], 3);
        let mut block = ParamBlock::zeros(Shape::Net(spec));
        for i in 0..3 {
            block.values_mut()[i * 3 + i] = 1.0;
        }
        let x = [0.5, -1.5, 2.0];
        assert_eq!(block.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = ParamBlock::init(Shape::Net(NetSpec::new(4, vec![8, 8], 3)), &mut rng);
        let x = [0.1, -0.2, 0.3, 0.7];
        assert_eq!(block.forward(&x).unwrap(), block.forward(&x).unwrap());
    }

    #[test]
    fn linear_layer_gradient_matches_analytic() {
        // y = Wx + b: dL/dW = u x^T, dL/db = u.
        let spec = NetSpec::new(2, vec![], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let block = ParamBlock::init(Shape::Net(spec), &mut rng);
        let x = [1.5, -0.5];
        let u = [2.0, -3.0];
        let (grad, _) = block.gradient(&x, &u).unwrap();
        // Layout: w00 w01 w10 w11 b0 b1 (row = input index).
        let expected = [
            x[0] * u[0],
            x[0] * u[1],
            x[1] * u[0],
            x[1] * u[1],
            u[0],
            u[1],
        ];
        for (g, e) in grad.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = ParamBlock::init(Shape::Net(NetSpec::new(3, vec![5], 2)), &mut rng);
        let (grad, input_grad) = block.gradient(&[0.3, 0.4, 0.5], &[0.0, 0.0]).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
        assert!(input_grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn table_lookup_gradient_is_one_hot_row() {
        let block = ParamBlock::zeros(Shape::Table { rows: 4, cols: 3 });
        let (_, cache) = block.lookup_cached(2);
        let mut grad = vec![0.0; block.len()];
        block.backward(&cache, &[1.0, 2.0, 3.0], &mut grad).unwrap();
        let mut expected = vec![0.0; 12];
        expected[6] = 1.0;
        expected[7] = 2.0;
        expected[8] = 3.0;
        assert_eq!(grad, expected);
    }

    /// Central finite differences on <u, f(x)> for random nets.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let input_dim = 2 + trial % 3;
            let output_dim = 1 + trial % 2;
            let hidden = if trial % 2 == 0 { vec![6] } else { vec![5, 4] };
            let spec = NetSpec::new(input_dim, hidden, output_dim);
            let mut block = ParamBlock::init(Shape::Net(spec), &mut rng);
            // Perturb biases too so nothing sits exactly at a ReLU kink.
            for v in block.values_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
            let input: Vec<f64> = (0..input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let upstream: Vec<f64> = (0..output_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (grad, _) = block.gradient(&input, &upstream).unwrap();
            let eps = 1e-5;
            for k in 0..block.len() {
                let orig = block.values()[k];
                block.values_mut()[k] = orig + eps;
                let fp: f64 = block
                    .forward(&input)
                    .unwrap()
                    .iter()
                    .zip(&upstream)
                    .map(|(y, u)| y * u)
                    .sum();
                block.values_mut()[k] = orig - eps;
                let fm: f64 = block
                    .forward(&input)
                    .unwrap()
                    .iter()
                    .zip(&upstream)
                    .map(|(y, u)| y * u)
                    .sum();
                block.values_mut()[k] = orig;
                let fd = (fp - fm) / (2.0 * eps);
                let denom = fd.abs().max(grad[k].abs()).max(1e-6);
                assert!(
                    (fd - grad[k]).abs() / denom <= 1e-4,
                    "trial {trial} param {k}: analytic {} vs fd {}",
                    grad[k],
                    fd
                );
            }
        }
    }
}

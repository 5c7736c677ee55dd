//! A small affine-ReLU network with L2-normalized output, its analytic
//! gradients, and SGD with classical momentum.
//!
//! Layout: `x -> W0 x + b0 -> ReLU -> ... -> W_{L-1} h + b_{L-1} -> z / |z|`.
//! There is no ReLU after the last affine layer. Weights are stored as
//! `(out, in)` matrices so a batch `X` of row vectors maps to `X Wᵀ + b`.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{check_dims, DenseVector, NORM_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `(out, in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((output, input), || rng.random_range(-limit..limit));
        Layer {
            weight,
            bias: Array1::zeros(output),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    layers: Vec<Layer>,
}

/// Everything the backward pass needs from a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    norms: Array1<f64>,
    pub output: Array2<f64>,
}

impl ForwardCache {
    pub fn rows(&self) -> usize {
        self.output.nrows()
    }
}

impl EmbeddingNet {
    /// Builds a net with layer widths `dims = [input, hidden..., output]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {dims:?}")));
        }
        let layers = dims.windows(2).map(|w| Layer::init(w[0], w[1], rng)).collect();
        Ok(EmbeddingNet { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("layer list"));
        }
        for layer in &layers {
            check_dims("layer bias", layer.output_dim(), layer.bias.len())?;
            if layer.input_dim() == 0 || layer.output_dim() == 0 {
                return Err(Error::Config("zero-width layer".into()));
            }
        }
        for pair in layers.windows(2) {
            check_dims("layer chain", pair[0].output_dim(), pair[1].input_dim())?;
        }
        Ok(EmbeddingNet { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &DenseVector) -> Result<DenseVector> {
        check_dims("network input", self.input_dim(), x.dim())?;
        let batch = ArrayView2::from_shape((1, x.dim()), x.as_slice()).expect("row view");
        let cache = self.forward_batch(batch)?;
        DenseVector::new(cache.output.row(0).to_vec())
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        check_dims("network input", self.input_dim(), x.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = x.to_owned();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = current.dot(&layer.weight.t());
            z += &layer.bias;
            inputs.push(current);
            if k < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            current = z;
        }
        let norms = current.map_axis(Axis(1), |row| row.dot(&row).sqrt());
        let mut output = current;
        for (mut row, &n) in output.axis_iter_mut(Axis(0)).zip(norms.iter()) {
            if n < NORM_EPS {
                log::debug!("embedding pre-norm {n:e} below threshold; returning unnormalized output");
            } else {
                row /= n;
            }
        }
        if output.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output"));
        }
        Ok(ForwardCache { inputs, norms, output })
    }

    /// Gradients of `sum(upstream ⊙ output)` with respect to every parameter
    /// and every input row.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<(NetGrads, Array2<f64>)> {
        check_dims("upstream rows", cache.rows(), upstream.nrows())?;
        check_dims("upstream width", self.output_dim(), upstream.ncols())?;

        // d(z/|z|)/dz applied to g is (g - y (y·g)) / |z|.
        let mut dz = upstream.to_owned();
        Zip::from(dz.rows_mut())
            .and(cache.output.rows())
            .and(&cache.norms)
            .for_each(|mut g, y, &n| {
                if n >= NORM_EPS {
                    let proj = g.dot(&y);
                    g.scaled_add(-proj, &y);
                    g /= n;
                }
            });

        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &cache.inputs[k];
            let weight = dz.t().dot(input);
            let bias = dz.sum_axis(Axis(0));
            let mut dinput = dz.dot(&layer.weight);
            if k > 0 {
                // inputs[k] = relu(z_{k-1}); subgradient at 0 is 0.
                Zip::from(&mut dinput).and(input).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            grads.push(LayerGrad { weight, bias });
            dz = dinput;
        }
        grads.reverse();
        Ok((NetGrads { layers: grads }, dz))
    }

    pub fn backward(&self, x: &DenseVector, upstream: &DenseVector) -> Result<(NetGrads, DenseVector)> {
        check_dims("upstream gradient", self.output_dim(), upstream.dim())?;
        let xb = ArrayView2::from_shape((1, x.dim()), x.as_slice()).expect("row view");
        let cache = self.forward_batch(xb)?;
        let gb = ArrayView2::from_shape((1, upstream.dim()), upstream.as_slice()).expect("row view");
        let (grads, dx) = self.backward_batch(&cache, gb)?;
        Ok((grads, DenseVector::new(dx.row(0).to_vec())?))
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_u32::<LittleEndian>(self.layers.len() as u32)?;
        for layer in &self.layers {
            w.write_u32::<LittleEndian>(layer.output_dim() as u32)?;
            w.write_u32::<LittleEndian>(layer.input_dim() as u32)?;
            for v in layer.weight.iter() {
                w.write_f64::<LittleEndian>(*v)?;
            }
            for v in layer.bias.iter() {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub(crate) fn read_from<R: Read>(r: &mut R) -> std::io::Result<std::result::Result<Self, Error>> {
        let count = r.read_u32::<LittleEndian>()? as usize;
        if count == 0 || count > 64 {
            return Ok(Err(Error::Config(format!("implausible layer count {count}"))));
        }
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let rows = r.read_u32::<LittleEndian>()? as usize;
            let cols = r.read_u32::<LittleEndian>()? as usize;
            if rows == 0 || cols == 0 || rows.saturating_mul(cols) > (1 << 28) {
                return Ok(Err(Error::Config(format!("implausible layer shape {rows}x{cols}"))));
            }
            let mut weights = vec![0.0; rows * cols];
            r.read_f64_into::<LittleEndian>(&mut weights)?;
            let mut bias = vec![0.0; rows];
            r.read_f64_into::<LittleEndian>(&mut bias)?;
            layers.push(Layer {
                weight: Array2::from_shape_vec((rows, cols), weights).expect("shape checked"),
                bias: Array1::from(bias),
            });
        }
        Ok(EmbeddingNet::from_layers(layers))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Per-layer gradients (or momentum buffers) shaped like an [`EmbeddingNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrad>,
}

impl NetGrads {
    pub fn zeros_like(net: &EmbeddingNet) -> Self {
        NetGrads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, scale: f64, other: &NetGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    /// Weights then bias of every layer, in order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Same shapes as `self`, values from a [`NetGrads::flatten`] layout.
    pub fn unflatten(&self, values: &[f64]) -> Result<NetGrads> {
        let total: usize = self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum();
        check_dims("flattened gradient", total, values.len())?;
        let mut rest = values;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        let layers = self
            .layers
            .iter()
            .map(|l| LayerGrad {
                weight: Array2::from_shape_vec(l.weight.raw_dim(), take(l.weight.len())).expect("sized"),
                bias: Array1::from(take(l.bias.len())),
            })
            .collect();
        Ok(NetGrads { layers })
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|&v| v == 0.0))
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    fn matches(&self, net: &EmbeddingNet) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weight.dim() == l.weight.dim() && g.bias.dim() == l.bias.dim())
    }
}

/// Classical momentum: `v <- m v - lr g; p <- p + v`.
pub fn momentum_update(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    learning_rate: f64,
    momentum: f64,
) -> Result<()> {
    check_dims("sgd gradient", params.len(), grads.len())?;
    check_dims("sgd velocity", params.len(), velocity.len())?;
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - learning_rate * g;
        *p += *v;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: NetGrads,
}

impl SgdState {
    pub fn new(net: &EmbeddingNet, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            velocity: NetGrads::zeros_like(net),
        })
    }

    pub fn velocity(&self) -> &NetGrads {
        &self.velocity
    }

    /// Replaces the velocity with `values` laid out as [`NetGrads::flatten`].
    pub fn restore_velocity(&mut self, values: &[f64]) -> Result<()> {
        self.velocity = self.velocity.unflatten(values)?;
        Ok(())
    }

    pub fn step(&mut self, net: &mut EmbeddingNet, grads: &NetGrads) -> Result<()> {
        if !grads.matches(net) || !self.velocity.matches(net) {
            return Err(Error::DimMismatch {
                context: "sgd step",
                expected: net.num_params(),
                actual: grads.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum(),
            });
        }
        for ((layer, g), v) in net.layers.iter_mut().zip(&grads.layers).zip(&mut self.velocity.layers) {
            momentum_update(
                layer.weight.as_slice_mut().expect("standard layout"),
                g.weight.as_slice().expect("standard layout"),
                v.weight.as_slice_mut().expect("standard layout"),
                self.learning_rate,
                self.momentum,
            )?;
            momentum_update(
                layer.bias.as_slice_mut().expect("standard layout"),
                g.bias.as_slice().expect("standard layout"),
                v.bias.as_slice_mut().expect("standard layout"),
                self.learning_rate,
                self.momentum,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dv(x: &[f64]) -> DenseVector {
        DenseVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn identity_layer_normalizes() {
        let net = EmbeddingNet::from_layers(vec![Layer {
            weight: Array2::eye(2),
            bias: Array1::zeros(2),
        }])
        .unwrap();
        let y = net.forward(&dv(&[3.0, 4.0])).unwrap();
        assert!((y.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((y.as_slice()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_input_returns_unnormalized_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = EmbeddingNet::new(&[3, 5, 4], &mut rng).unwrap();
        let y = net.forward(&DenseVector::zeros(3)).unwrap();
        // zero biases: the whole pipeline stays at zero
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_two_layer_output_is_unit_norm() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = EmbeddingNet::new(&[6, 9, 4], &mut rng).unwrap();
            let x = dv(&[0.5, -1.0, 2.0, 0.1, 0.0, 3.0]);
            assert!((net.forward(&x).unwrap().norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_rejects_wrong_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = EmbeddingNet::new(&[3, 2], &mut rng).unwrap();
        let err = net.forward(&dv(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(
            err,
            Error::DimMismatch {
                expected: 3,
                actual: 2,
                ..
            }
        ));
    }

    #[test]
    fn single_layer_zero_bias_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = EmbeddingNet::new(&[4, 3], &mut rng).unwrap();
        let x = dv(&[0.2, -0.7, 1.1, 0.4]);
        let x2 = dv(&[0.4, -1.4, 2.2, 0.8]);
        let (a, b) = (net.forward(&x).unwrap(), net.forward(&x2).unwrap());
        for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn from_layers_checks_chain() {
        let l1 = Layer {
            weight: Array2::zeros((3, 2)),
            bias: Array1::zeros(3),
        };
        let l2 = Layer {
            weight: Array2::zeros((2, 4)),
            bias: Array1::zeros(2),
        };
        assert!(EmbeddingNet::from_layers(vec![l1, l2]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = EmbeddingNet::new(&[3, 4, 2], &mut rng).unwrap();
        let (g, dx) = net.backward(&dv(&[1.0, -0.5, 0.3]), &DenseVector::zeros(2)).unwrap();
        assert!(g.is_zero());
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_by_two_linear_case_matches_hand_chain_rule() {
        // y = z/|z|, z = W x + b with W = [[1,2],[0,1]], b = [0,1], x = [1,1]:
        // z = [3, 2], |z| = sqrt(13). For upstream g = [1, 0]:
        // dz = (g - y (y·g)) / |z| = ([1,0] - [3,2]*3/13) / sqrt(13)
        //    = [4/13, -6/13] / sqrt(13).
        // dW = dz xᵀ, db = dz, dx = Wᵀ dz.
        let net = EmbeddingNet::from_layers(vec![Layer {
            weight: array![[1.0, 2.0], [0.0, 1.0]],
            bias: array![0.0, 1.0],
        }])
        .unwrap();
        let s = 13f64.sqrt();
        let dz = [4.0 / 13.0 / s, -6.0 / 13.0 / s];
        let (g, dx) = net.backward(&dv(&[1.0, 1.0]), &dv(&[1.0, 0.0])).unwrap();
        let lg = &g.layers[0];
        for (i, d) in dz.iter().enumerate() {
            assert!((lg.bias[i] - d).abs() < 1e-15);
            for j in 0..2 {
                assert!((lg.weight[[i, j]] - d).abs() < 1e-15);
            }
        }
        assert!((dx.as_slice()[0] - dz[0]).abs() < 1e-15);
        assert!((dx.as_slice()[1] - (2.0 * dz[0] + dz[1])).abs() < 1e-15);
    }

    #[test]
    fn momentum_update_hand_iterations() {
        let (mut p, mut v) = ([1.0], [0.0]);
        momentum_update(&mut p, &[1.0], &mut v, 0.01, 0.0).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-15);

        let (mut p, mut v) = ([0.0], [0.0]);
        momentum_update(&mut p, &[1.0], &mut v, 0.1, 0.9).unwrap();
        assert!((v[0] + 0.1).abs() < 1e-15 && (p[0] + 0.1).abs() < 1e-15);
        momentum_update(&mut p, &[1.0], &mut v, 0.1, 0.9).unwrap();
        assert!((v[0] + 0.19).abs() < 1e-15 && (p[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_lets_velocity_decay_geometrically() {
        let (mut p, mut v) = ([0.0], [1.0]);
        let mut prev_step = f64::INFINITY;
        for _ in 0..200 {
            let before = p[0];
            momentum_update(&mut p, &[0.0], &mut v, 0.1, 0.9).unwrap();
            let step = (p[0] - before).abs();
            assert!(step < prev_step);
            prev_step = step;
        }
        // p converges to sum of 0.9^k, k >= 1 = 9
        assert!((p[0] - 9.0).abs() < 1e-6);
    }

    #[test]
    fn sgd_state_validates_shapes_and_hyperparameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = EmbeddingNet::new(&[2, 3], &mut rng).unwrap();
        let other = EmbeddingNet::new(&[2, 4], &mut rng).unwrap();
        assert!(SgdState::new(&net, 0.0, 0.9).is_err());
        assert!(SgdState::new(&net, 0.1, 1.0).is_err());
        let mut sgd = SgdState::new(&net, 0.1, 0.9).unwrap();
        assert!(sgd.step(&mut net, &NetGrads::zeros_like(&other)).is_err());
        let zeros = NetGrads::zeros_like(&net);
        sgd.step(&mut net, &zeros).unwrap();
    }
}

//! Dense numerical kernel: matrices, a small ReLU MLP with a hand-written
//! backward pass, L2 normalization, Adam, and a central-difference gradient
//! checker used as a test oracle throughout the crate.
//!
//! All training math runs in `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows * cols` values.
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
                context: "matrix data",
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                    context: "matrix row",
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Glorot-uniform init: U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))).
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit L2 norm. A zero (or non-finite) input is rejected rather
/// than silently producing NaNs.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("l2_normalize input"));
    }
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Gradient of `y = v / |v|` given the normalized output `y`, the pre-norm
/// length and the upstream gradient: `(g - y (y.g)) / |v|`.
pub fn l2_normalize_backward(y: &[f64], pre_norm: f64, upstream: &[f64]) -> Vec<f64> {
    let proj = dot(y, upstream);
    y.iter().zip(upstream).map(|(yi, gi)| (gi - yi * proj) / pre_norm).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input dim followed by each layer's output dim.
    pub layer_dims: Vec<usize>,
    /// One activation per layer (`layer_dims.len() - 1` entries).
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    /// ReLU between layers, identity on the output layer.
    pub fn relu_stack(layer_dims: Vec<usize>) -> Self {
        let n = layer_dims.len().saturating_sub(1);
        let activations = (0..n)
            .map(|i| if i + 1 == n { Activation::Identity } else { Activation::Relu })
            .collect();
        Self { layer_dims, activations }
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated spec")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::invalid("MLP needs at least one layer"));
        }
        if self.activations.len() != self.num_layers() {
            return Err(Error::DimensionMismatch {
                expected: self.num_layers(),
                actual: self.activations.len(),
                context: "activations per layer",
            });
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::invalid("MLP layer dims must be positive"));
        }
        Ok(())
    }
}

/// Weights are stored `out x in` so that a layer computes `W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Activation record of a (batched) forward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    /// Input to each layer, `batch x in_l`.
    inputs: Vec<DenseMatrix>,
    /// Pre-activations of each layer, `batch x out_l`.
    pre: Vec<DenseMatrix>,
}

impl MlpTape {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows
    }

    pub fn pre_activations(&self, layer: usize) -> &DenseMatrix {
        &self.pre[layer]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            weights: mlp.weights.iter().map(|w| DenseMatrix::zeros(w.rows, w.cols)).collect(),
            biases: mlp.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(&w.data);
            out.extend_from_slice(b);
        }
        out
    }
}

/// `c (m x n) = beta * c + a (m x k) * b (k x n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: callers pass slices whose extents cover every strided access;
    // the asserts below check the maximal offsets.
    let max_a = (m as isize - 1) * rsa + (k as isize - 1) * csa;
    let max_b = (k as isize - 1) * rsb + (n as isize - 1) * csb;
    assert!(max_a >= 0 && (max_a as usize) < a.len());
    assert!(max_b >= 0 && (max_b as usize) < b.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Mlp {
    pub fn new(spec: MlpSpec, weights: Vec<DenseMatrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        spec.validate()?;
        if weights.len() != spec.num_layers() || biases.len() != spec.num_layers() {
            return Err(Error::DimensionMismatch {
                expected: spec.num_layers(),
                actual: weights.len().min(biases.len()),
                context: "MLP layer count",
            });
        }
        for l in 0..spec.num_layers() {
            let (fan_in, fan_out) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
            if weights[l].rows != fan_out || weights[l].cols != fan_in {
                return Err(Error::DimensionMismatch {
                    expected: fan_out * fan_in,
                    actual: weights[l].rows * weights[l].cols,
                    context: "MLP weight shape",
                });
            }
            if biases[l].len() != fan_out {
                return Err(Error::DimensionMismatch {
                    expected: fan_out,
                    actual: biases[l].len(),
                    context: "MLP bias length",
                });
            }
        }
        Ok(Self { spec, weights, biases })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..spec.num_layers() {
            let (fan_in, fan_out) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
            weights.push(DenseMatrix::glorot(fan_out, fan_in, fan_in, fan_out, rng));
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self { spec, weights, biases })
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.data.len()).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Forward pass over a batch (one example per row).
    pub fn forward_batch(&self, x: &DenseMatrix) -> Result<(DenseMatrix, MlpTape)> {
        if x.cols != self.spec.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim(),
                actual: x.cols,
                context: "MLP input",
            });
        }
        let batch = x.rows;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut current = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (fan_in, fan_out) = (w.cols, w.rows);
            let mut z = DenseMatrix::zeros(batch, fan_out);
            for r in 0..batch {
                z.row_mut(r).copy_from_slice(b);
            }
            // z += current * W^T
            gemm(
                batch,
                fan_in,
                fan_out,
                &current.data,
                fan_in as isize,
                1,
                &w.data,
                1,
                fan_in as isize,
                1.0,
                &mut z.data,
            );
            let act = self.spec.activations[l];
            let a = DenseMatrix {
                rows: batch,
                cols: fan_out,
                data: z.data.iter().map(|&v| act.apply(v)).collect(),
            };
            inputs.push(current);
            pre.push(z);
            current = a;
        }
        Ok((current, MlpTape { inputs, pre }))
    }

    /// Backward pass: parameter gradients plus the gradient w.r.t. the batch input.
    pub fn backward_batch(&self, tape: &MlpTape, upstream: &DenseMatrix) -> Result<(MlpGrads, DenseMatrix)> {
        let batch = tape.batch_size();
        if upstream.rows != batch || upstream.cols != self.spec.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: batch * self.spec.output_dim(),
                actual: upstream.rows * upstream.cols,
                context: "MLP upstream gradient",
            });
        }
        let n = self.weights.len();
        let mut grads = MlpGrads::zeros_like(self);
        let mut g = upstream.clone();
        for l in (0..n).rev() {
            let w = &self.weights[l];
            let (fan_in, fan_out) = (w.cols, w.rows);
            let act = self.spec.activations[l];
            let z = &tape.pre[l];
            let dz: Vec<f64> = g.data.iter().zip(&z.data).map(|(gv, zv)| gv * act.derivative(*zv)).collect();
            // dW (out x in) = dz^T (out x batch) * input (batch x in)
            gemm(
                fan_out,
                batch,
                fan_in,
                &dz,
                1,
                fan_out as isize,
                &tape.inputs[l].data,
                fan_in as isize,
                1,
                0.0,
                &mut grads.weights[l].data,
            );
            let db = &mut grads.biases[l];
            for r in 0..batch {
                for (d, v) in db.iter_mut().zip(&dz[r * fan_out..(r + 1) * fan_out]) {
                    *d += v;
                }
            }
            // dx (batch x in) = dz (batch x out) * W (out x in)
            let mut dx = DenseMatrix::zeros(batch, fan_in);
            gemm(
                batch,
                fan_out,
                fan_in,
                &dz,
                fan_out as isize,
                1,
                &w.data,
                fan_in as isize,
                1,
                0.0,
                &mut dx.data,
            );
            g = dx;
        }
        Ok((grads, g))
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpTape)> {
        let input = DenseMatrix::from_vec(1, x.len(), x.to_vec())?;
        let (out, tape) = self.forward_batch(&input)?;
        Ok((out.data, tape))
    }

    pub fn backward(&self, tape: &MlpTape, upstream: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        if tape.batch_size() != 1 {
            return Err(Error::invalid("single-example backward on a batched tape"));
        }
        let up = DenseMatrix::from_vec(1, upstream.len(), upstream.to_vec())?;
        let (grads, dx) = self.backward_batch(tape, &up)?;
        Ok((grads, dx.data))
    }

    /// Parameter blocks in a fixed order (per layer: weights then bias).
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(&mut w.data);
            out.push(b);
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(&w.data);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for block in self.param_blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
    }
}

/// Single-vector forward pass, returning the output and the activation tape.
pub fn mlp_forward(x: &[f64], spec: &MlpSpec, weights: &[DenseMatrix], biases: &[Vec<f64>]) -> Result<(Vec<f64>, MlpTape)> {
    let mlp = Mlp::new(spec.clone(), weights.to_vec(), biases.to_vec())?;
    mlp.forward(x)
}

/// Single-vector backward pass matching [`mlp_forward`].
pub fn mlp_backward(
    tape: &MlpTape,
    upstream: &[f64],
    spec: &MlpSpec,
    weights: &[DenseMatrix],
    biases: &[Vec<f64>],
) -> Result<(MlpGrads, Vec<f64>)> {
    let mlp = Mlp::new(spec.clone(), weights.to_vec(), biases.to_vec())?;
    mlp.backward(tape, upstream)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad Adam hyper-parameters: {self:?}")))
        }
    }
}

/// Bias-corrected Adam over a fixed list of parameter blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, block_sizes: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first_moment: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }
}

/// Applies one Adam update in place. Gradients are validated before any
/// parameter is touched, so a rejected step leaves params and state unchanged.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::DimensionMismatch {
            expected: state.first_moment.len(),
            actual: params.len(),
            context: "Adam parameter blocks",
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::DimensionMismatch {
                expected: m.len(),
                actual: g.len(),
                context: "Adam block size",
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
    }
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Relative error between central finite differences of `f` and an analytic
/// gradient: max over coordinates of `|fd - a| / max(1e-8, |fd| + |a|)`.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length");
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / (fd.abs() + analytic[i].abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

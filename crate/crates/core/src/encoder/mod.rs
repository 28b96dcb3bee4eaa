//! Small ReLU MLP encoder with a bias-free linear head.
//!
//! `dims = [d_in, hidden..., d_prev, d]`: every layer except the last is
//! `relu(W x + b)`; the last is the pure projection `z = W_last h`. Gradient
//! features are taken w.r.t. `W_last`, whose single-matrix form gives them the
//! factored shape `a hᵀ` used by the scoring module. With `dims = [d_in, d]`
//! there are no hidden layers and `h = x`.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use optim::{apply_update, AdamConfig, OptimizerKind, OptimizerState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{normalize_rows, Matrix, SeededRng};

/// Hidden layer `relu(W x + b)` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub hidden: Vec<Dense>,
    /// `d × d_prev`, no bias, no activation.
    pub last: Matrix,
}

/// Gradients with the same shape tree as [`EncoderParams`].
pub type EncoderGrads = EncoderParams;

impl EncoderParams {
    /// Builds parameters from explicit tensors, checking the shape chain.
    pub fn new(hidden: Vec<Dense>, last: Matrix) -> Result<Self> {
        let p = EncoderParams { hidden, last };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut width = self.d_in();
        for (l, layer) in self.hidden.iter().enumerate() {
            if layer.weight.cols() != width || layer.bias.len() != layer.weight.rows() {
                return Err(Error::Shape(format!(
                    "hidden layer {l}: weight {:?}, bias {}, incoming width {width}",
                    layer.weight.shape(),
                    layer.bias.len()
                )));
            }
            width = layer.weight.rows();
        }
        if self.last.cols() != width {
            return Err(Error::Shape(format!(
                "last layer {:?} does not accept width {width}",
                self.last.shape()
            )));
        }
        let finite = self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite("encoder parameters".into()));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.hidden
            .first()
            .map_or(self.last.cols(), |l| l.weight.cols())
    }

    /// Width of the penultimate activations `h`.
    pub fn d_prev(&self) -> usize {
        self.last.cols()
    }

    pub fn d_out(&self) -> usize {
        self.last.rows()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.d_in()];
        dims.extend(self.hidden.iter().map(|l| l.weight.rows()));
        dims.push(self.d_out());
        dims
    }

    pub fn zeros_like(&self) -> EncoderGrads {
        EncoderParams {
            hidden: self
                .hidden
                .iter()
                .map(|l| Dense {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            last: Matrix::zeros(self.last.rows(), self.last.cols()),
        }
    }

    /// Flat views of every tensor, in a fixed order: per hidden layer weight
    /// then bias, then the last layer.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 1);
        for l in &self.hidden {
            out.push(l.weight.data());
            out.push(l.bias.as_slice());
        }
        out.push(self.last.data());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 1);
        for l in &mut self.hidden {
            out.push(l.weight.data_mut());
            out.push(l.bias.as_mut_slice());
        }
        out.push(self.last.data_mut());
        out
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) -> Result<()> {
        for (l, o) in self.hidden.iter_mut().zip(&other.hidden) {
            l.weight.add_assign(&o.weight)?;
            for (b, ob) in l.bias.iter_mut().zip(&o.bias) {
                *b += ob;
            }
        }
        self.last.add_assign(&other.last)
    }
}

/// He-initialized encoder: hidden weights ~ N(0, 2/fan_in), zero biases; the
/// linear head uses N(0, 1/fan_in).
pub fn init_encoder(dims: &[usize], rng: &mut SeededRng) -> Result<EncoderParams> {
    if dims.len() < 2 {
        return Err(Error::Usage(format!(
            "encoder needs at least input and output dims, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Usage(format!("zero-width layer in {dims:?}")));
    }
    let mut gaussian = |rows: usize, cols: usize, var: f64| {
        let std = var.sqrt();
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Matrix::from_vec(rows, cols, data)
    };
    let n = dims.len();
    let mut hidden = Vec::with_capacity(n - 2);
    for w in dims[..n - 1].windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        hidden.push(Dense {
            weight: gaussian(fan_out, fan_in, 2.0 / fan_in as f64)?,
            bias: vec![0.0; fan_out],
        });
    }
    let last = gaussian(dims[n - 1], dims[n - 2], 1.0 / dims[n - 2] as f64)?;
    EncoderParams::new(hidden, last)
}

/// Everything the backward pass and the gradient features need from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Input to each hidden layer (`inputs[0]` is the batch itself).
    pub inputs: Vec<Matrix>,
    /// Pre-activation of each hidden layer.
    pub pre_activations: Vec<Matrix>,
    /// `H`, the input to the last layer (`N × d_prev`).
    pub penultimate: Matrix,
    /// `Z = H · W_lastᵀ`.
    pub output: Matrix,
    /// Row-normalized `Z`; degenerate rows are zero.
    pub unit_output: Matrix,
    pub norms: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.output.rows()
    }
}

fn affine(x: &Matrix, layer: &Dense) -> Result<Matrix> {
    let mut out = x.matmul_nt(&layer.weight)?;
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(&layer.bias) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn forward(params: &EncoderParams, x: &Matrix) -> Result<ForwardTrace> {
    if x.cols() != params.d_in() {
        return Err(Error::Shape(format!(
            "encoder expects {} input features, batch has {}",
            params.d_in(),
            x.cols()
        )));
    }
    let mut inputs = Vec::with_capacity(params.hidden.len());
    let mut pre_activations = Vec::with_capacity(params.hidden.len());
    let mut act = x.clone();
    for layer in &params.hidden {
        let pre = affine(&act, layer)?;
        let mut next = pre.clone();
        for v in next.data_mut() {
            *v = v.max(0.0);
        }
        inputs.push(act);
        pre_activations.push(pre);
        act = next;
    }
    let output = act.matmul_nt(&params.last)?;
    let (unit_output, norms, degenerate) = normalize_rows(&output);
    Ok(ForwardTrace {
        inputs,
        pre_activations,
        penultimate: act,
        output,
        unit_output,
        norms,
        degenerate,
    })
}

/// Reverse-mode pass from `dL/dZ` to every parameter.
pub fn backward(params: &EncoderParams, trace: &ForwardTrace, d_output: &Matrix) -> Result<EncoderGrads> {
    if d_output.shape() != trace.output.shape() {
        return Err(Error::Shape(format!(
            "dL/dZ is {:?}, output is {:?}",
            d_output.shape(),
            trace.output.shape()
        )));
    }
    if trace.inputs.len() != params.hidden.len() || trace.penultimate.cols() != params.d_prev() {
        return Err(Error::Shape("trace was not produced by these parameters".into()));
    }
    let mut grads = params.zeros_like();
    grads.last = d_output.matmul_tn(&trace.penultimate)?;
    let mut d_act = d_output.matmul(&params.last)?;
    for l in (0..params.hidden.len()).rev() {
        let pre = &trace.pre_activations[l];
        let mut d_pre = d_act;
        for (d, &p) in d_pre.data_mut().iter_mut().zip(pre.data()) {
            if p <= 0.0 {
                *d = 0.0;
            }
        }
        grads.hidden[l].weight = d_pre.matmul_tn(&trace.inputs[l])?;
        let bias = &mut grads.hidden[l].bias;
        for row in d_pre.row_iter() {
            for (b, d) in bias.iter_mut().zip(row) {
                *b += d;
            }
        }
        d_act = d_pre.matmul(&params.hidden[l].weight)?;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;

    fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let dims = [2, 16, 8, 4];
        let a = init_encoder(&dims, &mut SeededRng::new(7)).unwrap();
        let b = init_encoder(&dims, &mut SeededRng::new(7)).unwrap();
        let c = init_encoder(&dims, &mut SeededRng::new(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.last.shape(), (4, 8));
        assert_eq!(a.dims(), dims.to_vec());
        assert!(init_encoder(&[2, 0, 4], &mut SeededRng::new(1)).is_err());
        assert!(init_encoder(&[2], &mut SeededRng::new(1)).is_err());
    }

    #[test]
    fn identity_head_passes_input_through() {
        let p = EncoderParams::new(vec![], Matrix::identity(2)).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let t = forward(&p, &x).unwrap();
        assert_eq!(t.output.data(), &[1.0, 2.0]);
        assert_eq!(t.penultimate, x);
    }

    #[test]
    fn zero_input_gives_degenerate_zero_output() {
        let p = init_encoder(&[3, 5, 4], &mut SeededRng::new(2)).unwrap();
        let t = forward(&p, &Matrix::zeros(2, 3)).unwrap();
        assert!(t.penultimate.data().iter().all(|&v| v == 0.0));
        assert!(t.output.data().iter().all(|&v| v == 0.0));
        assert_eq!(t.degenerate, vec![true, true]);
    }

    #[test]
    fn forward_matches_naive_chain_and_bias_free_head() {
        let mut rng = SeededRng::new(3);
        let p = init_encoder(&[3, 6, 5, 4], &mut rng).unwrap();
        let x = random_matrix(&mut rng, 4, 3);
        let t = forward(&p, &x).unwrap();
        for n in 0..4 {
            let mut h = x.row(n).to_vec();
            for layer in &p.hidden {
                h = (0..layer.weight.rows())
                    .map(|o| (dot(layer.weight.row(o), &h) + layer.bias[o]).max(0.0))
                    .collect();
            }
            for o in 0..4 {
                let z = dot(p.last.row(o), &h);
                assert!((t.output.get(n, o) - z).abs() <= 1e-12);
            }
        }
        assert_eq!(t.output, t.penultimate.matmul_nt(&p.last).unwrap());
        assert!(x.cols() == 3 && forward(&p, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut rng = SeededRng::new(4);
        let p = init_encoder(&[3, 4, 2], &mut rng).unwrap();
        let t = forward(&p, &random_matrix(&mut rng, 5, 3)).unwrap();
        let g = backward(&p, &t, &Matrix::zeros(5, 2)).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn linear_net_gradient_is_outer_product() {
        let mut rng = SeededRng::new(5);
        let p = EncoderParams::new(vec![], random_matrix(&mut rng, 2, 3)).unwrap();
        let x = random_matrix(&mut rng, 4, 3);
        let dz = random_matrix(&mut rng, 4, 2);
        let t = forward(&p, &x).unwrap();
        let g = backward(&p, &t, &dz).unwrap();
        assert_eq!(g.last, dz.transpose().matmul(&x).unwrap());
    }

    /// Central differences of `L = Σ C ⊙ Z + ½‖Z‖²` against backprop.
    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = SeededRng::new(100 + seed);
            let dims = [3, 6, 5, 4];
            let p = init_encoder(&dims, &mut rng).unwrap();
            let x = random_matrix(&mut rng, 5, 3);
            let c = random_matrix(&mut rng, 5, 4);
            let loss = |p: &EncoderParams| {
                let z = forward(p, &x).unwrap().output;
                dot(c.data(), z.data()) + 0.5 * dot(z.data(), z.data())
            };
            let t = forward(&p, &x).unwrap();
            let mut dz = c.clone();
            dz.add_assign(&t.output).unwrap();
            let g = backward(&p, &t, &dz).unwrap();
            let analytic: Vec<f64> = g.tensors().concat();
            let mut k = 0;
            for ti in 0..p.tensors().len() {
                for e in 0..p.tensors()[ti].len() {
                    let w = p.tensors()[ti][e];
                    let h = 1e-5 * w.abs().max(1.0);
                    let mut plus = p.clone();
                    plus.tensors_mut()[ti][e] += h;
                    let mut minus = p.clone();
                    minus.tensors_mut()[ti][e] -= h;
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let a = analytic[k];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                    assert!(rel <= 1e-4, "seed {seed} tensor {ti} entry {e}: {a} vs {fd}");
                    k += 1;
                }
            }
        }
    }
}

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batchnorm::{BatchNorm, BnCache};
use super::init::he_truncated_normal;
use super::{Activation, Mode, RealMatrix};
use crate::checkpoint::NamedTensor;
use crate::error::{Error, Result};

/// Equal-width feedforward network: `hidden_layers` layers of `hidden_width`
/// units followed by an affine output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub batchnorm: bool,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_width == 0 || self.output_dim == 0 {
            return Err(Error::config("network dimensions must be positive"));
        }
        if self.hidden_layers == 0 {
            return Err(Error::config("network needs at least one hidden layer"));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        dims.push(self.output_dim);
        dims
    }

    /// `k·d_NN + (h-1)·d_NN² + d_NN·d`: weights only.
    pub fn weight_count(&self) -> usize {
        let w = self.hidden_width;
        self.input_dim * w + (self.hidden_layers - 1) * w * w + w * self.output_dim
    }

    /// Every learnable scalar: weights, biases, and BN scale/shift.
    pub fn param_count(&self) -> usize {
        let biases = self.hidden_layers * self.hidden_width + self.output_dim;
        let bn = if self.batchnorm {
            2 * self.hidden_layers * self.hidden_width
        } else {
            0
        };
        self.weight_count() + biases + bn
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in × fan_out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Parameters of a feedforward network (the parameter store): affine layers
/// plus one batch-normalization layer per hidden layer when enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    activation: Activation,
    batchnorm: bool,
    layers: Vec<Dense>,
    norms: Vec<BatchNorm>,
    version: u64,
}

/// Activations cached by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpTape {
    version: u64,
    inputs: Vec<RealMatrix>,
    pre_activations: Vec<RealMatrix>,
    bn: Vec<Option<BnCache>>,
}

impl MlpTape {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

/// Gradients mirroring [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub gammas: Vec<Array1<f64>>,
    pub betas: Vec<Array1<f64>>,
    /// Gradient with respect to the network input, when requested.
    pub input: Option<RealMatrix>,
}

impl MlpGrads {
    /// Flattened in the order of [`Mlp::params_mut`].
    pub fn flatten(&self) -> Vec<Vec<f64>> {
        let hidden = self.weights.len() - 1;
        let mut out = Vec::new();
        for l in 0..self.weights.len() {
            out.push(self.weights[l].iter().copied().collect());
            out.push(self.biases[l].to_vec());
            if l < hidden && !self.gammas.is_empty() {
                out.push(self.gammas[l].to_vec());
                out.push(self.betas[l].to_vec());
            }
        }
        out
    }
}

impl Mlp {
    pub fn new(cfg: &MlpConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(super::init::init_params(cfg, seed))
    }

    /// Network with arbitrary layer widths `dims = [input, hidden..., output]`.
    pub fn with_rng<R: Rng + ?Sized>(
        dims: &[usize],
        activation: Activation,
        batchnorm: bool,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "a network needs input and output widths");
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                weight: he_truncated_normal(rng, w[0], w[1]),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        let norms = if batchnorm {
            dims[1..dims.len() - 1]
                .iter()
                .map(|&w| BatchNorm::new(w))
                .collect()
        } else {
            Vec::new()
        };
        Mlp {
            dims: dims.to_vec(),
            activation,
            batchnorm,
            layers,
            norms,
            version: 0,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("non-empty dims")
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn has_batchnorm(&self) -> bool {
        self.batchnorm
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version += 1;
        &mut self.layers
    }

    pub fn norms(&self) -> &[BatchNorm] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [BatchNorm] {
        self.version += 1;
        &mut self.norms
    }

    fn hidden(&self) -> usize {
        self.layers.len() - 1
    }

    /// Weight scalars only (no biases, no BN).
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum::<usize>()
            + self.norms.iter().map(|n| 2 * n.width()).sum::<usize>()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::contract(format!(
                "network expects {} input columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Forward pass. Each hidden layer is affine → BN (if enabled) →
    /// activation; the output layer is affine only.
    pub fn forward(&mut self, x: ArrayView2<f64>, mode: Mode) -> Result<(RealMatrix, MlpTape)> {
        self.check_input(&x)?;
        let hidden = self.hidden();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(hidden);
        let mut bn = Vec::with_capacity(hidden);
        let mut a = x.to_owned();
        for l in 0..hidden {
            let layer = &self.layers[l];
            let mut z = a.dot(&layer.weight) + &layer.bias;
            if self.batchnorm {
                let (y, cache) = self.norms[l].forward(z.view(), mode)?;
                z = y;
                bn.push(Some(cache));
            } else {
                bn.push(None);
            }
            inputs.push(a);
            a = match self.activation {
                Activation::Identity => z.clone(),
                act => z.mapv(|v| act.apply(v)),
            };
            pre_activations.push(z);
        }
        let out_layer = &self.layers[hidden];
        let out = a.dot(&out_layer.weight) + &out_layer.bias;
        inputs.push(a);
        Ok((
            out,
            MlpTape {
                version: self.version,
                inputs,
                pre_activations,
                bn,
            },
        ))
    }

    /// Inference-mode forward pass that does not record a tape.
    pub fn infer(&self, x: ArrayView2<f64>) -> Result<RealMatrix> {
        self.check_input(&x)?;
        let hidden = self.hidden();
        let mut a = x.to_owned();
        for l in 0..hidden {
            let layer = &self.layers[l];
            let mut z = a.dot(&layer.weight) + &layer.bias;
            if self.batchnorm {
                z = self.norms[l].infer(z.view());
            }
            if self.activation != Activation::Identity {
                let act = self.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            a = z;
        }
        let out_layer = &self.layers[hidden];
        Ok(a.dot(&out_layer.weight) + &out_layer.bias)
    }

    /// Backpropagates `output_grad` (one row per example) through the tape.
    pub fn backward(
        &self,
        tape: &MlpTape,
        output_grad: ArrayView2<f64>,
        input_grad: bool,
    ) -> Result<MlpGrads> {
        if tape.version != self.version {
            return Err(Error::contract(
                "stale tape: parameters changed after the forward pass",
            ));
        }
        if output_grad.dim() != (tape.batch_size(), self.output_dim()) {
            return Err(Error::contract(format!(
                "output gradient has shape {:?}, expected ({}, {})",
                output_grad.dim(),
                tape.batch_size(),
                self.output_dim()
            )));
        }
        let hidden = self.hidden();
        let mut weights = vec![Array2::zeros((0, 0)); self.layers.len()];
        let mut biases = vec![Array1::zeros(0); self.layers.len()];
        let mut gammas = vec![Array1::zeros(0); self.norms.len()];
        let mut betas = vec![Array1::zeros(0); self.norms.len()];

        let out_layer = &self.layers[hidden];
        weights[hidden] = tape.inputs[hidden].t().dot(&output_grad);
        biases[hidden] = output_grad.sum_axis(Axis(0));
        let mut g = output_grad.dot(&out_layer.weight.t());

        for l in (0..hidden).rev() {
            if self.activation != Activation::Identity {
                let act = self.activation;
                ndarray::Zip::from(&mut g)
                    .and(&tape.pre_activations[l])
                    .for_each(|gv, &z| *gv *= act.derivative(z));
            }
            if let Some(cache) = &tape.bn[l] {
                let (dx, dgamma, dbeta) = self.norms[l].backward(cache, g.view());
                gammas[l] = dgamma;
                betas[l] = dbeta;
                g = dx;
            }
            weights[l] = tape.inputs[l].t().dot(&g);
            biases[l] = g.sum_axis(Axis(0));
            if l > 0 || input_grad {
                g = g.dot(&self.layers[l].weight.t());
            }
        }
        let input = if input_grad { Some(g) } else { None };
        Ok(MlpGrads {
            weights,
            biases,
            gammas,
            betas,
            input,
        })
    }

    /// Mutable views of every learnable tensor, in a fixed order: for each
    /// layer its weight and bias, then the BN scale and shift of hidden
    /// layers. Invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        let hidden = self.hidden();
        let mut out: Vec<&mut [f64]> = Vec::new();
        let mut norms = self.norms.iter_mut();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
            if l < hidden && self.batchnorm {
                let bn = norms.next().expect("one BN per hidden layer");
                out.push(bn.gamma.as_slice_mut().expect("standard layout"));
                out.push(bn.beta.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    /// Learnable tensors in the order of [`Mlp::params_mut`].
    pub fn params(&self) -> Vec<&[f64]> {
        let hidden = self.hidden();
        let mut out: Vec<&[f64]> = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(layer.weight.as_slice().expect("standard layout"));
            out.push(layer.bias.as_slice().expect("standard layout"));
            if l < hidden && self.batchnorm {
                out.push(self.norms[l].gamma.as_slice().expect("standard layout"));
                out.push(self.norms[l].beta.as_slice().expect("standard layout"));
            }
        }
        out
    }

    /// Full state, including BN running statistics, for checkpoints.
    pub fn tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(NamedTensor::matrix(
                format!("{prefix}layer{l}.weight"),
                &layer.weight,
            ));
            out.push(NamedTensor::vector(
                format!("{prefix}layer{l}.bias"),
                &layer.bias,
            ));
        }
        for (l, bn) in self.norms.iter().enumerate() {
            out.push(NamedTensor::vector(
                format!("{prefix}bn{l}.gamma"),
                &bn.gamma,
            ));
            out.push(NamedTensor::vector(format!("{prefix}bn{l}.beta"), &bn.beta));
            out.push(NamedTensor::vector(
                format!("{prefix}bn{l}.running_mean"),
                &bn.running_mean,
            ));
            out.push(NamedTensor::vector(
                format!("{prefix}bn{l}.running_var"),
                &bn.running_var,
            ));
        }
        out
    }

    /// Restores state written by [`Mlp::tensors`] with the same prefix.
    pub fn load_tensors(&mut self, prefix: &str, tensors: &[NamedTensor]) -> Result<()> {
        let find = |name: String| -> Result<&NamedTensor> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))
        };
        self.version += 1;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            find(format!("{prefix}layer{l}.weight"))?
                .copy_into(layer.weight.as_slice_mut().expect("standard layout"))?;
            find(format!("{prefix}layer{l}.bias"))?
                .copy_into(layer.bias.as_slice_mut().expect("standard layout"))?;
        }
        for (l, bn) in self.norms.iter_mut().enumerate() {
            find(format!("{prefix}bn{l}.gamma"))?
                .copy_into(bn.gamma.as_slice_mut().expect("standard layout"))?;
            find(format!("{prefix}bn{l}.beta"))?
                .copy_into(bn.beta.as_slice_mut().expect("standard layout"))?;
            find(format!("{prefix}bn{l}.running_mean"))?
                .copy_into(bn.running_mean.as_slice_mut().expect("standard layout"))?;
            find(format!("{prefix}bn{l}.running_var"))?
                .copy_into(bn.running_var.as_slice_mut().expect("standard layout"))?;
            if bn.running_var.iter().any(|v| *v <= 0.0) {
                return Err(Error::Format("running variance must be positive".into()));
            }
        }
        Ok(())
    }
}

/// `mlp_forward` in function form.
pub fn mlp_forward(mlp: &mut Mlp, batch: &RealMatrix, mode: Mode) -> Result<(RealMatrix, MlpTape)> {
    mlp.forward(batch.view(), mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::gradcheck::{central_difference, max_relative_error};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    fn cfg(act: Activation, bn: bool) -> MlpConfig {
        MlpConfig {
            input_dim: 5,
            hidden_width: 6,
            hidden_layers: 3,
            output_dim: 4,
            activation: act,
            batchnorm: bn,
        }
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> RealMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new(-scale, scale).unwrap();
        Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
    }

    #[test]
    fn zero_network_gives_zero_output() {
        let mut mlp = Mlp::new(&cfg(Activation::Relu, false), 0).unwrap();
        for p in mlp.params_mut() {
            p.fill(0.0);
        }
        let x = random_matrix(7, 5, 1, 1.0);
        let (y, _) = mlp.forward(x.view(), Mode::Train).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn relu_inactive_on_nonnegative_input_gives_affine_map() {
        let c = MlpConfig {
            input_dim: 3,
            hidden_width: 3,
            hidden_layers: 1,
            output_dim: 2,
            activation: Activation::Relu,
            batchnorm: false,
        };
        let mut mlp = Mlp::new(&c, 0).unwrap();
        let w_out = array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]];
        {
            let layers = mlp.layers_mut();
            layers[0].weight = Array2::eye(3);
            layers[0].bias = array![0.1, 0.2, 0.3];
            layers[1].weight = w_out.clone();
            layers[1].bias = array![-1.0, 1.0];
        }
        let x = array![[0.0, 1.0, 2.0], [4.0, 0.5, 0.25]];
        let (y, _) = mlp.forward(x.view(), Mode::Infer).unwrap();
        let expect = (&x + &array![0.1, 0.2, 0.3]).dot(&w_out) + &array![-1.0, 1.0];
        for (a, b) in y.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut mlp = Mlp::new(&cfg(Activation::Mish, true), 0).unwrap();
        let x = random_matrix(4, 3, 0, 1.0);
        assert!(matches!(
            mlp.forward(x.view(), Mode::Train),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut mlp = Mlp::new(&cfg(Activation::Mish, true), 0).unwrap();
        let x = random_matrix(4, 5, 0, 1.0);
        let (y, tape) = mlp.forward(x.view(), Mode::Train).unwrap();
        let _ = mlp.params_mut();
        assert!(matches!(
            mlp.backward(&tape, y.view(), false),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let mut mlp = Mlp::new(&cfg(Activation::Mish, true), 3).unwrap();
        let x = random_matrix(8, 5, 4, 1.0);
        let (y, tape) = mlp.forward(x.view(), Mode::Train).unwrap();
        let grads = mlp
            .backward(&tape, Array2::zeros(y.dim()).view(), true)
            .unwrap();
        for g in grads.flatten() {
            assert!(g.iter().all(|v| *v == 0.0));
        }
        assert!(grads.input.unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn parameter_count_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let c = MlpConfig {
                input_dim: rng.random_range(1..300),
                hidden_width: rng.random_range(1..64),
                hidden_layers: rng.random_range(1..7),
                output_dim: rng.random_range(1..40),
                activation: Activation::Mish,
                batchnorm: rng.random_bool(0.5),
            };
            let mlp = Mlp::new(&c, 0).unwrap();
            let (k, w, h, d) = (c.input_dim, c.hidden_width, c.hidden_layers, c.output_dim);
            assert_eq!(mlp.weight_count(), k * w + (h - 1) * w * w + w * d);
            assert_eq!(mlp.weight_count(), c.weight_count());
            assert_eq!(mlp.param_count(), c.param_count());
            let flat: usize = mlp.params().iter().map(|p| p.len()).sum();
            assert_eq!(flat, c.param_count());
        }
    }

    /// Checks every parameter and input gradient of `mlp` against central
    /// differences of `L = sum(R ⊙ f(x))`.
    fn gradient_check(mut mlp: Mlp, x: RealMatrix, seed: u64) -> f64 {
        // Random biases and BN affine terms keep ReLU pre-activations off the
        // kink (zero biases put dead rows exactly at 0).
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        let dist = Uniform::new(-0.5, 0.5).unwrap();
        for layer in mlp.layers_mut() {
            layer.bias.mapv_inplace(|_| dist.sample(&mut rng));
        }
        for bn in mlp.norms_mut() {
            bn.gamma.mapv_inplace(|_| 1.0 + dist.sample(&mut rng));
            bn.beta.mapv_inplace(|_| dist.sample(&mut rng));
        }
        let (y, tape) = mlp.forward(x.view(), Mode::Train).unwrap();
        let r = random_matrix(y.nrows(), y.ncols(), seed, 1.0);
        let grads = mlp.backward(&tape, r.view(), true).unwrap();
        let analytic = grads.flatten();
        let mut worst: f64 = 0.0;
        let n_tensors = analytic.len();
        for t in 0..n_tensors {
            let base: Vec<f64> = mlp.params()[t].to_vec();
            let fd = central_difference(&base, 1e-5, |theta| {
                let mut probe = mlp.clone();
                probe.params_mut()[t].copy_from_slice(theta);
                let (y, _) = probe.forward(x.view(), Mode::Train).unwrap();
                (&y * &r).sum()
            });
            worst = worst.max(max_relative_error(&analytic[t], &fd));
        }
        let fd_input = central_difference(x.as_slice().unwrap(), 1e-5, |xs| {
            let xm = Array2::from_shape_vec(x.dim(), xs.to_vec()).unwrap();
            let mut probe = mlp.clone();
            let (y, _) = probe.forward(xm.view(), Mode::Train).unwrap();
            (&y * &r).sum()
        });
        let input = grads.input.unwrap();
        worst.max(max_relative_error(input.as_slice().unwrap(), &fd_input))
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut case = 0u64;
        for act in [Activation::Mish, Activation::Relu] {
            for bn in [false, true] {
                for trial in 0..3 {
                    case += 1;
                    let mlp = Mlp::new(&cfg(act, bn), 100 + case).unwrap();
                    let x = random_matrix(6, 5, 200 + case, 1.5);
                    let err = gradient_check(mlp, x, 300 + case);
                    assert!(err < 1e-4, "{act:?} bn={bn} trial={trial}: rel err {err}");
                }
            }
        }
    }

    #[test]
    fn linear_network_matches_matrix_product_gradient() {
        // y = x W1 W2 (biases zero): dL/dW1 = xᵀ R W2ᵀ, dL/dW2 = (x W1)ᵀ R.
        let c = MlpConfig {
            input_dim: 4,
            hidden_width: 3,
            hidden_layers: 1,
            output_dim: 2,
            activation: Activation::Identity,
            batchnorm: false,
        };
        let mut mlp = Mlp::new(&c, 12).unwrap();
        let x = random_matrix(5, 4, 1, 1.0);
        let r = random_matrix(5, 2, 2, 1.0);
        let (_, tape) = mlp.forward(x.view(), Mode::Train).unwrap();
        let g = mlp.backward(&tape, r.view(), true).unwrap();
        let w1 = mlp.layers()[0].weight.clone();
        let w2 = mlp.layers()[1].weight.clone();
        let dw1 = x.t().dot(&r).dot(&w2.t());
        let dw2 = x.dot(&w1).t().dot(&r);
        let dx = r.dot(&w2.t()).dot(&w1.t());
        let close = |a: &Array2<f64>, b: &Array2<f64>| {
            a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() < 1e-12)
        };
        assert!(close(&g.weights[0], &dw1));
        assert!(close(&g.weights[1], &dw2));
        assert!(close(g.input.as_ref().unwrap(), &dx));
    }

    #[test]
    fn large_inputs_stay_finite() {
        for act in [Activation::Mish, Activation::Relu] {
            let mut mlp = Mlp::new(&cfg(act, true), 1).unwrap();
            let x =
                Array2::from_shape_fn((6, 5), |(i, j)| if (i + j) % 2 == 0 { 1e3 } else { -1e3 });
            let (y, _) = mlp.forward(x.view(), Mode::Train).unwrap();
            assert!(y.iter().all(|v| v.is_finite()));
            let y = mlp.infer(x.view()).unwrap();
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn train_and_infer_agree_after_running_stats_settle() {
        let c = MlpConfig {
            input_dim: 8,
            hidden_width: 16,
            hidden_layers: 2,
            output_dim: 4,
            activation: Activation::Mish,
            batchnorm: true,
        };
        let mut mlp = Mlp::new(&c, 2).unwrap();
        // Batches from one fixed distribution; running stats converge to
        // its moments.
        // Batches are large so batch statistics sit close to the population
        // moments.
        for step in 0..60 {
            let x = random_matrix(16384, 8, 1000 + step, 1.0);
            mlp.forward(x.view(), Mode::Train).unwrap();
        }
        let x = random_matrix(65536, 8, 5, 1.0);
        let (train_out, _) = mlp.forward(x.view(), Mode::Train).unwrap();
        let infer_out = mlp.infer(x.view()).unwrap();
        let rms = ((&train_out - &infer_out).mapv(|v| v * v).mean().unwrap()).sqrt();
        assert!(rms < 1e-2, "rms={rms}");
    }

    #[test]
    fn infer_matches_forward_in_infer_mode() {
        let mut mlp = Mlp::new(&cfg(Activation::Mish, true), 8).unwrap();
        let x = random_matrix(9, 5, 3, 1.0);
        mlp.forward(x.view(), Mode::Train).unwrap();
        let (a, _) = mlp.forward(x.view(), Mode::Infer).unwrap();
        let b = mlp.infer(x.view()).unwrap();
        assert_eq!(a, b);
    }
}

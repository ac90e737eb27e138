//! Recommendation backbones over user/item embeddings, the training loss,
//! and AUC.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::NamedTensor;
use crate::error::{Error, Result};
use crate::neuralnet::{softplus, Activation, Mlp, MlpTape, Mode, RealMatrix};

/// Hidden widths of the MLP backbone.
pub const MLP_BACKBONE_HIDDEN: [usize; 3] = [256, 128, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Gmf,
    Mlp,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmf" => Ok(BackboneKind::Gmf),
            "mlp" => Ok(BackboneKind::Mlp),
            _ => Err(Error::config(format!("unknown backbone {s:?}"))),
        }
    }
}

/// Weighted sum of the element-wise product. All-ones weights and zero bias
/// give plain matrix factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct GmfParams {
    pub w: Array1<f64>,
    pub bias: f64,
}

impl GmfParams {
    pub fn new(d: usize) -> Self {
        GmfParams {
            w: Array1::ones(d),
            bias: 0.0,
        }
    }
}

fn check_dims(u: &[f64], i: &[f64], d: usize) -> Result<()> {
    if u.len() != d || i.len() != d {
        return Err(Error::contract(format!(
            "embeddings of length {} and {} for a backbone of dimension {d}",
            u.len(),
            i.len()
        )));
    }
    Ok(())
}

pub fn gmf_score(u: &[f64], i: &[f64], p: &GmfParams) -> Result<f64> {
    check_dims(u, i, p.w.len())?;
    Ok(p.w
        .iter()
        .zip(u)
        .zip(i)
        .map(|((w, a), b)| w * a * b)
        .sum::<f64>()
        + p.bias)
}

/// Feedforward network over `[u; i]` with ReLU hidden layers and a scalar
/// output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBackboneParams {
    pub mlp: Mlp,
}

impl MlpBackboneParams {
    pub fn new(d: usize, seed: u64) -> Self {
        let mut dims = vec![2 * d];
        dims.extend(MLP_BACKBONE_HIDDEN);
        dims.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MlpBackboneParams {
            mlp: Mlp::with_rng(&dims, Activation::Relu, false, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.mlp.input_dim() / 2
    }
}

pub fn mlp_score(u: &[f64], i: &[f64], p: &MlpBackboneParams) -> Result<f64> {
    check_dims(u, i, p.dim())?;
    let x = Array2::from_shape_vec((1, u.len() + i.len()), u.iter().chain(i).copied().collect())
        .expect("row vector");
    Ok(p.mlp.infer(x.view())?[[0, 0]])
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backbone {
    Gmf(GmfParams),
    Mlp(MlpBackboneParams),
}

#[derive(Debug, Clone)]
pub enum BackboneTape {
    Gmf {
        version: u64,
        users: RealMatrix,
        items: RealMatrix,
    },
    Mlp(MlpTape),
}

/// Gradients from [`Backbone::backward`].
#[derive(Debug, Clone)]
pub struct BackboneGrads {
    /// Aligned with [`Backbone::params`].
    pub params: Vec<Vec<f64>>,
    pub users: RealMatrix,
    pub items: RealMatrix,
}

impl Backbone {
    pub fn new(kind: BackboneKind, d: usize, seed: u64) -> Self {
        match kind {
            BackboneKind::Gmf => Backbone::Gmf(GmfParams::new(d)),
            BackboneKind::Mlp => Backbone::Mlp(MlpBackboneParams::new(d, seed)),
        }
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            Backbone::Gmf(_) => BackboneKind::Gmf,
            Backbone::Mlp(_) => BackboneKind::Mlp,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Backbone::Gmf(p) => p.w.len(),
            Backbone::Mlp(p) => p.dim(),
        }
    }

    fn check_batch(&self, users: &ArrayView2<f64>, items: &ArrayView2<f64>) -> Result<()> {
        let d = self.dim();
        if users.ncols() != d || items.ncols() != d || users.nrows() != items.nrows() {
            return Err(Error::contract(format!(
                "user batch {:?} and item batch {:?} do not match dimension {d}",
                users.dim(),
                items.dim()
            )));
        }
        Ok(())
    }

    /// Logits for row-aligned user and item embeddings.
    pub fn score_batch(
        &self,
        users: ArrayView2<f64>,
        items: ArrayView2<f64>,
    ) -> Result<Array1<f64>> {
        self.check_batch(&users, &items)?;
        match self {
            Backbone::Gmf(p) => Ok((&users * &items).dot(&p.w) + p.bias),
            Backbone::Mlp(p) => {
                let x = concatenate(Axis(1), &[users, items]).expect("matching rows");
                Ok(p.mlp.infer(x.view())?.column(0).to_owned())
            }
        }
    }

    pub fn forward(
        &mut self,
        users: ArrayView2<f64>,
        items: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, BackboneTape)> {
        self.check_batch(&users, &items)?;
        match self {
            Backbone::Gmf(p) => Ok((
                (&users * &items).dot(&p.w) + p.bias,
                BackboneTape::Gmf {
                    version: gmf_version(p),
                    users: users.to_owned(),
                    items: items.to_owned(),
                },
            )),
            Backbone::Mlp(p) => {
                let x = concatenate(Axis(1), &[users, items]).expect("matching rows");
                let (y, tape) = p.mlp.forward(x.view(), Mode::Train)?;
                Ok((y.column(0).to_owned(), BackboneTape::Mlp(tape)))
            }
        }
    }

    pub fn backward(&self, tape: &BackboneTape, dlogits: &Array1<f64>) -> Result<BackboneGrads> {
        match (self, tape) {
            (
                Backbone::Gmf(p),
                BackboneTape::Gmf {
                    version,
                    users,
                    items,
                },
            ) => {
                if *version != gmf_version(p) {
                    return Err(Error::contract(
                        "stale tape: parameters changed after the forward pass",
                    ));
                }
                if dlogits.len() != users.nrows() {
                    return Err(Error::contract(
                        "logit gradient length does not match the batch",
                    ));
                }
                let g = dlogits.view().insert_axis(Axis(1));
                let dw = (users * items * g).sum_axis(Axis(0));
                let gw = &g * &p.w;
                Ok(BackboneGrads {
                    params: vec![dw.to_vec(), vec![dlogits.sum()]],
                    users: (items * &gw).as_standard_layout().into_owned(),
                    items: (users * &gw).as_standard_layout().into_owned(),
                })
            }
            (Backbone::Mlp(p), BackboneTape::Mlp(t)) => {
                let g = dlogits.view().insert_axis(Axis(1));
                let grads = p.mlp.backward(t, g, true)?;
                let input = grads.input.clone().expect("input gradient requested");
                let d = p.dim();
                Ok(BackboneGrads {
                    params: grads.flatten(),
                    users: input
                        .slice(ndarray::s![.., ..d])
                        .as_standard_layout()
                        .into_owned(),
                    items: input
                        .slice(ndarray::s![.., d..])
                        .as_standard_layout()
                        .into_owned(),
                })
            }
            _ => Err(Error::contract("tape does not belong to this backbone")),
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Backbone::Gmf(p) => vec![
                p.w.as_slice().expect("standard layout"),
                std::slice::from_ref(&p.bias),
            ],
            Backbone::Mlp(p) => p.mlp.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Backbone::Gmf(p) => vec![
                p.w.as_slice_mut().expect("standard layout"),
                std::slice::from_mut(&mut p.bias),
            ],
            Backbone::Mlp(p) => p.mlp.params_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn tensors(&self) -> Vec<NamedTensor> {
        match self {
            Backbone::Gmf(p) => vec![
                NamedTensor::vector("gmf.w", &p.w),
                NamedTensor::new("gmf.bias", vec![1], vec![p.bias]),
            ],
            Backbone::Mlp(p) => p.mlp.tensors("backbone."),
        }
    }

    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        match self {
            Backbone::Gmf(p) => {
                let find = |name: &str| {
                    tensors.iter().find(|t| t.name == name).ok_or_else(|| {
                        Error::Format(format!("checkpoint is missing tensor {name}"))
                    })
                };
                find("gmf.w")?.copy_into(p.w.as_slice_mut().expect("standard layout"))?;
                find("gmf.bias")?.copy_into(std::slice::from_mut(&mut p.bias))
            }
            Backbone::Mlp(p) => p.mlp.load_tensors("backbone.", tensors),
        }
    }
}

/// GMF carries no version counter; its tape is tied to the exact parameter
/// bits instead.
fn gmf_version(p: &GmfParams) -> u64 {
    p.w.iter()
        .chain(std::iter::once(&p.bias))
        .fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3)
        })
}

/// Mean binary cross-entropy, labels 1 for `pos` and 0 for `neg`.
pub fn bce_loss(logits_pos: &[f64], logits_neg: &[f64]) -> Result<f64> {
    if logits_pos.is_empty() {
        return Err(Error::contract(
            "binary cross-entropy needs at least one positive",
        ));
    }
    let total: f64 = logits_pos.iter().map(|&x| softplus(-x)).sum::<f64>()
        + logits_neg.iter().map(|&x| softplus(x)).sum::<f64>();
    Ok(total / (logits_pos.len() + logits_neg.len()) as f64)
}

/// Mean binary cross-entropy over `logits` with 0/1 `labels` and its
/// gradient with respect to each logit.
pub fn bce_with_grad(logits: &Array1<f64>, labels: &[f64]) -> (f64, Array1<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = Array1::from_iter(logits.iter().zip(labels).map(|(&x, &y)| {
        loss += y * softplus(-x) + (1.0 - y) * softplus(x);
        (sigmoid(x) - y) / n
    }));
    (loss / n, grad)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting
/// one half.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::contract(
            "AUC needs at least one positive and one negative score",
        ));
    }
    if pos.iter().chain(neg).any(|v| v.is_nan()) {
        return Err(Error::contract("AUC scores must not be NaN"));
    }
    let mut sorted = neg.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in pos {
        let below = sorted.partition_point(|&v| v < p);
        let not_above = sorted.partition_point(|&v| v <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

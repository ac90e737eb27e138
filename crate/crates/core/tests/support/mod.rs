//! Shared checks for the integration and acceptance tests.
#![allow(dead_code)]

use dhe::neuralnet::gradcheck::{central_difference, central_difference_at, max_relative_error};
use dhe::neuralnet::{Activation, Mlp, MlpConfig, Mode};
use dhe::recmodels::{bce_with_grad, Backbone, BackboneKind};
use dhe::schemes::{size_for_budget, Scheme, SchemeConfig, SchemeKind};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Coordinates sampled per tensor when a tensor is too large to probe fully.
const MAX_COORDS: usize = 48;

#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: String,
    pub rel_err: f64,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

fn coords(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    if len <= MAX_COORDS {
        (0..len).collect()
    } else {
        (0..MAX_COORDS).map(|_| rng.random_range(0..len)).collect()
    }
}

fn activation(rng: &mut ChaCha8Rng) -> Activation {
    if rng.random_bool(0.5) {
        Activation::Mish
    } else {
        Activation::Relu
    }
}

/// `L = sum(R ⊙ mlp(x))` against every parameter tensor and the input.
fn mlp_case(rng: &mut ChaCha8Rng, act: Activation, batchnorm: bool) -> f64 {
    let cfg = MlpConfig {
        input_dim: rng.random_range(2..7),
        hidden_width: rng.random_range(3..9),
        hidden_layers: rng.random_range(1..4),
        output_dim: rng.random_range(1..5),
        activation: act,
        batchnorm,
    };
    let mut mlp = Mlp::new(&cfg, rng.random()).unwrap();
    // Zero biases put dead ReLU units exactly on the kink; probe a generic point.
    for layer in mlp.layers_mut() {
        layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    let rows = rng.random_range(3..8);
    let x = random_matrix(rng, rows, cfg.input_dim, 1.5);
    let (y, tape) = mlp.forward(x.view(), Mode::Train).unwrap();
    let r = random_matrix(rng, y.nrows(), y.ncols(), 1.0);
    let grads = mlp.backward(&tape, r.view(), true).unwrap();
    let analytic = grads.flatten();
    let mut worst: f64 = 0.0;
    for (t, g) in analytic.iter().enumerate() {
        let base = mlp.params()[t].to_vec();
        let fd = central_difference(&base, FD_STEP, |theta| {
            let mut probe = mlp.clone();
            probe.params_mut()[t].copy_from_slice(theta);
            (&probe.forward(x.view(), Mode::Train).unwrap().0 * &r).sum()
        });
        worst = worst.max(max_relative_error(g, &fd));
    }
    let fd_x = central_difference(x.as_slice().unwrap(), FD_STEP, |xs| {
        let xm = Array2::from_shape_vec(x.dim(), xs.to_vec()).unwrap();
        (&mlp.clone().forward(xm.view(), Mode::Train).unwrap().0 * &r).sum()
    });
    let input: Vec<f64> = grads.input.unwrap().iter().copied().collect();
    worst.max(max_relative_error(&input, &fd_x))
}

/// BCE through a backbone, against its parameters and both embeddings.
fn backbone_case(rng: &mut ChaCha8Rng, kind: BackboneKind) -> f64 {
    let d = rng.random_range(2..7);
    let batch = rng.random_range(2..6);
    let mut b = Backbone::new(kind, d, rng.random());
    // Move GMF off its all-ones start so the weights matter.
    let n = b.params().len();
    for t in 0..n {
        for v in b.params_mut()[t].iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let users = random_matrix(rng, batch, d, 1.0);
    let items = random_matrix(rng, batch, d, 1.0);
    let labels: Vec<f64> = (0..batch).map(|i| (i % 2) as f64).collect();
    let loss = |b: &Backbone, u: &Array2<f64>, i: &Array2<f64>| {
        let logits: Array1<f64> = b.score_batch(u.view(), i.view()).unwrap();
        bce_with_grad(&logits, &labels).0
    };
    let (logits, tape) = b.forward(users.view(), items.view()).unwrap();
    let (_, dl) = bce_with_grad(&logits, &labels);
    let g = b.backward(&tape, &dl).unwrap();
    let mut worst: f64 = 0.0;
    for t in 0..n {
        let idx = coords(rng, b.params()[t].len());
        let fd = central_difference_at(b.params()[t], &idx, FD_STEP, |theta| {
            let mut probe = b.clone();
            probe.params_mut()[t].copy_from_slice(theta);
            loss(&probe, &users, &items)
        });
        let analytic: Vec<f64> = idx.iter().map(|&i| g.params[t][i]).collect();
        worst = worst.max(max_relative_error(&analytic, &fd));
    }
    let fd_u = central_difference(users.as_slice().unwrap(), FD_STEP, |x| {
        loss(
            &b,
            &Array2::from_shape_vec((batch, d), x.to_vec()).unwrap(),
            &items,
        )
    });
    let fd_i = central_difference(items.as_slice().unwrap(), FD_STEP, |x| {
        loss(
            &b,
            &users,
            &Array2::from_shape_vec((batch, d), x.to_vec()).unwrap(),
        )
    });
    worst
        .max(max_relative_error(
            &g.users.iter().copied().collect::<Vec<_>>(),
            &fd_u,
        ))
        .max(max_relative_error(
            &g.items.iter().copied().collect::<Vec<_>>(),
            &fd_i,
        ))
}

/// Full model loss: DHE users and items through a backbone into BCE,
/// checked against sampled coordinates of every DHE and backbone tensor.
fn end_to_end_case(rng: &mut ChaCha8Rng, backbone: BackboneKind, act: Activation) -> f64 {
    let d = rng.random_range(2..6);
    let mut scheme_cfg = |vocab: u64| {
        let mut c = SchemeConfig::new(SchemeKind::Dhe, vocab, d).with_seed(rng.random());
        c.num_hashes = rng.random_range(4..17);
        c.buckets = 1_000_000;
        c.dhe.hidden_width = rng.random_range(3..9);
        c.dhe.hidden_layers = rng.random_range(1..3);
        c.dhe.activation = act;
        c
    };
    let (ucfg, icfg) = (scheme_cfg(50), scheme_cfg(80));
    let user = Scheme::new(&ucfg).unwrap();
    let item = Scheme::new(&icfg).unwrap();
    let mut b = Backbone::new(backbone, d, rng.random());
    let batch = rng.random_range(3..7);
    let uids: Vec<u64> = (0..batch).map(|_| rng.random_range(0..50)).collect();
    let iids: Vec<u64> = (0..batch).map(|_| rng.random_range(0..80)).collect();
    let labels: Vec<f64> = (0..batch).map(|i| ((i + 1) % 2) as f64).collect();

    let loss = |user: &Scheme, item: &Scheme, b: &Backbone| {
        let (mut u, mut i) = (user.clone(), item.clone());
        let ue = u.forward(&uids, Mode::Train).unwrap().0;
        let ie = i.forward(&iids, Mode::Train).unwrap().0;
        bce_with_grad(&b.score_batch(ue.view(), ie.view()).unwrap(), &labels).0
    };

    let (mut u, mut i) = (user.clone(), item.clone());
    let (ue, ut) = u.forward(&uids, Mode::Train).unwrap();
    let (ie, it) = i.forward(&iids, Mode::Train).unwrap();
    let (logits, bt) = b.forward(ue.view(), ie.view()).unwrap();
    let (_, dl) = bce_with_grad(&logits, &labels);
    let gb = b.backward(&bt, &dl).unwrap();
    let gu = u.backward(&ut, gb.users.view()).unwrap();
    let gi = i.backward(&it, gb.items.view()).unwrap();

    let mut worst: f64 = 0.0;
    for (side, grads) in [(0, &gu), (1, &gi)] {
        let s = if side == 0 { &user } else { &item };
        for t in 0..s.params().len() {
            let len = s.params()[t].len();
            let dense = grads.0[t].to_dense(len);
            let idx = coords(rng, len);
            let fd = central_difference_at(s.params()[t], &idx, FD_STEP, |theta| {
                let mut probe = s.clone();
                probe.params_mut()[t].copy_from_slice(theta);
                if side == 0 {
                    loss(&probe, &item, &b)
                } else {
                    loss(&user, &probe, &b)
                }
            });
            let analytic: Vec<f64> = idx.iter().map(|&k| dense[k]).collect();
            worst = worst.max(max_relative_error(&analytic, &fd));
        }
    }
    for t in 0..b.params().len() {
        let idx = coords(rng, b.params()[t].len());
        let fd = central_difference_at(b.params()[t], &idx, FD_STEP, |theta| {
            let mut probe = b.clone();
            probe.params_mut()[t].copy_from_slice(theta);
            loss(&user, &item, &probe)
        });
        let analytic: Vec<f64> = idx.iter().map(|&k| gb.params[t][k]).collect();
        worst = worst.max(max_relative_error(&analytic, &fd));
    }
    worst
}

/// Table schemes: `L = sum(R ⊙ scheme(ids))` over every parameter.
fn table_scheme_case(rng: &mut ChaCha8Rng) -> (String, f64) {
    let kinds = [
        SchemeKind::Full,
        SchemeKind::HashTrick,
        SchemeKind::Bloom,
        SchemeKind::HashEmb,
        SchemeKind::Hybrid,
        SchemeKind::Compositional,
    ];
    let kind = kinds[rng.random_range(0..kinds.len())];
    let n = 40;
    let mut c = SchemeConfig::new(kind, n, rng.random_range(2..5)).with_seed(rng.random());
    c.buckets = if kind == SchemeKind::Full {
        n
    } else {
        rng.random_range(5..15)
    };
    c.num_hashes = if kind == SchemeKind::HashTrick {
        1
    } else {
        rng.random_range(2..4)
    };
    c.compositional_hidden = 4;
    c.init_std = 0.5;
    let mut s = Scheme::with_frequencies(
        &c,
        Some(&(0..n).map(|i| (i * 7919) % 101).collect::<Vec<_>>()),
    )
    .unwrap();
    let ids: Vec<u64> = (0..rng.random_range(3..8))
        .map(|_| rng.random_range(0..n))
        .collect();
    let (y, tape) = s.forward(&ids, Mode::Train).unwrap();
    let r = random_matrix(rng, y.nrows(), y.ncols(), 1.0);
    let grads = s.backward(&tape, r.view()).unwrap();
    let mut worst: f64 = 0.0;
    for t in 0..s.params().len() {
        let len = s.params()[t].len();
        let dense = grads.0[t].to_dense(len);
        let idx = coords(rng, len);
        let fd = central_difference_at(s.params()[t], &idx, FD_STEP, |theta| {
            let mut probe = s.clone();
            probe.params_mut()[t].copy_from_slice(theta);
            (&probe.forward(&ids, Mode::Train).unwrap().0 * &r).sum()
        });
        let analytic: Vec<f64> = idx.iter().map(|&k| dense[k]).collect();
        worst = worst.max(max_relative_error(&analytic, &fd));
    }
    (kind.as_str().to_string(), worst)
}

/// `count` randomized finite-difference checks cycling through every layer
/// type, both activations, both backbones and the end-to-end DHE model.
pub fn gradient_suite(count: usize, seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let (name, rel_err) = match i % 10 {
                0 => (
                    "mlp relu".to_string(),
                    mlp_case(&mut rng, Activation::Relu, false),
                ),
                1 => (
                    "mlp mish".to_string(),
                    mlp_case(&mut rng, Activation::Mish, false),
                ),
                2 => (
                    "mlp bn relu".to_string(),
                    mlp_case(&mut rng, Activation::Relu, true),
                ),
                3 => (
                    "mlp bn mish".to_string(),
                    mlp_case(&mut rng, Activation::Mish, true),
                ),
                4 => (
                    "backbone gmf".to_string(),
                    backbone_case(&mut rng, BackboneKind::Gmf),
                ),
                5 => (
                    "backbone mlp".to_string(),
                    backbone_case(&mut rng, BackboneKind::Mlp),
                ),
                6 => (
                    "dhe+gmf mish".to_string(),
                    end_to_end_case(&mut rng, BackboneKind::Gmf, Activation::Mish),
                ),
                7 => {
                    let act = activation(&mut rng);
                    (
                        format!("dhe+mlp {act:?}").to_lowercase(),
                        end_to_end_case(&mut rng, BackboneKind::Mlp, act),
                    )
                }
                8 => (
                    "dhe+gmf relu".to_string(),
                    end_to_end_case(&mut rng, BackboneKind::Gmf, Activation::Relu),
                ),
                _ => {
                    let (kind, e) = table_scheme_case(&mut rng);
                    (format!("scheme {kind}"), e)
                }
            };
            GradCase {
                name: format!("#{i} {name}"),
                rel_err,
            }
        })
        .collect()
}

/// Parameter count written out independently of the library.
pub fn expected_params(c: &SchemeConfig) -> u64 {
    let (n, d, m, k) = (c.vocab_size, c.dim as u64, c.buckets, c.num_hashes as u64);
    match c.kind {
        SchemeKind::Full => n * d,
        SchemeKind::HashTrick => m * d,
        SchemeKind::Bloom if c.shared_table => m * d,
        SchemeKind::Bloom => k * m * d,
        // Shared table plus k importance weights per value.
        SchemeKind::HashEmb => m * d + n * k,
        SchemeKind::Hybrid => {
            let dedicated = ((c.hybrid_fraction * n as f64).ceil() as u64).min(n);
            dedicated * d + m * d
        }
        SchemeKind::Compositional => {
            let w = c.compositional_hidden as u64;
            let quotients = n.div_ceil(m);
            quotients * d + m * (d * w + w + w * d + d)
        }
        SchemeKind::Dhe => {
            let w = c.dhe.hidden_width as u64;
            let h = c.dhe.hidden_layers as u64;
            let input = (if c.dhe.use_hash { k } else { 0 }) + c.dhe.side_dim as u64;
            let weights = input * w + (h - 1) * w * w + w * d;
            let biases = h * w + d;
            let bn = if c.dhe.batchnorm { 2 * h * w } else { 0 };
            weights + biases + bn
        }
    }
}

/// A random but valid configuration of `kind`.
pub fn random_config(rng: &mut ChaCha8Rng, kind: SchemeKind) -> SchemeConfig {
    let n = rng.random_range(10..5000u64);
    let mut c = SchemeConfig::new(kind, n, rng.random_range(1..64)).with_seed(rng.random());
    match kind {
        SchemeKind::Full => {}
        SchemeKind::Compositional => {
            c.buckets = rng.random_range(1..=n);
            c.compositional_hidden = rng.random_range(1..32);
        }
        SchemeKind::Dhe => {
            c.num_hashes = rng.random_range(1..512);
            c.dhe.hidden_width = rng.random_range(1..128);
            c.dhe.hidden_layers = rng.random_range(1..7);
            c.dhe.batchnorm = rng.random_bool(0.5);
            c.dhe.side_dim = if rng.random_bool(0.3) {
                rng.random_range(1..20)
            } else {
                0
            };
        }
        _ => {
            c.buckets = rng.random_range(2..2 * n);
            c.num_hashes = if kind == SchemeKind::HashTrick {
                1
            } else {
                rng.random_range(1..9)
            };
            c.hybrid_fraction = rng.random_range(0.01..1.0);
            c.shared_table = rng.random_bool(0.7);
        }
    }
    c
}

/// `(scheme, problems)`: any config whose count disagrees with the formula
/// or whose budget-sized version overshoots its budget.
pub fn accounting_problems(per_scheme: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut problems = Vec::new();
    for kind in SchemeKind::ALL {
        for _ in 0..per_scheme {
            let c = random_config(&mut rng, kind);
            let want = expected_params(&c);
            if c.param_count() != want {
                problems.push(format!(
                    "{kind}: config counts {} vs formula {want}",
                    c.param_count()
                ));
            }
            if kind == SchemeKind::Dhe {
                let (w, h, d) = (
                    c.dhe.hidden_width as u64,
                    c.dhe.hidden_layers as u64,
                    c.dim as u64,
                );
                let input = c.dhe_input_dim() as u64;
                let weights = input * w + (h - 1) * w * w + w * d;
                if c.dhe_weight_count() != weights {
                    problems.push(format!(
                        "dhe: weight count {} vs formula {weights}",
                        c.dhe_weight_count()
                    ));
                }
            }
            // Instances are only built at modest sizes to keep this fast.
            if want < 2_000_000 {
                let built = Scheme::new(&c).unwrap().param_count();
                if built != want {
                    problems.push(format!("{kind}: instance holds {built} vs formula {want}"));
                }
            }
            let budget = rng.random_range(1..c.vocab_size * c.dim as u64 + 1);
            if let Ok(sized) = size_for_budget(&c, budget) {
                if sized.param_count() > budget {
                    problems.push(format!(
                        "{kind}: sized to {} over budget {budget}",
                        sized.param_count()
                    ));
                }
            }
        }
    }
    problems
}

/// Mean and population variance of `values × k` dense encodings, with
/// `values · k` entries in total.
pub fn dense_moments(
    distribution: dhe::encoders::Distribution,
    k: usize,
    values: u64,
    seed: u64,
) -> (f64, f64, usize) {
    let enc = dhe::encoders::DenseHashEncoder::from_seed(seed, k, 1_000_000, distribution).unwrap();
    let mut buf = vec![0.0; k];
    let (mut sum, mut sq, mut count) = (0.0, 0.0, 0usize);
    for x in 0..values {
        enc.encode_into(x, &mut buf);
        for &v in &buf {
            sum += v;
            sq += v * v;
        }
        count += k;
    }
    let mean = sum / count as f64;
    (mean, sq / count as f64 - mean * mean, count)
}

//! Central finite-difference oracle for taped gradients.
//!
//! Each case draws a random instance from its seed and returns the
//! norm-wise relative error `‖g_analytic − g_fd‖ / max(‖g_analytic‖, ‖g_fd‖)`
//! over every leaf it differentiates. Non-scalar outputs are reduced with a
//! fixed random projection `sum(out ⊙ R)`.
//!
//! Central differences are no oracle where the stencil straddles a relu or
//! clamp kink. Such a crossing shows up as a second difference of order
//! `h · |slope jump|`, far above the `h² f''` of a smooth stretch. A flagged
//! coordinate is retried at `h / 10`: strong curvature passes that retry,
//! while a kink at the point itself fails it and the instance is redrawn
//! from a derived seed.

#![allow(dead_code)]

use certiqa::models::{DenoiserModel, DifferentiableScorer, Module, QualityModel, Scorer};
use certiqa::training::{composite_loss, ranking_matrix, LossWeights, TrainMode};
use certiqa::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// Relative error, or `None` when some stencil crosses a kink.
pub fn rel_error(inputs: &[Tensor], f: &Build<'_>) -> Option<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], Tensor::into_data))
        .collect();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = f(&mut t, &vs);
        t.value(l).item()
    };
    let f0 = eval(inputs);
    let kink_tol = 1e-9 * f0.abs().max(1.0);
    let mut work = inputs.to_vec();
    let mut numeric = Vec::with_capacity(analytic.len());
    for k in 0..work.len() {
        for j in 0..work[k].len() {
            let orig = work[k].data()[j];
            let mut stencil = |h: f64| {
                work[k].data_mut()[j] = orig + h;
                let up = eval(&work);
                work[k].data_mut()[j] = orig - h;
                let down = eval(&work);
                work[k].data_mut()[j] = orig;
                ((up - down) / (2.0 * h), (up + down - 2.0 * f0).abs())
            };
            let (mut d, second) = stencil(H);
            if second > kink_tol {
                // Curvature shrinks the second difference 100x at a tenth of
                // the step; a kink inside the stencil does not.
                let (d_small, second_small) = stencil(H / 10.0);
                if second_small > kink_tol / 100.0 {
                    return None;
                }
                d = d_small;
            }
            numeric.push(d);
        }
    }
    Some(norm_rel(&analytic, &numeric))
}

fn norm_rel(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x6772_6164 ^ seed)
}

fn rand_t(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

/// Uniform values kept at least `gap` away from every point in `kinks`.
fn away_from(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = r.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn project(tape: &mut Tape, out: Var, r: &mut ChaCha8Rng) -> Var {
    let w = rand_t(r, tape.value(out).shape());
    let c = tape.constant(w);
    let m = tape.mul(out, c).unwrap();
    tape.sum(m).unwrap()
}

/// Checks a non-scalar op via a random projection drawn from `seed`.
fn projected(seed: u64, inputs: &[Tensor], op: &Build<'_>) -> Option<f64> {
    rel_error(inputs, &|t, v| {
        let out = op(t, v);
        project(t, out, &mut rng(seed ^ 0x5eed))
    })
}

pub type Case = (&'static str, fn(u64) -> Option<f64>);

/// Result of one checked instance.
pub struct Checked {
    pub rel_error: f64,
    /// Instances redrawn because of a kink crossing.
    pub redrawn: usize,
}

/// Runs instance `index` of a case, redrawing past kink crossings.
pub fn check(case: fn(u64) -> Option<f64>, index: u64) -> Checked {
    for redrawn in 0..50 {
        if let Some(rel_error) = case(index + ((redrawn as u64) << 32)) {
            return Checked { rel_error, redrawn };
        }
    }
    panic!("instance {index}: every redraw crossed a kink");
}

/// Every tape primitive plus the composite denoiser loss.
pub fn cases() -> Vec<Case> {
    vec![
        ("conv2d stride 1 pad 1", |s| {
            let mut r = rng(s);
            let ins = [rand_t(&mut r, &[2, 3, 6, 6]), rand_t(&mut r, &[4, 3, 3, 3]), rand_t(&mut r, &[4])];
            projected(s, &ins, &|t, v| t.conv2d(v[0], v[1], v[2], 1, 1).unwrap())
        }),
        ("conv2d stride 2 pad 0", |s| {
            let mut r = rng(s);
            let ins = [rand_t(&mut r, &[1, 2, 7, 7]), rand_t(&mut r, &[3, 2, 3, 3]), rand_t(&mut r, &[3])];
            projected(s, &ins, &|t, v| t.conv2d(v[0], v[1], v[2], 2, 0).unwrap())
        }),
        ("relu", |s| {
            let mut r = rng(s);
            let ins = [away_from(&mut r, &[4, 6], -2.0, 2.0, &[0.0], 1e-3)];
            projected(s, &ins, &|t, v| t.relu(v[0]).unwrap())
        }),
        ("sigmoid", |s| {
            let mut r = rng(s);
            let ins = [rand_t(&mut r, &[4, 6])];
            projected(s, &ins, &|t, v| t.sigmoid(v[0]).unwrap())
        }),
        ("clamp01", |s| {
            let mut r = rng(s);
            let ins = [away_from(&mut r, &[4, 6], -0.5, 1.5, &[0.0, 1.0], 1e-3)];
            projected(s, &ins, &|t, v| t.clamp01(v[0]).unwrap())
        }),
        ("avg_pool2d", |s| {
            let mut r = rng(s);
            let ins = [rand_t(&mut r, &[2, 3, 4, 6])];
            projected(s, &ins, &|t, v| t.avg_pool2d(v[0]).unwrap())
        }),
        ("nearest_upsample2d", |s| {
            let mut r = rng(s);
            let ins = [rand_t(&mut r, &[2, 2, 3, 3])];
            projected(s, &ins, &|t, v| t.nearest_upsample2d(v[0]).unwrap())
        }),
        ("global_avg_pool", |s| {
            let mut r = rng(s);
            let ins = [rand_t(&mut r, &[2, 3, 4, 4])];
            projected(s, &ins, &|t, v| t.global_avg_pool(v[0]).unwrap())
        }),
        ("linear", |s| {
            let mut r = rng(s);
            let ins = [rand_t(&mut r, &[3, 5]), rand_t(&mut r, &[4, 5]), rand_t(&mut r, &[4])];
            projected(s, &ins, &|t, v| t.linear(v[0], v[1], v[2]).unwrap())
        }),
        ("add", |s| {
            let mut r = rng(s);
            let ins = [rand_t(&mut r, &[2, 3]), rand_t(&mut r, &[2, 3])];
            projected(s, &ins, &|t, v| t.add(v[0], v[1]).unwrap())
        }),
        ("sub", |s| {
            let mut r = rng(s);
            let ins = [rand_t(&mut r, &[2, 3]), rand_t(&mut r, &[2, 3])];
            projected(s, &ins, &|t, v| t.sub(v[0], v[1]).unwrap())
        }),
        ("mul", |s| {
            let mut r = rng(s);
            let ins = [rand_t(&mut r, &[2, 3]), rand_t(&mut r, &[2, 3])];
            projected(s, &ins, &|t, v| t.mul(v[0], v[1]).unwrap())
        }),
        ("mul_scalar", |s| {
            let mut r = rng(s);
            let c = r.random_range(-3.0..3.0);
            let ins = [rand_t(&mut r, &[5])];
            projected(s, &ins, &|t, v| t.mul_scalar(v[0], c).unwrap())
        }),
        ("add_scalar", |s| {
            let mut r = rng(s);
            let ins = [rand_t(&mut r, &[5])];
            projected(s, &ins, &|t, v| t.add_scalar(v[0], 1.7).unwrap())
        }),
        ("concat_channels", |s| {
            let mut r = rng(s);
            let ins = [rand_t(&mut r, &[2, 2, 3, 3]), rand_t(&mut r, &[2, 3, 3, 3])];
            projected(s, &ins, &|t, v| t.concat_channels(v[0], v[1]).unwrap())
        }),
        ("reshape", |s| {
            let mut r = rng(s);
            let ins = [rand_t(&mut r, &[2, 6])];
            projected(s, &ins, &|t, v| t.reshape(v[0], &[3, 4]).unwrap())
        }),
        ("tile_batch", |s| {
            let mut r = rng(s);
            let ins = [rand_t(&mut r, &[1, 5])];
            projected(s, &ins, &|t, v| t.tile_batch(v[0], 3).unwrap())
        }),
        ("sum", |s| {
            let mut r = rng(s);
            let ins = [rand_t(&mut r, &[3, 4])];
            rel_error(&ins, &|t, v| {
                let sq = t.square(v[0]).unwrap();
                t.sum(sq).unwrap()
            })
        }),
        ("mean", |s| {
            let mut r = rng(s);
            let ins = [rand_t(&mut r, &[3, 4])];
            rel_error(&ins, &|t, v| {
                let sq = t.square(v[0]).unwrap();
                t.mean(sq).unwrap()
            })
        }),
        ("square", |s| {
            let mut r = rng(s);
            let ins = [rand_t(&mut r, &[7])];
            projected(s, &ins, &|t, v| t.square(v[0]).unwrap())
        }),
        ("mse", |s| {
            let mut r = rng(s);
            let ins = [rand_t(&mut r, &[2, 5]), rand_t(&mut r, &[2, 5])];
            rel_error(&ins, &|t, v| t.mse(v[0], v[1]).unwrap())
        }),
        ("l2_norm", |s| {
            let mut r = rng(s);
            let ins = [rand_t(&mut r, &[9])];
            rel_error(&ins, &|t, v| t.l2_norm(v[0]).unwrap())
        }),
        ("rank_loss", |s| {
            let mut r = rng(s);
            let p = rand_t(&mut r, &[6]);
            let targets: Vec<f64> = (0..6).map(|_| r.random_range(0.0..100.0)).collect();
            let norm = ranking_matrix(p.data(), &targets).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            rel_error(&[p], &|t, v| t.rank_loss(v[0], &targets, Some(norm)).unwrap())
        }),
        ("composite loss", |s| composite_case(s, 3)),
    ]
}

/// Biases start at zero, which leaves dead relu regions sitting exactly on
/// the kink; random instances draw them instead.
fn random_biases(module: &mut dyn Module, r: &mut ChaCha8Rng) {
    for p in module.params_mut() {
        if p.rank() == 1 {
            p.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.1..0.1));
        }
    }
}

/// Whole-network checks with respect to input and every parameter.
pub fn model_cases() -> Vec<Case> {
    vec![
        ("quality model", |s| {
            let mut r = rng(s);
            let mut m = QualityModel::init(s);
            random_biases(&mut m, &mut r);
            let mut ins = vec![away_from(&mut r, &[2, 3, 8, 8], 0.0, 1.0, &[], 0.0)];
            ins.extend(m.named_params().into_iter().map(|(_, t)| t.clone()));
            projected(s, &ins, &|t, v| m.forward(t, &v[1..], v[0]).unwrap())
        }),
        ("denoiser", |s| {
            let mut r = rng(s);
            let mut d = DenoiserModel::with_base(s, 2);
            random_biases(&mut d, &mut r);
            let mut ins = vec![away_from(&mut r, &[1, 3, 8, 8], -0.2, 1.2, &[], 0.0)];
            ins.extend(d.named_params().into_iter().map(|(_, t)| t.clone()));
            projected(s, &ins, &|t, v| d.forward(t, &v[1..], v[0]).unwrap())
        }),
    ]
}

/// Gradient of MSE + C_r RANK + C_t TARG with respect to every denoiser
/// parameter, with the rank normalizer held at its value at the base point.
pub fn composite_case(seed: u64, batch: usize) -> Option<f64> {
    let mut r = rng(seed);
    let mut d = DenoiserModel::with_base(seed, 2);
    let mut m = QualityModel::init(seed + 100);
    random_biases(&mut d, &mut r);
    random_biases(&mut m, &mut r);
    let clean = away_from(&mut r, &[batch, 3, 8, 8], 0.05, 0.95, &[], 0.0);
    let noise = Tensor::randn(&[batch, 3, 8, 8], 0.12, &mut r);
    let noisy = clean.zip_map(&noise, "noisy", |a, b| a + b).unwrap();
    let mos: Vec<f64> = (0..batch).map(|_| r.random_range(0.0..100.0)).collect();
    let p = m.score_batch(&d.denoise_batch(&noisy).unwrap()).unwrap();
    let norm = ranking_matrix(&p, &mos).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let params: Vec<Tensor> = d.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    let metric: &dyn DifferentiableScorer = &m;
    rel_error(&params, &|t, v| {
        composite_loss(t, &d, v, metric, &clean, &noisy, &mos, TrainMode::Composite, LossWeights::default(), Some(norm))
            .unwrap()
            .total
    })
}

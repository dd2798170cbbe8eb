//! Gradient and invariant suites, shared by the `selfcheck` CLI subcommand
//! and the acceptance tests.
//!
//! The gradient suite checks every differentiable op against central finite
//! differences on random small tensors; losses are built as weighted sums
//! so symmetric outputs cannot hide wrong gradients. The finite-difference
//! oracle lives here, independent of the tape's backward implementations.

use crate::compress::{keep_count, random_select, CompressorKind};
use crate::distill::mix_losses;
use crate::error::{Error, Result};
use crate::model::{forward, loss_sft, ForwardRequest, ModelConfig, Params, TokenSequence};
use crate::schedule::{LcdSchedule, Scheduler, TcdSchedule};
use crate::tensor::{Tape, Tensor, Var};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;

/// Central finite differences of a scalar function.
pub fn finite_diff_grad<F>(f: F, point: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut x = point.to_vec();
    for i in 0..point.len() {
        x[i] = point[i] + eps;
        let hi = f(&x)?;
        x[i] = point[i] - eps;
        let lo = f(&x)?;
        x[i] = point[i];
        grads.push((hi - lo) / (2.0 * eps));
    }
    Ok(grads)
}

fn grads_agree(analytic: &[f64], numeric: &[f64]) -> (bool, f64) {
    let mut worst = 0.0f64;
    let mut ok = true;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        worst = worst.max(diff / scale.max(1e-3));
        if diff > (REL_TOL * scale).max(ABS_TOL) {
            ok = false;
        }
    }
    (ok, worst)
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckReport {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        CheckReport { name: name.to_string(), pass, detail }
    }
}

fn rand_data(rng: &mut StdRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Check one op: `build` maps the perturbable input (registered as a param
/// leaf) to a scalar loss on the tape.
fn check_op<F>(name: &str, instances: usize, rng: &mut StdRng, mut build: F) -> CheckReport
where
    F: FnMut(&mut StdRng) -> Result<(Vec<usize>, Box<dyn Fn(&[f64]) -> Result<f64>>)>,
{
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (shape, f) = match build(rng) {
            Ok(v) => v,
            Err(e) => return CheckReport::new(name, false, format!("setup failed: {e}")),
        };
        let numel: usize = shape.iter().product();
        let point = rand_data(rng, numel);

        // analytic gradient via the tape
        let analytic = match tape_grad(f.as_ref(), &point) {
            Ok(g) => g,
            Err(e) => return CheckReport::new(name, false, format!("instance {i}: {e}")),
        };
        let numeric = match finite_diff_grad(&f, &point, FD_STEP) {
            Ok(g) => g,
            Err(e) => return CheckReport::new(name, false, format!("instance {i} fd: {e}")),
        };
        let (ok, w) = grads_agree(&analytic, &numeric);
        worst = worst.max(w);
        if !ok {
            return CheckReport::new(
                name,
                false,
                format!("instance {i}: rel err {w:.3e} exceeds {REL_TOL:e}"),
            );
        }
    }
    CheckReport::new(name, true, format!("{instances} instances, max rel err {worst:.2e}"))
}

/// Evaluate `f` and pull the gradient of its perturbable input. The closure
/// contract: called on the SAME input twice (once for value+grad via a
/// thread-local, once per FD probe) — instead we re-run the tape here.
fn tape_grad(f: &dyn Fn(&[f64]) -> Result<f64>, point: &[f64]) -> Result<Vec<f64>> {
    // The builder closures stash the gradient through this cell.
    GRAD_SLOT.with(|slot| {
        slot.borrow_mut().take();
    });
    WANT_GRAD.with(|w| w.set(true));
    let _ = f(point)?;
    WANT_GRAD.with(|w| w.set(false));
    GRAD_SLOT
        .with(|slot| slot.borrow_mut().take())
        .ok_or_else(|| Error::Config("op builder did not record a gradient".into()))
}

thread_local! {
    static GRAD_SLOT: std::cell::RefCell<Option<Vec<f64>>> = const { std::cell::RefCell::new(None) };
    static WANT_GRAD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Run a loss graph: registers `x` as the perturbable leaf, calls `graph`,
/// backwards if the caller asked for gradients, and returns the loss value.
fn run_graph<G>(x: &[f64], shape: &[usize], graph: G) -> Result<f64>
where
    G: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(&Tensor::param(shape.to_vec(), x.to_vec())?)?;
    let loss = graph(&mut tape, leaf)?;
    let value = tape.data(loss)[0];
    if WANT_GRAD.with(|w| w.get()) {
        tape.backward(loss)?;
        let g = tape
            .grad(leaf)
            .ok_or_else(|| Error::Config("no gradient on leaf".into()))?
            .to_vec();
        GRAD_SLOT.with(|slot| *slot.borrow_mut() = Some(g));
    }
    Ok(value)
}

/// Weighted sum of an arbitrary tensor so every output coordinate has a
/// distinct influence on the scalar loss.
fn weighted_sum(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights)?;
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod)?)
}

pub fn run_gradient_suite(instances: usize, seed: u64) -> Vec<CheckReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut reports = Vec::new();

    let dims = |rng: &mut StdRng| (rng.random_range(2..5), rng.random_range(2..5));

    reports.push(check_op("matmul_lhs", instances, &mut rng, |rng| {
        let (m, k) = dims(rng);
        let n = rng.random_range(2..5);
        let b = Tensor::new(vec![k, n], rand_data(rng, k * n))?;
        let w = Tensor::new(vec![m, n], rand_data(rng, m * n))?;
        Ok((vec![m, k], Box::new(move |x| {
            run_graph(x, &[m, k], |tape, leaf| {
                let bc = tape.constant(&b)?;
                let y = tape.matmul(leaf, bc)?;
                weighted_sum(tape, y, &w)
            })
        })))
    }));

    reports.push(check_op("matmul_rhs", instances, &mut rng, |rng| {
        let (m, k) = dims(rng);
        let n = rng.random_range(2..5);
        let a = Tensor::new(vec![m, k], rand_data(rng, m * k))?;
        let w = Tensor::new(vec![m, n], rand_data(rng, m * n))?;
        Ok((vec![k, n], Box::new(move |x| {
            run_graph(x, &[k, n], |tape, leaf| {
                let ac = tape.constant(&a)?;
                let y = tape.matmul(ac, leaf)?;
                weighted_sum(tape, y, &w)
            })
        })))
    }));

    reports.push(check_op("transpose", instances, &mut rng, |rng| {
        let (m, n) = dims(rng);
        let w = Tensor::new(vec![n, m], rand_data(rng, m * n))?;
        Ok((vec![m, n], Box::new(move |x| {
            run_graph(x, &[m, n], |tape, leaf| {
                let y = tape.transpose(leaf)?;
                weighted_sum(tape, y, &w)
            })
        })))
    }));

    reports.push(check_op("add_mul_scale", instances, &mut rng, |rng| {
        let (m, n) = dims(rng);
        let other = Tensor::new(vec![m, n], rand_data(rng, m * n))?;
        let w = Tensor::new(vec![m, n], rand_data(rng, m * n))?;
        let k = rng.random_range(-2.0..2.0);
        Ok((vec![m, n], Box::new(move |x| {
            run_graph(x, &[m, n], |tape, leaf| {
                let o = tape.constant(&other)?;
                let s = tape.add(leaf, o)?;
                let p = tape.mul(s, leaf)?;
                let sc = tape.scale(p, k)?;
                weighted_sum(tape, sc, &w)
            })
        })))
    }));

    reports.push(check_op("add_bias", instances, &mut rng, |rng| {
        let (m, n) = dims(rng);
        let xc = Tensor::new(vec![m, n], rand_data(rng, m * n))?;
        let w = Tensor::new(vec![m, n], rand_data(rng, m * n))?;
        Ok((vec![n], Box::new(move |b| {
            run_graph(b, &[n], |tape, leaf| {
                let x = tape.constant(&xc)?;
                let y = tape.add_bias(x, leaf)?;
                weighted_sum(tape, y, &w)
            })
        })))
    }));

    reports.push(check_op("gelu", instances, &mut rng, |rng| {
        let (m, n) = dims(rng);
        let w = Tensor::new(vec![m, n], rand_data(rng, m * n))?;
        Ok((vec![m, n], Box::new(move |x| {
            run_graph(x, &[m, n], |tape, leaf| {
                let y = tape.gelu(leaf)?;
                weighted_sum(tape, y, &w)
            })
        })))
    }));

    reports.push(check_op("layer_norm_x", instances, &mut rng, |rng| {
        let (m, n) = dims(rng);
        let gain = Tensor::new(vec![n], rand_data(rng, n))?;
        let bias = Tensor::new(vec![n], rand_data(rng, n))?;
        let w = Tensor::new(vec![m, n], rand_data(rng, m * n))?;
        Ok((vec![m, n], Box::new(move |x| {
            run_graph(x, &[m, n], |tape, leaf| {
                let g = tape.constant(&gain)?;
                let b = tape.constant(&bias)?;
                let y = tape.layer_norm(leaf, g, b, 1e-5)?;
                weighted_sum(tape, y, &w)
            })
        })))
    }));

    reports.push(check_op("layer_norm_affine", instances, &mut rng, |rng| {
        let (m, n) = dims(rng);
        let xc = Tensor::new(vec![m, n], rand_data(rng, m * n))?;
        let bias = Tensor::new(vec![n], rand_data(rng, n))?;
        let w = Tensor::new(vec![m, n], rand_data(rng, m * n))?;
        Ok((vec![n], Box::new(move |gain| {
            run_graph(gain, &[n], |tape, leaf| {
                let x = tape.constant(&xc)?;
                let b = tape.constant(&bias)?;
                let y = tape.layer_norm(x, leaf, b, 1e-5)?;
                weighted_sum(tape, y, &w)
            })
        })))
    }));

    reports.push(check_op("softmax", instances, &mut rng, |rng| {
        let (m, n) = dims(rng);
        let tau = rng.random_range(0.5..3.0);
        let w = Tensor::new(vec![m, n], rand_data(rng, m * n))?;
        Ok((vec![m, n], Box::new(move |x| {
            run_graph(x, &[m, n], |tape, leaf| {
                let y = tape.softmax(leaf, tau)?;
                weighted_sum(tape, y, &w)
            })
        })))
    }));

    reports.push(check_op("cross_entropy", instances, &mut rng, |rng| {
        let t = rng.random_range(2..5);
        let v = rng.random_range(3..8);
        let targets: Vec<usize> = (0..t).map(|_| rng.random_range(0..v)).collect();
        let mut mask: Vec<bool> = (0..t).map(|_| rng.random_bool(0.7)).collect();
        if mask.iter().all(|&m| !m) {
            mask[0] = true;
        }
        Ok((vec![t, v], Box::new(move |x| {
            run_graph(x, &[t, v], |tape, leaf| Ok(tape.cross_entropy(leaf, &targets, &mask)?))
        })))
    }));

    reports.push(check_op("kl_div_student", instances, &mut rng, |rng| {
        let (m, n) = dims(rng);
        let tea = Tensor::new(vec![m, n], rand_data(rng, m * n))?;
        Ok((vec![m, n], Box::new(move |x| {
            run_graph(x, &[m, n], |tape, leaf| {
                let t = tape.constant(&tea)?;
                let p = tape.softmax(t, 1.0)?;
                let q = tape.softmax(leaf, 1.0)?;
                Ok(tape.kl_div(p, q)?)
            })
        })))
    }));

    reports.push(check_op("kl_div_teacher", instances, &mut rng, |rng| {
        let (m, n) = dims(rng);
        let stu = Tensor::new(vec![m, n], rand_data(rng, m * n))?;
        Ok((vec![m, n], Box::new(move |x| {
            run_graph(x, &[m, n], |tape, leaf| {
                let s = tape.constant(&stu)?;
                let p = tape.softmax(leaf, 1.0)?;
                let q = tape.softmax(s, 1.0)?;
                Ok(tape.kl_div(p, q)?)
            })
        })))
    }));

    reports.push(check_op("embedding_lookup", instances, &mut rng, |rng| {
        let v = rng.random_range(3..7);
        let d = rng.random_range(2..5);
        let t = rng.random_range(2..6);
        let indices: Vec<usize> = (0..t).map(|_| rng.random_range(0..v)).collect();
        let w = Tensor::new(vec![t, d], rand_data(rng, t * d))?;
        Ok((vec![v, d], Box::new(move |x| {
            run_graph(x, &[v, d], |tape, leaf| {
                let y = tape.embedding_lookup(leaf, &indices)?;
                weighted_sum(tape, y, &w)
            })
        })))
    }));

    reports.push(check_op("select_slice_concat", instances, &mut rng, |rng| {
        let (m, n) = (rng.random_range(3..6), rng.random_range(4..7));
        let rows: Vec<usize> = (0..rng.random_range(2..4)).map(|_| rng.random_range(0..m)).collect();
        let keep = rng.random_range(2..n);
        let w = Tensor::new(vec![rows.len() * 2, keep], rand_data(rng, rows.len() * 2 * keep))?;
        Ok((vec![m, n], Box::new(move |x| {
            run_graph(x, &[m, n], |tape, leaf| {
                let sel = tape.select_rows(leaf, &rows)?;
                let sl = tape.slice_cols(sel, 0, keep)?;
                let cat = tape.concat_rows(&[sl, sl])?;
                weighted_sum(tape, cat, &w)
            })
        })))
    }));

    reports.push(check_op("concat_cols", instances, &mut rng, |rng| {
        let (m, n) = dims(rng);
        let other = Tensor::new(vec![m, n], rand_data(rng, m * n))?;
        let w = Tensor::new(vec![m, 2 * n], rand_data(rng, 2 * m * n))?;
        Ok((vec![m, n], Box::new(move |x| {
            run_graph(x, &[m, n], |tape, leaf| {
                let o = tape.constant(&other)?;
                let cat = tape.concat_cols(&[leaf, o])?;
                weighted_sum(tape, cat, &w)
            })
        })))
    }));

    reports.push(model_end_to_end_check(&mut rng));
    reports
}

/// Sampled-coordinate finite-difference check through the full model:
/// embeddings, attention, compression gather, layer norm, head and the
/// supervised loss.
fn model_end_to_end_check(rng: &mut StdRng) -> CheckReport {
    let name = "model_end_to_end";
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        ffn_dim: 16,
        vocab_size: 9,
        n_visual_tokens: 5,
        d_visual: 3,
        max_seq_len: 10,
    };
    let mut init_rng = StdRng::seed_from_u64(rng.random());
    let params = match Params::init(&cfg, &mut init_rng) {
        Ok(p) => p,
        Err(e) => return CheckReport::new(name, false, e.to_string()),
    };
    let features = match Tensor::new(vec![5, 3], rand_data(rng, 15)) {
        Ok(f) => f,
        Err(e) => return CheckReport::new(name, false, e.to_string()),
    };
    let seq = match TokenSequence::new(features, vec![1, 2, 3, 4], 5 + 3..5 + 4) {
        Ok(s) => s,
        Err(e) => return CheckReport::new(name, false, e.to_string()),
    };

    let loss_with = |params: &Params| -> Result<(f64, Option<Params>)> {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true)?;
        let mut frng = StdRng::seed_from_u64(31);
        let req = ForwardRequest::compressed(CompressorKind::Random, 0.4, 2)?;
        let out = forward(&cfg, &mut tape, &vars, &seq, &req, &mut frng)?;
        let loss = loss_sft(&mut tape, &out, &seq)?;
        let v = tape.data(loss)[0];
        tape.backward(loss)?;
        let mut snap = params.clone();
        snap.zero_grad();
        snap.accumulate_from(&tape, &vars);
        Ok((v, Some(snap)))
    };

    let (_, with_grads) = match loss_with(&params) {
        Ok(v) => v,
        Err(e) => return CheckReport::new(name, false, e.to_string()),
    };
    let with_grads = with_grads.unwrap();

    // probe 24 random coordinates across all tensors
    let named: Vec<(String, usize)> = params
        .named()
        .iter()
        .map(|(n, t)| (n.clone(), t.numel()))
        .collect();
    let mut worst = 0.0f64;
    for _ in 0..24 {
        let (tname, numel) = &named[rng.random_range(0..named.len())];
        let idx = rng.random_range(0..*numel);
        let probe = |delta: f64, base: &Params| -> Result<f64> {
            let mut p = base.clone();
            let names: Vec<String> = base.named().iter().map(|(n, _)| n.clone()).collect();
            for (t, n) in p.tensors_mut().into_iter().zip(names) {
                if &n == tname {
                    t.data[idx] += delta;
                }
            }
            let mut tape = Tape::new();
            let vars = p.register(&mut tape, false)?;
            let mut frng = StdRng::seed_from_u64(31);
            let req = ForwardRequest::compressed(CompressorKind::Random, 0.4, 2)?;
            let out = forward(&cfg, &mut tape, &vars, &seq, &req, &mut frng)?;
            let loss = loss_sft(&mut tape, &out, &seq)?;
            Ok(tape.data(loss)[0])
        };
        let hi = match probe(FD_STEP, &params) {
            Ok(v) => v,
            Err(e) => return CheckReport::new(name, false, e.to_string()),
        };
        let lo = match probe(-FD_STEP, &params) {
            Ok(v) => v,
            Err(e) => return CheckReport::new(name, false, e.to_string()),
        };
        let numeric = (hi - lo) / (2.0 * FD_STEP);
        let analytic = with_grads
            .named()
            .iter()
            .find(|(n, _)| n == tname)
            .and_then(|(_, t)| t.grad.as_ref().map(|g| g[idx]))
            .unwrap_or(f64::NAN);
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        worst = worst.max(diff / scale.max(1e-3));
        if diff > (REL_TOL * scale).max(1e-6) {
            return CheckReport::new(
                name,
                false,
                format!("{tname}[{idx}]: analytic {analytic} vs fd {numeric}"),
            );
        }
    }
    CheckReport::new(name, true, format!("24 sampled coordinates, max rel err {worst:.2e}"))
}

/// Fast invariant checks mirroring the property-test suite.
pub fn run_invariant_suite(seed: u64) -> Vec<CheckReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut reports = Vec::new();

    // softmax normalization + KL nonnegativity and zero-iff-equal
    {
        let mut tape = Tape::new();
        let mut ok = true;
        let mut detail = String::new();
        for i in 0..500 {
            let n = rng.random_range(2..10);
            let a = Tensor::new(vec![n], rand_data(&mut rng, n)).unwrap();
            let b = Tensor::new(vec![n], rand_data(&mut rng, n)).unwrap();
            let av = tape.constant(&a).unwrap();
            let bv = tape.constant(&b).unwrap();
            let p = tape.softmax(av, 1.0).unwrap();
            let q = tape.softmax(bv, 1.0).unwrap();
            let sum: f64 = tape.data(p).iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                ok = false;
                detail = format!("case {i}: softmax sum {sum}");
                break;
            }
            let kl = tape.kl_div(p, q).unwrap();
            let kl_same = tape.kl_div(p, p).unwrap();
            if tape.data(kl)[0] < 0.0 || tape.data(kl_same)[0] != 0.0 {
                ok = false;
                detail = format!("case {i}: kl {} / self {}", tape.data(kl)[0], tape.data(kl_same)[0]);
                break;
            }
        }
        reports.push(CheckReport::new("kl_softmax_invariants", ok, if ok { "500 cases".into() } else { detail }));
    }

    // compression count/order/determinism
    {
        let mut ok = true;
        let mut detail = String::new();
        for i in 0..500 {
            let n = rng.random_range(1..300);
            let r = rng.random_range(0..=100) as f64 / 100.0;
            let seed2 = rng.random();
            let a = random_select(n, r, &mut StdRng::seed_from_u64(seed2));
            let b = random_select(n, r, &mut StdRng::seed_from_u64(seed2));
            if a != b || a.kept() != keep_count(n, r) || !a.kept_indices.windows(2).all(|w| w[0] < w[1]) {
                ok = false;
                detail = format!("case {i}: n={n} r={r}");
                break;
            }
        }
        reports.push(CheckReport::new("compression_contracts", ok, if ok { "500 cases".into() } else { detail }));
    }

    // schedule monotonicity and state invariant
    {
        let tcd = TcdSchedule { total_steps: 400, ..Default::default() };
        let lcd = LcdSchedule::defaults(400, 8);
        let mut ok = true;
        let mut detail = String::new();
        let mut prev_max = f64::NEG_INFINITY;
        let mut prev_layer = usize::MAX;
        for t in 0..=400 {
            let (lo, hi) = tcd.window(t);
            if hi < prev_max - 1e-12 || lo > hi + 1e-12 {
                ok = false;
                detail = format!("tcd window at t={t}");
                break;
            }
            prev_max = hi;
            let l = lcd.layer(t).unwrap();
            if l > prev_layer {
                ok = false;
                detail = format!("lcd layer rose at t={t}");
                break;
            }
            prev_layer = l;
            for s in [Scheduler::Tcd(tcd.clone()), Scheduler::Lcd(lcd.clone())] {
                let st = s.sample(t, &mut rng).unwrap();
                if (st.r_tea - (st.r_stu - st.gap).max(0.0)).abs() > 1e-15 {
                    ok = false;
                    detail = format!("state invariant at t={t}");
                    break;
                }
            }
            if !ok {
                break;
            }
        }
        reports.push(CheckReport::new("schedule_invariants", ok, if ok { "t grid 0..=400".into() } else { detail }));
    }

    // loss mixing identity
    {
        let mut ok = true;
        for _ in 0..500 {
            let lambda = rng.random_range(0.0..=1.0);
            let sft = rng.random_range(0.0..5.0);
            let kd = rng.random_range(0.0..5.0);
            let total = mix_losses(lambda, sft, kd);
            if (total - ((1.0 - lambda) * sft + lambda * kd)).abs() > 1e-9 {
                ok = false;
                break;
            }
        }
        reports.push(CheckReport::new("loss_mixing_identity", ok, "500 cases".into()));
    }

    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes() {
        for r in run_gradient_suite(5, 99) {
            assert!(r.pass, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn invariant_suite_passes() {
        for r in run_invariant_suite(7) {
            assert!(r.pass, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn finite_diff_matches_analytic_on_polynomial() {
        let f = |v: &[f64]| Ok(v[0] * v[0] + 2.0 * v[0] * v[1] + v[1] * v[1] * v[1]);
        let g = finite_diff_grad(f, &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        assert!((g[1] - 14.0).abs() < 1e-6);
    }
}

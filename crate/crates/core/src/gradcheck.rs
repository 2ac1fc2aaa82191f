//! Central finite-difference checks of tape gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotation::{Annotation, Keypoint};
use crate::backbone::FeaturePyramid;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::grm::{ChannelAttention, Grm, SeBlock, SpatialAttention};
use crate::heads::Heads;
use crate::loss::{encode_targets, stack_targets, total_loss, LossWeights, DEFAULT_SIGMA};
use crate::mfa::Mfa;
use crate::model::PoseNet;
use crate::nn::{Builder, Ctx};
use crate::param::ParamStore;
use crate::tape::{InstanceCells, Mode, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / f64::max(1e-8, libm::fabs(analytic) + libm::fabs(numeric))
}

fn scalar_of(tape: &Tape, out: Var) -> Result<f64> {
    let t = tape.value(out);
    if t.numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: t.shape().to_vec(),
        });
    }
    Ok(t.data()[0])
}

/// Compares the tape gradient of a scalar function `f` at `x` against
/// central differences and returns the worst relative error over all
/// entries of `x`.
///
/// `f` is evaluated twice at `x` first; differing results are reported as
/// [`Error::NonDeterministic`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_reading(f, x, eps, &ParamStore::new())
}

/// [`grad_check`] for a function that also reads parameters of `store`;
/// their gradients are discarded.
pub fn grad_check_reading<F>(f: F, x: &Tensor, eps: f64, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::inference();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };
    if eval(x)?.to_bits() != eval(x)?.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut tape = Tape::new();
    let input = tape.leaf(x.detached().with_grad());
    let out = f(&mut tape, input)?;
    scalar_of(&tape, out)?;
    let mut scratch = store.clone();
    let grads = tape.backward(out, &mut scratch)?;
    let zeros = alloc::vec![0.0; x.numel()];
    let analytic = grads.get(input).unwrap_or(&zeros);

    let mut worst: f64 = 0.0;
    let mut probe = x.detached();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Worst relative error for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Checks the gradient of `f` with respect to every parameter in `store`.
///
/// With `max_entries = Some(n)` at most `n` evenly spaced entries of each
/// parameter are probed; otherwise every entry is. The store's gradients
/// are zeroed before and after.
pub fn grad_check_params<F>(
    f: F,
    store: &mut ParamStore,
    eps: f64,
    max_entries: Option<usize>,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::inference();
        let out = f(&mut tape, s)?;
        scalar_of(&tape, out)
    };
    if eval(store)?.to_bits() != eval(store)?.to_bits() {
        return Err(Error::NonDeterministic);
    }
    store.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    scalar_of(&tape, out)?;
    tape.backward(out, store)?;
    let analytic: Vec<Vec<f64>> = store.params().iter().map(|p| p.grad().to_vec()).collect();
    store.zero_grad();

    let mut report = Vec::with_capacity(store.len());
    for (pi, grads) in analytic.iter().enumerate() {
        let n = grads.len();
        let picks: Vec<usize> = match max_entries {
            Some(m) if m < n => (0..m).map(|j| j * n / m + (n / m) / 2).collect(),
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for &i in &picks {
            let orig = store.params()[pi].tensor.data()[i];
            store.params_mut()[pi].tensor.data_mut()[i] = orig + eps;
            let plus = eval(store)?;
            store.params_mut()[pi].tensor.data_mut()[i] = orig - eps;
            let minus = eval(store)?;
            store.params_mut()[pi].tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(grads[i], numeric));
        }
        report.push(ParamCheck {
            name: store.params()[pi].name.clone(),
            checked: picks.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

/// Moves entries closer than `margin` to zero out to `±margin`, keeping
/// finite-difference probes away from the ReLU kink.
pub fn nudge_from_zero(t: &mut Tensor, margin: f64) {
    for v in t.data_mut() {
        if libm::fabs(*v) < margin {
            *v = if *v < 0.0 { -margin } else { margin };
        }
    }
}

/// Primitive ops are held to a tighter bound than composite modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    Primitive,
    Module,
}

impl CheckKind {
    pub fn tolerance(self) -> f64 {
        match self {
            CheckKind::Primitive => 1e-4,
            CheckKind::Module => 1e-3,
        }
    }
}

/// Outcome of one named gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub kind: CheckKind,
    pub max_rel_error: f64,
    /// The input or parameter with the largest error.
    pub worst: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.kind.tolerance()
    }
}

/// Fixed, non-symmetric weights used to reduce an output to a scalar.
fn probe_weights(shape: &[usize]) -> Tensor {
    let n = crate::tensor::numel(shape);
    let data = (0..n).map(|i| libm::sin(1.3 * i as f64 + 0.7) + 0.1).collect();
    Tensor::new(shape, data).expect("sized above")
}

/// `sum(y * w)` for the fixed probe weights `w`.
pub fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let w = probe_weights(tape.shape(y));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

/// Finite-difference checks of every differentiable tape op, each with
/// respect to each of its inputs, on `N(0, 1)` inputs.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let eps = DEFAULT_EPS;
    let mut push = |name: &str, err: f64| {
        out.push(CheckResult {
            name: String::from(name),
            kind: CheckKind::Primitive,
            max_rel_error: err,
            worst: String::from("input"),
        })
    };

    let x = normal(&[2, 4, 5, 5], &mut rng);
    let w = normal(&[3, 4, 3, 3], &mut rng);
    let b = normal(&[3], &mut rng);
    for (stride, tag) in [(1, "conv2d"), (2, "conv2d_stride2")] {
        let (wc, bc) = (w.clone(), b.clone());
        push(
            &format!("{tag}/input"),
            grad_check(
                |t, v| {
                    let (w, b) = (t.constant(wc.clone()), t.constant(bc.clone()));
                    let y = t.conv2d(v, w, Some(b), stride, 1)?;
                    project(t, y)
                },
                &x,
                eps,
            )?,
        );
        let (xc, bc) = (x.clone(), b.clone());
        push(
            &format!("{tag}/weight"),
            grad_check(
                |t, v| {
                    let (x, b) = (t.constant(xc.clone()), t.constant(bc.clone()));
                    let y = t.conv2d(x, v, Some(b), stride, 1)?;
                    project(t, y)
                },
                &w,
                eps,
            )?,
        );
        let (xc, wc) = (x.clone(), w.clone());
        push(
            &format!("{tag}/bias"),
            grad_check(
                |t, v| {
                    let (x, w) = (t.constant(xc.clone()), t.constant(wc.clone()));
                    let y = t.conv2d(x, w, Some(v), stride, 1)?;
                    project(t, y)
                },
                &b,
                eps,
            )?,
        );
    }

    let mut r = normal(&[2, 3, 4, 4], &mut rng);
    nudge_from_zero(&mut r, 1e-3);
    push(
        "relu",
        grad_check(
            |t, v| {
                let y = t.relu(v);
                project(t, y)
            },
            &r,
            eps,
        )?,
    );
    let x = normal(&[2, 3, 4, 4], &mut rng);
    push(
        "sigmoid",
        grad_check(
            |t, v| {
                let y = t.sigmoid(v);
                project(t, y)
            },
            &x,
            eps,
        )?,
    );
    for axis in 0..3 {
        let x = normal(&[2, 3, 4], &mut rng);
        push(
            &format!("softmax/axis{axis}"),
            grad_check(
                |t, v| {
                    let y = t.softmax(v, axis)?;
                    project(t, y)
                },
                &x,
                eps,
            )?,
        );
    }
    let x = normal(&[2, 3, 4, 5], &mut rng);
    push(
        "global_avg_pool",
        grad_check(
            |t, v| {
                let y = t.global_avg_pool(v)?;
                project(t, y)
            },
            &x,
            eps,
        )?,
    );
    let x = normal(&[1, 2, 3, 3], &mut rng);
    push(
        "upsample_nearest",
        grad_check(
            |t, v| {
                let y = t.upsample_nearest(v, 2)?;
                project(t, y)
            },
            &x,
            eps,
        )?,
    );
    push(
        "resize_bilinear",
        grad_check(
            |t, v| {
                let y = t.resize_bilinear(v, 6, 7)?;
                project(t, y)
            },
            &x,
            eps,
        )?,
    );
    let a = normal(&[2, 3, 4], &mut rng);
    let bm = normal(&[2, 4, 5], &mut rng);
    let bc = bm.clone();
    push(
        "matmul/left",
        grad_check(
            |t, v| {
                let b = t.constant(bc.clone());
                let y = t.matmul(v, b)?;
                project(t, y)
            },
            &a,
            eps,
        )?,
    );
    let ac = a.clone();
    push(
        "matmul/right",
        grad_check(
            |t, v| {
                let a = t.constant(ac.clone());
                let y = t.matmul(a, v)?;
                project(t, y)
            },
            &bm,
            eps,
        )?,
    );
    let x = normal(&[2, 3, 2, 2], &mut rng);
    let other = normal(&[2, 2, 2, 2], &mut rng);
    push(
        "concat_channels",
        grad_check(
            |t, v| {
                let o = t.constant(other.clone());
                let y = t.concat_channels(&[o, v, o])?;
                project(t, y)
            },
            &x,
            eps,
        )?,
    );
    push(
        "slice_channels",
        grad_check(
            |t, v| {
                let y = t.slice_channels(v, 1, 2)?;
                project(t, y)
            },
            &x,
            eps,
        )?,
    );
    let full = normal(&[2, 3, 2, 2], &mut rng);
    let per_channel = normal(&[2, 3, 1, 1], &mut rng);
    let per_pixel = normal(&[2, 1, 2, 2], &mut rng);
    for (name, small) in [("channel", &per_channel), ("spatial", &per_pixel)] {
        let f = full.clone();
        push(
            &format!("add_broadcast/{name}"),
            grad_check(
                |t, v| {
                    let x = t.constant(f.clone());
                    let y = t.add(v, x)?;
                    project(t, y)
                },
                small,
                eps,
            )?,
        );
        let f = full.clone();
        push(
            &format!("mul_broadcast/{name}"),
            grad_check(
                |t, v| {
                    let x = t.constant(f.clone());
                    let y = t.mul(v, x)?;
                    project(t, y)
                },
                small,
                eps,
            )?,
        );
        let sc = (*small).clone();
        push(
            &format!("mul_broadcast/{name}_full_side"),
            grad_check(
                |t, v| {
                    let s = t.constant(sc.clone());
                    let y = t.mul(s, v)?;
                    project(t, y)
                },
                &full,
                eps,
            )?,
        );
    }
    push(
        "scale",
        grad_check(
            |t, v| {
                let y = t.scale(v, -1.7);
                project(t, y)
            },
            &full,
            eps,
        )?,
    );
    push(
        "reshape",
        grad_check(
            |t, v| {
                let y = t.reshape(v, &[2, 12])?;
                project(t, y)
            },
            &full,
            eps,
        )?,
    );
    push(
        "mean",
        grad_check(
            |t, v| {
                let y = t.mul(v, v)?;
                Ok(t.mean(y))
            },
            &full,
            eps,
        )?,
    );
    let v3 = normal(&[3], &mut rng);
    push(
        "index",
        grad_check(
            |t, v| {
                let a = t.index(v, 2)?;
                let b = t.index(v, 0)?;
                let y = t.mul(a, b)?;
                Ok(t.sum(y))
            },
            &v3,
            eps,
        )?,
    );
    let target = normal(&[2, 3, 2, 2], &mut rng);
    push(
        "mse",
        grad_check(|t, v| t.mse(v, &target), &full, eps)?,
    );

    let x = normal(&[3, 2, 3, 3], &mut rng);
    let gamma = normal(&[2], &mut rng);
    let beta = normal(&[2], &mut rng);
    let bn = |t: &mut Tape, x: Var, g: Var, b: Var| -> Result<Var> {
        let (mut m, mut v) = ([0.0; 2], [1.0; 2]);
        let y = t.batch_norm(x, g, b, &mut m, &mut v, Mode::Train)?;
        project(t, y)
    };
    let (gc, bc) = (gamma.clone(), beta.clone());
    push(
        "batch_norm/input",
        grad_check(
            |t, v| {
                let (g, b) = (t.constant(gc.clone()), t.constant(bc.clone()));
                bn(t, v, g, b)
            },
            &x,
            eps,
        )?,
    );
    let (xc, bc) = (x.clone(), beta.clone());
    push(
        "batch_norm/gamma",
        grad_check(
            |t, v| {
                let (x, b) = (t.constant(xc.clone()), t.constant(bc.clone()));
                bn(t, x, v, b)
            },
            &gamma,
            eps,
        )?,
    );
    let (xc, gc) = (x.clone(), gamma.clone());
    push(
        "batch_norm/beta",
        grad_check(
            |t, v| {
                let (x, g) = (t.constant(xc.clone()), t.constant(gc.clone()));
                bn(t, x, g, v)
            },
            &beta,
            eps,
        )?,
    );
    let xc = x.clone();
    push(
        "batch_norm/eval",
        grad_check(
            |t, v| {
                let (g, b) = (t.constant(gamma.clone()), t.constant(beta.clone()));
                let (mut m, mut var) = ([0.3, -0.2], [1.5, 0.7]);
                let y = t.batch_norm(v, g, b, &mut m, &mut var, Mode::Eval)?;
                project(t, y)
            },
            &xc,
            eps,
        )?,
    );

    let tags = normal(&[2, 6, 3, 3], &mut rng);
    let instances: Vec<Vec<InstanceCells>> = vec![
        vec![vec![(0, 0), (1, 4), (2, 8)], vec![(0, 2), (2, 6)]],
        vec![vec![(1, 1), (2, 3)], vec![(0, 7)], vec![(1, 5), (0, 5)]],
    ];
    for (i, name) in [(0, "assoc_embed_loss/pull"), (1, "assoc_embed_loss/push")] {
        push(
            name,
            grad_check(
                |t, v| {
                    let both = t.assoc_embed_loss(v, 2, &instances, 1.0)?;
                    t.index(both, i)
                },
                &tags,
                eps,
            )?,
        );
    }
    Ok(out)
}

fn module_result(name: &str, input_err: f64, params: &[ParamCheck]) -> CheckResult {
    let mut worst = (input_err, String::from("input"));
    for p in params {
        if p.max_rel_error > worst.0 {
            worst = (p.max_rel_error, p.name.clone());
        }
    }
    CheckResult {
        name: String::from(name),
        kind: CheckKind::Module,
        max_rel_error: worst.0,
        worst: worst.1,
    }
}

/// Checks a module with respect to its input and every parameter.
fn check_module<F>(
    name: &str,
    store: &mut ParamStore,
    x: &Tensor,
    fault: Option<f64>,
    f: F,
) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &ParamStore, Var) -> Result<Var>,
{
    let f = |t: &mut Tape, s: &ParamStore, v: Var| {
        arm(t, fault);
        f(t, s, v)
    };
    let frozen = store.clone();
    let input = grad_check_reading(|t, v| f(t, &frozen, v), x, DEFAULT_EPS, &frozen)?;
    let params = grad_check_params(
        |t, s| {
            let v = t.constant(x.clone());
            f(t, s, v)
        },
        store,
        DEFAULT_EPS,
        None,
    )?;
    Ok(module_result(name, input, &params))
}

fn arm(t: &mut Tape, fault: Option<f64>) {
    if let Some(factor) = fault {
        t.inject_conv_weight_fault(factor);
    }
}

/// Whole-module checks: recalibration block, both attention branches,
/// relation module, dense step block, heads, and the full network loss.
///
/// `fault` scales every convolution weight gradient by the given factor,
/// for exercising the failure path.
pub fn module_checks(seed: u64, fault: Option<f64>) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let c = 4;
    let mut store = ParamStore::new();
    let (se, ch, sp, grm) = {
        let mut b = Builder::new(&mut store, &mut rng);
        (
            SeBlock::new(&mut b, "se", c),
            ChannelAttention::new(&mut b, "ch", c),
            SpatialAttention::new(&mut b, "sp", c),
            Grm::new(&mut b, "grm", c)?,
        )
    };
    let x = normal(&[1, c, 4, 4], &mut rng);
    out.push(check_module("se_block", &mut store, &x, fault, |t, s, v| {
        let mut cx = Ctx::new(t, s, Mode::Train);
        let y = se.forward(&mut cx, v)?;
        project(t, y)
    })?);
    out.push(check_module("channel_attention", &mut store, &x, fault, |t, s, v| {
        let mut cx = Ctx::new(t, s, Mode::Train);
        let a = ch.forward(&mut cx, v)?;
        project(t, a.map)
    })?);
    out.push(check_module("spatial_attention", &mut store, &x, fault, |t, s, v| {
        let mut cx = Ctx::new(t, s, Mode::Train);
        let a = sp.forward(&mut cx, v)?;
        project(t, a.map)
    })?);
    // the three levels stacked along channels
    let pyramid = normal(&[1, 3 * c, 4, 4], &mut rng);
    out.push(check_module("grm", &mut store, &pyramid, fault, |t, s, v| {
        let p1 = t.slice_channels(v, 0, c)?;
        let p2 = t.slice_channels(v, c, c)?;
        let p3 = t.slice_channels(v, 2 * c, c)?;
        let mut cx = Ctx::new(t, s, Mode::Train);
        let y = grm.forward(&mut cx, &FeaturePyramid { p1, p2, p3 })?;
        project(t, y)
    })?);

    let c = 8;
    let mut store = ParamStore::new();
    let (mfa, heads) = {
        let mut b = Builder::new(&mut store, &mut rng);
        (Mfa::new(&mut b, "mfa", c)?, Heads::new(&mut b, "head", c, 3, 2))
    };
    let x = normal(&[2, c, 4, 4], &mut rng);
    out.push(check_module("mfa", &mut store, &x, fault, |t, s, v| {
        let mut cx = Ctx::new(t, s, Mode::Train);
        let y = mfa.forward(&mut cx, v)?;
        project(t, y)
    })?);
    out.push(check_module("heads", &mut store, &x, fault, |t, s, v| {
        let mut cx = Ctx::new(t, s, Mode::Train);
        let h = heads.forward(&mut cx, v)?;
        let a = project(t, h.heatmaps)?;
        let b = project(t, h.tags)?;
        t.add(a, b)
    })?);

    out.push(network_loss_check(seed, DEFAULT_EPS, fault)?);
    Ok(out)
}

/// Full loss of a small network with relation module and dense step block
/// on a `[1, 3, 32, 32]` image holding two people. Parameters are sampled
/// sparsely.
pub fn network_loss_check(seed: u64, eps: f64, fault: Option<f64>) -> Result<CheckResult> {
    let config = ModelConfig {
        base_width: 8,
        keypoints: 5,
        input_width: 32,
        input_height: 32,
        ..ModelConfig::default()
    };
    let mut model = PoseNet::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let image = Tensor::new(
        &[1, 3, 32, 32],
        (0..3 * 32 * 32).map(|_| rng.random::<f64>()).collect(),
    )?;
    let person = |dx: f64| {
        let pts = [(8.0, 5.0), (13.0, 12.0), (3.0, 12.0), (11.0, 27.0), (5.0, 27.0)];
        Annotation::from_keypoints(pts.iter().map(|&(x, y)| Keypoint::new(x + dx, y, 2)).collect(), 1.0)
    };
    let anns = [person(0.0), person(15.0)];
    let enc = encode_targets(&anns, 5, (8, 8), 4, DEFAULT_SIGMA);
    let (targets, instances) = stack_targets(&[enc])?;
    let loss = |t: &mut Tape, s: &ParamStore, v: Var| -> Result<Var> {
        arm(t, fault);
        let o = model.forward_with(s, t, v, Mode::Train)?;
        Ok(total_loss(t, &o.heads, &targets, &instances, 1, LossWeights::default())?.total)
    };
    let frozen = model.store.clone();
    let input = grad_check_reading(|t, v| loss(t, &frozen, v), &image, eps, &frozen)?;
    let mut store = model.store.clone();
    let params = grad_check_params(
        |t, s| {
            let v = t.constant(image.clone());
            loss(t, s, v)
        },
        &mut store,
        eps,
        Some(4),
    )?;
    model.store = store;
    Ok(module_result("network_loss", input, &params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_scalar_output_rejected() {
        let x = Tensor::ones(&[3]);
        let err = grad_check(|_, v| Ok(v), &x, DEFAULT_EPS).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn nondeterminism_detected() {
        use core::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let x = Tensor::ones(&[2]);
        let err = grad_check(
            |t, v| {
                let k = calls.fetch_add(1, Ordering::SeqCst) as f64;
                let s = t.sum(v);
                Ok(t.scale(s, 1.0 + k))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap_err();
        assert_eq!(err, Error::NonDeterministic);
    }

    #[test]
    fn relu_kink_avoided_by_nudging() {
        let mut x = Tensor::new(&[3], vec![0.0, -1e-9, 0.5]).unwrap();
        nudge_from_zero(&mut x, 1e-3);
        assert_eq!(x.data(), &[1e-3, -1e-3, 0.5]);
        let err = grad_check(
            |t, v| {
                let r = t.relu(v);
                Ok(t.sum(r))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-9);
    }
}

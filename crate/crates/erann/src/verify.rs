//! Gradient verification: central-difference checks for every operator and
//! for the full W=1 network, shared by the `gradcheck` command and the
//! acceptance suite.

use crate::augment::RngStream;
use crate::error::{Error, Result};
use crate::graph::{grad_check, rel_err, BnMode, GradCheckReport, Graph, NodeId, GRADCHECK_FLOOR};
use crate::model::{forward_graph, init_params, ErannConfig, Head};
use crate::tensor::{Elem, Tensor};

/// Maximum relative error allowed in float64.
pub const F64_TOL: f64 = 1e-5;
/// Maximum relative error allowed in float32.
pub const F32_TOL: f64 = 1e-2;
/// Finite-difference step for the operator-level checks, which run on
/// small tensors where a wide stencil is safe and the loss is smooth.
pub const FD_EPS: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub checks: usize,
}

fn rand_tensor<E: Elem>(shape: &[usize], rng: &mut RngStream, scale: f64) -> Tensor<E> {
    let mut t = Tensor::zeros(shape);
    for v in &mut t.data {
        *v = E::from_f64(rng.uniform(-scale, scale));
    }
    t
}

/// Reduce any node to a scalar through a fixed-target BCE head so every
/// output element receives a nontrivial upstream gradient.
fn reduce<E: Elem>(g: &mut Graph<E>, y: NodeId) -> NodeId {
    let flat = g.value(y).numel();
    let yr = g.reshape(y, &[1, flat]).expect("flatten");
    let t = Tensor::full(&[1, flat], E::from_f64(0.3));
    g.sigmoid_bce_loss(yr, t).expect("reduce loss")
}

type Builder<E> = fn(&mut Graph<E>, &[NodeId]) -> NodeId;

fn check_one<E: Elem>(
    name: &'static str,
    build: Builder<E>,
    shapes: &[&[usize]],
    coords: usize,
    rng: &mut RngStream,
) -> Result<OpCheck> {
    let params: Vec<Tensor<E>> = shapes.iter().map(|s| rand_tensor(s, rng, 1.0)).collect();
    let names: Vec<String> = (0..params.len()).map(|i| format!("{name}.in{i}")).collect();
    let mut loss = |ps: &[Tensor<E>]| -> Result<f64> {
        let mut g = Graph::<E>::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.input(p.clone(), true)).collect();
        let out = build(&mut g, &ids);
        Ok(g.value(out).data[0].to_f64())
    };
    let mut grads = |ps: &[Tensor<E>]| -> Result<Vec<Tensor<E>>> {
        let mut g = Graph::<E>::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.input(p.clone(), true)).collect();
        let out = build(&mut g, &ids);
        g.backward(out)?;
        Ok(ids
            .iter()
            .zip(ps)
            .map(|(&id, p)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect())
    };
    let report =
        grad_check(&params, &names, &mut loss, &mut grads, FD_EPS, coords, GRADCHECK_FLOOR, rng)?;
    Ok(OpCheck { name, max_rel_err: report.max_rel_err, checks: report.checks })
}

/// Check every operator's adjoint against central differences in the given
/// precision. Returns one entry per operator; the caller applies the
/// tolerance.
pub fn op_gradchecks<E: Elem>(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = RngStream::substream(seed, 0x6C);
    let coords = 16;
    let mut out = Vec::new();

    out.push(check_one::<E>(
        "conv2d",
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], (1, 1), (1, 1)).unwrap();
            reduce(g, y)
        },
        &[&[2, 3, 6, 7], &[4, 3, 3, 3]],
        coords,
        &mut rng,
    )?);
    out.push(check_one::<E>(
        "conv2d-strided",
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], (2, 4), (2, 2)).unwrap();
            reduce(g, y)
        },
        &[&[2, 2, 9, 12], &[3, 2, 6, 5]],
        coords,
        &mut rng,
    )?);
    out.push(check_one::<E>(
        "conv2d-projection",
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], (2, 2), (0, 0)).unwrap();
            reduce(g, y)
        },
        &[&[2, 3, 8, 8], &[5, 3, 1, 1]],
        coords,
        &mut rng,
    )?);
    out.push(check_one::<E>(
        "batchnorm-train",
        |g, ids| {
            let y = g
                .batchnorm2d(ids[0], ids[1], ids[2], &[0.0; 3], &[1.0; 3], BnMode::Train, 1e-5)
                .unwrap();
            reduce(g, y)
        },
        &[&[2, 3, 4, 5], &[3], &[3]],
        coords,
        &mut rng,
    )?);
    out.push(check_one::<E>(
        "batchnorm-eval",
        |g, ids| {
            let y = g
                .batchnorm2d(
                    ids[0],
                    ids[1],
                    ids[2],
                    &[0.1, -0.2, 0.3],
                    &[1.5, 0.8, 1.1],
                    BnMode::Eval,
                    1e-5,
                )
                .unwrap();
            reduce(g, y)
        },
        &[&[2, 3, 4, 5], &[3], &[3]],
        coords,
        &mut rng,
    )?);
    out.push(check_one::<E>(
        "leaky_relu",
        |g, ids| {
            let y = g.leaky_relu(ids[0], 0.01);
            reduce(g, y)
        },
        &[&[2, 3, 5, 4]],
        coords,
        &mut rng,
    )?);
    out.push(check_one::<E>(
        "linear",
        |g, ids| {
            let y = g.linear(ids[0], ids[1], ids[2]).unwrap();
            reduce(g, y)
        },
        &[&[3, 6], &[4, 6], &[4]],
        coords,
        &mut rng,
    )?);
    out.push(check_one::<E>(
        "global_pool",
        |g, ids| {
            let y = g.global_pool(ids[0]).unwrap();
            reduce(g, y)
        },
        &[&[2, 4, 5, 6]],
        coords,
        &mut rng,
    )?);
    out.push(check_one::<E>(
        "add",
        |g, ids| {
            let y = g.add(ids[0], ids[1]).unwrap();
            reduce(g, y)
        },
        &[&[2, 3, 4, 4], &[2, 3, 4, 4]],
        coords,
        &mut rng,
    )?);
    out.push(check_one::<E>(
        "reshape",
        |g, ids| {
            let y = g.reshape(ids[0], &[2, 12, 2, 2]).unwrap();
            reduce(g, y)
        },
        &[&[2, 3, 4, 4]],
        coords,
        &mut rng,
    )?);
    out.push(check_one::<E>(
        "sigmoid_bce_loss",
        |g, ids| {
            let t = Tensor::full(&[3, 5], E::from_f64(0.7));
            g.sigmoid_bce_loss(ids[0], t).unwrap()
        },
        &[&[3, 5]],
        coords,
        &mut rng,
    )?);
    out.push(check_one::<E>(
        "softmax_ce_loss",
        |g, ids| {
            let mut t = Tensor::zeros(&[3, 5]);
            for b in 0..3 {
                t.data[b * 5 + (b + 1)] = E::from_f64(1.0);
            }
            g.softmax_ce_loss(ids[0], t).unwrap()
        },
        &[&[3, 5]],
        coords,
        &mut rng,
    )?);
    Ok(out)
}

/// Finite-difference step for the whole-network check. Narrower than the
/// operator-level step because the network's loss is only piecewise smooth:
/// with ~10^5 LeakyReLU pre-activations downstream of a shallow parameter,
/// slope breaks along one coordinate sit every ~1e-4, and a stencil must fit
/// between them.
pub const MODEL_FD_EPS: f64 = 4e-5;

/// Absolute noise of one f64 loss evaluation (measured ~6e-14 on the W=1
/// network via nano-step secants, padded 2x). Slope noise is 2x this over
/// the step, which bounds how far the eps ladder may descend.
const LOSS_NOISE: f64 = 1.2e-13;

/// Step sizes tried per coordinate, widest first. Quiet coordinates accept
/// the first rung; coordinates with dense slope breaks (shallow, high fan-
/// out) descend until the stencil fits inside one smooth piece.
const EPS_LADDER: [f64; 4] =
    [MODEL_FD_EPS, MODEL_FD_EPS / 8.0, MODEL_FD_EPS / 64.0, MODEL_FD_EPS / 256.0];

/// Result of the whole-network check in both precisions, sharing one f64
/// finite-difference measurement per coordinate.
#[derive(Debug, Clone)]
pub struct ModelReport {
    pub f64_check: GradCheckReport,
    pub f32_check: GradCheckReport,
    /// Coordinates whose initial stencil straddled a slope break and had to
    /// be re-measured a few steps aside.
    pub nudged: usize,
}

/// One validated central-difference measurement: probes L at center ± eps
/// and ± eps/2, rejects the stencil if the four slopes betray a slope break
/// inside it, and Richardson-extrapolates the two central differences.
///
/// Both detectors use only finite-difference data, never the analytic value
/// under test. `s_p1 - s_m1` catches breaks near the center (where the
/// half-step test is blind) once the smooth-curvature term, estimated from
/// the half-step slopes, is removed; `c1 - c2` catches off-center breaks.
/// Threshold geometry: a break of slope-jump d at distance k from the
/// center corrupts the central difference by at most d·(eps-k)/(2·eps)
/// while feeding at least that twice over into one of the detectors, so
/// with thresholds t1 + 2·t2 <= 1.6e-5·scale any undetected break costs
/// under 8e-6·scale — inside the f64 tolerance. The noise floors keep the
/// detectors quiet when the ladder descends and slope noise grows.
fn measured_slope(
    loss: &mut dyn FnMut(f64) -> Result<f64>,
    center: f64,
    eps: f64,
    l0: f64,
) -> Result<Option<f64>> {
    let lp1 = loss(center + eps)?;
    let lm1 = loss(center - eps)?;
    let lp2 = loss(center + eps / 2.0)?;
    let lm2 = loss(center - eps / 2.0)?;
    let s_p1 = (lp1 - l0) / eps;
    let s_m1 = (l0 - lm1) / eps;
    let s_p2 = (lp2 - l0) / (eps / 2.0);
    let s_m2 = (l0 - lm2) / (eps / 2.0);
    let c1 = (s_p1 + s_m1) / 2.0;
    let c2 = (s_p2 + s_m2) / 2.0;
    let scale = c1.abs().max(c2.abs()).max(GRADCHECK_FLOOR);
    let noise_s = 2.0 * LOSS_NOISE / eps;
    let curv = (s_p1 - s_p2) - (s_m1 - s_m2); // f''·eps/2 when smooth
    let centered_break = (s_p1 - s_m1 - 2.0 * curv).abs();
    let offcenter_break = (c1 - c2).abs();
    if centered_break > (8e-6 * scale).max(6.0 * noise_s)
        || offcenter_break > (4e-6 * scale).max(4.0 * noise_s)
    {
        return Ok(None);
    }
    Ok(Some((4.0 * c2 - c1) / 3.0))
}

/// Check the complete W=1 network (train-mode forward, head-matched loss)
/// over sampled parameter coordinates, in both precisions at once.
///
/// The finite-difference side always runs in f64; the f32 analytic gradient
/// is compared against the same measurement at the f32-rounded point. A
/// stencil that straddles a slope break is moved a few steps along the
/// coordinate until it sits inside one smooth piece — the whole-network
/// analogue of probing leaky_relu away from its corner — and the analytic
/// gradient is recomputed at the moved point before comparing.
pub fn model_gradcheck(seed: u64, coords_per_tensor: usize) -> Result<ModelReport> {
    let config = ErannConfig::new(1, 3, 4, Head::Sigmoid)?;
    let mut rng = RngStream::substream(seed, 0x3D);
    let state64 = init_params::<f64>(config.clone(), &mut rng)?;
    let mut rng32 = RngStream::substream(seed, 0x3D);
    let state32 = init_params::<f32>(config, &mut rng32)?;

    let mut x64 = Tensor::<f64>::zeros(&[1, 1, 128, 128]);
    for v in &mut x64.data {
        *v = rng.uniform(-1.5, 1.5);
    }
    let mut t64 = Tensor::<f64>::zeros(&[1, 4]);
    for v in &mut t64.data {
        *v = rng.unit();
    }
    let x32 = x64.cast::<f32>();
    let t32 = t64.cast::<f32>();

    let loss64 = |ps: &[Tensor<f64>]| -> Result<f64> {
        let st = state64.with_params(ps.to_vec())?;
        let mut g = Graph::new();
        let input = g.input(x64.clone(), false);
        let h = forward_graph(&st, &mut g, input, BnMode::Train)?;
        let loss = g.sigmoid_bce_loss(h.logits, t64.clone())?;
        Ok(g.value(loss).data[0])
    };
    let grads64 = |ps: &[Tensor<f64>]| -> Result<Vec<Tensor<f64>>> {
        let st = state64.with_params(ps.to_vec())?;
        let mut g = Graph::new();
        let input = g.input(x64.clone(), false);
        let h = forward_graph(&st, &mut g, input, BnMode::Train)?;
        let loss = g.sigmoid_bce_loss(h.logits, t64.clone())?;
        g.backward(loss)?;
        Ok(h.param_nodes
            .iter()
            .zip(ps)
            .map(|(&n, p)| g.grad(n).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect())
    };
    let grads32 = |ps: &[Tensor<f32>]| -> Result<Vec<Tensor<f32>>> {
        let st = state32.with_params(ps.to_vec())?;
        let mut g = Graph::new();
        let input = g.input(x32.clone(), false);
        let h = forward_graph(&st, &mut g, input, BnMode::Train)?;
        let loss = g.sigmoid_bce_loss(h.logits, t32.clone())?;
        g.backward(loss)?;
        Ok(h.param_nodes
            .iter()
            .zip(ps)
            .map(|(&n, p)| g.grad(n).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect())
    };

    let base64 = grads64(&state64.params)?;
    let base32 = grads32(&state32.params)?;
    let l0_base = loss64(&state64.params)?;

    let mut work64 = state64.params.clone();
    let mut work32 = state32.params.clone();
    // offsets in steps of the active rung's eps
    const OFFSETS: [f64; 5] = [0.0, 8.0, -8.0, 16.0, -16.0];

    let mut rep64 = GradCheckReport { max_rel_err: 0.0, worst: String::new(), checks: 0 };
    let mut rep32 = GradCheckReport { max_rel_err: 0.0, worst: String::new(), checks: 0 };
    let mut nudged = 0usize;
    let names = &state64.plan.param_names;

    let mut pick = RngStream::substream(seed, 0x3E);
    for pi in 0..state64.params.len() {
        let n = state64.params[pi].numel();
        let mut coords: Vec<usize> = if n <= coords_per_tensor {
            (0..n).collect()
        } else {
            (0..coords_per_tensor).map(|_| pick.upto(n - 1)).collect()
        };
        coords.sort_unstable();
        coords.dedup();
        for ci in coords {
            let orig = work64[pi].data[ci];
            let mut loss_c = |v: f64| -> Result<f64> {
                work64[pi].data[ci] = v;
                let l = loss64(&work64);
                work64[pi].data[ci] = orig;
                l
            };
            let mut found = None;
            'search: for eps in EPS_LADDER {
                for off in OFFSETS {
                    let center = orig + off * eps;
                    let l0 = if off == 0.0 { l0_base } else { loss_c(center)? };
                    if let Some(fd) = measured_slope(&mut loss_c, center, eps, l0)? {
                        found = Some((center, off, fd));
                        break 'search;
                    }
                }
            }
            let (center, off, fd) = found.ok_or_else(|| {
                Error::Numeric(format!(
                    "gradcheck: no break-free stencil near {}[{ci}]",
                    names[pi]
                ))
            })?;
            let (an64, an32) = if off == 0.0 {
                (base64[pi].data[ci], base32[pi].data[ci])
            } else {
                nudged += 1;
                work64[pi].data[ci] = center;
                let g64 = grads64(&work64)?[pi].data[ci];
                work64[pi].data[ci] = orig;
                let orig32 = work32[pi].data[ci];
                work32[pi].data[ci] = center as f32;
                let g32 = grads32(&work32)?[pi].data[ci];
                work32[pi].data[ci] = orig32;
                (g64, g32)
            };
            let what = |an: f64| format!("{}[{ci}]: analytic {an:e} vs fd {fd:e}", names[pi]);
            rep64.absorb(rel_err(an64, fd, GRADCHECK_FLOOR), what(an64));
            rep32.absorb(rel_err(an32 as f64, fd, GRADCHECK_FLOOR), what(an32 as f64));
        }
    }
    Ok(ModelReport { f64_check: rep64, f32_check: rep32, nudged })
}

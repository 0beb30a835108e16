//! Finite-difference gradient checking against an f64 reference network.

use msrnet::tensor::Tensor;
use msrnet::{MsrNet, MsrNetConfig};

pub fn small_config() -> MsrNetConfig {
    MsrNetConfig { n: 2, v: vec![10.0, 100.0], k: 2, width: 4, kernel_hidden: 3, patch: 8 }
}

/// Same check against the production f32 forward pass; only coarse
/// agreement is possible there.
pub fn worst_fd_error(net: &mut MsrNet, x: &Tensor, y: &Tensor, lambda: f32, step: f32, floor: f64) -> (f64, String) {
    net.forward_backward(x, y, lambda).unwrap();
    let analytic: Vec<Vec<f32>> = net.params().iter().map(|p| p.grad.data().to_vec()).collect();
    let mut worst = (0.0, String::new());
    for pi in 0..net.params().len() {
        for j in 0..analytic[pi].len() {
            let orig = net.params()[pi].value.data()[j];
            net.params_mut()[pi].value.data_mut()[j] = orig + step;
            let plus = net.loss(x, y, lambda).unwrap();
            net.params_mut()[pi].value.data_mut()[j] = orig - step;
            let minus = net.loss(x, y, lambda).unwrap();
            net.params_mut()[pi].value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step as f64);
            let a = analytic[pi][j] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, format!("{}[{j}]: analytic {a:e} numeric {numeric:e}", net.params()[pi].name));
            }
        }
    }
    worst
}

/// Plain-loop f64 reimplementation of the network, for differencing the
/// loss without f32 rounding noise.
pub mod reference {
    use msrnet::tensor::Tensor;
    use msrnet::MsrNet;

    /// `[c][y][x]` planes.
    pub type Planes = Vec<Vec<Vec<f64>>>;

    pub fn planes(t: &Tensor) -> Planes {
        let s = t.shape();
        (0..s.c).map(|c| (0..s.h).map(|y| (0..s.w).map(|x| t.at(0, c, y, x) as f64).collect()).collect()).collect()
    }

    pub struct Weights {
        /// `[layer + 1]` → (weight `[o][i][ky][kx]`, bias `[o]`)
        pub layers: Vec<(Vec<Vec<Vec<Vec<f64>>>>, Vec<f64>)>,
    }

    pub fn weights(net: &MsrNet) -> Weights {
        let k = net.config().k as i32;
        let layers = (-1..=k + 2)
            .map(|l| {
                let w = &net.param(&format!("layer{l}.weight")).unwrap().value;
                let b = &net.param(&format!("layer{l}.bias")).unwrap().value;
                let s = w.shape();
                let wv = (0..s.n)
                    .map(|o| (0..s.c).map(|i| (0..s.h).map(|y| (0..s.w).map(|x| w.at(o, i, y, x) as f64).collect()).collect()).collect())
                    .collect();
                (wv, b.data().iter().map(|&v| v as f64).collect())
            })
            .collect();
        Weights { layers }
    }

    fn conv(input: &Planes, w: &(Vec<Vec<Vec<Vec<f64>>>>, Vec<f64>)) -> Planes {
        let (h, wd) = (input[0].len(), input[0][0].len());
        let (weight, bias) = w;
        weight
            .iter()
            .zip(bias)
            .map(|(wo, &b)| {
                let r = (wo[0].len() / 2) as isize;
                (0..h)
                    .map(|y| {
                        (0..wd)
                            .map(|x| {
                                let mut acc = b;
                                for (i, wi) in wo.iter().enumerate() {
                                    for ky in 0..wi.len() {
                                        for kx in 0..wi[0].len() {
                                            let (sy, sx) = (y as isize + ky as isize - r, x as isize + kx as isize - r);
                                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                                acc += wi[ky][kx] * input[i][sy as usize][sx as usize];
                                            }
                                        }
                                    }
                                }
                                acc
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// ReLU gates, one flag per pre-activation, in evaluation order.
    pub type Mask = Vec<bool>;

    /// Applies ReLU, recording gates into `seen` and, when `frozen` is
    /// given, gating by it instead of by the sign.
    fn relu(p: Planes, frozen: Option<&Mask>, seen: &mut Mask) -> Planes {
        p.into_iter()
            .map(|c| {
                c.into_iter()
                    .map(|r| {
                        r.into_iter()
                            .map(|v| {
                                let open = match frozen {
                                    Some(m) => m[seen.len()],
                                    None => v > 0.0,
                                };
                                seen.push(v > 0.0);
                                if open { v } else { 0.0 }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    fn zip(a: &Planes, b: &Planes, f: impl Fn(f64, f64) -> f64) -> Planes {
        a.iter()
            .zip(b)
            .map(|(ca, cb)| ca.iter().zip(cb).map(|(ra, rb)| ra.iter().zip(rb).map(|(&x, &y)| f(x, y)).collect()).collect())
            .collect()
    }

    pub fn forward(v: &[f32], k: usize, wts: &Weights, x: &Planes, frozen: Option<&Mask>) -> (Planes, Mask) {
        let mut seen = Mask::new();
        let layer = |l: i32| &wts.layers[(l + 1) as usize];
        let mut logs = Planes::new();
        for &vj in v {
            let vj = vj as f64;
            for c in x {
                logs.push(c.iter().map(|r| r.iter().map(|&p| (1.0 + vj * p).ln() / (1.0 + vj).ln()).collect()).collect());
            }
        }
        let x1 = conv(&relu(conv(&logs, layer(-1)), frozen, &mut seen), layer(0));
        let mut h = x1.clone();
        let mut stacked = Planes::new();
        for m in 1..=k as i32 {
            h = relu(conv(&h, layer(m)), frozen, &mut seen);
            stacked.extend(h.iter().cloned());
        }
        let smooth = conv(&stacked, layer(k as i32 + 1));
        let x2 = zip(&x1, &smooth, |a, b| a - b);
        (conv(&x2, layer(k as i32 + 2)), seen)
    }

    /// Loss and the ReLU gates it was evaluated with.
    pub fn loss(net: &MsrNet, wts: &Weights, x: &Planes, y: &Planes, lambda: f64, frozen: Option<&Mask>) -> (f64, Mask) {
        let (pred, seen) = forward(&net.config().v, net.config().k, wts, x, frozen);
        let data: f64 = zip(&pred, y, |a, b| (a - b) * (a - b)).iter().flatten().flatten().sum();
        let reg: f64 = wts.layers.iter().flat_map(|(w, _)| w.iter().flatten().flatten().flatten()).map(|v| v * v).sum();
        (data + lambda * reg, seen)
    }
}

pub struct FdReport {
    /// Worst relative error over all entries, each measured on the branch
    /// its analytic gradient belongs to.
    pub worst: f64,
    pub at: String,
    pub checked: usize,
    /// Entries whose ±step evaluations flipped a ReLU gate.
    pub kink_crossings: usize,
    /// Worst relative error of plain differences on kink-free entries.
    pub worst_kink_free: f64,
    pub forward_diff: f64,
}

/// Analytic gradients of a batch-1 problem against central differences of
/// the f64 reference loss.
pub fn reference_fd_check(net: &mut MsrNet, x: &Tensor, y: &Tensor, lambda: f32, step: f64, floor: f64) -> FdReport {
    net.forward_backward(x, y, lambda).unwrap();
    let (xp, yp) = (reference::planes(x), reference::planes(y));
    let mut wts = reference::weights(net);
    let (ref_out, base_mask) = reference::forward(&net.config().v, net.config().k, &wts, &xp, None);
    let fwd = net.forward(x).unwrap();
    let forward_diff = reference::planes(&fwd)
        .iter()
        .flatten()
        .flatten()
        .zip(ref_out.iter().flatten().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let mut report = FdReport { worst: 0.0, at: String::new(), checked: 0, kink_crossings: 0, worst_kink_free: 0.0, forward_diff };
    let k = net.config().k as i32;
    for (li, l) in (-1..=k + 2).enumerate() {
        for is_bias in [false, true] {
            let name = format!("layer{l}.{}", if is_bias { "bias" } else { "weight" });
            let grad = net.param(&name).unwrap().grad.clone();
            let s = grad.shape();
            for j in 0..grad.numel() {
                let bump = |wts: &mut reference::Weights, delta: f64| {
                    if is_bias {
                        wts.layers[li].1[j] += delta;
                    } else {
                        let (o, rest) = (j / (s.c * s.h * s.w), j % (s.c * s.h * s.w));
                        let (i, rest) = (rest / (s.h * s.w), rest % (s.h * s.w));
                        wts.layers[li].0[o][i][rest / s.w][rest % s.w] += delta;
                    }
                };
                let lam = lambda as f64;
                let central = |wts: &mut reference::Weights, frozen: Option<&reference::Mask>| {
                    bump(wts, step);
                    let (plus, mp) = reference::loss(net, wts, &xp, &yp, lam, frozen);
                    bump(wts, -2.0 * step);
                    let (minus, mm) = reference::loss(net, wts, &xp, &yp, lam, frozen);
                    bump(wts, step);
                    ((plus - minus) / (2.0 * step), mp == base_mask && mm == base_mask)
                };
                let a = grad.data()[j] as f64;
                let rel_of = |numeric: f64| (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                let (mut numeric, clean) = central(&mut wts, None);
                if clean {
                    report.worst_kink_free = report.worst_kink_free.max(rel_of(numeric));
                } else {
                    report.kink_crossings += 1;
                    numeric = central(&mut wts, Some(&base_mask)).0;
                }
                let rel = rel_of(numeric);
                report.checked += 1;
                if rel > report.worst {
                    report.worst = rel;
                    report.at = format!("{name}[{j}]: analytic {a:e} numeric {numeric:e}");
                }
            }
        }
    }
    report
}

//! Reference implementations used as test oracles. None of these call into
//! the library's convolution or wavelet code.
#![allow(dead_code)]

use wcnet::Tensor;

/// Direct triple loop over a `[C, D, H, W]` input with a
/// `[C_out, C_in, kd, kh, kw]` kernel, stride 1, symmetric zero padding
/// `(k - 1) / 2`, one group.
pub fn brute_conv3d_same(x: &Tensor, k: &Tensor) -> Tensor {
    let (ci, d, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, kd, kh, kw) = (k.dim(0), k.dim(2), k.dim(3), k.dim(4));
    let (pd, ph, pw) = ((kd - 1) / 2, (kh - 1) / 2, (kw - 1) / 2);
    let mut out = Tensor::zeros(&[co, d, h, w]);
    for o in 0..co {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for i in 0..ci {
                        for a in 0..kd {
                            for b in 0..kh {
                                for c in 0..kw {
                                    let (zz, yy, xw) = (
                                        z as isize + a as isize - pd as isize,
                                        y as isize + b as isize - ph as isize,
                                        xx as isize + c as isize - pw as isize,
                                    );
                                    if zz < 0
                                        || yy < 0
                                        || xw < 0
                                        || zz >= d as isize
                                        || yy >= h as isize
                                        || xw >= w as isize
                                    {
                                        continue;
                                    }
                                    acc += k.get(&[o, i, a, b, c])
                                        * x.get(&[i, zz as usize, yy as usize, xw as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[o, z, y, xx], acc);
                }
            }
        }
    }
    out
}

/// Same-padded depthwise 2-D conv of one `[H, W]` plane.
pub fn brute_depthwise_plane(plane: &[f64], h: usize, w: usize, k: &[f64], ks: usize) -> Vec<f64> {
    let r = (ks - 1) as isize / 2;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for a in 0..ks as isize {
                for b in 0..ks as isize {
                    let (yy, xx) = (y + a - r, x + b - r);
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        acc += k[(a * ks as isize + b) as usize] * plane[(yy * w as isize + xx) as usize];
                    }
                }
            }
            out[(y * w as isize + x) as usize] = acc;
        }
    }
    out
}

/// Haar analysis of one even-sized plane by direct 2x2 block formulas,
/// returning `[LL, LH, HL, HH]` planes of size `h/2 x w/2`.
pub fn haar_plane(p: &[f64], h: usize, w: usize) -> [Vec<f64>; 4] {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = [vec![0.0; h2 * w2], vec![0.0; h2 * w2], vec![0.0; h2 * w2], vec![0.0; h2 * w2]];
    for i in 0..h2 {
        for j in 0..w2 {
            let a = p[2 * i * w + 2 * j];
            let b = p[2 * i * w + 2 * j + 1];
            let c = p[(2 * i + 1) * w + 2 * j];
            let d = p[(2 * i + 1) * w + 2 * j + 1];
            out[0][i * w2 + j] = (a + b + c + d) / 2.0;
            out[1][i * w2 + j] = (a - b + c - d) / 2.0;
            out[2][i * w2 + j] = (a + b - c - d) / 2.0;
            out[3][i * w2 + j] = (a - b - c + d) / 2.0;
        }
    }
    out
}

/// Inverse of [`haar_plane`].
pub fn inv_haar_plane(bands: &[Vec<f64>; 4], h2: usize, w2: usize) -> Vec<f64> {
    let w = 2 * w2;
    let mut out = vec![0.0; 4 * h2 * w2];
    for i in 0..h2 {
        for j in 0..w2 {
            let (ll, lh, hl, hh) = (bands[0][i * w2 + j], bands[1][i * w2 + j], bands[2][i * w2 + j], bands[3][i * w2 + j]);
            out[2 * i * w + 2 * j] = (ll + lh + hl + hh) / 2.0;
            out[2 * i * w + 2 * j + 1] = (ll - lh + hl - hh) / 2.0;
            out[(2 * i + 1) * w + 2 * j] = (ll + lh - hl - hh) / 2.0;
            out[(2 * i + 1) * w + 2 * j + 1] = (ll - lh - hl + hh) / 2.0;
        }
    }
    out
}

/// Unrolled wavelet conv on a `[C, H, W]` input with sizes divisible by
/// `2^levels`: every level's contribution is reconstructed all the way to
/// full resolution on its own and the contributions are summed, with no
/// coarse-to-fine accumulation.
///
/// `kernels[l]` holds `4 * C` kernels of `k * k` in channel-major band order,
/// `scales[l]` the matching `4 * C` factors, `base` the `C` residual kernels.
pub fn straight_line_wtconv(
    x: &Tensor,
    k: usize,
    kernels: &[Vec<f64>],
    scales: &[Vec<f64>],
    base: Option<&[f64]>,
) -> Tensor {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let levels = kernels.len();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        if let Some(b) = base {
            let y = brute_depthwise_plane(plane, h, w, &b[ch * k * k..(ch + 1) * k * k], k);
            out[ch * h * w..(ch + 1) * h * w]
                .iter_mut()
                .zip(y)
                .for_each(|(o, v)| *o += v);
        }
        // Decompose.
        let mut lows = vec![plane.to_vec()];
        let mut all = Vec::new();
        let (mut hh, mut ww) = (h, w);
        for _ in 0..levels {
            let bands = haar_plane(lows.last().unwrap(), hh, ww);
            hh /= 2;
            ww /= 2;
            lows.push(bands[0].clone());
            all.push((bands, hh, ww));
        }
        for (l, (bands, bh, bw)) in all.iter().enumerate() {
            let mut processed: [Vec<f64>; 4] = Default::default();
            for b in 0..4 {
                let idx = ch * 4 + b;
                let kern = &kernels[l][idx * k * k..(idx + 1) * k * k];
                processed[b] = brute_depthwise_plane(&bands[b], *bh, *bw, kern, k)
                    .into_iter()
                    .map(|v| v * scales[l][idx])
                    .collect();
            }
            // Reconstruct this level alone, then lift through every finer level
            // with zero high bands.
            let mut rec = inv_haar_plane(&processed, *bh, *bw);
            let (mut rh, mut rw) = (2 * bh, 2 * bw);
            for _ in 0..l {
                let z = vec![0.0; rh * rw];
                rec = inv_haar_plane(&[rec, z.clone(), z.clone(), z], rh, rw);
                rh *= 2;
                rw *= 2;
            }
            out[ch * h * w..(ch + 1) * h * w]
                .iter_mut()
                .zip(rec)
                .for_each(|(o, v)| *o += v);
        }
    }
    Tensor::new(&[c, h, w], out).unwrap()
}

/// Relative error `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every element of `data`.
pub fn central_diff(data: &mut [f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..data.len())
        .map(|i| {
            let orig = data[i];
            data[i] = orig + step;
            let up = f(data);
            data[i] = orig - step;
            let down = f(data);
            data[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

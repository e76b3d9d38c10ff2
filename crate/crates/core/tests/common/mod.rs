//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use facemtl::model::{ModelSpec, Sharing};
use facemtl::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Widths small enough for exhaustive double-precision gradient checks.
pub fn small_spec(sharing: Sharing) -> ModelSpec {
    ModelSpec {
        sharing,
        encoder_channels: [2, 4, 4],
        head_hidden: 4,
        ..ModelSpec::default()
    }
}

/// Direct sliding-window convolution with zero padding.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let &[n, c, h, wd] = x.shape() else { panic!("NCHW") };
    let &[o, _, kh, kw] = w.shape() else { panic!("OIHW") };
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; n * o * ho * wo];
    for ni in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((ni * c + ic) * h + iy as usize) * wd + ix as usize];
                                acc += xv * wdat[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((ni * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec([n, o, ho, wo], out).unwrap()
}

/// Brute-force non-overlapping window maximum.
pub fn window_max(x: &Tensor<f64>, k: usize) -> Tensor<f64> {
    let &[n, c, h, w] = x.shape() else { panic!("NCHW") };
    let (ho, wo) = (h / k, w / k);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..k {
                    for dx in 0..k {
                        best = best.max(plane[(oy * k + dy) * w + ox * k + dx]);
                    }
                }
                out.push(best);
            }
        }
    }
    Tensor::from_vec([n, c, ho, wo], out).unwrap()
}

/// Pairwise double loop over positions: output and per-sample attention rows.
pub fn naive_non_local(
    x: &Tensor<f64>,
    theta: &Tensor<f64>,
    phi: &Tensor<f64>,
    g: &Tensor<f64>,
    w_z: &Tensor<f64>,
) -> (Tensor<f64>, Vec<Vec<Vec<f64>>>) {
    let &[n, c, h, w] = x.shape() else { panic!("NCHW") };
    let e = c / 2;
    let p = h * w;
    let xd = x.data();
    let at = |ni: usize, ch: usize, pos: usize| xd[(ni * c + ch) * p + pos];
    let project = |m: &Tensor<f64>, ni: usize, pos: usize| -> Vec<f64> {
        (0..e).map(|k| (0..c).map(|ch| m[k * c + ch] * at(ni, ch, pos)).sum()).collect()
    };
    let mut out = vec![0.0; n * c * p];
    let mut attn_all = Vec::new();
    for ni in 0..n {
        let th: Vec<Vec<f64>> = (0..p).map(|i| project(theta, ni, i)).collect();
        let ph: Vec<Vec<f64>> = (0..p).map(|j| project(phi, ni, j)).collect();
        let gg: Vec<Vec<f64>> = (0..p).map(|j| project(g, ni, j)).collect();
        let mut attn = Vec::with_capacity(p);
        for i in 0..p {
            let scores: Vec<f64> = (0..p)
                .map(|j| th[i].iter().zip(&ph[j]).map(|(a, b)| a * b).sum())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = ex.iter().sum();
            let row: Vec<f64> = ex.iter().map(|v| v / z).collect();
            let y: Vec<f64> = (0..e).map(|k| (0..p).map(|j| row[j] * gg[j][k]).sum()).collect();
            for ch in 0..c {
                let wz: f64 = (0..e).map(|k| w_z[ch * e + k] * y[k]).sum();
                out[(ni * c + ch) * p + i] = at(ni, ch, i) + wz;
            }
            attn.push(row);
        }
        attn_all.push(attn);
    }
    (Tensor::from_vec([n, c, h, w], out).unwrap(), attn_all)
}

/// Reference gender confusion: rows true (Male, Female), columns predicted.
pub const REF_GENDER_CONFUSION: [[u64; 2]; 2] = [[2017, 112], [633, 1903]];

/// Reference ethnicity confusion: rows true (W, B, A, I, O), columns predicted.
pub const REF_ETHNICITY_CONFUSION: [[u64; 5]; 5] = [
    [1651, 292, 106, 199, 30],
    [31, 924, 17, 49, 3],
    [27, 44, 628, 30, 8],
    [52, 134, 17, 695, 7],
    [80, 72, 33, 83, 93],
];

/// Reference precision, recall, F1 for W, B, A, I, O.
pub const REF_ETHNICITY_PRF1: [[f64; 3]; 5] = [
    [0.90, 0.72, 0.80],
    [0.63, 0.90, 0.74],
    [0.78, 0.85, 0.82],
    [0.66, 0.77, 0.71],
    [0.66, 0.26, 0.37],
];

/// Reference precision, recall, F1 for Male and Female.
pub const REF_MALE_PRF1: [f64; 3] = [0.81, 0.96, 0.88];
pub const REF_FEMALE_PRF1: [f64; 3] = [0.94, 0.75, 0.84];

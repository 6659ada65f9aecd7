//! Independent reference implementations shared by the integration tests.
//! Everything here is plain nested loops over `Vec<Vec<f64>>`, with no tape
//! and no gemm.

#![allow(dead_code)]

pub mod metrics_oracle;

use rac_core::corpus::{TitleMatrix, PAD};
use rac_core::model::{Queries, RacConfig, RacModel};
use rac_core::numerics::{Rng, Tensor, LAYER_NORM_EPS};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|&x| f(x)).collect()).collect()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        })
        .collect()
}

pub fn layer_norm_rows(a: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + LAYER_NORM_EPS).sqrt();
            r.iter().enumerate().map(|(j, x)| (x - mean) / sd * gain[j] + bias[j]).collect()
        })
        .collect()
}

/// Same-length convolution, output `t` reading inputs `t-(k-1)/2 ..= t+k/2`.
pub fn conv_same(x: &Mat, kernel: &Tensor, bias: &[f64]) -> Mat {
    let s = kernel.shape();
    let (k, d_in, d_out) = (s[0], s[1], s[2]);
    let kd = kernel.data();
    let left = (k - 1) / 2;
    let len = x.len();
    let mut out = vec![vec![0.0; d_out]; len];
    for t in 0..len {
        for o in 0..d_out {
            let mut acc = bias[o];
            for j in 0..k {
                let pos = t as isize + j as isize - left as isize;
                if pos < 0 || pos >= len as isize {
                    continue;
                }
                for c in 0..d_in {
                    acc += x[pos as usize][c] * kd[(j * d_in + c) * d_out + o];
                }
            }
            out[t][o] = acc;
        }
    }
    out
}

pub fn lookup(table: &Tensor, ids: &[usize]) -> Mat {
    ids.iter().map(|&i| table.row(i).to_vec()).collect()
}

fn mask_cols(scores: &mut Mat, pad: Option<&[bool]>) {
    if let Some(pad) = pad {
        for row in scores.iter_mut() {
            for (x, &p) in row.iter_mut().zip(pad) {
                if p {
                    *x = -1e9;
                }
            }
        }
    }
}

pub struct OracleOutput {
    pub e_x: Mat,
    pub u_x: Mat,
    pub e_t: Mat,
    pub attention: Mat,
    pub v_x: Mat,
    pub y: Vec<f64>,
}

pub fn sam_oracle(model: &RacModel, e_x: &Mat, pad: Option<&[bool]>) -> Mat {
    let d = model.config.d as f64;
    let mut h = e_x.clone();
    for l in &model.params.reader.layers {
        let q = matmul(&h, &mat(&l.w_q));
        let k = matmul(&h, &mat(&l.w_k));
        let v = matmul(&h, &mat(&l.w_v));
        let mut s = map(&matmul(&q, &transpose(&k)), |x| x / d.sqrt());
        mask_cols(&mut s, pad);
        let a = layer_norm_rows(&add(&h, &matmul(&softmax_rows(&s), &v)), l.ln1_gain.data(), l.ln1_bias.data());
        let f = matmul(&map(&matmul(&a, &mat(&l.w_1)), |x| x.max(0.0)), &mat(&l.w_2));
        h = layer_norm_rows(&add(&a, &f), l.ln2_gain.data(), l.ln2_bias.data());
    }
    h
}

pub fn title_oracle(model: &RacModel, titles: &TitleMatrix) -> Mat {
    match &model.params.coder.queries {
        Queries::Titles { embedding, conv } => (0..titles.n_y())
            .map(|r| {
                let c = map(&conv_same(&lookup(embedding, titles.row(r)), &conv.kernel, conv.bias.data()), f64::tanh);
                (0..c[0].len())
                    .map(|j| c.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
                    .collect()
            })
            .collect(),
        Queries::Learned(q) => mat(q),
    }
}

pub fn head_oracle(model: &RacModel, e_t: &Mat, u_x: &Mat, pad: Option<&[bool]>) -> (Mat, Mat, Vec<f64>) {
    let d = model.config.d as f64;
    let mut s = map(&matmul(e_t, &transpose(u_x)), |x| x / d.sqrt());
    mask_cols(&mut s, pad);
    let a = softmax_rows(&s);
    let v = matmul(&a, u_x);
    let w3 = model.params.coder.w_3.data();
    let b = model.params.coder.bias.as_ref().map_or(0.0, |b| b.data()[0]);
    let y = v
        .iter()
        .map(|row| {
            let z: f64 = row.iter().zip(w3).map(|(x, w)| x * w).sum::<f64>() + b;
            1.0 / (1.0 + (-z).exp())
        })
        .collect();
    (a, v, y)
}

/// Eval-mode forward pass written out directly from the layer equations.
pub fn forward_oracle(model: &RacModel, ids: &[usize], titles: &TitleMatrix) -> OracleOutput {
    let r = &model.params.reader;
    let mut e_x = lookup(&r.embedding, ids);
    for c in &r.convs {
        e_x = map(&conv_same(&e_x, &c.kernel, c.bias.data()), f64::tanh);
    }
    let pad: Option<Vec<bool>> = model.config.mask_padding.then(|| ids.iter().map(|&i| i == PAD).collect());
    let u_x = sam_oracle(model, &e_x, pad.as_deref());
    let e_t = title_oracle(model, titles);
    let (attention, v_x, y) = head_oracle(model, &e_t, &u_x, pad.as_deref());
    OracleOutput {
        e_x,
        u_x,
        e_t,
        attention,
        v_x,
        y,
    }
}

pub fn max_abs_diff(a: &Mat, b: &Tensor) -> f64 {
    a.iter()
        .flatten()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Small config with every switch at its default.
pub fn tiny_config(vocab: usize, d: usize, n_x: usize, n_t: usize, n_y: usize) -> RacConfig {
    RacConfig {
        d,
        n_x,
        n_t,
        d_ff: d + 3,
        sam_layers: 2,
        conv_kernel: 3,
        ..RacConfig::new(vocab, n_y)
    }
}

/// A model whose every parameter is a fresh random draw, so that zero
/// initialisations (output weights, biases, unit gains) do not hide bugs.
pub fn random_model(config: RacConfig, rng: &mut Rng, scale: f64) -> RacModel {
    let mut m = RacModel::init(config, None, rng).unwrap();
    m.params.for_each_mut(&mut |_, t| {
        for x in t.data_mut() {
            *x = rng.uniform_range(-scale, scale);
        }
    });
    m
}

pub fn random_ids(rng: &mut Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(vocab)).collect()
}

pub fn random_titles(rng: &mut Rng, n_y: usize, n_t: usize, vocab: usize) -> TitleMatrix {
    TitleMatrix::from_ids(n_t, random_ids(rng, n_y * n_t, vocab)).unwrap()
}

pub fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-scale, scale)).collect()).unwrap()
}

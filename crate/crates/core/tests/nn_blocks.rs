mod common;

use common::*;
use fiber_core::nn::{
    causal_mask, conv3x3, fpn_combine, multi_head_attention, patch_merging, upsample2, window_attention, AttentionParams, FfnParams, FpnParams,
    LinearParams, WindowConfig,
};
use fiber_core::params::{Bound, Builder};
use fiber_core::{Group, ParamStore};
use fiber_tensor::{Rng, Tensor, Var};
use proptest::prelude::*;

fn store_with<T>(seed: u64, f: impl FnOnce(&mut Builder) -> T) -> (ParamStore, T) {
    let mut store = ParamStore::new();
    let t = f(&mut Builder::new(&mut store, seed, Group::Backbone));
    (store, t)
}

/// Plain row-major `x · Wᵀ + b` for `x: [n, d_in]`.
fn dense(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    x.chunks(d_in)
        .flat_map(|row| (0..d_out).map(move |o| b.data()[o] + (0..d_in).map(|i| row[i] * w.data()[o * d_in + i]).sum::<f64>()))
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn linear_identity_and_dot_plus_bias() {
    let (mut store, lin) = store_with(0, |b| LinearParams::new(b, "l", 3, 3));
    store.set(lin.weight, Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 7.0, -1.0]).unwrap();
    let y = lin.forward(&store.bind(None), &Var::constant(x.clone())).unwrap();
    assert_eq!(y.value(), &x);

    let (mut store, lin) = store_with(0, |b| LinearParams::new(b, "l", 2, 1));
    store.set(lin.weight, Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
    store.set(lin.bias, Tensor::vector(vec![1.0]));
    let y = lin.forward(&store.bind(None), &Var::constant(Tensor::vector(vec![2.0, 3.0]))).unwrap();
    assert_eq!(y.value().data(), &[6.0]);
}

#[test]
fn linear_gradients() {
    for (trial, (n, d_in, d_out)) in [(1, 1, 1), (3, 4, 2), (2, 5, 7)].into_iter().enumerate() {
        let (mut store, lin) = store_with(trial as u64, |b| LinearParams::new(b, "l", d_in, d_out));
        let mut rng = Rng::new(trial as u64);
        let x = rand_tensor(&mut rng, &[n, d_in]);
        let p = store.bind(None);
        let r = input_gradcheck(&x, |v| weighted_sum(&lin.forward(&p, v)?, 9));
        assert!(r < OP_TOL, "input: {r}");
        let xv = Var::constant(x);
        let (err, n) = param_gradcheck(&mut store, |_| true, 64, |p| weighted_sum(&lin.forward(p, &xv)?, 9));
        assert!(n > 0 && err < OP_TOL, "params: {err}");
    }
}

#[test]
fn single_key_attention_is_projected_value() {
    let (store, attn) = store_with(3, |b| AttentionParams::new(b, "a", 8, 8, 2));
    let p = store.bind(None);
    let mut rng = Rng::new(1);
    let q = Var::constant(rand_tensor(&mut rng, &[1, 1, 8]));
    let kv = Var::constant(rand_tensor(&mut rng, &[1, 1, 8]));
    let got = multi_head_attention(&attn, &p, &q, &kv, None).unwrap();
    let want = attn.o.forward(&p, &attn.v.forward(&p, &kv).unwrap()).unwrap();
    assert_close(got.value().data(), want.value().data(), 1e-14, "out");
}

#[test]
fn single_head_matches_hand_rolled_reference() {
    let d = 4;
    let (store, attn) = store_with(5, |b| AttentionParams::new(b, "a", d, d, 1));
    let mut rng = Rng::new(2);
    let x = rand_tensor(&mut rng, &[1, 3, d]);
    let got = multi_head_attention(&attn, &store.bind(None), &Var::constant(x.clone()), &Var::constant(x.clone()), None).unwrap();

    let w = |l: &LinearParams| (store.value(l.weight).clone(), store.value(l.bias).clone());
    let (wq, bq) = w(&attn.q);
    let (wk, bk) = w(&attn.k);
    let (wv, bv) = w(&attn.v);
    let (wo, bo) = w(&attn.o);
    let q = dense(x.data(), &wq, &bq);
    let k = dense(x.data(), &wk, &bk);
    let v = dense(x.data(), &wv, &bv);
    let mut ctx = vec![0.0; 3 * d];
    for i in 0..3 {
        let scores: Vec<f64> = (0..3).map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt()).collect();
        let a = softmax(&scores);
        for c in 0..d {
            ctx[i * d + c] = (0..3).map(|j| a[j] * v[j * d + c]).sum();
        }
    }
    let want = dense(&ctx, &wo, &bo);
    assert_close(got.value().data(), &want, 1e-12, "attention");
}

#[test]
fn fully_masked_row_is_a_contract_error() {
    let (store, attn) = store_with(0, |b| AttentionParams::new(b, "a", 4, 4, 1));
    let x = Var::constant(Tensor::zeros(vec![1, 2, 4]));
    let mask = Tensor::new(vec![2, 2], vec![0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
    assert!(multi_head_attention(&attn, &store.bind(None), &x, &x, Some(&mask)).is_err());
}

#[test]
fn attention_gradients_with_masks() {
    let (mut store, attn) = store_with(7, |b| AttentionParams::new(b, "a", 6, 4, 2));
    let mut rng = Rng::new(4);
    let y = Var::constant(rand_tensor(&mut rng, &[2, 3, 4]));
    let x = rand_tensor(&mut rng, &[2, 5, 6]);
    // Cross-attention with a causal-style mask on the queries' first 3 keys.
    let mask = Tensor::from_fn(vec![5, 3], |i| if i % 3 <= (i / 3).min(2) { 0.0 } else { f64::NEG_INFINITY });
    let p = store.bind(None);
    let r = input_gradcheck(&x, |v| weighted_sum(&multi_head_attention(&attn, &p, v, &y, Some(&mask))?, 3));
    assert!(r < OP_TOL, "{r}");
    let xv = Var::constant(x);
    let (err, _) = param_gradcheck(&mut store, |_| true, 16, |p| weighted_sum(&multi_head_attention(&attn, p, &xv, &y, Some(&mask))?, 3));
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn ffn_zero_weights_give_zeros_and_keep_shape() {
    let (mut store, ffn) = store_with(1, |b| FfnParams::new(b, "f", 4));
    let x = Var::constant(rand_tensor(&mut Rng::new(0), &[2, 3, 4]));
    let y = ffn.forward(&store.bind(None), &x).unwrap();
    assert_eq!(y.shape(), &[2, 3, 4]);
    store.set(ffn.fc1.weight, Tensor::zeros(vec![16, 4]));
    store.set(ffn.fc2.weight, Tensor::zeros(vec![4, 16]));
    let y = ffn.forward(&store.bind(None), &x).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn ffn_gradients() {
    let (mut store, ffn) = store_with(2, |b| FfnParams::new(b, "f", 3));
    let x = rand_tensor(&mut Rng::new(5), &[2, 3]);
    let p = store.bind(None);
    let r = input_gradcheck(&x, |v| weighted_sum(&ffn.forward(&p, v)?, 1));
    assert!(r < OP_TOL, "{r}");
    let xv = Var::constant(x);
    let (err, _) = param_gradcheck(&mut store, |_| true, 16, |p| weighted_sum(&ffn.forward(p, &xv)?, 1));
    assert!(err < OP_TOL, "{err}");
}

fn grid(seed: u64, h: usize, w: usize, d: usize) -> Tensor {
    rand_tensor(&mut Rng::new(seed), &[1, h, w, d])
}

#[test]
fn one_window_equals_full_attention() {
    let (store, attn) = store_with(8, |b| AttentionParams::new(b, "a", 8, 8, 2));
    let p = store.bind(None);
    let g = grid(1, 4, 4, 8);
    let got = window_attention(WindowConfig { window: 4, shift: 0 }, &attn, &p, &Var::constant(g.clone())).unwrap();
    let flat = Var::constant(g.reshape(vec![1, 16, 8]).unwrap());
    let want = multi_head_attention(&attn, &p, &flat, &flat, None).unwrap();
    assert_eq!(got.value().data(), want.value().data());
}

/// Window id of each cell of an `n×n` grid for an unshifted partition.
fn window_of(y: usize, x: usize, w: usize, n: usize) -> usize {
    (y / w) * (n / w) + x / w
}

#[test]
fn unshifted_windows_are_independent() {
    let (store, attn) = store_with(9, |b| AttentionParams::new(b, "a", 4, 4, 1));
    let p = store.bind(None);
    let cfg = WindowConfig { window: 4, shift: 0 };
    let g = grid(2, 8, 8, 4);
    let base = window_attention(cfg, &attn, &p, &Var::constant(g.clone())).unwrap();
    // Reverse the cells of window 0 (top-left).
    let mut permuted = g.clone();
    let cells: Vec<(usize, usize)> = (0..4).flat_map(|y| (0..4).map(move |x| (y, x))).collect();
    for (k, &(y, x)) in cells.iter().enumerate() {
        let (sy, sx) = cells[cells.len() - 1 - k];
        for c in 0..4 {
            permuted.data_mut()[(y * 8 + x) * 4 + c] = g.data()[(sy * 8 + sx) * 4 + c];
        }
    }
    let out = window_attention(cfg, &attn, &p, &Var::constant(permuted)).unwrap();
    for y in 0..8 {
        for x in 0..8 {
            if window_of(y, x, 4, 8) != 0 {
                let i = (y * 8 + x) * 4;
                assert_eq!(&out.value().data()[i..i + 4], &base.value().data()[i..i + 4], "cell ({y},{x})");
            }
        }
    }
}

/// Shifted-window segment of a coordinate: boundaries at `s, s+w, …` without
/// wrap-around, so the border windows are partial.
fn segment(c: usize, w: usize, s: usize) -> usize {
    (c + w - s) / w
}

/// `[HW, HW]` mask built directly in grid coordinates.
fn brute_force_mask(h: usize, wd: usize, w: usize, s: usize) -> Tensor {
    let n = h * wd;
    Tensor::from_fn(vec![n, n], |i| {
        let (a, b) = (i / n, i % n);
        let same = segment(a / wd, w, s) == segment(b / wd, w, s) && segment(a % wd, w, s) == segment(b % wd, w, s);
        if same {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

#[test]
fn shifted_windows_match_brute_force_mask() {
    let (store, attn) = store_with(10, |b| AttentionParams::new(b, "a", 8, 8, 2));
    let p = store.bind(None);
    let g = grid(3, 8, 8, 8);
    let got = window_attention(WindowConfig { window: 4, shift: 2 }, &attn, &p, &Var::constant(g.clone())).unwrap();
    let flat = Var::constant(g.reshape(vec![1, 64, 8]).unwrap());
    let want = multi_head_attention(&attn, &p, &flat, &flat, Some(&brute_force_mask(8, 8, 4, 2))).unwrap();
    assert_close(got.value().data(), want.value().data(), 1e-12, "shifted");
}

#[test]
fn indivisible_grid_is_rejected() {
    let (store, attn) = store_with(0, |b| AttentionParams::new(b, "a", 4, 4, 1));
    let g = Var::constant(grid(0, 6, 6, 4));
    assert!(window_attention(WindowConfig { window: 4, shift: 0 }, &attn, &store.bind(None), &g).is_err());
}

#[test]
fn window_attention_gradients() {
    let (mut store, attn) = store_with(11, |b| AttentionParams::new(b, "a", 4, 4, 2));
    let cfg = WindowConfig { window: 2, shift: 1 };
    let g = grid(4, 4, 4, 4);
    let p = store.bind(None);
    let r = input_gradcheck(&g, |v| weighted_sum(&window_attention(cfg, &attn, &p, v)?, 2));
    assert!(r < COMPOSITE_TOL, "{r}");
    let gv = Var::constant(g);
    let (err, _) = param_gradcheck(&mut store, |_| true, 8, |p| weighted_sum(&window_attention(cfg, &attn, p, &gv)?, 2));
    assert!(err < COMPOSITE_TOL, "{err}");
}

#[test]
fn patch_merging_shape_and_top_left_projection() {
    let d = 8;
    let (mut store, lin) = store_with(0, |b| LinearParams::new(b, "m", 4 * d, 2 * d));
    let g = grid(5, 4, 4, d);
    let out = patch_merging(&lin, &store.bind(None), &Var::constant(g.clone())).unwrap();
    assert_eq!(out.shape(), &[1, 2, 2, 2 * d]);
    // Output channel c < d copies input channel c of the top-left sub-pixel.
    store.set(lin.weight, Tensor::from_fn(vec![2 * d, 4 * d], |i| if i / (4 * d) < d && i % (4 * d) == i / (4 * d) { 1.0 } else { 0.0 }));
    let out = patch_merging(&lin, &store.bind(None), &Var::constant(g.clone())).unwrap();
    for y in 0..2 {
        for x in 0..2 {
            for c in 0..d {
                assert_eq!(out.value().at(&[0, y, x, c]), g.at(&[0, 2 * y, 2 * x, c]));
                assert_eq!(out.value().at(&[0, y, x, d + c]), 0.0);
            }
        }
    }
}

#[test]
fn patch_merging_rejects_odd_grids_and_passes_gradcheck() {
    let (mut store, lin) = store_with(1, |b| LinearParams::new(b, "m", 8, 4));
    assert!(patch_merging(&lin, &store.bind(None), &Var::constant(grid(0, 3, 4, 2))).is_err());
    let g = grid(6, 4, 2, 2);
    let p = store.bind(None);
    let r = input_gradcheck(&g, |v| weighted_sum(&patch_merging(&lin, &p, v)?, 4));
    assert!(r < OP_TOL, "{r}");
    let gv = Var::constant(g);
    let (err, _) = param_gradcheck(&mut store, |_| true, 16, |p| weighted_sum(&patch_merging(&lin, p, &gv)?, 4));
    assert!(err < OP_TOL, "{err}");
}

/// Hand-unrolled zero-padded 3×3 convolution on one `[h, w, c]` grid.
fn conv_ref(x: &[f64], h: usize, w: usize, c: usize, wt: &Tensor, bias: &Tensor) -> Vec<f64> {
    let d_out = wt.shape()[0];
    let mut out = vec![0.0; h * w * d_out];
    for y in 0..h as isize {
        for xx in 0..w as isize {
            for o in 0..d_out {
                let mut acc = bias.data()[o];
                let mut k = 0;
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (sy, sx) = (y + dy, xx + dx);
                        for ci in 0..c {
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                acc += wt.data()[o * 9 * c + k * c + ci] * x[((sy as usize) * w + sx as usize) * c + ci];
                            }
                        }
                        k += 1;
                    }
                }
                out[((y as usize) * w + xx as usize) * d_out + o] = acc;
            }
        }
    }
    out
}

fn upsample_ref(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    (0..4 * h * w * c)
        .map(|i| {
            let (pix, ch) = (i / c, i % c);
            let (y, xx) = (pix / (2 * w), pix % (2 * w));
            x[((y / 2) * w + xx / 2) * c + ch]
        })
        .collect()
}

fn with_random_biases(store: &mut ParamStore, seed: u64) {
    let mut rng = Rng::new(seed);
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.ends_with("bias")).map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set(id, rand_tensor(&mut rng, &shape));
    }
}

#[test]
fn fpn_matches_hand_unrolled_reference() {
    let widths = [2, 4, 8];
    let sides = [8, 4, 2];
    let fw = 3;
    let (mut store, fpn) = store_with(12, |b| FpnParams::new(b, "fpn", &widths, fw));
    with_random_biases(&mut store, 1);
    let feats: Vec<Tensor> = (0..3).map(|i| grid(20 + i as u64, sides[i], sides[i], widths[i])).collect();
    let vars: Vec<Var> = feats.iter().cloned().map(Var::constant).collect();
    let got = fpn_combine(&fpn, &store.bind(None), &vars).unwrap();

    let lat: Vec<Vec<f64>> = (0..3)
        .map(|i| dense(feats[i].data(), store.value(fpn.lateral[i].weight), store.value(fpn.lateral[i].bias)))
        .collect();
    let m2 = lat[2].clone();
    let m1: Vec<f64> = lat[1].iter().zip(upsample_ref(&m2, 2, 2, fw)).map(|(a, b)| a + b).collect();
    let m0: Vec<f64> = lat[0].iter().zip(upsample_ref(&m1, 4, 4, fw)).map(|(a, b)| a + b).collect();
    for (i, m) in [m0, m1, m2].iter().enumerate() {
        let s = &fpn.smooth[i];
        let want = conv_ref(m, sides[i], sides[i], fw, store.value(s.weight), store.value(s.bias));
        assert_eq!(got[i].shape(), &[1, sides[i], sides[i], fw]);
        assert_close(got[i].value().data(), &want, 1e-12, &format!("level {i}"));
    }
}

#[test]
fn fpn_degenerate_cases() {
    let (store, fpn) = store_with(13, |b| FpnParams::new(b, "fpn", &[2], 3));
    let p = store.bind(None);
    let x = Var::constant(grid(1, 4, 4, 2));
    let got = fpn_combine(&fpn, &p, std::slice::from_ref(&x)).unwrap();
    let want = conv3x3(&fpn.smooth[0], &p, &fpn.lateral[0].forward(&p, &x).unwrap()).unwrap();
    assert_eq!(got[0].value(), want.value());

    // A zero coarse level (zero lateral bias) leaves the fine level on its own path.
    let (store, fpn) = store_with(14, |b| FpnParams::new(b, "fpn", &[2, 4], 3));
    let p = store.bind(None);
    let fine = Var::constant(grid(2, 4, 4, 2));
    let zero = Var::constant(Tensor::zeros(vec![1, 2, 2, 4]));
    let got = fpn_combine(&fpn, &p, &[fine.clone(), zero]).unwrap();
    let want = conv3x3(&fpn.smooth[0], &p, &fpn.lateral[0].forward(&p, &fine).unwrap()).unwrap();
    assert_eq!(got[0].value(), want.value());

    let bad = Var::constant(Tensor::zeros(vec![1, 3, 3, 4]));
    assert!(fpn_combine(&fpn, &p, &[fine, bad]).is_err());
}

#[test]
fn fpn_and_conv_gradients() {
    let (mut store, fpn) = store_with(15, |b| FpnParams::new(b, "fpn", &[2, 2], 2));
    with_random_biases(&mut store, 2);
    let fine = grid(3, 4, 4, 2);
    let coarse = Var::constant(grid(4, 2, 2, 2));
    let p = store.bind(None);
    let loss = |p: &Bound, f: &Var, c: &Var| -> fiber_core::Result<Var> {
        let outs = fpn_combine(&fpn, p, &[f.clone(), c.clone()])?;
        Ok(weighted_sum(&outs[0], 1)?.add(&weighted_sum(&outs[1], 2)?)?)
    };
    let r = input_gradcheck(&fine, |v| loss(&p, v, &coarse));
    assert!(r < COMPOSITE_TOL, "{r}");
    let fv = Var::constant(fine);
    let (err, _) = param_gradcheck(&mut store, |_| true, 12, |p| loss(p, &fv, &coarse));
    assert!(err < COMPOSITE_TOL, "{err}");
    let up = input_gradcheck(&grid(5, 2, 3, 2), |v| weighted_sum(&upsample2(v)?, 5));
    assert!(up < OP_TOL, "{}", up);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causal_outputs_ignore_future_tokens(len in 2usize..7, t in 0usize..6, seed in 0u64..1000) {
        let t = t % len;
        let (store, attn) = store_with(seed, |b| AttentionParams::new(b, "a", 4, 4, 2));
        let p = store.bind(None);
        let mut rng = Rng::new(seed);
        let x = rand_tensor(&mut rng, &[1, len, 4]);
        let mut y = x.clone();
        for v in &mut y.data_mut()[(t + 1) * 4..] {
            *v = rng.uniform_range(-5.0, 5.0);
        }
        let mask = causal_mask(len);
        let run = |x: &Tensor| {
            let v = Var::constant(x.clone());
            multi_head_attention(&attn, &p, &v, &v, Some(&mask)).unwrap().into_value()
        };
        let (a, b) = (run(&x), run(&y));
        prop_assert_eq!(&a.data()[..(t + 1) * 4], &b.data()[..(t + 1) * 4]);
    }

    #[test]
    fn shifted_windows_never_cross_boundaries(cell in 0usize..64, seed in 0u64..1000) {
        let (store, attn) = store_with(seed, |b| AttentionParams::new(b, "a", 2, 2, 1));
        let p = store.bind(None);
        let cfg = WindowConfig { window: 4, shift: 2 };
        let g = grid(seed, 8, 8, 2);
        let base = window_attention(cfg, &attn, &p, &Var::constant(g.clone())).unwrap().into_value();
        let mut poked = g.clone();
        poked.data_mut()[cell * 2] += 1.0;
        let out = window_attention(cfg, &attn, &p, &Var::constant(poked)).unwrap().into_value();
        let (cy, cx) = (cell / 8, cell % 8);
        for y in 0..8 {
            for x in 0..8 {
                let same = segment(y, 4, 2) == segment(cy, 4, 2) && segment(x, 4, 2) == segment(cx, 4, 2);
                let i = (y * 8 + x) * 2;
                let changed = out.data()[i..i + 2] != base.data()[i..i + 2];
                if !same {
                    prop_assert!(!changed, "({},{}) changed after poking ({},{})", y, x, cy, cx);
                }
            }
        }
    }
}

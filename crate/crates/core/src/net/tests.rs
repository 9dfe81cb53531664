use super::*;
use rand::Rng;

fn random_tensor(h: usize, w: usize, c: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_layer(spec: LayerSpec, seed: u64) -> LayerParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LayerParams {
        spec,
        weight: (0..spec.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        bias: (0..spec.out_channels).map(|_| rng.random_range(-0.5..0.5)).collect(),
    }
}

/// Direct nested-loop convolution / transposed convolution, no ReLU.
fn naive_layer(l: &LayerParams<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let s = &l.spec;
    let (oh, ow) = s.output_size(x.height, x.width).unwrap();
    let (k, cin, cout) = (s.kernel, s.in_channels, s.out_channels);
    let mut out = Tensor::zeros(oh, ow, cout);
    match s.kind {
        LayerKind::Conv => {
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..cout {
                        let mut acc = l.bias[o];
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s.stride + ky * s.dilation) as isize - s.padding as isize;
                                let ix = (ox * s.stride + kx * s.dilation) as isize - s.padding as isize;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                for c in 0..cin {
                                    acc += x.at(iy as usize, ix as usize, c)
                                        * l.weight[((ky * k + kx) * cin + c) * cout + o];
                                }
                            }
                        }
                        out.data[(oy * ow + ox) * cout + o] = acc;
                    }
                }
            }
        }
        LayerKind::TransposeConv => {
            // out[y, x] = Σ in[iy, ix] · w[ky, kx] where y = iy·s − p + ky.
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..cout {
                        let mut acc = l.bias[o];
                        for iy in 0..x.height {
                            for ix in 0..x.width {
                                let ky = oy as isize + s.padding as isize - (iy * s.stride) as isize;
                                let kx = ox as isize + s.padding as isize - (ix * s.stride) as isize;
                                if ky < 0 || kx < 0 || ky >= k as isize || kx >= k as isize {
                                    continue;
                                }
                                for c in 0..cin {
                                    acc += x.at(iy, ix, c)
                                        * l.weight[((c * k + ky as usize) * k + kx as usize) * cout + o];
                                }
                            }
                        }
                        out.data[(oy * ow + ox) * cout + o] = acc;
                    }
                }
            }
        }
    }
    out
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// Step sizes tried in turn; smaller steps are used only where a larger one
/// would carry a ReLU pre-activation across zero.
const EPS: [f64; 3] = [1e-3, 1e-5, 1e-7];

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

fn layer_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(3, 2, 3, 1, 1, false),
        LayerSpec::conv(3, 2, 3, 1, 1, true),
        LayerSpec::conv(3, 2, 3, 2, 1, true),
        LayerSpec::conv(3, 2, 3, 1, 2, true),
        LayerSpec::conv(1, 2, 3, 1, 1, false),
        LayerSpec::transpose_conv(16, 2, 3, 8),
        LayerSpec::transpose_conv(4, 2, 3, 2),
    ]
}

#[test]
fn layers_match_direct_convolution() {
    for (i, spec) in layer_specs().into_iter().enumerate() {
        let l = random_layer(spec, i as u64);
        let x = random_tensor(8, 6, 2, 100 + i as u64);
        let mut expect = naive_layer(&l, &x);
        if spec.relu {
            expect.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let got = l.forward(&x).unwrap();
        assert_eq!(got.shape(), expect.shape(), "{spec:?}");
        for (a, b) in got.data.iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-12, "{spec:?}");
        }
    }
}

#[test]
fn reference_network_matches_layerwise_oracle() {
    let net: Network<f64> = Network::init(&NetworkSpec::reference(2, 3), 5).unwrap();
    let mut net = net;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    net.params_mut().for_each(|p| *p += rng.random_range(-0.05..0.05));
    let x = random_tensor(16, 16, 2, 2);
    let mut y = x.clone();
    for l in &net.layers {
        y = naive_layer(l, &y);
        if l.spec.relu {
            y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    let got = net.forward(&x).unwrap();
    assert_eq!(got.shape(), [16, 16, 3]);
    for (a, b) in got.data.iter().zip(&y.data) {
        assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()));
    }
    // The same weights in f32 agree to single precision.
    let got32 = net.cast::<f32>().forward(&x.cast()).unwrap();
    for (a, b) in got32.data.iter().zip(&y.data) {
        assert!((*a as f64 - b).abs() < 1e-4 * (1.0 + b.abs()));
    }
}

#[test]
fn zero_image_and_zero_biases_give_zero_output() {
    let net: Network<f32> = Network::init(&NetworkSpec::reference(2, 4), 3).unwrap();
    let out = net.forward(&Tensor::zeros(16, 24, 2)).unwrap();
    assert!(out.data.iter().all(|v| *v == 0.0));
}

#[test]
fn identity_1x1_network_copies_its_input() {
    let spec = NetworkSpec {
        input_channels: 2,
        labels: 2,
        layers: vec![LayerSpec::conv(1, 2, 2, 1, 1, false)],
    };
    let mut net: Network<f64> = Network::zeros(&spec).unwrap();
    net.layers[0].weight = vec![1.0, 0.0, 0.0, 1.0];
    let x = random_tensor(8, 8, 2, 9);
    assert_eq!(net.forward(&x).unwrap(), x);
}

#[test]
fn output_resolution_equals_input_for_multiples_of_eight() {
    let spec = NetworkSpec::reference(3, 5);
    for h in (8..=64).step_by(8) {
        for w in [8, 24, 40] {
            assert_eq!(spec.output_size(h, w), Some((h, w)));
        }
    }
    let net: Network<f32> = Network::init(&spec, 0).unwrap();
    assert!(net.forward(&Tensor::zeros(12, 16, 3)).is_err());
    assert!(net.forward(&Tensor::zeros(16, 16, 2)).is_err());
}

#[test]
fn init_is_seeded_and_bounded() {
    let spec = NetworkSpec::reference(2, 3);
    let a: Network<f32> = Network::init(&spec, 11).unwrap();
    let b: Network<f32> = Network::init(&spec, 11).unwrap();
    let c: Network<f32> = Network::init(&spec, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    for l in a.layers.iter().filter(|l| l.spec.kind == LayerKind::Conv) {
        let bound = (6.0 / l.spec.fan_in() as f64).sqrt() as f32;
        assert!(l.weight.iter().all(|w| w.abs() <= bound));
        assert!(l.bias.iter().all(|b| *b == 0.0));
    }
    assert_eq!(a.parameter_count(), spec.parameter_count());
}

#[test]
fn upsampling_starts_bilinear() {
    // A constant coarse map upsamples to the same constant away from the
    // border, and a ramp to a ramp.
    let spec = LayerSpec::transpose_conv(16, 2, 2, 8);
    let net: Network<f64> = Network::init(
        &NetworkSpec {
            input_channels: 2,
            labels: 2,
            layers: vec![spec],
        },
        0,
    )
    .unwrap();
    let l = &net.layers[0];
    let mut x = Tensor::zeros(6, 6, 2);
    for i in 0..6 {
        for j in 0..6 {
            x.data[(i * 6 + j) * 2] = 1.0;
            x.data[(i * 6 + j) * 2 + 1] = j as f64;
        }
    }
    let y = l.forward(&x).unwrap();
    assert_eq!((y.height, y.width), (48, 48));
    for i in 8..40 {
        for j in 8..40 {
            assert!((y.at(i, j, 0) - 1.0).abs() < 1e-12);
            // Output pixel j sits at input coordinate (j + 0.5) / 8 - 0.5.
            let expect = (j as f64 + 0.5) / 8.0 - 0.5;
            assert!((y.at(i, j, 1) - expect).abs() < 1e-12, "{} vs {expect}", y.at(i, j, 1));
        }
    }
}

/// Central differences of `Σ g ⊙ f(θ)` for one layer against its backward.
fn check_layer_gradients(spec: LayerSpec, seed: u64) {
    let l = random_layer(spec, seed);
    let x = random_tensor(8, 8, spec.in_channels, seed + 1);
    let y = l.forward(&x).unwrap();
    let g = random_tensor(y.height, y.width, y.channels, seed + 2);
    let mut grads = LayerParams {
        spec,
        weight: vec![0.0; l.weight.len()],
        bias: vec![0.0; l.bias.len()],
    };
    let dx = l.backward(&x, &y, &g, &mut grads).unwrap();
    let pre = naive_layer(&l, &x);
    // A perturbation that moves a pre-activation across zero breaks the
    // local linearity the difference quotient relies on.
    let safe = |p: &LayerParams<f64>, xx: &Tensor<f64>| {
        let q = naive_layer(p, xx);
        !spec.relu || q.data.iter().zip(&pre.data).all(|(a, b)| (*a > 0.0) == (*b > 0.0))
    };
    let mut skipped = 0;
    let mut checked = 0;
    let n_params = l.weight.len() + l.bias.len();
    for idx in 0..n_params + x.data.len() {
        let analytic = if idx < l.weight.len() {
            grads.weight[idx]
        } else if idx < n_params {
            grads.bias[idx - l.weight.len()]
        } else {
            dx.data[idx - n_params]
        };
        let numeric = EPS.iter().find_map(|&eps| {
            let (mut lp, mut lm) = (l.clone(), l.clone());
            let (mut xp, mut xm) = (x.clone(), x.clone());
            if idx < l.weight.len() {
                lp.weight[idx] += eps;
                lm.weight[idx] -= eps;
            } else if idx < n_params {
                lp.bias[idx - l.weight.len()] += eps;
                lm.bias[idx - l.weight.len()] -= eps;
            } else {
                xp.data[idx - n_params] += eps;
                xm.data[idx - n_params] -= eps;
            }
            (safe(&lp, &xp) && safe(&lm, &xm))
                .then(|| (dot(&g, &lp.forward(&xp).unwrap()) - dot(&g, &lm.forward(&xm).unwrap())) / (2.0 * eps))
        });
        match numeric {
            Some(numeric) => {
                assert!(
                    rel_err(analytic, numeric) < 1e-4,
                    "{spec:?} index {idx}: {analytic} vs {numeric}"
                );
                checked += 1;
            }
            None => skipped += 1,
        }
    }
    assert!(
        skipped * 100 <= checked,
        "{spec:?}: skipped {skipped} of {}",
        skipped + checked
    );
}

#[test]
fn every_layer_type_passes_gradient_check() {
    for (i, spec) in layer_specs().into_iter().enumerate() {
        check_layer_gradients(spec, 40 + i as u64);
    }
}

#[test]
fn end_to_end_gradient_check() {
    let spec = NetworkSpec {
        input_channels: 2,
        labels: 2,
        layers: vec![
            LayerSpec::conv(3, 2, 4, 1, 1, true),
            LayerSpec::conv(3, 4, 4, 2, 1, true),
            LayerSpec::conv(3, 4, 4, 1, 2, true),
            LayerSpec::conv(1, 4, 2, 1, 1, false),
            LayerSpec::transpose_conv(4, 2, 2, 2),
        ],
    };
    let mut net: Network<f64> = Network::init(&spec, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    net.params_mut().for_each(|p| *p += rng.random_range(-0.1..0.1));
    let x = random_tensor(8, 8, 2, 4);
    let cache = net.forward_cached(&x).unwrap();
    let g = random_tensor(8, 8, 2, 5);
    let mut grads = net.zeros_like();
    let dx = net.backward(&cache, &g, &mut grads, true).unwrap().unwrap();
    let pattern = |n: &Network<f64>, xx: &Tensor<f64>| -> Vec<bool> {
        n.forward_cached(xx).unwrap().activations()[1..]
            .iter()
            .flat_map(|t| t.data.iter().map(|v| *v > 0.0))
            .collect()
    };
    let base = pattern(&net, &x);
    let loss = |n: &Network<f64>, xx: &Tensor<f64>| dot(&g, &n.forward(xx).unwrap());
    let analytic: Vec<f64> = grads.params().copied().collect();
    let (mut checked, mut skipped) = (0, 0);
    for (i, a) in analytic.iter().enumerate() {
        let numeric = EPS.iter().find_map(|&eps| {
            let mut np = net.clone();
            let mut nm = net.clone();
            *np.params_mut().nth(i).unwrap() += eps;
            *nm.params_mut().nth(i).unwrap() -= eps;
            (pattern(&np, &x) == base && pattern(&nm, &x) == base)
                .then(|| (loss(&np, &x) - loss(&nm, &x)) / (2.0 * eps))
        });
        match numeric {
            Some(numeric) => {
                assert!(rel_err(*a, numeric) < 1e-4, "param {i}: {a} vs {numeric}");
                checked += 1;
            }
            None => skipped += 1,
        }
    }
    for i in 0..x.data.len() {
        let numeric = EPS.iter().find_map(|&eps| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data[i] += eps;
            xm.data[i] -= eps;
            (pattern(&net, &xp) == base && pattern(&net, &xm) == base)
                .then(|| (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * eps))
        });
        match numeric {
            Some(numeric) => {
                assert!(rel_err(dx.data[i], numeric) < 1e-4, "input {i}");
                checked += 1;
            }
            None => skipped += 1,
        }
    }
    assert!(skipped * 100 <= checked, "skipped {skipped}");
}

#[test]
fn zero_output_gradient_gives_zero_gradients() {
    let net: Network<f64> = Network::init(&NetworkSpec::reference(2, 2), 1).unwrap();
    let x = random_tensor(8, 8, 2, 1);
    let cache = net.forward_cached(&x).unwrap();
    let mut grads = net.zeros_like();
    let dx = net
        .backward(&cache, &Tensor::zeros(8, 8, 2), &mut grads, true)
        .unwrap()
        .unwrap();
    assert!(grads.params().all(|v| *v == 0.0));
    assert!(dx.data.iter().all(|v| *v == 0.0));
    assert!(net.backward(&cache, &Tensor::zeros(8, 8, 3), &mut grads, true).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let net: Network<f32> = Network::init(&NetworkSpec::reference(3, 4), 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.bin");
    save_network(&net, &path).unwrap();
    let back = load_network(&path).unwrap();
    assert!(net.params().zip(back.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(back.spec(), net.spec());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[40] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_network(&path).is_err());
}

#[test]
fn import_adapts_three_channel_first_layer() {
    let mut net: Network<f32> = Network::init(&NetworkSpec::reference(3, 2), 2).unwrap();
    // Make the three input channels of every tap identical.
    let first = &mut net.layers[0];
    let cout = first.spec.out_channels;
    for tap in 0..9 {
        for o in 0..cout {
            let v = first.weight[(tap * 3) * cout + o];
            for c in 0..3 {
                first.weight[(tap * 3 + c) * cout + o] = v;
            }
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rgb.bin");
    save_network(&net, &path).unwrap();
    let adapted = import_weights(&path, 2, 2).unwrap();
    assert_eq!(adapted.input_channels, 2);
    for tap in 0..9 {
        for o in 0..cout {
            let k = net.layers[0].weight[(tap * 3) * cout + o];
            for c in 0..2 {
                assert_eq!(adapted.layers[0].weight[(tap * 2 + c) * cout + o], k);
            }
        }
    }
    assert_eq!(adapted.layers[1..], net.layers[1..]);
    assert!(import_weights(&path, 2, 3).is_err());
}

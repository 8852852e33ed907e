mod common;

use climprobe::attribution::{
    deeplift, deeplift_shap, explain_targets, grad_saliency, guided_backprop, integrated_gradients,
    BaselineSpec, Explainable, Method, PixelTarget,
};
use climprobe::emulator::{receptive_field, Activation, ParamKind};
use climprobe::{Graph, NodeId, Result, Tensor};
use common::{random_model, rng, small_arch, uniform};
use rand::Rng;

/// `out[r, c] = Σ_m Σ_dr Σ_dc k[m, dr, dc] · x[m, r + dr − p, c + dc − p]`.
struct LinearConv {
    kernel: Tensor<f64>,
    shape: [usize; 3],
}

impl Explainable<f64> for LinearConv {
    fn window_shape(&self) -> [usize; 3] {
        self.shape
    }
    fn record(&self, g: &mut Graph<f64>, input: NodeId) -> Result<NodeId> {
        let k = g.param("k", self.kernel.clone(), false);
        let p = self.kernel.shape()[2] / 2;
        g.conv2d(input, k, 1, p)
    }
}

fn linear_case(seed: u64) -> (LinearConv, Tensor<f64>) {
    let mut r = rng(seed);
    let shape = [3, 6, 7];
    let kernel = uniform(&mut r, vec![1, 3, 3, 3], -1.0, 1.0);
    let x = uniform(&mut r, shape.to_vec(), -1.0, 1.0);
    (LinearConv { kernel, shape }, x)
}

/// Gradient oracle for the linear conv: place the kernel around the target.
fn linear_weights(model: &LinearConv, row: usize, col: usize) -> Tensor<f64> {
    let [m, h, w] = model.shape;
    let k = &model.kernel;
    let kk = k.shape()[2];
    let p = kk / 2;
    let mut out = Tensor::zeros(vec![m, h, w]);
    for mo in 0..m {
        for dr in 0..kk {
            for dc in 0..kk {
                let (ir, ic) = (
                    row as i64 + dr as i64 - p as i64,
                    col as i64 + dc as i64 - p as i64,
                );
                if ir >= 0 && ic >= 0 && (ir as usize) < h && (ic as usize) < w {
                    out.data_mut()[(mo * h + ir as usize) * w + ic as usize] =
                        k.data()[(mo * kk + dr) * kk + dc];
                }
            }
        }
    }
    out
}

#[test]
fn linear_model_gradient_is_weights() {
    for seed in 0..5 {
        let (m, x) = linear_case(seed);
        for (r, c) in [(0, 0), (3, 4), (5, 6)] {
            let h = grad_saliency(&m, &x, PixelTarget::new(r, c)).unwrap();
            assert_eq!(h.values, linear_weights(&m, r, c));
        }
    }
}

#[test]
fn linear_model_ig_is_weights_times_input() {
    let (m, x) = linear_case(3);
    let t = PixelTarget::new(2, 3);
    let wx = linear_weights(&m, 2, 3).mul(&x).unwrap();
    for steps in [1, 5, 64] {
        let h = integrated_gradients(&m, &x, t, &BaselineSpec::raw_zero(), steps).unwrap();
        for (a, b) in h.values.data().iter().zip(wx.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let d = deeplift(&m, &x, t, &BaselineSpec::raw_zero()).unwrap();
    for (a, b) in d.values.data().iter().zip(wx.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn saliency_matches_directional_derivative() {
    let model = random_model(&small_arch(), 5, (-0.2, 0.4));
    let mut r = rng(77);
    let x = uniform(&mut r, vec![3, 10, 14], -1.0, 1.0);
    let t = PixelTarget::new(4, 6);
    let h = grad_saliency(&model, &x, t).unwrap();
    let out = |w: &Tensor<f64>| model.forward(w).unwrap().data()[4 * 14 + 6];
    for _ in 0..10 {
        let dir = uniform(&mut r, vec![3, 10, 14], -1.0, 1.0);
        let eps = 1e-6;
        let up = x.add(&dir.scale(eps)).unwrap();
        let down = x.sub(&dir.scale(eps)).unwrap();
        let fd = (out(&up) - out(&down)) / (2.0 * eps);
        let an: f64 = h.values.mul(&dir).unwrap().sum();
        assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "{fd} vs {an}");
    }
}

#[test]
fn guided_equals_gradient_without_relu() {
    let model = random_model(&small_arch(), 6, (-0.5, 0.5)).with_activation(Activation::Identity);
    let x = uniform(&mut rng(1), vec![3, 10, 14], -1.0, 1.0);
    let t = PixelTarget::new(7, 2);
    assert_eq!(
        guided_backprop(&model, &x, t).unwrap().values,
        grad_saliency(&model, &x, t).unwrap().values
    );
}

#[test]
fn guided_equals_gradient_for_positive_network() {
    let mut model = random_model(&small_arch(), 8, (0.1, 0.5));
    let paths: Vec<String> = model.tensors().keys().cloned().collect();
    for p in paths {
        if model.kind(&p) == Some(ParamKind::ConvKernel) {
            let t = model.tensor_mut(&p).unwrap();
            for v in t.data_mut() {
                *v = v.abs();
            }
        }
        if model.kind(&p) == Some(ParamKind::BnRunningMean) {
            model.tensor_mut(&p).unwrap().data_mut().fill(0.0);
        }
    }
    let x = uniform(&mut rng(2), vec![3, 10, 14], 0.1, 1.0);
    for (r, c) in [(0, 0), (5, 5), (9, 13)] {
        let t = PixelTarget::new(r, c);
        assert_eq!(
            guided_backprop(&model, &x, t).unwrap().values,
            grad_saliency(&model, &x, t).unwrap().values
        );
    }
}

#[test]
fn deeplift_sums_to_delta_on_random_models() {
    for seed in 0..4 {
        let model = random_model(&small_arch(), 20 + seed, (-0.3, 0.3));
        let mut r = rng(seed);
        let x = uniform(&mut r, vec![3, 10, 14], -2.0, 2.0);
        let t = PixelTarget::new(r.random_range(0..10), r.random_range(0..14));
        for b in [BaselineSpec::raw_zero(), BaselineSpec::constant(0.7, false)] {
            let h = deeplift(&model, &x, t, &b).unwrap();
            let d = h.delta().unwrap();
            assert!(
                (h.sum() - d).abs() <= 1e-10 * d.abs().max(1e-12),
                "{} vs {d}",
                h.sum()
            );
        }
    }
}

#[test]
fn shap_with_one_or_two_identical_baselines_equals_deeplift() {
    let model = random_model(&small_arch(), 31, (-0.3, 0.3));
    let mut r = rng(4);
    let x = uniform(&mut r, vec![3, 10, 14], -1.0, 1.0);
    let b = uniform(&mut r, vec![3, 10, 14], -1.0, 1.0);
    let t = PixelTarget::new(3, 3);
    let one = BaselineSpec::windows(vec![b.clone()], false);
    let dl = deeplift(&model, &x, t, &one).unwrap();
    assert_eq!(
        deeplift_shap(&model, &x, t, &one).unwrap().values,
        dl.values
    );
    let two = BaselineSpec::windows(vec![b.clone(), b], false);
    assert_eq!(
        deeplift_shap(&model, &x, t, &two).unwrap().values,
        dl.values
    );
}

#[test]
fn shap_is_mean_of_deeplift_maps() {
    let model = random_model(&small_arch(), 32, (-0.3, 0.3));
    let mut r = rng(5);
    let x = uniform(&mut r, vec![3, 10, 14], -1.0, 1.0);
    let b1 = uniform(&mut r, vec![3, 10, 14], -1.0, 1.0);
    let b2 = uniform(&mut r, vec![3, 10, 14], -1.0, 1.0);
    let t = PixelTarget::new(6, 9);
    let d1 = deeplift(
        &model,
        &x,
        t,
        &BaselineSpec::windows(vec![b1.clone()], false),
    )
    .unwrap();
    let d2 = deeplift(
        &model,
        &x,
        t,
        &BaselineSpec::windows(vec![b2.clone()], false),
    )
    .unwrap();
    let s = deeplift_shap(&model, &x, t, &BaselineSpec::windows(vec![b1, b2], false)).unwrap();
    for i in 0..x.len() {
        assert_eq!(
            s.values.data()[i],
            (d1.values.data()[i] + d2.values.data()[i]) / 2.0
        );
    }
}

/// `out = x³` elementwise on a 1×1×1 window.
struct Cube;

impl Explainable<f64> for Cube {
    fn window_shape(&self) -> [usize; 3] {
        [1, 1, 1]
    }
    fn record(&self, g: &mut Graph<f64>, input: NodeId) -> Result<NodeId> {
        let sq = g.mul(input, input)?;
        g.mul(sq, input)
    }
}

#[test]
fn ig_error_shrinks_with_steps_on_smooth_path() {
    let x = Tensor::new(vec![1, 1, 1], vec![1.5]).unwrap();
    let t = PixelTarget::new(0, 0);
    let errs: Vec<f64> = [8, 32, 128]
        .iter()
        .map(|&m| {
            let h = integrated_gradients(&Cube, &x, t, &BaselineSpec::raw_zero(), m).unwrap();
            (h.sum() - h.delta().unwrap()).abs()
        })
        .collect();
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    // trapezoid error for 3α²x³ is x³ / (2m²)
    assert!((errs[0] - 1.5f64.powi(3) / 128.0).abs() < 1e-12);
}

#[test]
fn multi_target_matches_single_calls() {
    let model = random_model(&small_arch(), 40, (-0.3, 0.3));
    let x = uniform(&mut rng(6), vec![3, 10, 14], -1.0, 1.0);
    let targets = [
        PixelTarget::new(0, 1),
        PixelTarget::new(9, 13),
        PixelTarget::new(4, 4),
    ];
    for method in [
        Method::Gradient,
        Method::GuidedBackprop,
        Method::IntegratedGradients { steps: 4 },
        Method::DeepLift,
        Method::DeepLiftShap,
    ] {
        let b = BaselineSpec::raw_zero();
        let many = explain_targets(&model, &x, &targets, method, &b).unwrap();
        for (h, &t) in many.iter().zip(&targets) {
            let one = explain_targets(&model, &x, &[t], method, &b)
                .unwrap()
                .remove(0);
            assert_eq!(h.values, one.values, "{method}");
            assert_eq!(h.output, one.output);
        }
    }
}

#[test]
fn two_pixels_from_one_forward_are_independent() {
    let model = random_model(&small_arch(), 41, (-0.3, 0.3));
    let x = uniform(&mut rng(7), vec![3, 10, 14], -1.0, 1.0);
    let out = model.forward(&x).unwrap();
    let maps = explain_targets(
        &model,
        &x,
        &[PixelTarget::new(1, 1), PixelTarget::new(8, 12)],
        Method::Gradient,
        &BaselineSpec::raw_zero(),
    )
    .unwrap();
    assert_eq!(maps[0].output, out.data()[14 + 1]);
    assert_eq!(maps[1].output, out.data()[8 * 14 + 12]);
    assert_ne!(maps[0].values, maps[1].values);
}

#[test]
fn every_method_is_zero_outside_receptive_field() {
    let arch = small_arch();
    let model = random_model(&arch, 50, (0.0, 0.4));
    let x = uniform(&mut rng(8), vec![3, 10, 14], -1.0, 1.0);
    for (r, c) in [(0, 0), (9, 13), (5, 2)] {
        let t = PixelTarget::new(r, c);
        let rf = receptive_field(&arch, (r, c)).unwrap();
        for method in [
            Method::Gradient,
            Method::GuidedBackprop,
            Method::IntegratedGradients { steps: 8 },
            Method::DeepLift,
            Method::DeepLiftShap,
        ] {
            let h = explain_targets(&model, &x, &[t], method, &BaselineSpec::raw_zero())
                .unwrap()
                .remove(0);
            for (i, v) in h.values.data().iter().enumerate() {
                let (row, col) = ((i / 14) % 10, i % 14);
                if !rf.contains(row, col) {
                    assert_eq!(*v, 0.0, "{method} at ({row},{col}) for target ({r},{c})");
                }
            }
        }
    }
}

#[test]
fn affine_network_methods_agree() {
    let model = random_model(&small_arch(), 60, (-0.5, 0.5)).with_activation(Activation::Identity);
    let mut r = rng(9);
    let x = uniform(&mut r, vec![3, 10, 14], -1.0, 1.0);
    let b = BaselineSpec::constant(0.3, false);
    let t = PixelTarget::new(5, 7);
    let g = grad_saliency(&model, &x, t).unwrap();
    let gx = g
        .values
        .mul(&x.sub(&Tensor::full(vec![3, 10, 14], 0.3)).unwrap())
        .unwrap();
    let ig = integrated_gradients(&model, &x, t, &b, 16).unwrap();
    let dl = deeplift(&model, &x, t, &b).unwrap();
    let sh = deeplift_shap(&model, &x, t, &b).unwrap();
    let scale = gx.max_abs();
    for other in [&ig.values, &dl.values, &sh.values] {
        let diff = other.sub(&gx).unwrap().max_abs();
        assert!(diff <= 1e-10 * scale, "{diff:e}");
    }
    assert!((dl.sum() - dl.delta().unwrap()).abs() < 1e-10);
}

#[test]
fn standardized_zero_baseline_is_norm_mean() {
    let mut model = random_model(&small_arch(), 70, (-0.3, 0.3));
    model.set_norm_stats(Some(climprobe::emulator::NormStats {
        mean: 1.25,
        std: 0.5,
    }));
    let x = uniform(&mut rng(10), vec![3, 10, 14], 0.0, 2.0);
    let t = PixelTarget::new(2, 2);
    let a = deeplift(&model, &x, t, &BaselineSpec::zero()).unwrap();
    let b = deeplift(&model, &x, t, &BaselineSpec::constant(1.25, false)).unwrap();
    assert_eq!(a.values, b.values);
    assert!(a.baseline.as_ref().unwrap().standardized);
    assert!(!b.baseline.as_ref().unwrap().standardized);
}

#[test]
fn heatmap_export_round_trips() {
    let model = random_model(&small_arch(), 80, (-0.3, 0.3));
    let x = uniform(&mut rng(11), vec![3, 10, 14], -1.0, 1.0);
    let h = deeplift(&model, &x, PixelTarget::new(1, 2), &BaselineSpec::zero())
        .unwrap()
        .with_sample(4);
    let dir = tempfile::tempdir().unwrap();
    let (fsr, json) = h.export(dir.path(), "h").unwrap();
    let back = climprobe::data::read_series(fsr).unwrap();
    let expect: Vec<f32> = h.values.data().iter().map(|&v| v as f32).collect();
    assert_eq!(back.values(), expect.as_slice());
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(json).unwrap()).unwrap();
    assert_eq!(meta["sample"], 4);
    assert_eq!(meta["method_tag"], "deeplift");
}

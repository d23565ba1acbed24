use ova::net::{classify, Detector, DetectorConfig, GateForm, SHARED_BIAS};
use ova::numeric::{ParamStore, Tape, Tensor};
use ova::text::embed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(fpn_dim: usize, form: GateForm) -> DetectorConfig {
    let mut c = DetectorConfig::default();
    c.backbone.channels = vec![6, 8, 12];
    c.fpn.dim = fpn_dim;
    c.cls_dim = 12;
    c.head.depth = 2;
    c.apa.enabled = true;
    c.apa.gate_form = form;
    c
}

fn random_image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        [3, h, w],
        (0..3 * h * w).map(|_| rng.random::<f32>()).collect(),
    )
    .unwrap()
}

/// Final backbone map `[C, h, w]` evaluated on its own tape.
fn final_backbone(det: &Detector, params: &ParamStore, img: &Tensor) -> (Vec<usize>, Vec<f32>) {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape).unwrap();
    let x = det.input(&mut tape, img).unwrap();
    let feats = det.backbone(&mut tape, &bound, x).unwrap();
    let last = *feats.last().unwrap();
    (tape.shape(last)[1..].to_vec(), tape.data(last).to_vec())
}

/// Checks every location's classification feature against the nearest
/// resampling of the final backbone feature, cropped to `fpn_dim` channels.
fn check_alignment(fpn_dim: usize, form: GateForm, seed: u64) {
    let cfg = config(fpn_dim, form);
    let det = Detector::new(cfg.clone()).unwrap();
    let params = det.init_params(seed).unwrap();
    let img = random_image(seed + 100, 32, 48);
    let (shape, feat) = final_backbone(&det, &params, &img);
    let (c, th, tw) = (shape[0], shape[1], shape[2]);
    let bias = params.get(SHARED_BIAS).unwrap().item();

    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape).unwrap();
    let out = det.forward(&mut tape, &bound, &img).unwrap();
    let query = embed(
        &ova::text::QueryText::new("A photo of a red ring").unwrap(),
        cfg.cls_dim,
    )
    .unwrap();
    let top = out.levels.len() - 1;
    for (li, level) in out.levels.iter().enumerate() {
        let shift = top - li;
        let cls = tape.data(level.cls_feat);
        for y in 0..level.h {
            for x in 0..level.w {
                let (ty, tx) = (y >> shift, x >> shift);
                assert!(ty < th && tx < tw);
                let expected: Vec<f32> = (0..cfg.cls_dim)
                    .map(|k| {
                        if k < fpn_dim {
                            feat[(k * th + ty) * tw + tx]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let row =
                    &cls[(y * level.w + x) * cfg.cls_dim..(y * level.w + x + 1) * cfg.cls_dim];
                assert_eq!(row, expected.as_slice(), "level {li} at ({y},{x})");
                let oracle: f64 = (0..fpn_dim.min(c))
                    .map(|k| f64::from(feat[(k * th + ty) * tw + tx]) * f64::from(query[k]))
                    .sum::<f64>()
                    + f64::from(bias);
                let logit = classify(row, &query, bias).unwrap();
                assert!((f64::from(logit) - oracle).abs() <= 1e-5);
            }
        }
    }
}

#[test]
fn aligned_at_init_equal_dims() {
    for seed in 0..3 {
        check_alignment(12, GateForm::Subtractive, seed);
        check_alignment(12, GateForm::Flamingo, seed);
    }
}

#[test]
fn aligned_at_init_cropped() {
    check_alignment(8, GateForm::Subtractive, 7);
}

#[test]
fn blocked_branches_do_not_affect_classification_features() {
    let cfg = config(12, GateForm::Subtractive);
    let det = Detector::new(cfg).unwrap();
    let params = det.init_params(3).unwrap();
    let img = random_image(9, 32, 32);
    let run = |p: &ParamStore| {
        let mut tape = Tape::<f32>::new();
        let bound = p.bind(&mut tape).unwrap();
        let out = det.forward(&mut tape, &bound, &img).unwrap();
        out.levels
            .iter()
            .map(|l| tape.data(l.cls_feat).to_vec())
            .collect::<Vec<_>>()
    };
    let before = run(&params);
    let mut perturbed = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let prefixes = det.gated_branch_prefixes();
    for name in perturbed.names().to_vec() {
        if prefixes.iter().any(|p| name.starts_with(p)) && !name.ends_with(".gate") {
            for v in perturbed.get_mut(&name).unwrap().data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }
    assert_eq!(before, run(&perturbed));
}

#[test]
fn gate_derivative_at_zero_is_branch_difference() {
    // d/da [x (1 - tan a) + y tan a] at a = 0 is y - x; check by differences
    let x = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
    let y = Tensor::from_vec(vec![1.5, 3.0, -2.0]);
    let eps = 1e-3f32;
    let hi = ova::net::apply_gate(&x, &y, eps, GateForm::Subtractive).unwrap();
    let lo = ova::net::apply_gate(&x, &y, -eps, GateForm::Subtractive).unwrap();
    for i in 0..3 {
        let numeric = (hi.data()[i] - lo.data()[i]) / (2.0 * eps);
        let expected = y.data()[i] - x.data()[i];
        assert!((numeric - expected).abs() < 1e-2, "{numeric} vs {expected}");
    }
}

#[test]
fn every_parameter_is_reached_by_backward() {
    for apa in [false, true] {
        let mut cfg = config(12, GateForm::Subtractive);
        cfg.apa.enabled = apa;
        let det = Detector::new(cfg).unwrap();
        let mut params = det.init_params(11).unwrap();
        if apa {
            // open the gates slightly so blocked branches carry gradient
            for g in det.gate_names() {
                params.get_mut(&g).unwrap().data_mut()[0] = 0.1;
            }
        }
        let img = random_image(2, 32, 32);
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape).unwrap();
        let out = det.forward(&mut tape, &bound, &img).unwrap();
        let (b, q, c) = out.concat(&mut tape).unwrap();
        let parts = [b, q, c].map(|v| tape.mean(v).unwrap());
        let s1 = tape.add(parts[0], parts[1]).unwrap();
        let s2 = tape.add(s1, parts[2]).unwrap();
        let bias = out.bias;
        let loss = tape.add(s2, bias).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (name, &v) in params.names().iter().zip(bound.vars()) {
            let g = grads.wrt(&tape, v);
            assert!(
                g.is_some_and(|g| g.norm() > 0.0),
                "apa={apa}: no gradient for {name}"
            );
        }
    }
}

#[test]
fn f64_replay_matches_f32() {
    let det = Detector::new(config(12, GateForm::Subtractive)).unwrap();
    let params = det.init_params(1).unwrap();
    let img = random_image(4, 16, 16);
    let mut t32 = Tape::<f32>::new();
    let b32 = params.bind(&mut t32).unwrap();
    let o32 = det.forward(&mut t32, &b32, &img).unwrap();
    let mut t64 = Tape::<f64>::new();
    let b64 = params.bind(&mut t64).unwrap();
    let o64 = det.forward(&mut t64, &b64, &img).unwrap();
    for (a, b) in o32.levels.iter().zip(&o64.levels) {
        for (x, y) in t32.data(a.boxes).iter().zip(t64.data(b.boxes)) {
            assert!((f64::from(*x) - y).abs() < 1e-4 * y.abs().max(1.0));
        }
    }
}

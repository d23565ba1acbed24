use ova::assign::{
    atss_assign, build_targets, focal_loss, focal_loss_sum, giou_loss, giou_loss_sum, quality_loss,
    quality_loss_sum, total_loss, AtssConfig, Cell, GroundTruth, LossTermSet, LossWeights,
    TargetMatrix, TargetMode,
};
use ova::geom::{locations, Bbox, LevelGrid, Location};
use ova::net::{DenseOutputs, LevelOutput};
use ova::numeric::{grad_check, Real, Tape, Tensor, Var};
use ova::text::EmbeddingBank;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Applies the assignment rule to every (location, ground truth) pair directly.
fn atss_oracle(locs: &[Location], gts: &[Bbox], k: usize, scale: f32) -> Vec<Option<usize>> {
    let mut claims: Vec<Vec<(usize, f64)>> = vec![Vec::new(); locs.len()];
    for (g, gt) in gts.iter().enumerate() {
        let (gx, gy) = ((gt.x1 + gt.x2) / 2.0, (gt.y1 + gt.y2) / 2.0);
        let d = |l: &Location| {
            let dx = f64::from(l.cx) - f64::from(gx);
            let dy = f64::from(l.cy) - f64::from(gy);
            dx * dx + dy * dy
        };
        let is_candidate = |i: usize| {
            let ahead = (0..locs.len())
                .filter(|&j| locs[j].level == locs[i].level)
                .filter(|&j| d(&locs[j]) < d(&locs[i]) || (d(&locs[j]) == d(&locs[i]) && j < i))
                .count();
            ahead < k
        };
        let anchor_iou = |l: &Location| {
            let h = scale * l.stride as f32 / 2.0;
            let a = Bbox::new(l.cx - h, l.cy - h, l.cx + h, l.cy + h);
            let iw = (f64::from(a.x2.min(gt.x2)) - f64::from(a.x1.max(gt.x1))).max(0.0);
            let ih = (f64::from(a.y2.min(gt.y2)) - f64::from(a.y1.max(gt.y1))).max(0.0);
            let inter = iw * ih;
            inter / (a.area() + gt.area() - inter)
        };
        let cands: Vec<usize> = (0..locs.len()).filter(|&i| is_candidate(i)).collect();
        let ious: Vec<f64> = cands.iter().map(|&i| anchor_iou(&locs[i])).collect();
        let n = ious.len() as f64;
        let mean = ious.iter().sum::<f64>() / n;
        let std = if ious.len() > 1 {
            (ious.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        for (&i, &iou) in cands.iter().zip(&ious) {
            let l = &locs[i];
            let inside = l.cx > gt.x1 && l.cx < gt.x2 && l.cy > gt.y1 && l.cy < gt.y2;
            if iou >= mean + std && inside {
                claims[i].push((g, iou));
            }
        }
    }
    claims
        .into_iter()
        .map(|c| {
            let mut best: Option<(usize, f64)> = None;
            for (g, iou) in c {
                if best.is_none() || iou > best.unwrap().1 {
                    best = Some((g, iou));
                }
            }
            best.map(|b| b.0)
        })
        .collect()
}

fn random_scene(rng: &mut ChaCha8Rng) -> (Vec<Location>, Vec<Bbox>) {
    let h = rng.random_range(1..=8usize);
    let w = rng.random_range(1..=8usize);
    let mut grids = vec![LevelGrid { stride: 4, h, w }];
    if rng.random_bool(0.5) {
        grids.push(LevelGrid {
            stride: 8,
            h: h.div_ceil(2),
            w: w.div_ceil(2),
        });
    }
    let (iw, ih) = ((w * 4) as f32, (h * 4) as f32);
    let gts = (0..rng.random_range(0..=3))
        .map(|_| {
            let x1 = rng.random_range(0.0..iw - 1.0);
            let y1 = rng.random_range(0.0..ih - 1.0);
            let x2 = rng.random_range(x1 + 1.0..=iw);
            let y2 = rng.random_range(y1 + 1.0..=ih);
            // quantize to make center-distance ties common
            Bbox::new(x1.floor(), y1.floor(), x2.ceil(), y2.ceil())
        })
        .collect();
    (locations(&grids), gts)
}

#[test]
fn atss_matches_exhaustive_oracle() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..4 {
            let (locs, gts) = random_scene(&mut rng);
            for k in [1, 3, 9] {
                let cfg = AtssConfig {
                    k,
                    anchor_scale: 4.0,
                };
                let got = atss_assign(&locs, &gts, &cfg).unwrap();
                assert_eq!(
                    got.gt_of,
                    atss_oracle(&locs, &gts, k, 4.0),
                    "seed {seed}, k {k}, gts {gts:?}"
                );
            }
        }
    }
}

#[test]
fn disjoint_ground_truths_get_disjoint_nonempty_sets() {
    let locs = locations(&[LevelGrid {
        stride: 4,
        h: 8,
        w: 8,
    }]);
    let gts = [
        Bbox::new(0.0, 0.0, 12.0, 12.0),
        Bbox::new(20.0, 20.0, 32.0, 32.0),
    ];
    let a = atss_assign(&locs, &gts, &AtssConfig::default()).unwrap();
    assert_eq!(a.gt_of, atss_oracle(&locs, &gts, 9, 4.0));
    let set = |g: usize| {
        a.positives()
            .filter(|p| p.1 == g)
            .map(|p| p.0)
            .collect::<Vec<_>>()
    };
    assert!(!set(0).is_empty() && !set(1).is_empty());
    assert!(set(0).iter().all(|i| !set(1).contains(i)));
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

#[test]
fn focal_gradients() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells: Vec<Cell> = (0..12)
            .map(|_| [Cell::Positive, Cell::Negative, Cell::Ignore][rng.random_range(0..3)])
            .collect();
        let x = rand_tensor(&mut rng, &[3, 4], -4.0, 4.0);
        let r = grad_check(
            |t, v| focal_loss_sum(t, v[0], &cells, 2.0, 0.25),
            &[x],
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(r.passed(), "seed {seed}: {r:?}");
    }
}

#[test]
fn giou_gradients() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target: Vec<[f32; 4]> = (0..3)
            .map(|_| [0; 4].map(|_| rng.random_range(0.5..6.0)))
            .collect();
        let pred = rand_tensor(&mut rng, &[3, 4], 0.5, 6.0);
        let r = grad_check(|t, v| giou_loss_sum(t, v[0], &target), &[pred], 1e-3, 1e-3).unwrap();
        assert!(r.passed(), "seed {seed}: {r:?}");
    }
}

#[test]
fn quality_gradients() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        let q = rand_tensor(&mut rng, &[5], -3.0, 3.0);
        let r = grad_check(|t, v| quality_loss_sum(t, v[0], &targets), &[q], 1e-3, 1e-3).unwrap();
        assert!(r.passed(), "seed {seed}: {r:?}");
    }
}

const DIM: usize = 8;

/// One 4x4 level at stride 4 built straight from tape variables.
fn toy_outputs(boxes: Var, quality: Var, cls: Var, bias: Var) -> DenseOutputs {
    DenseOutputs {
        levels: vec![LevelOutput {
            stride: 4,
            h: 4,
            w: 4,
            boxes,
            quality,
            cls_feat: cls,
        }],
        bias,
    }
}

struct Toy {
    boxes: Tensor,
    quality: Tensor,
    cls: Tensor,
    bias: Tensor,
    targets: TargetMatrix,
    emb: Vec<Vec<f32>>,
}

fn toy_scene(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let queries = vec!["a red ring".to_string(), "a blue star".to_string()];
    let bank = EmbeddingBank::for_texts(&queries, DIM, 1, 0.0, 0).unwrap();
    let locs = locations(&[LevelGrid {
        stride: 4,
        h: 4,
        w: 4,
    }]);
    // redraw until the single-level rule yields positives
    let (gts, asg) = loop {
        let (a, b) = (rng.random_range(3.0..5.0), rng.random_range(3.0..6.0));
        let gts = vec![GroundTruth {
            bbox: Bbox::new(6.0 - a, 10.0 - b, 6.0 + a, 10.0 + b),
            query: queries[seed as usize % 2].clone(),
        }];
        let asg = atss_assign(&locs, &[gts[0].bbox], &AtssConfig::default()).unwrap();
        if asg.num_positives() > 0 {
            break (gts, asg);
        }
    };
    let targets = build_targets(&asg, &gts, &queries, TargetMode::Supervised, &bank).unwrap();
    Toy {
        boxes: rand_tensor(&mut rng, &[16, 4], 1.0, 9.0),
        quality: rand_tensor(&mut rng, &[16], -2.0, 2.0),
        cls: rand_tensor(&mut rng, &[16, DIM], -1.0, 1.0),
        bias: Tensor::scalar(-1.5),
        targets,
        emb: queries
            .iter()
            .map(|q| bank.base(q).unwrap().to_vec())
            .collect(),
    }
}

fn toy_loss<T: Real>(
    tape: &mut Tape<T>,
    v: &[Var],
    toy: &Toy,
    w: &LossWeights,
) -> ova::Result<Var> {
    let out = toy_outputs(v[0], v[1], v[2], v[3]);
    let emb: Vec<&[f32]> = toy.emb.iter().map(Vec::as_slice).collect();
    Ok(total_loss(tape, &out, &toy.targets, &emb, w, LossTermSet::AllThree)?.total)
}

#[test]
fn total_loss_matches_scalar_oracle() {
    for seed in 0..5 {
        let toy = toy_scene(seed);
        let w = LossWeights::default();
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = [&toy.boxes, &toy.quality, &toy.cls, &toy.bias]
            .iter()
            .map(|t| tape.variable(t).unwrap())
            .collect();
        let loss = toy_loss(&mut tape, &vars, &toy, &w).unwrap();
        let got = tape.item(loss);

        let locs = locations(&[LevelGrid {
            stride: 4,
            h: 4,
            w: 4,
        }]);
        let b = f64::from(toy.bias.item());
        let npos = toy.targets.positives.len();
        let mut focal = 0.0;
        for l in 0..16 {
            for q in 0..2 {
                let logit: f64 = (0..DIM)
                    .map(|d| f64::from(toy.cls.data()[l * DIM + d]) * f64::from(toy.emb[q][d]))
                    .sum::<f64>()
                    + b;
                match toy.targets.get(l, q) {
                    Cell::Positive => focal += focal_loss(logit, true, 2.0, 0.25),
                    Cell::Negative => focal += focal_loss(logit, false, 2.0, 0.25),
                    Cell::Ignore => {}
                }
            }
        }
        let mut giou = 0.0;
        let mut qual = 0.0;
        for (l, gt) in &toy.targets.positives {
            let d = &toy.boxes.data()[l * 4..l * 4 + 4];
            let pred = locs[*l].decode([d[0], d[1], d[2], d[3]]);
            giou += giou_loss(&pred, gt).unwrap();
            qual += quality_loss(f64::from(toy.quality.data()[*l]), &pred, gt).unwrap();
        }
        let expected = (focal + giou + qual) / npos as f64;
        assert!(
            (got - expected).abs() < 1e-5,
            "seed {seed}: {got} vs {expected}"
        );
    }
}

#[test]
fn total_loss_gradients() {
    for seed in 0..5 {
        let toy = toy_scene(seed);
        // The IoU target of the quality term is a stop-gradient, which finite
        // differences cannot see; check box paths with that term off, then the
        // quality path with boxes held fixed.
        let no_quality = LossWeights {
            quality: 0.0,
            ..LossWeights::default()
        };
        let inputs = [
            toy.boxes.clone(),
            toy.quality.clone(),
            toy.cls.clone(),
            toy.bias.clone(),
        ];
        let r = grad_check(
            |t, v| toy_loss(t, v, &toy, &no_quality),
            &inputs,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(r.passed(), "seed {seed}: {r:?}");

        let w = LossWeights::default();
        let r = grad_check(
            |t, v| {
                let boxes = t.constant(&toy.boxes)?;
                toy_loss(t, &[boxes, v[0], v[1], v[2]], &toy, &w)
            },
            &inputs[1..],
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(r.passed(), "seed {seed}: {r:?}");
    }
}

#[test]
fn empty_scene_has_zero_loss() {
    let bank = EmbeddingBank::for_texts(&["x".to_string()], DIM, 1, 0.0, 0).unwrap();
    let asg = ova::assign::Assignment::all_negative(16);
    let targets = build_targets(&asg, &[], &[], TargetMode::Supervised, &bank).unwrap();
    let mut tape = Tape::<f64>::new();
    let v: Vec<Var> = [
        Tensor::full([16, 4], 2.0),
        Tensor::zeros([16]),
        Tensor::zeros([16, DIM]),
        Tensor::scalar(-4.6),
    ]
    .iter()
    .map(|t| tape.variable(t).unwrap())
    .collect();
    let out = toy_outputs(v[0], v[1], v[2], v[3]);
    let l = total_loss(
        &mut tape,
        &out,
        &targets,
        &[],
        &LossWeights::default(),
        LossTermSet::AllThree,
    )
    .unwrap();
    assert_eq!(tape.item(l.total), 0.0);
    assert!(tape.backward(l.total).is_ok());
}

#[test]
fn perfect_prediction_has_vanishing_loss() {
    let queries = vec!["a red ring".to_string()];
    let bank = EmbeddingBank::for_texts(&queries, DIM, 1, 0.0, 0).unwrap();
    let e = bank.base(&queries[0]).unwrap().to_vec();
    let locs = locations(&[LevelGrid {
        stride: 4,
        h: 4,
        w: 4,
    }]);
    let gt = Bbox::new(4.0, 4.0, 12.0, 12.0);
    let asg = atss_assign(&locs, &[gt], &AtssConfig::default()).unwrap();
    let gts = [GroundTruth {
        bbox: gt,
        query: queries[0].clone(),
    }];
    let targets = build_targets(&asg, &gts, &queries, TargetMode::Supervised, &bank).unwrap();
    let mut boxes = vec![1.0f32; 64];
    let mut quality = vec![0.0f32; 16];
    let mut cls = vec![0.0f32; 16 * DIM];
    for l in 0..16 {
        let sign = if asg.gt_of[l].is_some() { 60.0 } else { -60.0 };
        for d in 0..DIM {
            cls[l * DIM + d] = sign * e[d];
        }
        if asg.gt_of[l].is_some() {
            boxes[l * 4..l * 4 + 4].copy_from_slice(&locs[l].encode(&gt));
            quality[l] = 40.0;
        }
    }
    let mut tape = Tape::<f64>::new();
    let v: Vec<Var> = [
        Tensor::new([16, 4], boxes).unwrap(),
        Tensor::new([16], quality).unwrap(),
        Tensor::new([16, DIM], cls).unwrap(),
        Tensor::scalar(0.0),
    ]
    .iter()
    .map(|t| tape.variable(t).unwrap())
    .collect();
    let out = toy_outputs(v[0], v[1], v[2], v[3]);
    let l = total_loss(
        &mut tape,
        &out,
        &targets,
        &[&e],
        &LossWeights::default(),
        LossTermSet::AllThree,
    )
    .unwrap();
    assert!(tape.item(l.total) < 1e-6, "{}", tape.item(l.total));
}

proptest! {
    #[test]
    fn giou_loss_range(a in prop::array::uniform4(0.0f32..20.0), b in prop::array::uniform4(0.0f32..20.0)) {
        let pred = Bbox::new(a[0].min(a[2]), a[1].min(a[3]), a[0].max(a[2]) + 0.1, a[1].max(a[3]) + 0.1);
        let gt = Bbox::new(b[0].min(b[2]), b[1].min(b[3]), b[0].max(b[2]) + 0.1, b[1].max(b[3]) + 0.1);
        let l = giou_loss(&pred, &gt).unwrap();
        prop_assert!((0.0..2.0).contains(&l));
        let hull = pred.hull(&gt);
        let union = pred.area() + gt.area() - pred.intersection(&gt);
        if (hull.area() - union).abs() < 1e-9 {
            prop_assert!((l - (1.0 - pred.iou(&gt))).abs() < 1e-9);
        }
    }

    #[test]
    fn nested_boxes_reduce_to_iou(x in 0.0f32..5.0, y in 0.0f32..5.0, w in 1.0f32..10.0, h in 1.0f32..10.0, s in 0.1f32..1.0) {
        let outer = Bbox::new(x, y, x + w, y + h);
        let inner = Bbox::new(x, y, x + w * s, y + h * s);
        let l = giou_loss(&inner, &outer).unwrap();
        prop_assert!((l - (1.0 - inner.iou(&outer))).abs() < 1e-6);
    }

    #[test]
    fn one_positive_per_row(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (locs, boxes) = random_scene(&mut rng);
        let names = ["q0", "q1", "q2", "q3"].map(String::from).to_vec();
        let bank = EmbeddingBank::for_texts(&names, 8, 1, 0.0, 0).unwrap();
        let gts: Vec<GroundTruth> = boxes
            .iter()
            .map(|b| GroundTruth { bbox: *b, query: names[rng.random_range(0..3)].clone() })
            .collect();
        let asg = atss_assign(&locs, &boxes, &AtssConfig::default()).unwrap();
        for mode in [TargetMode::Supervised, TargetMode::BatchNegatives, TargetMode::NoBatchNegatives] {
            let t = build_targets(&asg, &gts, &names, mode, &bank).unwrap();
            for l in 0..locs.len() {
                prop_assert!(t.row(l).iter().filter(|&&c| c == Cell::Positive).count() <= 1);
            }
        }
    }

    #[test]
    fn total_loss_ignores_query_order(seed in 0u64..200) {
        let toy = toy_scene(seed);
        let w = LossWeights::default();
        let eval = |targets: &TargetMatrix, emb: &[Vec<f32>]| {
            let mut tape = Tape::<f64>::new();
            let v: Vec<Var> = [&toy.boxes, &toy.quality, &toy.cls, &toy.bias]
                .iter()
                .map(|t| tape.variable(t).unwrap())
                .collect();
            let out = toy_outputs(v[0], v[1], v[2], v[3]);
            let e: Vec<&[f32]> = emb.iter().map(Vec::as_slice).collect();
            let l = total_loss(&mut tape, &out, targets, &e, &w, LossTermSet::AllThree).unwrap();
            tape.item(l.total)
        };
        let base = eval(&toy.targets, &toy.emb);
        let swapped = toy.targets.permute_queries(&[1, 0]);
        let emb = vec![toy.emb[1].clone(), toy.emb[0].clone()];
        prop_assert!((base - eval(&swapped, &emb)).abs() < 1e-9);
    }
}

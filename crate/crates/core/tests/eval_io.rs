use std::collections::BTreeMap;

use echoloop::config::ExperimentConfig;
use echoloop::env::{ScenarioKind, Split};
use echoloop::eval::{
    self, export_agent, export_coco, export_detector, ingest_agent_str, ingest_coco_str, ingest_detector_str,
    match_instances, GroundTruthSet, Instance, Mode,
};
use echoloop::geometry::{iou, BBox};
use echoloop::grpo;
use echoloop::reward::GroundedOutput;
use echoloop::Category;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn held_out(n: u64) -> (ExperimentConfig, Vec<grpo::Episode>) {
    let cfg = ExperimentConfig {
        eval: grpo::EvalConfig {
            episodes: n,
            ..Default::default()
        },
        ..Default::default()
    };
    let work = cfg.workload("dense").unwrap();
    let params = cfg.init.build(6);
    let plan = cfg.phase_plan().unwrap();
    let eps = grpo::evaluate_episodes(&params, &work, Split::Val, plan.final_profile(), &cfg.eval).unwrap();
    (cfg, eps)
}

#[test]
fn coco_round_trip_is_identity() {
    let cfg = ExperimentConfig::default();
    let work = cfg.workload("sparse").unwrap();
    let scenes: Vec<_> = work
        .stream(Split::Test, ScenarioKind::Diagnosis)
        .unwrap()
        .take(0, 300)
        .unwrap()
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    let text = serde_json::to_string(&export_coco(&scenes)).unwrap();
    let (gt, _) = ingest_coco_str(&text).unwrap();
    assert_eq!(gt.num_categories, 6);
    assert_eq!(gt.images.len(), scenes.len());
    for s in &scenes {
        let inst = &gt.images[&s.image_id];
        match &s.gt {
            None => assert!(inst.is_empty()),
            Some((b, c)) => {
                assert_eq!(inst.len(), 1);
                assert_eq!(inst[0].category, *c);
                for (x, y) in inst[0].bbox.corners().iter().zip(b.corners()) {
                    assert!((x - y).abs() <= 1e-9);
                }
            }
        }
    }
}

#[test]
fn perfect_predictions_score_one() {
    let (_, eps) = held_out(200);
    let scenes: Vec<_> = eps.iter().map(|e| e.scene.clone()).collect();
    let (gt, _) = ingest_coco_str(&serde_json::to_string(&export_coco(&scenes)).unwrap()).unwrap();
    let records: Vec<_> = scenes
        .iter()
        .map(|s| {
            let out = match s.gt {
                Some((b, c)) => GroundedOutput::new(b, c),
                None => GroundedOutput::negative(),
            };
            (s.image_id, out)
        })
        .collect();
    let preds = ingest_agent_str(&export_agent(&records), 6).unwrap();
    let r = eval::evaluate(&gt, &preds, Mode::Agent, &eval::DEFAULT_THRESHOLDS).unwrap();
    for t in &r.grounding {
        assert_eq!((t.instance_f1, t.image_accuracy), (1.0, 1.0));
    }
    assert_eq!(r.diagnosis.overall_accuracy, 1.0);
}

#[test]
fn modes_differ_exactly_where_labels_differ() {
    let (_, eps) = held_out(300);
    let scenes: Vec<_> = eps.iter().map(|e| e.scene.clone()).collect();
    let (gt, frame) = ingest_coco_str(&serde_json::to_string(&export_coco(&scenes)).unwrap()).unwrap();
    let agent: Vec<_> = eps.iter().map(|e| (e.scene.image_id, e.trajectory.output)).collect();
    let det: Vec<_> = eps.iter().map(|e| (e.scene.image_id, e.response.detections.clone())).collect();
    let pa = ingest_agent_str(&export_agent(&agent), 6).unwrap();
    let pd = ingest_detector_str(&serde_json::to_string(&export_detector(&det)).unwrap(), &frame).unwrap();
    let ra = eval::diagnosis_accuracy(&gt, &pa).unwrap();
    let rd = eval::diagnosis_accuracy(&gt, &pd).unwrap();
    let mut delta = 0i64;
    for e in &eps {
        let truth = e.scene.label();
        let a = e.trajectory.action.category;
        if a != e.tool_top1 {
            delta += i64::from(a == truth) - i64::from(e.tool_top1 == truth);
        }
    }
    assert_eq!(ra.correct as i64 - rd.correct as i64, delta);
    let top1_correct = eps.iter().filter(|e| e.tool_top1 == e.scene.label()).count();
    assert_eq!(rd.correct, top1_correct);
}

#[test]
fn always_empty_detector_scores_the_negative_fraction() {
    let (_, eps) = held_out(300);
    let scenes: Vec<_> = eps.iter().map(|e| e.scene.clone()).collect();
    let (gt, frame) = ingest_coco_str(&serde_json::to_string(&export_coco(&scenes)).unwrap()).unwrap();
    let preds = ingest_detector_str("[]", &frame).unwrap();
    let r = eval::diagnosis_accuracy(&gt, &preds).unwrap();
    let negatives = scenes.iter().filter(|s| s.gt.is_none()).count();
    assert_eq!(r.overall_accuracy, negatives as f64 / scenes.len() as f64);
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x: f64 = rng.random_range(0.0..0.5);
    let y: f64 = rng.random_range(0.0..0.5);
    BBox::new(x, y, x + rng.random_range(0.1..0.5), y + rng.random_range(0.1..0.5)).unwrap()
}

fn max_matching(gt: &[Instance], preds: &[Instance], tau: f64) -> usize {
    let ok = |g: usize, p: usize| gt[g].category == preds[p].category && iou(&gt[g].bbox, &preds[p].bbox) >= tau;
    let straight = usize::from(ok(0, 0)) + usize::from(ok(1, 1));
    let crossed = usize::from(ok(0, 1)) + usize::from(ok(1, 0));
    let any = usize::from((0..2).any(|g| (0..2).any(|p| ok(g, p))));
    straight.max(crossed).max(any)
}

#[test]
fn greedy_matching_is_optimal_above_half_overlap() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50_000 {
        let mut inst = || Instance {
            bbox: random_box(&mut rng),
            category: Category(1),
        };
        let g = [inst(), inst()];
        let p = [inst(), inst()];
        let greedy = match_instances(&g, &p, 0.75);
        assert_eq!(greedy.len(), max_matching(&g, &p, 0.75));
        for tau in [0.25, 0.5] {
            assert!(match_instances(&g, &p, tau).len() <= max_matching(&g, &p, tau));
        }
    }
}

#[test]
fn greedy_matching_can_lose_a_pair_at_low_thresholds() {
    let b = |x1, y1, x2, y2| Instance {
        bbox: BBox::new(x1, y1, x2, y2).unwrap(),
        category: Category(1),
    };
    // g0 overlaps p0 best, but p0 is g1's only partner at τ = 0.25.
    let g = [b(0.0, 0.0, 0.4, 0.4), b(0.3, 0.0, 0.7, 0.4)];
    let p = [b(0.1, 0.0, 0.5, 0.4), b(0.0, 0.0, 0.2, 0.4)];
    assert_eq!(match_instances(&g, &p, 0.25), vec![(0, 0)]);
    assert_eq!(max_matching(&g, &p, 0.25), 2);
}

#[test]
fn metrics_are_permutation_invariant() {
    let (_, eps) = held_out(100);
    let gt = GroundTruthSet::from_scenes(&eps.iter().map(|e| e.scene.clone()).collect::<Vec<_>>());
    let preds: BTreeMap<u64, _> = eps
        .iter()
        .map(|e| (e.scene.image_id, eval::ImagePrediction::Agent(e.trajectory.output)))
        .collect();
    let forward = eval::PredictionSet { images: preds.clone() };
    let r1 = eval::evaluate(&gt, &forward, Mode::Agent, &[0.5]).unwrap();
    // Relabel image ids in reverse order.
    let n = eps.len() as u64;
    let gt2 = GroundTruthSet {
        num_categories: gt.num_categories,
        images: gt.images.iter().map(|(k, v)| (n + 1 - k, v.clone())).collect(),
    };
    let p2 = eval::PredictionSet {
        images: preds.into_iter().map(|(k, v)| (n + 1 - k, v)).collect(),
    };
    assert_eq!(r1, eval::evaluate(&gt2, &p2, Mode::Agent, &[0.5]).unwrap());
}

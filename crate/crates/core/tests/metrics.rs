mod support;

use approx::assert_abs_diff_eq;
use posegraph_core::metrics::{evaluate, match_instances, oks, Detection, EvalParams, GroundTruthImage, MetricReport, OksRecord};
use posegraph_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{detection, oracle_metrics, person, random_case};

const K: usize = 5;

fn record(d: &[f64], v: &[u8], s: f64, k: f64) -> OksRecord {
    OksRecord {
        distances: d.to_vec(),
        visibility: v.to_vec(),
        scale: s,
        constants: vec![k; d.len()],
    }
}

#[test]
fn oks_examples() {
    assert_eq!(oks(&record(&[0.0; 3], &[2, 2, 1], 10.0, 0.1)).unwrap(), 1.0);
    let s = 12.0;
    let k = 0.1;
    let d = s * k * 2f64.sqrt();
    assert_abs_diff_eq!(oks(&record(&[d], &[2], s, k)).unwrap(), (-1f64).exp(), epsilon = 1e-9);
    let two = oks(&record(&[0.0, d], &[2, 2], s, k)).unwrap();
    assert_abs_diff_eq!(two, (1.0 + (-1f64).exp()) / 2.0, epsilon = 1e-9);
    assert_abs_diff_eq!(two, 0.68394, epsilon = 1e-5);
    assert_eq!(oks(&record(&[1.0, 2.0], &[0, 0], s, k)), Err(Error::UndefinedOks));
}

#[test]
fn oks_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let d: Vec<f64> = (0..K).map(|_| rng.random_range(0.0..10.0)).collect();
        let v: Vec<u8> = (0..K).map(|i| if i == 0 { 2 } else { rng.random_range(0..3) }).collect();
        let s = rng.random_range(5.0..40.0);
        let base = oks(&record(&d, &v, s, 0.1)).unwrap();
        assert!(base > 0.0 && base <= 1.0);

        let f = rng.random_range(0.2..5.0);
        let scaled: Vec<f64> = d.iter().map(|x| x * f).collect();
        assert_abs_diff_eq!(oks(&record(&scaled, &v, s * f, 0.1)).unwrap(), base, epsilon = 1e-12);

        let mut rev_d = d.clone();
        let mut rev_v = v.clone();
        rev_d.reverse();
        rev_v.reverse();
        assert_abs_diff_eq!(oks(&record(&rev_d, &rev_v, s, 0.1)).unwrap(), base, epsilon = 1e-12);

        let i = rng.random_range(0..K);
        let mut farther = d.clone();
        farther[i] += rng.random_range(0.0..3.0);
        assert!(oks(&record(&farther, &v, s, 0.1)).unwrap() <= base);
    }
}

#[test]
fn greedy_matching_example() {
    // one truth; the higher-scored prediction is the worse fit
    let m = match_instances(&[vec![0.4], vec![0.9]], &[false], 0.5);
    assert_eq!(m, vec![None, Some(0)]);
}

fn single_threshold() -> EvalParams {
    let mut p = EvalParams::new(K, 64);
    p.thresholds = vec![0.5];
    p
}

#[test]
fn toy_case_has_ap_one_half() {
    let gt = person(30.0, 30.0, 20.0);
    let s = gt.area.sqrt() * 0.1;
    // OKS about 0.4 and 0.9
    let far = s * (-2.0 * 0.4f64.ln()).sqrt();
    let near = s * (-2.0 * 0.9f64.ln()).sqrt();
    let dets = [detection(1, &gt, far, 0.9), detection(1, &gt, near, 0.8)];
    let truths = [GroundTruthImage {
        image_id: 1,
        annotations: vec![gt],
    }];
    let r = evaluate(&dets, &truths, &single_threshold()).unwrap();
    assert_abs_diff_eq!(r.ap50.unwrap(), 0.5, epsilon = 1e-12);
    assert_eq!(r.ar50, Some(1.0));
}

#[test]
fn perfect_empty_and_missing_truth() {
    let gts = vec![person(20.0, 20.0, 16.0), person(45.0, 40.0, 24.0)];
    let truths = [GroundTruthImage {
        image_id: 0,
        annotations: gts.clone(),
    }];
    let params = EvalParams::new(K, 64);
    let perfect: Vec<Detection> = gts.iter().enumerate().map(|(i, g)| detection(0, g, 0.0, 1.0 - 0.1 * i as f64)).collect();
    let r = evaluate(&perfect, &truths, &params).unwrap();
    for (name, v) in [("AP", r.ap), ("AP50", r.ap50), ("AP75", r.ap75), ("AR", r.ar), ("AR50", r.ar50), ("AR75", r.ar75)] {
        assert_eq!(v, Some(1.0), "{name}");
    }
    let r = evaluate(&[], &truths, &params).unwrap();
    assert_eq!((r.ap, r.ar), (Some(0.0), Some(0.0)));
    assert_eq!(evaluate(&perfect, &[], &params).unwrap(), MetricReport::default());
}

#[test]
fn evaluate_agrees_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = EvalParams::new(K, 64);
    let mut with_matches = 0;
    for case in 0..1500 {
        let (dets, truths) = random_case(&mut rng);
        let report = evaluate(&dets, &truths, &params).unwrap();
        let oracle = oracle_metrics(&dets, &truths, &params.thresholds);
        let n = oracle.len() as f64;
        let ap = oracle.iter().map(|o| o.0).sum::<f64>() / n;
        let ar = oracle.iter().map(|o| o.1).sum::<f64>() / n;
        assert_eq!(report.ap50, Some(oracle[0].0), "case {case}");
        assert_eq!(report.ap75, Some(oracle[5].0), "case {case}");
        assert_eq!(report.ar50, Some(oracle[0].1), "case {case}");
        assert_eq!(report.ar75, Some(oracle[5].1), "case {case}");
        assert_abs_diff_eq!(report.ap.unwrap(), ap, epsilon = 1e-12);
        assert_abs_diff_eq!(report.ar.unwrap(), ar, epsilon = 1e-12);
        assert!(report.ap.unwrap() <= report.ap50.unwrap() + 1e-12);
        assert!(report.ar.unwrap() <= report.ar50.unwrap() + 1e-12);
        with_matches += (oracle[0].1 > 0.0) as usize;
    }
    // the generator must exercise real matches, not only misses
    assert!(with_matches > 500, "{with_matches}");
}

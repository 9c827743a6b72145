mod common;

use std::collections::BTreeSet;

use dnnloc::detector::{AnaLimits, AnaState, Detector, DetectorConfig, TerminateOnNaN, VerdictCode};
use dnnloc::probes::{Location, Observer};
use dnnloc::tensor::Tensor;
use proptest::prelude::*;

use common::{detect, fuzz_stream, rescan, RawBatch, STREAM_LEN};

#[test]
fn first_failure_matches_rescan_on_fuzzed_streams() {
    let mut faults = 0;
    for seed in 0..200 {
        let stream = fuzz_stream(seed);
        let expected = rescan(&stream);
        assert_eq!(detect(&stream), expected, "seed {seed}: {:?}", stream.anomalies);
        faults += expected.is_some() as usize;
    }
    // The generator is only useful if most streams actually fault.
    assert!(faults > 150, "only {faults} faulty streams");
}

#[test]
fn healthy_stream_is_correct_model() {
    // Same shape as a fuzzed stream, with every anomaly overwritten.
    let healthy = {
        let mut s = fuzz_stream(3);
        for (t, b) in s.batches.iter_mut().enumerate() {
            b.loss = 5.0 - 0.1 * t as f64;
            b.accuracy = b.accuracy.map(|_| 0.3 + 0.01 * t as f64);
            for (i, f) in b.forward.iter_mut().enumerate() {
                f.1 = (0..6).map(|k| (t * 31 + i * 7 + k) as f64 * 0.01 + 0.5).collect();
                f.2 = f.1.iter().map(|v| v * 2.0).collect();
            }
            for (i, r) in b.backward.iter_mut().enumerate() {
                r.1 = (0..6).map(|k| (t * 17 + i * 3 + k) as f64 * 0.02 + 0.1).collect();
                r.2 = r.1.iter().map(|v| v + 1.0).collect();
                r.3 = r.1.iter().map(|v| v - 3.0).collect();
            }
        }
        s.anomalies.clear();
        s
    };
    assert_eq!(rescan(&healthy), None);
    assert_eq!(detect(&healthy), None);
}

#[test]
fn detection_is_deterministic() {
    for seed in 0..50 {
        let stream = fuzz_stream(seed);
        assert_eq!(detect(&stream), detect(&stream));
    }
}

#[test]
fn disabling_everything_yields_cm() {
    for seed in 0..50 {
        let mut stream = fuzz_stream(seed);
        stream.config.disabled = VerdictCode::ALL.into_iter().filter(|c| *c != VerdictCode::CM).collect();
        assert_eq!(detect(&stream), None);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Disabling checks that did not fire, or that fire later, never changes
    /// the verdict; disabling the reported check can only move it later.
    #[test]
    fn disabling_checks_respects_first_failure(seed in 0u64..10_000, mask in 0u8..128) {
        let stream = fuzz_stream(seed);
        let base = detect(&stream);
        let codes: Vec<VerdictCode> = VerdictCode::ALL.into_iter().filter(|c| *c != VerdictCode::CM).collect();
        let extra: BTreeSet<VerdictCode> = codes.iter().enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0).map(|(_, c)| *c).collect();
        let mut reduced = stream.clone();
        reduced.config.disabled.extend(extra.iter().copied());
        let after = detect(&reduced);
        prop_assert_eq!(after, rescan(&reduced));
        match base {
            Some((code, _, it)) if !extra.contains(&code) => prop_assert_eq!(after, base, "iteration {}", it),
            Some((_, _, it)) => prop_assert!(after.is_none_or(|a| a.2 >= it)),
            None => prop_assert_eq!(after, None),
        }
    }

    /// The non-finite test fires on the first call regardless of history.
    #[test]
    fn ana_nonfinite_always_fires(history in prop::collection::vec(-10.0f64..10.0, 0..40), pos in 0usize..5) {
        let mut s = AnaState::new();
        let limits = AnaLimits { window_n: 50, zero_threshold: Some(1000) };
        for v in &history {
            let _ = s.ana(&Tensor::vector(vec![*v, v + 1.0]), 1, Location::FW, limits).unwrap();
        }
        let mut bad = vec![1.0; 5];
        bad[pos] = f64::NAN;
        prop_assert!(s.ana(&Tensor::vector(bad), 1, Location::FW, limits).unwrap());
    }
}

fn constant_batch(loss: f64, value: f64) -> RawBatch {
    RawBatch {
        forward: vec![(1, vec![value, value + 1.0], vec![value + 2.0, value])],
        loss,
        accuracy: None,
        backward: vec![(1, vec![value], vec![value * 3.0], vec![value - 1.0])],
    }
}

#[test]
fn terminate_on_nan_stops_exactly_at_injected_batch() {
    for k in [0, 1, 7, STREAM_LEN - 1] {
        let mut obs = TerminateOnNaN::new();
        let mut stopped = None;
        for t in 0..STREAM_LEN {
            let loss = if t == k { f64::NAN } else { 1.0 / (t + 1) as f64 };
            if let Some(v) = obs.on_batch_end(&constant_batch(loss, t as f64).snapshot(t)) {
                stopped = Some((v.code, v.iteration));
                break;
            }
        }
        assert_eq!(stopped, Some((VerdictCode::ELF, Some(k))));
    }
}

#[test]
fn terminate_on_nan_ignores_infinity() {
    let mut obs = TerminateOnNaN::new();
    let snap = constant_batch(f64::INFINITY, 1.0).snapshot(0);
    assert!(obs.on_batch_end(&snap).is_none());
}

#[test]
fn detector_refuses_batches_after_a_fault() {
    let mut d = Detector::new(DetectorConfig {
        total_iterations: Some(10),
        ..DetectorConfig::default()
    })
    .unwrap();
    let v = d.check_batch(&constant_batch(f64::NAN, 1.0).snapshot(0)).unwrap();
    assert_eq!(v.unwrap().code, VerdictCode::ELF);
    assert!(d.check_batch(&constant_batch(1.0, 1.0).snapshot(1)).is_err());
    assert!(d.finish().is_err());
}

#[test]
fn zero_threshold_comes_from_the_training_plan() {
    use dnnloc::probes::TrainPlan;
    let mut d = Detector::new(DetectorConfig::default()).unwrap();
    d.on_train_begin(&TrainPlan {
        epochs: 4,
        batches_per_epoch: 25,
        started: std::time::Instant::now(),
    });
    assert_eq!(d.config().zero_threshold(), Some(25));
}

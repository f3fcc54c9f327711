use clinrisk_web::demo::{explain_patient, temporal_curves, timeline};

#[test]
fn timeline_marks_contamination() {
    let clean = timeline(3, 2, 0.0).unwrap();
    assert!(clean.events.iter().all(|e| !e.contaminated));
    assert!(clean.true_probability > 0.0 && clean.true_probability < 1.0);
    let noisy = timeline(3, 2, 1.0).unwrap();
    assert!(noisy.events.iter().all(|e| e.contaminated));
    assert_eq!(clean.events.len(), noisy.events.len());
    assert!(clean.events.windows(2).all(|w| w[0].t < w[1].t));
}

#[test]
fn attention_maps_are_stochastic() {
    let e = explain_patient(5, 1, 8, 2).unwrap();
    assert!((e.pooling.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(e.attention.len(), 2);
    for layer in &e.attention {
        assert_eq!(layer.len(), 2);
        for head in layer {
            assert_eq!(head.len(), e.t * e.t);
            for row in head.chunks(e.t) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
    assert!(explain_patient(5, 1, 8, 3).is_err());
}

#[test]
fn temporal_curves_are_rectified_lines() {
    let c = temporal_curves(1, 4, 10.0, 11, 0.0, false).unwrap();
    assert_eq!(c.dt.len(), 11);
    assert_eq!(c.dt[10], 10.0);
    for curve in &c.curves {
        assert_eq!(curve[0], 0.0);
        assert!(curve.iter().all(|v| *v >= 0.0));
        let slope = curve[1] - curve[0];
        assert!(curve.windows(2).all(|w| ((w[1] - w[0]) - slope).abs() < 1e-12));
    }
    let shifted = temporal_curves(1, 4, 10.0, 11, -1.0, true).unwrap();
    assert!(shifted.curves.iter().all(|c| c[0] == 0.0));
}

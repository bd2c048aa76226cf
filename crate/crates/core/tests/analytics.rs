use iotarch::edge::analytics::{detect_anomaly, ewma_of, span_alpha, stats_of, window_stats, AnomalyCheck, SeriesWindow};

#[test]
fn known_stats() {
    let s = stats_of(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
    assert_eq!((s.mean, s.stddev, s.min, s.max), (5.0, 2.0, 2.0, 9.0));
    assert!(stats_of(&[]).is_err());
}

#[test]
fn window_uses_latest_n() {
    let mut w = SeriesWindow::new(1, "temp", 4);
    for (t, v) in [1.0, 2.0, 3.0, 4.0, 5.0].into_iter().enumerate() {
        w.push(t as u64, v);
    }
    assert_eq!(w.len(), 4);
    assert_eq!(w.latest(), Some((4, 5.0)));
    assert_eq!(window_stats(&w, 2).unwrap().mean, 4.5);
    // asking for more than is held uses what is there
    assert_eq!(window_stats(&w, 10).unwrap().mean, 3.5);
}

#[test]
fn ewma_by_hand() {
    // 10, then 0.5*20 + 0.5*10 = 15, then 0.5*0 + 0.5*15 = 7.5
    assert_eq!(ewma_of(&[10.0, 20.0, 0.0], 0.5).unwrap(), 7.5);
    assert_eq!(span_alpha(3), 0.5);
}

#[test]
fn anomaly() {
    let flat = SeriesWindow::from_values(&[1.0; 10]);
    assert_eq!(detect_anomaly(&flat, 3.0, 5.0), AnomalyCheck::Insufficient);
    let short = SeriesWindow::from_values(&[1.0, 2.0, 3.0]);
    assert_eq!(detect_anomaly(&short, 3.0, 5.0), AnomalyCheck::Insufficient);
    let w = SeriesWindow::from_values(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
    assert_eq!(detect_anomaly(&w, 3.0, 9.0), AnomalyCheck::Normal { z: 2.0 });
    assert!(matches!(detect_anomaly(&w, 3.0, 12.0), AnomalyCheck::Anomalous { z, .. } if z == 3.5));
}

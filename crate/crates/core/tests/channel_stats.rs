//! Statistical behaviour of the fading uplink and its random streams.

use splitfed::channel::{draw_channel, equalize, transmit_uplink, ChannelState, FadingModel};
use splitfed::numerics::{Label, RngStream, Vector};

fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn equalized_noise_is_unbiased() {
    let ch = ChannelState {
        h: 0.7,
        n0: 1.5,
        p_max: 1.0,
    };
    let g = Vector::new(vec![0.3, -0.2, 0.1, 0.0]);
    let root = RngStream::new(3);
    let n = 20_000;
    let mut mean = [0.0; 4];
    for i in 0..n {
        let y = transmit_uplink(&g, 2.0, &ch, &root.child(Label::Index(i))).unwrap();
        let est = equalize(&y, ch.h, 1e-3).unwrap();
        for (m, e) in mean.iter_mut().zip(est.as_slice()) {
            *m += e / n as f64;
        }
    }
    let se = (ch.n0 / (ch.h * ch.h) / n as f64).sqrt();
    for (m, gi) in mean.iter().zip(g.as_slice()) {
        assert!((m - 2.0 * gi).abs() < 4.0 * se, "{m} vs {}", 2.0 * gi);
    }
}

#[test]
fn tdma_slots_draw_independent_noise_and_fading() {
    let ch = ChannelState {
        h: 1.0,
        n0: 1.0,
        p_max: 1.0,
    };
    let zero = Vector::zeros(1);
    let root = RngStream::new(11);
    let n = 20_000;
    let (mut dev0, mut dev1) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut h_now, mut h_next) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let fading = FadingModel::rayleigh();
    for t in 0..n {
        let slot = |k: usize| root.round(t).device(k);
        dev0.push(transmit_uplink(&zero, 0.0, &ch, &slot(0).child("uplink-noise")).unwrap()[0]);
        dev1.push(transmit_uplink(&zero, 0.0, &ch, &slot(1).child("uplink-noise")).unwrap()[0]);
        h_now.push(draw_channel(&fading, &slot(0).child("fading")));
        h_next.push(draw_channel(
            &fading,
            &root.round(t + 1).device(0).child("fading"),
        ));
    }
    let bound = 4.0 / (n as f64).sqrt();
    assert!(correlation(&dev0, &dev1).abs() < bound);
    assert!(correlation(&h_now, &h_next).abs() < bound);
    // Shifted copies of one sequence: round t+1 of `h_now` is `h_next[t]`.
    assert_eq!(h_now[1], h_next[0]);
}

#[test]
fn rayleigh_magnitude_matches_its_distribution() {
    let fading = FadingModel::rayleigh();
    let root = RngStream::new(5);
    let n = 50_000u64;
    let hs: Vec<f64> = (0..n)
        .map(|i| draw_channel(&fading, &root.child(Label::Index(i))))
        .collect();
    // With E[h²] = 1, h² ~ Exp(1): P(h² > 1) = e⁻¹ and E[h] = √π / 2.
    let tail = hs.iter().filter(|h| **h * **h > 1.0).count() as f64 / n as f64;
    assert!((tail - (-1.0f64).exp()).abs() < 0.01);
    let mean = hs.iter().sum::<f64>() / n as f64;
    assert!((mean - std::f64::consts::PI.sqrt() / 2.0).abs() < 0.01);
}

#[test]
fn floor_clamps_deep_fades() {
    let fading = FadingModel {
        h_floor: 0.5,
        ..FadingModel::rayleigh()
    };
    let root = RngStream::new(6);
    assert!((0..5000u64).all(|i| draw_channel(&fading, &root.child(Label::Index(i))) >= 0.5));
    assert!(equalize(&Vector::zeros(2), 0.01, 0.5).is_err());
}

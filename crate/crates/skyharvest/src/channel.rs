//! Ground-truth radio model: segmented log-distance channel gain with
//! Gaussian shadowing, SNR, and information rate.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{is_los, CityMap, GridPos};

/// Reference distance for the gain model; distances below are clamped.
pub const REFERENCE_DISTANCE_M: f64 = 1.0;

/// Segmented log-distance channel parameters. Gains are in dB relative to
/// the 1 m reference; powers are linear watts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelParams {
    /// dB per decade of distance, LoS segment (negative for loss).
    pub alpha_los: f64,
    pub alpha_nlos: f64,
    /// dB at the 1 m reference distance.
    pub beta_los: f64,
    pub beta_nlos: f64,
    /// Shadowing standard deviation, dB.
    pub sigma_los: f64,
    pub sigma_nlos: f64,
    pub tx_power_w: f64,
    pub noise_power_w: f64,
    /// Linear SNR above which a link is usable.
    pub snr_threshold: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        // 90 dB transmit-to-noise ratio.
        ChannelParams {
            alpha_los: -22.0,
            alpha_nlos: -36.0,
            beta_los: -42.0,
            beta_nlos: -48.0,
            sigma_los: 2.0,
            sigma_nlos: 5.0,
            tx_power_w: 1.0,
            noise_power_w: 1e-9,
            snr_threshold: 0.05,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_los < 0.0 || self.sigma_nlos < 0.0 {
            return Err(Error::Config("channel sigma_los/sigma_nlos must be >= 0".into()));
        }
        if !(self.tx_power_w > 0.0) {
            return Err(Error::Config("channel tx_power_w must be > 0".into()));
        }
        if !(self.noise_power_w > 0.0) {
            return Err(Error::Config("channel noise_power_w must be > 0".into()));
        }
        if self.snr_threshold < 0.0 {
            return Err(Error::Config("channel snr_threshold must be >= 0".into()));
        }
        Ok(())
    }
}

/// One sampled link draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkSample {
    pub gain_db: f64,
    pub los: bool,
    /// Linear SNR.
    pub snr: f64,
    /// Bits per second per hertz.
    pub rate: f64,
}

/// Mean gain at a distance for a propagation class, before shadowing.
pub fn gain_db(params: &ChannelParams, distance_m: f64, los: bool, shadowing_db: f64) -> f64 {
    let d = distance_m.max(REFERENCE_DISTANCE_M);
    let (alpha, beta) = if los {
        (params.alpha_los, params.beta_los)
    } else {
        (params.alpha_nlos, params.beta_nlos)
    };
    beta + alpha * d.log10() + shadowing_db
}

/// Linear SNR from a dB gain and the radio constants.
pub fn snr_from_gain(tx_power_w: f64, noise_power_w: f64, gain_db: f64) -> f64 {
    tx_power_w * 10f64.powf(0.1 * gain_db) / noise_power_w
}

/// Spectral efficiency for a linear SNR.
pub fn rate_from_snr(snr: f64) -> f64 {
    (1.0 + snr).log2()
}

fn draw_shadowing(sigma: f64, rng: &mut impl Rng) -> f64 {
    // Normal::new only fails on non-finite or negative sigma, which
    // ChannelParams::validate excludes.
    Normal::new(0.0, sigma).expect("valid sigma").sample(rng)
}

/// Sample the link between a UAV and a ground device (or another UAV):
/// raycast for the LoS class, draw shadowing, derive SNR and rate.
pub fn sample_link(
    params: &ChannelParams,
    map: &CityMap,
    a: GridPos,
    b: GridPos,
    rng: &mut impl Rng,
) -> LinkSample {
    let los = is_los(map, a, b);
    let pa = map.metric(a);
    let pb = map.metric(b);
    let d = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2)).sqrt();
    let sigma = if los { params.sigma_los } else { params.sigma_nlos };
    let shadow = draw_shadowing(sigma, rng);
    let g = gain_db(params, d, los, shadow);
    let snr = snr_from_gain(params.tx_power_w, params.noise_power_w, g);
    LinkSample {
        gain_db: g,
        los,
        snr,
        rate: rate_from_snr(snr),
    }
}

/// Link usability per the SNR threshold (inclusive).
pub fn reachable(sample: &LinkSample, params: &ChannelParams) -> bool {
    sample.snr >= params.snr_threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Cell, CityMap};

    fn open_map() -> CityMap {
        CityMap::from_rows(
            10.0,
            &vec![vec![0.0; 40]; 40],
            Cell::new(0, 0),
            Cell::new(39, 39),
        )
        .unwrap()
    }

    #[test]
    fn gain_at_reference_distance_is_beta() {
        let p = ChannelParams::default();
        assert_eq!(gain_db(&p, 1.0, true, 0.0), p.beta_los);
        assert_eq!(gain_db(&p, 0.2, true, 0.0), p.beta_los); // clamped below 1 m
        assert_eq!(gain_db(&p, 1.0, false, 0.0), p.beta_nlos);
    }

    #[test]
    fn gain_at_100m_los_with_defaults() {
        let p = ChannelParams::default();
        let g = gain_db(&p, 100.0, true, 0.0);
        assert!((g - (-86.0)).abs() < 1e-12, "got {g}");
        // Shadowing is additive.
        assert!((gain_db(&p, 100.0, true, 3.0) - (-83.0)).abs() < 1e-12);
    }

    #[test]
    fn gain_decreases_with_distance() {
        let p = ChannelParams::default();
        let mut prev = f64::INFINITY;
        for d in [1.0, 3.0, 10.0, 50.0, 200.0, 1000.0] {
            let g = gain_db(&p, d, true, 0.0);
            assert!(g < prev || d == 1.0);
            prev = g;
        }
    }

    #[test]
    fn los_gain_dominates_nlos_under_defaults() {
        let p = ChannelParams::default();
        for d in [1.0, 5.0, 42.0, 300.0, 1200.0] {
            assert!(gain_db(&p, d, true, 0.0) >= gain_db(&p, d, false, 0.0));
        }
    }

    #[test]
    fn unit_snr_gives_unit_rate() {
        assert_eq!(rate_from_snr(1.0), 1.0);
        assert_eq!(rate_from_snr(0.0), 0.0);
        let mut prev = 0.0;
        for snr in [0.1, 0.5, 1.0, 4.0, 100.0] {
            let r = rate_from_snr(snr);
            assert!(r > prev);
            prev = r;
        }
    }

    #[test]
    fn zero_sigma_link_is_deterministic() {
        let map = open_map();
        let mut p = ChannelParams::default();
        p.sigma_los = 0.0;
        p.sigma_nlos = 0.0;
        let uav = GridPos::new(5, 5, 60.0);
        let dev = GridPos::new(9, 5, 0.0);
        let mut rng = crate::seed::rng(3, "chan", 0);
        let s = sample_link(&p, &map, uav, dev, &mut rng);
        let pa = map.metric(uav);
        let pb = map.metric(dev);
        let d = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + pa[2] * pa[2]).sqrt();
        assert_eq!(s.gain_db, gain_db(&p, d, true, 0.0));
        assert!(s.los);
        assert_eq!(s.snr, snr_from_gain(p.tx_power_w, p.noise_power_w, s.gain_db));
        assert_eq!(s.rate, rate_from_snr(s.snr));
    }

    #[test]
    fn shadowing_spread_matches_sigma() {
        let map = open_map();
        let p = ChannelParams::default(); // sigma_los = 2
        let uav = GridPos::new(5, 5, 60.0);
        let dev = GridPos::new(12, 5, 0.0);
        let mut rng = crate::seed::rng(4, "chan-mc", 0);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let s = sample_link(&p, &map, uav, dev, &mut rng);
            sum += s.gain_db;
            sq += s.gain_db * s.gain_db;
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).sqrt();
        assert!(std > 1.9 && std < 2.1, "sample std {std}");
    }

    #[test]
    fn reachable_is_inclusive_at_threshold() {
        let p = ChannelParams::default();
        let s = LinkSample {
            gain_db: 0.0,
            los: true,
            snr: p.snr_threshold,
            rate: 1.0,
        };
        assert!(reachable(&s, &p));
        let below = LinkSample { snr: 0.0, ..s };
        assert!(!reachable(&below, &p));
        let mut free = p;
        free.snr_threshold = 0.0;
        assert!(reachable(&below, &free));
    }
}

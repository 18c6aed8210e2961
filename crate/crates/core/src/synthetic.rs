//! Synthetic aging battery for tests and demos.
//!
//! Capacity fades from 1.00 to 0.70 of nominal over the cycle range along a
//! mild power law, with a few capacity-regeneration bumps that decay over a
//! handful of cycles. Each cycle logs a rest, a constant-current charge and a
//! constant-voltage taper.
//!
//! The charge curve comes from an open-circuit-voltage model: the charge
//! stored below OCV `u` is a linear background plus logistic steps, one per
//! electrode phase transition, so dQ/dV shows a peak at each step. The
//! background shrinks in proportion to capacity and the steps shrink faster
//! (`peak_fade` times the capacity loss), both linearly in SOH, so the IC
//! mass in any voltage window falls monotonically as the cell ages. The
//! terminal voltage sits an overpotential above the OCV; optional knobs let
//! it grow and let the steps broaden with age. Gaussian noise is added to
//! the logged voltage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset_io::{BatteryDataset, CycleRecord, SamplePoint};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub battery_id: String,
    pub cycles: u32,
    pub rated_capacity_ah: f64,
    pub cc_current_a: f64,
    pub charge_cutoff_v: f64,
    /// SOH at the last cycle, ignoring regeneration.
    pub end_soh: f64,
    /// Exponent of the fade curve.
    pub fade_exponent: f64,
    /// Cycles at which capacity jumps back up.
    pub regeneration_cycles: Vec<u32>,
    pub regeneration_amplitude: f64,
    /// Decay constant of a regeneration bump, in cycles.
    pub regeneration_decay: f64,
    /// OCV at the start of charge.
    pub start_ocv_v: f64,
    /// Overpotential at SOH 1, and its growth per unit SOH lost.
    pub overpotential_v: f64,
    pub overpotential_growth_v: f64,
    /// Relative growth of the step widths per unit SOH lost.
    pub peak_broadening: f64,
    /// Relative loss of step weight per unit SOH lost. At 1 the steps
    /// shrink in proportion to capacity like the background does.
    pub peak_fade: f64,
    pub sample_interval_s: f64,
    /// Standard deviation of the additive voltage noise.
    pub voltage_noise_v: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            battery_id: "SYN01".into(),
            cycles: 170,
            rated_capacity_ah: 2.0,
            cc_current_a: 1.5,
            charge_cutoff_v: 4.2,
            end_soh: 0.70,
            fade_exponent: 1.15,
            regeneration_cycles: vec![18, 47, 79, 108, 139],
            regeneration_amplitude: 0.02,
            regeneration_decay: 4.0,
            start_ocv_v: 3.40,
            overpotential_v: 0.02,
            overpotential_growth_v: 0.0,
            peak_broadening: 0.0,
            peak_fade: 2.5,
            sample_interval_s: 5.0,
            voltage_noise_v: 5e-4,
            seed: 7,
        }
    }
}

// (center V, width V, weight) of each logistic step.
const STEPS: [(f64, f64, f64); 4] = [
    (3.55, 0.030, 0.22),
    (3.72, 0.035, 0.26),
    (3.92, 0.030, 0.20),
    (4.08, 0.025, 0.14),
];
const LINEAR_WEIGHT: f64 = 0.18;
const OCV_SPAN: (f64, f64) = (3.3, 4.3);

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Shape of the OCV charge curve at one point in life.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcvShape {
    /// Multiplier on the linear background.
    pub background: f64,
    /// Multiplier on the step weights.
    pub steps: f64,
    /// Multiplier on the step widths.
    pub width: f64,
}

impl OcvShape {
    pub const FRESH: Self = Self {
        background: 1.0,
        steps: 1.0,
        width: 1.0,
    };

    /// Charge per unit rated capacity stored below open-circuit voltage `u`;
    /// strictly increasing.
    pub fn fraction(&self, u: f64) -> f64 {
        let lin = self.background * LINEAR_WEIGHT * (u - OCV_SPAN.0) / (OCV_SPAN.1 - OCV_SPAN.0);
        STEPS.iter().fold(lin, |acc, (mu, s, w)| {
            acc + w * self.steps * logistic((u - mu) / (s * self.width))
        })
    }

    /// Derivative of [`OcvShape::fraction`].
    pub fn density(&self, u: f64) -> f64 {
        let lin = self.background * LINEAR_WEIGHT / (OCV_SPAN.1 - OCV_SPAN.0);
        STEPS.iter().fold(lin, |acc, (mu, s, w)| {
            let s = s * self.width;
            let p = logistic((u - mu) / s);
            acc + w * self.steps * p * (1.0 - p) / s
        })
    }
}

impl SyntheticConfig {
    /// Noise-free state of health of cycle `c` (1-based).
    pub fn soh(&self, c: u32) -> f64 {
        let span = (self.cycles.max(2) - 1) as f64;
        let s = (c.saturating_sub(1)) as f64 / span;
        let base = 1.0 - (1.0 - self.end_soh) * s.powf(self.fade_exponent);
        let bumps: f64 = self
            .regeneration_cycles
            .iter()
            .filter(|&&k| c >= k)
            .map(|&k| self.regeneration_amplitude * (-((c - k) as f64) / self.regeneration_decay).exp())
            .sum();
        base + bumps
    }

    pub fn overpotential(&self, soh: f64) -> f64 {
        self.overpotential_v + self.overpotential_growth_v * (1.0 - soh)
    }

    pub fn shape(&self, soh: f64) -> OcvShape {
        OcvShape {
            background: soh,
            steps: 1.0 - self.peak_fade * (1.0 - soh),
            width: 1.0 + self.peak_broadening * (1.0 - soh),
        }
    }

    /// Noise-free dQ/dV of the CC charge at terminal voltage `v`.
    pub fn ic_at(&self, soh: f64, v: f64) -> f64 {
        self.rated_capacity_ah * self.shape(soh).density(v - self.overpotential(soh))
    }

    fn cycle(&self, c: u32) -> CycleRecord {
        let soh = self.soh(c);
        let q_c = self.rated_capacity_ah * soh;
        let eta = self.overpotential(soh);
        let shape = self.shape(soh);
        let x = |u: f64| shape.fraction(u);
        let x0 = x(self.start_ocv_v);
        let i = self.cc_current_a;
        let dt = self.sample_interval_s;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(c as u64);
        let noise = Normal::new(0.0, self.voltage_noise_v).expect("finite noise std");
        let mut samples = Vec::new();
        let mut push = |t: f64, v: f64, a: f64, rng: &mut ChaCha8Rng| {
            samples.push(SamplePoint {
                time_s: t,
                voltage_v: v + noise.sample(rng),
                current_a: a,
            })
        };

        // rest
        let mut t = 0.0;
        for _ in 0..6 {
            push(t, self.start_ocv_v, 0.0, &mut rng);
            t += dt;
        }

        // constant current until the terminal voltage reaches the cutoff
        let t0 = t;
        let u_end = self.charge_cutoff_v - eta;
        loop {
            let q = i * (t - t0) / 3600.0;
            let target = x0 + q / self.rated_capacity_ah;
            if target >= x(u_end) {
                break;
            }
            let u = invert(x, target, self.start_ocv_v, u_end);
            push(t, u + eta, i, &mut rng);
            t += dt;
        }

        // constant-voltage taper
        let t_cv = t;
        while t - t_cv < 1200.0 {
            let a = i * (-(t - t_cv) / 300.0).exp();
            push(t, self.charge_cutoff_v, a, &mut rng);
            t += dt;
        }

        CycleRecord {
            cycle_index: c,
            samples,
            discharge_capacity_ah: q_c,
        }
    }

    pub fn generate(&self) -> BatteryDataset {
        BatteryDataset {
            battery_id: self.battery_id.clone(),
            rated_capacity_ah: self.rated_capacity_ah,
            cc_current_a: self.cc_current_a,
            charge_cutoff_v: self.charge_cutoff_v,
            cycles: (1..=self.cycles).map(|c| self.cycle(c)).collect(),
        }
    }
}

fn invert(f: impl Fn(f64) -> f64, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// The default synthetic battery.
pub fn synthetic_battery() -> BatteryDataset {
    SyntheticConfig::default().generate()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soh_path() {
        let cfg = SyntheticConfig::default();
        assert_eq!(cfg.soh(1), 1.0);
        assert!((cfg.soh(170) - 0.70).abs() < 1e-3);
        for &k in &cfg.regeneration_cycles {
            assert!(cfg.soh(k) > cfg.soh(k - 1) + 0.01, "bump at {k}");
        }
    }

    #[test]
    fn density_matches_fraction() {
        for u in [3.45, 3.6, 3.8, 3.95, 4.1] {
            for shape in [OcvShape::FRESH, OcvShape { background: 0.8, steps: 0.6, width: 1.3 }] {
                let h = 1e-6;
                let fd = (shape.fraction(u + h) - shape.fraction(u - h)) / (2.0 * h);
                assert!((fd - shape.density(u)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn window_ic_mass_shrinks_with_soh() {
        let cfg = SyntheticConfig::default();
        let mass = |soh: f64| {
            let (eta, shape) = (cfg.overpotential(soh), cfg.shape(soh));
            shape.fraction(4.10 - eta) - shape.fraction(3.80 - eta)
        };
        let mut prev = f64::INFINITY;
        for k in 0..=40 {
            let soh = 1.05 - 0.01 * k as f64;
            let m = mass(soh);
            assert!(m < prev);
            prev = m;
        }
    }

    #[test]
    fn generated_dataset_is_valid() {
        let ds = SyntheticConfig { cycles: 5, ..Default::default() }.generate();
        ds.validate().unwrap();
        assert_eq!(ds.cycles.len(), 5);
        assert_eq!(ds, SyntheticConfig { cycles: 5, ..Default::default() }.generate());
    }
}

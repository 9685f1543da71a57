use alloc::format;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Emotion, FnirsRecord, Signal, Task, CLASS_COUNT};
use crate::error::{Error, Result};
use crate::rng;

/// Parameters of the synthetic hemodynamic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub trials_per_class_per_subject: usize,
    pub channels: usize,
    pub samples: usize,
    pub sample_rate_hz: f32,
    /// Scales how far class templates differ in latency and spatial pattern.
    pub class_separation: f64,
    /// Std-dev of per-subject additive offsets and log-gain.
    pub subject_shift: f64,
    pub noise_std: f64,
    pub task: Task,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 10,
            trials_per_class_per_subject: 20,
            channels: 24,
            samples: 600,
            sample_rate_hz: 50.0,
            class_separation: 1.0,
            subject_shift: 0.3,
            noise_std: 0.5,
            task: Task::Empe,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.trials_per_class_per_subject == 0 || self.channels == 0 || self.samples == 0 {
            return Err(Error::Config("synthetic counts must all be positive".into()));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(Error::Config(format!("sample_rate_hz {} must be positive", self.sample_rate_hz)));
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("subject_shift", self.subject_shift),
            ("noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{} must be finite and >= 0, got {}", name, v)));
            }
        }
        Ok(())
    }

    pub fn record_count(&self) -> usize {
        self.n_subjects * self.trials_per_class_per_subject * CLASS_COUNT
    }
}

/// Gamma-shaped response normalised to peak 1 at `latency`.
fn bump(t: f64, latency: f64) -> f64 {
    const SHAPE: f64 = 4.0;
    if t <= 0.0 {
        return 0.0;
    }
    let r = t / latency;
    libm::pow(r, SHAPE) * libm::exp(SHAPE * (1.0 - r))
}

fn class_template(cfg: &SynthConfig, class: usize) -> Vec<f64> {
    let (n, t) = (cfg.channels, cfg.samples);
    let rate = cfg.sample_rate_hz as f64;
    let duration = t as f64 / rate;
    let sep = cfg.class_separation;
    let offset = class as f64 - 1.5;
    let latency = duration * (0.35 + 0.08 * sep * offset).max(0.05);
    let mut out = Vec::with_capacity(2 * n * t);
    for chrom in 0..2 {
        let sign = if chrom == 0 { 1.0 } else { -0.4 };
        for c in 0..n {
            let phase = 2.0 * core::f64::consts::PI * c as f64 / n as f64 + class as f64 * core::f64::consts::FRAC_PI_2;
            let weight = 1.0 + 0.5 * sep * libm::cos(phase);
            for i in 0..t {
                out.push(sign * weight * bump(i as f64 / rate, latency));
            }
        }
    }
    out
}

/// Generates a labelled dataset of synthetic two-chromophore trials.
///
/// Records are ordered subject-major, then trial, then class. All randomness
/// derives from `config.seed`.
pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let (n, t) = (config.channels, config.samples);
    let plane = 2 * n * t;
    let templates: Vec<Vec<f64>> = (0..CLASS_COUNT).map(|k| class_template(config, k)).collect();
    let width = if config.n_subjects >= 100 { 3 } else { 2 };
    let mut records = Vec::with_capacity(config.record_count());
    for s in 0..config.n_subjects {
        let mut subj_rng = rng::stream(config.seed, &[0x5eb7, s as u64]);
        let (offsets, gain) = if config.subject_shift > 0.0 {
            let shift = Normal::new(0.0, config.subject_shift).map_err(|e| Error::Config(format!("{}", e)))?;
            let offsets: Vec<f64> = (0..2 * n).map(|_| shift.sample(&mut subj_rng)).collect();
            (offsets, libm::exp(shift.sample(&mut subj_rng)))
        } else {
            (alloc::vec![0.0; 2 * n], 1.0)
        };
        let noise = if config.noise_std > 0.0 {
            Some(Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(format!("{}", e)))?)
        } else {
            None
        };
        let subject_id = format!("S{:0width$}", s + 1, width = width);
        for trial in 0..config.trials_per_class_per_subject {
            for (k, template) in templates.iter().enumerate() {
                let mut trial_rng = rng::stream(config.seed, &[0x7a1a, s as u64, trial as u64, k as u64]);
                let mut data = Vec::with_capacity(plane);
                for (i, v) in template.iter().enumerate() {
                    let mut x = v * gain + offsets[i / t];
                    if let Some(noise) = &noise {
                        x += noise.sample(&mut trial_rng);
                    }
                    data.push(x as f32);
                }
                records.push(FnirsRecord {
                    subject_id: subject_id.clone(),
                    task: config.task,
                    label: Emotion::ALL[k],
                    signal: Signal::new(n, t, data)?,
                    sample_rate_hz: config.sample_rate_hz,
                });
            }
        }
    }
    Dataset::new(records)
}

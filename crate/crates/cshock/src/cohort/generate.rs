//! Seeded synthetic cohort generation.
//!
//! Each patient carries a latent severity process z(t) in [0, 1]. For
//! cardiogenic/mixed cases z ramps to 1 over the hours before onset and a
//! documented set of driver features deflects with z (heart rate up, systolic
//! pressure down, lactate up late, ...). The sub-hourly raw stream is planted
//! so the rule-based adjudicator recovers the generated onset hour exactly:
//! hypotension-branch cases keep SBP >= 91 until a sustained sub-90 run
//! starting just after the onset hour, with elevated lactate measured shortly
//! before; support-branch cases keep SBP above 90 throughout and record a
//! qualifying support initiation. Plain negatives are floored at 91 mmHg so
//! no 30-minute window can ever complete, which makes label agreement
//! structural rather than statistical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    ChartEtiology, EventLabel, PatientRecord, RawStream, Sex, SupportEvent, SupportKind,
};
use crate::error::{CshockError, Result};
use crate::schema::FeatureSchema;
use crate::util::child_seed;

/// One feature's response to the severity process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverSpec {
    pub feature: String,
    /// Deflection at z = 1, in the feature's raw units (sign = direction).
    pub delta: f64,
    pub weight: f64,
    /// Late drivers respond only once z clears 0.55 (lab-like lag).
    pub late: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub size: usize,
    pub positive_rate: f64,
    pub seed: u64,
    pub id_prefix: String,
    /// Fraction of the whole cohort generated as noncardiogenic-only shock.
    pub noncardiogenic_rate: f64,
    /// Fraction of positives whose onset comes from support initiation.
    pub support_onset_fraction: f64,
    pub onset_hour_range: (usize, usize),
    pub negative_stay_range: (usize, usize),
    pub ramp_hours_range: (f64, f64),
    pub vital_missing_rate: f64,
    pub lab_interval_hours: f64,
    pub noise_scale: f64,
    pub signal_scale: f64,
    /// Resting severity range z0; drivers sit at their baseline plus
    /// delta * z0 until (for positives) the pre-onset ramp begins.
    pub baseline_severity_range: (f64, f64),
    /// Driver deflection multiplier for female patients; values below 1
    /// degrade the recorded signal in that subgroup.
    pub female_signal_scale: f64,
    /// Fraction of patients given one deliberate exclusion violation.
    pub excludable_fraction: f64,
    pub drivers: Vec<DriverSpec>,
}

impl GeneratorConfig {
    pub fn new(size: usize, positive_rate: f64, seed: u64) -> Self {
        Self {
            size,
            positive_rate,
            seed,
            id_prefix: "p".to_string(),
            noncardiogenic_rate: 0.021,
            support_onset_fraction: 0.3,
            onset_hour_range: (6, 46),
            negative_stay_range: (16, 60),
            ramp_hours_range: (8.0, 16.0),
            vital_missing_rate: 0.04,
            lab_interval_hours: 8.0,
            noise_scale: 1.0,
            signal_scale: 1.0,
            baseline_severity_range: (0.02, 0.25),
            female_signal_scale: 1.0,
            excludable_fraction: 0.0,
            drivers: default_drivers(),
        }
    }
}

pub fn default_drivers() -> Vec<DriverSpec> {
    vec![
        DriverSpec {
            feature: "heart_rate".into(),
            delta: 38.0,
            weight: 1.0,
            late: false,
        },
        DriverSpec {
            feature: "sbp_no_support".into(),
            delta: -42.0,
            weight: 1.0,
            late: false,
        },
        DriverSpec {
            feature: "lactate".into(),
            delta: 3.2,
            weight: 0.9,
            late: true,
        },
        DriverSpec {
            feature: "urine_output_rate".into(),
            delta: -0.7,
            weight: 0.7,
            late: true,
        },
        DriverSpec {
            feature: "gcs_total".into(),
            delta: -5.0,
            weight: 0.6,
            late: false,
        },
        DriverSpec {
            feature: "braden_scale".into(),
            delta: -7.0,
            weight: 0.5,
            late: false,
        },
        DriverSpec {
            feature: "bun".into(),
            delta: 22.0,
            weight: 0.4,
            late: true,
        },
    ]
}

/// Matched generator configs for pretraining-transfer experiments: a larger
/// mortality-labeled cohort and a smaller, noisier shock cohort that share
/// the same driver set.
pub fn transfer_pair_configs(seed: u64, pretrain_size: usize, study_size: usize) -> (GeneratorConfig, GeneratorConfig) {
    let mut pretrain = GeneratorConfig::new(pretrain_size, 0.30, child_seed(seed, "transfer.pretrain"));
    pretrain.id_prefix = "m".to_string();
    let mut study = GeneratorConfig::new(study_size, 0.20, child_seed(seed, "transfer.study"));
    study.noise_scale = 1.6;
    study.signal_scale = 0.7;
    (pretrain, study)
}

#[derive(Clone, Debug)]
pub struct GeneratedPatient {
    pub record: PatientRecord,
    pub stream: RawStream,
    /// Ground-truth hourly severity over the record's trajectory.
    pub severity: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorCounts {
    pub positives: usize,
    pub noncardiogenic: usize,
    pub no_shock: usize,
    pub deaths: usize,
}

/// Documents the ground-truth feature importances so interpretation results
/// are verifiable against the generating process.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorManifest {
    pub schema_version: u32,
    pub config: GeneratorConfig,
    pub schema_fingerprint: String,
    pub counts: GeneratorCounts,
}

enum PatientClass {
    HypotensionOnset,
    SupportOnset,
    Noncardiogenic,
    NoShock,
}

struct FeatureParams {
    mean: f64,
    between_sd: f64,
    noise_sd: f64,
    hourly: bool,
    /// (low, high) plausibility clamp.
    range: (f64, f64),
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn feature_params(name: &str) -> FeatureParams {
    let known: Option<(f64, f64, f64, bool, (f64, f64))> = match name {
        "heart_rate" => Some((82.0, 8.0, 4.0, true, (30.0, 190.0))),
        "sbp_no_support" => Some((118.0, 8.0, 5.0, true, (50.0, 210.0))),
        "dbp" => Some((68.0, 6.0, 4.0, true, (30.0, 120.0))),
        "map_bp" => Some((85.0, 6.0, 4.0, true, (40.0, 140.0))),
        "resp_rate" => Some((17.0, 2.0, 2.0, true, (6.0, 45.0))),
        "spo2" => Some((97.0, 1.0, 1.0, true, (70.0, 100.0))),
        "temp_c" => Some((36.8, 0.3, 0.2, true, (33.0, 41.5))),
        "gcs_total" => Some((14.6, 0.4, 0.3, true, (3.0, 15.0))),
        "gcs_eye" => Some((3.9, 0.1, 0.1, true, (1.0, 4.0))),
        "gcs_verbal" => Some((4.8, 0.2, 0.2, true, (1.0, 5.0))),
        "gcs_motor" => Some((5.9, 0.1, 0.1, true, (1.0, 6.0))),
        "braden_scale" => Some((19.0, 2.0, 1.0, true, (6.0, 23.0))),
        "urine_output_rate" => Some((1.0, 0.2, 0.12, true, (0.0, 4.0))),
        "lactate" => Some((1.2, 0.25, 0.15, false, (0.3, 15.0))),
        "creatinine" => Some((1.0, 0.0, 0.06, false, (0.3, 8.0))),
        "bun" => Some((18.0, 5.0, 2.0, false, (4.0, 120.0))),
        "sodium" => Some((139.0, 3.0, 1.5, false, (120.0, 155.0))),
        "chloride" => Some((103.0, 3.0, 1.5, false, (85.0, 120.0))),
        "potassium" => Some((4.1, 0.4, 0.2, false, (2.5, 7.0))),
        "bicarbonate" => Some((24.0, 2.0, 1.0, false, (8.0, 40.0))),
        "ph_arterial" => Some((7.39, 0.03, 0.02, false, (6.9, 7.6))),
        "pco2" => Some((40.0, 4.0, 2.0, false, (20.0, 80.0))),
        "po2" => Some((90.0, 10.0, 6.0, false, (40.0, 300.0))),
        "hemoglobin" => Some((11.5, 1.5, 0.4, false, (4.0, 18.0))),
        "wbc" => Some((9.0, 2.5, 1.0, false, (1.0, 40.0))),
        "platelets" => Some((220.0, 50.0, 10.0, false, (20.0, 600.0))),
        "glucose" => Some((130.0, 30.0, 15.0, false, (40.0, 500.0))),
        "troponin" => Some((0.5, 0.4, 0.2, false, (0.0, 50.0))),
        "bnp" => Some((600.0, 300.0, 100.0, false, (10.0, 5000.0))),
        "inr" => Some((1.2, 0.2, 0.05, false, (0.8, 8.0))),
        _ => None,
    };
    match known {
        Some((mean, between_sd, noise_sd, hourly, range)) => FeatureParams {
            mean,
            between_sd,
            noise_sd,
            hourly,
            range,
        },
        None => {
            let h = fnv1a(name);
            let mean = -0.5 + (h % 1000) as f64 / 999.0;
            let between_sd = 0.3 + ((h / 1000) % 1000) as f64 / 999.0 * 0.7;
            let noise_sd = 0.2 + ((h / 1_000_000) % 1000) as f64 / 999.0 * 0.5;
            // Name prefixes pin the cadence; other generic features fall back
            // to a hash-derived mix of hourly and sparse observation.
            let hourly = if name.starts_with("vital") {
                true
            } else if name.starts_with("lab") {
                false
            } else {
                h % 3 == 0
            };
            FeatureParams {
                mean,
                between_sd,
                noise_sd,
                hourly,
                range: (f64::NEG_INFINITY, f64::INFINITY),
            }
        }
    }
}

fn late_shape(z: f64) -> f64 {
    ((z - 0.55).max(0.0) / 0.45).powf(1.5)
}

struct SeverityProcess {
    z0: f64,
    onset: Option<f64>,
    ramp: f64,
}

impl SeverityProcess {
    fn at(&self, t: f64) -> f64 {
        match self.onset {
            None => self.z0,
            Some(onset) => {
                let start = onset - self.ramp;
                if t <= start {
                    self.z0
                } else if t >= onset {
                    1.0
                } else {
                    self.z0 + (1.0 - self.z0) * (t - start) / self.ramp
                }
            }
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate_cohort(
    config: &GeneratorConfig,
    schema: &FeatureSchema,
) -> Result<(Vec<GeneratedPatient>, GeneratorManifest)> {
    if config.size < 2 {
        return Err(CshockError::InvalidArgument(
            "cohort size must be at least 2".into(),
        ));
    }
    if !(0.0..1.0).contains(&config.positive_rate) {
        return Err(CshockError::InvalidArgument(format!(
            "positive rate must be in [0, 1), got {}",
            config.positive_rate
        )));
    }
    if config.positive_rate > 0.0 && (config.size as f64) * config.positive_rate < 1.0 {
        return Err(CshockError::InvalidArgument(format!(
            "degenerate cohort spec: size {} x positive rate {} expects < 1 positive",
            config.size, config.positive_rate
        )));
    }
    schema.validate()?;

    let mut patients = Vec::with_capacity(config.size);
    let mut counts = GeneratorCounts {
        positives: 0,
        noncardiogenic: 0,
        no_shock: 0,
        deaths: 0,
    };
    for i in 0..config.size {
        let patient = generate_patient(config, schema, i)?;
        match patient.record.event_label {
            EventLabel::CardiogenicOrMixed => counts.positives += 1,
            EventLabel::NoncardiogenicOnly => counts.noncardiogenic += 1,
            EventLabel::NoShock => counts.no_shock += 1,
        }
        if patient.record.mortality {
            counts.deaths += 1;
        }
        patients.push(patient);
    }
    let manifest = GeneratorManifest {
        schema_version: 1,
        config: config.clone(),
        schema_fingerprint: schema.fingerprint(),
        counts,
    };
    Ok((patients, manifest))
}

fn generate_patient(
    config: &GeneratorConfig,
    schema: &FeatureSchema,
    index: usize,
) -> Result<GeneratedPatient> {
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(
        config.seed,
        &format!("patient.{}.{}", config.id_prefix, index),
    ));
    let patient_id = format!("{}{:05}", config.id_prefix, index);

    let class = {
        let u: f64 = rng.gen();
        if u < config.positive_rate {
            if rng.gen::<f64>() < config.support_onset_fraction {
                PatientClass::SupportOnset
            } else {
                PatientClass::HypotensionOnset
            }
        } else if u < config.positive_rate + config.noncardiogenic_rate {
            PatientClass::Noncardiogenic
        } else {
            PatientClass::NoShock
        }
    };

    // Demographics and static features.
    let mut age = (68.0 + 13.5 * normal(&mut rng)).clamp(18.0, 89.0);
    let sex = if rng.gen::<f64>() < 0.612 {
        Sex::Male
    } else {
        Sex::Female
    };
    let weight = (82.0 + 16.0 * normal(&mut rng)).clamp(45.0, 160.0);
    let height = (170.0 + 10.0 * normal(&mut rng)).clamp(145.0, 200.0);
    let positive_class = matches!(
        class,
        PatientClass::HypotensionOnset | PatientClass::SupportOnset
    );
    let dx_adhf = rng.gen::<f64>() < if positive_class { 0.62 } else { 0.50 };
    let dx_stemi = rng.gen::<f64>() < if positive_class { 0.12 } else { 0.22 };
    let dx_nstemi = rng.gen::<f64>() < 0.25;
    let prior_mi = rng.gen::<f64>() < 0.30;
    let prior_hf = rng.gen::<f64>() < 0.40;
    let diabetes = rng.gen::<f64>() < 0.35;
    let hypertension = rng.gen::<f64>() < 0.60;
    let baseline_creatinine = if rng.gen::<f64>() < 0.03 {
        None
    } else {
        Some((0.25 * normal(&mut rng)).exp().clamp(0.5, 3.0))
    };
    let statics_missing_weight = rng.gen::<f64>() < 0.04;
    let statics_missing_height = rng.gen::<f64>() < 0.04;

    // Timeline.
    let (onset_hour, icu_end_hour, discharge_hour) = match class {
        PatientClass::HypotensionOnset | PatientClass::SupportOnset => {
            let h = rng.gen_range(config.onset_hour_range.0..=config.onset_hour_range.1);
            let icu_end = h as f64 + rng.gen_range(6.0..24.0);
            (Some(h), icu_end, h)
        }
        PatientClass::Noncardiogenic => {
            let h = rng.gen_range(config.onset_hour_range.0..=config.onset_hour_range.1);
            let discharge = h + rng.gen_range(8..=20);
            (Some(h), discharge as f64, discharge)
        }
        PatientClass::NoShock => {
            let d = rng.gen_range(config.negative_stay_range.0..=config.negative_stay_range.1);
            (None, d as f64, d)
        }
    };
    let mut hospital_stay_hours = icu_end_hour + rng.gen_range(12.0..96.0);

    // Optional deliberate exclusion violation for pipeline exercises.
    let mut forced_onset_override: Option<usize> = None;
    if rng.gen::<f64>() < config.excludable_fraction {
        match rng.gen_range(0..3u8) {
            0 => age = rng.gen_range(90.0..95.0),
            1 => hospital_stay_hours = rng.gen_range(12.0..23.0),
            _ => {
                if onset_hour.is_some() {
                    forced_onset_override = Some(rng.gen_range(0..4usize));
                }
            }
        }
    }
    let onset_hour = match forced_onset_override {
        Some(h) => Some(h),
        None => onset_hour,
    };
    let discharge_hour = match (forced_onset_override, &class) {
        (Some(h), PatientClass::HypotensionOnset | PatientClass::SupportOnset) => h,
        _ => discharge_hour,
    };

    let severity = SeverityProcess {
        z0: rng.gen_range(config.baseline_severity_range.0..config.baseline_severity_range.1),
        onset: onset_hour
            .filter(|_| positive_class)
            .map(|h| h as f64),
        ramp: rng.gen_range(config.ramp_hours_range.0..config.ramp_hours_range.1),
    };
    // Noncardiogenic cases get an infection-flavored process instead.
    let sepsis = match class {
        PatientClass::Noncardiogenic => Some(SeverityProcess {
            z0: 0.05,
            onset: onset_hour.map(|h| h as f64),
            ramp: rng.gen_range(6.0..12.0),
        }),
        _ => None,
    };

    let observed_time = match class {
        PatientClass::HypotensionOnset | PatientClass::SupportOnset => {
            onset_hour.expect("positive has onset")
        }
        _ => discharge_hour,
    };
    let hours = observed_time + 1;
    let wobble_amp = rng.gen_range(0.0..0.04);
    let wobble_period = rng.gen_range(18.0..30.0);
    let wobble_phase = rng.gen_range(0.0..wobble_period);
    let wobble = |t: f64| wobble_amp * (2.0 * std::f64::consts::PI * (t + wobble_phase) / wobble_period).sin();

    // Driver lookup per time-varying feature.
    let tv_defs = schema.time_varying();
    let driver_of: Vec<Option<&DriverSpec>> = tv_defs
        .iter()
        .map(|f| config.drivers.iter().find(|d| d.feature == f.name))
        .collect();

    let sex_signal = if sex == Sex::Female {
        config.female_signal_scale
    } else {
        1.0
    };
    let raw_value = |params: &FeatureParams,
                     base: f64,
                     driver: Option<&DriverSpec>,
                     t: f64,
                     noise: f64| {
        let mut v = base + wobble(t) * params.mean.abs().max(1.0);
        if let Some(d) = driver {
            let z = severity.at(t);
            let shape = if d.late { late_shape(z) } else { z };
            v += d.delta * d.weight * config.signal_scale * sex_signal * shape;
        }
        v + noise * params.noise_sd * config.noise_scale
    };

    // Hourly series (raw units, fully observed; missingness applied later).
    let mut series_full: Vec<Vec<f64>> = Vec::with_capacity(tv_defs.len());
    let mut per_feature_params: Vec<FeatureParams> = Vec::with_capacity(tv_defs.len());
    let mut per_feature_base: Vec<f64> = Vec::with_capacity(tv_defs.len());
    for (j, def) in tv_defs.iter().enumerate() {
        let params = feature_params(&def.name);
        let base = if def.name == "creatinine" {
            baseline_creatinine.unwrap_or(1.0)
        } else {
            params.mean + params.between_sd * normal(&mut rng)
        };
        let mut row = Vec::with_capacity(hours);
        for k in 0..hours {
            let t = k as f64;
            let noise = normal(&mut rng);
            let mut v = raw_value(&params, base, driver_of[j], t, noise);
            if let Some(sep) = &sepsis {
                let s = sep.at(t);
                match def.name.as_str() {
                    "temp_c" => v += 1.6 * s,
                    "wbc" => v += 6.0 * s,
                    "heart_rate" => v += 14.0 * s,
                    "lactate" => v += 1.2 * s,
                    _ => {}
                }
            }
            if params.range.0.is_finite() {
                v = v.clamp(params.range.0, params.range.1);
            }
            row.push(v);
        }
        series_full.push(row);
        per_feature_params.push(params);
        per_feature_base.push(base);
    }

    // Plant the adjudication physiology in the raw stream and mirror it in
    // the hourly series so the model sees consistent values.
    let stream_end = icu_end_hour.max(observed_time as f64 + 1.0);
    let onset_f = onset_hour.map(|h| h as f64);
    let hypotension_branch = matches!(class, PatientClass::HypotensionOnset);
    let sbp_floor_low = 91.0;
    let sbp_floor_support = 90.6;

    // Sub-hourly SBP stream every 15 minutes.
    let sbp_idx = schema.tv_index("sbp_no_support");
    let mut sbp_stream: Vec<(f64, f64)> = Vec::new();
    {
        let params = feature_params("sbp_no_support");
        let base = sbp_idx
            .map(|j| per_feature_base[j])
            .unwrap_or(params.mean);
        let driver = config
            .drivers
            .iter()
            .find(|d| d.feature == "sbp_no_support");
        let mut t = 0.0;
        let mut scare_budget = if matches!(class, PatientClass::NoShock) && rng.gen::<f64>() < 0.15
        {
            rng.gen_range(1..=2usize)
        } else {
            0
        };
        let mut last_scare_t = f64::NEG_INFINITY;
        while t < stream_end {
            let noise = normal(&mut rng);
            let mut v = raw_value(&params, base, driver, t, noise * 0.8);
            match class {
                PatientClass::HypotensionOnset => {
                    let onset = onset_f.expect("hypotension branch has onset");
                    let window_start = onset + 0.1;
                    if t < window_start {
                        v = v.max(sbp_floor_low);
                        // Occasional single-sample dips stay safe: the next
                        // sample is floored again, so no 30-minute run forms.
                    } else {
                        let depth = 8.0 * ((t - window_start) / 2.0).min(1.0);
                        v = (88.0 - depth + noise * 1.5).clamp(60.0, 89.5);
                    }
                }
                PatientClass::SupportOnset | PatientClass::Noncardiogenic => {
                    v = v.max(sbp_floor_support);
                }
                PatientClass::NoShock => {
                    v = v.max(sbp_floor_low);
                    if scare_budget > 0 && t - last_scare_t > 1.0 && rng.gen::<f64>() < 0.01 {
                        v = rng.gen_range(82.0..88.0);
                        scare_budget -= 1;
                        last_scare_t = t;
                    }
                }
            }
            sbp_stream.push((t, v));
            t += 0.25;
        }
    }
    // Hourly SBP in the series = mean of the four in-hour samples.
    if let Some(j) = sbp_idx {
        for k in 0..hours {
            let lo = k as f64;
            let hi = lo + 1.0;
            let (mut sum, mut n) = (0.0, 0);
            for &(t, v) in &sbp_stream {
                if t >= lo && t < hi {
                    sum += v;
                    n += 1;
                }
            }
            if n > 0 {
                series_full[j][k] = sum / n as f64;
            }
        }
    }

    // Lactate measurements: sparse schedule plus the onset plant.
    let lactate_idx = schema.tv_index("lactate");
    let mut lactate_stream: Vec<(f64, f64)> = Vec::new();
    {
        let params = feature_params("lactate");
        let base = lactate_idx
            .map(|j| per_feature_base[j])
            .unwrap_or(params.mean);
        let driver = config.drivers.iter().find(|d| d.feature == "lactate");
        let mut t = rng.gen_range(0.3..1.5);
        while t < stream_end {
            let noise = normal(&mut rng);
            let mut v = raw_value(&params, base, driver, t, noise);
            if let Some(sep) = &sepsis {
                v += 1.2 * sep.at(t);
            }
            v = v.clamp(0.3, 15.0);
            if hypotension_branch {
                let onset = onset_f.expect("has onset");
                if t >= onset - 1.0 {
                    v = v.max(2.2 + 2.0 * ((t - onset + 1.0) / 6.0).min(1.0));
                }
            }
            lactate_stream.push((t, v));
            t += config.lab_interval_hours * rng.gen_range(0.75..1.25);
        }
        if hypotension_branch {
            let onset = onset_f.expect("has onset");
            let plant_t = onset - 0.8;
            if plant_t > 0.0 {
                let v = 2.2 + 0.4 * rng.gen::<f64>();
                let pos = lactate_stream.partition_point(|&(t, _)| t < plant_t);
                // Keep timestamps strictly increasing around the plant.
                let clashes = lactate_stream.get(pos).map_or(false, |&(t, _)| t == plant_t);
                if !clashes {
                    lactate_stream.insert(pos, (plant_t, v));
                }
            }
        }
    }
    if let Some(j) = lactate_idx {
        for k in 0..hours {
            let lo = k as f64;
            let hi = lo + 1.0;
            let mut latest: Option<f64> = None;
            for &(t, v) in &lactate_stream {
                if t >= lo && t < hi {
                    latest = Some(v);
                }
            }
            if let Some(v) = latest {
                series_full[j][k] = v;
            }
        }
    }

    // Creatinine measurements.
    let creatinine_idx = schema.tv_index("creatinine");
    let mut creatinine_stream: Vec<(f64, f64)> = Vec::new();
    {
        let base = baseline_creatinine.unwrap_or(1.0);
        let mut t = rng.gen_range(0.5..2.0);
        while t < stream_end {
            let noise = normal(&mut rng);
            let mut v = base + 0.06 * noise * config.noise_scale;
            if positive_class {
                let onset = onset_f.expect("has onset");
                if t >= onset {
                    v = base * (1.2 + 0.6 * ((t - onset) / 8.0).min(1.0)) + 0.05 * noise.abs();
                } else {
                    // Stay clear of both rise rules before onset.
                    v = v.min(base + 0.2).min(base * 1.4);
                }
            } else {
                v = v.min(base + 0.2).min(base * 1.4);
            }
            creatinine_stream.push((t, v.clamp(0.3, 8.0)));
            t += config.lab_interval_hours * 1.5 * rng.gen_range(0.75..1.25);
        }
    }
    if let Some(j) = creatinine_idx {
        for k in 0..hours {
            let lo = k as f64;
            let hi = lo + 1.0;
            let mut latest: Option<f64> = None;
            for &(t, v) in &creatinine_stream {
                if t >= lo && t < hi {
                    latest = Some(v);
                }
            }
            if let Some(v) = latest {
                series_full[j][k] = v;
            }
        }
    }

    // Hourly urine output; drives late hypoperfusion texture for positives.
    let urine_idx = schema.tv_index("urine_output_rate");
    let mut urine_stream: Vec<(f64, f64)> = Vec::new();
    {
        let params = feature_params("urine_output_rate");
        let base = urine_idx
            .map(|j| per_feature_base[j])
            .unwrap_or(params.mean);
        let driver = config
            .drivers
            .iter()
            .find(|d| d.feature == "urine_output_rate");
        let mut k = 0usize;
        while (k as f64) < stream_end {
            let t = k as f64;
            let noise = normal(&mut rng);
            let mut v = raw_value(&params, base, driver, t, noise);
            if positive_class {
                let onset = onset_f.expect("has onset");
                if t >= onset - 3.0 {
                    v = v.min(0.42 + 0.03 * noise.abs());
                }
            }
            urine_stream.push((t, v.clamp(0.02, 4.0)));
            k += 1;
        }
    }
    if let Some(j) = urine_idx {
        for k in 0..hours {
            if let Some(&(_, v)) = urine_stream.get(k) {
                series_full[j][k] = v;
            }
        }
    }

    // Heart-rate stream mirrors the hourly series values.
    let hr_idx = schema.tv_index("heart_rate");
    let hr_stream: Vec<(f64, f64)> = match hr_idx {
        Some(j) => {
            let mut v: Vec<(f64, f64)> = series_full[j]
                .iter()
                .enumerate()
                .map(|(k, &x)| (k as f64, x))
                .collect();
            let params = &per_feature_params[j];
            let base = per_feature_base[j];
            let driver = config.drivers.iter().find(|d| d.feature == "heart_rate");
            let mut t = observed_time as f64 + 1.0;
            while t < stream_end {
                let noise = normal(&mut rng);
                let hv = raw_value(params, base, driver, t, noise).clamp(30.0, 190.0);
                v.push((t, hv));
                t += 1.0;
            }
            v
        }
        None => Vec::new(),
    };

    // Support events.
    let mut support_events: Vec<SupportEvent> = Vec::new();
    match class {
        PatientClass::SupportOnset => {
            let onset = onset_f.expect("has onset");
            support_events.push(SupportEvent {
                hour: onset + 0.3,
                kind: if rng.gen::<f64>() < 0.8 {
                    SupportKind::Pharmacologic
                } else {
                    SupportKind::MechanicalCirculatory
                },
                for_blood_pressure: true,
            });
        }
        PatientClass::HypotensionOnset => {
            let onset = onset_f.expect("has onset");
            // Treatment follows recognition; does not move the earlier onset.
            support_events.push(SupportEvent {
                hour: onset + rng.gen_range(0.9..2.5),
                kind: SupportKind::Pharmacologic,
                for_blood_pressure: true,
            });
        }
        PatientClass::Noncardiogenic => {
            let onset = onset_f.expect("has onset");
            support_events.push(SupportEvent {
                hour: onset + 0.3,
                kind: SupportKind::Pharmacologic,
                for_blood_pressure: true,
            });
        }
        PatientClass::NoShock => {
            // A minority receive non-qualifying support (e.g. inotropes for
            // reasons other than blood pressure).
            if rng.gen::<f64>() < 0.05 {
                support_events.push(SupportEvent {
                    hour: rng.gen_range(2.0..(stream_end - 1.0).max(2.5)),
                    kind: SupportKind::Pharmacologic,
                    for_blood_pressure: false,
                });
            }
        }
    }

    let chart_etiology = match class {
        PatientClass::HypotensionOnset | PatientClass::SupportOnset => {
            if rng.gen::<f64>() < 0.75 {
                ChartEtiology::Cardiogenic
            } else {
                ChartEtiology::Mixed
            }
        }
        PatientClass::Noncardiogenic => ChartEtiology::Noncardiogenic,
        PatientClass::NoShock => ChartEtiology::None,
    };

    // Mortality, correlated with peak severity.
    let z_peak = match class {
        PatientClass::HypotensionOnset | PatientClass::SupportOnset => 1.0,
        PatientClass::Noncardiogenic => 0.7,
        PatientClass::NoShock => severity.z0,
    };
    let p_death = 1.0 / (1.0 + (-(-2.2 + 2.2 * z_peak)).exp());
    let mortality = rng.gen::<f64>() < p_death;

    // Missingness over the hourly series.
    let mut series: Vec<Vec<Option<f64>>> = Vec::with_capacity(tv_defs.len());
    for (j, def) in tv_defs.iter().enumerate() {
        let params = &per_feature_params[j];
        let mut row: Vec<Option<f64>> = Vec::with_capacity(hours);
        if params.hourly {
            for k in 0..hours {
                if rng.gen::<f64>() < config.vital_missing_rate {
                    row.push(None);
                } else {
                    row.push(Some(series_full[j][k]));
                }
            }
        } else {
            // Lab cadence: observed only around measurement hours.
            let h = fnv1a(&def.name);
            let interval = (config.lab_interval_hours * (1.0 + (h % 5) as f64 * 0.35)).max(2.0);
            let offset = (h % 7) as f64 * 0.5;
            for k in 0..hours {
                let phase = (k as f64 + offset) % interval;
                if phase < 1.0 {
                    row.push(Some(series_full[j][k]));
                } else {
                    row.push(None);
                }
            }
        }
        series.push(row);
    }
    // Measured labs override the cadence at their measurement hours.
    for (idx, stream) in [
        (lactate_idx, &lactate_stream),
        (creatinine_idx, &creatinine_stream),
    ] {
        if let Some(j) = idx {
            for row in series[j].iter_mut() {
                *row = None;
            }
            for &(t, v) in stream.iter() {
                let k = t.floor() as usize;
                if k < hours {
                    series[j][k] = Some(v);
                }
            }
        }
    }

    let statics: Vec<Option<f64>> = schema
        .statics()
        .iter()
        .map(|f| match f.name.as_str() {
            "age" => Some(age),
            "sex_male" => Some(if sex == Sex::Male { 1.0 } else { 0.0 }),
            "weight_kg" => {
                if statics_missing_weight {
                    None
                } else {
                    Some(weight)
                }
            }
            "height_cm" => {
                if statics_missing_height {
                    None
                } else {
                    Some(height)
                }
            }
            "dx_adhf" => Some(dx_adhf as u8 as f64),
            "dx_stemi" => Some(dx_stemi as u8 as f64),
            "dx_nstemi" => Some(dx_nstemi as u8 as f64),
            "prior_mi" => Some(prior_mi as u8 as f64),
            "prior_hf" => Some(prior_hf as u8 as f64),
            "diabetes" => Some(diabetes as u8 as f64),
            "hypertension" => Some(hypertension as u8 as f64),
            "baseline_creatinine" => baseline_creatinine,
            _ => {
                let h = fnv1a(&f.name);
                Some(-0.5 + (h % 1000) as f64 / 999.0)
            }
        })
        .collect();

    let event_label = match class {
        PatientClass::HypotensionOnset | PatientClass::SupportOnset => {
            EventLabel::CardiogenicOrMixed
        }
        PatientClass::Noncardiogenic => EventLabel::NoncardiogenicOnly,
        PatientClass::NoShock => EventLabel::NoShock,
    };

    let record = PatientRecord {
        patient_id: patient_id.clone(),
        age,
        sex,
        hospital_stay_hours,
        event_label,
        observed_time,
        onset_hour,
        mortality,
        statics,
        series,
    };

    let stream = RawStream {
        patient_id,
        sbp: sbp_stream,
        heart_rate: hr_stream,
        lactate: lactate_stream,
        creatinine: creatinine_stream,
        creatinine_baseline: baseline_creatinine,
        urine_rate: urine_stream,
        support_events,
        chart_etiology,
        end_hour: stream_end,
    };
    stream.validate()?;

    let severity_hours: Vec<f64> = (0..hours).map(|k| severity.at(k as f64)).collect();

    Ok(GeneratedPatient {
        record,
        stream,
        severity: severity_hours,
    })
}

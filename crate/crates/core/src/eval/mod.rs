//! Robustness and consistency evaluation.

pub mod attack;
pub mod consistency;

pub use attack::{iterations, noise_corruption, pgd_attack, AttackConfig, AttackTarget, TaskLoss};
pub use consistency::{depth_to_normals, geometric_consistency, seg_to_edges, semantic_consistency};

use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toy::data::Dataset;
use crate::toy::net::BranchedNet;

/// Average relative change in percent of a higher-is-better score `s` and a
/// lower-is-better error `d` against a baseline.
pub fn rel_improvement(s_net: f64, d_net: f64, s_base: f64, d_base: f64) -> Result<f64> {
    if s_base == 0.0 || d_base == 0.0 {
        return Err(Error::Division(format!(
            "baseline values must be nonzero (s = {s_base}, d = {d_base})"
        )));
    }
    Ok(0.5 * ((s_net - s_base) / s_base - (d_net - d_base) / d_base) * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonBand {
    Low,
    High,
}

impl EpsilonBand {
    pub fn members(self) -> &'static [f64] {
        match self {
            EpsilonBand::Low => &[0.25, 0.5, 1.0],
            EpsilonBand::High => &[4.0, 8.0],
        }
    }

    /// Every epsilon of both bands.
    pub fn all() -> Vec<f64> {
        [EpsilonBand::Low, EpsilonBand::High]
            .iter()
            .flat_map(|b| b.members().iter().copied())
            .collect()
    }
}

/// Mean of the values whose epsilon belongs to `band`.
pub fn band_average(values: &[(f64, f64)], band: EpsilonBand) -> Result<f64> {
    let members = band.members();
    let mut sum = 0.0;
    for &eps in members {
        let v = values
            .iter()
            .find(|(e, _)| (e - eps).abs() <= 1e-12)
            .ok_or_else(|| Error::Coverage(format!("no value for epsilon {eps}")))?;
        sum += v.1;
    }
    Ok(sum / members.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgdSummary {
    pub per_eps: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub low: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub per_severity: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub semantic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub geometric: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clean: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pgd: Option<PgdSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistency: Option<ConsistencyReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rel_improvement: Option<f64>,
}

/// Key used for an epsilon or severity in report maps.
pub fn number_key(v: f64) -> String {
    format!("{v}")
}

/// Mean task loss of a toy network: clean, under a per-task PGD attack at
/// each epsilon, and under Gaussian noise at each severity. Noise bounds
/// are the observed input range.
pub fn robustness_report(
    net: &BranchedNet,
    data: &Dataset,
    epsilons: &[f64],
    base: &AttackConfig,
    severities: &[u8],
    seed: u64,
) -> Result<EvalReport> {
    let tasks = net.tasks().len();
    let clean_losses = net.losses(&data.inputs, &data.targets)?;
    let mut clean: BTreeMap<String, f64> = net
        .tasks()
        .iter()
        .zip(&clean_losses)
        .map(|(t, &l)| (t.to_string(), l))
        .collect();
    clean.insert(
        "mean_loss".into(),
        clean_losses.iter().sum::<f64>() / tasks as f64,
    );

    let attacked = epsilons
        .par_iter()
        .map(|&eps| {
            let cfg = AttackConfig {
                epsilon: eps,
                ..*base
            };
            let mut sum = 0.0;
            for task in 0..tasks {
                let target = TaskLoss {
                    net,
                    task,
                    targets: &data.targets,
                };
                let adv = pgd_attack(&target, &data.inputs, &cfg, None)?;
                sum += target.loss(&adv)?;
            }
            Ok((eps, sum / tasks as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let pgd = PgdSummary {
        per_eps: attacked.iter().map(|&(e, v)| (number_key(e), v)).collect(),
        low: band_average(&attacked, EpsilonBand::Low).ok(),
        high: band_average(&attacked, EpsilonBand::High).ok(),
    };

    let (lo, hi) = data
        .inputs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let mut per_severity = BTreeMap::new();
    for &s in severities {
        let noisy = noise_corruption(&data.inputs, s, (lo, hi), seed)?;
        let losses = net.losses(&noisy, &data.targets)?;
        per_severity.insert(s.to_string(), losses.iter().sum::<f64>() / tasks as f64);
    }

    Ok(EvalReport {
        clean: Some(clean),
        pgd: Some(pgd),
        noise: (!severities.is_empty()).then_some(NoiseSummary { per_severity }),
        ..EvalReport::default()
    })
}

/// Converts a real-valued map to integer labels, rejecting fractions.
pub fn to_labels(values: &Array2<f64>) -> Result<Array2<i64>> {
    if let Some(v) = values.iter().find(|v| v.fract() != 0.0 || !v.is_finite()) {
        return Err(Error::Data(format!("label map holds non-integer value {v}")));
    }
    Ok(values.mapv(|v| v as i64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_improvement_examples() {
        assert_eq!(rel_improvement(72.72, 5.33, 72.72, 5.33).unwrap(), 0.0);
        let v = rel_improvement(72.72, 5.33, 72.11, 5.36).unwrap();
        let oracle = 50.0 * ((72.72 / 72.11 - 1.0) + (1.0 - 5.33 / 5.36));
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.703).abs() < 1e-3);
        assert!(rel_improvement(1.02, 1.02, 1.0, 1.0).unwrap().abs() < 1e-12);
        assert!(matches!(
            rel_improvement(1.0, 1.0, 0.0, 1.0),
            Err(Error::Division(_))
        ));
        assert!(matches!(
            rel_improvement(1.0, 1.0, 1.0, 0.0),
            Err(Error::Division(_))
        ));
    }

    #[test]
    fn band_average_examples() {
        let same: Vec<(f64, f64)> = EpsilonBand::all().into_iter().map(|e| (e, 0.7)).collect();
        assert!((band_average(&same, EpsilonBand::Low).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(band_average(&same, EpsilonBand::High).unwrap(), 0.7);
        let low = [(0.25, 1.0), (0.5, 2.0), (1.0, 3.0)];
        assert_eq!(band_average(&low, EpsilonBand::Low).unwrap(), 2.0);
        assert!(matches!(
            band_average(&low, EpsilonBand::High),
            Err(Error::Coverage(_))
        ));
        let triples = [(0.25, 61.3), (0.5, 58.94), (1.0, 55.02), (4.0, 30.1), (8.0, 12.7)];
        let oracle = triples[..3].iter().map(|t| t.1).fold(0.0, |a, b| a + b) / 3.0;
        assert!((band_average(&triples, EpsilonBand::Low).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn labels_reject_fractions() {
        let ok = Array2::from_shape_vec((1, 2), vec![1.0, -2.0]).unwrap();
        assert_eq!(to_labels(&ok).unwrap()[[0, 1]], -2);
        let bad = Array2::from_shape_vec((1, 2), vec![1.5, 0.0]).unwrap();
        assert!(matches!(to_labels(&bad), Err(Error::Data(_))));
    }

    #[test]
    fn report_json_layout() {
        let report = EvalReport {
            consistency: Some(ConsistencyReport {
                semantic: Some(1.0),
                geometric: Some(1.0),
            }),
            ..EvalReport::default()
        };
        let v = serde_json::to_value(&report).unwrap();
        assert_eq!(v["consistency"]["semantic"], 1.0);
        assert!(v.get("pgd").is_none());
    }
}

//! Separation quality (SI-SDR) and model complexity counters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BinModel;
use crate::nn::ParamStore;

/// Symmetric clamp applied to reported SI-SDR values.
pub const SI_SDR_CAP_DB: f64 = 60.0;
/// Symmetric clamp applied to SI-SDR improvements.
pub const SI_SDRI_CAP_DB: f64 = 120.0;

fn check(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::shape(
            "si_sdr",
            format!("estimate has {} samples, reference {}", est.len(), reference.len()),
        ));
    }
    let energy: f64 = reference.iter().map(|r| r * r).sum();
    if energy == 0.0 {
        return Err(Error::Domain("si_sdr reference is identically zero".into()));
    }
    Ok(energy)
}

/// SI-SDR in dB without clamping; `+inf` for a zero residual.
pub fn si_sdr_uncapped(est: &[f64], reference: &[f64]) -> Result<f64> {
    let energy = check(est, reference)?;
    let alpha = est.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / energy;
    let (mut target, mut residual) = (0.0, 0.0);
    for (e, r) in est.iter().zip(reference) {
        let t = alpha * r;
        target += t * t;
        residual += (e - t) * (e - t);
    }
    Ok(10.0 * (target / residual).log10())
}

/// SI-SDR in dB, clamped to `±SI_SDR_CAP_DB`.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    let v = si_sdr_uncapped(est, reference)?;
    Ok(if v.is_nan() { -SI_SDR_CAP_DB } else { v.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB) })
}

/// Improvement of `est` over the unprocessed `mix`, both scored against
/// `reference`. The difference is taken uncapped, then clamped to `±SI_SDRI_CAP_DB`.
pub fn si_sdri(est: &[f64], reference: &[f64], mix: &[f64]) -> Result<f64> {
    let a = si_sdr_uncapped(est, reference)?;
    let b = si_sdr_uncapped(mix, reference)?;
    let d = if a == b { 0.0 } else { a - b };
    Ok(if d.is_nan() { 0.0 } else { d.clamp(-SI_SDRI_CAP_DB, SI_SDRI_CAP_DB) })
}

pub fn count_params(store: &ParamStore) -> usize {
    store.count_params()
}

/// Analytic multiply-accumulates of one forward pass.
pub fn count_macs(model: &BinModel) -> u64 {
    model.mac_breakdown().total()
}

/// Sample mean and (population) standard deviation; `(NaN, NaN)` when empty.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerScore {
    pub example_id: String,
    pub speaker: usize,
    pub si_sdr: f64,
    pub si_sdri: f64,
}

/// Per-speaker scores and their aggregates, optionally with the mean
/// improvement after each fusion iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scores: Vec<SpeakerScore>,
    pub per_iteration: Option<Vec<f64>>,
}

impl MetricReport {
    /// Scores every speaker row of `estimates` against `sources`.
    pub fn push_example(&mut self, id: &str, estimates: &[&[f64]], sources: &[&[f64]], mix: &[f64]) -> Result<()> {
        if estimates.len() != sources.len() {
            return Err(Error::shape(
                "metric_report",
                format!("{} estimates for {} sources", estimates.len(), sources.len()),
            ));
        }
        for (i, (e, r)) in estimates.iter().zip(sources).enumerate() {
            self.scores.push(SpeakerScore {
                example_id: id.to_string(),
                speaker: i,
                si_sdr: si_sdr(e, r)?,
                si_sdri: si_sdri(e, r, mix)?,
            });
        }
        Ok(())
    }

    pub fn si_sdr(&self) -> (f64, f64) {
        mean_std(&self.scores.iter().map(|s| s.si_sdr).collect::<Vec<_>>())
    }

    pub fn si_sdri(&self) -> (f64, f64) {
        mean_std(&self.scores.iter().map(|s| s.si_sdri).collect::<Vec<_>>())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("example_id,speaker,si_sdr,si_sdri\n");
        for s in &self.scores {
            out.push_str(&format!("{},{},{},{}\n", s.example_id, s.speaker, s.si_sdr, s.si_sdri));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_estimate_hits_the_cap() {
        let r = [1.0, -2.0, 0.5, 3.0];
        assert_eq!(si_sdr(&r, &r).unwrap(), SI_SDR_CAP_DB);
        let doubled: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&doubled, &r).unwrap(), SI_SDR_CAP_DB);
    }

    #[test]
    fn zero_reference_is_a_domain_error() {
        assert!(matches!(si_sdr(&[1.0, 2.0], &[0.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(si_sdr(&[1.0], &[1.0, 2.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn mixture_scores_zero_improvement() {
        let r = [1.0, 0.2, -0.3, 0.8];
        let mix = [1.1, 0.0, -0.1, 0.9];
        assert_eq!(si_sdri(&mix, &r, &mix).unwrap(), 0.0);
        let copy = mix;
        assert_eq!(si_sdri(&copy, &r, &mix).unwrap(), 0.0);
        assert!(si_sdri(&r, &r, &mix).unwrap() > 0.0);
    }

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert!(mean_std(&[]).0.is_nan());
    }
}

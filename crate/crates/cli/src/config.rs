//! One key-value config file drives every subcommand.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use binet_core::data::CorpusSpec;
use binet_core::kv::{self, KvMap};
use binet_core::train::TrainConfig;
use binet_core::{Error, ModelConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    /// Existing corpus directory; when absent one is generated inside the run.
    pub corpus_dir: Option<PathBuf>,
    pub ablation_seeds: Vec<u64>,
    pub ablation_variants: Vec<Variant>,
    /// Evaluate only the first `n` examples of a split; 0 scores all.
    pub eval_limit: usize,
    /// Examples whose per-iteration masks `trace` dumps.
    pub trace_dump: usize,
    /// Parameter probes per variant in `grad-check`.
    pub grad_probes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            corpus: CorpusSpec::default(),
            train: TrainConfig::default(),
            corpus_dir: None,
            ablation_seeds: vec![0, 1, 2],
            ablation_variants: Variant::ALL.to_vec(),
            eval_limit: 0,
            trace_dump: 4,
            grad_probes: 24,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, text: &str) -> Result<Vec<T>, Error> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(vec![format!("{key}: cannot parse '{s}'")])))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut map = KvMap::parse(text)?;
        let d = RunConfig::default();
        let corpus = CorpusSpec::from_kv(&mut map)?;
        let model = ModelConfig::from_kv(&mut map)?;
        let train = TrainConfig::from_kv(&mut map)?;
        let corpus_dir = map.get::<String>("corpus")?.map(PathBuf::from);
        let ablation_seeds = match map.get::<String>("ablation_seeds")? {
            Some(s) => parse_list("ablation_seeds", &s)?,
            None => d.ablation_seeds,
        };
        let ablation_variants = match map.get::<String>("ablation_variants")? {
            Some(s) => parse_list("ablation_variants", &s)?,
            None => d.ablation_variants,
        };
        let cfg = RunConfig {
            model,
            corpus,
            train,
            corpus_dir,
            ablation_seeds,
            ablation_variants,
            eval_limit: map.get_or("eval_limit", d.eval_limit)?,
            trace_dump: map.get_or("trace_dump", d.trace_dump)?,
            grad_probes: map.get_or("grad_probes", d.grad_probes)?,
        };
        map.finish()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => RunConfig::parse(&config_text(p)?),
        }
    }

    /// Keys shared between sections (T, M, d_v, F_V) are written once.
    pub fn to_kv(&self) -> String {
        let mut seen = HashSet::new();
        let mut out = String::new();
        for section in [self.corpus.to_kv(), self.model.to_kv(), self.train.to_kv()] {
            for line in section.lines() {
                let key = line.split('=').next().unwrap_or("").trim().to_string();
                if seen.insert(key) {
                    out.push_str(line);
                    out.push('\n');
                }
            }
        }
        let mut extra = vec![
            ("ablation_seeds", join(&self.ablation_seeds)),
            ("ablation_variants", join(&self.ablation_variants)),
            ("eval_limit", self.eval_limit.to_string()),
            ("trace_dump", self.trace_dump.to_string()),
            ("grad_probes", self.grad_probes.to_string()),
        ];
        if let Some(dir) = &self.corpus_dir {
            extra.push(("corpus", dir.display().to_string()));
        }
        out.push_str(&kv::render(extra));
        out
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model.violations();
        v.extend(self.corpus.violations());
        v.extend(self.train.violations());
        if self.ablation_seeds.is_empty() {
            v.push("ablation_seeds must not be empty".into());
        }
        if self.ablation_variants.is_empty() {
            v.push("ablation_variants must not be empty".into());
        }
        if self.grad_probes < 10 {
            v.push(format!("grad_probes = {} must be at least 10", self.grad_probes));
        }
        v
    }

    pub fn validate(&self) -> Result<(), Error> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Model dimensions a corpus must match.
pub fn check_compatible(model: &ModelConfig, corpus: &CorpusSpec) -> Result<(), Error> {
    let mut v = Vec::new();
    let pairs = [
        ("T", model.samples, corpus.samples),
        ("M", model.speakers, corpus.speakers),
        ("d_v", model.cue_dims, corpus.cue_dims),
        ("F_V", model.video_frames, corpus.video_frames),
    ];
    for (key, m, c) in pairs {
        if m != c {
            v.push(format!("{key}: model expects {m} but the corpus has {c}"));
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(v))
    }
}

/// A config path may be a key-value file or a previous run's `run.json`.
pub fn config_text(path: &Path) -> Result<String, Error> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        let value: serde_json::Value = serde_json::from_str(&text)?;
        return value
            .get("config")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Config(vec![format!("{}: no 'config' string field", path.display())]));
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_shared_keys_once() {
        let cfg = RunConfig {
            ablation_seeds: vec![4, 5],
            ablation_variants: vec![Variant::Full, Variant::NoC],
            corpus_dir: Some("/data/c".into()),
            ..RunConfig::default()
        };
        let text = cfg.to_kv();
        assert_eq!(text.matches("\nT = ").count() + text.starts_with("T = ") as usize, 1);
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_lists_are_config_errors() {
        assert!(matches!(RunConfig::parse("nonsense = 3\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("ablation_variants = full,bogus\n"), Err(Error::Config(_))));
    }

    #[test]
    fn mismatched_corpus_is_reported() {
        let model = ModelConfig::default();
        let corpus = CorpusSpec { samples: 8000, ..CorpusSpec::default() };
        assert!(matches!(check_compatible(&model, &corpus), Err(Error::Config(v)) if v.len() == 1));
    }
}

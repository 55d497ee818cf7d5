//! Seeded sweeps over perspective count, aggregation and noise placement.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::corpus::chunks;
use crate::io::tokenizer::tokenize;
use crate::model::{Aggregation, ModelConfig, PerspectiveModel};
use crate::params::ParamStore;
use crate::train::{finetune_perspectives, pretrain_base, NoiseTarget, TrainConfig};

use super::perplexity_contexts;
use super::synthetic::CopyCorpusSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    NPerspectives,
    Aggregation,
    NoisePlacement,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 3] = [
        AblationAxis::NPerspectives,
        AblationAxis::Aggregation,
        AblationAxis::NoisePlacement,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::NPerspectives => "n_perspectives",
            AblationAxis::Aggregation => "aggregation",
            AblationAxis::NoisePlacement => "noise_placement",
        }
    }

    /// Arms of this axis; everything not varied stays at four perspectives,
    /// weighted aggregation and selector noise.
    pub fn arms(self) -> Vec<AblationArm> {
        let reference = AblationArm {
            perspectives: 4,
            aggregation: Aggregation::Weighted,
            noise_target: NoiseTarget::Selector,
        };
        match self {
            AblationAxis::NPerspectives => (1..=4)
                .map(|n| AblationArm {
                    perspectives: n,
                    ..reference
                })
                .collect(),
            AblationAxis::Aggregation => Aggregation::ALL
                .into_iter()
                .map(|aggregation| AblationArm {
                    aggregation,
                    ..reference
                })
                .collect(),
            AblationAxis::NoisePlacement => [NoiseTarget::Selector, NoiseTarget::Temporal]
                .into_iter()
                .map(|noise_target| AblationArm {
                    noise_target,
                    ..reference
                })
                .collect(),
        }
    }
}

impl std::fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::config("axis", format!("unknown axis `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AblationArm {
    pub perspectives: usize,
    pub aggregation: Aggregation,
    pub noise_target: NoiseTarget,
}

impl AblationArm {
    pub fn label(&self, axis: AblationAxis) -> String {
        match axis {
            AblationAxis::NPerspectives => format!("n={}", self.perspectives),
            AblationAxis::Aggregation => self.aggregation.to_string(),
            AblationAxis::NoisePlacement => self.noise_target.to_string(),
        }
    }
}

/// Everything a run depends on: model shape, both training stages, the
/// synthetic corpus and the seeds. This is also the CLI config file; missing
/// sections take [`AblationSettings::default`], present sections must be complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSettings {
    /// Shape shared by every arm; `perspectives` and `aggregation` are overridden per arm.
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub corpus: CopyCorpusSpec,
    /// One pre-trained base and one fine-tune per arm for every seed.
    pub seeds: Vec<u64>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::default(),
            corpus: CopyCorpusSpec::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl AblationSettings {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.corpus.validate()?;
        if self.seeds.len() < 3 {
            return Err(Error::config(
                "seeds",
                "an ablation needs at least three seeds",
            ));
        }
        Ok(())
    }
}

/// Training text and held-out contexts derived from a corpus spec.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub train: Vec<u32>,
    pub validation: Vec<Vec<u32>>,
}

impl PreparedCorpus {
    /// Held-out text cut into consecutive contexts, at most `limit` of them.
    pub fn new(spec: &CopyCorpusSpec, context_length: usize, limit: usize) -> Result<Self> {
        let corpus = spec.generate()?;
        let mut validation = chunks(&tokenize(&corpus.validation), context_length);
        validation.truncate(limit);
        if validation.is_empty() {
            return Err(Error::EmptyInput(
                "validation split shorter than one context",
            ));
        }
        Ok(Self {
            train: tokenize(&corpus.train),
            validation,
        })
    }
}

/// A pre-trained base and its validation perplexity.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub store: ParamStore<f32>,
    pub ppl: f64,
}

/// Pre-trains the base for `seed`.
pub fn pretrain_baseline(
    settings: &AblationSettings,
    data: &PreparedCorpus,
    seed: u64,
) -> Result<Baseline> {
    let config = settings.model.base();
    let train = TrainConfig {
        seed,
        ..settings.pretrain.clone()
    };
    let (store, _) = pretrain_base(&config, &data.train, &data.validation, &train)?;
    let ppl = perplexity_contexts(
        &PerspectiveModel::from_store(&config, &store)?,
        &data.validation,
    )?;
    Ok(Baseline { store, ppl })
}

/// Fine-tunes one arm on top of `base` and returns its validation perplexity.
pub fn finetune_arm(
    settings: &AblationSettings,
    data: &PreparedCorpus,
    base: &Baseline,
    arm: AblationArm,
    seed: u64,
) -> Result<f64> {
    let config = ModelConfig {
        perspectives: arm.perspectives,
        aggregation: arm.aggregation,
        ..settings.model.clone()
    };
    let train = TrainConfig {
        seed,
        noise_target: arm.noise_target,
        ..settings.finetune.clone()
    };
    let (store, _) = finetune_perspectives(&base.store, &config, &data.train, &[], &train)?;
    perplexity_contexts(
        &PerspectiveModel::from_store(&config, &store)?,
        &data.validation,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub label: String,
    pub arm: AblationArm,
    /// Validation perplexity per seed, in seed order; `None` where the run failed.
    pub per_seed: Vec<Option<f64>>,
    /// Over the successful seeds.
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator) over the successful seeds.
    pub stddev: f64,
    /// First failure, if any seed failed.
    pub failure: Option<String>,
}

impl ArmResult {
    fn new(label: String, arm: AblationArm, runs: Vec<Result<f64>>) -> Self {
        let failure = runs
            .iter()
            .find_map(|r| r.as_ref().err().map(|e| e.to_string()));
        let per_seed: Vec<Option<f64>> = runs.into_iter().map(|r| r.ok()).collect();
        let ok: Vec<f64> = per_seed.iter().flatten().copied().collect();
        let (mean, stddev) = mean_stddev(&ok);
        Self {
            label,
            arm,
            per_seed,
            mean,
            stddev,
            failure,
        }
    }
}

/// Mean and sample standard deviation; NaN where undefined.
pub fn mean_stddev(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub seeds: Vec<u64>,
    /// Mean validation perplexity of the frozen single-perspective bases.
    pub baseline_mean: f64,
    pub arms: Vec<ArmResult>,
}

impl AblationReport {
    /// Header `axis,arm,perspectives,aggregation,noise_target,mean_ppl,stddev_ppl,ppl_seed_<s>...,failure`.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("axis,arm,perspectives,aggregation,noise_target,mean_ppl,stddev_ppl");
        for s in &self.seeds {
            let _ = write!(out, ",ppl_seed_{s}");
        }
        out.push_str(",failure\n");
        for r in &self.arms {
            let _ = write!(
                out,
                "{},{},{},{},{},{:.6},{:.6}",
                self.axis,
                r.label,
                r.arm.perspectives,
                r.arm.aggregation,
                r.arm.noise_target,
                r.mean,
                r.stddev
            );
            for p in &r.per_seed {
                match p {
                    Some(p) => {
                        let _ = write!(out, ",{p:.6}");
                    }
                    None => out.push(','),
                }
            }
            let failure = r.failure.as_deref().unwrap_or("").replace([',', '\n'], ";");
            let _ = writeln!(out, ",{failure}");
        }
        out
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let rows: Vec<[String; 3]> = self
            .arms
            .iter()
            .map(|r| {
                let status = if r.failure.is_some() {
                    " (failed runs)"
                } else {
                    ""
                };
                [
                    r.label.clone(),
                    format!("{:.4} ± {:.4}", r.mean, r.stddev),
                    status.to_string(),
                ]
            })
            .collect();
        let w0 = rows.iter().map(|r| r[0].len()).max().unwrap_or(0).max(3);
        let w1 = rows
            .iter()
            .map(|r| r[1].chars().count())
            .max()
            .unwrap_or(0)
            .max(10);
        let mut out = format!(
            "{} ablation, {} seeds, frozen base ppl {:.4}\n",
            self.axis,
            self.seeds.len(),
            self.baseline_mean
        );
        let _ = writeln!(out, "{:<w0$}  {:<w1$}", "arm", "ppl (mean ± sd)");
        for r in rows {
            let _ = writeln!(out, "{:<w0$}  {:<w1$}{}", r[0], r[1], r[2]);
        }
        out
    }
}

/// Runs several axes, training each distinct arm once per seed and sharing
/// the pre-trained bases. Runs are sequential and fully seeded, so identical
/// settings give byte-identical reports.
pub fn run_ablations(
    axes: &[AblationAxis],
    settings: &AblationSettings,
) -> Result<Vec<AblationReport>> {
    settings.validate()?;
    let data = PreparedCorpus::new(
        &settings.corpus,
        settings.model.context_length,
        settings.finetune.validation_contexts,
    )?;
    let bases = settings
        .seeds
        .iter()
        .map(|&s| pretrain_baseline(settings, &data, s))
        .collect::<Result<Vec<_>>>()?;
    let baseline_mean = mean_stddev(&bases.iter().map(|b| b.ppl).collect::<Vec<_>>()).0;

    let mut cache: HashMap<(AblationArm, u64), Result<f64>> = HashMap::new();
    let mut reports = Vec::with_capacity(axes.len());
    for &axis in axes {
        let arms = axis
            .arms()
            .into_iter()
            .map(|arm| {
                let runs = settings
                    .seeds
                    .iter()
                    .zip(&bases)
                    .map(|(&seed, base)| {
                        cache
                            .entry((arm, seed))
                            .or_insert_with(|| finetune_arm(settings, &data, base, arm, seed))
                            .as_ref()
                            .map(|p| *p)
                            .map_err(|e| Error::Inconsistent(e.to_string()))
                    })
                    .collect();
                ArmResult::new(arm.label(axis), arm, runs)
            })
            .collect();
        reports.push(AblationReport {
            axis,
            seeds: settings.seeds.clone(),
            baseline_mean,
            arms,
        });
    }
    Ok(reports)
}

pub fn run_ablation(axis: AblationAxis, settings: &AblationSettings) -> Result<AblationReport> {
    Ok(run_ablations(&[axis], settings)?.remove(0))
}

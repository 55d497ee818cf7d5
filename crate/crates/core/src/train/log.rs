use std::fmt::Write as _;

use crate::error::{Error, Result};

const HEADER: &str = "# train-log v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    /// Mean cross-entropy over the batch, in nats.
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub mini_epoch: usize,
    /// Optimizer steps completed when the validation ran.
    pub step: usize,
    pub validation_ppl: f64,
}

/// Line-oriented training log:
///
/// ```text
/// # train-log v1
/// seed <u64>
/// step <index> <lr> <loss>
/// val <mini_epoch> <step> <perplexity>
/// ```
///
/// Reals are written with 17 significant digits, so parsing restores them exactly.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn final_validation_ppl(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.validation_ppl)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER}\nseed {}\n", self.seed);
        let mut epochs = self.epochs.iter().peekable();
        for s in &self.steps {
            while let Some(e) = epochs.next_if(|e| e.step <= s.step) {
                write_epoch(&mut out, e);
            }
            let _ = writeln!(out, "step {} {:.16e} {:.16e}", s.step, s.lr, s.loss);
        }
        for e in epochs {
            write_epoch(&mut out, e);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, HEADER)) => {}
            _ => return Err(Error::Parse("missing train-log header".into())),
        }
        let mut log = TrainLog::default();
        let mut seen_seed = false;
        for (i, line) in lines {
            let bad = || Error::Parse(format!("line {}: `{line}`", i + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["seed", s] => {
                    log.seed = s.parse().map_err(|_| bad())?;
                    seen_seed = true;
                }
                ["step", s, lr, loss] => log.steps.push(StepRecord {
                    step: s.parse().map_err(|_| bad())?,
                    lr: lr.parse().map_err(|_| bad())?,
                    loss: loss.parse().map_err(|_| bad())?,
                }),
                ["val", e, s, ppl] => log.epochs.push(EpochRecord {
                    mini_epoch: e.parse().map_err(|_| bad())?,
                    step: s.parse().map_err(|_| bad())?,
                    validation_ppl: ppl.parse().map_err(|_| bad())?,
                }),
                [] => {}
                _ => return Err(bad()),
            }
        }
        if !seen_seed {
            return Err(Error::Parse("train log has no seed line".into()));
        }
        Ok(log)
    }
}

fn write_epoch(out: &mut String, e: &EpochRecord) {
    let _ = writeln!(
        out,
        "val {} {} {:.16e}",
        e.mini_epoch, e.step, e.validation_ppl
    );
}

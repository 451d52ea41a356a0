use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::RunId;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Subject-dependent: each session of a subject is held out once.
    Session,
    /// Subject-independent: each subject is held out once.
    Subject,
}

impl Strategy {
    pub const ALL: [Strategy; 2] = [Strategy::Session, Strategy::Subject];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Session => "session",
            Strategy::Subject => "subject",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "session" | "leave-one-session-out" => Ok(Strategy::Session),
            "subject" | "leave-one-subject-out" => Ok(Strategy::Subject),
            _ => Err(Error::invalid(format!(
                "unknown strategy `{s}` (valid: session, subject)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub strategy: Strategy,
    /// Subject whose data is tested (the held-out subject, or the subject
    /// whose session is held out).
    pub subject: u32,
    /// Held-out session for the session strategy, 0 otherwise.
    pub index: u32,
    pub train: Vec<RunId>,
    pub validation: Vec<RunId>,
    pub test: Vec<RunId>,
}

impl Fold {
    /// Stable label used in file names and result rows.
    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::Session => format!("s{:02}-session{}", self.subject + 1, self.index + 1),
            Strategy::Subject => format!("s{:02}-heldout", self.subject + 1),
        }
    }
}

/// Fraction of training runs set aside for early stopping.
pub const VALIDATION_FRACTION: f64 = 0.1;

fn carve_validation(
    mut pool: Vec<RunId>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<RunId>, Vec<RunId>)> {
    if pool.len() < 2 {
        return Err(Error::invalid(format!(
            "{} training run(s) cannot be split into train and validation",
            pool.len()
        )));
    }
    pool.shuffle(rng);
    let n_val = ((pool.len() as f64 * VALIDATION_FRACTION).round() as usize).max(1);
    let mut val = pool.split_off(pool.len() - n_val);
    pool.sort();
    val.sort();
    Ok((pool, val))
}

/// Folds over `runs` for one strategy. Validation runs are a seeded 10%
/// (at least one run) of each fold's training runs.
pub fn make_folds(runs: &[RunId], strategy: Strategy, seed: u64) -> Result<Vec<Fold>> {
    let unique: BTreeSet<RunId> = runs.iter().copied().collect();
    if unique.len() != runs.len() {
        return Err(Error::invalid("run list contains duplicates"));
    }
    let subjects: BTreeSet<u32> = unique.iter().map(|r| r.subject).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = Vec::new();
    match strategy {
        Strategy::Session => {
            for &s in &subjects {
                let sessions: BTreeSet<u32> = unique
                    .iter()
                    .filter(|r| r.subject == s)
                    .map(|r| r.session)
                    .collect();
                if sessions.len() < 2 {
                    return Err(Error::invalid(format!(
                        "subject {s} has {} session(s); need at least 2",
                        sessions.len()
                    )));
                }
                for &held in &sessions {
                    let test: Vec<RunId> = unique
                        .iter()
                        .filter(|r| r.subject == s && r.session == held)
                        .copied()
                        .collect();
                    let pool: Vec<RunId> = unique
                        .iter()
                        .filter(|r| r.subject == s && r.session != held)
                        .copied()
                        .collect();
                    let (train, validation) = carve_validation(pool, &mut rng)?;
                    folds.push(Fold {
                        strategy,
                        subject: s,
                        index: held,
                        train,
                        validation,
                        test,
                    });
                }
            }
        }
        Strategy::Subject => {
            if subjects.len() < 2 {
                return Err(Error::invalid(format!(
                    "{} subject(s); need at least 2",
                    subjects.len()
                )));
            }
            for &s in &subjects {
                let test: Vec<RunId> = unique.iter().filter(|r| r.subject == s).copied().collect();
                let pool: Vec<RunId> = unique.iter().filter(|r| r.subject != s).copied().collect();
                let (train, validation) = carve_validation(pool, &mut rng)?;
                folds.push(Fold {
                    strategy,
                    subject: s,
                    index: 0,
                    train,
                    validation,
                    test,
                });
            }
        }
    }
    Ok(folds)
}

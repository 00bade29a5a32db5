//! Synthetic coordination games, exact-match scoring, and bootstrap CIs.
//!
//! Two Lewis-style signaling games are generated from bundled fact tables:
//!
//! * **Countries** — agent A is told "`[PERSON]` is at the `[LANDMARK]`",
//!   agent B is asked which country that person is in.
//! * **Tip Sheets** — agent A reads a three-company tip sheet; agent B must
//!   pick the dominant company (highest stock price among companies with no
//!   adverse event and non-negative earnings).
//!
//! Both generators are pure functions of `(n, seed)`; the underlying
//! scenarios are exposed so tests can re-derive every gold answer from the
//! generation rule itself.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::rng::SeededRng;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

const LANDMARKS_TSV: &str = include_str!("../data/landmarks.tsv");
const NAMES_TSV: &str = include_str!("../data/names.tsv");
const COMPANIES_TSV: &str = include_str!("../data/companies.tsv");

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("score list is empty")]
    EmptyScores,
    #[error("invalid bootstrap parameters: {0}")]
    InvalidParams(&'static str),
}

/// Which coordination game an instance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Game {
    Countries,
    TipSheets,
}

impl core::fmt::Display for Game {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Game::Countries => write!(f, "countries"),
            Game::TipSheets => write!(f, "tipsheets"),
        }
    }
}

/// One coordination-game item: A's prompt, B's prompt, and the gold answer.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TaskInstance {
    pub id: String,
    pub game: Game,
    pub prompt_a: String,
    pub prompt_b: String,
    pub gold: String,
}

/// The landmark/country fact table bundled with the crate.
pub fn landmark_table() -> Vec<(&'static str, &'static str)> {
    LANDMARKS_TSV
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (landmark, country) = l.split_once('\t').expect("malformed landmarks.tsv");
            (landmark, country)
        })
        .collect()
}

/// Bundled person names.
pub fn person_names() -> Vec<&'static str> {
    NAMES_TSV.lines().filter(|l| !l.is_empty()).collect()
}

/// Bundled (invented) company names.
pub fn company_names() -> Vec<&'static str> {
    COMPANIES_TSV.lines().filter(|l| !l.is_empty()).collect()
}

/// Underlying facts of one Countries instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountriesScenario {
    pub person: String,
    pub landmark: String,
    pub country: String,
}

impl CountriesScenario {
    pub fn render(&self, index: usize) -> TaskInstance {
        TaskInstance {
            id: format!("countries-{index:04}"),
            game: Game::Countries,
            prompt_a: format!("{} is at the {}.", self.person, self.landmark),
            prompt_b: format!("Which country is {} located in?", self.person),
            gold: self.country.clone(),
        }
    }
}

/// Samples `n` Countries scenarios from the bundled tables.
pub fn countries_scenarios(n: usize, seed: u64) -> Vec<CountriesScenario> {
    let table = landmark_table();
    let names = person_names();
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|_| {
            let person = names[rng.index(names.len())];
            let (landmark, country) = table[rng.index(table.len())];
            CountriesScenario {
                person: person.to_string(),
                landmark: landmark.to_string(),
                country: country.to_string(),
            }
        })
        .collect()
}

/// Generates `n` Countries task instances; deterministic per seed.
pub fn gen_countries(n: usize, seed: u64) -> Vec<TaskInstance> {
    countries_scenarios(n, seed)
        .iter()
        .enumerate()
        .map(|(i, s)| s.render(i))
        .collect()
}

/// One company's attributes on a tip sheet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TipCompany {
    pub name: String,
    /// Quarterly earnings change in percent; negative means a dip.
    pub earnings_delta: i32,
    pub stock_price: u32,
    /// True when the company is entangled in an IP lawsuit.
    pub adverse_event: bool,
}

/// Underlying facts of one Tip Sheets instance (always three companies).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TipSheetScenario {
    pub companies: Vec<TipCompany>,
}

impl TipSheetScenario {
    /// The dominant company: highest stock price among companies with no
    /// adverse event and non-negative earnings delta. `None` when no company
    /// qualifies or the top price is tied.
    pub fn dominant(&self) -> Option<&TipCompany> {
        let eligible: Vec<&TipCompany> = self
            .companies
            .iter()
            .filter(|c| !c.adverse_event && c.earnings_delta >= 0)
            .collect();
        let best = eligible.iter().map(|c| c.stock_price).max()?;
        let mut at_best = eligible.iter().filter(|c| c.stock_price == best);
        let winner = at_best.next()?;
        if at_best.next().is_some() {
            return None; // tied top price
        }
        Some(winner)
    }

    fn company_sentence(c: &TipCompany) -> String {
        let earnings = if c.earnings_delta < 0 {
            format!(
                "{} has taken a nosedive, as its quarterly earnings have dipped {}%.",
                c.name, -c.earnings_delta
            )
        } else if c.earnings_delta == 0 {
            format!("{} has reported flat quarterly earnings.", c.name)
        } else {
            format!(
                "{} has posted a quarterly earnings gain of {}%.",
                c.name, c.earnings_delta
            )
        };
        let price = format!(" Its stock price stands at {}.", c.stock_price);
        let adverse = if c.adverse_event {
            format!(
                " However, {} is involved in an IP lawsuit with its competitors.",
                c.name
            )
        } else {
            String::new()
        };
        format!("{earnings}{price}{adverse}")
    }

    pub fn render(&self, index: usize) -> TaskInstance {
        let sheet: Vec<String> = self.companies.iter().map(Self::company_sentence).collect();
        let roster: Vec<&str> = self.companies.iter().map(|c| c.name.as_str()).collect();
        let gold = self
            .dominant()
            .expect("scenario must have a unique dominant company")
            .name
            .clone();
        TaskInstance {
            id: format!("tipsheets-{index:04}"),
            game: Game::TipSheets,
            prompt_a: sheet.join(" "),
            prompt_b: format!(
                "You must invest in one company out of {{{}}}. Which do you invest in?",
                roster.join(", ")
            ),
            gold,
        }
    }
}

/// Samples `n` Tip Sheets scenarios, resampling until each one has a unique
/// dominant company.
pub fn tipsheet_scenarios(n: usize, seed: u64) -> Vec<TipSheetScenario> {
    let names = company_names();
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|_| loop {
            let mut picked: Vec<usize> = Vec::with_capacity(3);
            while picked.len() < 3 {
                let idx = rng.index(names.len());
                if !picked.contains(&idx) {
                    picked.push(idx);
                }
            }
            let companies: Vec<TipCompany> = picked
                .iter()
                .map(|&idx| TipCompany {
                    name: names[idx].to_string(),
                    earnings_delta: rng.index(19) as i32 - 9,
                    stock_price: 10 + rng.index(90) as u32,
                    adverse_event: rng.index(3) == 0,
                })
                .collect();
            let scenario = TipSheetScenario { companies };
            if scenario.dominant().is_some() {
                break scenario;
            }
        })
        .collect()
}

/// Generates `n` Tip Sheets task instances; deterministic per seed.
pub fn gen_tipsheets(n: usize, seed: u64) -> Vec<TaskInstance> {
    tipsheet_scenarios(n, seed)
        .iter()
        .enumerate()
        .map(|(i, s)| s.render(i))
        .collect()
}

/// Normalization applied before exact-match comparison: trims whitespace,
/// strips terminal punctuation, and lowercases.
pub fn normalize_answer(s: &str) -> String {
    let trimmed = s.trim();
    let stripped = trimmed.trim_end_matches(|c: char| c.is_whitespace() || ".,!?;:".contains(c));
    stripped.to_lowercase()
}

/// 1 iff the normalized prediction equals the normalized gold answer.
pub fn score_exact(prediction: &str, gold: &str) -> u32 {
    (normalize_answer(prediction) == normalize_answer(gold)) as u32
}

/// Exact match with normalization disabled (raw string equality).
pub fn score_exact_strict(prediction: &str, gold: &str) -> u32 {
    (prediction == gold) as u32
}

/// Scores under either mode; `strict` bypasses normalization.
pub fn score_with(prediction: &str, gold: &str, strict: bool) -> u32 {
    if strict {
        score_exact_strict(prediction, gold)
    } else {
        score_exact(prediction, gold)
    }
}

/// Accuracy with a percentile-bootstrap confidence interval.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub bootstrap_iters: usize,
    pub level: f64,
    pub seed: u64,
}

/// Percentile bootstrap over per-item scores.
///
/// Draws `iters` resamples of size `n` with replacement, takes each
/// resample's mean, and reads the `(1-level)/2` and `1-(1-level)/2`
/// quantiles off the sorted means by the nearest-rank rule
/// (`rank = ceil(q * iters)`, 1-based, clamped to at least 1).
pub fn bootstrap_ci(
    scores: &[f32],
    iters: usize,
    level: f64,
    seed: u64,
) -> Result<EvalReport, TaskError> {
    if scores.is_empty() {
        return Err(TaskError::EmptyScores);
    }
    if iters == 0 {
        return Err(TaskError::InvalidParams("iters must be positive"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(TaskError::InvalidParams("level must lie in (0, 1)"));
    }
    let n = scores.len();
    let accuracy = scores.iter().map(|&s| s as f64).sum::<f64>() / n as f64;
    let mut rng = SeededRng::new(seed);
    let mut means = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut sum = 0.0f64;
        for _ in 0..n {
            sum += scores[rng.index(n)] as f64;
        }
        means.push(sum / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("resample means are finite"));
    let rank = |q: f64| -> f64 {
        let r = libm::ceil(q * iters as f64) as usize;
        means[r.clamp(1, iters) - 1]
    };
    let alpha = (1.0 - level) / 2.0;
    Ok(EvalReport {
        n,
        accuracy,
        ci_low: rank(alpha),
        ci_high: rank(1.0 - alpha),
        bootstrap_iters: iters,
        level,
        seed,
    })
}

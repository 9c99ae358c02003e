//! Experiment labels and their per-task loss weights.

use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    Casr,
    Ncasr,
    Cjoist,
    Ncjoist,
    Tts,
    Bestrq,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Casr,
        Task::Ncasr,
        Task::Cjoist,
        Task::Ncjoist,
        Task::Tts,
        Task::Bestrq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Casr => "casr",
            Task::Ncasr => "ncasr",
            Task::Cjoist => "cjoist",
            Task::Ncjoist => "ncjoist",
            Task::Tts => "tts",
            Task::Bestrq => "bestrq",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    E0,
    EA,
    EB,
    EC,
    EAB,
    EAC,
    EABC,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::E0,
        Experiment::EA,
        Experiment::EB,
        Experiment::EC,
        Experiment::EAB,
        Experiment::EAC,
        Experiment::EABC,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Experiment::E0 => "E-0",
            Experiment::EA => "E-A",
            Experiment::EB => "E-B",
            Experiment::EC => "E-C",
            Experiment::EAB => "E-AB",
            Experiment::EAC => "E-AC",
            Experiment::EABC => "E-ABC",
        }
    }

    /// Shares of the unsupervised budget for (C-JOIST, NC-JOIST, TTS,
    /// BEST-RQ) as `(numerator, denominator)`.
    pub fn unsupervised_fractions(self) -> [(u64, u64); 4] {
        match self {
            Experiment::E0 => [(0, 1), (0, 1), (0, 1), (0, 1)],
            Experiment::EA => [(1, 2), (1, 2), (0, 1), (0, 1)],
            Experiment::EB => [(0, 1), (0, 1), (1, 1), (0, 1)],
            Experiment::EC => [(0, 1), (0, 1), (0, 1), (1, 1)],
            Experiment::EAB => [(1, 4), (1, 4), (1, 2), (0, 1)],
            Experiment::EAC => [(1, 4), (1, 4), (0, 1), (1, 2)],
            Experiment::EABC => [(1, 6), (1, 6), (1, 3), (1, 3)],
        }
    }

    /// Exact weights in task order as reduced `(numerator, denominator)`.
    pub fn rational_weights(self) -> [(u64, u64); 6] {
        if self == Experiment::E0 {
            return [(1, 2), (1, 2), (0, 1), (0, 1), (0, 1), (0, 1)];
        }
        let f = self.unsupervised_fractions();
        let scaled = |(n, d): (u64, u64)| reduce(n, 5 * d);
        [
            (2, 5),
            (2, 5),
            scaled(f[0]),
            scaled(f[1]),
            scaled(f[2]),
            scaled(f[3]),
        ]
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn reduce(n: u64, d: u64) -> (u64, u64) {
    if n == 0 {
        return (0, 1);
    }
    let g = gcd(n, d);
    (n / g, d / g)
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.label() == s)
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown experiment `{s}` (expected one of E-0, E-A, E-B, E-C, E-AB, E-AC, E-ABC)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskWeights {
    pub w: [f64; 6],
}

impl TaskWeights {
    pub fn new(w: [f64; 6]) -> Result<Self> {
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::usage("task weights must be finite and non-negative"));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::usage(format!("task weights sum to {s}, not 1")));
        }
        Ok(Self { w })
    }

    pub fn get(&self, t: Task) -> f64 {
        self.w[t.index()]
    }

    pub fn supervised_share(&self) -> f64 {
        self.w[0] + self.w[1]
    }

    pub fn unsupervised_share(&self) -> f64 {
        self.w[2..].iter().sum()
    }

    pub fn active(&self) -> Vec<Task> {
        Task::ALL.into_iter().filter(|&t| self.get(t) > 0.0).collect()
    }
}

pub fn resolve_weights(label: &str) -> Result<TaskWeights> {
    let e: Experiment = label.parse()?;
    let w = e.rational_weights().map(|(n, d)| n as f64 / d as f64);
    TaskWeights::new(w)
}

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RunArgs;
use crate::ensemble::Orientation;
use crate::error::{Error, Result};
use crate::family::InjectionFamily;
use crate::injection_opt::{BMode, DEFAULT_DELTA, DEFAULT_MAX_ITER};

/// Ranks in a config file may be a list or the flag string.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum RanksField {
    List(Vec<usize>),
    Text(String),
}

/// JSON config file. Keys mirror the command-line flags.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    x: Option<PathBuf>,
    y: Option<PathBuf>,
    demo: Option<String>,
    transpose: Option<bool>,
    ranks: Option<RanksField>,
    injections: Option<String>,
    delta: Option<f64>,
    max_iter: Option<usize>,
    seed: Option<u64>,
    b_mode: Option<String>,
    out: Option<PathBuf>,
    trace: Option<PathBuf>,
    timings: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Tanh,
    Sin,
    Cubic,
}

impl Nonlinearity {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => v.tanh(),
            Nonlinearity::Sin => v.sin(),
            Nonlinearity::Cubic => v + 0.25 * v * v * v,
        }
    }
}

impl FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Nonlinearity::Tanh),
            "sin" => Ok(Nonlinearity::Sin),
            "cubic" => Ok(Nonlinearity::Cubic),
            other => Err(Error::Config(format!("nonlinearity {other:?} is not one of tanh, sin, cubic"))),
        }
    }
}

impl fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Nonlinearity::Tanh => "tanh",
            Nonlinearity::Sin => "sin",
            Nonlinearity::Cubic => "cubic",
        })
    }
}

/// Parameters of the synthetic generator `x = f(W y) + noise`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemoSpec {
    pub seed: u64,
    pub m: usize,
    pub n: usize,
    pub samples: usize,
    pub noise: f64,
    pub nonlinearity: Nonlinearity,
}

impl DemoSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            m: 6,
            n: 6,
            samples: 200,
            noise: 0.05,
            nonlinearity: Nonlinearity::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.samples == 0 {
            return Err(Error::Config("demo dimensions m, n and samples must be at least 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("demo noise must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Parses `key=value` pairs separated by commas. `seed` falls back to
    /// `default_seed`; one of the two is required.
    pub fn parse(text: &str, default_seed: Option<u64>) -> Result<Self> {
        let mut seed = default_seed;
        let mut spec = DemoSpec::new(0);
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("demo spec entry {part:?} is not key=value")))?;
            let bad = || Error::Config(format!("demo spec: invalid value {value:?} for {key}"));
            match key.trim() {
                "seed" => seed = Some(value.trim().parse().map_err(|_| bad())?),
                "m" => spec.m = value.trim().parse().map_err(|_| bad())?,
                "n" => spec.n = value.trim().parse().map_err(|_| bad())?,
                "samples" => spec.samples = value.trim().parse().map_err(|_| bad())?,
                "noise" => spec.noise = value.trim().parse().map_err(|_| bad())?,
                "nonlinearity" => spec.nonlinearity = value.trim().parse()?,
                other => return Err(Error::Config(format!("demo spec: unknown key {other:?}"))),
            }
        }
        spec.seed = seed.ok_or_else(|| Error::Config("demo data needs a seed (seed=<u64> or --seed)".into()))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DataSource {
    Files { x: PathBuf, y: PathBuf },
    Demo(DemoSpec),
}

/// Effective configuration after merging the config file and flags.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: DataSource,
    pub transpose: bool,
    pub ranks: Vec<usize>,
    #[serde(serialize_with = "display")]
    pub injections: InjectionFamily,
    pub delta: f64,
    pub max_iter: usize,
    pub seed: Option<u64>,
    pub b_mode: BMode,
    pub out: PathBuf,
    pub trace: Option<PathBuf>,
    pub timings: bool,
}

fn display<T: fmt::Display, S: serde::Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

pub fn parse_ranks(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("ranks: {:?} is not a non-negative integer", p.trim())))
        })
        .collect()
}

fn read_file_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))
}

impl RunConfig {
    pub fn require_ranks(&self) -> Result<&[usize]> {
        if self.ranks.is_empty() {
            return Err(Error::Config("--ranks is required".into()));
        }
        Ok(&self.ranks)
    }

    pub fn orientation(&self) -> Orientation {
        Orientation::from_transpose_flag(self.transpose)
    }

    /// Flags take precedence over the config file.
    pub fn resolve(args: &RunArgs, default_out: &str) -> Result<Self> {
        let file = match &args.config {
            Some(path) => read_file_config(path)?,
            None => FileConfig::default(),
        };
        let seed = args.seed.or(file.seed);
        let flags_give_data = args.demo.is_some() || args.x.is_some() || args.y.is_some();
        let (demo, x, y) = if flags_give_data {
            (args.demo.clone(), args.x.clone(), args.y.clone())
        } else {
            (file.demo, file.x, file.y)
        };
        let data = match (demo, x, y) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
                return Err(Error::Config("give either --demo or --x/--y, not both".into()))
            }
            (Some(spec), None, None) => DataSource::Demo(DemoSpec::parse(&spec, seed)?),
            (None, Some(x), Some(y)) => DataSource::Files { x, y },
            (None, _, _) => return Err(Error::Config("both --x and --y are required (or --demo)".into())),
        };
        let ranks = match (&args.ranks, file.ranks) {
            (Some(text), _) => parse_ranks(text)?,
            (None, Some(RanksField::Text(text))) => parse_ranks(&text)?,
            (None, Some(RanksField::List(list))) => list,
            (None, None) => Vec::new(),
        };
        let injections: InjectionFamily = args
            .injections
            .clone()
            .or(file.injections)
            .unwrap_or_default()
            .parse()?;
        let delta = args.delta.or(file.delta).unwrap_or(DEFAULT_DELTA);
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!("delta must be positive and finite, got {delta}")));
        }
        let max_iter = args.max_iter.or(file.max_iter).unwrap_or(DEFAULT_MAX_ITER);
        if max_iter == 0 {
            return Err(Error::Config("max-iter must be at least 1".into()));
        }
        let b_mode = match args.b_mode.clone().or(file.b_mode) {
            Some(text) => text.parse()?,
            None => BMode::default(),
        };
        Ok(Self {
            data,
            transpose: args.transpose || file.transpose.unwrap_or(false),
            ranks,
            injections,
            delta,
            max_iter,
            seed,
            b_mode,
            out: args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from(default_out)),
            trace: args.trace.clone().or(file.trace),
            timings: args.timings || file.timings.unwrap_or(false),
        })
    }
}

//! Optional TOML file of flat `key = value` settings. Command-line flags
//! take precedence over the file, and the file over built-in defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{CliError, CliResult};

pub const WORKERS_ENV: &str = "NUISANCE_ADJUST_WORKERS";

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub level: Option<f64>,
    pub paper_quantile: Option<bool>,
    pub log: Option<bool>,
    pub demean: Option<bool>,
    pub workers: Option<usize>,

    pub reps: Option<usize>,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub fim: Option<String>,
    pub b0: Option<f64>,
    pub b1: Option<f64>,
    pub b2: Option<f64>,

    pub t_len: Option<usize>,
    pub m_len: Option<usize>,
    pub burn_in: Option<usize>,
    pub rel_errors: Option<Vec<f64>>,
    pub omega: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,

    pub data_dir: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub depths: Option<Vec<usize>>,
    pub hidden: Option<usize>,
    pub epochs: Option<usize>,
    pub max_epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub augment_radius: Option<usize>,
    pub target_accuracy: Option<f64>,
    pub groups: Option<usize>,
    pub group_size: Option<usize>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::input(path, e.message()))
    }
}

/// Worker cap from the environment; unset or unparsable means no cap.
pub fn workers_from_env() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse().ok()).filter(|w| *w > 0)
}

/// Comma-separated list, e.g. `0.05,0.3`.
pub fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("--{flag}: cannot parse {p:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn parses_flat_keys_and_rejects_unknown_ones() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "seed = 7\nreps = 50\nrel_errors = [0.05, 0.3]").unwrap();
        let c = FileConfig::load(f.path()).unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.rel_errors, Some(vec![0.05, 0.3]));

        let mut g = tempfile::NamedTempFile::new().unwrap();
        writeln!(g, "sede = 7").unwrap();
        assert_eq!(FileConfig::load(g.path()).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<usize>("depths", "2, 4").unwrap(), vec![2, 4]);
        assert!(parse_list::<usize>("depths", "2,x").is_err());
    }
}

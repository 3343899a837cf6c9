//! Plain-text run configuration: one `key = value` per line, `#` comments.
//!
//! Every key is optional and falls back to the built-in defaults. Unknown
//! keys are rejected so a typo cannot silently run with defaults. The raw
//! entries are kept verbatim for echoing into reports.

use std::collections::BTreeMap;
use std::path::PathBuf;

use flowpatch::edit::{ControlSource, EditConfig, PromptSources};
use flowpatch::flow::OdeMethod;
use flowpatch::masks::IntraImageMode;
use flowpatch::train::TrainConfig;

use crate::Failure;

/// Everything a run can be configured with, plus the raw key-value echo.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub edit: EditConfig,
    pub train: TrainConfig,
    /// Seeds per variant in the ablation harness.
    pub ablate_seeds: usize,
    /// Default paths, overridden by the matching flags.
    pub ckpt: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// The parsed entries exactly as written, for report embedding.
    pub entries: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            edit: EditConfig::default(),
            train: TrainConfig::default(),
            ablate_seeds: 5,
            ckpt: None,
            out: None,
            report: None,
            entries: BTreeMap::new(),
        }
    }
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Failure {
    Failure::Invalid(format!("config line {line}: {msg}"))
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, Failure>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| bad(line, format!("{key}: {e}")))
}

impl RunConfig {
    /// Parse the `key = value` grammar. Later lines override earlier ones.
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(n, format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(bad(n, format!("{key} has no value")));
            }
            cfg.apply(n, key, value)?;
            cfg.entries.insert(key.to_string(), value.to_string());
        }
        Ok(cfg)
    }

    fn apply(&mut self, n: usize, key: &str, v: &str) -> Result<(), Failure> {
        match key {
            "n_steps" => self.edit.n_steps = parse_num(n, key, v)?,
            "method" => {
                self.edit.method = match v {
                    "euler" => OdeMethod::Euler,
                    "second_order" => OdeMethod::SecondOrder,
                    _ => return Err(bad(n, format!("method must be euler or second_order, got {v}"))),
                }
            }
            "guidance" => self.edit.guidance = parse_num(n, key, v)?,
            "beta" => self.edit.beta = parse_num(n, key, v)?,
            "i2i_mode" => {
                self.edit.i2i_mode = match v {
                    "block_diag" => IntraImageMode::BlockDiag,
                    "edit_to_bg" => IntraImageMode::EditToBg,
                    "edit_bg_band" => IntraImageMode::EditBgBand,
                    _ => {
                        return Err(bad(
                            n,
                            format!("i2i_mode must be block_diag, edit_to_bg, or edit_bg_band, got {v}"),
                        ))
                    }
                }
            }
            "band_radius" => self.edit.band_radius = parse_num(n, key, v)?,
            "refine_frac" => self.edit.refine_frac = parse_num(n, key, v)?,
            "refine_threshold" => self.edit.refine_threshold = parse_num(n, key, v)?,
            "refine_bound" => {
                self.edit.refine_bound = match v {
                    "none" => None,
                    _ => Some(parse_num(n, key, v)?),
                }
            }
            "stage1_boost" => self.edit.stage1_boost = parse_num(n, key, v)?,
            "epsilon" => self.edit.epsilon = parse_num(n, key, v)?,
            "salient_k" => self.edit.salient_k = parse_num(n, key, v)?,
            "control" => {
                self.edit.control = match v {
                    "selective" => ControlSource::CachedSelective,
                    "full_cc" => ControlSource::CachedEverywhere,
                    "current_pass" => ControlSource::CurrentPass,
                    "no_cc" => ControlSource::Off,
                    _ => {
                        return Err(bad(
                            n,
                            format!("control must be selective, full_cc, current_pass, or no_cc, got {v}"),
                        ))
                    }
                }
            }
            "prompts" => {
                self.edit.prompts = match v {
                    "dual" => PromptSources::Dual,
                    "local_only" => PromptSources::LocalOnly,
                    "target_only" => PromptSources::TargetOnly,
                    _ => {
                        return Err(bad(
                            n,
                            format!("prompts must be dual, local_only, or target_only, got {v}"),
                        ))
                    }
                }
            }
            "edge_sigma" => self.edit.edge_sigma = parse_num(n, key, v)?,
            "edge_low" => self.edit.edge_low = parse_num(n, key, v)?,
            "edge_high" => self.edit.edge_high = parse_num(n, key, v)?,
            "train_steps" => self.train.steps = parse_num(n, key, v)?,
            "batch_size" => self.train.batch_size = parse_num(n, key, v)?,
            "lr" => self.train.lr = parse_num(n, key, v)?,
            "warmup" => self.train.warmup = parse_num(n, key, v)?,
            "clip" => self.train.clip = parse_num(n, key, v)?,
            "dataset_size" => self.train.dataset_size = parse_num(n, key, v)?,
            "ablate_seeds" => {
                self.ablate_seeds = parse_num(n, key, v)?;
                if self.ablate_seeds == 0 {
                    return Err(bad(n, "ablate_seeds must be at least 1"));
                }
            }
            "ckpt" => self.ckpt = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            "report" => self.report = Some(PathBuf::from(v)),
            _ => return Err(bad(n, format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Load from a file, or return defaults when no path is given.
    pub fn load(path: Option<&std::path::Path>) -> Result<Self, Failure> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
                RunConfig::parse(&text)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_survive_an_empty_config() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.edit.n_steps, 50);
        assert_eq!(cfg.train.steps, 2000);
        assert_eq!(cfg.ablate_seeds, 5);
        assert!(cfg.entries.is_empty());
    }

    #[test]
    fn comments_and_spacing_are_ignored() {
        let cfg = RunConfig::parse(
            "# full comment\n  n_steps = 12  # trailing\n\nguidance=2.5\ncontrol = no_cc\n",
        )
        .unwrap();
        assert_eq!(cfg.edit.n_steps, 12);
        assert_eq!(cfg.edit.guidance, 2.5);
        assert!(matches!(cfg.edit.control, ControlSource::Off));
        assert_eq!(cfg.entries.len(), 3);
        assert_eq!(cfg.entries["guidance"], "2.5");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("n_setps = 12\n").unwrap_err();
        match err {
            Failure::Invalid(msg) => assert!(msg.contains("unknown key n_setps"), "{msg}"),
            other => panic!("wrong failure {other:?}"),
        }
    }

    #[test]
    fn malformed_values_name_the_line() {
        let err = RunConfig::parse("\n\nguidance = wide\n").unwrap_err();
        match err {
            Failure::Invalid(msg) => assert!(msg.starts_with("config line 3"), "{msg}"),
            other => panic!("wrong failure {other:?}"),
        }
    }

    #[test]
    fn refine_bound_accepts_none_and_numbers() {
        assert_eq!(RunConfig::parse("refine_bound = none\n").unwrap().edit.refine_bound, None);
        assert_eq!(RunConfig::parse("refine_bound = 7\n").unwrap().edit.refine_bound, Some(7));
    }
}

//! Run configuration: a TOML file, then command-line overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use hallu_core::judge::{default_templates, Backoff, JudgeEndpoint, QuestionTemplate};
use serde::{Deserialize, Serialize};

use crate::error::{fail, Classify, CliResult, Kind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Maximum judge calls in flight.
    pub concurrency: usize,
    /// Judge answer cache; defaults to `judge-cache.jsonl` in the output directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    pub data: DataConfig,
    pub judges: Vec<JudgeConfig>,
    /// Question templates; the three built-in ones when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<Vec<QuestionTemplate>>,
    pub vote: VoteSection,
    pub pope: PopeSection,
    pub augment: AugmentSection,
    pub sample: SampleSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            concurrency: 16,
            cache: None,
            data: DataConfig::default(),
            judges: Vec::new(),
            templates: None,
            vote: VoteSection::default(),
            pope: PopeSection::default(),
            augment: AugmentSection::default(),
            sample: SampleSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Class vocabulary; the built-in COCO list when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instances: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub captions: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub responses: Option<PathBuf>,
    /// JSON array of image ids restricting the dataset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset: Option<PathBuf>,
    pub allow_empty_responses: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeConfig {
    pub id: String,
    pub url: String,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Retries after the first attempt.
    #[serde(default = "default_retry_budget")]
    pub retry_budget: u32,
    #[serde(default = "default_backoff_initial_ms")]
    pub backoff_initial_ms: u64,
    #[serde(default = "default_backoff_max_ms")]
    pub backoff_max_ms: u64,
    /// Static request header whose value is read from an environment variable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header: Option<HeaderConfig>,
    /// Accepted only so that sampling can be refused with a clear message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub do_sample: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

fn default_max_new_tokens() -> u32 {
    JudgeEndpoint::DEFAULT_MAX_NEW_TOKENS
}

fn default_timeout_secs() -> u64 {
    30
}

fn default_retry_budget() -> u32 {
    3
}

fn default_backoff_initial_ms() -> u64 {
    Backoff::default().initial.as_millis() as u64
}

fn default_backoff_max_ms() -> u64 {
    Backoff::default().max.as_millis() as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeaderConfig {
    pub name: String,
    pub value_env: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoteSection {
    /// Votes needed to decide a cell; unanimity when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopeSection {
    pub num_images: usize,
    pub pos_per_image: usize,
    pub neg_per_image: usize,
    pub seed: u64,
}

impl Default for PopeSection {
    fn default() -> Self {
        let d = hallu_core::pope::PopeConfig::default();
        Self {
            num_images: d.num_images,
            pos_per_image: d.pos_per_image,
            neg_per_image: d.neg_per_image,
            seed: d.seed,
        }
    }
}

impl PopeSection {
    pub fn to_core(&self) -> hallu_core::pope::PopeConfig {
        hallu_core::pope::PopeConfig {
            num_images: self.num_images,
            pos_per_image: self.pos_per_image,
            neg_per_image: self.neg_per_image,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub negatives_per_image: usize,
    pub cooccurrence_bias_weight: f64,
    pub seed: u64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let d = hallu_core::augment::AugmentConfig::default();
        Self {
            negatives_per_image: d.negatives_per_image,
            cooccurrence_bias_weight: d.cooccurrence_bias_weight,
            seed: d.seed,
        }
    }
}

impl AugmentSection {
    pub fn to_core(&self) -> hallu_core::augment::AugmentConfig {
        hallu_core::augment::AugmentConfig {
            negatives_per_image: self.negatives_per_image,
            cooccurrence_bias_weight: self.cooccurrence_bias_weight,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    pub seed: u64,
}

impl RunConfig {
    /// Parse a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text =
            std::fs::read_to_string(path).config(format!("reading config {}", path.display()))?;
        let mut config: RunConfig =
            toml::from_str(&text).config(format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.rebase(base);
        Ok(config)
    }

    /// The config file if given, otherwise defaults.
    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    fn rebase(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.output_dir);
        for p in [
            &mut self.cache,
            &mut self.data.vocabulary,
            &mut self.data.instances,
            &mut self.data.captions,
            &mut self.data.responses,
            &mut self.data.subset,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
    }

    pub fn templates(&self) -> Vec<QuestionTemplate> {
        self.templates.clone().unwrap_or_else(default_templates)
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache
            .clone()
            .unwrap_or_else(|| self.output_dir.join("judge-cache.jsonl"))
    }

    /// Checks needed before any judge call.
    pub fn validate_judging(&self) -> CliResult<()> {
        if self.judges.is_empty() {
            return Err(fail(
                Kind::Config,
                "no judges configured (add [[judges]] entries)",
            ));
        }
        if self.concurrency == 0 {
            return Err(fail(Kind::Config, "concurrency must be at least 1"));
        }
        let mut ids = BTreeSet::new();
        for j in &self.judges {
            if !ids.insert(j.id.as_str()) {
                return Err(fail(
                    Kind::Config,
                    format!("judge id {:?} appears twice", j.id),
                ));
            }
            if j.do_sample == Some(true) || j.temperature.is_some_and(|t| t != 0.0) {
                return Err(fail(
                    Kind::Config,
                    format!(
                        "judge {:?}: judges decode greedily; remove do_sample/temperature",
                        j.id
                    ),
                ));
            }
            // the client is built without TLS; terminate https in front of the endpoint
            if !j.url.starts_with("http://") {
                return Err(fail(
                    Kind::Config,
                    format!(
                        "judge {:?}: url must start with http://, got {:?}",
                        j.id, j.url
                    ),
                ));
            }
            if j.max_new_tokens == 0 {
                return Err(fail(
                    Kind::Config,
                    format!("judge {:?}: max_new_tokens must be positive", j.id),
                ));
            }
        }
        let templates = self.templates();
        if templates.is_empty() {
            return Err(fail(Kind::Config, "templates list is empty"));
        }
        let mut qids = BTreeSet::new();
        for t in &templates {
            if !qids.insert(t.question_id()) {
                return Err(fail(
                    Kind::Config,
                    format!("template id {:?} appears twice", t.question_id()),
                ));
            }
        }
        self.vote_config(self.judges.len() * templates.len())?;
        Ok(())
    }

    pub fn vote_config(&self, nm: usize) -> CliResult<hallu_core::verdict::VoteConfig> {
        let config = match self.vote.k {
            Some(k) => hallu_core::verdict::VoteConfig::from_k(k, nm),
            None => hallu_core::verdict::VoteConfig::unanimous(nm),
        };
        config.validate(nm).config("vote threshold")?;
        Ok(config)
    }

    pub fn endpoints(&self) -> CliResult<Vec<JudgeEndpoint>> {
        self.judges
            .iter()
            .map(|j| {
                let mut e = JudgeEndpoint::new(&j.id, &j.url);
                e.max_new_tokens = j.max_new_tokens;
                e.timeout = Duration::from_secs(j.timeout_secs);
                e.retry_budget = j.retry_budget;
                e.backoff = Backoff {
                    initial: Duration::from_millis(j.backoff_initial_ms),
                    max: Duration::from_millis(j.backoff_max_ms),
                };
                if let Some(h) = &j.header {
                    let value = std::env::var(&h.value_env)
                        .config(format!("judge {:?}: header variable {}", j.id, h.value_env))?;
                    e.header = Some((h.name.clone(), value));
                }
                Ok(e)
            })
            .collect()
    }

    pub fn require<'a>(value: &'a Option<PathBuf>, what: &str, flag: &str) -> CliResult<&'a Path> {
        value.as_deref().ok_or_else(|| {
            fail(
                Kind::Config,
                format!("{what} not given (set data.{flag} or pass --{flag})"),
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = include_str!("../hallu.example.toml");

    #[test]
    fn annotated_example_parses_and_validates() {
        let config: RunConfig = toml::from_str(EXAMPLE).unwrap();
        assert_eq!(config.judges.len(), 3);
        assert_eq!(config.templates().len(), 3);
        config.validate_judging().unwrap();
        assert_eq!(config.vote_config(9).unwrap().k, 9);
    }

    #[test]
    fn sampling_judges_are_refused() {
        let mut config: RunConfig = toml::from_str(EXAMPLE).unwrap();
        config.judges[0].temperature = Some(0.7);
        assert_eq!(config.validate_judging().unwrap_err().kind, Kind::Config);
        config.judges[0].temperature = Some(0.0);
        config.judges[1].do_sample = Some(true);
        assert_eq!(config.validate_judging().unwrap_err().kind, Kind::Config);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("concurency = 3").is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut config: RunConfig = toml::from_str(EXAMPLE).unwrap();
        config.rebase(Path::new("/work"));
        assert_eq!(
            config.data.instances.unwrap(),
            Path::new("/work/annotations/instances_val2014.json")
        );
        assert_eq!(config.output_dir, Path::new("/work/runs"));
    }

    #[test]
    fn invalid_threshold_is_a_config_error() {
        let mut config: RunConfig = toml::from_str(EXAMPLE).unwrap();
        config.vote.k = Some(4);
        assert!(config.validate_judging().is_err());
    }
}

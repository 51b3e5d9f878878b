mod chair;
mod datagen;
mod judge;
mod leaderboard;
mod pope;
mod score;

use std::collections::BTreeSet;
use std::path::Path;

use hallu_core::dataset::{load_instances, InstanceSet};
use hallu_core::responses::{ingest_responses, IngestOptions, ResponseSet};
use hallu_core::vocab::{load_vocabulary, COCO80_TOML};
use hallu_core::{ClassVocabulary, ImageId};

use crate::config::RunConfig;
use crate::error::{fail, Classify, CliResult, Kind};
use crate::output::{Inputs, Stage, Staged};
use crate::{Command, Common, DataArgs, PopeAction};

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Judge {
            common,
            data,
            responses,
            cache,
            concurrency,
            dry_run,
        } => {
            let mut config = resolve(&common, &data)?;
            override_path(&mut config.data.responses, responses);
            override_path(&mut config.cache, cache);
            if let Some(n) = concurrency {
                config.concurrency = n;
            }
            judge::run(&config, dry_run)
        }
        Command::Score {
            common,
            data,
            responses,
            tensor,
            k,
        } => {
            let mut config = resolve(&common, &data)?;
            override_path(&mut config.data.responses, responses);
            if k.is_some() {
                config.vote.k = k;
            }
            score::run(&config, tensor.as_deref())
        }
        Command::Pope { action } => match action {
            PopeAction::Generate {
                common,
                data,
                mode,
                num_images,
                seed,
            } => {
                let mut config = resolve(&common, &data)?;
                if let Some(n) = num_images {
                    config.pope.num_images = n;
                }
                if let Some(s) = seed {
                    config.pope.seed = s;
                }
                pope::generate(&config, mode)
            }
            PopeAction::Score {
                common,
                questions,
                answers,
                model_id,
            } => {
                let config = resolve(&common, &DataArgs::default())?;
                pope::score(&config, &questions, &answers, model_id)
            }
        },
        Command::Chair {
            common,
            data,
            responses,
            captions,
        } => {
            let mut config = resolve(&common, &data)?;
            override_path(&mut config.data.responses, responses);
            override_path(&mut config.data.captions, captions);
            chair::run(&config)
        }
        Command::Augment {
            common,
            data,
            negatives,
            bias,
            seed,
        } => {
            let mut config = resolve(&common, &data)?;
            if let Some(n) = negatives {
                config.augment.negatives_per_image = n;
            }
            if let Some(b) = bias {
                config.augment.cooccurrence_bias_weight = b;
            }
            if let Some(s) = seed {
                config.augment.seed = s;
            }
            datagen::augment(&config)
        }
        Command::Sample {
            common,
            data,
            target,
            seed,
        } => {
            let mut config = resolve(&common, &data)?;
            if target.is_some() {
                config.sample.target = target;
            }
            if let Some(s) = seed {
                config.sample.seed = s;
            }
            datagen::sample(&config)
        }
        Command::Correlate { a, b, metrics } => leaderboard::correlate(&a, &b, &metrics),
        Command::Report { common, reports } => {
            let config = resolve(&common, &DataArgs::default())?;
            leaderboard::report(&config, &reports)
        }
    }
}

fn override_path(slot: &mut Option<std::path::PathBuf>, flag: Option<std::path::PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

/// Config file first, then flags.
fn resolve(common: &Common, data: &DataArgs) -> CliResult<RunConfig> {
    let mut config = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(dir) = &common.output_dir {
        config.output_dir = dir.clone();
    }
    override_path(&mut config.data.vocabulary, data.vocabulary.clone());
    override_path(&mut config.data.instances, data.instances.clone());
    override_path(&mut config.data.subset, data.subset.clone());
    Ok(config)
}

fn load_vocab(config: &RunConfig, inputs: &mut Inputs) -> CliResult<ClassVocabulary> {
    match &config.data.vocabulary {
        Some(path) => {
            inputs.file("vocabulary", path)?;
            load_vocabulary(path).input("loading vocabulary")
        }
        None => {
            inputs.bytes("vocabulary", COCO80_TOML.as_bytes());
            Ok(ClassVocabulary::coco80())
        }
    }
}

/// Instances, restricted to the configured subset when there is one.
fn load_dataset(
    config: &RunConfig,
    vocab: &ClassVocabulary,
    inputs: &mut Inputs,
) -> CliResult<InstanceSet> {
    let path = RunConfig::require(&config.data.instances, "instances file", "instances")?;
    inputs.file("instances", path)?;
    let set = load_instances(path, vocab).input(format!("loading {}", path.display()))?;
    if set.clamped_boxes > 0 {
        log::warn!("{} boxes were clamped into their images", set.clamped_boxes);
    }
    let Some(subset_path) = &config.data.subset else {
        return Ok(set);
    };
    inputs.file("subset", subset_path)?;
    let ids = read_subset(subset_path)?;
    restrict(set, &ids)
}

fn read_subset(path: &Path) -> CliResult<Vec<ImageId>> {
    let bytes = std::fs::read(path).input(format!("reading {}", path.display()))?;
    let mut ids: Vec<ImageId> = serde_json::from_slice(&bytes).input(format!(
        "{} must be a JSON array of image ids",
        path.display()
    ))?;
    ids.sort();
    ids.dedup();
    Ok(ids)
}

fn restrict(set: InstanceSet, ids: &[ImageId]) -> CliResult<InstanceSet> {
    let keep: BTreeSet<ImageId> = ids.iter().copied().collect();
    let gt = set.gt.select(ids).input("subset")?;
    Ok(InstanceSet {
        images: set
            .images
            .into_iter()
            .filter(|i| keep.contains(&i.id))
            .collect(),
        annotations: set
            .annotations
            .into_iter()
            .filter(|a| keep.contains(&a.image_id))
            .collect(),
        gt,
        digest: set.digest,
        clamped_boxes: set.clamped_boxes,
    })
}

fn load_responses(
    config: &RunConfig,
    images: &[ImageId],
    inputs: &mut Inputs,
) -> CliResult<ResponseSet> {
    let path = RunConfig::require(&config.data.responses, "responses file", "responses")?;
    inputs.file("responses", path)?;
    let options = IngestOptions {
        allow_empty: config.data.allow_empty_responses,
        ..IngestOptions::default()
    };
    let set =
        ingest_responses(path, images, &options).input(format!("loading {}", path.display()))?;
    if set.is_empty() {
        return Err(fail(
            Kind::Input,
            format!("{} contains no responses", path.display()),
        ));
    }
    if set.prompt_mismatches > 0 {
        log::warn!(
            "{} responses were generated from a non-canonical prompt",
            set.prompt_mismatches
        );
    }
    if set.coverage < 1.0 {
        log::warn!(
            "responses cover {:.1}% of the dataset images; scoring uses the covered ones",
            100.0 * set.coverage
        );
    }
    Ok(set)
}

/// Stage a run directory, or report the existing one and stop.
fn stage(dir: std::path::PathBuf) -> CliResult<Option<Stage>> {
    match Stage::open(dir)? {
        Staged::New(stage) => Ok(Some(stage)),
        Staged::Existing(path) => {
            println!("unchanged inputs; existing run at {}", path.display());
            Ok(None)
        }
    }
}

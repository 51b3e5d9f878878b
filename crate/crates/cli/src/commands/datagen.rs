use std::collections::BTreeMap;

use hallu_core::augment::augment_dataset;
use hallu_core::dataset::{build_cooccurrence, coverage, natural_subsample};
use serde::Serialize;

use super::{load_dataset, load_vocab, stage};
use crate::config::RunConfig;
use crate::error::{fail, Classify, CliResult, Kind};
use crate::output::{now_unix, run_digest, run_dir, Envelope, Inputs};

#[derive(Serialize)]
struct AugmentSummary {
    records: usize,
    file: &'static str,
}

pub fn augment(config: &RunConfig) -> CliResult<()> {
    let core = config.augment.to_core();
    core.validate().config("augment settings")?;
    let mut inputs = Inputs::default();
    let vocab = load_vocab(config, &mut inputs)?;
    let dataset = load_dataset(config, &vocab, &mut inputs)?;
    let cooc = build_cooccurrence(&dataset.gt);

    let digest = run_digest("augment", &config.augment, &inputs);
    let Some(stage) = stage(run_dir(&config.output_dir, "augment", &digest))? else {
        return Ok(());
    };
    let file = "enumeration.jsonl";
    let records = augment_dataset(&dataset, &vocab, &cooc, &core, stage.path(file))
        .input("generating records")?;
    stage.write_json(
        "report.json",
        &Envelope {
            kind: "augment",
            digest: &digest,
            created_unix: now_unix(),
            model_id: None,
            metrics: BTreeMap::new(),
            config,
            inputs: &inputs,
            result: AugmentSummary { records, file },
        },
    )?;
    let dir = stage.commit()?;
    println!("{records} records written to {}", dir.join(file).display());
    Ok(())
}

#[derive(Serialize)]
struct SampleSummary {
    images: usize,
    classes_covered: usize,
    classes_in_pool: usize,
    file: &'static str,
}

pub fn sample(config: &RunConfig) -> CliResult<()> {
    let target = config.sample.target.ok_or_else(|| {
        fail(
            Kind::Config,
            "sample size not given (set sample.target or pass --target)",
        )
    })?;
    if target == 0 {
        return Err(fail(Kind::Config, "sample size must be positive"));
    }
    let mut inputs = Inputs::default();
    let vocab = load_vocab(config, &mut inputs)?;
    let dataset = load_dataset(config, &vocab, &mut inputs)?;
    let picked = natural_subsample(
        &dataset.gt,
        &dataset.instance_counts(),
        target,
        config.sample.seed,
    );
    let covered = coverage(&dataset.gt, &picked).len();
    let in_pool = coverage(&dataset.gt, dataset.gt.images()).len();

    let digest = run_digest("sample", &config.sample, &inputs);
    let Some(stage) = stage(run_dir(&config.output_dir, "sample", &digest))? else {
        return Ok(());
    };
    let file = "subset.json";
    stage.write_json(file, &picked)?;
    stage.write_json(
        "report.json",
        &Envelope {
            kind: "sample",
            digest: &digest,
            created_unix: now_unix(),
            model_id: None,
            metrics: BTreeMap::new(),
            config,
            inputs: &inputs,
            result: SampleSummary {
                images: picked.len(),
                classes_covered: covered,
                classes_in_pool: in_pool,
                file,
            },
        },
    )?;
    let dir = stage.commit()?;
    println!(
        "{} images covering {covered} of {in_pool} classes written to {}",
        picked.len(),
        dir.join(file).display()
    );
    Ok(())
}

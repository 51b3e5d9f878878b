use std::collections::BTreeMap;
use std::path::Path;

use hallu_core::metrics::{MetricsReport, RunMetadata, METRIC_NAMES};
use hallu_core::responses::length_stats;
use hallu_core::verdict::apply_voting;

use super::judge::{locate, read_tensor, settings, TENSOR_FILE};
use super::{load_dataset, load_responses, load_vocab, stage};
use crate::config::RunConfig;
use crate::error::{fail, Classify, CliResult, Kind};
use crate::output::{now_unix, run_digest, run_dir, Envelope, Inputs};

pub fn run(config: &RunConfig, tensor: Option<&Path>) -> CliResult<()> {
    let mut inputs = Inputs::default();
    let vocab = load_vocab(config, &mut inputs)?;
    let dataset = load_dataset(config, &vocab, &mut inputs)?;
    let responses = load_responses(config, &dataset.image_ids(), &mut inputs)?;
    let tensor_path = match tensor {
        Some(p) => p.to_path_buf(),
        None => {
            let p = locate(config, &inputs).join(TENSOR_FILE);
            if !p.exists() {
                return Err(fail(
                    Kind::Input,
                    format!(
                        "no tensor at {}; run `hallu judge` with this config or pass --tensor",
                        p.display()
                    ),
                ));
            }
            p
        }
    };
    inputs.file("tensor", &tensor_path)?;
    let tensor = read_tensor(&tensor_path)?;
    let vote = config.vote_config(tensor.nm())?;
    if tensor.image_ids() != responses.image_ids().as_slice() {
        return Err(fail(
            Kind::Input,
            "tensor rows do not match the responses' images",
        ));
    }

    let gt = dataset
        .gt
        .select(tensor.image_ids())
        .input("aligning ground truth")?;
    let pred = apply_voting(&tensor, vote).input("voting")?;
    let metadata = RunMetadata {
        model_id: responses.model_id.clone(),
        k: vote.k,
        nm: tensor.nm(),
        vote_label: vote.label,
        dataset_digest: dataset.digest_hex(),
        median_response_chars: length_stats(&responses).ok().map(|s| s.median_chars),
        invalid_votes: pred.any_invalid(),
    };
    let report = MetricsReport::compute(&pred, &gt, metadata).input("scoring")?;

    let score_settings = serde_json::json!({ "judge": settings(config), "k": vote.k });
    let digest = run_digest("score", &score_settings, &inputs);
    let Some(stage) = stage(run_dir(&config.output_dir, "score", &digest))? else {
        return Ok(());
    };
    let table = report.render_table();
    let metrics: BTreeMap<String, f64> = METRIC_NAMES
        .iter()
        .zip(report.values())
        .map(|(n, v)| (n.to_string(), v))
        .collect();
    let mut predictions = Vec::new();
    pred.write_csv(&mut predictions)
        .input("rendering predictions")?;
    stage.write("per_class.csv", report.per_class_csv(&vocab))?;
    stage.write("table.txt", &table)?;
    stage.write("predictions.csv", predictions)?;
    stage.write_json(
        "report.json",
        &Envelope {
            kind: "score",
            digest: &digest,
            created_unix: now_unix(),
            model_id: report.metadata.model_id.clone(),
            metrics,
            config,
            inputs: &inputs,
            result: &report,
        },
    )?;
    let dir = stage.commit()?;
    print!("{table}");
    if !report.excluded_precision.is_empty() || !report.excluded_recall.is_empty() {
        let names = |ids: &[hallu_core::ClassId]| {
            ids.iter()
                .map(|id| {
                    vocab
                        .get(*id)
                        .map_or_else(|| id.to_string(), |c| c.name.clone())
                })
                .collect::<Vec<_>>()
                .join(", ")
        };
        println!(
            "classes without predicted positives (left out of P_CLS): {}",
            names(&report.excluded_precision)
        );
        println!(
            "classes without true positives in the data (left out of R_CLS): {}",
            names(&report.excluded_recall)
        );
    }
    println!("report written to {}", dir.display());
    Ok(())
}

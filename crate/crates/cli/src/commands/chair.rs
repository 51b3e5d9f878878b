use std::collections::BTreeMap;

use hallu_core::chair::{build_chair_gt, chair_scores};
use hallu_core::dataset::{load_captions, CaptionIndex};

use super::{load_dataset, load_responses, load_vocab, stage};
use crate::config::RunConfig;
use crate::error::{Classify, CliResult};
use crate::output::{now_unix, run_digest, run_dir, Envelope, Inputs};

pub fn run(config: &RunConfig) -> CliResult<()> {
    let mut inputs = Inputs::default();
    let vocab = load_vocab(config, &mut inputs)?;
    let dataset = load_dataset(config, &vocab, &mut inputs)?;
    let responses = load_responses(config, &dataset.image_ids(), &mut inputs)?;
    let captions = match &config.data.captions {
        Some(path) => {
            inputs.file("captions", path)?;
            load_captions(path).input(format!("loading {}", path.display()))?
        }
        None => {
            log::warn!("no captions file; ground truth comes from instance annotations only");
            CaptionIndex::default()
        }
    };
    let texts = responses.texts();
    let images: Vec<_> = texts.keys().copied().collect();
    let gt = build_chair_gt(&images, &dataset.annotations, &captions, &vocab);
    let scores = chair_scores(&texts, &gt, &vocab).input("scoring")?;

    let digest = run_digest("chair", &serde_json::Value::Null, &inputs);
    let Some(stage) = stage(run_dir(&config.output_dir, "chair", &digest))? else {
        return Ok(());
    };
    let metrics = BTreeMap::from([
        ("chair_i".to_string(), scores.chair_i),
        ("chair_s".to_string(), scores.chair_s),
    ]);
    stage.write_json(
        "report.json",
        &Envelope {
            kind: "chair",
            digest: &digest,
            created_unix: now_unix(),
            model_id: responses.model_id.clone(),
            metrics,
            config,
            inputs: &inputs,
            result: &scores,
        },
    )?;
    let dir = stage.commit()?;
    println!(
        "CHAIR_i {:.4} ({}/{} objects)  CHAIR_s {:.4} ({}/{} texts)",
        scores.chair_i,
        scores.hallucinated_objects,
        scores.predicted_objects,
        scores.chair_s,
        scores.sentences_with_hallucination,
        scores.sentences
    );
    if scores.degenerate {
        println!("no objects were mentioned at all; CHAIR_i is 0 by convention");
    }
    println!("report written to {}", dir.display());
    Ok(())
}

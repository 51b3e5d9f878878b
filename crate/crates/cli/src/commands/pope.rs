use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::Path;

use hallu_core::pope::{
    generate_pope, generate_popec, match_answers, read_answers, read_questions, score_pope,
    write_questions, PopeLabel,
};
use serde::Serialize;

use super::{load_dataset, load_vocab, stage};
use crate::config::RunConfig;
use crate::error::{Classify, CliResult};
use crate::output::{now_unix, run_digest, run_dir, Envelope, Inputs};
use crate::PopeMode;

#[derive(Serialize)]
struct QuestionSummary {
    mode: &'static str,
    questions: usize,
    images: usize,
    yes: usize,
    no: usize,
}

pub fn generate(config: &RunConfig, mode: PopeMode) -> CliResult<()> {
    let mut inputs = Inputs::default();
    let vocab = load_vocab(config, &mut inputs)?;
    let dataset = load_dataset(config, &vocab, &mut inputs)?;
    let (name, settings) = match mode {
        PopeMode::Original => ("original", serde_json::to_value(&config.pope).unwrap()),
        PopeMode::Complete => ("complete", serde_json::Value::Null),
    };
    let questions = match mode {
        PopeMode::Original => generate_pope(&dataset.gt, &vocab, &config.pope.to_core()),
        PopeMode::Complete => generate_popec(&dataset.gt, &vocab),
    }
    .input("generating questions")?;

    let digest = run_digest(
        "pope-questions",
        &serde_json::json!({ "mode": name, "settings": settings }),
        &inputs,
    );
    let Some(stage) = stage(run_dir(&config.output_dir, "pope-questions", &digest))? else {
        return Ok(());
    };
    let mut bytes = Vec::new();
    write_questions(&questions, &mut bytes).input("rendering questions")?;
    stage.write("questions.jsonl", bytes)?;
    let yes = questions
        .iter()
        .filter(|q| q.gt_label == PopeLabel::Yes)
        .count();
    let images = questions
        .iter()
        .map(|q| q.image_id)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let summary = QuestionSummary {
        mode: name,
        questions: questions.len(),
        images,
        yes,
        no: questions.len() - yes,
    };
    stage.write_json(
        "report.json",
        &Envelope {
            kind: "pope-questions",
            digest: &digest,
            created_unix: now_unix(),
            model_id: None,
            metrics: BTreeMap::new(),
            config,
            inputs: &inputs,
            result: &summary,
        },
    )?;
    let dir = stage.commit()?;
    println!(
        "{} questions ({} yes, {} no) over {} images written to {}",
        summary.questions,
        summary.yes,
        summary.no,
        summary.images,
        dir.join("questions.jsonl").display()
    );
    Ok(())
}

pub fn score(
    config: &RunConfig,
    questions: &Path,
    answers: &Path,
    model_id: Option<String>,
) -> CliResult<()> {
    let mut inputs = Inputs::default();
    inputs.file("questions", questions)?;
    inputs.file("answers", answers)?;
    let open = |p: &Path| {
        std::fs::File::open(p)
            .map(BufReader::new)
            .input(format!("opening {}", p.display()))
    };
    let qs = read_questions(open(questions)?).input(format!("reading {}", questions.display()))?;
    let ans = read_answers(open(answers)?).input(format!("reading {}", answers.display()))?;
    let records = match_answers(&qs, &ans).input("matching answers to questions")?;
    let scores = score_pope(&records);

    let digest = run_digest(
        "pope",
        &serde_json::json!({ "model_id": model_id }),
        &inputs,
    );
    let Some(stage) = stage(run_dir(&config.output_dir, "pope", &digest))? else {
        return Ok(());
    };
    let metrics = BTreeMap::from([
        ("pope_precision".to_string(), scores.precision),
        ("pope_recall".to_string(), scores.recall),
        ("pope_f1".to_string(), scores.f1),
        ("pope_accuracy".to_string(), scores.accuracy),
    ]);
    stage.write_json(
        "report.json",
        &Envelope {
            kind: "pope",
            digest: &digest,
            created_unix: now_unix(),
            model_id,
            metrics,
            config,
            inputs: &inputs,
            result: &scores,
        },
    )?;
    let dir = stage.commit()?;
    println!(
        "P {:.1}  R {:.1}  F1 {:.1}  Acc {:.1}  ({} questions, {} unparseable)",
        scores.precision,
        scores.recall,
        scores.f1,
        scores.accuracy,
        scores.questions,
        scores.unparseable
    );
    println!("report written to {}", dir.display());
    Ok(())
}

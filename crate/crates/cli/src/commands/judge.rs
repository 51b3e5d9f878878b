use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use hallu_core::judge::{run_aqa, AqaError, AqaOptions, AqaProgress, HttpJudge, JudgementTensor};
use serde::Serialize;

use super::{load_dataset, load_responses, load_vocab, stage};
use crate::config::RunConfig;
use crate::error::{fail, Classify, CliResult, Kind};
use crate::output::{now_unix, run_digest, run_dir, Envelope, Inputs};

pub const TENSOR_FILE: &str = "tensor.json";

/// What decides a tensor: judge identities and decoding, the templates and
/// the inputs. Server addresses and retry policy do not.
pub fn settings(config: &RunConfig) -> serde_json::Value {
    let judges: Vec<_> = config
        .judges
        .iter()
        .map(|j| serde_json::json!({ "id": j.id, "max_new_tokens": j.max_new_tokens }))
        .collect();
    serde_json::json!({ "judges": judges, "templates": config.templates() })
}

/// Digest and directory of the judge run these inputs would produce.
pub fn locate(config: &RunConfig, inputs: &Inputs) -> PathBuf {
    let mut judge_inputs = Inputs::default();
    for role in ["vocabulary", "instances", "subset", "responses"] {
        if let Some(d) = inputs.get(role) {
            judge_inputs.0.insert(role.to_string(), d.to_string());
        }
    }
    let digest = run_digest("judge", &settings(config), &judge_inputs);
    run_dir(&config.output_dir, "judge", &digest)
}

#[derive(Serialize)]
struct JudgeResult {
    tensor_file: &'static str,
    images: usize,
    classes: usize,
    judges: usize,
    templates: usize,
    cells: usize,
    cached_cells: usize,
    unique_prompts: usize,
    generate_calls: usize,
    requeries: usize,
    invalid_cells: usize,
}

pub fn run(config: &RunConfig, dry_run: bool) -> CliResult<()> {
    config.validate_judging()?;
    let endpoints = config.endpoints()?;
    let templates = config.templates();
    let mut inputs = Inputs::default();
    let vocab = load_vocab(config, &mut inputs)?;
    let dataset = load_dataset(config, &vocab, &mut inputs)?;
    let responses = load_responses(config, &dataset.image_ids(), &mut inputs)?;

    let cells = responses.len() * vocab.len() * endpoints.len() * templates.len();
    println!(
        "plan: {} images x {} classes x {} judges x {} templates = {cells} judgements",
        responses.len(),
        vocab.len(),
        endpoints.len(),
        templates.len()
    );
    if dry_run {
        return Ok(());
    }

    let dir = locate(config, &inputs);
    let digest = dir
        .file_name()
        .unwrap()
        .to_string_lossy()
        .trim_start_matches("judge-")
        .to_string();
    let Some(stage) = stage(dir)? else {
        return Ok(());
    };
    let judges: Vec<HttpJudge> = endpoints
        .into_iter()
        .map(HttpJudge::new)
        .collect::<Result<_, _>>()
        .config("building HTTP client")?;
    let cache = config.cache_path();
    if let Some(parent) = cache.parent() {
        std::fs::create_dir_all(parent).input(format!("creating {}", parent.display()))?;
    }

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .input("starting async runtime")?;
    let options = AqaOptions {
        progress: Some(progress_printer()),
        ..AqaOptions::with_concurrency(config.concurrency)
    };
    let run = runtime
        .block_on(run_aqa(
            &responses, &vocab, &judges, &templates, &cache, &options,
        ))
        .map_err(|e| match e {
            AqaError::Endpoint {
                source,
                completed,
                total,
            } => fail(
                Kind::Endpoint,
                format!("{source}; {completed} of {total} judgements are cached, rerun to resume"),
            ),
            AqaError::Cache(e) => {
                fail(Kind::Input, format!("judge cache {}: {e}", cache.display()))
            }
            other => fail(Kind::Config, other),
        })?;
    let stats = run.stats;
    eprintln!(
        "done: {} judgements ({} from cache), {} calls, {} re-asked, {} invalid",
        stats.cells, stats.cached_cells, stats.generate_calls, stats.requeries, stats.invalid_cells
    );

    stage.write(TENSOR_FILE, run.tensor.to_bytes())?;
    let result = JudgeResult {
        tensor_file: TENSOR_FILE,
        images: run.tensor.image_ids().len(),
        classes: run.tensor.class_ids().len(),
        judges: run.tensor.n_judges(),
        templates: run.tensor.n_questions(),
        cells: stats.cells,
        cached_cells: stats.cached_cells,
        unique_prompts: stats.unique_prompts,
        generate_calls: stats.generate_calls,
        requeries: stats.requeries,
        invalid_cells: stats.invalid_cells,
    };
    stage.write_json(
        "report.json",
        &Envelope {
            kind: "judge",
            digest: &digest,
            created_unix: now_unix(),
            model_id: responses.model_id.clone(),
            metrics: Default::default(),
            config,
            inputs: &inputs,
            result,
        },
    )?;
    let dir = stage.commit()?;
    println!("tensor written to {}", dir.join(TENSOR_FILE).display());
    Ok(())
}

pub fn read_tensor(path: &std::path::Path) -> CliResult<JudgementTensor> {
    let bytes = std::fs::read(path).input(format!("reading tensor {}", path.display()))?;
    JudgementTensor::from_bytes(&bytes).input(format!("parsing tensor {}", path.display()))
}

fn progress_printer() -> Arc<dyn Fn(&AqaProgress) + Send + Sync> {
    let start = Instant::now();
    Arc::new(move |p: &AqaProgress| {
        let step = (p.total / 100).max(1);
        if !p.done.is_multiple_of(step) && p.done != p.total {
            return;
        }
        let rate = p.generate_calls as f64 / start.elapsed().as_secs_f64().max(1e-3);
        eprintln!(
            "judged {}/{} ({:.0}%), {rate:.1} calls/s, {} invalid",
            p.done,
            p.total,
            100.0 * p.done as f64 / p.total.max(1) as f64,
            p.invalid
        );
    })
}

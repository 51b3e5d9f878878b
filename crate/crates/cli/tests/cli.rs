use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hallu_core::chair::{build_chair_gt, chair_scores};
use hallu_core::dataset::{parse_captions, parse_instances};
use hallu_core::judge::JudgementTensor;
use hallu_core::metrics::{MetricsReport, RunMetadata};
use hallu_core::responses::CANONICAL_PROMPT;
use hallu_core::verdict::{apply_voting, VoteConfig};
use hallu_core::{ClassVocabulary, ImageId};
use hallu_mock_judge::MockJudge;
use serde_json::{json, Value};

const TEST5: &str = include_str!("../../core/fixtures/test5.vocab");
const NAMES: [&str; 5] = ["dog", "cat", "apple", "chair", "traffic light"];

/// Which fixture classes each image holds, and what the model said.
const IMAGES: [(u64, &[usize], &str); 8] = [
    (1, &[0], "A dog lying on a rug."),
    (2, &[1, 3], "A cat on a chair next to a dog."),
    (3, &[2], "An apple and a cat on a table."),
    (4, &[4], "A traffic light at an intersection."),
    (5, &[0, 1], "A dog and a cat."),
    (6, &[3], "A wooden chair."),
    (7, &[], "An empty street."),
    (8, &[2, 4], "A traffic light and an apple."),
];

fn hallu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hallu"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn text_of(prompt: &str) -> &str {
    let body = prompt.strip_prefix("Text: ").unwrap();
    &body[..body.rfind(" Read the text").unwrap()]
}

fn asked(prompt: &str) -> &'static str {
    let q = prompt.rsplit_once("Please answer yes or no. ").unwrap().1;
    NAMES
        .iter()
        .filter(|n| q.contains(&format!(" {n} ")))
        .max_by_key(|n| n.len())
        .unwrap()
}

fn substring_rule(prompt: &str) -> String {
    if text_of(prompt).contains(asked(prompt)) {
        "Yes"
    } else {
        "No"
    }
    .to_string()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let vocab = ClassVocabulary::from_toml_str(TEST5).unwrap();
        let mut images = Vec::new();
        let mut anns = Vec::new();
        let mut captions = Vec::new();
        let mut responses = String::new();
        for (id, present, text) in IMAGES {
            images.push(
                json!({"id": id, "width": 300, "height": 300, "file_name": format!("{id}.jpg")}),
            );
            for &c in present {
                anns.push(json!({"image_id": id, "category_id": vocab.classes()[c].id.0, "bbox": [10, 20, 100, 120], "iscrowd": 0}));
            }
            captions.push(json!({"image_id": id, "caption": "A picture."}));
            responses.push_str(
                &json!({"model_id": "fixture-model", "image_id": id, "prompt": CANONICAL_PROMPT, "response": text})
                    .to_string(),
            );
            responses.push('\n');
        }
        let cats: Vec<_> = vocab
            .classes()
            .iter()
            .map(|c| json!({"id": c.id.0, "name": c.name}))
            .collect();
        let write = |name: &str, v: String| std::fs::write(dir.path().join(name), v).unwrap();
        write("test5.vocab", TEST5.to_string());
        write(
            "instances.json",
            json!({"images": images, "annotations": anns, "categories": cats}).to_string(),
        );
        write(
            "captions.json",
            json!({"images": [], "annotations": captions}).to_string(),
        );
        write("responses.jsonl", responses);
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn config(&self, urls: &[String], extra: &str) -> String {
        let mut text = String::from(
            "output_dir = \"runs\"\nconcurrency = 4\n[data]\nvocabulary = \"test5.vocab\"\ninstances = \"instances.json\"\ncaptions = \"captions.json\"\nresponses = \"responses.jsonl\"\n",
        );
        for (i, url) in urls.iter().enumerate() {
            text.push_str(&format!(
                "[[judges]]\nid = \"judge{i}\"\nurl = \"{url}\"\nretry_budget = 1\nbackoff_initial_ms = 1\nbackoff_max_ms = 2\n"
            ));
        }
        text.push_str(extra);
        let path = self.path("run.toml");
        std::fs::write(&path, text).unwrap();
        path.display().to_string()
    }

    fn runs(&self) -> Vec<PathBuf> {
        let dir = self.path("runs");
        let mut out: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map(|d| {
                d.map(|e| e.unwrap().path())
                    .filter(|p| p.is_dir())
                    .collect()
            })
            .unwrap_or_default();
        out.sort();
        out
    }

    fn run_of(&self, kind: &str) -> Vec<PathBuf> {
        self.runs()
            .into_iter()
            .filter(|p| {
                p.file_name()
                    .unwrap()
                    .to_string_lossy()
                    .starts_with(&format!("{kind}-"))
            })
            .collect()
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn judge_then_score_matches_the_library() {
    let fx = Fixture::new();
    let a = MockJudge::start(substring_rule).await.unwrap();
    let b = MockJudge::start(substring_rule).await.unwrap();
    let config = fx.config(&[a.url(), b.url()], "[[templates]]\nquestion_id = \"is_there\"\ntext = \"Is there {article} {class_name} in this image?\"\n");

    let out = hallu(&["judge", "-c", &config]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out)
        .contains("plan: 8 images x 5 classes x 2 judges x 1 templates = 80 judgements"));
    let calls = a.answered() + b.answered();
    assert_eq!(calls, 80);

    // unchanged inputs: the published run is left alone and nothing is re-asked
    let again = hallu(&["judge", "-c", &config]);
    assert!(again.status.success());
    assert!(stdout(&again).contains("existing run"));
    assert_eq!(a.answered() + b.answered(), calls);

    let judge_dir = &fx.run_of("judge")[0];
    let tensor =
        JudgementTensor::from_bytes(&std::fs::read(judge_dir.join("tensor.json")).unwrap())
            .unwrap();
    let set = parse_instances(
        &std::fs::read(fx.path("instances.json")).unwrap(),
        &ClassVocabulary::from_toml_str(TEST5).unwrap(),
    )
    .unwrap();

    for k in ["2", "1"] {
        let out = hallu(&["score", "-c", &config, "--k", k]);
        if k == "1" {
            // 2k > nm is violated
            assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
            continue;
        }
        assert!(out.status.success(), "{}", stderr(&out));
        assert!(stdout(&out).contains("F0.5_CLS"));
    }
    let scores = fx.run_of("score");
    assert_eq!(scores.len(), 1);
    let report = read_json(&scores[0].join("report.json"));
    assert_eq!(report["kind"], "score");
    assert_eq!(report["model_id"], "fixture-model");
    assert_eq!(report["result"]["metadata"]["k"], 2);
    assert!(report["config"]["judges"].is_array());
    assert!(report["inputs"]["tensor"].is_string());
    assert!(scores[0].join("per_class.csv").exists());
    assert!(scores[0].join("table.txt").exists());

    let pred = apply_voting(&tensor, VoteConfig::unanimous(2)).unwrap();
    let gt = set.gt.select(tensor.image_ids()).unwrap();
    let meta = RunMetadata {
        model_id: Some("fixture-model".into()),
        k: 2,
        nm: 2,
        vote_label: VoteConfig::unanimous(2).label,
        dataset_digest: set.digest_hex(),
        median_response_chars: None,
        invalid_votes: false,
    };
    let expected = MetricsReport::compute(&pred, &gt, meta).unwrap();
    for (name, value) in hallu_core::metrics::METRIC_NAMES
        .iter()
        .zip(expected.values())
    {
        assert_eq!(report["metrics"][*name].as_f64().unwrap(), value, "{name}");
    }
    // "A cat on a chair next to a dog." mentions a dog that is not there
    assert!(expected.p_all < 100.0);
}

#[tokio::test(flavor = "multi_thread")]
async fn vote_thresholds_give_distinct_reports() {
    let fx = Fixture::new();
    let a = MockJudge::start(substring_rule).await.unwrap();
    let b = MockJudge::start(|p| {
        if p.contains("dog") {
            "yes".into()
        } else {
            substring_rule(p)
        }
    })
    .await
    .unwrap();
    let c = MockJudge::start(substring_rule).await.unwrap();
    let config = fx.config(&[a.url(), b.url(), c.url()], "");
    assert!(hallu(&["judge", "-c", &config]).status.success());
    for k in ["5", "9"] {
        let out = hallu(&["score", "-c", &config, "--k", k]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let reports: Vec<Value> = fx
        .run_of("score")
        .iter()
        .map(|d| read_json(&d.join("report.json")))
        .collect();
    assert_eq!(reports.len(), 2);
    let mut ks: Vec<u64> = reports
        .iter()
        .map(|r| r["result"]["metadata"]["k"].as_u64().unwrap())
        .collect();
    ks.sort();
    assert_eq!(ks, [5, 9]);
    let labels: Vec<&str> = reports
        .iter()
        .map(|r| r["result"]["metadata"]["vote_label"].as_str().unwrap())
        .collect();
    assert!(
        labels.contains(&"unanimous") && labels.contains(&"simple_majority"),
        "{labels:?}"
    );
}

#[tokio::test(flavor = "multi_thread")]
async fn dead_endpoint_exits_4_and_resumes() {
    let fx = Fixture::new();
    let a = MockJudge::start(substring_rule).await.unwrap();
    let config = fx.config(&[a.url()], "");
    a.die_after(30);
    let out = hallu(&["judge", "-c", &config]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("rerun to resume"));
    assert!(fx.run_of("judge").is_empty());

    a.revive();
    let out = hallu(&["judge", "-c", &config]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(a.duplicate_prompts(), 0);
    assert_eq!(a.answered(), 8 * 5 * 3);
}

#[test]
fn dry_run_prints_plan_without_calls() {
    let fx = Fixture::new();
    // nothing listens here
    let config = fx.config(&["http://127.0.0.1:9".into()], "");
    let out = hallu(&["judge", "-c", &config, "--dry-run"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("= 120 judgements"));
    assert!(fx.runs().is_empty());
}

#[test]
fn full_scale_plan() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = ClassVocabulary::coco80();
    let images: Vec<_> = (1..=5000)
        .map(|i| json!({"id": i, "width": 640, "height": 480, "file_name": "x.jpg"}))
        .collect();
    let cats: Vec<_> = vocab
        .classes()
        .iter()
        .map(|c| json!({"id": c.id.0, "name": c.name}))
        .collect();
    std::fs::write(
        dir.path().join("instances.json"),
        json!({"images": images, "annotations": [], "categories": cats}).to_string(),
    )
    .unwrap();
    let responses: String = (1..=5000)
        .map(|i| format!("{}\n", json!({"model_id": "m", "image_id": i, "prompt": CANONICAL_PROMPT, "response": "A scene."})))
        .collect();
    std::fs::write(dir.path().join("responses.jsonl"), responses).unwrap();
    let mut config =
        String::from("[data]\ninstances = \"instances.json\"\nresponses = \"responses.jsonl\"\n");
    for i in 0..3 {
        config.push_str(&format!(
            "[[judges]]\nid = \"j{i}\"\nurl = \"http://127.0.0.1:9\"\n"
        ));
    }
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    let out = hallu(&[
        "judge",
        "-c",
        &dir.path().join("run.toml").display().to_string(),
        "--dry-run",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(
        stdout(&out).contains(
            "plan: 5000 images x 80 classes x 3 judges x 3 templates = 3600000 judgements"
        ),
        "{}",
        stdout(&out)
    );
}

#[test]
fn empty_responses_are_refused() {
    let fx = Fixture::new();
    std::fs::write(fx.path("responses.jsonl"), "").unwrap();
    let config = fx.config(&["http://127.0.0.1:9".into()], "");
    let out = hallu(&["judge", "-c", &config]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("no responses"), "{}", stderr(&out));
    assert!(fx.runs().is_empty());
}

#[test]
fn config_errors_exit_2_before_side_effects() {
    let fx = Fixture::new();
    let config = fx.config(&["http://127.0.0.1:9".into()], "");
    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replace("retry_budget = 1", "retry_budget = 1\ntemperature = 0.7");
    std::fs::write(&config, text).unwrap();
    let out = hallu(&["judge", "-c", &config]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("greedily"));

    std::fs::write(&config, "concurency = 2\n").unwrap();
    assert_eq!(hallu(&["judge", "-c", &config]).status.code(), Some(2));
    assert_eq!(hallu(&["sample", "-c", &config]).status.code(), Some(2));
    assert!(!fx.path("runs").exists());
}

#[test]
fn missing_input_exits_3() {
    let fx = Fixture::new();
    let out = hallu(&[
        "sample",
        "--instances",
        &fx.p("missing.json"),
        "--target",
        "2",
        "--output-dir",
        &fx.p("runs"),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn pope_generate_and_score() {
    let fx = Fixture::new();
    let common = [
        "--vocabulary",
        &fx.p("test5.vocab"),
        "--instances",
        &fx.p("instances.json"),
        "--output-dir",
        &fx.p("runs"),
    ];
    let mut args = vec!["pope", "generate", "--mode", "complete"];
    args.extend(common);
    let out = hallu(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let dir = &fx.run_of("pope-questions")[0];
    let questions = std::fs::read_to_string(dir.join("questions.jsonl")).unwrap();
    assert_eq!(questions.lines().count(), 8 * 5);

    // a model that always says yes
    let answers: String = questions
        .lines()
        .map(|l| {
            let q: Value = serde_json::from_str(l).unwrap();
            format!("{}\n", json!({"image_id": q["image_id"], "class_id": q["class_id"], "response": "Yes, there is."}))
        })
        .collect();
    std::fs::write(fx.path("answers.jsonl"), answers).unwrap();
    let qpath = dir.join("questions.jsonl").display().to_string();
    let out = hallu(&[
        "pope",
        "score",
        "--questions",
        &qpath,
        "--answers",
        &fx.p("answers.jsonl"),
        "--model-id",
        "yes-man",
        "--output-dir",
        &fx.p("runs"),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = read_json(&fx.run_of("pope")[0].join("report.json"));
    let positives = IMAGES.iter().map(|(_, p, _)| p.len()).sum::<usize>() as f64;
    assert_eq!(report["metrics"]["pope_recall"], 100.0);
    assert_eq!(
        report["metrics"]["pope_precision"].as_f64().unwrap(),
        100.0 * positives / 40.0
    );

    let mut args = vec![
        "pope",
        "generate",
        "--mode",
        "original",
        "--num-images",
        "4",
    ];
    args.extend(common);
    assert!(hallu(&args).status.success());
    let mut args = vec!["pope", "generate", "--num-images", "9"];
    args.extend(common);
    assert_eq!(hallu(&args).status.code(), Some(3));
}

#[test]
fn chair_matches_the_library() {
    let fx = Fixture::new();
    let config = fx.config(&[], "");
    let out = hallu(&["chair", "-c", &config]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = read_json(&fx.run_of("chair")[0].join("report.json"));

    let vocab = ClassVocabulary::from_toml_str(TEST5).unwrap();
    let set = parse_instances(&std::fs::read(fx.path("instances.json")).unwrap(), &vocab).unwrap();
    let caps = parse_captions(&std::fs::read(fx.path("captions.json")).unwrap()).unwrap();
    let texts = IMAGES
        .iter()
        .map(|(id, _, t)| (ImageId(*id), t.to_string()))
        .collect();
    let ids: Vec<ImageId> = IMAGES.iter().map(|(id, _, _)| ImageId(*id)).collect();
    let gt = build_chair_gt(&ids, &set.annotations, &caps, &vocab);
    let expected = chair_scores(&texts, &gt, &vocab).unwrap();
    assert_eq!(
        report["metrics"]["chair_i"].as_f64().unwrap(),
        expected.chair_i
    );
    assert_eq!(
        report["metrics"]["chair_s"].as_f64().unwrap(),
        expected.chair_s
    );
    // dog in image 2, cat in image 3
    assert_eq!(expected.hallucinated_objects, 2);
}

#[test]
fn augment_and_sample_write_artifacts() {
    let fx = Fixture::new();
    let config = fx.config(&[], "[sample]\ntarget = 3\n");
    let out = hallu(&["augment", "-c", &config, "--negatives", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let records =
        std::fs::read_to_string(fx.run_of("augment")[0].join("enumeration.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 8);
    for line in records.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        hallu_core::augment::parse_response(v["response"].as_str().unwrap()).unwrap();
    }
    assert_eq!(
        hallu(&["augment", "-c", &config, "--bias", "1.5"])
            .status
            .code(),
        Some(2)
    );

    let out = hallu(&["sample", "-c", &config]);
    assert!(out.status.success(), "{}", stderr(&out));
    let subset_path = fx.run_of("sample")[0].join("subset.json");
    let subset: Vec<u64> = serde_json::from_slice(&std::fs::read(&subset_path).unwrap()).unwrap();
    assert_eq!(subset.len(), 3);
    assert!(
        stdout(&out).contains("covering 5 of 5 classes"),
        "{}",
        stdout(&out)
    );

    // the subset feeds back in
    let out = hallu(&[
        "pope",
        "generate",
        "--mode",
        "complete",
        "-c",
        &config,
        "--subset",
        &subset_path.display().to_string(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let dirs = fx.run_of("pope-questions");
    let q = std::fs::read_to_string(dirs[0].join("questions.jsonl")).unwrap();
    assert_eq!(q.lines().count(), 3 * 5);
}

#[tokio::test(flavor = "multi_thread")]
async fn report_and_correlate() {
    let fx = Fixture::new();
    let a = MockJudge::start(substring_rule).await.unwrap();
    let config = fx.config(&[a.url()], "");
    assert!(hallu(&["judge", "-c", &config]).status.success());
    assert!(hallu(&["score", "-c", &config]).status.success());
    assert!(hallu(&["chair", "-c", &config]).status.success());
    let mut reports: Vec<String> = fx
        .run_of("score")
        .into_iter()
        .chain(fx.run_of("chair"))
        .map(|d| d.join("report.json").display().to_string())
        .collect();
    let mut args = vec!["report".to_string(), "-c".into(), config.clone()];
    args.append(&mut reports);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = hallu(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let board = read_json(&fx.run_of("report")[0].join("leaderboard.json"));
    assert_eq!(board["rows"][0]["model_id"], "fixture-model");
    assert!(board["rows"][0]["metrics"]["f05_cls"].is_number());
    assert!(board["rows"][0]["metrics"]["chair_i"].is_number());

    let published = json!({"rows": [
        {"model_id": "a", "metrics": {"f1": 68.1, "f05": 65.3}},
        {"model_id": "b", "metrics": {"f1": 72.5, "f05": 71.5}},
        {"model_id": "c", "metrics": {"f1": 32.1, "f05": 32.7}},
    ]});
    std::fs::write(fx.path("pub.json"), published.to_string()).unwrap();
    let out = hallu(&["correlate", &fx.p("pub.json"), &fx.p("pub.json")]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().all(|l| l.ends_with("+1.0000")), "{text}");

    let other = json!({"rows": [{"model_id": "a", "metrics": {"f1": 1.0}}, {"model_id": "z", "metrics": {"f1": 2.0}}]});
    std::fs::write(fx.path("other.json"), other.to_string()).unwrap();
    let out = hallu(&["correlate", &fx.p("pub.json"), &fx.p("other.json")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("misaligned"));
}

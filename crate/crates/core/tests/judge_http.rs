mod common;

use std::time::Duration;

use hallu_core::judge::{
    run_aqa, AqaOptions, Backoff, HttpJudge, Judge, JudgeCache, JudgeEndpoint, JudgeError,
};
use hallu_mock_judge::MockJudge;

use common::*;

fn fast(endpoint: &mut JudgeEndpoint, retries: u32) {
    endpoint.retry_budget = retries;
    endpoint.backoff = Backoff {
        initial: Duration::from_millis(1),
        max: Duration::from_millis(2),
    };
}

#[tokio::test]
async fn greedy_request_with_short_generation() {
    let server = MockJudge::start(|_| "yes".into()).await.unwrap();
    let judge = HttpJudge::new(JudgeEndpoint::new("j", server.url())).unwrap();
    assert_eq!(judge.generate("anything").await.unwrap(), "yes");
    assert_eq!(server.last_max_new_tokens(), 3);
}

#[tokio::test]
async fn server_errors_are_retried_within_budget() {
    let server = MockJudge::start(|_| "no".into()).await.unwrap();
    let mut e = JudgeEndpoint::new("j", server.url());
    fast(&mut e, 2);
    let judge = HttpJudge::new(e).unwrap();

    server.fail_next(2);
    assert_eq!(judge.generate("p").await.unwrap(), "no");
    assert_eq!(server.requests(), 3);

    server.fail_next(3);
    match judge.generate("p").await {
        Err(JudgeError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let server = MockJudge::start(|_| "no".into()).await.unwrap();
    let mut e = JudgeEndpoint::new("j", format!("{}/missing", server.url()));
    fast(&mut e, 3);
    let judge = HttpJudge::new(e).unwrap();
    match judge.generate("p").await {
        Err(JudgeError::Rejected { status, .. }) => assert_eq!(status, 404),
        other => panic!("{other:?}"),
    }
    assert_eq!(server.requests(), 0);
}

#[tokio::test]
async fn one_item_array_response_is_accepted() {
    let server = MockJudge::start(|_| "Yes".into()).await.unwrap();
    server.set_array_response(true);
    let judge = HttpJudge::new(JudgeEndpoint::new("j", server.url())).unwrap();
    assert_eq!(judge.generate("p").await.unwrap(), "Yes");
}

#[tokio::test]
async fn unreachable_endpoint_is_a_transport_error() {
    let server = MockJudge::start(|_| "yes".into()).await.unwrap();
    let url = server.url();
    server.shutdown().await;
    let mut e = JudgeEndpoint::new("j", url);
    fast(&mut e, 1);
    let judge = HttpJudge::new(e).unwrap();
    match judge.generate("p").await {
        Err(JudgeError::Transport { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn dropped_run_resumes_from_cache() {
    let fx = e2e_fixture(3, true);
    let alpha = MockJudge::start(alpha_rule).await.unwrap();
    let beta = MockJudge::start(beta_rule).await.unwrap();
    let judges = http_judges(&[("alpha", &alpha), ("beta", &beta)]);
    let templates = two_templates();
    let dir = tempfile::tempdir().unwrap();

    let clean = run_aqa(
        &fx.responses,
        &fx.vocab,
        &judges,
        &templates,
        dir.path().join("clean.jsonl"),
        &AqaOptions::default(),
    )
    .await
    .unwrap();

    alpha.set_delay(Duration::from_millis(5));
    beta.set_delay(Duration::from_millis(5));
    let cache = dir.path().join("cache.jsonl");
    let options = AqaOptions::with_concurrency(4);
    let cut = tokio::time::timeout(
        Duration::from_millis(120),
        run_aqa(
            &fx.responses,
            &fx.vocab,
            &judges,
            &templates,
            &cache,
            &options,
        ),
    )
    .await;
    assert!(cut.is_err(), "run should have been cut short");
    let kept = JudgeCache::open(&cache).unwrap().len();
    assert!(kept > 0);

    alpha.set_delay(Duration::ZERO);
    beta.set_delay(Duration::ZERO);
    let resumed = run_aqa(
        &fx.responses,
        &fx.vocab,
        &judges,
        &templates,
        &cache,
        &options,
    )
    .await
    .unwrap();
    assert_eq!(resumed.tensor.to_bytes(), clean.tensor.to_bytes());
    assert!(resumed.stats.cached_cells > 0);
    assert!(resumed.stats.generate_calls < clean.stats.generate_calls);
}

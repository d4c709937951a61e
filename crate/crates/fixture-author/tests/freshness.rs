use fixture_author::{record_fixtures, render_fixtures, script_path, workspace_root, Script};
use visualmem_core::eval;

// The committed replay set must be exactly what the script produces today;
// otherwise someone edited the benchmark or script without re-recording.
#[test]
fn committed_gateway_fixtures_are_fresh() {
    let root = workspace_root().join("fixtures");
    let bench = eval::load_benchmark(root.join("benchmark")).unwrap();
    let fixtures = record_fixtures(&bench.personas, Script::load(script_path()).unwrap()).unwrap();
    let committed = std::fs::read_to_string(root.join("gateway.json")).unwrap();
    assert!(
        render_fixtures(&fixtures) == committed,
        "fixtures/gateway.json is stale; run `cargo run -p fixture-author` to re-record"
    );
}

#[test]
fn every_scripted_question_exists_in_the_benchmark() {
    let root = workspace_root().join("fixtures");
    let bench = eval::load_benchmark(root.join("benchmark")).unwrap();
    let script = Script::load(script_path()).unwrap();
    let asked: Vec<&str> =
        bench.personas.iter().flat_map(|p| p.questions.iter().map(|q| q.query.question.as_str())).collect();
    for q in &script.questions {
        assert!(asked.contains(&q.question.as_str()), "script question not in benchmark: {}", q.question);
    }
    assert_eq!(script.questions.len(), asked.len());
}

use std::path::PathBuf;

use proptest::prelude::*;
use visualmem::config::API_KEY_ENV;
use visualmem::{EngineConfig, GatewayConfig, GatewayKind, ShellError};
use visualmem_core::pipeline::ContextWindow;
use visualmem_core::{PipelineConfig, TokenBudget};

fn fixtures() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures"))
}

fn gateway() -> impl Strategy<Value = GatewayConfig> {
    let text = "\\PC{0,12}";
    let scripted = (text, proptest::option::of(text)).prop_map(|(path, key)| GatewayConfig {
        api_key: key,
        ..GatewayConfig::scripted(path)
    });
    let http = (
        text,
        text,
        proptest::option::of(text),
        proptest::option::of(1usize..64),
        proptest::option::of(1u64..600),
    )
        .prop_map(|(endpoint, model, embedding_model, max_in_flight, timeout_secs)| GatewayConfig {
            kind: GatewayKind::Http,
            endpoint: Some(endpoint),
            model: Some(model),
            embedding_model,
            fixture_path: None,
            api_key: None,
            max_in_flight,
            timeout_secs,
        });
    prop_oneof![scripted, http]
}

fn pipeline() -> impl Strategy<Value = PipelineConfig> {
    let window = prop_oneof![Just(ContextWindow::FullSession), (1usize..50).prop_map(ContextWindow::Turns)];
    (any::<bool>(), any::<bool>(), window, 1u64..100, 1u32..10, 0.0f64..=1.0).prop_map(
        |(text_on, pending, context_window, interval, attempts, threshold)| PipelineConfig {
            enable_text: text_on,
            // At least one store must stay on.
            enable_visual: !text_on || pending,
            enable_pending: pending,
            context_window,
            reeval_interval_events: interval,
            max_reeval_attempts: attempts,
            confirm_confidence_threshold: threshold,
        },
    )
}

fn engine_config() -> impl Strategy<Value = EngineConfig> {
    ("[a-z./_ -]{0,16}", 0u64..=i64::MAX as u64, gateway(), pipeline()).prop_map(|(dir, budget, gateway, pipeline)| {
        EngineConfig { store_dir: PathBuf::from(dir), budget: TokenBudget::new(budget), gateway, pipeline }
    })
}

proptest! {
    #[test]
    fn render_then_parse_is_identity(config in engine_config()) {
        let text = config.render().unwrap();
        prop_assert_eq!(EngineConfig::parse(&text).unwrap(), config);
    }
}

#[test]
fn bundled_config_loads_with_paths_relative_to_the_file() {
    let config = EngineConfig::load(fixtures().join("visualmem.toml")).unwrap();
    assert_eq!(config.gateway.kind, GatewayKind::Scripted);
    assert!(config.gateway.fixture_path.as_ref().unwrap().is_file());
    assert_eq!(config.budget, TokenBudget::default());
    assert_eq!(config.pipeline, PipelineConfig::default());
    assert!(config.gateway().is_ok());
}

#[test]
fn defaults_fill_omitted_sections() {
    let config = EngineConfig::parse("store_dir = \"s\"\n[gateway]\nkind = \"scripted\"\nfixture_path = \"g.json\"\n").unwrap();
    assert_eq!(config.pipeline, PipelineConfig::default());
    assert_eq!(config.budget.limit, 2000);
}

#[test]
fn gateway_requirements_are_enforced() {
    let no_fixture = "store_dir = \"s\"\n[gateway]\nkind = \"scripted\"\n";
    assert!(matches!(EngineConfig::parse(no_fixture), Err(ShellError::Config(m)) if m.contains("fixture_path")));
    let no_model = "store_dir = \"s\"\n[gateway]\nkind = \"http\"\nendpoint = \"http://x\"\n";
    assert!(matches!(EngineConfig::parse(no_model), Err(ShellError::Config(m)) if m.contains("model")));
    let unknown = "store_dir = \"s\"\ncolour = 1\n[gateway]\nkind = \"scripted\"\nfixture_path = \"g\"\n";
    assert!(EngineConfig::parse(unknown).is_err());
    let both_off = "store_dir = \"s\"\n[gateway]\nkind = \"scripted\"\nfixture_path = \"g\"\n[pipeline]\nenable_text = false\nenable_visual = false\n";
    assert!(EngineConfig::parse(both_off).is_err());
}

#[test]
fn environment_key_overrides_the_file() {
    let mut config = EngineConfig::parse(
        "store_dir = \"s\"\n[gateway]\nkind = \"http\"\nendpoint = \"http://x\"\nmodel = \"m\"\napi_key = \"from-file\"\n",
    )
    .unwrap();
    assert_eq!(config.http_config(Some("from-env".into())).api_key.as_deref(), Some("from-env"));
    assert_eq!(config.http_config(Some(String::new())).api_key.as_deref(), Some("from-file"));
    assert_eq!(config.http_config(None).api_key.as_deref(), Some("from-file"));
    config.gateway.api_key = None;
    assert_eq!(config.http_config(None).api_key, None);
    assert_eq!(API_KEY_ENV, "VISUALMEM_API_KEY");
}

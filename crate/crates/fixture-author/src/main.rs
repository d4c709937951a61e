use anyhow::Context;
use fixture_author::{record_fixtures, render_fixtures, script_path, workspace_root, Script};
use visualmem_core::eval::{self, render_report, ReferenceMode, ReportFormat};
use visualmem_core::gateway::ScriptedGateway;
use visualmem_core::TokenBudget;

/// Re-records `fixtures/gateway.json` from the simulated model and prints the
/// replayed table so the outcome can be eyeballed.
fn main() -> anyhow::Result<()> {
    let root = workspace_root().join("fixtures");
    let bench = eval::load_benchmark(root.join("benchmark")).context("loading benchmark")?;
    for w in &bench.warnings {
        eprintln!("warning: {w}");
    }
    let fixtures = record_fixtures(&bench.personas, Script::load(script_path())?)?;
    let out = root.join("gateway.json");
    std::fs::write(&out, render_fixtures(&fixtures)).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {} fixtures to {}", fixtures.len(), out.display());

    let gw: std::sync::Arc<dyn visualmem_core::Gateway> = std::sync::Arc::new(ScriptedGateway::from_fixtures(fixtures)?);
    let mut reports = Vec::new();
    for config in eval::presets() {
        reports.push(eval::run_system_eval(&bench.personas, &config, gw.clone())?);
    }
    for mode in [ReferenceMode::FullContext, ReferenceMode::Oracle] {
        reports.push(eval::run_reference(&bench.personas, mode, TokenBudget::default(), gw.clone())?);
    }
    print!("{}", render_report(&reports, ReportFormat::Markdown));
    for r in &reports {
        for rec in r.records.iter().filter(|rec| !rec.correct) {
            println!("{}: {} {} chose {:?}", r.name, rec.persona_id, rec.question_id, rec.choice);
        }
    }
    Ok(())
}

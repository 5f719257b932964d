//! Trains the full system on the synthetic corpus and prints transfer scores.
//!
//! Usage: `cargo run --release --example toy_transfer -- [key=value ...]`
//! where each pair overrides a run-configuration key of the `toy` profile.

use restyle::config::RunConfig;
use restyle::synthetic::{generate, SyntheticConfig};
use restyle::workflow::{default_tagger, fill_accuracy, pointer_accuracy, reconstruction_accuracy, score_transfer, train_system, RunPaths};

fn main() -> restyle::Result<()> {
    let mut cfg = RunConfig::profile("toy")?;
    let mut out_dir = None;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("arguments are key=value");
        if k == "out" {
            out_dir = Some(v.to_string());
        } else {
            cfg.set(k, v)?;
        }
    }
    let (styles, stories) = generate(&SyntheticConfig::default())?;
    let paths = out_dir.map(RunPaths::in_dir).unwrap_or_default();
    let system = train_system(&stories, &styles, &cfg, default_tagger(), &paths)?;
    println!("trained in {:.0}s, classifier accuracy {:.3}", system.timings.total(), system.classifier_accuracy);
    if let Some(p) = system.stage1_summary.parts.last() {
        println!("final stage-1 losses {p:?}");
    }
    let probe = &stories[..100];
    let masking = (!cfg.skip_stage2).then_some(&system.dicts);
    println!("stage-1 self-reconstruction accuracy {:.3}", reconstruction_accuracy(&system, probe)?);
    println!("pointer accuracy {:.3}", pointer_accuracy(&system.stage1, probe, masking, 99)?);
    if let Some(filler) = &system.stage2 {
        println!("stage-2 fill accuracy {:.3}", fill_accuracy(filler, &system.dicts, probe)?);
    }
    let (scores, results) = score_transfer(&system, probe)?;
    println!("{}", serde_json::to_string(&scores).unwrap());
    for r in results.iter().take(4) {
        println!("stage1: {}\nfinal:  {}\n", r.stage1_text.join(" "), r.final_text.join(" "));
    }
    Ok(())
}

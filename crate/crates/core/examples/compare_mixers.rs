//! The full comparison: every mixer trained from one shared pretrained
//! model, evaluated at 1 and 5 shots. Takes a few minutes in release mode.
//!
//!     cargo run --release --example compare_mixers -- /tmp/compare

use std::path::PathBuf;

use seppmix::cli::{cmd_compare_mixers, RunConfig};

fn main() -> seppmix::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "compare_out".into()));
    let cfg = RunConfig {
        epochs: 4,
        milestones: vec![2, 3],
        pretrain_epochs: 2,
        episodes: 100,
        out: Some(out),
        ..RunConfig::default()
    };
    let table = cmd_compare_mixers(&cfg, None, true)?;
    print!("{}", table.to_markdown());
    Ok(())
}

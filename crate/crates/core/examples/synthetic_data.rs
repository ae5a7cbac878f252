//! Generates a synthetic dataset, writes it as an image folder with a split
//! manifest and reads the splits back.
//!
//!     cargo run --release --example synthetic_data -- /tmp/synth

use std::path::PathBuf;

use seppmix::cli::{cmd_make_synthetic, RunConfig};
use seppmix::datakit::load_image_folder;

fn main() -> seppmix::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synthetic_out".into()));
    let cfg = RunConfig {
        synthetic_classes: 9,
        synthetic_per_class: 10,
        out: Some(out.clone()),
        ..RunConfig::default()
    };
    let manifest = cmd_make_synthetic(&cfg, true)?;
    for split in ["train", "val", "test"] {
        let ds = load_image_folder(&out, &manifest, split)?;
        println!("{split:>5}: {} classes, {} images", ds.num_classes(), ds.len());
    }
    Ok(())
}

//! Trains a small network briefly, then writes an image and its semantic
//! map as PNGs.
//!
//!     cargo run --release --example cam_heatmap -- /tmp/cam

use std::path::PathBuf;

use seppmix::cam::render_heatmap;
use seppmix::datakit::make_synthetic;
use seppmix::nettrain::{pretrain_for_cams, semantic_map_for, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "cam_out".into()));
    std::fs::create_dir_all(&out)?;

    let ds = make_synthetic(6, 40, 32, 3)?;
    let cfg = TrainConfig { pretrain_epochs: 3, ..TrainConfig::desk_scale(3) };
    let pre = pretrain_for_cams(&ds, &cfg)?;
    println!("pretrain accuracy {:.2}", pre.metrics.last().unwrap().train_accuracy);

    for s in ds.samples().iter().step_by(40) {
        let map = semantic_map_for(&pre.model, &s.image, s.class_id)?;
        let peak = map.values().iter().cloned().fold(0.0, f64::max);
        s.image.to_rgb8().save(out.join(format!("{}_image.png", s.instance)))?;
        render_heatmap(&map).save(out.join(format!("{}_cam.png", s.instance)))?;
        println!("sample {} class {}: peak share {:.4} (uniform would be {:.4})", s.instance, s.class_id, peak, 1.0 / 1024.0);
    }
    println!("wrote {}", out.display());
    Ok(())
}

//! Bootstrap pretraining followed by mixed training with the rotation loss,
//! logging one line per epoch.
//!
//!     cargo run --release --example training

use seppmix::datakit::{make_synthetic, split_base_novel};
use seppmix::nettrain::{pretrain_for_cams, train_with_observer, TrainConfig};

fn main() -> seppmix::Result<()> {
    let (base, _) = split_base_novel(&make_synthetic(12, 40, 32, 0)?, 2.0 / 3.0)?;
    let cfg = TrainConfig { pretrain_epochs: 2, ..TrainConfig::desk_scale(6) };

    let pre = pretrain_for_cams(&base, &cfg)?;
    for m in &pre.metrics {
        println!("pretrain epoch {}  L_m {:.4}  acc {:.3}", m.epoch, m.l_m, m.train_accuracy);
    }

    let out = train_with_observer(&base, &cfg, Some(&pre.model), &mut |m| {
        println!(
            "epoch {}  lr {:.4}  L_m {:.4}  L_r {:.4}  L_base {:.4}  acc {:.3}",
            m.epoch, m.lr, m.l_m, m.l_r, m.l_base, m.train_accuracy
        );
    })?;
    println!("{} parameters", out.model.num_parameters());
    Ok(())
}

//! Few-shot evaluation with a logistic-regression probe on frozen
//! embeddings: pretrain on base classes, test on novel ones.

use seppmix::datakit::{make_synthetic, split_base_novel};
use seppmix::fewshot::{evaluate_shots, EvalConfig};
use seppmix::nettrain::{pretrain_for_cams, TrainConfig};

fn main() -> seppmix::Result<()> {
    let (base, novel) = split_base_novel(&make_synthetic(15, 40, 32, 0)?, 2.0 / 3.0)?;
    let cfg = TrainConfig { pretrain_epochs: 3, ..TrainConfig::desk_scale(3) };
    let model = pretrain_for_cams(&base, &cfg)?.model;

    let eval = EvalConfig { episodes: 100, ..EvalConfig::default() };
    for report in evaluate_shots(&model, &novel, &eval, &[1, 5], 0)? {
        println!("{}-shot  {}", report.k_shot, report.summary_line());
    }
    Ok(())
}

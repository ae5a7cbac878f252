//! The four mixers side by side on two synthetic images.
//!
//!     cargo run --release --example mixing

use seppmix::cam::SemanticMap;
use seppmix::datakit::make_synthetic;
use seppmix::mixkit::{cutmix, mixup, patchmix, seppmix, MixedSample, Source};
use seppmix::SeededRng;

fn describe(name: &str, m: &MixedSample) {
    let nz: Vec<String> = m
        .label
        .weights()
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(k, w)| format!("class {k}: {w:.3}"))
        .collect();
    println!("{name:>9}  mass {:.3}  [{}]", m.label.mass(), nz.join(", "));
    if let Some(mask) = &m.provenance.mask {
        for row in mask.to_rows() {
            println!("           {row:?}");
        }
    }
}

fn main() -> seppmix::Result<()> {
    let ds = make_synthetic(4, 2, 32, 7)?;
    let (a, b) = (&ds.samples()[0], &ds.samples()[2]);
    let classes = ds.num_classes();
    let src_a = Source::new(&a.image, a.class_id, a.instance);
    let src_b = Source::new(&b.image, b.class_id, b.instance);
    let mut rng = SeededRng::new(1);

    // With no trained network at hand, a centred bump stands in for the
    // class activation map: the object is assumed to sit in the middle.
    let bump = |h: usize, w: usize| {
        let v = (0..h * w)
            .map(|p| {
                let (di, dj) = ((p / w) as f64 - h as f64 / 2.0, (p % w) as f64 - w as f64 / 2.0);
                (-(di * di + dj * dj) / 60.0).exp()
            })
            .collect::<Vec<_>>();
        let total: f64 = v.iter().sum();
        SemanticMap::new(h, w, v.into_iter().map(|x| x / total).collect())
    };
    let s = bump(32, 32)?;

    describe("mixup", &mixup(src_a, src_b, 0.3, classes)?);
    describe("cutmix", &cutmix(src_a, src_b, classes, &mut rng)?);
    describe("patchmix", &patchmix(src_a, src_b, 2, classes, &mut rng)?);
    describe("seppmix", &seppmix(src_a, src_b, &s, &s, 2, classes, &mut rng)?);
    Ok(())
}

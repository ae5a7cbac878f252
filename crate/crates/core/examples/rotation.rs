//! Right-angle rotations and their self-supervised targets.

use seppmix::mixkit::{MixedSample, Source};
use seppmix::rotation::{expand_with_rotations, rotate, RotationAngle};
use seppmix::Image;

fn print_channel(img: &Image) {
    for i in 0..img.height() {
        let row: Vec<String> = (0..img.width()).map(|j| format!("{:>2}", (img.get(0, i, j) * 10.0).round() as i32)).collect();
        println!("  {}", row.join(" "));
    }
}

fn main() -> seppmix::Result<()> {
    let img = Image::from_fn(2, 3, |_, i, j| (i * 3 + j) as f64 / 10.0);
    for r in RotationAngle::ALL {
        println!("{}° (target {})", r.degrees(), r.target_id());
        print_channel(&rotate(&img, r));
    }

    let sample = MixedSample::plain(Source::new(&img, 1, 0), 3)?;
    for view in expand_with_rotations(&sample) {
        println!("view {}°: class label {:?}", view.rotation.degrees(), view.label.weights());
    }
    Ok(())
}

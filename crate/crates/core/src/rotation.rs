//! Right-angle rotations used by the rotation-prediction auxiliary task.
//!
//! Rotations are counter-clockwise: at 90° the source pixel `(i, j)` of an
//! `H × W` image lands at `(W − 1 − j, i)` of the `W × H` output. Target ids
//! follow `0°, 90°, 180°, 270°` → `0, 1, 2, 3`.

use serde::{Deserialize, Serialize};

use crate::image::{Image, CHANNELS};
use crate::mixkit::{LabelDistribution, MixedSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RotationAngle {
    R0,
    R90,
    R180,
    R270,
}

impl RotationAngle {
    pub const ALL: [RotationAngle; 4] = [
        RotationAngle::R0,
        RotationAngle::R90,
        RotationAngle::R180,
        RotationAngle::R270,
    ];

    pub fn target_id(self) -> usize {
        self as usize
    }

    pub fn from_target(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn degrees(self) -> u32 {
        90 * self as u32
    }

    /// `self` followed by `other`.
    pub fn then(self, other: RotationAngle) -> RotationAngle {
        Self::ALL[(self.target_id() + other.target_id()) % 4]
    }
}

/// Rotates a channel-major `channels × h × w` buffer, returning the new
/// buffer with its height and width.
pub fn rotate_planes(data: &[f64], channels: usize, h: usize, w: usize, r: RotationAngle) -> (Vec<f64>, usize, usize) {
    debug_assert_eq!(data.len(), channels * h * w);
    let (oh, ow) = match r {
        RotationAngle::R0 | RotationAngle::R180 => (h, w),
        RotationAngle::R90 | RotationAngle::R270 => (w, h),
    };
    let mut out = vec![0.0; data.len()];
    for c in 0..channels {
        let src = &data[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for i in 0..h {
            for j in 0..w {
                let (di, dj) = match r {
                    RotationAngle::R0 => (i, j),
                    RotationAngle::R90 => (w - 1 - j, i),
                    RotationAngle::R180 => (h - 1 - i, w - 1 - j),
                    RotationAngle::R270 => (j, h - 1 - i),
                };
                dst[di * ow + dj] = src[i * w + j];
            }
        }
    }
    (out, oh, ow)
}

pub fn rotate(image: &Image, r: RotationAngle) -> Image {
    if r == RotationAngle::R0 {
        return image.clone();
    }
    let (data, h, w) = rotate_planes(image.data(), CHANNELS, image.height(), image.width(), r);
    Image::from_raw(h, w, data)
}

/// A rotated view of a mixed sample with its rotation target.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedSample {
    pub image: Image,
    pub label: LabelDistribution,
    pub rotation: RotationAngle,
}

/// All four rotations of a mixed sample; the class label is carried unchanged.
pub fn expand_with_rotations(sample: &MixedSample) -> [RotatedSample; 4] {
    RotationAngle::ALL.map(|r| RotatedSample {
        image: rotate(&sample.image, r),
        label: sample.label.clone(),
        rotation: r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixkit::{MixedSample, Source};

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |c, i, j| ((c * h * w + i * w + j) as f64) / (3 * h * w) as f64)
    }

    #[test]
    fn two_by_two_quarter_turn() {
        // [[a, b], [c, d]] with a..d = 0.1..0.4 in every channel.
        let img = Image::new(2, 2, [0.1, 0.2, 0.3, 0.4].repeat(3)).unwrap();
        let r = rotate(&img, RotationAngle::R90);
        for c in 0..3 {
            assert_eq!(r.get(c, 0, 0), 0.2);
            assert_eq!(r.get(c, 0, 1), 0.4);
            assert_eq!(r.get(c, 1, 0), 0.1);
            assert_eq!(r.get(c, 1, 1), 0.3);
        }
    }

    #[test]
    fn four_quarter_turns_restore_and_dims_swap() {
        let img = ramp(3, 5);
        let once = rotate(&img, RotationAngle::R90);
        assert_eq!((once.height(), once.width()), (5, 3));
        let mut x = img.clone();
        for _ in 0..4 {
            x = rotate(&x, RotationAngle::R90);
        }
        assert_eq!(x, img);
        assert_eq!(rotate(&img, RotationAngle::R0), img);
    }

    #[test]
    fn composition_follows_c4() {
        let img = ramp(4, 4);
        for a in RotationAngle::ALL {
            for b in RotationAngle::ALL {
                assert_eq!(rotate(&rotate(&img, a), b), rotate(&img, a.then(b)));
            }
        }
    }

    #[test]
    fn expansion_produces_all_targets() {
        let img = ramp(4, 4);
        let sample = MixedSample::plain(Source::new(&img, 1, 0), 3).unwrap();
        let rots = expand_with_rotations(&sample);
        let ids: Vec<usize> = rots.iter().map(|r| r.rotation.target_id()).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        assert_eq!(rots[0].image, sample.image);
        assert!(rots.iter().all(|r| r.label == sample.label));
        assert_eq!(rotate(&rots[2].image, RotationAngle::R180), sample.image);
    }
}

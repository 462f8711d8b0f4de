//! Procedurally generated instruction data. Each image is a 2 x 2 grid of
//! palette-colored cells with mild deterministic texture; the answer is the
//! color of the top-left cell, a pure function of the image, so the task is
//! learnable by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::vision::ImageInput;

pub const PALETTE: [(&str, [f64; 3]); 4] = [
    ("red", [0.85, 0.10, 0.10]),
    ("green", [0.10, 0.80, 0.15]),
    ("blue", [0.10, 0.15, 0.85]),
    ("yellow", [0.85, 0.80, 0.10]),
];

pub const INSTRUCTION: &str = "What color is the top left cell?";

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub id: usize,
    pub image: ImageInput,
    pub instruction: String,
    pub answer: String,
}

/// Deterministic dataset; `image_size` must be even.
pub fn synthetic_dataset(count: usize, image_size: usize, seed: u64) -> Vec<SyntheticSample> {
    assert!(image_size.is_multiple_of(2), "image size must be even");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = image_size / 2;
    (0..count)
        .map(|id| {
            // Cycle the answer class so every color is represented evenly.
            let top_left = id % PALETTE.len();
            let cells = [
                top_left,
                rng.random_range(0..PALETTE.len()),
                rng.random_range(0..PALETTE.len()),
                rng.random_range(0..PALETTE.len()),
            ];
            let mut image = ImageInput::filled(image_size, [0.0, 0.0, 0.0]);
            for (cell, &color_idx) in cells.iter().enumerate() {
                let (gy, gx) = (cell / 2, cell % 2);
                let rgb = PALETTE[color_idx].1;
                for y in 0..half {
                    for x in 0..half {
                        let jitter = rng.random_range(-0.05..0.05);
                        for (c, col) in rgb.iter().enumerate() {
                            let v = (col + jitter).clamp(0.0, 1.0);
                            image.set(c, gy * half + y, gx * half + x, v);
                        }
                    }
                }
            }
            SyntheticSample {
                id,
                image,
                instruction: INSTRUCTION.to_string(),
                answer: PALETTE[top_left].0.to_string(),
            }
        })
        .collect()
}

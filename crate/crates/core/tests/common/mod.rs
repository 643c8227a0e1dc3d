#![allow(dead_code)]

pub mod gradsuite;
pub mod oracles;

use distillwsd::image::RgbImage;
use rand::Rng;

pub fn random_image(rng: &mut impl Rng, side: usize) -> RgbImage {
    let pixels = (0..side * side * 3).map(|_| rng.gen()).collect();
    RgbImage::new(side, side, pixels).unwrap()
}

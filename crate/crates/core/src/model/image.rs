//! Pixel grids and where they come from.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// An RGB image, `height × width × 3`, channel-last, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} pixel values for a {height}x{width}x3 image",
                pixels.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            pixels,
        })
    }

    pub fn filled(id: impl Into<String>, size: usize, value: f64) -> Self {
        Self {
            id: id.into(),
            height: size,
            width: size,
            pixels: vec![value; size * size * 3],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }
}

/// Resolves image ids to pixel grids of a fixed size.
pub trait ImageSource: Send + Sync {
    fn load(&self, image_id: &str) -> Result<Image>;
}

/// Reads `<dir>/<image_id>.png`, resizes to `size × size` and scales to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct DirImageSource {
    dir: PathBuf,
    size: usize,
}

impl DirImageSource {
    pub fn new(dir: impl Into<PathBuf>, size: usize) -> Self {
        Self { dir: dir.into(), size }
    }

    pub fn load_path(path: &Path, id: &str, size: usize) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image(other),
            })?
            .to_rgb8();
        let img = image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle);
        let pixels = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Image::new(id, size, size, pixels)
    }
}

impl ImageSource for DirImageSource {
    fn load(&self, image_id: &str) -> Result<Image> {
        let path = self.dir.join(format!("{image_id}.png"));
        Self::load_path(&path, image_id, self.size)
    }
}

pub const SCENE_COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("purple", [0.6, 0.1, 0.7]),
    ("white", [1.0, 1.0, 1.0]),
];
pub const SCENE_SHAPES: [&str; 3] = ["square", "circle", "bar"];
pub const SCENE_POSITIONS: [&str; 4] = ["left", "right", "top", "bottom"];

/// Renders images procedurally from their id. Ids of the form
/// `scene_<color>_<shape>_<position>_<n>` draw that shape on a noisy gray
/// background; any other id yields seeded noise.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticImageSource {
    pub size: usize,
}

pub(crate) fn stable_seed(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl SyntheticImageSource {
    pub fn new(size: usize) -> Self {
        Self { size }
    }

    fn render_scene(&self, id: &str, color: [f64; 3], shape: &str, pos: &str) -> Image {
        let n = self.size;
        let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(id));
        let mut pixels = Vec::with_capacity(n * n * 3);
        let (cy, cx) = match pos {
            "left" => (n as f64 / 2.0, n as f64 / 4.0),
            "right" => (n as f64 / 2.0, 3.0 * n as f64 / 4.0),
            "top" => (n as f64 / 4.0, n as f64 / 2.0),
            _ => (3.0 * n as f64 / 4.0, n as f64 / 2.0),
        };
        let r = n as f64 / 6.0;
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let inside = match shape {
                    "circle" => dy * dy + dx * dx <= r * r,
                    "bar" => dy.abs() <= r / 2.5 && dx.abs() <= r * 1.5,
                    _ => dy.abs() <= r && dx.abs() <= r,
                };
                for c in color {
                    let noise: f64 = rng.random_range(-0.05..0.05);
                    let v = if inside { c } else { 0.45 };
                    pixels.push((v + noise).clamp(0.0, 1.0));
                }
            }
        }
        Image {
            id: id.to_string(),
            height: n,
            width: n,
            pixels,
        }
    }
}

impl ImageSource for SyntheticImageSource {
    fn load(&self, image_id: &str) -> Result<Image> {
        let parts: Vec<&str> = image_id.split('_').collect();
        if parts.len() >= 4 && parts[0] == "scene" {
            let color = SCENE_COLORS.iter().find(|(name, _)| *name == parts[1]);
            if let (Some((_, rgb)), true, true) = (
                color,
                SCENE_SHAPES.contains(&parts[2]),
                SCENE_POSITIONS.contains(&parts[3]),
            ) {
                return Ok(self.render_scene(image_id, *rgb, parts[2], parts[3]));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(image_id));
        let n = self.size;
        let pixels = (0..n * n * 3).map(|_| rng.random::<f64>()).collect();
        Ok(Image {
            id: image_id.to_string(),
            height: n,
            width: n,
            pixels,
        })
    }
}

//! Unpaired image banks sampled from random poses in a set of houses.

use std::fs;
use std::io::Write;
use std::path::Path;

use nncore::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::random_pose;
use crate::error::{Result, WorldError};
use crate::house::{Domain, HousePlan};
use crate::render::{render_styled, Image, IMAGE_LEN};
use crate::split::{house_set, Split};
use crate::mix_seed;

pub const IMAGE_MAGIC: &str = "JRTIMG v1";
/// Houses generated when a bank is sampled without an explicit house set.
pub const DEFAULT_BANK_HOUSES: usize = 24;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageBank {
    pub images: Vec<Image>,
}

impl ImageBank {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `JRTIMG v1\n`, little-endian u32 count, then 32x32x3 LE f32 per image.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(IMAGE_MAGIC.len() + 5 + self.len() * IMAGE_LEN * 4);
        out.extend_from_slice(IMAGE_MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(self.images.len() as u32).to_le_bytes());
        for img in &self.images {
            for v in &img.pixels {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let head = IMAGE_MAGIC.len() + 1;
        if bytes.len() < head + 4 || &bytes[..head - 1] != IMAGE_MAGIC.as_bytes() || bytes[head - 1] != b'\n' {
            return Err(WorldError::Format("missing JRTIMG v1 header".into()));
        }
        let n = u32::from_le_bytes(bytes[head..head + 4].try_into().unwrap()) as usize;
        let body = &bytes[head + 4..];
        if body.len() != n * IMAGE_LEN * 4 {
            return Err(WorldError::Format(format!(
                "{} payload bytes for {n} images",
                body.len()
            )));
        }
        let images = body
            .chunks_exact(IMAGE_LEN * 4)
            .map(|chunk| Image {
                pixels: chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            })
            .collect();
        Ok(Self { images })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Renders `n` images at uniformly random poses over `houses` (house chosen
/// uniformly, then a floor cell uniformly) in `style`. Image `i` depends
/// only on `(seed, i)`, so the result is the same in any execution mode.
pub fn sample_from_houses(houses: &[HousePlan], style: Domain, n: usize, seed: u64, exec: Exec) -> ImageBank {
    assert!(!houses.is_empty(), "no houses to sample from");
    let cells: Vec<Vec<(usize, usize)>> = houses.iter().map(|h| h.floor_cells().collect()).collect();
    let images = exec.map(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, i as u64]));
        let k = rng.gen_range(0..houses.len());
        let pose = random_pose(&houses[k], &cells[k], &mut rng);
        render_styled(&houses[k], &pose, style).expect("sampled pose is valid")
    });
    ImageBank { images }
}

/// Bank of `n` images from freshly generated training houses of `domain`.
pub fn sample_images(domain: Domain, n: usize, seed: u64) -> Result<ImageBank> {
    let houses = house_set(domain, Split::Train, DEFAULT_BANK_HOUSES, seed)?;
    Ok(sample_from_houses(&houses, domain, n, mix_seed(&[seed, 0x1a6e]), Exec::default()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bank() {
        let a = sample_images(Domain::Real, 20, 3).unwrap();
        let b = sample_images(Domain::Real, 20, 3).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert!(a.images.iter().all(|im| im.pixels.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn exec_modes_agree() {
        let houses = house_set(Domain::Synthetic, Split::Train, 3, 1).unwrap();
        let a = sample_from_houses(&houses, Domain::Synthetic, 16, 5, Exec::Sequential);
        let b = sample_from_houses(&houses, Domain::Synthetic, 16, 5, Exec::Parallel);
        assert_eq!(a, b);
    }

    #[test]
    fn bytes_round_trip() {
        let a = sample_images(Domain::Synthetic, 3, 9).unwrap();
        let b = ImageBank::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
        let mut bad = a.to_bytes();
        bad.pop();
        assert!(ImageBank::from_bytes(&bad).is_err());
        assert!(ImageBank::from_bytes(b"JRTIMG v2\n\0\0\0\0").is_err());
    }
}

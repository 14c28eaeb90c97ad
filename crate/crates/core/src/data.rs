//! Synthetic identity dataset: each identity is a smooth seeded base pattern,
//! each image a perturbed rendering of it (translation, brightness, pixel
//! noise), split into train and test images per identity.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::format;
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"GADS";
const VERSION: u16 = 1;

/// All images of one identity, ordered train-first.
#[derive(Debug, Clone)]
pub struct IdentitySet {
    pub identity_id: u32,
    images: Vec<Tensor>,
    n_train: usize,
}

impl IdentitySet {
    pub fn train_images(&self) -> &[Tensor] {
        &self.images[..self.n_train]
    }

    pub fn test_images(&self) -> &[Tensor] {
        &self.images[self.n_train..]
    }

    pub fn n_images(&self) -> usize {
        self.images.len()
    }
}

/// A generated dataset: identities with contiguous ids from 0, all images
/// sharing one shape.
#[derive(Debug, Clone)]
pub struct Dataset {
    identities: Vec<IdentitySet>,
    image_shape: [usize; 3],
    gen_seed: u64,
}

impl Dataset {
    pub fn identities(&self) -> &[IdentitySet] {
        &self.identities
    }

    pub fn n_identities(&self) -> usize {
        self.identities.len()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn gen_seed(&self) -> u64 {
        self.gen_seed
    }

    /// (image, identity index) pairs over the train split, in dataset order.
    pub fn train_pairs(&self) -> impl Iterator<Item = (&Tensor, usize)> {
        self.identities.iter().flat_map(|id| {
            id.train_images()
                .iter()
                .map(move |img| (img, id.identity_id as usize))
        })
    }

    /// Restrict to the given identities, reassigning contiguous ids in the
    /// order requested.
    pub fn subset(&self, identity_ids: &[u32]) -> Result<Dataset> {
        if identity_ids.is_empty() {
            return Err(Error::invalid("subset needs at least one identity"));
        }
        let mut identities = Vec::with_capacity(identity_ids.len());
        for (new_id, &want) in identity_ids.iter().enumerate() {
            let found = self
                .identities
                .iter()
                .find(|id| id.identity_id == want)
                .ok_or_else(|| Error::invalid(format!("no identity {}", want)))?;
            let mut set = found.clone();
            set.identity_id = new_id as u32;
            identities.push(set);
        }
        Ok(Dataset {
            identities,
            image_shape: self.image_shape,
            gen_seed: self.gen_seed,
        })
    }

    /// Mean pairwise pixel distance within identities vs across identities.
    pub fn cluster_separation(&self) -> (f64, f64) {
        let mut intra_sum = 0.0;
        let mut intra_n = 0usize;
        let mut inter_sum = 0.0;
        let mut inter_n = 0usize;
        for (a, set_a) in self.identities.iter().enumerate() {
            for (i, img_a) in set_a.images.iter().enumerate() {
                for img_b in set_a.images.iter().skip(i + 1) {
                    intra_sum += pixel_distance(img_a, img_b);
                    intra_n += 1;
                }
                for set_b in self.identities.iter().skip(a + 1) {
                    for img_b in &set_b.images {
                        inter_sum += pixel_distance(img_a, img_b);
                        inter_n += 1;
                    }
                }
            }
        }
        (
            intra_sum / intra_n.max(1) as f64,
            inter_sum / inter_n.max(1) as f64,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut r)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        format::write_magic(w, MAGIC)?;
        format::write_u16(w, VERSION)?;
        format::write_u32(w, self.identities.len() as u32)?;
        for e in self.image_shape {
            format::write_u32(w, e as u32)?;
        }
        format::write_u64(w, self.gen_seed)?;
        for id in &self.identities {
            format::write_u32(w, id.identity_id)?;
            format::write_u32(w, id.n_train as u32)?;
            format::write_u32(w, (id.images.len() - id.n_train) as u32)?;
            for img in &id.images {
                format::write_f64_slice(w, img.data())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        format::expect_magic(r, MAGIC)?;
        format::check_version(format::read_u16(r)?, VERSION, "dataset")?;
        let n_identities = format::read_u32(r)? as usize;
        let shape = [
            format::read_u32(r)? as usize,
            format::read_u32(r)? as usize,
            format::read_u32(r)? as usize,
        ];
        let gen_seed = format::read_u64(r)?;
        let pixels = shape.iter().product::<usize>();
        let mut identities = Vec::with_capacity(n_identities);
        for _ in 0..n_identities {
            let identity_id = format::read_u32(r)?;
            let n_train = format::read_u32(r)? as usize;
            let n_test = format::read_u32(r)? as usize;
            let mut images = Vec::with_capacity(n_train + n_test);
            for _ in 0..n_train + n_test {
                let data = format::read_f64_vec(r, pixels)?;
                images.push(Tensor::new(shape.to_vec(), data).map_err(|e| {
                    Error::Format(format!("corrupt image payload: {}", e))
                })?);
            }
            identities.push(IdentitySet {
                identity_id,
                images,
                n_train,
            });
        }
        Ok(Dataset {
            identities,
            image_shape: shape,
            gen_seed,
        })
    }
}

fn pixel_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Generate identities from seeded low-frequency base patterns.
///
/// Each identity's base is a 4x4 noise grid bilinearly upsampled to the image
/// size, so identities differ in coarse structure. Per-image variation is an
/// integer translation, a brightness shift, and additive Gaussian noise, all
/// scaled by `intra_noise` (zero disables every variation, making the images
/// of an identity identical). Pixels are clamped to [0, 255].
///
/// The default split assigns two thirds of each identity's images to train.
pub fn gen_synthetic_identities(
    n_identities: usize,
    images_per_identity: usize,
    image_shape: [usize; 3],
    intra_noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_identities < 2 {
        return Err(Error::invalid("need at least 2 identities"));
    }
    if images_per_identity < 2 {
        return Err(Error::invalid("need at least 2 images per identity"));
    }
    if image_shape.iter().any(|&e| e == 0) {
        return Err(Error::invalid("image shape extents must be positive"));
    }
    if !intra_noise.is_finite() || intra_noise < 0.0 {
        return Err(Error::invalid("intra_noise must be finite and >= 0"));
    }

    let [h, w, c] = image_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_shift = ((intra_noise / 4.0).round() as i64).clamp(0, 2);
    let noise = if intra_noise > 0.0 {
        Some(Normal::new(0.0, intra_noise).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };

    let n_train = default_train_count(images_per_identity);
    let mut identities = Vec::with_capacity(n_identities);
    for identity_id in 0..n_identities {
        // Coarse 4x4 base grid per channel, upsampled to the full image.
        let grid: Vec<f64> = (0..16 * c).map(|_| rng.random_range(0.0..255.0)).collect();
        let base = upsample_bilinear(&grid, h, w, c);

        let mut images = Vec::with_capacity(images_per_identity);
        for _ in 0..images_per_identity {
            let (dy, dx) = if max_shift > 0 {
                (
                    rng.random_range(-max_shift..=max_shift),
                    rng.random_range(-max_shift..=max_shift),
                )
            } else {
                (0, 0)
            };
            let brightness = if intra_noise > 0.0 {
                rng.random_range(-intra_noise..intra_noise)
            } else {
                0.0
            };
            let mut data = translate(&base, h, w, c, dy, dx);
            for px in &mut data {
                let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                *px = (*px + brightness + n).clamp(0.0, 255.0);
            }
            images.push(Tensor::new(image_shape.to_vec(), data)?);
        }
        identities.push(IdentitySet {
            identity_id: identity_id as u32,
            images,
            n_train,
        });
    }

    Ok(Dataset {
        identities,
        image_shape,
        gen_seed: seed,
    })
}

fn default_train_count(images_per_identity: usize) -> usize {
    ((2 * images_per_identity + 2) / 3).clamp(1, images_per_identity - 1)
}

/// Reassign the split: first `n_train` images of each identity become the
/// train set, the rest the test set.
pub fn split(ds: &Dataset, n_train: usize) -> Result<Dataset> {
    let mut out = ds.clone();
    for id in &mut out.identities {
        if n_train < 1 || n_train >= id.images.len() {
            return Err(Error::invalid(format!(
                "n_train must be in [1, {}), got {}",
                id.images.len(),
                n_train
            )));
        }
        id.n_train = n_train;
    }
    Ok(out)
}

fn upsample_bilinear(grid: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    // grid is 4x4xC, row-major HWC.
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        let sy = ((y as f64 + 0.5) * 4.0 / h as f64 - 0.5).clamp(0.0, 3.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(3);
        let fy = sy - y0 as f64;
        for x in 0..w {
            let sx = ((x as f64 + 0.5) * 4.0 / w as f64 - 0.5).clamp(0.0, 3.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(3);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let g = |yy: usize, xx: usize| grid[(yy * 4 + xx) * c + ch];
                let top = g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx;
                let bot = g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx;
                out[(y * w + x) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn translate(base: &[f64], h: usize, w: usize, c: usize, dy: i64, dx: i64) -> Vec<f64> {
    let mut out = vec![0.0; base.len()];
    for y in 0..h {
        let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
        for x in 0..w {
            let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
            for ch in 0..c {
                out[(y * w + x) * c + ch] = base[(sy * w + sx) * c + ch];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synthetic_identities(3, 4, [8, 8, 3], 8.0, 11).unwrap();
        let b = gen_synthetic_identities(3, 4, [8, 8, 3], 8.0, 11).unwrap();
        for (ia, ib) in a.identities().iter().zip(b.identities()) {
            assert_eq!(ia.identity_id, ib.identity_id);
            for (x, y) in ia.images.iter().zip(&ib.images) {
                assert_eq!(x.data(), y.data());
            }
        }
    }

    #[test]
    fn zero_noise_gives_identical_images() {
        let ds = gen_synthetic_identities(2, 3, [8, 8, 1], 0.0, 5).unwrap();
        for id in ds.identities() {
            let first = id.images[0].data();
            for img in &id.images[1..] {
                assert_eq!(img.data(), first);
            }
        }
    }

    #[test]
    fn pixels_stay_in_range() {
        let ds = gen_synthetic_identities(4, 6, [10, 10, 3], 40.0, 3).unwrap();
        for id in ds.identities() {
            for img in &id.images {
                assert!(img.data().iter().all(|&p| (0.0..=255.0).contains(&p)));
            }
        }
    }

    #[test]
    fn identities_cluster_in_pixel_space() {
        let ds = gen_synthetic_identities(10, 8, [16, 16, 3], 8.0, 7).unwrap();
        let (intra, inter) = ds.cluster_separation();
        assert!(
            intra < inter,
            "intra {} should be below inter {}",
            intra,
            inter
        );
    }

    #[test]
    fn default_split_matches_two_thirds() {
        let ds = gen_synthetic_identities(2, 15, [4, 4, 1], 2.0, 0).unwrap();
        for id in ds.identities() {
            assert_eq!(id.train_images().len(), 10);
            assert_eq!(id.test_images().len(), 5);
        }
    }

    #[test]
    fn split_reassigns_and_validates() {
        let ds = gen_synthetic_identities(2, 15, [4, 4, 1], 2.0, 0).unwrap();
        let s = split(&ds, 10).unwrap();
        for id in s.identities() {
            assert_eq!(id.train_images().len(), 10);
            assert_eq!(id.test_images().len(), 5);
        }
        // Idempotent: resplitting with the same count changes nothing.
        let s2 = split(&s, 10).unwrap();
        for (a, b) in s.identities().iter().zip(s2.identities()) {
            assert_eq!(a.n_train, b.n_train);
            for (x, y) in a.images.iter().zip(&b.images) {
                assert_eq!(x.data(), y.data());
            }
        }
        assert!(split(&ds, 15).is_err());
        assert!(split(&ds, 0).is_err());
    }

    #[test]
    fn rejects_degenerate_parameters() {
        assert!(gen_synthetic_identities(1, 4, [4, 4, 1], 1.0, 0).is_err());
        assert!(gen_synthetic_identities(2, 1, [4, 4, 1], 1.0, 0).is_err());
        assert!(gen_synthetic_identities(2, 4, [0, 4, 1], 1.0, 0).is_err());
        assert!(gen_synthetic_identities(2, 4, [4, 4, 1], -1.0, 0).is_err());
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let ds = gen_synthetic_identities(3, 5, [6, 6, 2], 5.0, 9).unwrap();
        let mut buf = Vec::new();
        ds.write(&mut buf).unwrap();
        let back = Dataset::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back.image_shape(), ds.image_shape());
        assert_eq!(back.gen_seed(), ds.gen_seed());
        for (a, b) in ds.identities().iter().zip(back.identities()) {
            assert_eq!(a.identity_id, b.identity_id);
            assert_eq!(a.n_train, b.n_train);
            for (x, y) in a.images.iter().zip(&b.images) {
                assert_eq!(x.data(), y.data());
            }
        }
        let mut buf2 = Vec::new();
        back.write(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }
}

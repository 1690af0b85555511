//! Image datasets and the epoch-based minibatch loader.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::image::{batch_tensor, RgbImage};
use super::raw;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Equally sized images held as one `[N, 3, H, W]` tensor in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    names: Vec<String>,
}

impl Dataset {
    pub fn from_tensor(images: Tensor<f32>, names: Vec<String>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::invalid("dataset", format!("expected [N, 3, H, W], got {s:?}")));
        }
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::invalid("dataset", format!("image dims {}x{} must be even", s[3], s[2])));
        }
        if names.len() != s[0] {
            return Err(Error::InvalidArgument(format!("{} names for {} images", names.len(), s[0])));
        }
        Ok(Self { images, names })
    }

    pub fn from_images(images: &[RgbImage]) -> Result<Self> {
        let names = (0..images.len()).map(|i| format!("{i:05}")).collect();
        Self::from_tensor(batch_tensor(images)?, names)
    }

    /// Reads every `.ppm` and `.5d` file in `dir` (sorted by name). Raw
    /// tensors hold one `[3, H, W]` (or `[1, 3, H, W]`) image in `[-1, 1]`.
    pub fn load(dir: &Path) -> Result<Self> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            if ext == "ppm" || ext == raw::EXTENSION {
                paths.push(path);
            }
        }
        paths.sort();
        if paths.is_empty() {
            return Err(Error::format(dir, "no .ppm or .5d images found"));
        }
        let mut loaded = Vec::with_capacity(paths.len());
        for path in &paths {
            let t = if path.extension().is_some_and(|e| e == "ppm") {
                RgbImage::read_ppm(path)?.to_tensor::<f32>()
            } else {
                let t = raw::read::<f32>(path)?;
                match t.shape() {
                    [3, h, w] | [1, 3, h, w] => t.reshape(&[3, *h, *w])?,
                    s => return Err(Error::format(path, format!("expected a [3, H, W] image tensor, got {s:?}"))),
                }
            };
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            loaded.push((name, t));
        }
        let dims = |t: &Tensor<f32>| (t.shape()[2], t.shape()[1]);
        let expected = dims(&loaded[0].1);
        let offenders: Vec<String> = loaded
            .iter()
            .filter(|(_, t)| dims(t) != expected)
            .map(|(n, t)| format!("{n} ({}x{})", dims(t).0, dims(t).1))
            .collect();
        if !offenders.is_empty() {
            return Err(Error::format(
                dir,
                format!(
                    "mixed image sizes: expected {}x{} (from {}), found {}",
                    expected.0,
                    expected.1,
                    loaded[0].0,
                    offenders.join(", ")
                ),
            ));
        }
        let (w, h) = expected;
        let mut data = Vec::with_capacity(loaded.len() * 3 * w * h);
        let mut names = Vec::with_capacity(loaded.len());
        for (n, t) in loaded {
            data.extend_from_slice(t.data());
            names.push(n);
        }
        let images = Tensor::new(&[names.len(), 3, h, w], data)?;
        Self::from_tensor(images, names).map_err(|e| Error::format(dir, e.to_string()))
    }

    /// Writes each image as `NNNNN.ppm` into `dir`.
    pub fn write_ppm_dir(images: &[RgbImage], dir: &Path) -> Result<()> {
        super::create_dir(dir)?;
        for (i, img) in images.iter().enumerate() {
            img.write_ppm(&dir.join(format!("{i:05}.ppm")))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(height, width)`.
    pub fn image_dims(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    /// `[indices.len(), 3, H, W]`.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let s = self.images.shape();
        let per = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("image index {i} >= {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Tensor::new(&[indices.len(), s[1], s[2], s[3]], data)
    }
}

/// Shuffled-without-replacement epochs; the last batch of an epoch may be
/// short, and the order is reshuffled with the run RNG at each boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Loader {
    pub order: Vec<usize>,
    pub cursor: usize,
}

impl Loader {
    pub fn new<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Ok(Self { order, cursor: 0 })
    }

    /// Indices of the next batch of at most `batch` images.
    pub fn next_indices<R: Rng + ?Sized>(&mut self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if batch == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.cursor >= self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let end = (self.cursor + batch).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Ok(out)
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, data: &Dataset, batch: usize, rng: &mut R) -> Result<Tensor<f32>> {
        if self.order.len() != data.len() {
            return Err(Error::InvalidArgument(format!(
                "loader covers {} images, dataset has {}",
                self.order.len(),
                data.len()
            )));
        }
        let idx = self.next_indices(batch, rng)?;
        data.gather(&idx)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn batches_cover_epochs_then_reshuffle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut loader = Loader::new(10, &mut rng).unwrap();
        let sizes: Vec<usize> = (0..3).map(|_| loader.next_indices(4, &mut rng).unwrap().len()).collect();
        assert_eq!(sizes, [4, 4, 2]);
        let mut seen = loader.order.clone();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let first_epoch = loader.order.clone();
        let next = loader.next_indices(4, &mut rng).unwrap();
        assert_eq!(next.len(), 4);
        assert_ne!(loader.order, first_epoch, "reshuffled at the boundary");
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Loader::new(0, &mut rng).is_err());
    }

    #[test]
    fn load_reports_mixed_sizes() {
        let dir = tempfile::tempdir().unwrap();
        RgbImage::filled(4, 4, [0, 0, 0]).write_ppm(&dir.path().join("a.ppm")).unwrap();
        RgbImage::filled(4, 4, [9, 9, 9]).write_ppm(&dir.path().join("b.ppm")).unwrap();
        RgbImage::filled(6, 4, [0, 0, 0]).write_ppm(&dir.path().join("c.ppm")).unwrap();
        let err = Dataset::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("c.ppm (6x4)") && !err.contains("b.ppm"), "{err}");
    }

    #[test]
    fn load_reads_ppm_and_raw() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::filled(4, 2, [255, 0, 128]);
        img.write_ppm(&dir.path().join("a.ppm")).unwrap();
        raw::write(&dir.path().join("b.5d"), &img.to_tensor::<f32>()).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.image_dims(), (2, 4));
        assert_eq!(ds.names(), ["a.ppm", "b.5d"]);
        let b = ds.gather(&[0, 1]).unwrap();
        assert_eq!(b.data()[..8], b.data()[24..32]);
        assert_eq!(b.data()[0], 1.0);
    }

    #[test]
    fn empty_dir_and_odd_sizes_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Dataset::load(dir.path()).is_err());
        RgbImage::filled(3, 4, [0, 0, 0]).write_ppm(&dir.path().join("a.ppm")).unwrap();
        assert!(Dataset::load(dir.path()).is_err());
    }
}

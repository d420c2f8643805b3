//! Datasets, augmentation and the L-way Z-shot episode sampler.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side of synthetic images.
pub const SYNTH_SIDE: usize = 32;
/// Side Omniglot images are resized to.
pub const OMNIGLOT_SIDE: usize = 28;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassData {
    pub id: String,
    /// `[H, W]` images with values in `[0, 1]`.
    pub images: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub side: usize,
    pub classes: Vec<ClassData>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Splits into the first `train` classes and the rest.
    pub fn split(&self, train: usize) -> Result<(Dataset, Dataset)> {
        if train == 0 || train >= self.classes.len() {
            return Err(Error::Sampling(format!(
                "cannot split {} classes with {train} for training",
                self.classes.len()
            )));
        }
        let a = Dataset {
            side: self.side,
            classes: self.classes[..train].to_vec(),
        };
        let b = Dataset {
            side: self.side,
            classes: self.classes[train..].to_vec(),
        };
        assert!(
            a.classes.iter().all(|c| b.classes.iter().all(|d| d.id != c.id)),
            "train and test classes overlap"
        );
        Ok((a, b))
    }

    /// Adds the 90°, 180° and 270° rotations of every class as new classes.
    pub fn with_rotated_classes(&self) -> Dataset {
        let mut classes = self.classes.clone();
        for k in 1..4 {
            for c in &self.classes {
                classes.push(ClassData {
                    id: format!("{}@rot{}", c.id, 90 * k),
                    images: c.images.iter().map(|im| rot90(im, k)).collect(),
                });
            }
        }
        Dataset {
            side: self.side,
            classes,
        }
    }
}

/// Rendering noise of the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthNoise {
    pub pixel_std: f64,
    pub max_shift: f64,
    pub max_rotation_deg: f64,
}

impl Default for SynthNoise {
    fn default() -> Self {
        Self {
            pixel_std: 0.05,
            max_shift: 3.0,
            max_rotation_deg: 15.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    sigma: f64,
    amp: f64,
}

/// Deterministic blob dataset with the default noise.
pub fn gen_synthetic(num_classes: usize, samples_per_class: usize, seed: u64) -> Result<Dataset> {
    gen_synthetic_with(num_classes, samples_per_class, seed, SynthNoise::default())
}

/// Each class is three Gaussian blobs; each sample re-renders them shifted,
/// rotated and with pixel noise.
pub fn gen_synthetic_with(num_classes: usize, samples_per_class: usize, seed: u64, noise: SynthNoise) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Parameter(format!("need at least 2 classes, got {num_classes}")));
    }
    let side = SYNTH_SIDE;
    let mut classes = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let blobs: Vec<Blob> = (0..3)
            .map(|_| Blob {
                cx: rng.random_range(0.0..side as f64),
                cy: rng.random_range(0.0..side as f64),
                sigma: rng.random_range(2.0..5.0),
                amp: rng.random_range(0.5..1.0),
            })
            .collect();
        let pixel = Normal::new(0.0, noise.pixel_std.max(0.0)).map_err(|e| Error::Parameter(e.to_string()))?;
        let mut images = Vec::with_capacity(samples_per_class);
        for _ in 0..samples_per_class {
            let dx = sym(&mut rng, noise.max_shift);
            let dy = sym(&mut rng, noise.max_shift);
            let theta = sym(&mut rng, noise.max_rotation_deg).to_radians();
            let (sin, cos) = theta.sin_cos();
            let mid = (side as f64 - 1.0) / 2.0;
            let mut img = Tensor::zeros(&[side, side]);
            for y in 0..side {
                for x in 0..side {
                    // pull the pixel back into the class frame
                    let (u, v) = (x as f64 - mid - dx, y as f64 - mid - dy);
                    let px = cos * u + sin * v + mid;
                    let py = -sin * u + cos * v + mid;
                    let mut val: f64 = blobs
                        .iter()
                        .map(|b| {
                            let r2 = (px - b.cx).powi(2) + (py - b.cy).powi(2);
                            b.amp * (-r2 / (2.0 * b.sigma * b.sigma)).exp()
                        })
                        .sum();
                    if noise.pixel_std > 0.0 {
                        val += pixel.sample(&mut rng);
                    }
                    img.set(&[y, x], val.clamp(0.0, 1.0));
                }
            }
            images.push(img);
        }
        classes.push(ClassData {
            id: format!("synth{c:04}"),
            images,
        });
    }
    Ok(Dataset { side, classes })
}

fn sym<R: Rng + ?Sized>(rng: &mut R, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

/// Loads `root/<class>/<image>.png`, classes and files in lexicographic
/// order, resized to 28×28.
pub fn load_omniglot(root: &Path) -> Result<Dataset> {
    load_image_folder(root, OMNIGLOT_SIDE)
}

pub fn load_image_folder(root: &Path, side: usize) -> Result<Dataset> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(root, e))?
        .into_iter()
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Ingestion {
            class: String::new(),
            reason: format!("no class directories under {}", root.display()),
        });
    }
    let mut classes = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut files: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Ingestion {
                class: id,
                reason: "class directory holds no png images".into(),
            });
        }
        let mut images = Vec::with_capacity(files.len());
        for f in files {
            let img = image::open(&f)
                .map_err(|e| Error::Ingestion {
                    class: id.clone(),
                    reason: format!("{}: {e}", f.display()),
                })?
                .to_luma8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let data: Vec<f64> = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            images.push(resize(&Tensor::new(vec![h, w], data)?, side));
        }
        classes.push(ClassData { id, images });
    }
    Ok(Dataset { side, classes })
}

/// Average pooling when the source is an integer multiple of `side`,
/// nearest neighbour otherwise.
pub fn resize(img: &Tensor, side: usize) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = Tensor::zeros(&[side, side]);
    if h % side == 0 && w % side == 0 {
        let (fy, fx) = (h / side, w / side);
        let norm = (fy * fx) as f64;
        for y in 0..side {
            for x in 0..side {
                let mut s = 0.0;
                for dy in 0..fy {
                    for dx in 0..fx {
                        s += img.at(&[y * fy + dy, x * fx + dx]);
                    }
                }
                out.set(&[y, x], s / norm);
            }
        }
    } else {
        for y in 0..side {
            for x in 0..side {
                let sy = ((y as f64 + 0.5) * h as f64 / side as f64) as usize;
                let sx = ((x as f64 + 0.5) * w as f64 / side as f64) as usize;
                out.set(&[y, x], img.at(&[sy.min(h - 1), sx.min(w - 1)]));
            }
        }
    }
    out
}

/// One L-way Z-shot task. Support images are class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    /// Dataset class index of each episode class.
    pub classes: Vec<usize>,
    /// `(class, sample)` dataset indices of each support image.
    pub support_ids: Vec<(usize, usize)>,
    pub query_ids: Vec<(usize, usize)>,
    pub support: Vec<Tensor>,
    /// Episode class (0..way) of each support image.
    pub support_class: Vec<usize>,
    pub query: Vec<Tensor>,
    pub query_class: Vec<usize>,
}

/// Draws `way` distinct classes uniformly, then `shot` support and `queries`
/// query images per class, disjoint within the class.
pub fn sample_episode<R: Rng + ?Sized>(
    ds: &Dataset,
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    if way == 0 || shot == 0 {
        return Err(Error::Sampling("way and shot must be positive".into()));
    }
    if ds.classes.len() < way {
        return Err(Error::Sampling(format!(
            "{way}-way episode from {} classes",
            ds.classes.len()
        )));
    }
    let classes = sample(rng, ds.classes.len(), way).into_vec();
    let mut ep = Episode {
        way,
        shot,
        classes: classes.clone(),
        support_ids: Vec::with_capacity(way * shot),
        query_ids: Vec::with_capacity(way * queries),
        support: Vec::with_capacity(way * shot),
        support_class: Vec::with_capacity(way * shot),
        query: Vec::with_capacity(way * queries),
        query_class: Vec::with_capacity(way * queries),
    };
    for (l, &c) in classes.iter().enumerate() {
        let imgs = &ds.classes[c].images;
        if imgs.len() < shot + queries {
            return Err(Error::Sampling(format!(
                "class {} has {} images, episode needs {}",
                ds.classes[c].id,
                imgs.len(),
                shot + queries
            )));
        }
        let pick = sample(rng, imgs.len(), shot + queries).into_vec();
        for (k, &i) in pick.iter().enumerate() {
            if k < shot {
                ep.support_ids.push((c, i));
                ep.support.push(imgs[i].clone());
                ep.support_class.push(l);
            } else {
                ep.query_ids.push((c, i));
                ep.query.push(imgs[i].clone());
                ep.query_class.push(l);
            }
        }
    }
    debug_assert!(ep.query_ids.iter().all(|q| !ep.support_ids.contains(q)));
    Ok(ep)
}

/// Which augmentations are enabled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub rotation: bool,
    pub flip: bool,
    pub crop: bool,
    pub jitter: bool,
    pub flip_prob: f64,
}

impl AugmentSpec {
    pub fn none() -> Self {
        Self {
            rotation: false,
            flip: false,
            crop: false,
            jitter: false,
            flip_prob: 0.5,
        }
    }

    pub fn all() -> Self {
        Self {
            rotation: true,
            flip: true,
            crop: true,
            jitter: true,
            flip_prob: 0.5,
        }
    }
}

/// Applies each enabled op with uniformly drawn parameters: a quarter turn
/// plus up to ±15°, a horizontal flip, a resized crop keeping 70–100% of the
/// area and an intensity factor in [0.8, 1.2].
pub fn augment<R: Rng + ?Sized>(img: &Tensor, spec: &AugmentSpec, rng: &mut R) -> Tensor {
    let mut out = img.clone();
    if spec.rotation {
        let quarter = rng.random_range(0..4);
        let fine = rng.random_range(-15.0..=15.0f64);
        out = rotate(&rot90(&out, quarter), fine.to_radians());
    }
    if spec.flip && rng.random_bool(spec.flip_prob.clamp(0.0, 1.0)) {
        out = flip_horizontal(&out);
    }
    if spec.crop {
        let scale = rng.random_range(0.7..=1.0f64);
        out = resized_crop(&out, scale, rng);
    }
    if spec.jitter {
        let f = rng.random_range(0.8..=1.2f64);
        out = out.map(|v| v * f);
    }
    out.map(|v| v.clamp(0.0, 1.0))
}

pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            out.set(&[y, x], img.at(&[y, w - 1 - x]));
        }
    }
    out
}

/// Rotation by `k` quarter turns counter-clockwise.
pub fn rot90(img: &Tensor, k: usize) -> Tensor {
    let mut out = img.clone();
    for _ in 0..k % 4 {
        let (h, w) = (out.shape()[0], out.shape()[1]);
        let mut next = Tensor::zeros(&[w, h]);
        for y in 0..h {
            for x in 0..w {
                next.set(&[w - 1 - x, y], out.at(&[y, x]));
            }
        }
        out = next;
    }
    out
}

fn bilinear(img: &Tensor, x: f64, y: f64) -> f64 {
    let (h, w) = (img.shape()[0] as isize, img.shape()[1] as isize);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let px = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h || xx >= w {
            0.0
        } else {
            img.at(&[yy as usize, xx as usize])
        }
    };
    let (xi, yi) = (x0 as isize, y0 as isize);
    px(yi, xi) * (1.0 - fx) * (1.0 - fy)
        + px(yi, xi + 1) * fx * (1.0 - fy)
        + px(yi + 1, xi) * (1.0 - fx) * fy
        + px(yi + 1, xi + 1) * fx * fy
}

/// Rotation about the centre with bilinear sampling; outside is zero.
pub fn rotate(img: &Tensor, theta: f64) -> Tensor {
    if theta == 0.0 {
        return img.clone();
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 - cx, y as f64 - cy);
            out.set(&[y, x], bilinear(img, cos * u + sin * v + cx, -sin * u + cos * v + cy));
        }
    }
    out
}

/// Crops a random square window covering `area` of the image and resizes it
/// back to full size.
pub fn resized_crop<R: Rng + ?Sized>(img: &Tensor, area: f64, rng: &mut R) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let frac = area.clamp(0.0, 1.0).sqrt();
    let (ch, cw) = (h as f64 * frac, w as f64 * frac);
    let oy = rng.random_range(0.0..=(h as f64 - ch));
    let ox = rng.random_range(0.0..=(w as f64 - cw));
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let sy = oy + (y as f64 + 0.5) * ch / h as f64 - 0.5;
            let sx = ox + (x as f64 + 0.5) * cw / w as f64 - 0.5;
            out.set(&[y, x], bilinear(img, sx.max(0.0), sy.max(0.0)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let a = gen_synthetic(4, 3, 9).unwrap();
        let b = gen_synthetic(4, 3, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_synthetic(4, 3, 10).unwrap());
        for c in &a.classes {
            for im in &c.images {
                assert_eq!(im.shape(), &[SYNTH_SIDE, SYNTH_SIDE]);
                assert!(im.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        assert!(gen_synthetic(1, 3, 0).is_err());
    }

    #[test]
    fn noiseless_samples_of_a_class_coincide() {
        let quiet = SynthNoise {
            pixel_std: 0.0,
            max_shift: 0.0,
            max_rotation_deg: 0.0,
        };
        let ds = gen_synthetic_with(3, 4, 1, quiet).unwrap();
        for c in &ds.classes {
            assert!(c.images.iter().all(|im| im == &c.images[0]));
        }
        assert_ne!(ds.classes[0].images[0], ds.classes[1].images[0]);
    }

    #[test]
    fn nearest_prototype_separates_classes() {
        let ds = gen_synthetic(5, 40, 2024).unwrap();
        let protos: Vec<Vec<f64>> = ds
            .classes
            .iter()
            .map(|c| {
                let mut m = vec![0.0; SYNTH_SIDE * SYNTH_SIDE];
                for im in &c.images[..20] {
                    m.iter_mut().zip(im.data()).for_each(|(a, b)| *a += b / 20.0);
                }
                m
            })
            .collect();
        let (mut hit, mut total) = (0, 0);
        for (ci, c) in ds.classes.iter().enumerate() {
            for im in &c.images[20..] {
                let best = (0..protos.len())
                    .min_by(|&a, &b| {
                        let da: f64 = protos[a].iter().zip(im.data()).map(|(p, x)| (p - x).powi(2)).sum();
                        let db: f64 = protos[b].iter().zip(im.data()).map(|(p, x)| (p - x).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                hit += usize::from(best == ci);
                total += 1;
            }
        }
        assert!(hit as f64 / total as f64 > 0.9, "{hit}/{total}");
    }

    #[test]
    fn episodes_respect_the_protocol() {
        let ds = gen_synthetic(5, 6, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ep = sample_episode(&ds, 5, 2, 4, &mut rng).unwrap();
        let mut cls = ep.classes.clone();
        cls.sort();
        assert_eq!(cls, vec![0, 1, 2, 3, 4]);
        for l in 0..5 {
            let mut used: Vec<usize> = ep
                .support_ids
                .iter()
                .chain(&ep.query_ids)
                .filter(|id| id.0 == ep.classes[l])
                .map(|id| id.1)
                .collect();
            used.sort();
            assert_eq!(used, (0..6).collect::<Vec<_>>());
        }
        assert_eq!(ep.support_class, vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
        assert!(ep.query_class.iter().all(|&c| c < 5));
        assert!(matches!(sample_episode(&ds, 6, 1, 1, &mut rng), Err(Error::Sampling(_))));
        assert!(matches!(sample_episode(&ds, 2, 4, 3, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn split_is_disjoint() {
        let ds = gen_synthetic(6, 2, 0).unwrap();
        let (a, b) = ds.split(4).unwrap();
        assert_eq!((a.num_classes(), b.num_classes()), (4, 2));
        assert!(ds.split(6).is_err());
        let rot = ds.with_rotated_classes();
        assert_eq!(rot.num_classes(), 24);
        assert_eq!(rot.classes[6].images[0], rot90(&ds.classes[0].images[0], 1));
    }

    #[test]
    fn augmentation_contracts() {
        let ds = gen_synthetic(2, 1, 5).unwrap();
        let img = &ds.classes[0].images[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(&augment(img, &AugmentSpec::none(), &mut rng), img);
        let forced = AugmentSpec {
            flip: true,
            flip_prob: 1.0,
            ..AugmentSpec::none()
        };
        let twice = augment(&augment(img, &forced, &mut rng), &forced, &mut rng);
        assert_eq!(&twice, img);
        assert_eq!(&rot90(img, 4), img);
        let a = augment(img, &AugmentSpec::all(), &mut ChaCha8Rng::seed_from_u64(7));
        let b = augment(img, &AugmentSpec::all(), &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(rotate(img, 0.0), *img);
        let full = resized_crop(img, 1.0, &mut rng);
        assert!(full.max_abs_diff(img) < 1e-12);
    }

    #[test]
    fn resize_modes() {
        let img = Tensor::new(vec![4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let avg = resize(&img, 2);
        assert_eq!(avg.data(), &[2.5, 4.5, 10.5, 12.5]);
        let near = resize(&img, 3);
        assert_eq!(near.at(&[0, 0]), 0.0);
        assert_eq!(near.at(&[2, 2]), 15.0);
    }
}

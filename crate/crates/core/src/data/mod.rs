//! Registration pairs: shape sourcing, point sampling, partial cropping,
//! noise, and a manifest from which every pair can be regenerated.

pub mod ply;
pub mod shapes;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot3, random_transform, PointCloud, RigidTransform, Vec3};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;

pub use shapes::PrimitiveKind;

pub const MANIFEST_VERSION: u32 = 1;

/// Categories dropped when ingesting an external shape collection because
/// their shapes are symmetric about an axis.
pub const DEFAULT_EXCLUDED_CATEGORIES: [&str; 8] =
    ["bottle", "bowl", "cone", "cup", "flower_pot", "lamp", "tent", "vase"];

/// Source token selecting the built-in generator.
pub const PROCEDURAL: &str = "procedural";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split '{s}'")))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// OS: both clouds come from one point subset. TS: each cloud is an
/// independent subset of the dense surface samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Os,
    Ts,
}

/// `Prnet` keeps the points nearest to a far viewpoint; `Rpmnet` keeps one
/// side of a random plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropManner {
    Prnet,
    Rpmnet,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `"procedural"` or a directory laid out as `<category>/<split>/*.ply`.
    pub source: String,
    pub excluded_categories: Vec<String>,
    /// Procedural shapes per split.
    pub shapes: SplitCounts,
    /// Surface samples per procedural shape.
    pub shape_points: usize,
    /// Pairs per split.
    pub pairs: SplitCounts,
    /// Points per cloud before cropping.
    pub points: usize,
    pub sampling: SamplingMode,
    pub crop: CropManner,
    pub keep_fraction: f64,
    pub max_angle_deg: f64,
    pub max_translation: f64,
    pub noise_sigma: f64,
    pub noise_clip: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: PROCEDURAL.into(),
            excluded_categories: DEFAULT_EXCLUDED_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            shapes: SplitCounts {
                train: 64,
                val: 16,
                test: 16,
            },
            shape_points: 2048,
            pairs: SplitCounts {
                train: 64,
                val: 16,
                test: 16,
            },
            points: 1024,
            sampling: SamplingMode::Os,
            crop: CropManner::Prnet,
            keep_fraction: 0.7,
            max_angle_deg: 45.0,
            max_translation: 0.5,
            noise_sigma: 0.0,
            noise_clip: 0.05,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points < 3 {
            return Err(Error::invalid("points must be at least 3"));
        }
        if (self.sampling == SamplingMode::Ts || self.source == PROCEDURAL)
            && self.shape_points < self.points {
                return Err(Error::invalid("shape_points must be at least points"));
            }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::invalid("keep_fraction must lie in (0, 1]"));
        }
        if self.crop != CropManner::None && kept_count(self.points, self.keep_fraction) < 3 {
            return Err(Error::invalid("crop keeps fewer than 3 points"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.noise_clip > 0.0) {
            return Err(Error::invalid("noise_sigma must be >= 0 and noise_clip > 0"));
        }
        Ok(())
    }

    /// Point count of every generated cloud.
    pub fn cloud_points(&self) -> usize {
        match self.crop {
            CropManner::None => self.points,
            _ => kept_count(self.points, self.keep_fraction),
        }
    }
}

/// A shape with a stable identifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Shape<T> {
    pub id: String,
    pub cloud: PointCloud<T>,
}

/// Centers the bounding box at the origin and scales so the largest
/// coordinate magnitude is one.
pub fn normalize_shape<T: Scalar>(cloud: &PointCloud<T>) -> PointCloud<T> {
    let pts = cloud.points();
    let mut lo = pts[0];
    let mut hi = pts[0];
    for p in pts {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let half = T::lit(0.5);
    let c: Vec3<T> = std::array::from_fn(|k| (lo[k] + hi[k]) * half);
    let centered = cloud.translated(c.map(|v| -v));
    let m = centered.max_abs_coord();
    if m <= T::zero() {
        return centered;
    }
    PointCloud::new(
        centered
            .points()
            .iter()
            .map(|p| p.map(|v| (v / m).max(-T::one()).min(T::one())))
            .collect(),
    )
    .expect("scaled cloud stays finite")
}

fn procedural_shapes<T: Scalar>(split: Split, config: &DataConfig, seed: u64) -> Vec<Shape<T>> {
    (0..config.shapes.get(split))
        .into_par_iter()
        .map(|i| {
            let kind = PrimitiveKind::ALL[i % PrimitiveKind::ALL.len()];
            let mut rng = stream(&[seed, 0x5A, split.index(), i as u64]);
            let pts = shapes::sample_primitive(kind, &mut rng, config.shape_points);
            let cloud = PointCloud::new(pts).expect("primitive samples are finite");
            Shape {
                id: format!("{PROCEDURAL}/{split}/{i:04}-{}", kind.name()),
                cloud: normalize_shape(&cloud).cast(),
            }
        })
        .collect()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::Ingest {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for entry in rd {
        out.push(entry?.path());
    }
    out.sort();
    Ok(out)
}

fn directory_shapes<T: Scalar>(root: &Path, split: Split, excluded: &[String]) -> Result<Vec<Shape<T>>> {
    let mut files = Vec::new();
    for cat_dir in sorted_entries(root)? {
        if !cat_dir.is_dir() {
            continue;
        }
        let category = cat_dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if excluded.contains(&category) {
            continue;
        }
        let split_dir = cat_dir.join(split.name());
        if !split_dir.is_dir() {
            continue;
        }
        for f in sorted_entries(&split_dir)? {
            if f.extension().and_then(|e| e.to_str()) == Some("ply") {
                files.push((category.clone(), f));
            }
        }
    }
    files
        .par_iter()
        .map(|(category, f)| {
            let cloud = ply::read_ply::<T>(f)?;
            let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            Ok(Shape {
                id: format!("{category}/{split}/{stem}"),
                cloud: normalize_shape(&cloud),
            })
        })
        .collect()
}

/// Loads the shapes of one split from `config.source`.
pub fn load_shapes<T: Scalar>(split: Split, config: &DataConfig, seed: u64) -> Result<Vec<Shape<T>>> {
    let shapes = if config.source == PROCEDURAL {
        procedural_shapes(split, config, seed)
    } else {
        directory_shapes(Path::new(&config.source), split, &config.excluded_categories)?
    };
    if shapes.is_empty() {
        return Err(Error::EmptySplit(split.name().into()));
    }
    Ok(shapes)
}

/// Draws the two base clouds of a pair from a dense shape.
pub fn sample_pair<T: Scalar, R: Rng + ?Sized>(
    shape: &PointCloud<T>,
    mode: SamplingMode,
    n: usize,
    rng: &mut R,
) -> Result<(PointCloud<T>, PointCloud<T>)> {
    if n > shape.len() {
        return Err(Error::invalid(format!(
            "cannot sample {n} points from a shape with {}",
            shape.len()
        )));
    }
    let first = shape.select(&rand::seq::index::sample(rng, shape.len(), n).into_vec())?;
    match mode {
        SamplingMode::Os => Ok((first.clone(), first)),
        SamplingMode::Ts => {
            let second = shape.select(&rand::seq::index::sample(rng, shape.len(), n).into_vec())?;
            Ok((first, second))
        }
    }
}

/// `ceil(keep_fraction * n)`, robust to the product landing a rounding
/// error above an integer.
pub fn kept_count(n: usize, keep_fraction: f64) -> usize {
    ((keep_fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// How a crop was made, for checking and display.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CropRegion {
    Viewpoint([f64; 3]),
    /// Kept points satisfy `normal . p >= offset`.
    HalfSpace { normal: [f64; 3], offset: f64 },
    Whole,
}

/// Keeps a contiguous region of `cloud`, preserving the original point order.
pub fn crop_partial_with_region<T: Scalar, R: Rng + ?Sized>(
    cloud: &PointCloud<T>,
    manner: CropManner,
    keep_fraction: f64,
    rng: &mut R,
) -> Result<(PointCloud<T>, CropRegion)> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::invalid(format!("keep_fraction must lie in (0, 1], got {keep_fraction}")));
    }
    if manner == CropManner::None || keep_fraction == 1.0 {
        return Ok((cloud.clone(), CropRegion::Whole));
    }
    let k = kept_count(cloud.len(), keep_fraction);
    if k < 3 {
        return Err(Error::invalid(format!("crop would keep only {k} points")));
    }
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let pts: Vec<[f64; 3]> = cloud.points().iter().map(|p| p.map(|c| c.as_f64())).collect();
    // score: smaller is kept first
    let (scores, region): (Vec<f64>, CropRegion) = match manner {
        CropManner::Prnet => {
            let view = dir.map(|c| 2.0 * c);
            let d = pts
                .iter()
                .map(|p| (0..3).map(|i| (p[i] - view[i]).powi(2)).sum::<f64>())
                .collect();
            (d, CropRegion::Viewpoint(view))
        }
        CropManner::Rpmnet => {
            let d = pts.iter().map(|p| -dot3(dir, *p)).collect();
            (d, CropRegion::HalfSpace { normal: dir, offset: 0.0 })
        }
        CropManner::None => unreachable!(),
    };
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    let region = match region {
        CropRegion::HalfSpace { normal, .. } => CropRegion::HalfSpace {
            normal,
            offset: kept.iter().map(|&i| dot3(normal, pts[i])).fold(f64::INFINITY, f64::min),
        },
        r => r,
    };
    Ok((cloud.select(&kept)?, region))
}

pub fn crop_partial<T: Scalar, R: Rng + ?Sized>(
    cloud: &PointCloud<T>,
    manner: CropManner,
    keep_fraction: f64,
    rng: &mut R,
) -> Result<PointCloud<T>> {
    crop_partial_with_region(cloud, manner, keep_fraction, rng).map(|(c, _)| c)
}

/// Adds i.i.d. Gaussian noise to every coordinate, clipped to `[-clip, clip]`.
pub fn add_noise<T: Scalar, R: Rng + ?Sized>(
    cloud: &PointCloud<T>,
    sigma: f64,
    clip: f64,
    rng: &mut R,
) -> Result<PointCloud<T>> {
    if !(sigma >= 0.0) || !(clip > 0.0) {
        return Err(Error::invalid(format!("noise needs sigma >= 0 and clip > 0, got {sigma}, {clip}")));
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let pts = cloud
        .points()
        .iter()
        .map(|p| p.map(|c| c + T::lit(normal.sample(rng).clamp(-clip, clip))))
        .collect();
    PointCloud::new(pts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationPair<T> {
    pub source: PointCloud<T>,
    pub reference: PointCloud<T>,
    /// Maps source coordinates onto reference coordinates.
    pub gt: RigidTransform<T>,
    pub sampling_mode: SamplingMode,
    pub crop_manner: CropManner,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl<T: Scalar> RegistrationPair<T> {
    pub fn cast<U: Scalar>(&self) -> RegistrationPair<U> {
        RegistrationPair {
            source: self.source.cast(),
            reference: self.reference.cast(),
            gt: self.gt.cast(),
            sampling_mode: self.sampling_mode,
            crop_manner: self.crop_manner,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }
}

/// Base clouds are sampled from the shape, the reference side is moved by a
/// random ground truth, and then each side is cropped and perturbed
/// independently.
pub fn make_pair<T: Scalar>(shape: &PointCloud<T>, config: &DataConfig, seed: u64) -> Result<RegistrationPair<T>> {
    let mut rng = stream(&[seed]);
    let (x, y) = sample_pair(shape, config.sampling, config.points, &mut rng)?;
    let gt = random_transform::<T, _>(&mut rng, config.max_angle_deg, config.max_translation)?;
    let y = gt.apply(&y);
    let x = crop_partial(&x, config.crop, config.keep_fraction, &mut rng)?;
    let y = crop_partial(&y, config.crop, config.keep_fraction, &mut rng)?;
    let x = add_noise(&x, config.noise_sigma, config.noise_clip, &mut rng)?;
    let y = add_noise(&y, config.noise_sigma, config.noise_clip, &mut rng)?;
    Ok(RegistrationPair {
        source: x,
        reference: y,
        gt,
        sampling_mode: config.sampling,
        crop_manner: config.crop,
        noise_sigma: config.noise_sigma,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub split: Split,
    pub index: usize,
    pub shape_id: String,
    pub shape_index: usize,
    pub seed: u64,
    pub sampling: SamplingMode,
    pub crop: CropManner,
    pub keep_fraction: f64,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub config: DataConfig,
    pub pairs: Vec<PairRecord>,
}

pub fn pair_seed(manifest_seed: u64, split: Split, index: usize) -> u64 {
    derive_seed(&[manifest_seed, 0xA1, split.index(), index as u64])
}

impl DatasetManifest {
    /// Plans the pairs of `splits`; shapes are assigned round-robin.
    pub fn plan<T: Scalar>(config: &DataConfig, seed: u64, splits: &[Split]) -> Result<Self> {
        config.validate()?;
        let mut pairs = Vec::new();
        for &split in splits {
            let count = config.pairs.get(split);
            if count == 0 {
                continue;
            }
            let shapes = load_shapes::<T>(split, config, seed)?;
            for index in 0..count {
                let shape_index = index % shapes.len();
                pairs.push(PairRecord {
                    split,
                    index,
                    shape_id: shapes[shape_index].id.clone(),
                    shape_index,
                    seed: pair_seed(seed, split, index),
                    sampling: config.sampling,
                    crop: config.crop,
                    keep_fraction: config.keep_fraction,
                    noise_sigma: config.noise_sigma,
                });
            }
        }
        Ok(Self {
            version: MANIFEST_VERSION,
            seed,
            config: config.clone(),
            pairs,
        })
    }

    /// Rebuilds every pair of `split` (all splits when `None`), in record order.
    pub fn generate<T: Scalar>(&self, split: Option<Split>) -> Result<Vec<(PairRecord, RegistrationPair<T>)>> {
        let mut out = Vec::new();
        for s in Split::ALL {
            if split.is_some_and(|x| x != s) {
                continue;
            }
            let records: Vec<&PairRecord> = self.pairs.iter().filter(|r| r.split == s).collect();
            if records.is_empty() {
                continue;
            }
            let shapes = load_shapes::<T>(s, &self.config, self.seed)?;
            let built: Vec<_> = records
                .par_iter()
                .map(|r| {
                    let shape = shapes.get(r.shape_index).filter(|sh| sh.id == r.shape_id).ok_or_else(|| {
                        Error::invalid(format!("manifest shape {} not found in source", r.shape_id))
                    })?;
                    let config = DataConfig {
                        sampling: r.sampling,
                        crop: r.crop,
                        keep_fraction: r.keep_fraction,
                        noise_sigma: r.noise_sigma,
                        ..self.config.clone()
                    };
                    Ok(((*r).clone(), make_pair(&shape.cloud, &config, r.seed)?))
                })
                .collect::<Result<_>>()?;
            out.extend::<Vec<_>>(built);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Versioned {
            version: u32,
        }
        let v: Versioned = serde_json::from_str(text)?;
        if v.version != MANIFEST_VERSION {
            return Err(Error::Version {
                expected: MANIFEST_VERSION,
                found: v.version,
            });
        }
        Ok(serde_json::from_str(text)?)
    }
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    fs::write(path, manifest.to_json())?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::from_json(&fs::read_to_string(path)?)
}

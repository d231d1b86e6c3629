//! Synthetic CT-like phantoms with per-voxel labels, and augmentations.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::tensor::Tensor;

pub const AIR_HU: f64 = -1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeSample {
    pub id: String,
    /// `[D, H, W]`.
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub num_classes: usize,
    pub image: Vec<f32>,
    /// `0` background, `1..=num_classes` organs.
    pub labels: Vec<u8>,
}

impl VolumeSample {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clips to `window` and maps it linearly onto `[-1, 1]`.
    pub fn normalized(&self, window: (f64, f64)) -> Tensor<f32> {
        let (lo, hi) = window;
        let data = self
            .image
            .iter()
            .map(|&v| {
                let c = (v as f64).clamp(lo, hi);
                (2.0 * (c - lo) / (hi - lo) - 1.0) as f32
            })
            .collect();
        Tensor::new(self.shape.to_vec(), data).expect("sample shape matches payload")
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes + 1];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Labels at `(2i, 2j, 2k)`: nearest-neighbour downsampling by `factor`.
    pub fn downsampled_labels(&self, factor: usize) -> Vec<u8> {
        let [d, h, w] = self.shape;
        let mut out = Vec::with_capacity(self.len() / factor.pow(3));
        for z in (0..d).step_by(factor) {
            for y in (0..h).step_by(factor) {
                for x in (0..w).step_by(factor) {
                    out.push(self.labels[(z * h + y) * w + x]);
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    /// Axis-aligned ellipsoid.
    Ellipsoid,
    /// Curved tube running the full depth.
    Tube,
    /// Sphere with a lumpy radius.
    Blob,
}

impl FromStr for ShapeFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ellipsoid" => Ok(ShapeFamily::Ellipsoid),
            "tube" => Ok(ShapeFamily::Tube),
            "blob" => Ok(ShapeFamily::Blob),
            _ => Err(format!("unknown shape family '{s}'")),
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeFamily::Ellipsoid => "ellipsoid",
            ShapeFamily::Tube => "tube",
            ShapeFamily::Blob => "blob",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub family: ShapeFamily,
    /// Characteristic radius range in voxels.
    pub size: (f64, f64),
    /// Intensity range in HU.
    pub hu: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub organs: Vec<OrganSpec>,
    pub body_hu: f64,
    pub noise: f64,
    pub window: (f64, f64),
    pub min_voxels: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [64, 64, 64],
            spacing: [1.0; 3],
            organs: vec![
                OrganSpec {
                    family: ShapeFamily::Ellipsoid,
                    size: (12.0, 17.0),
                    hu: (100.0, 140.0),
                },
                OrganSpec {
                    family: ShapeFamily::Tube,
                    size: (3.0, 4.5),
                    hu: (220.0, 280.0),
                },
                OrganSpec {
                    family: ShapeFamily::Blob,
                    size: (4.0, 6.0),
                    hu: (-120.0, -80.0),
                },
            ],
            body_hu: 0.0,
            noise: 20.0,
            window: (-400.0, 400.0),
            min_voxels: 8,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Half-size phantom (32³) for gradient checks and fast tests.
    pub fn micro() -> Self {
        let mut spec = Self {
            shape: [32, 32, 32],
            min_voxels: 4,
            ..Self::default()
        };
        for o in &mut spec.organs {
            o.size = (o.size.0 / 2.0, o.size.1 / 2.0);
        }
        spec
    }

    pub fn num_classes(&self) -> usize {
        self.organs.len()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Error::Config(m);
        if self.shape.iter().any(|&e| e < 8) {
            return Err(bad(format!(
                "shape {:?} too small (min 8 per axis)",
                self.shape
            )));
        }
        if self.organs.is_empty() || self.organs.len() > 254 {
            return Err(bad(format!(
                "need 1..=254 organs, got {}",
                self.organs.len()
            )));
        }
        if !self.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(bad(format!("spacing {:?} must be positive", self.spacing)));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(bad(format!("noise {} must be >= 0", self.noise)));
        }
        if !(self.window.0.is_finite()
            && self.window.1.is_finite()
            && self.window.0 < self.window.1)
        {
            return Err(bad(format!("window {:?} is empty", self.window)));
        }
        for (i, o) in self.organs.iter().enumerate() {
            let ok = o.size.0.is_finite()
                && o.size.1.is_finite()
                && 0.5 <= o.size.0
                && o.size.0 <= o.size.1
                && o.hu.0.is_finite()
                && o.hu.1.is_finite()
                && o.hu.0 <= o.hu.1;
            if !ok {
                return Err(bad(format!("organ {} has invalid ranges {:?}", i + 1, o)));
            }
        }
        Ok(())
    }

    /// Parses the key-value format written by [`PhantomSpec::to_config`].
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut spec = PhantomSpec {
            organs: Vec::new(),
            ..Default::default()
        };
        let mut saw_organ = false;
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::parse(line, "expected 'key = value'"))?;
            let key = key.trim();
            let words: Vec<&str> = value.split_whitespace().collect();
            let nums = |count: usize| -> Result<Vec<f64>, Error> {
                if words.len() != count {
                    return Err(Error::parse(
                        line,
                        format!("'{key}' takes {count} values, got {}", words.len()),
                    ));
                }
                words
                    .iter()
                    .map(|w| {
                        w.parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .ok_or_else(|| {
                                Error::parse(line, format!("'{w}' is not a finite number"))
                            })
                    })
                    .collect()
            };
            let uint = |v: f64| -> Result<usize, Error> {
                if v >= 0.0 && v.fract() == 0.0 && v <= 4096.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::parse(line, format!("'{v}' is not a valid extent")))
                }
            };
            match key {
                "shape" => {
                    let v = nums(3)?;
                    spec.shape = [uint(v[0])?, uint(v[1])?, uint(v[2])?];
                }
                "spacing" => {
                    let v = nums(3)?;
                    spec.spacing = [v[0], v[1], v[2]];
                }
                "body_hu" => spec.body_hu = nums(1)?[0],
                "noise" => spec.noise = nums(1)?[0],
                "window" => {
                    let v = nums(2)?;
                    spec.window = (v[0], v[1]);
                }
                "min_voxels" => spec.min_voxels = uint(nums(1)?[0])?,
                "seed" => {
                    if words.len() != 1 {
                        return Err(Error::parse(line, "'seed' takes 1 value"));
                    }
                    spec.seed = words[0].parse().map_err(|_| {
                        Error::parse(line, format!("'{}' is not an unsigned integer", words[0]))
                    })?;
                }
                "organ" => {
                    if words.len() != 5 {
                        return Err(Error::parse(
                            line,
                            "organ = <family> <size_min> <size_max> <hu_min> <hu_max>",
                        ));
                    }
                    let family = words[0]
                        .parse()
                        .map_err(|e: String| Error::parse(line, e))?;
                    let v: Vec<f64> = words[1..]
                        .iter()
                        .map(|w| {
                            w.parse::<f64>()
                                .ok()
                                .filter(|v| v.is_finite())
                                .ok_or_else(|| {
                                    Error::parse(line, format!("'{w}' is not a finite number"))
                                })
                        })
                        .collect::<Result<_, _>>()?;
                    if !saw_organ {
                        spec.organs.clear();
                        saw_organ = true;
                    }
                    spec.organs.push(OrganSpec {
                        family,
                        size: (v[0], v[1]),
                        hu: (v[2], v[3]),
                    });
                }
                other => return Err(Error::parse(line, format!("unknown key '{other}'"))),
            }
        }
        if !saw_organ {
            spec.organs = PhantomSpec::default().organs;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_config(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "shape = {} {} {}\n",
            self.shape[0], self.shape[1], self.shape[2]
        ));
        s.push_str(&format!(
            "spacing = {} {} {}\n",
            self.spacing[0], self.spacing[1], self.spacing[2]
        ));
        s.push_str(&format!("body_hu = {}\n", self.body_hu));
        s.push_str(&format!("noise = {}\n", self.noise));
        s.push_str(&format!("window = {} {}\n", self.window.0, self.window.1));
        s.push_str(&format!("min_voxels = {}\n", self.min_voxels));
        s.push_str(&format!("seed = {}\n", self.seed));
        for o in &self.organs {
            s.push_str(&format!(
                "organ = {} {} {} {} {}\n",
                o.family, o.size.0, o.size.1, o.hu.0, o.hu.1
            ));
        }
        s
    }
}

/// Geometry of one organ as placed in a phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedOrgan {
    pub class: usize,
    pub family: ShapeFamily,
    /// `(z, y, x)` centre in voxels.
    pub center: [f64; 3],
    /// Semi-axes for ellipsoids; `[r, r, r]` otherwise.
    pub radii: [f64; 3],
    /// Tube lateral sway amplitude and phase; blob harmonic amplitude and phase.
    pub wobble: (f64, f64),
    pub hu: f64,
}

impl PlacedOrgan {
    pub fn contains(&self, z: f64, y: f64, x: f64, depth: f64) -> bool {
        let [cz, cy, cx] = self.center;
        match self.family {
            ShapeFamily::Ellipsoid => {
                let a = (z - cz) / self.radii[0];
                let b = (y - cy) / self.radii[1];
                let c = (x - cx) / self.radii[2];
                a * a + b * b + c * c <= 1.0
            }
            ShapeFamily::Tube => {
                let (amp, phase) = self.wobble;
                let px = cx + amp * (2.0 * PI * z / depth + phase).sin();
                let dy = y - cy;
                let dx = x - px;
                dy * dy + dx * dx <= self.radii[0] * self.radii[0]
            }
            ShapeFamily::Blob => {
                let (amp, phase) = self.wobble;
                let (dz, dy, dx) = (z - cz, y - cy, x - cx);
                let r = (dz * dz + dy * dy + dx * dx).sqrt();
                let theta = dy.atan2(dx);
                let limit = self.radii[0]
                    * (1.0
                        + amp
                            * (3.0 * theta + phase).sin()
                            * (2.0 * dz / self.radii[0].max(1.0)).cos());
                r <= limit
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

fn body_contains(shape: [usize; 3], y: f64, x: f64) -> bool {
    let (h, w) = (shape[1] as f64, shape[2] as f64);
    let a = (y - h / 2.0) / (0.42 * h);
    let b = (x - w / 2.0) / (0.46 * w);
    a * a + b * b <= 1.0
}

fn place(spec: &PhantomSpec, class: usize, organ: &OrganSpec, rng: &mut ChaCha8Rng) -> PlacedOrgan {
    let [d, h, w] = spec.shape.map(|e| e as f64);
    let size = uniform(rng, organ.size);
    let hu = uniform(rng, organ.hu);
    match organ.family {
        ShapeFamily::Ellipsoid => {
            let radii = [
                size * rng.random_range(0.8..1.1),
                size * rng.random_range(0.75..1.0),
                size * rng.random_range(0.9..1.2),
            ];
            let center = [
                d / 2.0 + rng.random_range(-0.08..0.08) * d,
                h * 0.45 + rng.random_range(-0.06..0.06) * h,
                w * 0.38 + rng.random_range(-0.06..0.06) * w,
            ];
            PlacedOrgan {
                class,
                family: organ.family,
                center,
                radii,
                wobble: (0.0, 0.0),
                hu,
            }
        }
        ShapeFamily::Tube => PlacedOrgan {
            class,
            family: organ.family,
            center: [
                d / 2.0,
                h * 0.72 + rng.random_range(-0.04..0.04) * h,
                w * 0.55 + rng.random_range(-0.05..0.05) * w,
            ],
            radii: [size; 3],
            wobble: (
                rng.random_range(0.0..0.08) * w,
                rng.random_range(0.0..2.0 * PI),
            ),
            hu,
        },
        ShapeFamily::Blob => PlacedOrgan {
            class,
            family: organ.family,
            center: [
                rng.random_range(0.3..0.7) * d,
                rng.random_range(0.3..0.5) * h,
                rng.random_range(0.62..0.75) * w,
            ],
            radii: [size; 3],
            wobble: (rng.random_range(0.0..0.25), rng.random_range(0.0..2.0 * PI)),
            hu,
        },
    }
}

/// Deterministic phantom plus the geometry that produced it.
pub fn generate_with_layout(spec: &PhantomSpec) -> Result<(VolumeSample, Vec<PlacedOrgan>), Error> {
    spec.validate()?;
    let [d, h, w] = spec.shape;
    let n = d * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    const ATTEMPTS: usize = 32;
    for _ in 0..ATTEMPTS {
        let organs: Vec<PlacedOrgan> = spec
            .organs
            .iter()
            .enumerate()
            .map(|(i, o)| place(spec, i + 1, o, &mut rng))
            .collect();
        let mut labels = vec![0u8; n];
        let mut image = vec![0f64; n];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    let (fz, fy, fx) = (z as f64, y as f64, x as f64);
                    image[i] = if body_contains(spec.shape, fy, fx) {
                        spec.body_hu
                    } else {
                        AIR_HU
                    };
                    for o in &organs {
                        if o.contains(fz, fy, fx, d as f64) {
                            labels[i] = o.class as u8;
                            image[i] = o.hu;
                        }
                    }
                }
            }
        }
        let mut counts = vec![0usize; organs.len() + 1];
        for &l in &labels {
            counts[l as usize] += 1;
        }
        if counts[1..].iter().any(|&c| c < spec.min_voxels.max(1)) {
            continue;
        }
        let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
        let image = image
            .into_iter()
            .map(|v| (v + noise.sample(&mut rng)) as f32)
            .collect();
        let sample = VolumeSample {
            id: format!("phantom-{}", spec.seed),
            shape: spec.shape,
            spacing: spec.spacing,
            num_classes: organs.len(),
            image,
            labels,
        };
        return Ok((sample, organs));
    }
    Err(Error::Placement(format!(
        "could not place {} organs with >= {} voxels each after {ATTEMPTS} attempts",
        spec.organs.len(),
        spec.min_voxels
    )))
}

pub fn generate(spec: &PhantomSpec) -> Result<VolumeSample, Error> {
    generate_with_layout(spec).map(|(s, _)| s)
}

/// `count` phantoms with seeds `seed, seed + 1, ...`.
pub fn generate_dataset(spec: &PhantomSpec, count: usize) -> Result<Vec<VolumeSample>, Error> {
    (0..count as u64)
        .map(|i| generate(&spec.clone().with_seed(spec.seed.wrapping_add(i))))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub elastic_spacing: f64,
    pub elastic_magnitude: f64,
    pub jitter_sigma: f64,
    pub jitter_shift: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            elastic_spacing: 32.0,
            elastic_magnitude: 1.5,
            jitter_sigma: 10.0,
            jitter_shift: 2,
        }
    }
}

fn trilinear(data: &[f64], shape: [usize; 3], p: [f64; 3]) -> f64 {
    let mut idx = [[0usize; 2]; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let max = (shape[a] - 1) as f64;
        let c = p[a].clamp(0.0, max);
        let lo = c.floor();
        idx[a] = [lo as usize, (lo as usize + 1).min(shape[a] - 1)];
        frac[a] = c - lo;
    }
    let [_, h, w] = shape;
    let mut acc = 0.0;
    for (iz, wz) in [(0, 1.0 - frac[0]), (1, frac[0])] {
        for (iy, wy) in [(0, 1.0 - frac[1]), (1, frac[1])] {
            for (ix, wx) in [(0, 1.0 - frac[2]), (1, frac[2])] {
                let weight = wz * wy * wx;
                if weight != 0.0 {
                    acc += weight * data[(idx[0][iz] * h + idx[1][iy]) * w + idx[2][ix]];
                }
            }
        }
    }
    acc
}

/// Smooth random warp: per-axis normal offsets on a coarse grid, upsampled
/// trilinearly. Image resampled linearly, labels by nearest neighbour.
pub fn elastic_transform(
    sample: &VolumeSample,
    grid_spacing: f64,
    magnitude: f64,
    seed: u64,
) -> VolumeSample {
    if magnitude == 0.0 {
        return sample.clone();
    }
    let shape = sample.shape;
    let [d, h, w] = shape;
    let spacing = grid_spacing.max(1.0);
    let coarse = shape.map(|e| ((e - 1) as f64 / spacing).ceil() as usize + 1);
    let cn: usize = coarse.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, magnitude.abs()).expect("finite magnitude");
    let fields: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..cn).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let image: Vec<f64> = sample.image.iter().map(|&v| v as f64).collect();
    let mut out_image = Vec::with_capacity(sample.len());
    let mut out_labels = Vec::with_capacity(sample.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let g = [z as f64 / spacing, y as f64 / spacing, x as f64 / spacing];
                let u = [
                    trilinear(&fields[0], coarse, g),
                    trilinear(&fields[1], coarse, g),
                    trilinear(&fields[2], coarse, g),
                ];
                let p = [z as f64 + u[0], y as f64 + u[1], x as f64 + u[2]];
                out_image.push(trilinear(&image, shape, p) as f32);
                let q = [
                    p[0].round().clamp(0.0, (d - 1) as f64) as usize,
                    p[1].round().clamp(0.0, (h - 1) as f64) as usize,
                    p[2].round().clamp(0.0, (w - 1) as f64) as usize,
                ];
                out_labels.push(sample.labels[(q[0] * h + q[1]) * w + q[2]]);
            }
        }
    }
    VolumeSample {
        image: out_image,
        labels: out_labels,
        ..sample.clone()
    }
}

/// Additive Gaussian intensity noise plus an integer translation by `shift`
/// `(dz, dy, dx)`. Vacated voxels become air / background.
pub fn jitter(
    sample: &VolumeSample,
    intensity_sigma: f64,
    shift: [i32; 3],
    seed: u64,
) -> VolumeSample {
    let [d, h, w] = sample.shape;
    let mut image = vec![AIR_HU as f32; sample.len()];
    let mut labels = vec![0u8; sample.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let src = [
                    z as i64 - shift[0] as i64,
                    y as i64 - shift[1] as i64,
                    x as i64 - shift[2] as i64,
                ];
                if src[0] < 0
                    || src[1] < 0
                    || src[2] < 0
                    || src[0] >= d as i64
                    || src[1] >= h as i64
                    || src[2] >= w as i64
                {
                    continue;
                }
                let s = ((src[0] as usize) * h + src[1] as usize) * w + src[2] as usize;
                let i = (z * h + y) * w + x;
                image[i] = sample.image[s];
                labels[i] = sample.labels[s];
            }
        }
    }
    if intensity_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, intensity_sigma).expect("finite sigma");
        for v in &mut image {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    VolumeSample {
        image,
        labels,
        ..sample.clone()
    }
}

/// Elastic warp followed by jitter with a random shift, all drawn from `seed`.
pub fn augment(sample: &VolumeSample, cfg: &AugmentConfig, seed: u64) -> VolumeSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let warp_seed = rng.random();
    let jitter_seed = rng.random();
    let s = cfg.jitter_shift as i32;
    let shift = [
        rng.random_range(-s..=s),
        rng.random_range(-s..=s),
        rng.random_range(-s..=s),
    ];
    let warped = elastic_transform(
        sample,
        cfg.elastic_spacing,
        cfg.elastic_magnitude,
        warp_seed,
    );
    jitter(&warped, cfg.jitter_sigma, shift, jitter_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips() {
        let spec = PhantomSpec::default().with_seed(42);
        assert_eq!(PhantomSpec::parse(&spec.to_config()).unwrap(), spec);
    }

    #[test]
    fn parse_reports_line_numbers() {
        let err = PhantomSpec::parse("shape = 64 64 64\nnoise = abc\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(PhantomSpec::parse("organ = cube 1 2 3 4").is_err());
        assert!(PhantomSpec::parse("color = red").is_err());
    }

    #[test]
    fn default_phantom_has_every_class() {
        let s = generate(&PhantomSpec::default().with_seed(3)).unwrap();
        assert!(s.class_counts()[1..].iter().all(|&c| c > 0));
        assert!(s.image.iter().all(|v| v.is_finite()));
    }
}

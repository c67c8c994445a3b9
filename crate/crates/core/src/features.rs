//! Backbone feature maps, bilinear keypoint sampling and the global token.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::geometry::KeypointSet;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const GLOBAL_PROJ_PARAM: &str = "backbone.global_proj";
pub const FEATURE_MAGIC: &[u8; 4] = b"NMTF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerTag {
    Last,
    SecondLast,
}

/// An `H × W × c` grid; cell `(r, q)` covers image pixels
/// `[q·stride, (q+1)·stride) × [r·stride, (r+1)·stride)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stride: f64,
    pub tag: LayerTag,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, stride: f64, tag: LayerTag, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("feature map needs H, W ≥ 1"));
        }
        if !(stride > 0.0) || !stride.is_finite() {
            return Err(Error::config(format!("stride must be positive, got {stride}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "feature map {height}×{width}×{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            stride,
            tag,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, stride: f64, tag: LayerTag) -> Result<Self> {
        Self::new(height, width, channels, stride, tag, vec![0.0; height * width * channels])
    }

    pub fn cell(&self, r: usize, q: usize) -> &[f64] {
        let o = (r * self.width + q) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn cell_mut(&mut self, r: usize, q: usize) -> &mut [f64] {
        let o = (r * self.width + q) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Image extent `(width, height)` in pixels.
    pub fn image_size(&self) -> (f64, f64) {
        (self.width as f64 * self.stride, self.height as f64 * self.stride)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.channels];
        for cell in self.data.chunks(self.channels.max(1)) {
            acc.iter_mut().zip(cell).for_each(|(a, v)| *a += v);
        }
        let n = (self.height * self.width) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Counts samples and how many fell outside the image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleDiagnostics {
    pub samples: usize,
    pub clamped: usize,
}

/// Bilinear read at `point = [x, y]` in image pixels.
///
/// Grid coordinates are `point / stride − 0.5`, so cell centers are exact.
/// Coordinates are clamped to the grid; points outside the image are counted.
pub fn bilinear_sample(map: &FeatureMap, point: [f64; 2], diag: &mut SampleDiagnostics) -> Vec<f64> {
    let (iw, ih) = map.image_size();
    diag.samples += 1;
    if !(0.0..=iw).contains(&point[0]) || !(0.0..=ih).contains(&point[1]) {
        diag.clamped += 1;
    }
    let gx = (point[0] / map.stride - 0.5).clamp(0.0, (map.width - 1) as f64);
    let gy = (point[1] / map.stride - 0.5).clamp(0.0, (map.height - 1) as f64);
    let (q0, r0) = (gx.floor() as usize, gy.floor() as usize);
    let (q1, r1) = ((q0 + 1).min(map.width - 1), (r0 + 1).min(map.height - 1));
    let (tx, ty) = (gx - q0 as f64, gy - r0 as f64);
    let mut out = vec![0.0; map.channels];
    for (r, q, w) in [
        (r0, q0, (1.0 - tx) * (1.0 - ty)),
        (r0, q1, tx * (1.0 - ty)),
        (r1, q0, (1.0 - tx) * ty),
        (r1, q1, tx * ty),
    ] {
        if w != 0.0 {
            out.iter_mut().zip(map.cell(r, q)).for_each(|(o, v)| *o += w * v);
        }
    }
    out
}

/// Last and second-last layer maps of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput {
    pub last: FeatureMap,
    pub second_last: FeatureMap,
}

impl BackboneOutput {
    pub fn new(last: FeatureMap, second_last: FeatureMap) -> Result<Self> {
        if last.tag != LayerTag::Last || second_last.tag != LayerTag::SecondLast {
            return Err(Error::config("backbone maps carry the wrong layer tags"));
        }
        Ok(Self { last, second_last })
    }

    pub fn width(&self) -> usize {
        self.last.channels + self.second_last.channels
    }

    /// Spatial mean of both maps, last layer first.
    pub fn pooled_mean(&self) -> Vec<f64> {
        let mut v = self.last.mean();
        v.extend(self.second_last.mean());
        v
    }
}

/// One row per keypoint: last-layer sample then second-last-layer sample.
pub fn extract_keypoint_features(
    out: &BackboneOutput,
    keypoints: &KeypointSet,
    input_dim: usize,
    diag: &mut SampleDiagnostics,
) -> Result<Tensor> {
    if out.width() != input_dim {
        return Err(Error::config(format!(
            "backbone width {} + {} does not match input dimension {input_dim}",
            out.last.channels, out.second_last.channels
        )));
    }
    let mut data = Vec::with_capacity(keypoints.len() * input_dim);
    for &p in &keypoints.coords {
        data.extend(bilinear_sample(&out.last, p, diag));
        data.extend(bilinear_sample(&out.second_last, p, diag));
    }
    Tensor::matrix(keypoints.len(), input_dim, data)
}

/// Scale of the initial global projection. The token is normalized, so this
/// only sets how far each optimizer step turns it.
pub const GLOBAL_PROJ_INIT_SCALE: f64 = 1e-4;

pub fn register_global_projection(store: &mut ParameterStore, input_dim: usize, d_model: usize, rng: &mut impl rand::Rng) -> Result<()> {
    let bound = GLOBAL_PROJ_INIT_SCALE / (input_dim as f64).sqrt();
    let v = (0..input_dim * d_model).map(|_| rng.random_range(-bound..bound)).collect();
    store.insert(GLOBAL_PROJ_PARAM, Tensor::matrix(input_dim, d_model, v)?, true)?;
    Ok(())
}

/// `Norm(pooled · P)` as a `1 × d_model` node.
pub fn global_token(tape: &mut Tape<'_>, pooled: &[f64]) -> Result<NodeId> {
    let proj = tape.param(GLOBAL_PROJ_PARAM)?;
    let rows = tape.value(proj).rows();
    if rows != pooled.len() {
        return Err(Error::shape(format!(
            "pooled feature has width {}, projection expects {rows}",
            pooled.len()
        )));
    }
    let x = tape.constant(Tensor::row_vector(pooled.to_vec())?);
    let y = tape.matmul(x, proj);
    Ok(tape.normalize_rows(y))
}

/// What a backbone is asked to look at.
#[derive(Clone, Debug)]
pub enum ImageSource<'a> {
    /// Latent per keypoint, rendered by a synthetic backbone.
    Latents {
        latents: &'a Tensor,
        keypoints: &'a KeypointSet,
        seed: u64,
    },
    /// Precomputed maps in the binary feature format.
    FeatureFile(&'a Path),
}

/// The only stage that sees images. Everything downstream consumes
/// [`BackboneOutput`].
pub trait Backbone: Sync {
    fn forward(&self, source: &ImageSource<'_>) -> Result<BackboneOutput>;
}

/// Renders latents as Gaussian splats on a square grid over the unit image.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBackbone {
    pub grid: usize,
    pub c_last: usize,
    pub c_second: usize,
    /// Splat standard deviation in image units.
    pub sigma: f64,
    pub noise_level: f64,
}

impl SyntheticBackbone {
    pub fn new(grid: usize, c_last: usize, c_second: usize, sigma: f64, noise_level: f64) -> Result<Self> {
        if grid == 0 {
            return Err(Error::config("synthetic backbone grid must be positive"));
        }
        if !(sigma > 0.0) || !(noise_level >= 0.0) {
            return Err(Error::config("synthetic backbone needs sigma > 0 and noise_level ≥ 0"));
        }
        Ok(Self {
            grid,
            c_last,
            c_second,
            sigma,
            noise_level,
        })
    }

    pub fn stride(&self) -> f64 {
        1.0 / self.grid as f64
    }

    /// Latent columns `[0, c_last)` go to the last map, the rest to the second-last.
    pub fn render(&self, latents: &Tensor, keypoints: &KeypointSet, seed: u64) -> Result<BackboneOutput> {
        let width = self.c_last + self.c_second;
        if latents.cols() != width || latents.rows() != keypoints.len() {
            return Err(Error::shape(format!(
                "expected {} latents of width {width}, got {:?}",
                keypoints.len(),
                latents.shape()
            )));
        }
        let (g, s) = (self.grid, self.stride());
        let mut last = FeatureMap::zeros(g, g, self.c_last, s, LayerTag::Last)?;
        let mut second = FeatureMap::zeros(g, g, self.c_second, s, LayerTag::SecondLast)?;
        let reach = (3.0 * self.sigma / s).ceil() as isize;
        let inv_two_var = 1.0 / (2.0 * self.sigma * self.sigma);
        for (k, &[x, y]) in keypoints.coords.iter().enumerate() {
            let latent = latents.row(k);
            let (cq, cr) = ((x / s - 0.5).round() as isize, (y / s - 0.5).round() as isize);
            for r in (cr - reach).max(0)..=(cr + reach).min(g as isize - 1) {
                for q in (cq - reach).max(0)..=(cq + reach).min(g as isize - 1) {
                    let (px, py) = ((q as f64 + 0.5) * s, (r as f64 + 0.5) * s);
                    let w = (-((px - x).powi(2) + (py - y).powi(2)) * inv_two_var).exp();
                    let (r, q) = (r as usize, q as usize);
                    last.cell_mut(r, q)
                        .iter_mut()
                        .zip(&latent[..self.c_last])
                        .for_each(|(c, v)| *c += w * v);
                    second
                        .cell_mut(r, q)
                        .iter_mut()
                        .zip(&latent[self.c_last..])
                        .for_each(|(c, v)| *c += w * v);
                }
            }
        }
        if self.noise_level > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for map in [&mut last, &mut second] {
                for v in map.data.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += self.noise_level * z;
                }
            }
        }
        BackboneOutput::new(last, second)
    }
}

impl Backbone for SyntheticBackbone {
    fn forward(&self, source: &ImageSource<'_>) -> Result<BackboneOutput> {
        match source {
            ImageSource::Latents {
                latents,
                keypoints,
                seed,
            } => self.render(latents, keypoints, *seed),
            ImageSource::FeatureFile(path) => read_feature_file(path),
        }
    }
}

/// Reads precomputed maps from disk; latent sources are rejected.
#[derive(Clone, Debug, Default)]
pub struct PrecomputedBackbone {
    pub root: Option<PathBuf>,
}

impl Backbone for PrecomputedBackbone {
    fn forward(&self, source: &ImageSource<'_>) -> Result<BackboneOutput> {
        match source {
            ImageSource::FeatureFile(p) => match &self.root {
                Some(root) if p.is_relative() => read_feature_file(&root.join(p)),
                _ => read_feature_file(p),
            },
            ImageSource::Latents { .. } => Err(Error::config("precomputed backbone cannot render latents")),
        }
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

/// Writes both maps; they must share height, width and stride.
pub fn write_feature_file(path: &Path, out: &BackboneOutput) -> Result<()> {
    let (a, b) = (&out.last, &out.second_last);
    if a.height != b.height || a.width != b.width || a.stride != b.stride {
        return Err(Error::Format("feature file maps must share grid and stride".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    for v in [FEATURE_VERSION, a.height as u32, a.width as u32, a.channels as u32, b.channels as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(a.stride as f32).to_le_bytes())?;
    for v in a.data.iter().chain(&b.data) {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<BackboneOutput> {
    let ctx = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| ctx("truncated header"))?;
    if &magic != FEATURE_MAGIC {
        return Err(ctx("bad magic"));
    }
    let version = read_u32(&mut r).map_err(|_| ctx("truncated header"))?;
    if version != FEATURE_VERSION {
        return Err(ctx(&format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = read_u32(&mut r).map_err(|_| ctx("truncated header"))? as usize;
    }
    let [h, w, c_last, c_second] = dims;
    let stride = read_f32(&mut r).map_err(|_| ctx("truncated header"))? as f64;
    let mut grid = |c: usize| -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; h * w * c * 4];
        r.read_exact(&mut bytes).map_err(|_| ctx("truncated grid data"))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect())
    };
    let last = grid(c_last)?;
    let second = grid(c_second)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(ctx("trailing bytes"));
    }
    BackboneOutput::new(
        FeatureMap::new(h, w, c_last, stride, LayerTag::Last, last)?,
        FeatureMap::new(h, w, c_second, stride, LayerTag::SecondLast, second)?,
    )
}

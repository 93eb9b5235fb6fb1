//! Images, patch grids and the contour-extraction pipeline.
//!
//! Contour extraction runs a fixed stack of nine 3×3 convolutions (eight
//! residual 3→3 layers, one zero-sum 3→1 edge layer), a 3×3 stride-1 max
//! pool, mean-threshold binarization and an exact Euclidean distance
//! transform. Every stage preserves the input resolution so the resulting
//! contour map aligns pixel-for-pixel with the source image patches.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// H×W×C image stored row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image contains non-finite values".into()));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Loads an 8-bit PNG (or any format the `image` crate decodes) as RGB in [0,1].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let rgb = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Image::new(h as usize, w as usize, 3, data)
    }

    /// Quantizes to 8 bits (clamp, round) and writes a PNG. One-channel
    /// images are written as grayscale, three-channel images as RGB.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => {
                return Err(Error::Shape(format!(
                    "can only save 1- or 3-channel images, got {c}"
                )))
            }
        };
        image::save_buffer(path, &bytes, w, h, color).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Real-valued single-channel map.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ScalarMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} map needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("map contains non-finite values".into()));
        }
        Ok(ScalarMap {
            height,
            width,
            values,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Background/target partition of a map. `true` marks a target pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    pub height: usize,
    pub width: usize,
    pub target: Vec<bool>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, target: Vec<bool>) -> Result<Self> {
        if target.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} binary map needs {} values, got {}",
                height * width,
                target.len()
            )));
        }
        Ok(BinaryMap {
            height,
            width,
            target,
        })
    }

    #[inline]
    pub fn is_target(&self, y: usize, x: usize) -> bool {
        self.target[y * self.width + x]
    }

    pub fn target_count(&self) -> usize {
        self.target.iter().filter(|&&t| t).count()
    }

    pub fn background_count(&self) -> usize {
        self.target.len() - self.target_count()
    }

    /// Target pixels with no target pixel among their 8 neighbours.
    pub fn is_isolated(&self, y: usize, x: usize) -> bool {
        if !self.is_target(y, x) {
            return false;
        }
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dy == 0 && dx == 0 {
                    continue;
                }
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= self.height as i64 || nx >= self.width as i64 {
                    continue;
                }
                if self.is_target(ny as usize, nx as usize) {
                    return false;
                }
            }
        }
        true
    }
}

/// Distance-transformed contour image: zero on background, Euclidean
/// distance to the nearest background pixel elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct ContourMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ContourMap {
    pub fn uniform(height: usize, width: usize, value: f64) -> Self {
        ContourMap {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Row-major sequence of P×P×C patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub patches: Vec<Vec<f64>>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

pub(crate) fn check_divisible(height: usize, width: usize, patch: usize) -> Result<()> {
    if patch == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    if height % patch != 0 {
        return Err(Error::NotDivisible {
            dim: "height",
            size: height,
            patch,
        });
    }
    if width % patch != 0 {
        return Err(Error::NotDivisible {
            dim: "width",
            size: width,
            patch,
        });
    }
    Ok(())
}

/// Splits `img` into non-overlapping P×P patches. Each patch is flattened
/// in (row, column, channel) order.
pub fn to_patches(img: &Image, patch_size: usize) -> Result<PatchGrid> {
    check_divisible(img.height, img.width, patch_size)?;
    let (rows, cols, c) = (img.height / patch_size, img.width / patch_size, img.channels);
    let row_len = patch_size * c;
    let mut patches = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        for pc in 0..cols {
            let mut patch = Vec::with_capacity(patch_size * row_len);
            for dy in 0..patch_size {
                let start = ((pr * patch_size + dy) * img.width + pc * patch_size) * c;
                patch.extend_from_slice(&img.data[start..start + row_len]);
            }
            patches.push(patch);
        }
    }
    Ok(PatchGrid {
        patch_size,
        rows,
        cols,
        channels: c,
        patches,
    })
}

/// Inverse of [`to_patches`].
pub fn from_patches(grid: &PatchGrid) -> Result<Image> {
    let p = grid.patch_size;
    if grid.patches.len() != grid.rows * grid.cols {
        return Err(Error::Shape(format!(
            "{}x{} grid needs {} patches, got {}",
            grid.rows,
            grid.cols,
            grid.rows * grid.cols,
            grid.patches.len()
        )));
    }
    if let Some(bad) = grid.patches.iter().position(|q| q.len() != grid.patch_dim()) {
        return Err(Error::Shape(format!(
            "patch {bad} has {} values, expected {}",
            grid.patches[bad].len(),
            grid.patch_dim()
        )));
    }
    let (h, w, c) = (grid.rows * p, grid.cols * p, grid.channels);
    let mut img = Image::zeros(h, w, c);
    let row_len = p * c;
    for (k, patch) in grid.patches.iter().enumerate() {
        let (pr, pc) = (k / grid.cols, k % grid.cols);
        for dy in 0..p {
            let start = ((pr * p + dy) * w + pc * p) * c;
            img.data[start..start + row_len].copy_from_slice(&patch[dy * row_len..(dy + 1) * row_len]);
        }
    }
    Ok(img)
}

/// Fixed (non-trainable) weights of the contour convolution stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourStackParams {
    /// Eight 3→3 kernels, each laid out `[out][in][ky][kx]` (81 values).
    pub hidden: Vec<Vec<f64>>,
    /// Final 3×3 zero-sum kernel, applied to every input channel and summed.
    pub edge: [f64; 9],
    /// Residual identity connection per layer (layer 9 changes channel count).
    pub residual: [bool; 9],
    pub pool_window: usize,
    pub seed: u64,
}

pub const HIDDEN_LAYERS: usize = 8;
const HIDDEN_SCALE: f64 = 0.05;

impl ContourStackParams {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = crate::seed::rng(seed, "contour-stack", &[]);
        let normal = Normal::new(0.0, HIDDEN_SCALE).expect("valid normal");
        let hidden = (0..HIDDEN_LAYERS)
            .map(|_| (0..81).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let mut residual = [true; 9];
        residual[8] = false;
        ContourStackParams {
            hidden,
            edge: [1.0, 1.0, 1.0, 1.0, -8.0, 1.0, 1.0, 1.0, 1.0],
            residual,
            pool_window: 3,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.hidden.len() != HIDDEN_LAYERS || self.hidden.iter().any(|k| k.len() != 81) {
            return Err(Error::InvalidArgument(
                "contour stack needs eight 3x3x3x3 kernels".into(),
            ));
        }
        if self.edge.iter().sum::<f64>().abs() > 1e-12 {
            return Err(Error::InvalidArgument("edge kernel must sum to zero".into()));
        }
        if self.pool_window == 0 || self.pool_window % 2 == 0 {
            return Err(Error::InvalidArgument("pool window must be odd".into()));
        }
        Ok(())
    }
}

#[inline]
fn clamp_index(v: i64, n: usize) -> usize {
    v.clamp(0, n as i64 - 1) as usize
}

/// 3×3 stride-1 convolution with replicate padding over planar channels.
fn conv3x3(input: &[Vec<f64>], h: usize, w: usize, kernel: &[f64], out_ch: usize) -> Vec<Vec<f64>> {
    let in_ch = input.len();
    let mut out = vec![vec![0.0; h * w]; out_ch];
    for (o, plane) in out.iter_mut().enumerate() {
        for (i, src) in input.iter().enumerate() {
            let k = &kernel[(o * in_ch + i) * 9..(o * in_ch + i + 1) * 9];
            for y in 0..h {
                let rows = [
                    clamp_index(y as i64 - 1, h),
                    y,
                    clamp_index(y as i64 + 1, h),
                ];
                for x in 0..w {
                    let cols = [
                        clamp_index(x as i64 - 1, w),
                        x,
                        clamp_index(x as i64 + 1, w),
                    ];
                    let mut acc = 0.0;
                    for (ky, &ry) in rows.iter().enumerate() {
                        for (kx, &cx) in cols.iter().enumerate() {
                            acc += k[ky * 3 + kx] * src[ry * w + cx];
                        }
                    }
                    plane[y * w + x] += acc;
                }
            }
        }
    }
    out
}

fn max_pool_same(values: &[f64], h: usize, w: usize, window: usize) -> Vec<f64> {
    let r = (window / 2) as i64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut m = f64::NEG_INFINITY;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    m = m.max(values[ny as usize * w + nx as usize]);
                }
            }
            out[y * w + x] = m;
        }
    }
    out
}

/// Runs the fixed convolution stack and max pool over a 3-channel image.
/// The result is the edge-response magnitude at full resolution.
pub fn contour_response(img: &Image, params: &ContourStackParams) -> Result<ScalarMap> {
    if img.channels != 3 {
        return Err(Error::Shape(format!(
            "contour stack expects 3 channels, got {}",
            img.channels
        )));
    }
    params.validate()?;
    let (h, w) = (img.height, img.width);
    let mut planes: Vec<Vec<f64>> = (0..3)
        .map(|c| (0..h * w).map(|i| img.data[i * 3 + c]).collect())
        .collect();
    for (layer, kernel) in params.hidden.iter().enumerate() {
        let out = conv3x3(&planes, h, w, kernel, 3);
        if params.residual[layer] {
            for (p, o) in planes.iter_mut().zip(out) {
                for (a, b) in p.iter_mut().zip(o) {
                    *a += b;
                }
            }
        } else {
            planes = out;
        }
    }
    let edge_kernel: Vec<f64> = (0..3).flat_map(|_| params.edge).collect();
    let edge = conv3x3(&planes, h, w, &edge_kernel, 1).remove(0);
    let magnitude: Vec<f64> = edge.iter().map(|v| v.abs()).collect();
    let pooled = max_pool_same(&magnitude, h, w, params.pool_window);
    ScalarMap::new(h, w, pooled)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// θ = mean of the map.
    Mean,
    /// θ fixed.
    Fixed(f64),
}

/// Background is every pixel with value ≤ θ. Returns
/// [`Error::DegenerateMap`] when either side of the partition is empty.
pub fn binarize(map: &ScalarMap, policy: ThresholdPolicy) -> Result<BinaryMap> {
    let theta = match policy {
        ThresholdPolicy::Mean => map.values.iter().sum::<f64>() / map.values.len() as f64,
        ThresholdPolicy::Fixed(t) => t,
    };
    let target: Vec<bool> = map.values.iter().map(|&v| v > theta).collect();
    let bin = BinaryMap::new(map.height, map.width, target)?;
    if bin.target_count() == 0 {
        return Err(Error::DegenerateMap("no pixel exceeds the threshold"));
    }
    if bin.background_count() == 0 {
        return Err(Error::DegenerateMap("every pixel exceeds the threshold"));
    }
    Ok(bin)
}

/// Squared distance transform of one line. `f[i]` is `None` for sites that
/// carry no parabola. Exact for integer inputs.
fn edt_1d(f: &[Option<i64>], out: &mut [Option<i64>], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let value = |q: usize| f[q].expect("site in envelope") as f64 + (q * q) as f64;
    for q in 0..f.len() {
        if f[q].is_none() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&top) => {
                    let s = (value(q) - value(top)) / (2.0 * (q as f64 - top as f64));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = None);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        let d = p as i64 - q as i64;
        *o = Some(f[q].unwrap() + d * d);
    }
}

/// Exact Euclidean distance transform: each target pixel gets the distance
/// to the nearest background pixel, background pixels get 0.
///
/// Separable lower-envelope algorithm over integer squared distances, so the
/// output equals `sqrt(dx² + dy²)` of the true nearest background pixel.
pub fn distance_transform(bin: &BinaryMap) -> Result<ContourMap> {
    let (h, w) = (bin.height, bin.width);
    if bin.target_count() == 0 {
        return Ok(ContourMap::uniform(h, w, 0.0));
    }
    if bin.background_count() == 0 {
        return Err(Error::DegenerateMap("background set is empty"));
    }
    let mut cols: Vec<Option<i64>> = vec![None; h * w];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut line = vec![None; h];
    let mut out = vec![None; h];
    for x in 0..w {
        for y in 0..h {
            line[y] = (!bin.is_target(y, x)).then_some(0);
        }
        edt_1d(&line, &mut out, &mut v, &mut z);
        for y in 0..h {
            cols[y * w + x] = out[y];
        }
    }
    let mut values = vec![0.0; h * w];
    let mut out = vec![None; w];
    for y in 0..h {
        edt_1d(&cols[y * w..(y + 1) * w], &mut out, &mut v, &mut z);
        for x in 0..w {
            let sq = out[x].expect("background is non-empty");
            values[y * w + x] = (sq as f64).sqrt();
        }
    }
    Ok(ContourMap {
        height: h,
        width: w,
        values,
    })
}

/// Settings for [`ContourExtractor`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContourConfig {
    pub stack_seed: u64,
    pub threshold: ThresholdPolicy,
    /// Keep the raw response value on isolated target pixels instead of
    /// their distance to the background.
    pub isolated_keep_value: bool,
}

impl Default for ContourConfig {
    fn default() -> Self {
        ContourConfig {
            stack_seed: 0,
            threshold: ThresholdPolicy::Mean,
            isolated_keep_value: false,
        }
    }
}

/// Overwrites isolated target pixels with their raw response value.
pub fn keep_isolated_values(contour: &mut ContourMap, bin: &BinaryMap, response: &ScalarMap) {
    for y in 0..bin.height {
        for x in 0..bin.width {
            if bin.is_isolated(y, x) {
                contour.values[y * bin.width + x] = response.get(y, x);
            }
        }
    }
}

/// Convolution stack → max pool → binarize → distance transform.
#[derive(Clone, Debug)]
pub struct ContourExtractor {
    params: ContourStackParams,
    config: ContourConfig,
}

impl ContourExtractor {
    pub fn new(config: ContourConfig) -> Self {
        ContourExtractor {
            params: ContourStackParams::from_seed(config.stack_seed),
            config,
        }
    }

    pub fn params(&self) -> &ContourStackParams {
        &self.params
    }

    pub fn config(&self) -> &ContourConfig {
        &self.config
    }

    /// Full contour map. Degenerate responses surface as
    /// [`Error::DegenerateMap`]; callers fall back to uniform patch scores.
    pub fn extract(&self, img: &Image) -> Result<ContourMap> {
        let response = contour_response(img, &self.params)?;
        let bin = binarize(&response, self.config.threshold)?;
        let mut contour = distance_transform(&bin)?;
        if self.config.isolated_keep_value {
            keep_isolated_values(&mut contour, &bin, &response);
        }
        Ok(contour)
    }

    /// Like [`extract`](Self::extract) but maps a degenerate response to a
    /// uniform map, which yields uniform patch scores downstream.
    pub fn extract_or_uniform(&self, img: &Image) -> Result<ContourMap> {
        match self.extract(img) {
            Err(Error::DegenerateMap(reason)) => {
                log::debug!("degenerate contour map ({reason}); using uniform scores");
                Ok(ContourMap::uniform(img.height, img.width, 1.0))
            }
            other => other,
        }
    }
}

/// Uniform random image, handy for tests and benches.
pub fn random_image<R: Rng>(rng: &mut R, height: usize, width: usize, channels: usize) -> Image {
    let data = (0..height * width * channels).map(|_| rng.random::<f64>()).collect();
    Image {
        height,
        width,
        channels,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(bin: &BinaryMap) -> Vec<f64> {
        let mut out = vec![0.0; bin.height * bin.width];
        for py in 0..bin.height {
            for px in 0..bin.width {
                if !bin.is_target(py, px) {
                    continue;
                }
                let mut best = i64::MAX;
                for qy in 0..bin.height {
                    for qx in 0..bin.width {
                        if bin.is_target(qy, qx) {
                            continue;
                        }
                        let (dy, dx) = (py as i64 - qy as i64, px as i64 - qx as i64);
                        best = best.min(dy * dy + dx * dx);
                    }
                }
                out[py * bin.width + px] = (best as f64).sqrt();
            }
        }
        out
    }

    #[test]
    fn vit_base_scale_grid_has_196_patches() {
        let img = Image::zeros(224, 224, 3);
        assert_eq!(to_patches(&img, 16).unwrap().len(), 196);
    }

    #[test]
    fn single_patch_is_identity() {
        let img = Image::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let grid = to_patches(&img, 2).unwrap();
        assert_eq!(grid.patches, vec![vec![0.1, 0.2, 0.3, 0.4]]);
        assert_eq!(from_patches(&grid).unwrap(), img);
    }

    #[test]
    fn patches_are_row_major() {
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let img = Image::new(4, 4, 1, data).unwrap();
        let grid = to_patches(&img, 2).unwrap();
        assert_eq!(grid.patches[0], vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(grid.patches[1], vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(grid.patches[2], vec![8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn non_divisible_sizes_are_rejected() {
        let img = Image::zeros(10, 8, 3);
        let err = to_patches(&img, 4).unwrap_err();
        assert!(err.to_string().contains("height = 10"), "{err}");
    }

    #[test]
    fn inconsistent_grid_is_rejected() {
        let mut grid = to_patches(&Image::zeros(4, 4, 1), 2).unwrap();
        grid.patches.pop();
        assert!(matches!(from_patches(&grid), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn patch_round_trip_is_bit_exact(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, 64, 64, 3);
            let grid = to_patches(&img, 8).unwrap();
            prop_assert_eq!(grid.len(), 64);
            prop_assert_eq!(from_patches(&grid).unwrap(), img);
        }
    }

    #[test]
    fn constant_image_has_zero_response() {
        let params = ContourStackParams::from_seed(3);
        for v in [0.0, 0.37, 1.0] {
            let img = Image::new(16, 16, 3, vec![v; 16 * 16 * 3]).unwrap();
            let r = contour_response(&img, &params).unwrap();
            assert!(r.values.iter().all(|&x| x.abs() < 1e-12), "value {v}");
        }
    }

    #[test]
    fn step_edge_response_sits_on_the_edge() {
        let (h, w) = (16, 32);
        let mut img = Image::zeros(h, w, 3);
        for y in 0..h {
            for x in 8..w {
                for c in 0..3 {
                    img.set(y, x, c, 1.0);
                }
            }
        }
        let r = contour_response(&img, &ContourStackParams::from_seed(0)).unwrap();
        let column_energy: Vec<f64> = (0..w).map(|x| (0..h).map(|y| r.get(y, x)).sum()).collect();
        let argmax = column_energy
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!((6..=9).contains(&argmax), "peak column {argmax}");
        // Eight residual layers, the edge layer and the pool reach 10 px.
        for x in 19..w {
            assert!(column_energy[x] < 1e-12, "column {x}: {}", column_energy[x]);
        }
        for x in (0..3).chain(12..19) {
            assert!(column_energy[x] < 0.05 * column_energy[argmax], "column {x}");
        }
    }

    #[test]
    fn response_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = random_image(&mut rng, 16, 16, 3);
        let a = contour_response(&img, &ContourStackParams::from_seed(1)).unwrap();
        let b = contour_response(&img, &ContourStackParams::from_seed(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let img = Image::zeros(4, 4, 1);
        assert!(contour_response(&img, &ContourStackParams::from_seed(0)).is_err());
    }

    #[test]
    fn mean_threshold_splits_hand_example() {
        let map = ScalarMap::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let bin = binarize(&map, ThresholdPolicy::Mean).unwrap();
        assert_eq!(bin.target, vec![false, false, true, true]);
    }

    #[test]
    fn flat_map_is_degenerate() {
        let map = ScalarMap::new(2, 2, vec![0.5; 4]).unwrap();
        assert!(matches!(
            binarize(&map, ThresholdPolicy::Mean),
            Err(Error::DegenerateMap(_))
        ));
    }

    #[test]
    fn zero_threshold_picks_single_positive_pixel() {
        let map = ScalarMap::new(2, 3, vec![0.0, 0.0, 0.0, 0.0, 0.7, 0.0]).unwrap();
        let bin = binarize(&map, ThresholdPolicy::Fixed(0.0)).unwrap();
        assert_eq!(bin.target, vec![false, false, false, false, true, false]);
    }

    #[test]
    fn distance_transform_line_example() {
        let bin = BinaryMap::new(1, 3, vec![false, true, true]).unwrap();
        assert_eq!(distance_transform(&bin).unwrap().values, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn all_background_gives_zero_map() {
        let bin = BinaryMap::new(3, 3, vec![false; 9]).unwrap();
        assert!(distance_transform(&bin).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_target_is_degenerate() {
        let bin = BinaryMap::new(3, 3, vec![true; 9]).unwrap();
        assert!(matches!(distance_transform(&bin), Err(Error::DegenerateMap(_))));
    }

    #[test]
    fn distance_transform_matches_brute_force_16x16() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..50 {
            let density = 0.05 + 0.9 * (trial as f64 / 50.0);
            let mut target: Vec<bool> = (0..256).map(|_| rng.random::<f64>() < density).collect();
            target[rng.random_range(0..256)] = false;
            let bin = BinaryMap::new(16, 16, target).unwrap();
            let dt = distance_transform(&bin).unwrap();
            assert_eq!(dt.values, brute_force(&bin), "trial {trial}");
        }
    }

    #[test]
    fn contour_is_zero_exactly_on_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target: Vec<bool> = (0..200).map(|_| rng.random::<f64>() < 0.6).collect();
        let mut target = target;
        target[0] = false;
        let bin = BinaryMap::new(10, 20, target).unwrap();
        let dt = distance_transform(&bin).unwrap();
        for (t, v) in bin.target.iter().zip(&dt.values) {
            assert_eq!(*t, *v > 0.0);
        }
    }

    #[test]
    fn isolated_flag_keeps_response_value() {
        let mut target = vec![false; 25];
        target[12] = true;
        target[0] = true;
        target[1] = true;
        let bin = BinaryMap::new(5, 5, target).unwrap();
        assert!(bin.is_isolated(2, 2));
        assert!(!bin.is_isolated(0, 0));
        let response = ScalarMap::new(5, 5, (0..25).map(|v| v as f64 / 10.0).collect()).unwrap();
        let mut contour = distance_transform(&bin).unwrap();
        assert_eq!(contour.get(2, 2), 1.0);
        keep_isolated_values(&mut contour, &bin, &response);
        assert_eq!(contour.get(2, 2), 1.2);
        assert_eq!(contour.get(0, 1), 1.0);
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 8, 8, 3);
        img.save(&path).unwrap();
        let back = Image::load(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}

//! Procedural vehicle-like dataset and a manifest-based loader.
//!
//! Identities differ in body hue, aspect ratio, wheel layout and window
//! pattern. Cameras change only the smooth background and the brightness;
//! views add a horizontal flip and a shear. Every image draws from seeds
//! derived by name, so a spec and seed fully determine the dataset.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::eval::ImageMeta;
use crate::imagecore::{ContourExtractor, Image};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub views_per_identity: usize,
    pub num_cameras: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Largest background texture amplitude a camera can draw.
    pub max_texture: f64,
    /// Largest absolute brightness shift a camera can draw.
    pub max_brightness_shift: f64,
    /// Largest absolute shear a view can draw.
    pub max_shear: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_identities: 20,
            views_per_identity: 8,
            num_cameras: 4,
            image_size: 64,
            seed: 0,
            max_texture: 0.05,
            max_brightness_shift: 0.08,
            max_shear: 0.25,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::config("data.num_identities", "need at least 2 identities"));
        }
        if self.num_cameras < 2 {
            return Err(Error::config("data.num_cameras", "need at least 2 cameras"));
        }
        if self.views_per_identity < 2 {
            return Err(Error::config(
                "data.views_per_identity",
                "need at least 2 views so every query has a gallery match",
            ));
        }
        if self.image_size < 16 {
            return Err(Error::config("data.image_size", "must be at least 16"));
        }
        for (k, v) in [
            ("data.max_texture", self.max_texture),
            ("data.max_brightness_shift", self.max_brightness_shift),
            ("data.max_shear", self.max_shear),
        ] {
            if !(0.0..=0.5).contains(&v) {
                return Err(Error::config(k, format!("must lie in [0, 0.5], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
    pub aspect: f64,
    pub body_width: f64,
    pub cabin_shift: f64,
    pub wheel_layout: u8,
    pub window_pattern: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub base: [f64; 3],
    pub texture: f64,
    pub frequency: [f64; 2],
    pub phase: [f64; 2],
    pub brightness: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewParams {
    pub flip: bool,
    pub shear: f64,
}

pub fn identity_params(spec: &SyntheticSpec, id: usize) -> IdentityParams {
    let mut rng = crate::seed::rng(spec.seed, "data-identity", &[id as u64]);
    IdentityParams {
        hue: rng.random(),
        saturation: rng.random_range(0.55..0.95),
        value: rng.random_range(0.55..0.95),
        aspect: rng.random_range(0.32..0.46),
        body_width: rng.random_range(0.8..0.94),
        cabin_shift: rng.random_range(-0.08..0.08),
        wheel_layout: rng.random_range(0..4),
        window_pattern: rng.random_range(0..4),
    }
}

pub fn camera_params(spec: &SyntheticSpec, camera: usize) -> CameraParams {
    let mut rng = crate::seed::rng(spec.seed, "data-camera", &[camera as u64]);
    let grey: f64 = rng.random_range(0.4..0.6);
    let mut tint = || grey + rng.random_range(-0.05..0.05);
    let base = [tint(), tint(), tint()];
    CameraParams {
        base,
        texture: rng.random_range(0.0..=spec.max_texture),
        frequency: [rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)],
        phase: [rng.random(), rng.random()],
        brightness: rng.random_range(-spec.max_brightness_shift..=spec.max_brightness_shift),
    }
}

pub fn view_params(spec: &SyntheticSpec, id: usize, view: usize) -> ViewParams {
    let mut rng = crate::seed::rng(spec.seed, "data-view", &[id as u64, view as u64]);
    ViewParams {
        flip: rng.random_bool(0.5),
        shear: rng.random_range(-spec.max_shear..=spec.max_shear),
    }
}

/// Camera that records view `view` of identity `id`.
pub fn camera_of(spec: &SyntheticSpec, id: usize, view: usize) -> usize {
    (view + id) % spec.num_cameras
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

const WHEEL: [f64; 3] = [0.08, 0.08, 0.09];
const HUB: [f64; 3] = [0.72, 0.72, 0.75];
const GLASS: [f64; 3] = [0.14, 0.2, 0.27];

/// Colour of the vehicle at unit coordinates `(u, v)`, if it covers them.
fn vehicle_at(p: &IdentityParams, u: f64, v: f64) -> Option<[f64; 3]> {
    let bw = p.body_width;
    let bh = bw * p.aspect;
    let bottom = 0.8;
    let top = bottom - bh;
    let (left, right) = (0.5 - bw / 2.0, 0.5 + bw / 2.0);
    let r = 0.09;

    let wheels: &[f64] = match p.wheel_layout {
        0 => &[-0.3, 0.3],
        1 => &[-0.36, 0.36],
        2 => &[-0.36, -0.16, 0.34],
        _ => &[-0.32, 0.32],
    };
    for &w in wheels {
        let (cx, cy) = (0.5 + w * bw, bottom);
        let d2 = (u - cx).powi(2) + (v - cy).powi(2);
        if d2 <= r * r {
            let hub = if p.wheel_layout == 3 { 0.55 } else { 0.35 };
            return Some(if d2 <= (hub * r).powi(2) { HUB } else { WHEEL });
        }
    }

    let body = hsv_to_rgb(p.hue, p.saturation, p.value);
    if (left..=right).contains(&u) && (top..=bottom).contains(&v) {
        if p.window_pattern == 3 && (v - (top + 0.55 * bh)).abs() < 0.025 {
            return Some(hsv_to_rgb(p.hue + 0.5, p.saturation, 0.9));
        }
        return Some(body);
    }

    // Cabin: trapezoid sitting on the body.
    let ch = 0.6 * bh;
    let ctop = top - ch;
    if (ctop..top).contains(&v) {
        let t = (v - ctop) / ch;
        let half = bw * (0.22 + 0.08 * t);
        let cx = 0.5 + p.cabin_shift;
        if (u - cx).abs() <= half {
            let inset = 0.03;
            let glass_half = half - inset;
            let in_glass = v > ctop + inset && v < top - inset * 0.5 && (u - cx).abs() < glass_half;
            if in_glass {
                let panes = match p.window_pattern {
                    0 => 1,
                    1 | 3 => 2,
                    _ => 3,
                };
                let rel = (u - cx + glass_half) / (2.0 * glass_half) * panes as f64;
                let pillar = (rel - rel.round()).abs() * (2.0 * glass_half) / panes as f64;
                if panes == 1 || rel.round() == 0.0 || rel.round() == panes as f64 || pillar > 0.012 {
                    return Some(GLASS);
                }
            }
            return Some(body);
        }
    }
    None
}

/// Renders one image and its vehicle mask (row-major, `true` = vehicle).
pub fn render(spec: &SyntheticSpec, id: usize, view: usize) -> (Image, Vec<bool>) {
    let ip = identity_params(spec, id);
    let cp = camera_params(spec, camera_of(spec, id, view));
    let vp = view_params(spec, id, view);
    let s = spec.image_size;
    let mut data = Vec::with_capacity(s * s * 3);
    let mut mask = Vec::with_capacity(s * s);
    let tau = std::f64::consts::TAU;
    for y in 0..s {
        for x in 0..s {
            let v = (y as f64 + 0.5) / s as f64;
            let mut u = (x as f64 + 0.5) / s as f64;
            if vp.flip {
                u = 1.0 - u;
            }
            u -= vp.shear * (v - 0.55);
            let texture = cp.texture
                * (tau * (cp.frequency[0] * u + cp.phase[0])).sin()
                * (tau * (cp.frequency[1] * v + cp.phase[1])).sin();
            let fg = vehicle_at(&ip, u, v);
            mask.push(fg.is_some());
            let rgb = fg.unwrap_or([cp.base[0] + texture, cp.base[1] + texture, cp.base[2] + texture]);
            data.extend(rgb.iter().map(|c| (c + cp.brightness).clamp(0.0, 1.0)));
        }
    }
    (Image::new(s, s, 3, data).expect("rendered image is well formed"), mask)
}

/// Mean contour value on the vehicle and on the background.
pub fn contour_contrast(img: &Image, mask: &[bool], extractor: &ContourExtractor) -> Result<(f64, f64)> {
    let map = extractor.extract(img)?;
    let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (v, &m) in map.values.iter().zip(mask) {
        if m {
            fg += v;
            nf += 1;
        } else {
            bg += v;
            nb += 1;
        }
    }
    Ok((fg / nf.max(1) as f64, bg / nb.max(1) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub identity: usize,
    pub camera: usize,
    pub split: Split,
}

impl Record {
    pub fn meta(&self) -> ImageMeta {
        ImageMeta {
            identity: self.identity,
            camera: self.camera,
        }
    }
}

/// First half of the identities train; every test identity contributes view
/// 0 to the query set and its other views to the gallery.
pub fn split_of(spec: &SyntheticSpec, id: usize, view: usize) -> Split {
    if id < spec.num_identities / 2 {
        Split::Train
    } else if view == 0 {
        Split::Query
    } else {
        Split::Gallery
    }
}

/// Writes the dataset under `root` and returns its manifest. Fails if any
/// image violates the foreground-versus-background contour self-check.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path, extractor: &ContourExtractor) -> Result<Vec<Record>> {
    spec.validate()?;
    let images = root.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let n = spec.num_identities * spec.views_per_identity;
    let records: Vec<Result<Record>> = crate::par::map_indexed(n, |i| {
        let (id, view) = (i / spec.views_per_identity, i % spec.views_per_identity);
        let camera = camera_of(spec, id, view);
        let (img, mask) = render(spec, id, view);
        let rel = PathBuf::from("images").join(format!("{id:04}_{view:02}_c{camera}.png"));
        let (fg, bg) = contour_contrast(&img, &mask, extractor)?;
        if fg <= bg {
            return Err(Error::Dataset {
                path: rel,
                message: format!("contour self-check failed: foreground {fg:.4} <= background {bg:.4}"),
            });
        }
        img.save(root.join(&rel))?;
        Ok(Record {
            path: rel,
            identity: id,
            camera,
            split: split_of(spec, id, view),
        })
    });
    let records: Vec<Record> = records.into_iter().collect::<Result<_>>()?;
    let manifest = root.join(MANIFEST);
    let json = serde_json::to_string_pretty(&records)?;
    std::fs::write(&manifest, json).map_err(|e| Error::io(&manifest, e))?;
    let spec_path = root.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&spec_path, e))?;
    Ok(records)
}

/// A dataset on disk. Images are read on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

/// Reads `manifest.json` from `path` (a directory or the manifest itself)
/// and checks every record.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (root, manifest) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST))
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let records: Vec<Record> = serde_json::from_str(&text).map_err(|e| Error::Dataset {
        path: manifest.clone(),
        message: format!("manifest schema violation: {e}"),
    })?;
    for (i, r) in records.iter().enumerate() {
        if !root.join(&r.path).is_file() {
            return Err(Error::Dataset {
                path: r.path.clone(),
                message: format!("record {i}: image file is missing"),
            });
        }
    }
    let gallery: HashSet<usize> = records.iter().filter(|r| r.split == Split::Gallery).map(|r| r.identity).collect();
    if let Some((i, r)) = records
        .iter()
        .enumerate()
        .find(|(_, r)| r.split == Split::Query && !gallery.contains(&r.identity))
    {
        return Err(Error::Dataset {
            path: r.path.clone(),
            message: format!("record {i}: query identity {} has no gallery image", r.identity),
        });
    }
    Ok(Dataset { root, records })
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn image(&self, index: usize) -> Result<Image> {
        Image::load(self.root.join(&self.records[index].path))
    }

    /// Loads every image of `split` with its metadata.
    pub fn load_split(&self, split: Split) -> Result<(Vec<Image>, Vec<ImageMeta>)> {
        let idx = self.indices(split);
        let images = crate::par::map_slice(&idx, |&i| self.image(i))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let meta = idx.iter().map(|&i| self.records[i].meta()).collect();
        Ok((images, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(1.0 / 3.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv_to_rgb(0.5, 0.0, 0.5), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn cameras_assigned_round_robin() {
        let spec = SyntheticSpec::default();
        assert_eq!(camera_of(&spec, 0, 0), 0);
        assert_eq!(camera_of(&spec, 3, 2), 1);
    }

    #[test]
    fn render_is_deterministic_and_identities_differ() {
        let spec = SyntheticSpec::default();
        let (a, ma) = render(&spec, 1, 2);
        let (b, _) = render(&spec, 1, 2);
        assert_eq!(a, b);
        assert!(ma.iter().any(|&m| m) && ma.iter().any(|&m| !m));
        let (c, _) = render(&spec, 2, 2);
        assert_ne!(a, c);
    }

    #[test]
    fn validation_names_keys() {
        let spec = SyntheticSpec {
            num_cameras: 1,
            ..SyntheticSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config { key, .. }) if key == "data.num_cameras"));
    }
}

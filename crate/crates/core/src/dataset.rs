//! Synthetic training and test clips with known motion.
//!
//! Every clip is an analytic function of position and time: a translating
//! multi-sinusoid background with soft-edged patches, a disk whose texture
//! rotates in place, and a few independently moving occluders. The background
//! velocity is stored in the manifest as the ground-truth forward flow.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{read_clip_dir, write_clip_dir, Frame, VideoClip};
use crate::rng::{derive_seed, seeded, Rng};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MotionModel {
    /// Translation, rotating disk and occluders.
    #[default]
    Full,
    /// Background translation only; the whole frame moves by the velocity.
    Translation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDatasetSpec {
    pub root: PathBuf,
    pub num_clips: usize,
    /// The last `test_clips` clips form the held-out split.
    pub test_clips: usize,
    pub frames_per_clip: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub motion: MotionModel,
    /// Largest background speed per axis, pixels per frame.
    pub max_speed: f64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/synthetic"),
            num_clips: 32,
            test_clips: 4,
            frames_per_clip: 5,
            height: 64,
            width: 64,
            seed: 7,
            motion: MotionModel::Full,
            max_speed: 1.5,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |name, reason: &str| {
            Err(Error::Param {
                name,
                reason: reason.into(),
            })
        };
        if self.num_clips == 0 {
            return bad("dataset.num_clips", "must be at least 1");
        }
        if self.test_clips > self.num_clips {
            return bad("dataset.test_clips", "cannot exceed num_clips");
        }
        if self.frames_per_clip == 0 {
            return bad("dataset.frames_per_clip", "must be at least 1");
        }
        if self.height < 8 || self.width < 8 {
            return bad("dataset.height", "frames must be at least 8x8");
        }
        if !(self.max_speed.is_finite() && self.max_speed >= 0.0) {
            return bad("dataset.max_speed", "must be finite and non-negative");
        }
        Ok(())
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index + self.test_clips >= self.num_clips {
            Split::Test
        } else {
            Split::Train
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-clip record in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipInfo {
    pub name: String,
    pub split: Split,
    pub seed: u64,
    /// Background displacement `(dx, dy)` from frame i to frame i+1; equals the
    /// forward flow wherever the background is visible.
    pub velocity: [f64; 2],
    pub disk_angular_speed: f64,
    pub occluders: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticDatasetSpec,
    pub clips: Vec<ClipInfo>,
}

struct Wave {
    freq: [f64; 2],
    amp: f64,
    phase: [f64; 3],
}

struct Patch {
    center: [f64; 2],
    half: [f64; 2],
    tint: [f64; 3],
}

struct Disk {
    center: [f64; 2],
    radius: f64,
    spokes: f64,
    omega: f64,
    tint: [f64; 3],
}

struct Occluder {
    origin: [f64; 2],
    velocity: [f64; 2],
    half: f64,
    color: [f64; 3],
    checker: f64,
}

struct Scene {
    velocity: [f64; 2],
    waves: Vec<Wave>,
    patches: Vec<Patch>,
    disk: Option<Disk>,
    occluders: Vec<Occluder>,
}

fn smoothstep_edge(d: f64, softness: f64) -> f64 {
    // 1 inside (d < 0), 0 outside, smooth over `softness` pixels.
    let t = (0.5 - d / softness).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

impl Scene {
    fn sample(spec: &SyntheticDatasetSpec, rng: &mut Rng) -> Self {
        let (h, w) = (spec.height as f64, spec.width as f64);
        let s = spec.max_speed;
        let velocity = if s > 0.0 {
            [uniform(rng, -s, s), uniform(rng, -s, s)]
        } else {
            [0.0, 0.0]
        };
        let waves = (0..4)
            .map(|_| {
                let period = uniform(rng, 5.0, 18.0);
                let theta = uniform(rng, 0.0, PI);
                Wave {
                    freq: [theta.cos() / period, theta.sin() / period],
                    amp: uniform(rng, 0.05, 0.1),
                    phase: [uniform(rng, 0.0, 2.0 * PI), uniform(rng, 0.0, 2.0 * PI), uniform(rng, 0.0, 2.0 * PI)],
                }
            })
            .collect();
        let patches = (0..3)
            .map(|_| Patch {
                center: [uniform(rng, 0.0, w), uniform(rng, 0.0, h)],
                half: [uniform(rng, 3.0, w / 5.0), uniform(rng, 3.0, h / 5.0)],
                tint: [uniform(rng, -0.2, 0.2), uniform(rng, -0.2, 0.2), uniform(rng, -0.2, 0.2)],
            })
            .collect();
        let full = spec.motion == MotionModel::Full;
        let disk = full.then(|| {
            let radius = uniform(rng, 0.12, 0.2) * h.min(w);
            Disk {
                center: [uniform(rng, radius, w - radius), uniform(rng, radius, h - radius)],
                radius,
                spokes: rng.random_range(3..8) as f64,
                omega: uniform(rng, 0.1, 0.3) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                tint: [uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8)],
            }
        });
        let n_occ = if full { rng.random_range(1..3) } else { 0 };
        let occluders = (0..n_occ)
            .map(|_| Occluder {
                origin: [uniform(rng, 0.2 * w, 0.8 * w), uniform(rng, 0.2 * h, 0.8 * h)],
                velocity: [uniform(rng, -2.5, 2.5), uniform(rng, -2.5, 2.5)],
                half: uniform(rng, 3.0, 6.0),
                color: [uniform(rng, 0.0, 1.0), uniform(rng, 0.0, 1.0), uniform(rng, 0.0, 1.0)],
                checker: uniform(rng, 2.0, 4.0),
            })
            .collect();
        Self {
            velocity,
            waves,
            patches,
            disk,
            occluders,
        }
    }

    /// Background texture at scene coordinates (before translation).
    fn background(&self, x: f64, y: f64) -> [f64; 3] {
        let mut rgb = [0.5; 3];
        for wv in &self.waves {
            let arg = 2.0 * PI * (wv.freq[0] * x + wv.freq[1] * y);
            for (c, v) in rgb.iter_mut().enumerate() {
                *v += wv.amp * (arg + wv.phase[c]).cos();
            }
        }
        for p in &self.patches {
            let d = ((x - p.center[0]).abs() - p.half[0]).max((y - p.center[1]).abs() - p.half[1]);
            let a = smoothstep_edge(d, 1.0);
            for (c, v) in rgb.iter_mut().enumerate() {
                *v += a * p.tint[c];
            }
        }
        rgb
    }

    fn render(&self, t: usize, h: usize, w: usize) -> Frame {
        let tf = t as f64;
        Frame::from_shape_fn((h, w, 3), |(i, j, c)| {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            let mut v = self.background(x - self.velocity[0] * tf, y - self.velocity[1] * tf)[c];
            if let Some(d) = &self.disk {
                let (dx, dy) = (x - d.center[0], y - d.center[1]);
                let r = (dx * dx + dy * dy).sqrt();
                let a = smoothstep_edge(r - d.radius, 1.5);
                if a > 0.0 {
                    let theta = dy.atan2(dx) - d.omega * tf;
                    let spoke = (d.spokes * theta).cos();
                    let ring = (2.0 * PI * r / 5.0).cos();
                    let inner = d.tint[c] + 0.3 * spoke + 0.1 * ring;
                    v = (1.0 - a) * v + a * inner;
                }
            }
            for o in &self.occluders {
                let cx = o.origin[0] + o.velocity[0] * tf;
                let cy = o.origin[1] + o.velocity[1] * tf;
                let d = (x - cx).abs().max((y - cy).abs()) - o.half;
                let a = smoothstep_edge(d, 1.0);
                if a > 0.0 {
                    let cell = ((x - cx) / o.checker).floor() + ((y - cy) / o.checker).floor();
                    let shade = if cell.rem_euclid(2.0) < 1.0 { 1.0 } else { 0.6 };
                    v = (1.0 - a) * v + a * o.color[c] * shade;
                }
            }
            v.clamp(0.0, 1.0) as f32
        })
    }
}

pub fn clip_name(index: usize) -> String {
    format!("clip_{index:04}")
}

/// Renders clip `index` of `spec` in memory.
pub fn generate_clip(spec: &SyntheticDatasetSpec, index: usize) -> Result<(VideoClip, ClipInfo)> {
    spec.validate()?;
    let seed = derive_seed(spec.seed, "synth_clip", index as u64);
    let scene = Scene::sample(spec, &mut seeded(seed));
    let frames = (0..spec.frames_per_clip)
        .map(|t| scene.render(t, spec.height, spec.width))
        .collect();
    let info = ClipInfo {
        name: clip_name(index),
        split: spec.split_of(index),
        seed,
        velocity: scene.velocity,
        disk_angular_speed: scene.disk.as_ref().map_or(0.0, |d| d.omega),
        occluders: scene.occluders.len(),
    };
    Ok((VideoClip::new(frames)?, info))
}

/// Writes every clip plus `manifest.json` under `spec.root`. An existing
/// dataset is replaced only when `force` is set.
pub fn synth_dataset(spec: &SyntheticDatasetSpec, force: bool) -> Result<Manifest> {
    spec.validate()?;
    let root = &spec.root;
    if root.exists() {
        let occupied = std::fs::read_dir(root)?.next().is_some();
        if occupied && !force {
            return Err(Error::PathExists(root.clone()));
        }
        if occupied {
            clear_dataset(root)?;
        }
    }
    std::fs::create_dir_all(root)?;
    let mut clips = Vec::with_capacity(spec.num_clips);
    for i in 0..spec.num_clips {
        let (clip, info) = generate_clip(spec, i)?;
        write_clip_dir(&clip, &root.join(&info.name))?;
        clips.push(info);
    }
    // The root is implied by the manifest location, so dataset bytes do not
    // depend on where they were written.
    let manifest = Manifest {
        spec: SyntheticDatasetSpec {
            root: PathBuf::from("."),
            ..spec.clone()
        },
        clips,
    };
    std::fs::write(root.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Removes only what `synth_dataset` writes.
fn clear_dataset(root: &Path) -> Result<()> {
    for entry in std::fs::read_dir(root)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if path.is_dir() && name.starts_with("clip_") {
            std::fs::remove_dir_all(&path)?;
        } else if name == MANIFEST_FILE {
            std::fs::remove_file(&path)?;
        }
    }
    Ok(())
}

/// A dataset loaded from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub clips: Vec<VideoClip>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::Config(format!(
                "no dataset at {} (run `synth` first)",
                root.display()
            )));
        }
        let mut manifest: Manifest = serde_json::from_slice(&std::fs::read(&path)?)?;
        manifest.spec.root = root.to_path_buf();
        let clips = manifest
            .clips
            .iter()
            .map(|c| read_clip_dir(&root.join(&c.name)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, clips })
    }

    /// Renders the dataset in memory without touching the file system. Frames
    /// are quantized to 8 bits so they match a written-then-read dataset.
    pub fn in_memory(spec: &SyntheticDatasetSpec) -> Result<Self> {
        let mut clips = Vec::new();
        let mut infos = Vec::new();
        for i in 0..spec.num_clips {
            let (clip, info) = generate_clip(spec, i)?;
            clips.push(clip.map_frames(|f| Ok(f.mapv(|v| (v * 255.0).round() / 255.0)))?);
            infos.push(info);
        }
        Ok(Self {
            manifest: Manifest {
                spec: spec.clone(),
                clips: infos,
            },
            clips,
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .clips
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

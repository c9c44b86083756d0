//! Audio/visual pair manifests and the procedural scene generator.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sonovis_diff::{par, Tensor};

use crate::dsp::{read_wav, write_wav, AudioClip, AudioPipeline};
use crate::error::{CoreError, Result};
use crate::image::{read_depth_png, read_label_png, write_depth_png, write_label_png, DepthImage, LabelMap};

pub const MANIFEST_FORMAT: &str = "sonovis-manifest/1";
pub const SPEED_OF_SOUND: f64 = 343.0;
pub const BACKGROUND_CLASS: u8 = 0;
pub const FLOOR_CLASS: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Depth,
    Segmentation,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Depth => "depth",
            Modality::Segmentation => "segmentation",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Bounds {
    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        self.min + v * (self.max - self.min)
    }
}

/// First line of a manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: String,
    /// Depth PNGs store `(d - min) / (max - min)`; larger means farther.
    pub depth_bounds: Bounds,
    pub depth_convention: String,
    pub class_names: Vec<String>,
    pub palette: Vec<[u8; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub audio: PathBuf,
    pub visual: PathBuf,
    pub modality: Modality,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairManifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative entry paths are resolved against.
    pub root: PathBuf,
}

impl PairManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn entries_for(&self, split: Split, modality: Modality) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split && e.modality == modality).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.header.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.format != MANIFEST_FORMAT {
            return Err(CoreError::Config(format!("unsupported manifest format `{}`", h.format)));
        }
        let b = h.depth_bounds;
        if !(b.min.is_finite() && b.max.is_finite() && b.min < b.max) {
            return Err(CoreError::Config(format!("depth bounds {b:?} must be finite with min < max")));
        }
        if h.class_names.is_empty() || h.palette.len() != h.class_names.len() || h.palette.len() > 256 {
            return Err(CoreError::Config("palette and class names must match (1 to 256 classes)".into()));
        }
        let mut seen: HashMap<&str, Split> = HashMap::new();
        let mut audio_split: HashMap<&Path, Split> = HashMap::new();
        let mut pairs = std::collections::HashSet::new();
        for e in &self.entries {
            if !pairs.insert((e.id.as_str(), e.modality)) {
                return Err(CoreError::Config(format!("entry `{}` listed twice for {}", e.id, e.modality.as_str())));
            }
            let by_id = seen.insert(&e.id, e.split);
            let by_audio = audio_split.insert(&e.audio, e.split);
            if [by_id, by_audio].iter().flatten().any(|&s| s != e.split) {
                return Err(CoreError::SplitOverlap(e.id.clone()));
            }
            for p in [&e.audio, &e.visual] {
                if !self.resolve(p).is_file() {
                    return Err(CoreError::DanglingPath {
                        entry: e.id.clone(),
                        path: p.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CoreError::MissingFile(path.to_path_buf()),
            _ => CoreError::io(path, e),
        })?;
        let bad = |line: usize, e: serde_json::Error| CoreError::Format {
            path: format!("{}:{line}", path.display()),
            detail: e.to_string(),
        };
        let mut lines = BufReader::new(file).lines().enumerate();
        let header_line = loop {
            match lines.next() {
                Some((i, l)) => {
                    let l = l.map_err(|e| CoreError::io(path, e))?;
                    if !l.trim().is_empty() {
                        break (i, l);
                    }
                }
                None => {
                    return Err(CoreError::Format {
                        path: path.display().to_string(),
                        detail: "empty manifest".into(),
                    })
                }
            }
        };
        let header: ManifestHeader = serde_json::from_str(&header_line.1).map_err(|e| bad(header_line.0 + 1, e))?;
        let mut entries = Vec::new();
        for (i, l) in lines {
            let l = l.map_err(|e| CoreError::io(path, e))?;
            if l.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&l).map_err(|e| bad(i + 1, e))?);
        }
        let m = PairManifest {
            header,
            entries,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| CoreError::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Rect,
    Disc,
}

/// Pinhole camera over a flat floor. Image coordinates are normalized to
/// [0, 1], y pointing down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    /// Focal length in image widths.
    pub focal: f64,
    /// Row of the horizon.
    pub horizon: f64,
    /// Camera height above the floor in metres.
    pub height: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            focal: 0.5,
            horizon: 0.4,
            height: 1.5,
        }
    }
}

impl Camera {
    /// Image column of a point at lateral offset `x` metres and depth `z`.
    pub fn column(&self, x: f64, z: f64) -> f64 {
        0.5 + self.focal * x / z
    }

    pub fn lateral(&self, column: f64, z: f64) -> f64 {
        (column - 0.5) * z / self.focal
    }

    /// Row where the floor at depth `z` meets the image.
    pub fn floor_row(&self, z: f64) -> f64 {
        self.horizon + self.focal * self.height / z
    }

    pub fn floor_depth(&self, row: f64) -> Option<f64> {
        (row > self.horizon).then(|| self.focal * self.height / (row - self.horizon))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub class_id: u8,
    pub shape: ShapeKind,
    /// Centre in normalized image coordinates.
    pub position: [f64; 2],
    /// Width and height in image widths; discs use the width as diameter.
    pub size: [f64; 2],
    pub distance: f64,
    pub emits_sound: bool,
    pub source_frequency: f64,
    /// Amplitude at 1 m.
    pub loudness: f64,
    pub phase: f64,
}

impl SceneObject {
    fn covers(&self, u: f64, v: f64) -> bool {
        let [cx, cy] = self.position;
        match self.shape {
            ShapeKind::Rect => (u - cx).abs() <= self.size[0] / 2.0 && (v - cy).abs() <= self.size[1] / 2.0,
            ShapeKind::Disc => {
                let r = self.size[0] / 2.0;
                (u - cx).powi(2) + (v - cy).powi(2) <= r * r
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    /// Microphone positions `[lateral, forward]` in metres.
    pub mic_array: Vec<[f64; 2]>,
    pub background_depth: f64,
    pub camera: Camera,
    /// Render the floor plane below the horizon as its own class.
    pub floor: bool,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.mic_array.len() < 2 {
            return Err(CoreError::invalid("scene needs at least two microphones"));
        }
        if !(self.background_depth > 0.0) {
            return Err(CoreError::invalid("background depth must be positive"));
        }
        for o in &self.objects {
            let inside = o.position.iter().all(|p| (0.0..=1.0).contains(p));
            if !(o.distance > 0.0) || !inside || o.size.iter().any(|s| !(*s > 0.0)) {
                return Err(CoreError::invalid(format!("invalid object {o:?}")));
            }
        }
        Ok(())
    }

    /// Source position `[lateral, forward]` of an object.
    pub fn source_position(&self, o: &SceneObject) -> [f64; 2] {
        [self.camera.lateral(o.position[0], o.distance), o.distance]
    }

    /// `(gain, delay seconds)` from each sounding object to each microphone.
    pub fn propagation(&self, o: &SceneObject) -> Vec<(f64, f64)> {
        let [sx, sz] = self.source_position(o);
        self.mic_array
            .iter()
            .map(|&[mx, mz]| {
                let r = ((sx - mx).powi(2) + (sz - mz).powi(2)).sqrt().max(0.1);
                (1.0 / r, r / SPEED_OF_SOUND)
            })
            .collect()
    }

    /// Rasterizes depth (metres) and class ids, far to near.
    pub fn render(&self, size: usize) -> (DepthImage, LabelMap) {
        let mut depth = DepthImage::filled(size, size, self.background_depth as f32);
        let mut seg = LabelMap::filled(size, size, BACKGROUND_CLASS);
        let center = |i: usize| (i as f64 + 0.5) / size as f64;
        if self.floor {
            for y in 0..size {
                if let Some(z) = self.camera.floor_depth(center(y)) {
                    if z < self.background_depth {
                        for x in 0..size {
                            depth.data_mut()[y * size + x] = z as f32;
                            seg.data_mut()[y * size + x] = FLOOR_CLASS;
                        }
                    }
                }
            }
        }
        let mut order: Vec<&SceneObject> = self.objects.iter().collect();
        order.sort_by(|a, b| b.distance.total_cmp(&a.distance));
        for o in order {
            for y in 0..size {
                for x in 0..size {
                    if o.covers(center(x), center(y)) {
                        depth.data_mut()[y * size + x] = o.distance as f32;
                        seg.data_mut()[y * size + x] = o.class_id;
                    }
                }
            }
        }
        (depth, seg)
    }

    /// Noise-free multichannel mixture of all sounding objects.
    pub fn synth_audio(&self, sample_rate: u32, samples: usize, master_gain: f64) -> Vec<Vec<f32>> {
        let sr = sample_rate as f64;
        let mut out = vec![vec![0.0f64; samples]; self.mic_array.len()];
        for o in self.objects.iter().filter(|o| o.emits_sound) {
            let partials: Vec<(f64, f64)> = HARMONICS
                .iter()
                .enumerate()
                .map(|(h, &a)| (o.source_frequency * (h + 1) as f64, a))
                .filter(|&(f, _)| f < sr / 2.0)
                .collect();
            for (ch, (gain, delay)) in out.iter_mut().zip(self.propagation(o)) {
                for (n, s) in ch.iter_mut().enumerate() {
                    let t = n as f64 / sr - delay;
                    let v: f64 = partials.iter().map(|&(f, a)| a * (2.0 * PI * f * t + o.phase).sin()).sum();
                    *s += master_gain * o.loudness * gain * v;
                }
            }
        }
        out.into_iter().map(|c| c.into_iter().map(|v| v as f32).collect()).collect()
    }
}

/// Relative amplitudes of the fundamental and overtones.
const HARMONICS: [f64; 3] = [1.0, 0.5, 0.25];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectClass {
    pub name: String,
    pub shape: ShapeKind,
    /// Physical width and height in metres.
    pub width_m: f64,
    pub height_m: f64,
    pub color: [u8; 3],
}

fn default_classes() -> Vec<ObjectClass> {
    let c = |name: &str, shape, width_m, height_m, color| ObjectClass {
        name: name.into(),
        shape,
        width_m,
        height_m,
        color,
    };
    vec![
        c("vehicle", ShapeKind::Rect, 2.0, 1.4, [0, 0, 142]),
        c("person", ShapeKind::Rect, 0.6, 1.8, [220, 20, 60]),
        c("ball", ShapeKind::Disc, 1.0, 1.0, [250, 170, 30]),
        c("sign", ShapeKind::Rect, 1.0, 2.5, [220, 220, 0]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub image_size: usize,
    pub sample_rate: u32,
    pub duration_seconds: f64,
    pub mics: usize,
    /// Total lateral extent of the linear microphone array in metres.
    pub mic_aperture_m: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub distance_min: f64,
    pub distance_max: f64,
    pub background_depth: f64,
    pub snr_db: f64,
    pub master_gain: f64,
    /// Lowest and highest class fundamental, spaced logarithmically.
    pub frequency_range: [f64; 2],
    pub camera: Camera,
    pub classes: Vec<ObjectClass>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train: 256,
            val: 32,
            test: 64,
            image_size: 128,
            sample_rate: 22_050,
            duration_seconds: 1.0,
            mics: 8,
            mic_aperture_m: 2.0,
            objects_min: 1,
            objects_max: 3,
            distance_min: 2.0,
            distance_max: 10.0,
            background_depth: 20.0,
            snr_db: 20.0,
            master_gain: 0.1,
            frequency_range: [200.0, 4000.0],
            camera: Camera::default(),
            classes: default_classes(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Config(m));
        if self.train + self.val + self.test == 0 {
            return fail("no samples requested".into());
        }
        if self.image_size == 0 || self.sample_rate == 0 || !(self.duration_seconds > 0.0) {
            return fail("image size, sample rate and duration must be positive".into());
        }
        if self.mics < 2 {
            return fail(format!("need at least 2 microphones, got {}", self.mics));
        }
        if self.objects_min > self.objects_max {
            return fail(format!("objects_min {} > objects_max {}", self.objects_min, self.objects_max));
        }
        if !(0.0 < self.distance_min && self.distance_min < self.distance_max && self.distance_max < self.background_depth) {
            return fail("need 0 < distance_min < distance_max < background_depth".into());
        }
        let [lo, hi] = self.frequency_range;
        if !(0.0 < lo && lo <= hi && hi < self.sample_rate as f64 / 2.0) {
            return fail(format!("frequency range {lo}..{hi} must lie below Nyquist"));
        }
        if self.classes.is_empty() || self.classes.len() > 254 {
            return fail("need 1 to 254 object classes".into());
        }
        if self.classes.iter().any(|c| !(c.width_m > 0.0 && c.height_m > 0.0)) {
            return fail("class sizes must be positive".into());
        }
        let c = &self.camera;
        if !(c.focal > 0.0 && c.height > 0.0 && (0.0..1.0).contains(&c.horizon)) {
            return fail(format!("invalid camera {c:?}"));
        }
        if !self.master_gain.is_finite() || !self.snr_db.is_finite() || !(self.mic_aperture_m > 0.0) {
            return fail("gain, SNR and aperture must be finite (aperture positive)".into());
        }
        Ok(())
    }

    /// Fundamental of object class `i` (0-based among object classes).
    pub fn class_frequency(&self, i: usize) -> f64 {
        let [lo, hi] = self.frequency_range;
        let n = self.classes.len();
        if n == 1 {
            return lo;
        }
        lo * (hi / lo).powf(i as f64 / (n - 1) as f64)
    }

    pub fn class_names(&self) -> Vec<String> {
        ["background", "floor"]
            .into_iter()
            .map(String::from)
            .chain(self.classes.iter().map(|c| c.name.clone()))
            .collect()
    }

    pub fn palette(&self) -> Vec<[u8; 3]> {
        [[0, 0, 0], [128, 64, 128]].into_iter().chain(self.classes.iter().map(|c| c.color)).collect()
    }

    /// Depth range covering every rendered pixel: the nearest floor row
    /// and the background.
    pub fn depth_bounds(&self) -> Bounds {
        let bottom = (self.image_size as f64 - 0.5) / self.image_size as f64;
        let near = self.camera.floor_depth(bottom).unwrap_or(self.distance_min);
        Bounds {
            min: near.min(self.distance_min),
            max: self.background_depth,
        }
    }

    fn mic_array(&self) -> Vec<[f64; 2]> {
        let m = self.mics;
        (0..m)
            .map(|i| [self.mic_aperture_m * (i as f64 / (m - 1) as f64 - 0.5), 0.0])
            .collect()
    }

    /// Random scene for sample `index`, independent of every other index.
    pub fn scene(&self, seed: u64, index: u64) -> Scene {
        let mut rng = sample_rng(seed, index);
        let count = rng.random_range(self.objects_min..=self.objects_max);
        let cam = self.camera;
        let objects = (0..count)
            .map(|_| {
                let k = rng.random_range(0..self.classes.len());
                let class = &self.classes[k];
                let z = rng.random_range(self.distance_min..self.distance_max);
                let w = cam.focal * class.width_m / z;
                let h = match class.shape {
                    ShapeKind::Disc => w,
                    ShapeKind::Rect => cam.focal * class.height_m / z,
                };
                let half = (w / 2.0).min(0.45);
                let cx = rng.random_range(half..1.0 - half);
                let bottom = cam.floor_row(z);
                let cy = (bottom - h / 2.0).clamp(0.0, 1.0);
                SceneObject {
                    class_id: (k + 2) as u8,
                    shape: class.shape,
                    position: [cx, cy],
                    size: [w, h],
                    distance: z,
                    emits_sound: true,
                    source_frequency: self.class_frequency(k),
                    loudness: 1.0,
                    phase: rng.random_range(0.0..2.0 * PI),
                }
            })
            .collect();
        Scene {
            objects,
            mic_array: self.mic_array(),
            background_depth: self.background_depth,
            camera: cam,
            floor: true,
        }
    }

    /// Audio with additive white noise at the configured SNR.
    pub fn audio(&self, scene: &Scene, seed: u64, index: u64) -> Result<AudioClip> {
        let samples = (self.duration_seconds * self.sample_rate as f64).round() as usize;
        let mut chans = scene.synth_audio(self.sample_rate, samples, self.master_gain);
        let power = chans.iter().flatten().map(|&v| (v as f64).powi(2)).sum::<f64>() / (samples * chans.len()) as f64;
        let sigma = (power / 10f64.powf(self.snr_db / 10.0)).sqrt();
        if sigma > 0.0 {
            let mut rng = sample_rng(seed ^ 0x6e6f_6973_6521, index);
            let noise = Normal::new(0.0, sigma).map_err(|e| CoreError::Config(e.to_string()))?;
            for v in chans.iter_mut().flatten() {
                *v = (*v as f64 + noise.sample(&mut rng)).clamp(-1.0, 1.0) as f32;
            }
        }
        AudioClip::new(chans, self.sample_rate)
    }
}

/// Independent RNG stream for `(seed, index)`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Writes `audio/`, `depth/`, `seg/` and `manifest.jsonl` under `out`.
/// Depth PNGs hold normalized depth. Samples are split in index order:
/// train, then val, then test.
pub fn synth_generate(config: &SynthConfig, seed: u64, out: &Path) -> Result<PairManifest> {
    config.validate()?;
    for sub in ["audio", "depth", "seg"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| CoreError::io(&d, e))?;
    }
    let total = config.train + config.val + config.test;
    let bounds = config.depth_bounds();
    let palette = config.palette();
    let split_of = |i: usize| {
        if i < config.train {
            Split::Train
        } else if i < config.train + config.val {
            Split::Val
        } else {
            Split::Test
        }
    };
    let written: Vec<Result<[ManifestEntry; 2]>> = par::map_range(total, |i| {
        let id = format!("{i:06}");
        let scene = config.scene(seed, i as u64);
        let (depth, seg) = scene.render(config.image_size);
        let audio = config.audio(&scene, seed, i as u64)?;
        let audio_rel = PathBuf::from("audio").join(format!("{id}.wav"));
        let depth_rel = PathBuf::from("depth").join(format!("{id}.png"));
        let seg_rel = PathBuf::from("seg").join(format!("{id}.png"));
        write_wav(&out.join(&audio_rel), &audio)?;
        let norm = depth.map(|d| bounds.normalize(d as f64).clamp(0.0, 1.0) as f32);
        write_depth_png(&out.join(&depth_rel), &norm)?;
        write_label_png(&out.join(&seg_rel), &seg, &palette)?;
        let split = split_of(i);
        let entry = |visual: PathBuf, modality| ManifestEntry {
            id: id.clone(),
            audio: audio_rel.clone(),
            visual,
            modality,
            split,
        };
        Ok([entry(depth_rel, Modality::Depth), entry(seg_rel, Modality::Segmentation)])
    });
    let mut entries = Vec::with_capacity(2 * total);
    for w in written {
        entries.extend(w?);
    }
    let manifest = PairManifest {
        header: ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            depth_bounds: bounds,
            depth_convention: "larger-is-farther".into(),
            class_names: config.class_names(),
            palette,
        },
        entries,
        root: out.to_path_buf(),
    };
    manifest.write(&out.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Normalized depth maps of `entries`, nearest-resized to `size`, as
/// `[N, 1, size, size]`.
pub fn load_depth_tensor(m: &PairManifest, entries: &[&ManifestEntry], size: usize) -> Result<Tensor<f32>> {
    let maps = par::map_range(entries.len(), |i| -> Result<DepthImage> {
        read_depth_png(&m.resolve(&entries[i].visual))?.resize_nearest(size, size)
    });
    let mut data = Vec::with_capacity(entries.len() * size * size);
    for img in maps {
        data.extend_from_slice(img?.data());
    }
    Ok(Tensor::new(vec![entries.len(), 1, size, size], data)?)
}

/// Class maps of `entries`, nearest-resized to `size`.
pub fn load_label_maps(m: &PairManifest, entries: &[&ManifestEntry], size: usize) -> Result<Vec<LabelMap>> {
    par::map_range(entries.len(), |i| -> Result<LabelMap> {
        let map = read_label_png(&m.resolve(&entries[i].visual))?;
        if let Some(&bad) = map.data().iter().find(|&&c| c as usize >= m.num_classes()) {
            return Err(CoreError::invalid(format!("entry `{}` has class {bad} outside the palette", entries[i].id)));
        }
        map.resize_nearest(size, size)
    })
    .into_iter()
    .collect()
}

/// Spectrogram tensors (first window of each clip) of `entries`, stacked as
/// `[N, channels, size, size]`.
pub fn load_spectrograms(m: &PairManifest, entries: &[&ManifestEntry], pipeline: &AudioPipeline) -> Result<Tensor<f32>> {
    pipeline.validate()?;
    let specs = par::map_range(entries.len(), |i| -> Result<Tensor<f32>> {
        pipeline.process_first(&read_wav(&m.resolve(&entries[i].audio))?)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    if specs.is_empty() {
        return Err(CoreError::invalid("no audio entries"));
    }
    let refs: Vec<&Tensor<f32>> = specs.iter().collect();
    Tensor::stack(&refs).map_err(|e| CoreError::invalid(format!("clips disagree in channel count: {e}")))
}

/// Pixel frequency of each class over a set of label maps.
pub fn class_histogram(maps: &[LabelMap]) -> BTreeMap<u8, u64> {
    let mut h = BTreeMap::new();
    for m in maps {
        for &c in m.data() {
            *h.entry(c).or_insert(0) += 1;
        }
    }
    h
}

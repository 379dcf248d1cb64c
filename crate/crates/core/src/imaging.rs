//! Frames, PGM I/O, dataset manifests and the photon-statistics frame
//! generator.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::localization::{equilibrium_positions, IonChainLayout, LocalizationError, TrapParameters};
use crate::rng::{substream, DOMAIN_FRAMES, DOMAIN_STATES};
use crate::state::{format_bitstring, parse_bitstring, IonState};

pub const DEFAULT_WIDTH: usize = 200;
pub const DEFAULT_HEIGHT: usize = 32;
pub const DEFAULT_N_IONS: usize = 10;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("PGM format error in {field}: {reason}")]
    Format { field: &'static str, reason: String },
    #[error("frame has {actual} pixels, expected {width}x{height}")]
    PixelCount {
        width: usize,
        height: usize,
        actual: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("layout has {layout} ions but {states} states were given")]
    IonCountMismatch { layout: usize, states: usize },
    #[error("ion center ({x:.2}, {y:.2}) lies outside the {width}x{height} frame")]
    CenterOutsideFrame {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("invalid synthesis parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Localization(#[from] LocalizationError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ImagingError + '_ {
    move |source| ImagingError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One 8-bit grayscale camera image, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(ImagingError::PixelCount {
                width,
                height,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.pixels[y * self.width + x] = value;
    }

    /// Parse a binary (P5) PGM with maxval 255.
    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self, ImagingError> {
        let mut cursor = HeaderCursor { bytes, pos: 0 };
        let magic = cursor.token("magic")?;
        if magic != "P5" {
            return Err(ImagingError::Format {
                field: "magic",
                reason: format!("expected P5, found {magic:?}"),
            });
        }
        let width = cursor.number("width")?;
        let height = cursor.number("height")?;
        let maxval = cursor.number("maxval")?;
        if maxval != 255 {
            return Err(ImagingError::Format {
                field: "maxval",
                reason: format!("unsupported maxval {maxval}"),
            });
        }
        if width == 0 || height == 0 {
            return Err(ImagingError::Format {
                field: if width == 0 { "width" } else { "height" },
                reason: "dimension must be positive".into(),
            });
        }
        // exactly one whitespace byte separates maxval from the raster
        match bytes.get(cursor.pos) {
            Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
            _ => {
                return Err(ImagingError::Format {
                    field: "maxval",
                    reason: "missing whitespace before pixel data".into(),
                })
            }
        }
        let expected = width * height;
        let data = &bytes[cursor.pos..];
        if data.len() < expected {
            return Err(ImagingError::Format {
                field: "pixel data",
                reason: format!("truncated: {} of {expected} bytes", data.len()),
            });
        }
        Frame::new(width, height, data[..expected].to_vec())
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let header = format!("P5\n{} {}\n255\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.pixels.len());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self, field: &'static str) -> Result<String, ImagingError> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || b == b'#' {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImagingError::Format {
                field,
                reason: "missing".into(),
            });
        }
        String::from_utf8(self.bytes[start..self.pos].to_vec()).map_err(|_| ImagingError::Format {
            field,
            reason: "not ASCII".into(),
        })
    }

    fn number(&mut self, field: &'static str) -> Result<usize, ImagingError> {
        let tok = self.token(field)?;
        tok.parse().map_err(|_| ImagingError::Format {
            field,
            reason: format!("{tok:?} is not a non-negative integer"),
        })
    }
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Frame, ImagingError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    Frame::from_pgm_bytes(&bytes)
}

pub fn save_pgm(frame: &Frame, path: impl AsRef<Path>) -> Result<(), ImagingError> {
    let path = path.as_ref();
    fs::write(path, frame.to_pgm_bytes()).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Image path relative to the manifest's directory.
    pub image: PathBuf,
    /// Per-ion states as a '0'/'1' string, ion order left to right.
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub name: String,
    pub n_ions: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn validate_labels(&self) -> Result<(), String> {
        for entry in &self.entries {
            if let Some(label) = &entry.label {
                if label.chars().count() != self.n_ions {
                    return Err(format!(
                        "label {label:?} for {} has length {}, expected n_ions = {}",
                        entry.image.display(),
                        label.chars().count(),
                        self.n_ions
                    ));
                }
                parse_bitstring(label).map_err(|e| format!("{}: {e}", entry.image.display()))?;
            }
        }
        Ok(())
    }

    pub fn is_labeled(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.label.is_some())
    }

    /// Parsed labels, `None` if any entry is unlabeled.
    pub fn labels(&self) -> Option<Vec<Vec<IonState>>> {
        self.entries
            .iter()
            .map(|e| e.label.as_deref().and_then(|l| parse_bitstring(l).ok()))
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ImagingError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| ImagingError::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        fs::write(path, text + "\n").map_err(io_err(path))
    }
}

/// Accepts either the manifest file itself or a directory containing `manifest.json`.
pub fn resolve_manifest_path(path: impl AsRef<Path>) -> PathBuf {
    let path = path.as_ref();
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, ImagingError> {
    let path = resolve_manifest_path(path);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| ImagingError::Manifest {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    manifest.validate_labels().map_err(|reason| ImagingError::Manifest {
        path: path.clone(),
        reason,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    for entry in &manifest.entries {
        let image = base.join(&entry.image);
        if !image.is_file() {
            return Err(ImagingError::Manifest {
                path: path.clone(),
                reason: format!("missing image file {}", image.display()),
            });
        }
    }
    Ok(manifest)
}

/// A manifest with its frames loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn labels(&self) -> Option<Vec<Vec<IonState>>> {
        self.manifest.labels()
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, ImagingError> {
    let manifest_path = resolve_manifest_path(path);
    let manifest = load_manifest(&manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let frames = manifest
        .entries
        .par_iter()
        .map(|e| load_pgm(base.join(&e.image)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { manifest, frames })
}

/// Independent fair coin per ion and frame, i.e. the measurement statistics
/// of a Hadamard layer applied to |0…0⟩.
pub fn sample_states(n_ions: usize, n_frames: usize, seed: u64) -> Vec<Vec<IonState>> {
    (0..n_frames)
        .map(|f| {
            let mut rng = substream(seed, DOMAIN_STATES, f as u64);
            (0..n_ions)
                .map(|_| {
                    if rng.random::<bool>() {
                        IonState::Dark
                    } else {
                        IonState::Bright
                    }
                })
                .collect()
        })
        .collect()
}

/// How ion centers are placed in a synthetic frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpacingModel {
    Uniform {
        start_x: f64,
        spacing: f64,
        row_y: f64,
    },
    /// Harmonic-plus-Coulomb equilibrium positions mapped to pixels.
    Equilibrium {
        trap: TrapParameters,
        pixels_per_meter: f64,
        center_x: f64,
        row_y: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    pub n_ions: usize,
    /// Expected detected photons from a bright ion per exposure.
    pub bright_photon_mean: f64,
    /// Expected detected photons from a dark ion per exposure.
    pub dark_photon_mean: f64,
    /// Expected background counts per pixel.
    pub background_mean: f64,
    pub psf_sigma: f64,
    pub counts_per_photon: f64,
    pub ion_spacing_model: SpacingModel,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            n_ions: DEFAULT_N_IONS,
            bright_photon_mean: 400.0,
            dark_photon_mean: 4.0,
            background_mean: 0.5,
            psf_sigma: 1.2,
            counts_per_photon: 8.0,
            ion_spacing_model: SpacingModel::Uniform {
                start_x: 15.0,
                spacing: 18.0,
                row_y: 16.0,
            },
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), ImagingError> {
        let bad = |m: &str| Err(ImagingError::InvalidParams(m.to_string()));
        if self.n_ions == 0 {
            return bad("n_ions must be at least 1");
        }
        if !(self.dark_photon_mean >= 0.0 && self.bright_photon_mean > self.dark_photon_mean) {
            return bad("need bright_photon_mean > dark_photon_mean >= 0");
        }
        if !(self.psf_sigma > 0.0) {
            return bad("psf_sigma must be positive");
        }
        if !(self.counts_per_photon > 0.0) {
            return bad("counts_per_photon must be positive");
        }
        if !(self.background_mean >= 0.0) {
            return bad("background_mean must be non-negative");
        }
        if self.width == 0 || self.height == 0 {
            return bad("frame dimensions must be positive");
        }
        Ok(())
    }

    /// Ground-truth ion layout implied by the spacing model.
    pub fn layout(&self) -> Result<IonChainLayout, ImagingError> {
        let centers: Vec<(f64, f64)> = match &self.ion_spacing_model {
            SpacingModel::Uniform {
                start_x,
                spacing,
                row_y,
            } => (0..self.n_ions)
                .map(|i| (start_x + spacing * i as f64, *row_y))
                .collect(),
            SpacingModel::Equilibrium {
                trap,
                pixels_per_meter,
                center_x,
                row_y,
            } => equilibrium_positions(self.n_ions, trap)?
                .into_iter()
                .map(|x| (center_x + x * pixels_per_meter, *row_y))
                .collect(),
        };
        let layout = IonChainLayout::from_centers(centers)?;
        check_inside(&layout, self.width, self.height)?;
        Ok(layout)
    }
}

fn check_inside(layout: &IonChainLayout, width: usize, height: usize) -> Result<(), ImagingError> {
    for &(x, y) in layout.centers() {
        if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
            return Err(ImagingError::CenterOutsideFrame {
                x,
                y,
                width,
                height,
            });
        }
    }
    Ok(())
}

fn poisson_draw<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let d = Poisson::new(mean).expect("positive finite mean");
    d.sample(rng) as u64
}

/// Render one frame.
///
/// Each ion emits Poisson(bright/dark mean) photons; every photon lands at a
/// Gaussian offset from the ion center, rounded to the nearest pixel, and
/// deposits `counts_per_photon`. Background is Poisson(`background_mean`)
/// counts per pixel, drawn as a Poisson total scattered uniformly over the
/// frame (equal in distribution). Intensities are clipped to 255.
pub fn synth_frame<R: Rng + ?Sized>(
    params: &SynthParams,
    layout: &IonChainLayout,
    states: &[IonState],
    rng: &mut R,
) -> Result<Frame, ImagingError> {
    params.validate()?;
    if layout.len() != states.len() {
        return Err(ImagingError::IonCountMismatch {
            layout: layout.len(),
            states: states.len(),
        });
    }
    let (w, h) = (params.width, params.height);
    check_inside(layout, w, h)?;

    let mut acc = vec![0.0f64; w * h];
    let psf = Normal::new(0.0, params.psf_sigma).expect("psf_sigma validated");
    for (&(cx, cy), &state) in layout.centers().iter().zip(states) {
        let mean = match state {
            IonState::Bright => params.bright_photon_mean,
            IonState::Dark => params.dark_photon_mean,
        };
        let photons = poisson_draw(mean, rng);
        for _ in 0..photons {
            let px = (cx + psf.sample(rng)).round();
            let py = (cy + psf.sample(rng)).round();
            if px >= 0.0 && py >= 0.0 && px < w as f64 && py < h as f64 {
                acc[py as usize * w + px as usize] += params.counts_per_photon;
            }
        }
    }
    let background = poisson_draw(params.background_mean * (w * h) as f64, rng);
    for _ in 0..background {
        let idx = rng.random_range(0..w * h);
        acc[idx] += 1.0;
    }
    let pixels = acc.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    Frame::new(w, h, pixels)
}

/// Render frame `index` on its own RNG substream of `seed`.
pub fn synth_frame_indexed(
    params: &SynthParams,
    layout: &IonChainLayout,
    states: &[IonState],
    seed: u64,
    index: usize,
) -> Result<Frame, ImagingError> {
    let mut rng = substream(seed, DOMAIN_FRAMES, index as u64);
    synth_frame(params, layout, states, &mut rng)
}

/// Render many frames in parallel; output order follows `labels`.
pub fn synth_frames(
    params: &SynthParams,
    layout: &IonChainLayout,
    labels: &[Vec<IonState>],
    seed: u64,
) -> Result<Vec<Frame>, ImagingError> {
    labels
        .par_iter()
        .enumerate()
        .map(|(i, states)| synth_frame_indexed(params, layout, states, seed, i))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatePreparation {
    /// Uniform over bitstrings (Hadamard on every qubit).
    Hadamard,
    AllBright,
}

/// Labels for `n_frames` frames under the given preparation.
pub fn prepare_states(
    preparation: StatePreparation,
    n_ions: usize,
    n_frames: usize,
    seed: u64,
) -> Vec<Vec<IonState>> {
    match preparation {
        StatePreparation::Hadamard => sample_states(n_ions, n_frames, seed),
        StatePreparation::AllBright => vec![vec![IonState::Bright; n_ions]; n_frames],
    }
}

/// Synthetic frames held in memory together with their ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub layout: IonChainLayout,
    pub labels: Vec<Vec<IonState>>,
    pub frames: Vec<Frame>,
}

pub fn synth_in_memory(
    params: &SynthParams,
    preparation: StatePreparation,
    n_frames: usize,
    seed: u64,
) -> Result<SyntheticSet, ImagingError> {
    params.validate()?;
    let layout = params.layout()?;
    let labels = prepare_states(preparation, params.n_ions, n_frames, seed);
    let frames = synth_frames(params, &layout, &labels, seed)?;
    Ok(SyntheticSet {
        layout,
        labels,
        frames,
    })
}

/// Write `n_frames` PGMs plus `manifest.json` with ground-truth labels into `out_dir`.
pub fn synth_dataset(
    params: &SynthParams,
    preparation: StatePreparation,
    n_frames: usize,
    out_dir: impl AsRef<Path>,
    seed: u64,
    name: &str,
) -> Result<DatasetManifest, ImagingError> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let set = synth_in_memory(params, preparation, n_frames, seed)?;
    let entries = set
        .frames
        .par_iter()
        .zip(set.labels.par_iter())
        .enumerate()
        .map(|(i, (frame, states))| {
            let file = PathBuf::from(format!("frame_{i:05}.pgm"));
            save_pgm(frame, out_dir.join(&file))?;
            Ok(ManifestEntry {
                image: file,
                label: Some(format_bitstring(states)),
            })
        })
        .collect::<Result<Vec<_>, ImagingError>>()?;
    let manifest = DatasetManifest {
        name: name.to_string(),
        n_ions: params.n_ions,
        entries,
    };
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

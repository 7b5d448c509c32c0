//! On-disk formats: 16-bit PNG images, little-endian PFM depth and flow,
//! plain-text poses, TOML intrinsics, manifests and configuration, and the
//! bundle and result directory layouts.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::LevelReport;
use crate::synth::SynthInstance;
use crate::types::{DepthMap, EnergyParams, FlowField, Image, Intrinsics, Pose6};

pub const BLURRY_FILE: &str = "blurry.png";
pub const DEPTH_FILE: &str = "depth.pfm";
pub const INTRINSICS_FILE: &str = "intrinsics.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CLEAN_FILE: &str = "clean.png";
pub const TRUE_POSE_FILE: &str = "true_pose.txt";
pub const TRUE_FLOW_FILE: &str = "true_flow.pfm";

pub const LATENT_FILE: &str = "latent.png";
pub const POSE_FILE: &str = "pose.txt";
pub const FLOW_FILE: &str = "flow.pfm";
pub const ENERGY_FILE: &str = "energy.csv";
pub const STATUS_FILE: &str = "status.txt";
pub const REPORT_FILE: &str = "report.toml";

const U16_MAX: f64 = u16::MAX as f64;

fn format_error(what: &'static str, detail: impl ToString) -> Error {
    Error::Format {
        what,
        detail: detail.to_string(),
    }
}

fn open(path: &Path, what: &'static str) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound {
            what,
            path: path.to_path_buf(),
        },
        _ => Error::Io(e),
    })
}

fn read_text(path: &Path, what: &'static str) -> Result<String> {
    let mut text = String::new();
    open(path, what)?.read_to_string(&mut text)?;
    Ok(text)
}

/// Writes a grey or RGB image as a 16-bit PNG. Values are clamped to
/// `[0, 1]` and rounded to the nearest of 65536 levels.
pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let color = match image.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(format_error("image", format!("cannot store {c} channels as PNG"))),
    };
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, image.width() as u32, image.height() as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder.write_header().map_err(|e| format_error("PNG", e))?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .flat_map(|v| ((v.clamp(0.0, 1.0) * U16_MAX).round() as u16).to_be_bytes())
        .collect();
    writer.write_image_data(&bytes).map_err(|e| format_error("PNG", e))?;
    writer.finish().map_err(|e| format_error("PNG", e))?;
    Ok(())
}

/// Reads an 8- or 16-bit PNG into `[0, 1]`. Palettes are expanded and
/// alpha is dropped.
pub fn read_png(path: &Path, what: &'static str) -> Result<Image> {
    let mut decoder = png::Decoder::new(BufReader::new(open(path, what)?));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| format_error("PNG", e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_error("PNG", "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format_error("PNG", e))?;
    buf.truncate(info.buffer_size());
    let (h, w) = (info.height as usize, info.width as usize);
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Sixteen => buf
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / U16_MAX)
            .collect(),
        png::BitDepth::Eight => buf.iter().map(|&b| b as f64 / 255.0).collect(),
        d => return Err(format_error("PNG", format!("unsupported bit depth {d:?}"))),
    };
    let (stored, kept) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(format_error("PNG", "unexpanded palette")),
    };
    let data = samples
        .chunks_exact(stored)
        .flat_map(|px| px[..kept].to_vec())
        .collect();
    Image::new(h, w, kept, data)
}

fn write_pfm(path: &Path, height: usize, width: usize, channels: usize, rows: &[f32]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let tag = if channels == 3 { "PF" } else { "Pf" };
    write!(out, "{tag}\n{width} {height}\n-1.0\n")?;
    let stride = width * channels;
    for r in (0..height).rev() {
        for v in &rows[r * stride..(r + 1) * stride] {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Returns `(height, width, channels, samples)` with rows top to bottom.
fn read_pfm(path: &Path, what: &'static str) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut bytes = Vec::new();
    open(path, what)?.read_to_end(&mut bytes)?;
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_error("PFM", "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        t => return Err(format_error("PFM", format!("unknown tag {t:?}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|e| format_error("PFM", e));
    let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
    let scale: f64 = fields[3].parse().map_err(|e| format_error("PFM", e))?;
    let little = scale < 0.0;
    let stride = width * channels;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != 4 * stride * height {
        return Err(format_error(
            "PFM",
            format!("expected {} data bytes, found {}", 4 * stride * height, body.len()),
        ));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    let mut rows = Vec::with_capacity(values.len());
    for r in (0..height).rev() {
        rows.extend_from_slice(&values[r * stride..(r + 1) * stride]);
    }
    Ok((height, width, channels, rows))
}

/// Single-channel PFM; holes are stored as 0.
pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let rows: Vec<f32> = depth
        .data()
        .iter()
        .zip(depth.valid())
        .map(|(&z, &ok)| if ok { z as f32 } else { 0.0 })
        .collect();
    write_pfm(path, depth.height(), depth.width(), 1, &rows)
}

/// Non-positive and non-finite samples become holes.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let (h, w, c, rows) = read_pfm(path, "depth map")?;
    if c != 1 {
        return Err(format_error("depth map", "expected a single-channel PFM"));
    }
    DepthMap::from_raw(h, w, rows.into_iter().map(f64::from).collect())
}

/// Three-channel PFM holding `(du, dv, valid)` with `valid` 1 or 0.
pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    let rows: Vec<f32> = flow
        .data()
        .iter()
        .zip(flow.valid())
        .flat_map(|(f, &ok)| [f[0] as f32, f[1] as f32, if ok { 1.0 } else { 0.0 }])
        .collect();
    write_pfm(path, flow.height(), flow.width(), 3, &rows)
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let (h, w, c, rows) = read_pfm(path, "flow field")?;
    if c != 3 {
        return Err(format_error("flow field", "expected a three-channel PFM"));
    }
    let data = rows.chunks_exact(3).map(|p| [p[0] as f64, p[1] as f64]).collect();
    let valid = rows.chunks_exact(3).map(|p| p[2] != 0.0).collect();
    FlowField::new(h, w, data, valid)
}

/// One line `θx θy θz vx vy vz`, each printed with enough digits to read
/// back exactly.
pub fn format_pose(p: &Pose6) -> String {
    let fields: Vec<String> = p.to_array().iter().map(|v| format!("{v:?}")).collect();
    format!("{}\n", fields.join(" "))
}

pub fn parse_pose(text: &str) -> Result<Pose6> {
    let values = text
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|e| format_error("pose", format!("{s:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != 6 {
        return Err(format_error("pose", format!("expected 6 numbers, found {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(format_error("pose", "non-finite value"));
    }
    Pose6::new([values[0], values[1], values[2]], [values[3], values[4], values[5]])
}

pub fn write_pose(path: &Path, p: &Pose6) -> Result<()> {
    fs::write(path, format_pose(p))?;
    Ok(())
}

pub fn read_pose(path: &Path) -> Result<Pose6> {
    parse_pose(&read_text(path, "pose file")?)
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<()> {
    fs::write(path, toml::to_string(k).map_err(|e| format_error("intrinsics", e))?)?;
    Ok(())
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    let k: Intrinsics =
        toml::from_str(&read_text(path, "intrinsics file")?).map_err(|e| format_error("intrinsics", e))?;
    Intrinsics::new(k.fx, k.fy, k.cx, k.cy)
}

/// Energy parameters from a TOML file; absent fields keep their defaults.
/// Values are not validated so that later overrides can still fix them.
pub fn read_params(path: &Path) -> Result<EnergyParams> {
    toml::from_str(&read_text(path, "configuration file")?).map_err(|e| format_error("configuration", e))
}

/// Origin of the clean image and depth of a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum SceneSource {
    /// Seeded procedural scene on a slanted plane.
    Procedural { size: usize },
    /// Clean image and depth read from files.
    Files { clean: PathBuf, depth: PathBuf },
}

/// Everything needed to regenerate a synthetic bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Manifest {
    pub seed: u64,
    #[serde(rename = "N")]
    pub half_samples: usize,
    pub noise_sigma: f64,
    pub sigma_a: f64,
    pub sigma_t: f64,
    pub intrinsics: Intrinsics,
    pub scene: SceneSource,
}

impl Manifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| format_error("manifest", e))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| format_error("manifest", e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_toml(&read_text(path, "manifest")?)
    }
}

/// Observation, calibration and optional ground truth of one instance.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub blurry: Image,
    pub depth: DepthMap,
    pub intrinsics: Intrinsics,
    pub clean: Option<Image>,
    pub true_pose: Option<Pose6>,
    pub true_flow: Option<FlowField>,
    pub manifest: Option<Manifest>,
}

pub fn write_bundle(dir: &Path, instance: &SynthInstance, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_png(&dir.join(BLURRY_FILE), &instance.blurry)?;
    write_depth(&dir.join(DEPTH_FILE), &instance.depth)?;
    write_intrinsics(&dir.join(INTRINSICS_FILE), &instance.intrinsics)?;
    write_png(&dir.join(CLEAN_FILE), &instance.clean)?;
    write_pose(&dir.join(TRUE_POSE_FILE), &instance.true_pose)?;
    write_flow(&dir.join(TRUE_FLOW_FILE), &instance.true_flow)?;
    fs::write(dir.join(MANIFEST_FILE), manifest.to_toml()?)?;
    Ok(())
}

fn optional<T>(path: PathBuf, read: impl Fn(&Path) -> Result<T>) -> Result<Option<T>> {
    if path.exists() {
        read(&path).map(Some)
    } else {
        Ok(None)
    }
}

/// Reads a bundle directory. Ground-truth files and the manifest are
/// optional.
pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    Ok(Bundle {
        blurry: read_png(&dir.join(BLURRY_FILE), "blurry image")?,
        depth: read_depth(&dir.join(DEPTH_FILE))?,
        intrinsics: read_intrinsics(&dir.join(INTRINSICS_FILE))?,
        clean: optional(dir.join(CLEAN_FILE), |p| read_png(p, "clean image"))?,
        true_pose: optional(dir.join(TRUE_POSE_FILE), read_pose)?,
        true_flow: optional(dir.join(TRUE_FLOW_FILE), read_flow)?,
        manifest: optional(dir.join(MANIFEST_FILE), Manifest::read)?,
    })
}

/// Rows `level,iteration,energy` over every level's energy trace.
pub fn write_energy_csv(path: &Path, levels: &[LevelReport]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| format_error("energy trace", e))?;
    writer
        .write_record(["level", "iteration", "energy"])
        .map_err(|e| format_error("energy trace", e))?;
    for report in levels {
        for (i, e) in report.energy_trace.iter().enumerate() {
            writer
                .write_record([report.level.to_string(), i.to_string(), format!("{e:?}")])
                .map_err(|e| format_error("energy trace", e))?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Parses an energy trace back into `(level, iteration, energy)` rows.
pub fn read_energy_csv(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let file = open(path, "energy trace")?;
    let mut reader = csv::Reader::from_reader(file);
    reader
        .deserialize()
        .map(|row| row.map_err(|e| format_error("energy trace", e)))
        .collect()
}

/// Outcome of a deblur run as recorded in the status file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Status {
    pub ok: bool,
    pub converged: bool,
    /// Set when some result files are missing or stale.
    pub partial: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub message: String,
    pub wall_time_secs: f64,
}

impl Status {
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, toml::to_string(self).map_err(|e| format_error("status", e))?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        toml::from_str(&read_text(path, "status file")?).map_err(|e| format_error("status", e))
    }
}

/// Latent image, pose and induced flow of a finished run.
#[derive(Debug, Clone)]
pub struct StoredResult {
    pub latent: Image,
    pub pose: Pose6,
    pub flow: FlowField,
}

pub fn read_result(dir: &Path) -> Result<StoredResult> {
    Ok(StoredResult {
        latent: read_png(&dir.join(LATENT_FILE), "latent image")?,
        pose: read_pose(&dir.join(POSE_FILE))?,
        flow: read_flow(&dir.join(FLOW_FILE))?,
    })
}

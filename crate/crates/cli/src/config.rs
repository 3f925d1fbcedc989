//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment. Every key has a default; unknown
//! keys are rejected. Flag overrides (`--set key=value`) are applied after
//! the file. The resolved configuration is echoed into every manifest.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use udfkit::geometry::Vec3;
use udfkit::mlp::TrainConfig;
use udfkit::sampler::SamplerConfig;
use udfkit::tracer::{Camera, Strategy, TraceConfig};

/// Pinhole camera with the field of view in degrees, as written in files.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraConfig {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraConfig {
    pub fn camera(&self) -> Camera {
        Camera {
            position: self.position,
            look_at: self.look_at,
            up: self.up,
            fov_y: self.fov_deg.to_radians(),
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshConfig {
    pub initial_res: usize,
    pub levels: u32,
    /// `None` means half the finest voxel edge.
    pub tau: Option<f64>,
    /// Write meshes in the coordinates of the original soup.
    pub original_frame: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Half-height of the removed equatorial band of the split sphere.
    pub gap: f64,
    pub segments: usize,
    /// Latitude rings per cap.
    pub rings: usize,
    pub planes: usize,
    /// Tub wall height relative to its footprint.
    pub wall: f64,
    /// Rim width relative to its footprint.
    pub rim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub mesh_points: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sample: SamplerConfig,
    pub train: TrainConfig,
    pub trace: TraceConfig,
    pub camera: CameraConfig,
    pub mesh: MeshConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sample: SamplerConfig::default(),
            train: TrainConfig::default(),
            trace: TraceConfig::default(),
            camera: CameraConfig {
                position: Vec3::new(0.9, -1.2, 0.7),
                look_at: Vec3::ZERO,
                up: Vec3::new(0.0, 0.0, 1.0),
                fov_deg: 40.0,
                width: 128,
                height: 128,
            },
            mesh: MeshConfig {
                initial_res: 16,
                levels: 3,
                tau: None,
                original_frame: true,
            },
            synth: SynthConfig {
                gap: 0.1,
                segments: 64,
                rings: 16,
                planes: 3,
                wall: 0.6,
                rim: 0.1,
            },
            eval: EvalConfig {
                mesh_points: 30_000,
                seed: 0xE7A1,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| anyhow!("{key}: cannot parse {v:?}: {e}"))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    match v.strip_prefix("0x").or_else(|| v.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).map_err(|e| anyhow!("{key}: cannot parse {v:?}: {e}")),
        None => parse(key, v),
    }
}

fn parse_vec3(key: &str, v: &str) -> Result<Vec3> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        bail!("{key}: expected x,y,z, got {v:?}");
    }
    Ok(Vec3::new(parse(key, parts[0])?, parse(key, parts[1])?, parse(key, parts[2])?))
}

fn fmt_vec3(v: Vec3) -> String {
    format!("{},{},{}", v.x, v.y, v.z)
}

impl RunConfig {
    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let r = &self.trace;
        let c = &self.camera;
        vec![
            ("sample.n_surface", self.sample.n_surface.to_string()),
            ("sample.n_uniform", self.sample.n_uniform.to_string()),
            ("sample.seed", self.sample.seed.to_string()),
            ("train.lr", t.adam.lr.to_string()),
            ("train.beta1", t.adam.beta1.to_string()),
            ("train.beta2", t.adam.beta2.to_string()),
            ("train.adam_eps", t.adam.eps.to_string()),
            ("train.batch", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.hidden", t.hidden_dim.to_string()),
            ("train.depth", t.depth.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("trace.strategy", r.strategy.name().to_string()),
            ("trace.eps", r.eps.to_string()),
            ("trace.max_iters", r.max_iters.to_string()),
            ("trace.resample_k", r.resample_k.to_string()),
            ("trace.resample_window", r.resample_window.to_string()),
            ("trace.min_cos", r.min_cos.to_string()),
            ("camera.position", fmt_vec3(c.position)),
            ("camera.look_at", fmt_vec3(c.look_at)),
            ("camera.up", fmt_vec3(c.up)),
            ("camera.fov_deg", c.fov_deg.to_string()),
            ("camera.width", c.width.to_string()),
            ("camera.height", c.height.to_string()),
            ("mesh.initial_res", self.mesh.initial_res.to_string()),
            ("mesh.levels", self.mesh.levels.to_string()),
            ("mesh.tau", self.mesh.tau.map_or("auto".to_string(), |t| t.to_string())),
            ("mesh.original_frame", self.mesh.original_frame.to_string()),
            ("synth.gap", self.synth.gap.to_string()),
            ("synth.segments", self.synth.segments.to_string()),
            ("synth.rings", self.synth.rings.to_string()),
            ("synth.planes", self.synth.planes.to_string()),
            ("synth.wall", self.synth.wall.to_string()),
            ("synth.rim", self.synth.rim.to_string()),
            ("eval.mesh_points", self.eval.mesh_points.to_string()),
            ("eval.seed", self.eval.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "sample.n_surface" => self.sample.n_surface = parse(key, v)?,
            "sample.n_uniform" => self.sample.n_uniform = parse(key, v)?,
            "sample.seed" => self.sample.seed = parse_u64(key, v)?,
            "train.lr" => self.train.adam.lr = parse(key, v)?,
            "train.beta1" => self.train.adam.beta1 = parse(key, v)?,
            "train.beta2" => self.train.adam.beta2 = parse(key, v)?,
            "train.adam_eps" => self.train.adam.eps = parse(key, v)?,
            "train.batch" => self.train.batch_size = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.seed" => self.train.seed = parse_u64(key, v)?,
            "train.hidden" => self.train.hidden_dim = parse(key, v)?,
            "train.depth" => self.train.depth = parse(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "trace.strategy" => {
                self.trace.strategy =
                    Strategy::from_name(v).ok_or_else(|| anyhow!("{key}: unknown strategy {v:?}"))?
            }
            "trace.eps" => self.trace.eps = parse(key, v)?,
            "trace.max_iters" => self.trace.max_iters = parse(key, v)?,
            "trace.resample_k" => self.trace.resample_k = parse(key, v)?,
            "trace.resample_window" => self.trace.resample_window = parse(key, v)?,
            "trace.min_cos" => self.trace.min_cos = parse(key, v)?,
            "camera.position" => self.camera.position = parse_vec3(key, v)?,
            "camera.look_at" => self.camera.look_at = parse_vec3(key, v)?,
            "camera.up" => self.camera.up = parse_vec3(key, v)?,
            "camera.fov_deg" => self.camera.fov_deg = parse(key, v)?,
            "camera.width" => self.camera.width = parse(key, v)?,
            "camera.height" => self.camera.height = parse(key, v)?,
            "mesh.initial_res" => self.mesh.initial_res = parse(key, v)?,
            "mesh.levels" => self.mesh.levels = parse(key, v)?,
            "mesh.tau" => self.mesh.tau = if v == "auto" { None } else { Some(parse(key, v)?) },
            "mesh.original_frame" => self.mesh.original_frame = parse(key, v)?,
            "synth.gap" => self.synth.gap = parse(key, v)?,
            "synth.segments" => self.synth.segments = parse(key, v)?,
            "synth.rings" => self.synth.rings = parse(key, v)?,
            "synth.planes" => self.synth.planes = parse(key, v)?,
            "synth.wall" => self.synth.wall = parse(key, v)?,
            "synth.rim" => self.synth.rim = parse(key, v)?,
            "eval.mesh_points" => self.eval.mesh_points = parse(key, v)?,
            "eval.seed" => self.eval.seed = parse_u64(key, v)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Applies a `key = value` document on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", n + 1))?;
            self.set(k.trim(), v).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("override {kv:?} is not key=value"))?;
        self.set(k.trim(), v)
    }

    /// Defaults, then the optional file, then the overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for kv in overrides {
            cfg.apply_override(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| anyhow!("{e}"))?;
        self.trace.validate().map_err(|e| anyhow!("{e}"))?;
        self.camera.camera().validate().map_err(|e| anyhow!("camera: {e}"))?;
        if self.sample.n_surface == 0 {
            bail!("sample.n_surface must be positive");
        }
        if let Some(t) = self.mesh.tau {
            if !(t.is_finite() && t > 0.0) {
                bail!("mesh.tau must be positive");
            }
        }
        let s = &self.synth;
        if !(s.gap >= 0.0 && s.gap < 0.5) {
            bail!("synth.gap must be in [0, 0.5)");
        }
        if s.segments < 3 || s.rings < 1 || s.planes < 1 {
            bail!("synth.segments >= 3, synth.rings >= 1 and synth.planes >= 1 are required");
        }
        if !(s.wall > 0.0 && s.wall.is_finite() && s.rim >= 0.0 && s.rim.is_finite()) {
            bail!("synth.wall must be positive and synth.rim non-negative");
        }
        if self.eval.mesh_points == 0 {
            bail!("eval.mesh_points must be positive");
        }
        Ok(())
    }

    /// The resolved configuration as `key = value` text.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

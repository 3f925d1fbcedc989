//! The six pipeline steps. Each reads its inputs, writes its artifacts and a
//! `.manifest` next to the primary output, and never touches its inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use udfkit::field::{load_model, save_model, AnalyticField, Field, FieldError, FieldModel, ModelIoError};
use udfkit::geometry::{normalize_soup, Direction3, Mesh, Normalization, TriangleSoup, Vec3};
use udfkit::mesher::{extract_mesh, MesherError};
use udfkit::metrics::{chamfer, depth_mae, normal_error, pixel_iou, sample_mesh_points, MapView, PixelValidity};
use udfkit::mlp::{train_fields_with, TrainError};
use udfkit::sampler::{generate_sample_set, read_sample_set, write_sample_set, SampleSet};
use udfkit::soup_io::{load_soup_auto, save_mesh, MeshFileFormat};
use udfkit::tracer::{read_depth, read_normals, render, save_render, Strategy, TraceError};

use crate::config::RunConfig;
use crate::manifest::{hex, manifest_path, read_manifest, Manifest};
use crate::synth::{self, Shape, SPLIT_SPHERE_RADIUS};

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

impl fmt::Display for CliError {
    /// The error chain, skipping causes already quoted by their parent.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut prev = String::new();
        for (i, cause) in self.error.chain().enumerate() {
            let msg = cause.to_string();
            if i > 0 && prev.contains(&msg) {
                continue;
            }
            if i > 0 {
                f.write_str(": ")?;
            }
            f.write_str(&msg)?;
            prev = msg;
        }
        Ok(())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub trait Classify<T> {
    fn kind(self, kind: ExitKind) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn kind(self, kind: ExitKind) -> CliResult<T> {
        self.map_err(|e| CliError { kind, error: e.into() })
    }
}

fn usage(msg: impl fmt::Display) -> CliError {
    CliError { kind: ExitKind::Usage, error: anyhow!("{msg}") }
}

fn field_kind(e: &FieldError) -> ExitKind {
    match e {
        FieldError::AtIndex { source, .. } => field_kind(source),
        FieldError::NonFiniteOutput | FieldError::DegenerateNormal(_) => ExitKind::Numeric,
        FieldError::NonFiniteInput => ExitKind::Data,
    }
}

fn from_field(e: FieldError) -> CliError {
    CliError { kind: field_kind(&e), error: e.into() }
}

fn from_trace(e: TraceError) -> CliError {
    let kind = match &e {
        TraceError::Field(f) => field_kind(f),
        _ => ExitKind::Usage,
    };
    CliError { kind, error: e.into() }
}

fn from_mesher(e: MesherError) -> CliError {
    match e {
        MesherError::Field(f) => from_field(f),
        e => CliError { kind: ExitKind::Usage, error: e.into() },
    }
}

fn from_model_io(e: ModelIoError, path: &Path) -> CliError {
    CliError { kind: ExitKind::Data, error: anyhow::Error::new(e).context(format!("loading model {}", path.display())) }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Output mesh format from an explicit name or the file extension.
pub fn mesh_format(path: &Path, name: Option<&str>) -> CliResult<MeshFileFormat> {
    if let Some(n) = name {
        return MeshFileFormat::from_name(n).ok_or_else(|| usage(format!("unknown mesh format {n:?}")));
    }
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("obj") => Ok(MeshFileFormat::ObjAscii),
        Some("ply") => Ok(MeshFileFormat::PlyBinaryLe),
        _ => Err(usage(format!("cannot infer a mesh format from {}; use --format", path.display()))),
    }
}

pub fn cmd_synth(cfg: &RunConfig, shape: Shape, out: &Path, format: Option<&str>) -> CliResult<()> {
    let fmt = mesh_format(out, format)?;
    let soup = synth::generate(shape, &cfg.synth).kind(ExitKind::Usage)?;
    save_mesh(&Mesh::from_soup(&soup), out, fmt).kind(ExitKind::Data)?;
    let mut m = Manifest::new("synth", cfg);
    m.fact("shape", shape.name()).fact("triangles", soup.len());
    m.output(out).kind(ExitKind::Data)?;
    m.write(&manifest_path(out)).kind(ExitKind::Data)?;
    println!("{}: {} triangles", out.display(), soup.len());
    Ok(())
}

fn load_normalized(input: &Path) -> CliResult<(TriangleSoup, Normalization)> {
    let loaded = load_soup_auto(input).with_context(|| format!("loading {}", input.display())).kind(ExitKind::Data)?;
    if loaded.dropped_degenerate > 0 {
        log::warn!("{}: dropped {} degenerate triangles", input.display(), loaded.dropped_degenerate);
    }
    normalize_soup(&loaded.soup).kind(ExitKind::Data)
}

/// Counts of labelled distances per bin, with the bin upper edges.
pub fn distance_histogram(set: &SampleSet) -> Vec<(f64, usize)> {
    let edges = [1e-3, 1e-2, 3e-2, 1e-1, f64::INFINITY];
    let mut counts = vec![0usize; edges.len()];
    for s in set.train.iter().chain(&set.val) {
        let bin = edges.iter().position(|&e| s.dist < e).unwrap_or(edges.len() - 1);
        counts[bin] += 1;
    }
    edges.into_iter().zip(counts).collect()
}

pub fn cmd_sample(cfg: &RunConfig, input: &Path, out: &Path) -> CliResult<()> {
    let (soup, norm) = load_normalized(input)?;
    let set = generate_sample_set(&soup, &cfg.sample);
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display())).kind(ExitKind::Data)?);
    write_sample_set(&mut w, &set).kind(ExitKind::Data)?;
    w.flush().kind(ExitKind::Data)?;
    println!("train {} / val {}", set.train.len(), set.val.len());
    let mut lo = 0.0;
    for (hi, n) in distance_histogram(&set) {
        println!("  dist [{lo}, {hi}): {n}");
        lo = hi;
    }
    let mut m = Manifest::new("sample", cfg);
    m.input("soup", input).kind(ExitKind::Data)?;
    m.fact("normalization.scale", norm.scale)
        .fact("normalization.offset", format!("{},{},{}", norm.offset.x, norm.offset.y, norm.offset.z))
        .fact("source_digest", hex(&set.source_digest))
        .fact("train", set.train.len())
        .fact("val", set.val.len());
    m.output(out).kind(ExitKind::Data)?;
    m.write(&manifest_path(out)).kind(ExitKind::Data)
}

/// Normalization recorded by `sample` next to a sample set, identity if the
/// manifest is missing.
fn sample_normalization(samples: &Path) -> CliResult<Normalization> {
    let path = manifest_path(samples);
    if !path.exists() {
        log::warn!("{} not found; assuming the soup was already normalized", path.display());
        return Ok(Normalization::IDENTITY);
    }
    let entries: BTreeMap<String, String> = read_manifest(&path).kind(ExitKind::Data)?.into_iter().collect();
    let get = |k: &str| entries.get(k).ok_or_else(|| anyhow!("{} lacks {k}", path.display()));
    let scale: f64 = get("normalization.scale").and_then(|v| Ok(v.parse()?)).kind(ExitKind::Data)?;
    let off: Vec<f64> = get("normalization.offset")
        .and_then(|v| v.split(',').map(|c| Ok(c.trim().parse::<f64>()?)).collect::<anyhow::Result<Vec<f64>>>())
        .kind(ExitKind::Data)?;
    if off.len() != 3 || !(scale.is_finite() && scale > 0.0) {
        return Err(CliError { kind: ExitKind::Data, error: anyhow!("{}: bad normalization", path.display()) });
    }
    Ok(Normalization { scale, offset: Vec3::new(off[0], off[1], off[2]) })
}

fn model_files(path: &Path) -> [PathBuf; 3] {
    [path.to_path_buf(), with_suffix(path, ".udf.bin"), with_suffix(path, ".nvf.bin")]
}

pub fn cmd_train(cfg: &RunConfig, samples_path: &Path, out: &Path) -> CliResult<()> {
    let f = File::open(samples_path).with_context(|| format!("opening {}", samples_path.display())).kind(ExitKind::Data)?;
    let samples = read_sample_set(&mut BufReader::new(f)).kind(ExitKind::Data)?;
    let norm = sample_normalization(samples_path)?;
    let csv_path = with_suffix(out, ".losses.csv");
    let mut csv = String::from("epoch,train_udf,train_nvf,val_udf,val_nvf\n");
    let mut checkpoint_err = None;
    let every = cfg.train.checkpoint_every;
    let result = train_fields_with(&samples, &cfg.train, |e, model| {
        csv.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.train_udf, e.train_nvf, e.val_udf, e.val_nvf));
        if every > 0 && e.epoch % every == 0 && checkpoint_err.is_none() {
            let mut m = model.clone();
            m.normalization = norm;
            if let Err(err) = save_model(&m, &with_suffix(out, &format!(".epoch{}", e.epoch))) {
                checkpoint_err = Some(err);
            }
        }
    });
    let (mut model, log) = match result {
        Ok(r) => r,
        Err(e @ TrainError::NonFinite { .. }) => return Err(e).kind(ExitKind::Numeric),
        Err(e @ (TrainError::Config(_) | TrainError::Mlp(_))) => return Err(e).kind(ExitKind::Usage),
        Err(e) => return Err(e).kind(ExitKind::Data),
    };
    if let Some(e) = checkpoint_err {
        return Err(e).kind(ExitKind::Data);
    }
    model.normalization = norm;
    save_model(&model, out).kind(ExitKind::Data)?;
    fs::write(&csv_path, csv).kind(ExitKind::Data)?;
    let mut m = Manifest::new("train", cfg);
    m.input("samples", samples_path).kind(ExitKind::Data)?;
    m.fact("best_epoch_udf", log.best_epoch_udf).fact("best_epoch_nvf", log.best_epoch_nvf);
    for p in model_files(out).iter().chain([&csv_path]) {
        m.output(p).kind(ExitKind::Data)?;
    }
    m.write(&manifest_path(out)).kind(ExitKind::Data)?;
    println!("best epochs: udf {}, nvf {}", log.best_epoch_udf, log.best_epoch_nvf);
    Ok(())
}

/// Analytic shapes matching the synthesized soups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyticShape {
    Sphere,
    SplitSphere,
    /// Exact distance to the soup given with `--input`.
    Soup,
}

impl AnalyticShape {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "sphere" => Some(Self::Sphere),
            "split-sphere" => Some(Self::SplitSphere),
            "soup" => Some(Self::Soup),
            _ => None,
        }
    }
}

/// Where field values come from.
pub enum Source {
    Model(PathBuf),
    Analytic(AnalyticShape, Option<PathBuf>),
}

enum LoadedField {
    Model(FieldModel),
    Analytic(AnalyticField),
}

impl LoadedField {
    fn as_field(&self) -> &dyn Field {
        match self {
            LoadedField::Model(m) => m,
            LoadedField::Analytic(a) => a,
        }
    }

    fn normalization(&self) -> Normalization {
        match self {
            LoadedField::Model(m) => m.normalization,
            LoadedField::Analytic(_) => Normalization::IDENTITY,
        }
    }
}

fn load_source(cfg: &RunConfig, src: &Source, m: &mut Manifest) -> CliResult<LoadedField> {
    match src {
        Source::Model(path) => {
            let model = load_model(path).map_err(|e| from_model_io(e, path))?;
            let [man, udf, nvf] = model_files(path);
            m.input("model", &man).kind(ExitKind::Data)?;
            m.input("model_udf", &udf).kind(ExitKind::Data)?;
            m.input("model_nvf", &nvf).kind(ExitKind::Data)?;
            Ok(LoadedField::Model(model))
        }
        Source::Analytic(shape, input) => {
            m.fact("analytic", format!("{shape:?}"));
            let r = SPLIT_SPHERE_RADIUS;
            Ok(LoadedField::Analytic(match shape {
                AnalyticShape::Sphere => AnalyticField::Sphere { center: Vec3::ZERO, radius: r },
                AnalyticShape::SplitSphere => {
                    AnalyticField::SplitSphere { center: Vec3::ZERO, radius: r, gap: cfg.synth.gap }
                }
                AnalyticShape::Soup => {
                    let path = input.as_ref().ok_or_else(|| usage("--analytic soup needs --input"))?;
                    m.input("soup", path).kind(ExitKind::Data)?;
                    AnalyticField::SoupBrute(load_normalized(path)?.0)
                }
            }))
        }
    }
}

pub fn cmd_render(cfg: &RunConfig, src: &Source, strategy: Option<Strategy>, stem: &Path) -> CliResult<()> {
    let mut trace = cfg.trace;
    if let Some(s) = strategy {
        trace.strategy = s;
    }
    let mut resolved = cfg.clone();
    resolved.trace = trace;
    let mut m = Manifest::new("render", &resolved);
    let field = load_source(cfg, src, &mut m)?;
    let product = render(field.as_field(), &cfg.camera.camera(), &trace).map_err(from_trace)?;
    save_render(&product, stem).kind(ExitKind::Data)?;
    let fallbacks = product.fallback.iter().filter(|f| f.is_some()).count();
    m.fact("hits", product.hit_count()).fact("fallbacks", fallbacks);
    for ext in [".depth", ".normals", ".depth.png", ".normals.png"] {
        m.output(&with_suffix(stem, ext)).kind(ExitKind::Data)?;
    }
    m.write(&manifest_path(stem)).kind(ExitKind::Data)?;
    println!("{} of {} pixels hit", product.hit_count(), product.depth.len());
    Ok(())
}

pub fn cmd_extract(cfg: &RunConfig, src: &Source, out: &Path, format: Option<&str>) -> CliResult<()> {
    let fmt = mesh_format(out, format)?;
    let mut m = Manifest::new("extract", cfg);
    let field = load_source(cfg, src, &mut m)?;
    let (mesh, grid) =
        extract_mesh(field.as_field(), cfg.mesh.initial_res, cfg.mesh.levels, cfg.mesh.tau).map_err(from_mesher)?;
    let norm = field.normalization();
    let mesh = if cfg.mesh.original_frame { mesh.map_vertices(|p| norm.invert(p)) } else { mesh };
    save_mesh(&mesh, out, fmt).kind(ExitKind::Data)?;
    m.fact("evaluations", grid.evaluations())
        .fact("dense_corners", grid.dense_corner_count())
        .fact("vertices", mesh.vertices.len())
        .fact("triangles", mesh.triangles.len());
    m.output(out).kind(ExitKind::Data)?;
    m.write(&manifest_path(out)).kind(ExitKind::Data)?;
    println!(
        "{} triangles, {} of {} lattice corners evaluated",
        mesh.triangles.len(),
        grid.evaluations(),
        grid.dense_corner_count()
    );
    Ok(())
}

type Render = (usize, usize, Vec<f64>, Vec<Option<Direction3>>);

fn load_render(stem: &Path) -> CliResult<Render> {
    let open = |ext: &str| {
        let p = with_suffix(stem, ext);
        File::open(&p).with_context(|| format!("opening {}", p.display())).map(BufReader::new).kind(ExitKind::Data)
    };
    let (w, h, depth) = read_depth(&mut open(".depth")?).kind(ExitKind::Data)?;
    let (nw, nh, normals) = read_normals(&mut open(".normals")?).kind(ExitKind::Data)?;
    if (w, h) != (nw, nh) {
        return Err(CliError { kind: ExitKind::Data, error: anyhow!("{}: depth and normal sizes differ", stem.display()) });
    }
    Ok((w, h, depth, normals))
}

/// Inputs to `eval`: a render pair, a mesh pair, or both.
pub struct EvalInputs {
    pub gt_render: Option<PathBuf>,
    pub est_render: Option<PathBuf>,
    pub mesh: Option<PathBuf>,
    pub ref_mesh: Option<PathBuf>,
}

fn json_number(x: f64) -> serde_json::Value {
    serde_json::Number::from_f64(x).map_or(serde_json::Value::Null, serde_json::Value::Number)
}

pub fn cmd_eval(cfg: &RunConfig, inputs: &EvalInputs, out: &Path) -> CliResult<()> {
    let mut report = serde_json::Map::new();
    let mut m = Manifest::new("eval", cfg);
    for (k, v) in cfg.entries() {
        report.insert(format!("config.{k}"), v.into());
    }
    match (&inputs.gt_render, &inputs.est_render) {
        (Some(gt), Some(est)) => {
            let (gw, gh, gd, gn) = load_render(gt)?;
            let (ew, eh, ed, en) = load_render(est)?;
            let view = |w, h, d| MapView::new(w, h, d).kind(ExitKind::Data);
            let (gdm, edm) = (view(gw, gh, &gd[..])?, view(ew, eh, &ed[..])?);
            let iou = pixel_iou(&gdm, &edm).kind(ExitKind::Data)?;
            report.insert("pixel_iou".into(), json_number(iou));
            let validity = PixelValidity::from_depths(&gdm, &edm).kind(ExitKind::Data)?;
            report.insert("valid_pixels".into(), validity.count().into());
            if validity.count() > 0 {
                report.insert("depth_mae".into(), json_number(depth_mae(&gdm, &edm).kind(ExitKind::Data)?));
                let gnm = MapView::new(gw, gh, &gn[..]).kind(ExitKind::Data)?;
                let enm = MapView::new(ew, eh, &en[..]).kind(ExitKind::Data)?;
                let ne = normal_error(&gnm, &enm, &validity).kind(ExitKind::Data)?;
                report.insert("normal_error".into(), json_number(ne));
            }
            for (role, stem) in [("gt", gt), ("est", est)] {
                for ext in [".depth", ".normals"] {
                    let p = with_suffix(stem, ext);
                    let d = crate::manifest::file_digest(&p).kind(ExitKind::Data)?;
                    report.insert(format!("input.{role}{ext}.sha256"), d.into());
                    m.input(&format!("{role}{ext}"), &p).kind(ExitKind::Data)?;
                }
            }
        }
        (None, None) => {}
        _ => return Err(usage("--gt and --est must be given together")),
    }
    match (&inputs.mesh, &inputs.ref_mesh) {
        (Some(mesh), Some(reference)) => {
            let n = cfg.eval.mesh_points;
            let mut points = Vec::new();
            for (role, path, seed) in [("mesh", mesh, cfg.eval.seed), ("ref_mesh", reference, cfg.eval.seed ^ 1)] {
                let loaded = load_soup_auto(path).with_context(|| format!("loading {}", path.display())).kind(ExitKind::Data)?;
                let pts = sample_mesh_points(&Mesh::from_soup(&loaded.soup), n, seed).kind(ExitKind::Data)?;
                points.push(pts);
                let d = crate::manifest::file_digest(path).kind(ExitKind::Data)?;
                report.insert(format!("input.{role}.sha256"), d.into());
                m.input(role, path).kind(ExitKind::Data)?;
            }
            let c = chamfer(&points[0], &points[1]).kind(ExitKind::Data)?;
            report.insert("chamfer".into(), json_number(c));
            report.insert("chamfer_convention".into(), "sum of mean squared nearest-neighbour distances".into());
            report.insert("mesh_points".into(), n.into());
        }
        (None, None) => {}
        _ => return Err(usage("--mesh and --ref-mesh must be given together")),
    }
    if inputs.gt_render.is_none() && inputs.mesh.is_none() {
        return Err(usage("nothing to evaluate: give --gt/--est and/or --mesh/--ref-mesh"));
    }
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(report)).kind(ExitKind::Data)? + "\n";
    fs::write(out, &text).with_context(|| format!("writing {}", out.display())).kind(ExitKind::Data)?;
    print!("{text}");
    m.output(out).kind(ExitKind::Data)?;
    m.write(&manifest_path(out)).kind(ExitKind::Data)
}

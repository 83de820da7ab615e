//! Sources of reference cross-section images.
//!
//! Three providers share one contract: procedural solids (exact ground
//! truth), image files looked up by view or prompt tag, and an external
//! sidecar process speaking newline-delimited JSON over stdio.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cutplane::CutPlane;
use crate::imaging::{ColorImage, ImageError, ScalarImage};
use crate::render::Camera;
use crate::splat::{Aabb, Vec3};
use crate::texture::{procedural_texture, ProceduralSolid, TextureKind};

pub const PROTOCOL_VERSION: u32 = 1;
pub const INIT_STEPS: u32 = 20;
pub const REFINE_STEPS: u32 = 4;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider transport: {0}")]
    Transport(String),
    #[error("provider protocol: {0}")]
    Protocol(String),
    #[error("provider contract: {0}")]
    Contract(String),
    #[error("provider reported: {0}")]
    Remote(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("invalid provider spec {0:?}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    InitReference,
    RefineReference,
}

/// What the renderer knows about a view beyond its images. Only in-process
/// providers see this; it never goes over the wire.
#[derive(Debug, Clone)]
pub struct ViewContext {
    pub camera: Camera,
    pub plane: CutPlane,
    /// Per-pixel Σ w, the fraction of each pixel covered by particles.
    pub coverage: Option<ScalarImage>,
    pub background: Vec3,
}

#[derive(Debug, Clone)]
pub struct ReferenceRequest {
    pub kind: RequestKind,
    pub view_id: String,
    pub rgb: ColorImage,
    pub depth: ScalarImage,
    /// Depth value mapped to full scale in the 16-bit encoding (the far plane).
    pub depth_scale: f64,
    pub prompt_tag: String,
    pub steps: u32,
    pub context: Option<ViewContext>,
}

impl ReferenceRequest {
    pub fn check(&self) -> Result<(), ProviderError> {
        if (self.rgb.width, self.rgb.height) != (self.depth.width, self.depth.height) {
            return Err(ProviderError::Contract(format!(
                "rgb {}x{} vs depth {}x{}",
                self.rgb.width, self.rgb.height, self.depth.width, self.depth.height
            )));
        }
        if self.steps < 1 {
            return Err(ProviderError::Contract("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// A reference image and where it was taken from.
#[derive(Debug, Clone)]
pub struct ReferenceView {
    pub view_id: String,
    pub camera: Camera,
    pub plane: CutPlane,
    pub image: ColorImage,
    pub version: u32,
}

pub trait ReferenceProvider {
    fn provide(&mut self, request: &ReferenceRequest) -> Result<ColorImage, ProviderError>;

    fn describe(&self) -> String;
}

fn check_output(req: &ReferenceRequest, img: ColorImage) -> Result<ColorImage, ProviderError> {
    if (img.width, img.height) != (req.rgb.width, req.rgb.height) {
        return Err(ProviderError::Contract(format!(
            "view {}: reference is {}x{}, expected {}x{}",
            req.view_id, img.width, img.height, req.rgb.width, req.rgb.height
        )));
    }
    if img
        .data
        .iter()
        .any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
    {
        return Err(ProviderError::Contract(format!(
            "view {}: reference has values outside [0, 1]",
            req.view_id
        )));
    }
    Ok(img)
}

/// Analytic solid texture fitted to a box. Refinement returns the same
/// image as initialization.
///
/// With coverage available the texture is blended with the background by
/// the rendered coverage, so the target is reachable by recoloring alone.
#[derive(Debug, Clone)]
pub struct ProceduralProvider {
    pub solid: ProceduralSolid,
}

impl ProceduralProvider {
    pub fn new(kind: TextureKind, bbox: &Aabb) -> Self {
        Self {
            solid: ProceduralSolid::fitted(kind, bbox),
        }
    }

    pub fn analytic(&self, ctx: &ViewContext) -> ColorImage {
        procedural_texture(&self.solid, &ctx.plane, &ctx.camera, ctx.background)
    }
}

impl ReferenceProvider for ProceduralProvider {
    fn provide(&mut self, req: &ReferenceRequest) -> Result<ColorImage, ProviderError> {
        req.check()?;
        let ctx = req.context.as_ref().ok_or_else(|| {
            ProviderError::Contract("procedural provider needs the view camera and plane".into())
        })?;
        if (ctx.camera.width, ctx.camera.height) != (req.rgb.width, req.rgb.height) {
            return Err(ProviderError::Contract(format!(
                "view {}: camera is {}x{} but the render is {}x{}",
                req.view_id, ctx.camera.width, ctx.camera.height, req.rgb.width, req.rgb.height
            )));
        }
        let mut img = self.analytic(ctx);
        if let Some(cov) = &ctx.coverage {
            if cov.data.len() != img.pixels() {
                return Err(ProviderError::Contract(
                    "coverage size differs from the view".into(),
                ));
            }
            for p in 0..img.pixels() {
                let a = cov.data[p].clamp(0.0, 1.0);
                for k in 0..3 {
                    img.data[3 * p + k] = a * img.data[3 * p + k] + (1.0 - a) * ctx.background[k];
                }
            }
        }
        check_output(req, img)
    }

    fn describe(&self) -> String {
        format!("procedural:{:?}", self.solid.kind).to_lowercase()
    }
}

/// Reads `<dir>/<view_id>.png`, falling back to `<dir>/<prompt_tag>.png`.
#[derive(Debug, Clone)]
pub struct FileProvider {
    pub dir: PathBuf,
    cache: HashMap<PathBuf, ColorImage>,
}

impl FileProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            cache: HashMap::new(),
        }
    }
}

impl ReferenceProvider for FileProvider {
    fn provide(&mut self, req: &ReferenceRequest) -> Result<ColorImage, ProviderError> {
        req.check()?;
        let by_view = self.dir.join(format!("{}.png", req.view_id));
        let path = if by_view.exists() {
            by_view
        } else {
            self.dir.join(format!("{}.png", req.prompt_tag))
        };
        if !self.cache.contains_key(&path) {
            if !path.exists() {
                return Err(ProviderError::Transport(format!(
                    "no reference image for view {:?} or tag {:?} in {}",
                    req.view_id,
                    req.prompt_tag,
                    self.dir.display()
                )));
            }
            let img = ColorImage::load_png(&path)?;
            self.cache.insert(path.clone(), img);
        }
        check_output(req, self.cache[&path].clone())
    }

    fn describe(&self) -> String {
        format!("files:{}", self.dir.display())
    }
}

/// One message from the primary side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireRequest {
    Hello { version: u32 },
    InitReference(WireReference),
    RefineReference(WireReference),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireReference {
    pub view_id: String,
    /// Base64 8-bit RGB PNG.
    pub rgb: String,
    /// Base64 16-bit grayscale PNG, depth divided by the far plane.
    pub depth: String,
    pub prompt_tag: String,
    pub steps: u32,
}

/// One message from the sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireResponse {
    Error {
        #[serde(rename = "type")]
        kind: ErrorTag,
        message: String,
    },
    Hello {
        #[serde(rename = "type")]
        kind: HelloTag,
        version: u32,
    },
    Reference {
        view_id: String,
        reference_png: String,
        version: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorTag {
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HelloTag {
    Hello,
}

pub fn encode_request(req: &ReferenceRequest) -> Result<WireRequest, ProviderError> {
    let body = WireReference {
        view_id: req.view_id.clone(),
        rgb: STANDARD.encode(req.rgb.to_png()?),
        depth: STANDARD.encode(req.depth.to_png16(req.depth_scale)?),
        prompt_tag: req.prompt_tag.clone(),
        steps: req.steps,
    };
    Ok(match req.kind {
        RequestKind::InitReference => WireRequest::InitReference(body),
        RequestKind::RefineReference => WireRequest::RefineReference(body),
    })
}

pub fn decode_png_b64(s: &str) -> Result<ColorImage, ProviderError> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| ProviderError::Protocol(format!("base64: {e}")))?;
    Ok(ColorImage::from_png(&bytes)?)
}

pub fn encode_png_b64(img: &ColorImage) -> Result<String, ProviderError> {
    Ok(STANDARD.encode(img.to_png()?))
}

/// Sidecar process. Requests are strictly in order, one in flight.
pub struct ExternalProvider {
    command: String,
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

impl ExternalProvider {
    /// Starts `command_line` (split on whitespace) and performs the handshake.
    pub fn spawn(command_line: &str) -> Result<Self, ProviderError> {
        let mut parts = command_line.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| ProviderError::Spec("empty external command".into()))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ProviderError::Transport(format!("launching {program:?}: {e}")))?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("stdout is piped"));
        let mut p = Self {
            command: command_line.to_string(),
            child,
            stdin,
            stdout,
        };
        match p.exchange(&WireRequest::Hello {
            version: PROTOCOL_VERSION,
        })? {
            WireResponse::Hello { version, .. } if version == PROTOCOL_VERSION => Ok(p),
            WireResponse::Hello { version, .. } => Err(ProviderError::Protocol(format!(
                "sidecar speaks version {version}, expected {PROTOCOL_VERSION}"
            ))),
            other => Err(ProviderError::Protocol(format!(
                "unexpected handshake reply {other:?}"
            ))),
        }
    }

    fn exchange(&mut self, msg: &WireRequest) -> Result<WireResponse, ProviderError> {
        let mut line =
            serde_json::to_string(msg).map_err(|e| ProviderError::Protocol(e.to_string()))?;
        line.push('\n');
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| ProviderError::Transport("sidecar stdin closed".into()))?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| ProviderError::Transport(format!("writing to sidecar: {e}")))?;
        let mut reply = String::new();
        let n = self
            .stdout
            .read_line(&mut reply)
            .map_err(|e| ProviderError::Transport(format!("reading from sidecar: {e}")))?;
        if n == 0 {
            return Err(ProviderError::Transport("sidecar closed its output".into()));
        }
        let resp: WireResponse = serde_json::from_str(reply.trim_end())
            .map_err(|e| ProviderError::Protocol(format!("bad reply: {e}")))?;
        if let WireResponse::Error { message, .. } = resp {
            return Err(ProviderError::Remote(message));
        }
        Ok(resp)
    }
}

impl ReferenceProvider for ExternalProvider {
    fn provide(&mut self, req: &ReferenceRequest) -> Result<ColorImage, ProviderError> {
        req.check()?;
        match self.exchange(&encode_request(req)?)? {
            WireResponse::Reference {
                view_id,
                reference_png,
                version,
            } => {
                if view_id != req.view_id {
                    return Err(ProviderError::Protocol(format!(
                        "reply for view {view_id:?} while waiting for {:?}",
                        req.view_id
                    )));
                }
                if version < 1 {
                    return Err(ProviderError::Protocol(
                        "reference version must be >= 1".into(),
                    ));
                }
                check_output(req, decode_png_b64(&reference_png)?)
            }
            other => Err(ProviderError::Protocol(format!(
                "unexpected reply {other:?}"
            ))),
        }
    }

    fn describe(&self) -> String {
        format!("external:{}", self.command)
    }
}

impl Drop for ExternalProvider {
    fn drop(&mut self) {
        // closing stdin asks the sidecar to exit
        self.stdin.take();
        let _ = self.child.wait();
    }
}

/// `procedural:<kind>`, `files:<dir>` or `external:<command line>`.
#[derive(Debug, Clone, PartialEq)]
pub enum ProviderSpec {
    Procedural(TextureKind),
    Files(PathBuf),
    External(String),
}

impl FromStr for ProviderSpec {
    type Err = ProviderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| ProviderError::Spec(s.into()))?;
        let rest = rest.trim();
        if rest.is_empty() {
            return Err(ProviderError::Spec(s.into()));
        }
        match kind {
            "procedural" => rest
                .parse()
                .map(Self::Procedural)
                .map_err(|_| ProviderError::Spec(s.into())),
            "files" => Ok(Self::Files(PathBuf::from(rest))),
            "external" => Ok(Self::External(rest.into())),
            _ => Err(ProviderError::Spec(s.into())),
        }
    }
}

impl std::fmt::Display for ProviderSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Procedural(k) => write!(f, "procedural:{}", format!("{k:?}").to_lowercase()),
            Self::Files(d) => write!(f, "files:{}", d.display()),
            Self::External(c) => write!(f, "external:{c}"),
        }
    }
}

impl ProviderSpec {
    /// Instantiates the provider; procedural solids are fitted to `bbox`.
    pub fn build(&self, bbox: &Aabb) -> Result<Box<dyn ReferenceProvider>, ProviderError> {
        Ok(match self {
            Self::Procedural(k) => Box::new(ProceduralProvider::new(*k, bbox)),
            Self::Files(d) => Box::new(FileProvider::new(d)),
            Self::External(c) => Box::new(ExternalProvider::spawn(c)?),
        })
    }

    pub fn base_dir_relative(self, base: &Path) -> Self {
        match self {
            Self::Files(d) if d.is_relative() => Self::Files(base.join(d)),
            other => other,
        }
    }
}

/// Wraps a provider and counts calls.
pub struct Counting<P> {
    pub inner: P,
    pub calls: usize,
}

impl<P: ReferenceProvider> Counting<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, calls: 0 }
    }
}

impl<P: ReferenceProvider> ReferenceProvider for Counting<P> {
    fn provide(&mut self, req: &ReferenceRequest) -> Result<ColorImage, ProviderError> {
        self.calls += 1;
        self.inner.provide(req)
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}

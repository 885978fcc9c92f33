//! Checkpoints, run manifests, CSV tables and SVG plots.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "FFLW" | u32 version | u32 len | header JSON | u32 blocks
//!   { u32 len | name | u32 len | spec JSON | u64 count | f64 values }*
//! | u8 has_rng [ 32 seed | u64 stream | u128 word_pos ] | sha256 of all preceding bytes
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{NetworkSpec, ParamVector};

pub const MAGIC: &[u8; 4] = b"FFLW";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Fields of the checkpoint header.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    /// What produced the file: `teacher`, `distill` or `baseline`.
    pub kind: String,
    pub step: u64,
    /// Hex digest of the resolved run configuration.
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub spec: NetworkSpec,
    pub values: ParamVector,
}

/// Saved generator position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blocks: Vec<ParamBlock>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn new(kind: &str, step: u64, config_hash: String) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                kind: kind.to_string(),
                step,
                config_hash,
            },
            blocks: Vec::new(),
            rng: None,
        }
    }

    pub fn with_block(mut self, name: &str, spec: &NetworkSpec, values: &ParamVector) -> Self {
        self.blocks.push(ParamBlock {
            name: name.to_string(),
            spec: spec.clone(),
            values: values.clone(),
        });
        self
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Parameters of block `name`, checked against the spec the caller
    /// expects to load them into.
    pub fn params_for(&self, name: &str, expected: &NetworkSpec) -> Result<ParamVector> {
        let b = self
            .block(name)
            .ok_or_else(|| checkpoint_err("<memory>", format!("missing parameter block '{name}'")))?;
        if &b.spec != expected {
            return Err(checkpoint_err(
                "<memory>",
                format!("block '{name}' was saved for a different network spec"),
            ));
        }
        Ok(b.values.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_bytes(&mut out, &serde_json::to_vec(&self.header).expect("header serializes"));
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            put_bytes(&mut out, b.name.as_bytes());
            put_bytes(&mut out, &serde_json::to_vec(&b.spec).expect("spec serializes"));
            out.extend_from_slice(&(b.values.len() as u64).to_le_bytes());
            out.extend_from_slice(&b.values.to_bytes());
        }
        match &self.rng {
            None => out.push(0),
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.seed);
                out.extend_from_slice(&r.stream.to_le_bytes());
                out.extend_from_slice(&r.word_pos.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Checks magic, then the checksum, then the version.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |reason: &str| checkpoint_err(origin, reason.to_string());
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(fail("bad magic"));
        }
        if bytes.len() < 8 + DIGEST_LEN {
            return Err(fail("checksum mismatch (file truncated)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(fail("checksum mismatch"));
        }
        let mut rd = Reader { buf: body, pos: 4, origin };
        let version = rd.u32()?;
        if version != FORMAT_VERSION {
            return Err(checkpoint_err(
                origin,
                format!("incompatible format version {version} (this build reads {FORMAT_VERSION})"),
            ));
        }
        let header: CheckpointHeader = serde_json::from_slice(rd.chunk()?).map_err(|e| fail(&format!("bad header: {e}")))?;
        let n = rd.u32()? as usize;
        let mut blocks = Vec::with_capacity(n);
        for _ in 0..n {
            let name = String::from_utf8(rd.chunk()?.to_vec()).map_err(|_| fail("block name is not utf-8"))?;
            let spec: NetworkSpec = serde_json::from_slice(rd.chunk()?).map_err(|e| fail(&format!("bad spec: {e}")))?;
            let count = rd.u64()? as usize;
            let values = ParamVector::from_bytes(rd.take(count.checked_mul(8).ok_or_else(|| fail("block too large"))?)?)?;
            blocks.push(ParamBlock { name, spec, values });
        }
        let rng = match rd.take(1)?[0] {
            0 => None,
            1 => {
                let seed: [u8; 32] = rd.take(32)?.try_into().expect("32 bytes");
                let stream = rd.u64()?;
                let word_pos = u128::from_le_bytes(rd.take(16)?.try_into().expect("16 bytes"));
                Some(RngState { seed, stream, word_pos })
            }
            _ => return Err(fail("bad rng flag")),
        };
        if rd.pos != body.len() {
            return Err(fail("trailing bytes after payload"));
        }
        Ok(Checkpoint { header, blocks, rng })
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(checkpoint_err(self.origin, "unexpected end of payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn chunk(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

fn checkpoint_err(path: impl Into<PathBuf>, reason: String) -> Error {
    Error::Checkpoint {
        path: path.into(),
        reason,
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

/// Hex sha256 of the JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// One per run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub version: String,
    pub config_hash: String,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub config: serde_json::Value,
    #[serde(default)]
    pub checkpoints: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new<T: Serialize>(command: &str, seed: u64, config: &T) -> Self {
        let started = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunManifest {
            command: command.to_string(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(config),
            started,
            config: serde_json::to_value(config).expect("config serializes"),
            checkpoints: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

/// Writes `rows` with a header taken from the record's field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// A named polyline or point cloud.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    Lines,
    Scatter,
}

/// A static SVG with axes, tick labels and a legend.
pub fn svg_plot(title: &str, x_label: &str, y_label: &str, series: &[Series], kind: PlotKind) -> String {
    let (w, h, m) = (640.0, 480.0, 60.0);
    let all = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n\
         <line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>\n",
        w / 2.0,
        escape(title),
        h - m,
        w - m,
        h - m,
        h - m
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        s += &format!(
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            sx(xv),
            h - m + 18.0,
            tick(xv),
            m - 6.0,
            sy(yv) + 4.0,
            tick(yv)
        );
    }
    s += &format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        w / 2.0,
        h - 16.0,
        escape(x_label),
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts = ser.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite());
        match kind {
            PlotKind::Lines => {
                let path: Vec<String> = pts.map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                s += &format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n", path.join(" "));
            }
            PlotKind::Scatter => {
                for &(x, y) in pts {
                    s += &format!("<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.5\" fill=\"{color}\" fill-opacity=\"0.5\"/>\n", sx(x), sy(y));
                }
            }
        }
        let ly = m + 16.0 * k as f64;
        s += &format!(
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/><text x=\"{}\" y=\"{}\">{}</text>\n",
            w - m - 110.0,
            ly - 9.0,
            w - m - 95.0,
            ly,
            escape(&ser.name)
        );
    }
    s += "</svg>\n";
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, Network, ScalarName};
    use rand::RngCore;

    fn sample_checkpoint() -> Checkpoint {
        let spec = NetworkSpec {
            input_dim: 2,
            hidden_dims: vec![8],
            output_dim: 2,
            activation: Activation::Silu,
            scalar_conditions: vec![ScalarName::T],
            class_count: 2,
            embed_dim: 4,
            frequencies: 2,
            max_frequency: crate::net::DEFAULT_MAX_FREQUENCY,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Network::new(spec.clone()).unwrap().init_params(&mut rng);
        rng.next_u64();
        let mut c = Checkpoint::new("teacher", 17, config_hash(&"cfg")).with_block("theta", &spec, &p);
        c.rng = Some(RngState::capture(&rng));
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample_checkpoint();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.next_u32();
        let saved = RngState::capture(&rng);
        let mut resumed = saved.restore();
        assert_eq!(rng.next_u64(), resumed.next_u64());
    }

    #[test]
    fn truncation_and_corruption_fail_checksum() {
        let bytes = sample_checkpoint().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 5], Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped, Path::new("x")).unwrap_err().to_string().contains("checksum"));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic, Path::new("x")).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn version_bump_is_rejected() {
        let mut bytes = sample_checkpoint().to_bytes();
        bytes.truncate(bytes.len() - DIGEST_LEN);
        bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        let err = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn spec_mismatch_fails_loudly() {
        let c = sample_checkpoint();
        let mut other = c.blocks[0].spec.clone();
        other.hidden_dims = vec![9];
        assert!(c.params_for("theta", &other).is_err());
        assert!(c.params_for("psi", &c.blocks[0].spec).is_err());
        assert!(c.params_for("theta", &c.blocks[0].spec).is_ok());
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let s = svg_plot(
            "t",
            "x",
            "y",
            &[
                Series { name: "a".into(), points: vec![(0.0, 1.0), (1.0, 2.0)] },
                Series { name: "b<".into(), points: vec![(0.0, 0.0)] },
            ],
            PlotKind::Lines,
        );
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(s.contains("b&lt;"));
    }
}

//! Artifact files: checkpoints, penalty vectors, prototype bundles.
//!
//! Every artifact is a single binary file with the layout
//!
//! ```text
//! magic "TTA1" | version u16 LE | kind u8 | payload | SHA-256 trailer
//! ```
//!
//! The trailer hashes every preceding byte, so silent corruption is caught
//! at load time. Artifacts derived from a checkpoint (the penalty vector
//! and the prototype bundle) embed the checkpoint's trailer hash in their
//! payload; loaders can demand that it match the checkpoint actually in
//! hand, which makes accidentally mixed pipelines fail loudly instead of
//! producing quietly wrong numbers.
//!
//! All integers and floats are little-endian. Strings are UTF-8 with a u32
//! length prefix. Floats are raw f64 bits, so round-trips are bit-exact.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::model::{BnMode, LayerUnit, Model, UnitKind};
use crate::nsp::{Projector, PrototypeBank, PrototypeSource};
use crate::swr::{ManualCurve, PenaltyVector, SwrVariant};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TTA1";
pub const VERSION: u16 = 1;

const KIND_CHECKPOINT: u8 = 1;
const KIND_PENALTY: u8 = 2;
const KIND_NSP_BUNDLE: u8 = 3;

/// Provenance recorded alongside a penalty vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMeta {
    pub samples: u64,
    pub probe_seed: u64,
    pub variant: SwrVariant,
}

// ─── Byte encoding ───────────────────────────────────────────────────────

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(kind: u8) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(kind);
        Writer { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        self.usize(vs.len());
        for &v in vs {
            self.f64(v);
        }
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn hash(&mut self, h: &[u8; 32]) {
        self.buf.extend_from_slice(h);
    }

    fn finish(mut self, path: &Path) -> Result<[u8; 32]> {
        let digest: [u8; 32] = Sha256::digest(&self.buf).into();
        self.buf.extend_from_slice(&digest);
        fs::write(path, &self.buf).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(digest)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn format_err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.display().to_string(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.format_err(format!(
                "truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.format_err(format!("length {v} out of range")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n > self.buf.len() / 8 {
            return Err(self.format_err(format!("float run of {n} exceeds file size")));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.format_err("invalid utf-8 string"))
    }

    fn hash(&mut self) -> Result<[u8; 32]> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.format_err(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Reads a file, verifies the checksum trailer and header, and returns the
/// payload reader plus the content hash.
fn open_artifact<'a>(
    path: &'a Path,
    raw: &'a [u8],
    expect_kind: u8,
) -> Result<(Reader<'a>, [u8; 32])> {
    let header_len = MAGIC.len() + 2 + 1;
    if raw.len() < header_len + 32 {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("file too short ({} bytes)", raw.len()),
        });
    }
    let (body, trailer) = raw.split_at(raw.len() - 32);
    let digest: [u8; 32] = Sha256::digest(body).into();
    if digest != trailer {
        return Err(Error::HashMismatch {
            path: path.display().to_string(),
            detail: "checksum trailer does not match contents".into(),
        });
    }
    let mut r = Reader {
        buf: body,
        pos: 0,
        path,
    };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(r.format_err("bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.format_err(format!("unsupported version {version}")));
    }
    let kind = r.u8()?;
    if kind != expect_kind {
        return Err(r.format_err(format!(
            "wrong artifact kind: wanted {expect_kind}, found {kind}"
        )));
    }
    Ok((r, digest))
}

fn hex(h: &[u8; 32]) -> String {
    h.iter().map(|b| format!("{b:02x}")).collect()
}

fn check_chain(path: &Path, embedded: &[u8; 32], expected: &[u8; 32]) -> Result<()> {
    if embedded != expected {
        return Err(Error::HashMismatch {
            path: path.display().to_string(),
            detail: format!(
                "built from checkpoint {} but paired with {}",
                hex(embedded),
                hex(expected)
            ),
        });
    }
    Ok(())
}

// ─── Shared unit encoding ────────────────────────────────────────────────

fn write_unit(w: &mut Writer, unit: &LayerUnit) {
    w.str(&unit.name);
    match &unit.kind {
        UnitKind::Linear { d_in, d_out } => {
            w.u8(0);
            w.usize(*d_in);
            w.usize(*d_out);
        }
        UnitKind::Conv2d { c_in, c_out } => {
            w.u8(1);
            w.usize(*c_in);
            w.usize(*c_out);
        }
        UnitKind::BatchNorm {
            features,
            eps,
            momentum,
            running_mean,
            running_var,
        } => {
            w.u8(2);
            w.usize(*features);
            w.f64(*eps);
            w.f64(*momentum);
            w.f64s(running_mean);
            w.f64s(running_var);
        }
        UnitKind::Relu => w.u8(3),
    }
    w.usize(unit.params.len());
    for t in &unit.params {
        w.usize(t.shape.len());
        for &d in &t.shape {
            w.usize(d);
        }
        w.f64s(&t.data);
    }
}

fn read_unit(r: &mut Reader<'_>) -> Result<LayerUnit> {
    let name = r.str()?;
    let kind = match r.u8()? {
        0 => UnitKind::Linear {
            d_in: r.usize()?,
            d_out: r.usize()?,
        },
        1 => UnitKind::Conv2d {
            c_in: r.usize()?,
            c_out: r.usize()?,
        },
        2 => UnitKind::BatchNorm {
            features: r.usize()?,
            eps: r.f64()?,
            momentum: r.f64()?,
            running_mean: r.f64s()?,
            running_var: r.f64s()?,
        },
        3 => UnitKind::Relu,
        k => return Err(r.format_err(format!("unknown unit kind tag {k}"))),
    };
    let n_params = r.usize()?;
    if n_params > 2 {
        return Err(r.format_err(format!("unit {name:?} claims {n_params} parameter tensors")));
    }
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let rank = r.usize()?;
        if rank > 4 {
            return Err(r.format_err(format!("tensor rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.usize()?);
        }
        let data = r.f64s()?;
        params.push(
            Tensor::new(shape, data)
                .map_err(|e| r.format_err(format!("bad tensor in unit {name:?}: {e}")))?,
        );
    }
    Ok(LayerUnit {
        name,
        kind,
        params,
        grads: None,
    })
}

fn bn_mode_tag(mode: BnMode) -> u8 {
    match mode {
        BnMode::Running => 0,
        BnMode::Batch => 1,
    }
}

fn bn_mode_from(tag: u8, r: &Reader<'_>) -> Result<BnMode> {
    match tag {
        0 => Ok(BnMode::Running),
        1 => Ok(BnMode::Batch),
        t => Err(r.format_err(format!("unknown statistics mode tag {t}"))),
    }
}

// ─── Checkpoints ─────────────────────────────────────────────────────────

/// Writes a model checkpoint and returns its content hash, the value that
/// downstream artifacts embed.
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<[u8; 32]> {
    let mut w = Writer::new(KIND_CHECKPOINT);
    w.usize(model.num_classes);
    w.usize(model.encoder_end);
    w.u8(bn_mode_tag(model.bn_mode));
    w.usize(model.input_shape.0);
    w.usize(model.input_shape.1);
    w.usize(model.input_shape.2);
    w.usize(model.units.len());
    for unit in &model.units {
        write_unit(&mut w, unit);
    }
    w.finish(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, [u8; 32])> {
    let raw = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (mut r, digest) = open_artifact(path, &raw, KIND_CHECKPOINT)?;
    let num_classes = r.usize()?;
    let encoder_end = r.usize()?;
    let bn_mode = bn_mode_from(r.u8()?, &r)?;
    let input_shape = (r.usize()?, r.usize()?, r.usize()?);
    let n_units = r.usize()?;
    if encoder_end > n_units {
        return Err(r.format_err(format!(
            "encoder boundary {encoder_end} beyond {n_units} units"
        )));
    }
    let mut units = Vec::with_capacity(n_units);
    for _ in 0..n_units {
        units.push(read_unit(&mut r)?);
    }
    r.done()?;
    Ok((
        Model {
            units,
            encoder_end,
            bn_mode,
            num_classes,
            input_shape,
        },
        digest,
    ))
}

// ─── Penalty vectors ─────────────────────────────────────────────────────

pub fn save_penalty(
    path: &Path,
    penalty: &PenaltyVector,
    meta: &PenaltyMeta,
    source_hash: &[u8; 32],
) -> Result<[u8; 32]> {
    let mut w = Writer::new(KIND_PENALTY);
    w.hash(source_hash);
    w.u64(meta.samples);
    w.u64(meta.probe_seed);
    w.u32(meta.variant.exponent);
    w.u8(meta.variant.flip_vertical as u8);
    w.u8(meta.variant.flip_horizontal as u8);
    match &meta.variant.manual {
        None => w.u8(0),
        Some(ManualCurve::Constant(v)) => {
            w.u8(1);
            w.f64(*v);
        }
        Some(ManualCurve::LinearRamp) => w.u8(2),
        Some(ManualCurve::Step) => w.u8(3),
    }
    w.usize(penalty.unit_names.len());
    for i in 0..penalty.unit_names.len() {
        w.str(&penalty.unit_names[i]);
        w.f64(penalty.similarities[i]);
        w.f64(penalty.weights[i]);
    }
    w.finish(path)
}

/// Loads a penalty vector. When `expected_source` is given, the embedded
/// checkpoint hash must match it.
pub fn load_penalty(
    path: &Path,
    expected_source: Option<&[u8; 32]>,
) -> Result<(PenaltyVector, PenaltyMeta, [u8; 32])> {
    let raw = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (mut r, _) = open_artifact(path, &raw, KIND_PENALTY)?;
    let source = r.hash()?;
    if let Some(expected) = expected_source {
        check_chain(path, &source, expected)?;
    }
    let samples = r.u64()?;
    let probe_seed = r.u64()?;
    let exponent = r.u32()?;
    let flip_vertical = r.u8()? != 0;
    let flip_horizontal = r.u8()? != 0;
    let manual = match r.u8()? {
        0 => None,
        1 => Some(ManualCurve::Constant(r.f64()?)),
        2 => Some(ManualCurve::LinearRamp),
        3 => Some(ManualCurve::Step),
        t => return Err(r.format_err(format!("unknown manual curve tag {t}"))),
    };
    let n = r.usize()?;
    let mut unit_names = Vec::with_capacity(n);
    let mut similarities = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for _ in 0..n {
        unit_names.push(r.str()?);
        similarities.push(r.f64()?);
        weights.push(r.f64()?);
    }
    r.done()?;
    Ok((
        PenaltyVector {
            unit_names,
            similarities,
            weights,
        },
        PenaltyMeta {
            samples,
            probe_seed,
            variant: SwrVariant {
                exponent,
                flip_vertical,
                flip_horizontal,
                manual,
            },
        },
        source,
    ))
}

// ─── Prototype bundles ───────────────────────────────────────────────────

fn source_tag(s: PrototypeSource) -> u8 {
    match s {
        PrototypeSource::ProjectionZ => 0,
        PrototypeSource::RepresentationH => 1,
        PrototypeSource::ClassifierWeights => 2,
    }
}

fn source_from(tag: u8, r: &Reader<'_>) -> Result<PrototypeSource> {
    match tag {
        0 => Ok(PrototypeSource::ProjectionZ),
        1 => Ok(PrototypeSource::RepresentationH),
        2 => Ok(PrototypeSource::ClassifierWeights),
        t => Err(r.format_err(format!("unknown prototype source tag {t}"))),
    }
}

pub fn save_nsp_bundle(
    path: &Path,
    projector: &Projector,
    bank: &PrototypeBank,
    source_hash: &[u8; 32],
) -> Result<[u8; 32]> {
    let mut w = Writer::new(KIND_NSP_BUNDLE);
    w.hash(source_hash);
    w.usize(projector.depth);
    w.usize(projector.width);
    w.usize(projector.input_dim);
    w.u8(bn_mode_tag(projector.bn_mode));
    w.usize(projector.units.len());
    for unit in &projector.units {
        write_unit(&mut w, unit);
    }
    w.f64(bank.alpha);
    w.f64(bank.tau);
    w.u8(source_tag(bank.source));
    w.usize(bank.prototypes.len());
    for (q, &init) in bank.prototypes.iter().zip(&bank.initialized) {
        w.u8(init as u8);
        w.f64s(q);
    }
    w.finish(path)
}

pub fn load_nsp_bundle(
    path: &Path,
    expected_source: Option<&[u8; 32]>,
) -> Result<(Projector, PrototypeBank, [u8; 32])> {
    let raw = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (mut r, _) = open_artifact(path, &raw, KIND_NSP_BUNDLE)?;
    let source = r.hash()?;
    if let Some(expected) = expected_source {
        check_chain(path, &source, expected)?;
    }
    let depth = r.usize()?;
    let width = r.usize()?;
    let input_dim = r.usize()?;
    let bn_mode = bn_mode_from(r.u8()?, &r)?;
    let n_units = r.usize()?;
    let mut units = Vec::with_capacity(n_units);
    for _ in 0..n_units {
        units.push(read_unit(&mut r)?);
    }
    let alpha = r.f64()?;
    let tau = r.f64()?;
    let proto_source = source_from(r.u8()?, &r)?;
    let n_classes = r.usize()?;
    let mut prototypes = Vec::with_capacity(n_classes);
    let mut initialized = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        initialized.push(r.u8()? != 0);
        prototypes.push(r.f64s()?);
    }
    r.done()?;
    Ok((
        Projector {
            units,
            depth,
            width,
            input_dim,
            bn_mode,
        },
        PrototypeBank {
            prototypes,
            initialized,
            alpha,
            tau,
            source: proto_source,
        },
        source,
    ))
}

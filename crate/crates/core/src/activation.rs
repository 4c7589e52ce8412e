//! Per-layer activation dumps and the `RSD1` binary format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RSD1" | version u32 | L u32 | n u32 | d u32 | flags u32
//!        | [class_count u32]            (flags bit 1)
//!        | [n x label u32]              (flags bit 0)
//!        | L x n x d payload as f32, row-major per layer, ascending layer index
//! ```
//!
//! Layer 0 of a dump is the output of the first transformer block; the
//! feature-extractor output is never stored.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"RSD1";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_LABELS: u32 = 1;
const FLAG_CLASS_COUNT: u32 = 1 << 1;

/// Representations of one input batch after every transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub num_samples: usize,
    pub dim: usize,
    /// One `num_samples x dim` matrix per block, block 1 first.
    pub layers: Vec<Array2<f64>>,
    pub labels: Option<Vec<u32>>,
    pub class_count: Option<u32>,
}

impl ActivationDump {
    /// Builds a dump from layer matrices, inferring `n` and `d` from the first
    /// layer, and validates it.
    pub fn new(
        layers: Vec<Array2<f64>>,
        labels: Option<Vec<u32>>,
        class_count: Option<u32>,
    ) -> Result<Self> {
        let (num_samples, dim) = layers.first().map(|m| m.dim()).unwrap_or((0, 0));
        let dump = ActivationDump {
            num_samples,
            dim,
            layers,
            labels,
            class_count,
        };
        dump.validate()?;
        Ok(dump)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::Validation(format!(
                "a dump needs at least 2 layers, found {}",
                self.layers.len()
            )));
        }
        if self.num_samples == 0 || self.dim == 0 {
            return Err(Error::Validation(format!(
                "n and d must be positive (n={}, d={})",
                self.num_samples, self.dim
            )));
        }
        for (idx, layer) in self.layers.iter().enumerate() {
            if layer.dim() != (self.num_samples, self.dim) {
                return Err(Error::Validation(format!(
                    "layer {idx} has shape {:?}, declared {}x{}",
                    layer.dim(),
                    self.num_samples,
                    self.dim
                )));
            }
        }
        if self.class_count == Some(0) {
            return Err(Error::Validation("class_count must be positive".into()));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.num_samples {
                return Err(Error::Validation(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    self.num_samples
                )));
            }
            if let Some(c) = self.class_count {
                if let Some(bad) = labels.iter().find(|&&l| l >= c) {
                    return Err(Error::Validation(format!(
                        "label {bad} out of range for {c} classes"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Centered copy of layer `idx` (0-based).
    pub fn centered_layer(&self, idx: usize) -> CenteredView {
        center(self.layers[idx].view())
    }

    /// Every layer rounded through `f32`, i.e. what a write/read cycle yields.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for layer in &mut out.layers {
            layer.mapv_inplace(|v| v as f32 as f64);
        }
        out
    }
}

/// A matrix whose columns have zero mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredView(Array2<f64>);

impl CenteredView {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

impl AsRef<Array2<f64>> for CenteredView {
    fn as_ref(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Subtracts the column means from every row.
pub fn center(matrix: ArrayView2<'_, f64>) -> CenteredView {
    let mut out = matrix.to_owned();
    if let Some(mean) = matrix.mean_axis(Axis(0)) {
        out -= &mean;
    }
    CenteredView(out)
}

pub fn write_dump<W: Write>(dump: &ActivationDump, mut sink: W) -> Result<()> {
    dump.validate()?;
    let mut header = Vec::with_capacity(32);
    header.extend_from_slice(&MAGIC);
    let mut flags = 0;
    if dump.labels.is_some() {
        flags |= FLAG_LABELS;
    }
    if dump.class_count.is_some() {
        flags |= FLAG_CLASS_COUNT;
    }
    for v in [
        FORMAT_VERSION,
        to_u32(dump.layers.len(), "L")?,
        to_u32(dump.num_samples, "n")?,
        to_u32(dump.dim, "d")?,
        flags,
    ] {
        header.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(c) = dump.class_count {
        header.extend_from_slice(&c.to_le_bytes());
    }
    if let Some(labels) = &dump.labels {
        for l in labels {
            header.extend_from_slice(&l.to_le_bytes());
        }
    }
    sink.write_all(&header)?;

    let mut buf = Vec::with_capacity(dump.num_samples * dump.dim * 4);
    for layer in &dump.layers {
        buf.clear();
        for &v in layer.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        sink.write_all(&buf)?;
    }
    sink.flush()?;
    Ok(())
}

pub fn read_dump<R: Read>(mut source: R) -> Result<ActivationDump> {
    let mut magic = [0u8; 4];
    read_section(&mut source, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut source, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let num_layers = read_u32(&mut source, "header")? as usize;
    let num_samples = read_u32(&mut source, "header")? as usize;
    let dim = read_u32(&mut source, "header")? as usize;
    let flags = read_u32(&mut source, "header")?;
    if flags & !(FLAG_LABELS | FLAG_CLASS_COUNT) != 0 {
        return Err(Error::Validation(format!("unknown flag bits {flags:#x}")));
    }
    let class_count = if flags & FLAG_CLASS_COUNT != 0 {
        Some(read_u32(&mut source, "class_count")?)
    } else {
        None
    };
    let labels = if flags & FLAG_LABELS != 0 {
        let mut bytes = vec![0u8; num_samples * 4];
        read_section(&mut source, &mut bytes, "labels")?;
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    } else {
        None
    };

    let mut layers = Vec::with_capacity(num_layers);
    let mut bytes = vec![0u8; num_samples * dim * 4];
    for layer in 0..num_layers {
        read_exact_or(&mut source, &mut bytes, || Error::TruncatedLayer { layer })?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        layers.push(Array2::from_shape_vec((num_samples, dim), values).expect("sized buffer"));
    }

    let dump = ActivationDump {
        num_samples,
        dim,
        layers,
        labels,
        class_count,
    };
    dump.validate()?;
    Ok(dump)
}

pub fn write_dump_file(dump: &ActivationDump, path: &std::path::Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(Error::at_path(path))?;
    write_dump(dump, std::io::BufWriter::new(file))
}

pub fn read_dump_file(path: &std::path::Path) -> Result<ActivationDump> {
    let file = std::fs::File::open(path).map_err(Error::at_path(path))?;
    read_dump(std::io::BufReader::new(file))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Validation(format!("{what}={v} exceeds u32")))
}

fn read_u32<R: Read>(source: &mut R, section: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_section(source, &mut b, section)?;
    Ok(u32::from_le_bytes(b))
}

fn read_section<R: Read>(source: &mut R, buf: &mut [u8], section: &str) -> Result<()> {
    read_exact_or(source, buf, || Error::Truncated {
        section: section.to_string(),
    })
}

fn read_exact_or<R: Read>(source: &mut R, buf: &mut [u8], err: impl FnOnce() -> Error) -> Result<()> {
    match source.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(err()),
        Err(e) => Err(e.into()),
    }
}

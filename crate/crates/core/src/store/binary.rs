//! Little-endian binary formats: field checkpoints (`QNRF`), query dumps
//! (`QDMP`) and latent sets (`QLAT`).
//!
//! Checkpoints and query dumps store 32-bit floats; latents keep 64 bits.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::qfield::{FeatureField, FieldConfig, LayerSpec, QuerySet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QNRF";
pub const QUERY_MAGIC: &[u8; 4] = b"QDMP";
pub const LATENT_MAGIC: &[u8; 4] = b"QLAT";
pub const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut w = Writer(magic.to_vec());
        w.u32(FORMAT_VERSION);
        w
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("header value fits in 32 bits"));
    }

    fn f32s(&mut self, values: &[f64]) {
        self.0.reserve(values.len() * 4);
        for &v in values {
            self.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    fn f64s(&mut self, values: &[f64]) {
        self.0.reserve(values.len() * 8);
        for &v in values {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != magic {
            return Err(Error::format(format!(
                "{what}: bad magic, expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let mut r = Reader { bytes, pos: 4, what };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "{what}: unsupported version {version}, expected {FORMAT_VERSION}"
            )));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(format!("{}: truncated at byte {}", self.what, self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    /// Rejects a header count larger than the rest of the file could hold,
    /// before anything is allocated from it.
    fn bounded(&self, value: usize, limit: usize, field: &str) -> Result<usize> {
        if value > limit {
            return Err(Error::format(format!(
                "{}: {field} {value} exceeds what {} remaining bytes can hold",
                self.what,
                self.remaining()
            )));
        }
        Ok(value)
    }

    /// The body must hold exactly `count` values of `width` bytes.
    fn expect_body(&self, count: Option<usize>, width: usize) -> Result<()> {
        match count.and_then(|c| c.checked_mul(width)) {
            Some(n) if n == self.remaining() => Ok(()),
            Some(n) => Err(Error::format(format!(
                "{}: header implies {n} body bytes, found {}",
                self.what,
                self.remaining()
            ))),
            None => Err(Error::format(format!("{}: header sizes overflow", self.what))),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn layer_table(w: &mut Writer, layers: impl Iterator<Item = (usize, usize)>) {
    for (r, c) in layers {
        w.usize(r);
        w.usize(c);
    }
}

fn read_layer_table(r: &mut Reader, count: usize) -> Result<Vec<(usize, usize)>> {
    (0..count).map(|_| Ok((r.usize()?, r.usize()?))).collect()
}

pub fn checkpoint_bytes(field: &FeatureField) -> Vec<u8> {
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    w.usize(field.layers.len());
    layer_table(&mut w, field.layers.iter().map(|l| (l.resolution, l.channels)));
    w.usize(field.config.frequencies);
    w.usize(field.config.width);
    w.usize(field.config.depth);
    w.f32s(&field.params);
    w.0
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<FeatureField> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, "checkpoint")?;
    let n = r.usize()?;
    let n = r.bounded(n, r.remaining() / 8, "layer count")?;
    let table = read_layer_table(&mut r, n)?;
    let config = FieldConfig {
        frequencies: r.usize()?,
        width: r.usize()?,
        depth: r.usize()?,
    };
    // each of these adds at least one parameter
    let floats = r.remaining() / 4;
    r.bounded(config.frequencies, floats, "frequency count")?;
    r.bounded(config.width, floats, "width")?;
    r.bounded(config.depth, floats, "depth")?;
    for &(_, ch) in &table {
        r.bounded(ch, floats, "channel count")?;
    }
    let layers: Vec<LayerSpec> = table
        .iter()
        .enumerate()
        .map(|(i, &(res, ch))| LayerSpec::new(i, res, ch))
        .collect();
    let count = FeatureField::param_count_for(&config, &layers)
        .map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    let params = r.f32s(count)?;
    r.finish()?;
    FeatureField::from_params(config, layers, params)
}

pub fn save_checkpoint(field: &FeatureField, path: &Path) -> Result<()> {
    write_bytes(path, &checkpoint_bytes(field))
}

pub fn load_checkpoint(path: &Path) -> Result<FeatureField> {
    checkpoint_from_bytes(&read_bytes(path)?)
}

pub fn queries_bytes(set: &QuerySet) -> Vec<u8> {
    let mut w = Writer::new(QUERY_MAGIC);
    w.usize(set.view_count());
    w.usize(set.timestep);
    let shapes = set.layer_shapes();
    w.usize(shapes.len());
    layer_table(&mut w, shapes.into_iter());
    for view in &set.views {
        for g in view {
            w.f32s(&g.data);
        }
    }
    w.0
}

/// Reads a query dump; when `expected` is given the header's layer table
/// must match it exactly.
pub fn queries_from_bytes(bytes: &[u8], expected: Option<&[LayerSpec]>) -> Result<QuerySet> {
    let mut r = Reader::open(bytes, QUERY_MAGIC, "query dump")?;
    let views = r.usize()?;
    let timestep = r.usize()?;
    let n = r.usize()?;
    let n = r.bounded(n, r.remaining() / 8, "layer count")?;
    let table = read_layer_table(&mut r, n)?;
    if let Some(layers) = expected {
        let want: Vec<(usize, usize)> = layers.iter().map(|l| (l.resolution, l.channels)).collect();
        if want != table {
            return Err(Error::format(format!(
                "query dump layers {table:?} do not match configuration {want:?}"
            )));
        }
    }
    let per_view = table.iter().try_fold(0usize, |acc, &(res, ch)| {
        res.checked_mul(res)?.checked_mul(ch)?.checked_add(acc)
    });
    r.expect_body(per_view.and_then(|p| p.checked_mul(views)), 4)?;
    let mut out = Vec::with_capacity(views);
    for _ in 0..views {
        let mut maps = Vec::with_capacity(n);
        for &(res, ch) in &table {
            let data = r.f32s(res * res * ch)?;
            maps.push(Grid::from_data(res, ch, data)?);
        }
        out.push(maps);
    }
    r.finish()?;
    Ok(QuerySet { timestep, views: out })
}

pub fn dump_queries(set: &QuerySet, path: &Path) -> Result<()> {
    write_bytes(path, &queries_bytes(set))
}

pub fn load_queries(path: &Path, expected: Option<&[LayerSpec]>) -> Result<QuerySet> {
    queries_from_bytes(&read_bytes(path)?, expected)
}

pub fn latents_bytes(latents: &[Grid]) -> Vec<u8> {
    let mut w = Writer::new(LATENT_MAGIC);
    w.usize(latents.len());
    let (r, c) = latents.first().map(|g| (g.resolution, g.channels)).unwrap_or((0, 0));
    w.usize(r);
    w.usize(c);
    for g in latents {
        assert_eq!((g.resolution, g.channels), (r, c), "latents share one shape");
        w.f64s(&g.data);
    }
    w.0
}

pub fn latents_from_bytes(bytes: &[u8]) -> Result<Vec<Grid>> {
    let mut r = Reader::open(bytes, LATENT_MAGIC, "latents")?;
    let views = r.usize()?;
    let res = r.usize()?;
    let ch = r.usize()?;
    let per = res.checked_mul(res).and_then(|v| v.checked_mul(ch));
    r.expect_body(per.and_then(|p| p.checked_mul(views)), 8)?;
    let out = (0..views)
        .map(|_| Grid::from_data(res, ch, r.f64s(res * res * ch)?))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(out)
}

pub fn save_latents(latents: &[Grid], path: &Path) -> Result<()> {
    write_bytes(path, &latents_bytes(latents))
}

pub fn load_latents(path: &Path) -> Result<Vec<Grid>> {
    latents_from_bytes(&read_bytes(path)?)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

//! Binary parameter checkpoints (`MDLP`) and expert observation datasets
//! (`MODL`). Both are little-endian.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use module_core::data::{ExpertObservationSet, ObservationPair};
use module_core::nn::{ParamVector, Segment};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDLP";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DATASET_MAGIC: &[u8; 4] = b"MODL";
pub const DATASET_VERSION: u32 = 1;

/// Separates the group name from the segment name in bundled checkpoints.
const GROUP_SEP: char = '/';

/// Cursor over a byte buffer that reports what it was reading when it runs
/// out of input.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            bail!("file is truncated while reading {field} at byte {}", self.pos);
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn string(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)? as usize;
        let bytes = self.take(n, field)?;
        String::from_utf8(bytes.to_vec()).with_context(|| format!("{field} is not valid UTF-8"))
    }

    fn f64s(&mut self, n: usize, field: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).context("length overflow")?, field)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            bail!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(got)
            );
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        ensure!(
            self.pos == self.buf.len(),
            "{} trailing bytes after the last record",
            self.buf.len() - self.pos
        );
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

/// Serializes a parameter vector: magic, version, segment count, then per
/// segment its name, rank and dimensions, then all values.
pub fn encode_params(params: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, params.segments().len() as u32);
    for seg in params.segments() {
        put_str(&mut out, &seg.name);
        put_u32(&mut out, seg.shape.len() as u32);
        for &d in &seg.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamVector> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    ensure!(version == CHECKPOINT_VERSION, "unsupported checkpoint version {version}");
    let count = r.u32("segment count")? as usize;
    let mut segments = Vec::with_capacity(count.min(1 << 16));
    let mut total = 0usize;
    for _ in 0..count {
        let name = r.string("segment name")?;
        let rank = r.u32("segment rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64("segment shape")?).context("segment shape overflows")?);
        }
        let seg = Segment { name, shape };
        total = total
            .checked_add(seg.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).context("segment size overflows")?)
            .context("parameter count overflows")?;
        segments.push(seg);
    }
    let values = r.f64s(total, "parameter values")?;
    r.finish()?;
    Ok(ParamVector::from_parts(segments, values)?)
}

pub fn save_params(path: &Path, params: &ParamVector) -> Result<()> {
    write_file(path, &encode_params(params))
}

pub fn load_params(path: &Path) -> Result<ParamVector> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_params(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Merges named groups into one vector whose segments are `group/segment`.
pub fn bundle(groups: &[(String, ParamVector)]) -> ParamVector {
    let mut out = ParamVector::new();
    for (group, params) in groups {
        for (i, seg) in params.segments().iter().enumerate() {
            out.push_segment(
                format!("{group}{GROUP_SEP}{}", seg.name),
                seg.shape.clone(),
                params.segment(i).to_vec(),
            );
        }
    }
    out
}

/// Extracts one group from a bundled vector, with the group prefix stripped.
pub fn group(bundled: &ParamVector, name: &str) -> Result<ParamVector> {
    let prefix = format!("{name}{GROUP_SEP}");
    let mut out = ParamVector::new();
    for (i, seg) in bundled.segments().iter().enumerate() {
        if let Some(rest) = seg.name.strip_prefix(&prefix) {
            out.push_segment(rest, seg.shape.clone(), bundled.segment(i).to_vec());
        }
    }
    ensure!(!out.is_empty(), "checkpoint has no `{name}` parameters");
    Ok(out)
}

/// Group names in order of first appearance.
pub fn group_names(bundled: &ParamVector) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for seg in bundled.segments() {
        let g = seg.name.split(GROUP_SEP).next().unwrap_or_default();
        if names.last().map(String::as_str) != Some(g) && !names.iter().any(|n| n == g) {
            names.push(g.to_string());
        }
    }
    names
}

pub fn encode_observations(set: &ExpertObservationSet) -> Result<Vec<u8>> {
    set.validate()?;
    let d = set.state_dim;
    let mut out = Vec::with_capacity(64 + set.pairs.len() * 16 * d);
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, DATASET_VERSION);
    put_u32(&mut out, u32::try_from(d).context("state_dim does not fit in 32 bits")?);
    out.extend_from_slice(&(set.pairs.len() as u64).to_le_bytes());
    put_str(&mut out, &set.env_id);
    out.extend_from_slice(&set.noise_std.to_le_bytes());
    out.extend_from_slice(&set.mean_return.to_le_bytes());
    for p in &set.pairs {
        for v in p.s.iter().chain(&p.s_next) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a dataset. The collection seed is not part of the file and comes
/// back as 0.
pub fn decode_observations(bytes: &[u8]) -> Result<ExpertObservationSet> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let version = r.u32("version")?;
    ensure!(version == DATASET_VERSION, "unsupported dataset version {version}");
    let state_dim = r.u32("state_dim")? as usize;
    ensure!(state_dim > 0, "state_dim must be at least 1");
    let count = usize::try_from(r.u64("pair_count")?).context("pair_count overflows")?;
    let env_id = r.string("env id")?;
    let noise_std = r.f64("noise_std")?;
    let mean_return = r.f64("mean_return")?;
    let record = 2 * state_dim;
    let needed = count.checked_mul(record * 8).context("pair_count overflows")?;
    ensure!(
        bytes.len() - r.pos >= needed,
        "file is truncated: header declares {count} pairs of state_dim {state_dim} ({needed} bytes) but {} remain",
        bytes.len() - r.pos
    );
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let v = r.f64s(record, "pair record")?;
        pairs.push(ObservationPair::new(v[..state_dim].to_vec(), v[state_dim..].to_vec()));
    }
    r.finish()?;
    let set = ExpertObservationSet {
        env_id,
        state_dim,
        collection_seed: 0,
        noise_std,
        mean_return,
        pairs,
    };
    set.validate()?;
    Ok(set)
}

pub fn save_observations(path: &Path, set: &ExpertObservationSet) -> Result<()> {
    write_file(path, &encode_observations(set)?)
}

pub fn load_observations(path: &Path) -> Result<ExpertObservationSet> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_observations(&bytes).with_context(|| format!("loading dataset {}", path.display()))
}

/// One row per pair: the `s` columns, then the `s′` columns.
pub fn export_observations_csv(path: &Path, set: &ExpertObservationSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let d = set.state_dim;
    let header: Vec<String> = (0..d)
        .map(|i| format!("s{i}"))
        .chain((0..d).map(|i| format!("s_next{i}")))
        .collect();
    w.write_record(&header)?;
    for p in &set.pairs {
        w.write_record(p.s.iter().chain(&p.s_next).map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

//! WAV, cue-file and manifest formats.
//!
//! Cue file layout, little-endian:
//!
//! ```text
//! "BINCUE01" | u32 count |
//!   count × ( u32 n_arrays | n_arrays × ( u32 rank | rank × u32 dim | f64 payload ) )
//! ```
//! Each record holds the cue stream `[M·d_v, F_V]`, the clean sources `[M, T]`
//! and the scaled noise `[T]`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CUE_MAGIC: &[u8; 8] = b"BINCUE01";

/// Full-scale value of 16-bit PCM.
pub const PCM_SCALE: f64 = 32768.0;

pub fn quantize(x: f64) -> i16 {
    (x * PCM_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn write_wav_i16(path: &Path, samples: &[i16], sample_rate: u32) -> Result<()> {
    let spec =
        hound::WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}

/// Mono 16-bit PCM; values are scaled by 2^15 and rounded.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let q: Vec<i16> = samples.iter().map(|&x| quantize(x)).collect();
    write_wav_i16(path, &q, sample_rate)
}

pub fn read_wav_i16(path: &Path, sample_rate: u32) -> Result<Vec<i16>> {
    let r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.sample_rate != sample_rate {
        return Err(Error::SampleRate { path: path.to_path_buf(), found: spec.sample_rate, expected: sample_rate });
    }
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "{}: expected mono 16-bit PCM, got {} channel(s) at {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    Ok(r.into_samples::<i16>().collect::<std::result::Result<_, _>>()?)
}

/// Samples in `[-1, 1)`.
pub fn read_wav(path: &Path, sample_rate: u32) -> Result<Vec<f64>> {
    Ok(read_wav_i16(path, sample_rate)?.into_iter().map(|s| s as f64 / PCM_SCALE).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExamplePaths {
    pub mix: String,
    pub src: Vec<String>,
    pub noise: String,
    pub cues: String,
}

/// One manifest line. Paths are relative to the corpus directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub snr_db: f64,
    pub paths: ExamplePaths,
    pub split: String,
    /// Record index in the cue file.
    pub cue_index: usize,
    /// Factor applied before 16-bit quantization of this example's WAVs.
    pub gain: f64,
    pub ambiguous: bool,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub struct CueWriter {
    out: BufWriter<File>,
    count: u32,
}

impl CueWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(CUE_MAGIC)?;
        out.write_all(&0u32.to_le_bytes())?;
        Ok(CueWriter { out, count: 0 })
    }

    pub fn push(&mut self, arrays: &[&Tensor]) -> Result<()> {
        self.out.write_all(&(arrays.len() as u32).to_le_bytes())?;
        for t in arrays {
            self.out.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                self.out.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                self.out.write_all(&v.to_le_bytes())?;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        let mut f = self.out.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        f.seek(SeekFrom::Start(8))?;
        f.write_all(&self.count.to_le_bytes())?;
        f.sync_all()?;
        Ok(())
    }
}

/// Random access to cue-file records via an offset table built on open.
pub struct CueReader {
    path: std::path::PathBuf,
    offsets: Vec<u64>,
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format(format!("cue file truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(b))
}

impl CueReader {
    pub fn open(path: &Path) -> Result<Self> {
        let len = fs::metadata(path)?.len();
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        if r.read_exact(&mut magic).is_err() || &magic != CUE_MAGIC {
            return Err(Error::BadMagic { what: "cue file", expected: "BINCUE01" });
        }
        let count = read_u32(&mut r, "record count")?;
        let mut offsets = Vec::with_capacity(count as usize);
        let mut pos = 12u64;
        for _ in 0..count {
            offsets.push(pos);
            let n = read_u32(&mut r, "array count")?;
            pos += 4;
            for _ in 0..n {
                let rank = read_u32(&mut r, "rank")?;
                let mut numel = 1u64;
                for _ in 0..rank {
                    numel *= read_u32(&mut r, "dimension")? as u64;
                }
                pos += 4 + 4 * rank as u64;
                let payload = numel * 8;
                if pos + payload > len {
                    return Err(Error::Format("cue file truncated inside a payload".into()));
                }
                r.seek_relative(payload as i64)?;
                pos += payload;
            }
        }
        if pos != len {
            return Err(Error::Format(format!("{} trailing bytes in cue file", len - pos)));
        }
        Ok(CueReader { path: path.to_path_buf(), offsets })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn read(&self, index: usize) -> Result<Vec<Tensor>> {
        let off = *self.offsets.get(index).ok_or_else(|| {
            Error::Format(format!("cue record {index} out of range ({} records)", self.offsets.len()))
        })?;
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start(off))?;
        let mut r = BufReader::new(f);
        let n = read_u32(&mut r, "array count")?;
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let rank = read_u32(&mut r, "rank")?;
            let shape =
                (0..rank).map(|_| read_u32(&mut r, "dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut bytes = vec![0u8; numel * 8];
            r.read_exact(&mut bytes).map_err(|_| Error::Format("cue file truncated".into()))?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            out.push(Tensor::new(shape, data).map_err(|e| Error::Format(format!("cue record {index}: {e}")))?);
        }
        Ok(out)
    }
}

//! Seeded synthetic audio-visual mixtures and their on-disk corpus format.

mod io;
mod synth;

pub use io::{
    quantize, read_manifest, read_wav, read_wav_i16, write_manifest, write_wav, write_wav_i16, CueReader, CueWriter,
    ExamplePaths, ManifestEntry, CUE_MAGIC, PCM_SCALE,
};
pub use synth::{
    colored_noise, derive_seed, frame_means, harmonic_amplitudes, make_cues, mean_power, mix_at_snr, sum_sources,
    synth_source, Source, SourceParams, F0_RANGE, HARMONICS,
};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CUE_FILE: &str = "cues.bin";
pub const SPEC_FILE: &str = "corpus.kv";
/// Peak level of the loudest stored signal in each example's WAVs.
pub const WAV_HEADROOM: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    #[default]
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(vec![format!("unknown split {s:?} (expected train, val or test)")]))
    }
}

/// Everything that determines a corpus. Two equal specs generate
/// byte-identical corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub samples: usize,
    pub sample_rate: u32,
    pub speakers: usize,
    pub cue_dims: usize,
    pub video_frames: usize,
    pub snr_set: Vec<f64>,
    pub seed: u64,
    /// Share of examples whose speakers draw fundamentals from one shared band.
    pub ambiguity: f64,
    /// Cue noise level; `inf` disables cue noise.
    pub cue_snr_db: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_train: 2000,
            n_val: 100,
            n_test: 200,
            samples: 16000,
            sample_rate: 8000,
            speakers: 2,
            cue_dims: 4,
            video_frames: 50,
            snr_set: vec![-5.0, 0.0, 5.0, 10.0, 15.0, 20.0],
            seed: 0,
            ambiguity: 0.5,
            cue_snr_db: 10.0,
        }
    }
}

impl CorpusSpec {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    /// Global position of `(split, index)`; splits are laid out train, val, test.
    pub fn position(&self, split: Split, index: usize) -> usize {
        match split {
            Split::Train => index,
            Split::Val => self.n_train + index,
            Split::Test => self.n_train + self.n_val + index,
        }
    }

    /// Example seeds are `seed·2^32 + position`, so every split owns a
    /// contiguous range disjoint from the others.
    pub fn example_seed(&self, split: Split, index: usize) -> u64 {
        self.seed.wrapping_shl(32).wrapping_add(self.position(split, index) as u64)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (k, val) in [
            ("T", self.samples),
            ("M", self.speakers),
            ("d_v", self.cue_dims),
            ("F_V", self.video_frames),
            ("sample_rate", self.sample_rate as usize),
        ] {
            if val == 0 {
                v.push(format!("{k} must be at least 1"));
            }
        }
        if self.video_frames > self.samples {
            v.push(format!("F_V = {} exceeds T = {}", self.video_frames, self.samples));
        }
        if self.snr_set.is_empty() || self.snr_set.iter().any(|s| !s.is_finite()) {
            v.push("snr_set must be a nonempty list of finite dB values".into());
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            v.push(format!("ambiguity = {} must lie in [0, 1]", self.ambiguity));
        }
        if self.cue_snr_db.is_nan() {
            v.push("cue_snr_db is NaN".into());
        }
        if self.total() as u64 > u32::MAX as u64 {
            v.push("too many examples".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn to_kv(&self) -> String {
        let snr: Vec<String> = self.snr_set.iter().map(|s| s.to_string()).collect();
        kv::render([
            ("n_train", self.n_train.to_string()),
            ("n_val", self.n_val.to_string()),
            ("n_test", self.n_test.to_string()),
            ("T", self.samples.to_string()),
            ("sample_rate", self.sample_rate.to_string()),
            ("M", self.speakers.to_string()),
            ("d_v", self.cue_dims.to_string()),
            ("F_V", self.video_frames.to_string()),
            ("snr_set", snr.join(",")),
            ("corpus_seed", self.seed.to_string()),
            ("ambiguity", self.ambiguity.to_string()),
            ("cue_snr_db", self.cue_snr_db.to_string()),
        ])
    }

    /// Reads corpus keys from `map`; absent keys keep their defaults.
    pub fn from_kv(map: &mut KvMap) -> Result<Self> {
        let d = CorpusSpec::default();
        let snr_set = match map.get::<String>("snr_set")? {
            None => d.snr_set,
            Some(s) => s
                .split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|e| Error::Config(vec![format!("snr_set entry {x:?}: {e}")])))
                .collect::<Result<_>>()?,
        };
        Ok(CorpusSpec {
            n_train: map.get_or("n_train", d.n_train)?,
            n_val: map.get_or("n_val", d.n_val)?,
            n_test: map.get_or("n_test", d.n_test)?,
            samples: map.get_or("T", d.samples)?,
            sample_rate: map.get_or("sample_rate", d.sample_rate)?,
            speakers: map.get_or("M", d.speakers)?,
            cue_dims: map.get_or("d_v", d.cue_dims)?,
            video_frames: map.get_or("F_V", d.video_frames)?,
            snr_set,
            seed: map.get_or("corpus_seed", d.seed)?,
            ambiguity: map.get_or("ambiguity", d.ambiguity)?,
            cue_snr_db: map.get_or("cue_snr_db", d.cue_snr_db)?,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = KvMap::parse(text)?;
        let spec = Self::from_kv(&mut map)?;
        map.finish()?;
        Ok(spec)
    }

    /// Fundamental band of `speaker`. Unambiguous examples give each speaker
    /// its own band, ordered by speaker index.
    pub fn f0_band(&self, speaker: usize, ambiguous: bool) -> (f64, f64) {
        let (lo, hi) = F0_RANGE;
        if ambiguous {
            return (lo, hi);
        }
        let w = (hi - lo) / self.speakers as f64;
        let start = lo + w * speaker as f64;
        (start, start + 0.7 * w)
    }
}

/// One synthetic mixture with its components.
#[derive(Clone, Debug, PartialEq)]
pub struct AvsExample {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub snr_db: f64,
    pub ambiguous: bool,
    /// `[1, T]`
    pub mixture: Tensor,
    /// `[M, T]`
    pub sources: Tensor,
    /// `[T]`
    pub noise: Tensor,
    /// `[M·d_v, F_V]`, speaker-major.
    pub cues: Tensor,
}

impl AvsExample {
    pub fn source(&self, i: usize) -> &[f64] {
        self.sources.row_data(i)
    }
}

pub fn example_id(split: Split, index: usize) -> String {
    format!("{split}_{index:05}")
}

pub fn generate_example(spec: &CorpusSpec, split: Split, index: usize) -> Result<AvsExample> {
    let seed = spec.example_seed(split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ambiguous = rng.random_bool(spec.ambiguity);
    let snr_db = spec.snr_set[rng.random_range(0..spec.snr_set.len())];
    let rho = rng.random_range(0.0..0.95);

    let mut waves = Vec::with_capacity(spec.speakers);
    let mut cues = Vec::with_capacity(spec.speakers * spec.cue_dims * spec.video_frames);
    for i in 0..spec.speakers {
        let params = SourceParams {
            samples: spec.samples,
            sample_rate: spec.sample_rate,
            f0_range: spec.f0_band(i, ambiguous),
            timbre_dims: spec.cue_dims - 1,
            frames: spec.video_frames,
        };
        let src = synth_source(derive_seed(seed, 1 + i as u64), &params);
        cues.extend(make_cues(&src.envelope, &src.timbre, derive_seed(seed, 1000 + i as u64), spec.cue_snr_db));
        waves.push(src.waveform);
    }
    let noise_raw = colored_noise(derive_seed(seed, 999), spec.samples, rho);
    let (mix, noise) = mix_at_snr(&waves, &noise_raw, snr_db)?;
    let t = spec.samples;
    Ok(AvsExample {
        id: example_id(split, index),
        seed,
        split,
        snr_db,
        ambiguous,
        mixture: Tensor::new(vec![1, t], mix)?,
        sources: Tensor::new(vec![spec.speakers, t], waves.concat())?,
        noise: Tensor::new(vec![t], noise)?,
        cues: Tensor::new(vec![spec.speakers * spec.cue_dims, spec.video_frames], cues)?,
    })
}

/// Writes `spec` as WAVs, a cue file, a manifest and `corpus.kv` under `dir`.
///
/// WAVs share a per-example gain that puts the loudest of mixture and sources
/// at [`WAV_HEADROOM`]. The noise WAV holds the quantized mixture minus the
/// quantized sources, so the stored components re-sum exactly.
pub fn generate_corpus(spec: &CorpusSpec, dir: &Path) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    fs::create_dir_all(dir.join("wav"))?;
    let mut cue = CueWriter::create(&dir.join(CUE_FILE))?;
    let mut entries = Vec::with_capacity(spec.total());
    for split in Split::ALL {
        for index in 0..spec.count(split) {
            let ex = generate_example(spec, split, index)?;
            let rel = |suffix: &str| format!("wav/{}_{suffix}.wav", ex.id);
            let paths = ExamplePaths {
                mix: rel("mix"),
                src: (0..spec.speakers).map(|i| rel(&format!("s{i}"))).collect(),
                noise: rel("noise"),
                cues: CUE_FILE.to_string(),
            };
            let peak = ex.mixture.data().iter().chain(ex.sources.data()).fold(0.0f64, |m, v| m.max(v.abs()));
            let gain = WAV_HEADROOM / peak;
            let mix_q: Vec<i16> = ex.mixture.data().iter().map(|&v| quantize(gain * v)).collect();
            let mut residual: Vec<i32> = mix_q.iter().map(|&v| v as i32).collect();
            for (i, p) in paths.src.iter().enumerate() {
                let q: Vec<i16> = ex.source(i).iter().map(|&v| quantize(gain * v)).collect();
                for (r, s) in residual.iter_mut().zip(&q) {
                    *r -= *s as i32;
                }
                write_wav_i16(&dir.join(p), &q, spec.sample_rate)?;
            }
            let noise_q = residual
                .into_iter()
                .map(|r| {
                    i16::try_from(r)
                        .map_err(|_| Error::Format(format!("{}: noise residual {r} overflows 16 bits", ex.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            write_wav_i16(&dir.join(&paths.noise), &noise_q, spec.sample_rate)?;
            write_wav_i16(&dir.join(&paths.mix), &mix_q, spec.sample_rate)?;
            cue.push(&[&ex.cues, &ex.sources, &ex.noise])?;
            entries.push(ManifestEntry {
                id: ex.id,
                seed: ex.seed,
                snr_db: ex.snr_db,
                paths,
                split: split.to_string(),
                cue_index: entries.len(),
                gain,
                ambiguous: ex.ambiguous,
            });
        }
    }
    cue.finish()?;
    write_manifest(&dir.join(MANIFEST_FILE), &entries)?;
    fs::write(dir.join(SPEC_FILE), spec.to_kv())?;
    Ok(entries)
}

/// A generated corpus opened for reading.
pub struct Corpus {
    dir: PathBuf,
    spec: CorpusSpec,
    entries: Vec<ManifestEntry>,
    cues: CueReader,
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Self> {
        let spec = CorpusSpec::parse(&fs::read_to_string(dir.join(SPEC_FILE))?)?;
        let entries = read_manifest(&dir.join(MANIFEST_FILE))?;
        if entries.len() != spec.total() {
            return Err(Error::Format(format!(
                "manifest has {} entries, corpus.kv declares {}",
                entries.len(),
                spec.total()
            )));
        }
        let cues = CueReader::open(&dir.join(CUE_FILE))?;
        Ok(Corpus { dir: dir.to_path_buf(), spec, entries, cues })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn spec(&self) -> &CorpusSpec {
        &self.spec
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// Manifest positions belonging to `split`, in order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        let name = split.as_str();
        (0..self.entries.len()).filter(|&i| self.entries[i].split == name).collect()
    }

    /// Example at manifest position `idx`, from the f64 masters.
    pub fn load(&self, idx: usize) -> Result<AvsExample> {
        load_example(self, idx)
    }

    /// The same example rebuilt from its 16-bit WAVs (gain removed).
    pub fn load_wav(&self, idx: usize) -> Result<AvsExample> {
        let mut ex = self.load(idx)?;
        let e = &self.entries[idx];
        let sr = self.spec.sample_rate;
        let read = |p: &str| -> Result<Vec<f64>> {
            let v = read_wav(&self.dir.join(p), sr)?;
            if v.len() != self.spec.samples {
                return Err(Error::Format(format!("{p}: {} samples, expected {}", v.len(), self.spec.samples)));
            }
            Ok(v.into_iter().map(|x| x / e.gain).collect())
        };
        let t = self.spec.samples;
        ex.mixture = Tensor::new(vec![1, t], read(&e.paths.mix)?)?;
        let src = e.paths.src.iter().map(|p| read(p)).collect::<Result<Vec<_>>>()?;
        ex.sources = Tensor::new(vec![self.spec.speakers, t], src.concat())?;
        ex.noise = Tensor::new(vec![t], read(&e.paths.noise)?)?;
        Ok(ex)
    }
}

pub fn load_example(corpus: &Corpus, idx: usize) -> Result<AvsExample> {
    let e = corpus
        .entries
        .get(idx)
        .ok_or_else(|| Error::Format(format!("example {idx} out of range ({} entries)", corpus.entries.len())))?;
    let spec = &corpus.spec;
    let mut arrays = corpus.cues.read(e.cue_index)?.into_iter();
    let (Some(cues), Some(sources), Some(noise), None) = (arrays.next(), arrays.next(), arrays.next(), arrays.next())
    else {
        return Err(Error::Format(format!("cue record {} must hold exactly 3 arrays", e.cue_index)));
    };
    let t = spec.samples;
    let want: [(&str, &Tensor, Vec<usize>); 3] = [
        ("cues", &cues, vec![spec.speakers * spec.cue_dims, spec.video_frames]),
        ("sources", &sources, vec![spec.speakers, t]),
        ("noise", &noise, vec![t]),
    ];
    for (name, tensor, shape) in want {
        if tensor.shape() != shape.as_slice() {
            return Err(Error::Format(format!("{}: {name} has shape {:?}, expected {shape:?}", e.id, tensor.shape())));
        }
    }
    let rows: Vec<Vec<f64>> = (0..spec.speakers).map(|i| sources.row_data(i).to_vec()).collect();
    let mut mix = sum_sources(&rows);
    for (m, n) in mix.iter_mut().zip(noise.data()) {
        *m += n;
    }
    Ok(AvsExample {
        id: e.id.clone(),
        seed: e.seed,
        split: e.split.parse()?,
        snr_db: e.snr_db,
        ambiguous: e.ambiguous,
        mixture: Tensor::new(vec![1, t], mix)?,
        sources,
        noise,
        cues,
    })
}

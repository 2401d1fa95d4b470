//! Seeded synthetic multi-speaker corpus.
//!
//! Each speaker owns a spectral band center, a tilt and a pitch offset; each
//! phoneme owns a formant shift, an F0 offset and an energy gain. Utterances
//! are rendered frame by frame from those, plus Gaussian noise drawn from a
//! per-item stream so generation order never matters.

use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::generator::{log_duration, N_FEAT};
use crate::tensor::Tensor;
use crate::N_MELS;

pub const FORMAT: &str = "mtts-dataset";
pub const VERSION: u32 = 1;
const CLIP: f64 = 1e3;
const MIN_BAND_GAP: f64 = 3.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt dataset {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub vocab_size: usize,
    /// Inclusive phoneme-count range per utterance.
    pub phonemes: [usize; 2],
    /// Inclusive frame range per phoneme.
    pub durations: [usize; 2],
    pub noise_std: f64,
    /// Width of the spectral bump, in mel bins.
    pub formant_width: f64,
    pub seed: u64,
    /// Train, validation and test fractions over seen speakers.
    pub split: [f64; 3],
    pub unseen_speakers: Vec<usize>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 8,
            utterances_per_speaker: 40,
            vocab_size: 32,
            phonemes: [4, 10],
            durations: [2, 6],
            noise_std: 0.0,
            formant_width: 4.0,
            seed: 1234,
            split: [0.8, 0.1, 0.1],
            unseen_speakers: vec![6, 7],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CorpusError::Invalid(m));
        if self.n_speakers < 4 {
            return bad(format!("need at least 4 speakers, got {}", self.n_speakers));
        }
        if self.utterances_per_speaker == 0 {
            return bad("utterances_per_speaker must be positive".into());
        }
        if let Some(&s) = self.unseen_speakers.iter().find(|&&s| s >= self.n_speakers) {
            return bad(format!("unseen speaker {s} does not exist"));
        }
        let mut unseen = self.unseen_speakers.clone();
        unseen.sort_unstable();
        unseen.dedup();
        if self.n_speakers - unseen.len() < 2 {
            return bad("need at least 2 training speakers".into());
        }
        let [p0, p1] = self.phonemes;
        let [d0, d1] = self.durations;
        if p0 == 0 || p0 > p1 || d0 > d1 || d1 == 0 {
            return bad(format!("bad ranges: phonemes {:?}, durations {:?}", self.phonemes, self.durations));
        }
        if d0 == 0 {
            return bad("minimum duration must be at least one frame".into());
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.split.iter().any(|&r| r < 0.0) {
            return bad(format!("split ratios {:?} must be nonnegative and sum to 1", self.split));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and nonnegative".into());
        }
        if !(self.formant_width > 0.0 && self.formant_width.is_finite()) {
            return bad("formant_width must be positive".into());
        }
        let span = 50.0;
        if (self.n_speakers - 1) as f64 * MIN_BAND_GAP > span {
            return bad(format!("at most {} speakers fit the band range", (span / MIN_BAND_GAP) as usize + 1));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub id: usize,
    pub base_band: f64,
    pub tilt: f64,
    pub pitch_offset: f64,
}

/// Fixed per-phoneme rendering constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeTable {
    pub formant_offset: Vec<f64>,
    pub f0_offset: Vec<f64>,
    pub energy_gain: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unseen,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Unseen];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unseen => "unseen",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

/// Global mean/std per stream, applied after rendering.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub f0: [f64; 2],
    pub energy: [f64; 2],
    pub mel: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: usize,
    pub speaker: usize,
    pub split: Split,
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    /// `[T, 2]`
    pub feat: Tensor,
    /// `[T, 80]`
    pub mel: Tensor,
}

impl Item {
    pub fn frames(&self) -> usize {
        self.mel.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: CorpusConfig,
    pub speakers: Vec<SpeakerSpec>,
    pub phonemes: PhonemeTable,
    pub norm: Normalization,
    pub items: Vec<Item>,
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_speakers(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Vec<SpeakerSpec> {
    let mut bands: Vec<f64> = Vec::with_capacity(cfg.n_speakers);
    while bands.len() < cfg.n_speakers {
        let b = rng.random_range(10.0..=60.0);
        if bands.iter().all(|&o: &f64| (o - b).abs() >= MIN_BAND_GAP) {
            bands.push(b);
        }
    }
    bands
        .into_iter()
        .enumerate()
        .map(|(id, base_band)| SpeakerSpec {
            id,
            base_band,
            tilt: rng.random_range(-0.5..=0.5),
            pitch_offset: rng.random_range(-1.0..=1.0),
        })
        .collect()
}

fn draw_phonemes(vocab: usize, rng: &mut ChaCha8Rng) -> PhonemeTable {
    let mut t = PhonemeTable {
        formant_offset: Vec::with_capacity(vocab),
        f0_offset: Vec::with_capacity(vocab),
        energy_gain: Vec::with_capacity(vocab),
    };
    for _ in 0..vocab {
        t.formant_offset.push(rng.random_range(-8.0..=8.0));
        t.f0_offset.push(rng.random_range(-0.5..=0.5));
        t.energy_gain.push(rng.random_range(0.5..=1.5));
    }
    t
}

/// Unnormalized `(feat[T, 2], mel[T, 80])` for one utterance.
pub fn render_utterance(
    speaker: &SpeakerSpec,
    table: &PhonemeTable,
    phonemes: &[usize],
    durations: &[usize],
    formant_width: f64,
    noise_std: f64,
    rng: &mut impl Rng,
) -> (Tensor, Tensor) {
    let t: usize = durations.iter().sum();
    let noise = (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("valid std"));
    let mut feat = Vec::with_capacity(t * N_FEAT);
    let mut mel = Vec::with_capacity(t * N_MELS);
    let two_s2 = 2.0 * formant_width * formant_width;
    for (&p, &d) in phonemes.iter().zip(durations) {
        let center = speaker.base_band + table.formant_offset[p];
        for j in 0..d {
            feat.push(speaker.pitch_offset + table.f0_offset[p]);
            let phase = std::f64::consts::PI * (j as f64 + 0.5) / d as f64;
            feat.push(table.energy_gain[p] * phase.sin());
            for f in 0..N_MELS {
                let x = f as f64;
                let mut v = (-(x - center).powi(2) / two_s2).exp() + speaker.tilt * (x / N_MELS as f64);
                if let Some(n) = &noise {
                    v += n.sample(rng);
                }
                mel.push(v.clamp(-CLIP, CLIP));
            }
        }
    }
    (
        Tensor::new(vec![t, N_FEAT], feat).expect("frame count"),
        Tensor::new(vec![t, N_MELS], mel).expect("frame count"),
    )
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> [f64; 2] {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    let mean = sum / n.max(1) as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
    let std = var.sqrt();
    [mean, if std > 0.0 { std } else { 1.0 }]
}

pub fn synth_corpus(cfg: &CorpusConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, 0);
    let speakers = draw_speakers(cfg, &mut rng);
    let table = draw_phonemes(cfg.vocab_size, &mut rng);

    let mut items = Vec::with_capacity(cfg.n_speakers * cfg.utterances_per_speaker);
    for spk in &speakers {
        for u in 0..cfg.utterances_per_speaker {
            let id = spk.id * cfg.utterances_per_speaker + u;
            let mut r = stream(cfg.seed, 1 + id as u64);
            let p = r.random_range(cfg.phonemes[0]..=cfg.phonemes[1]);
            let phonemes: Vec<usize> = (0..p).map(|_| r.random_range(0..cfg.vocab_size)).collect();
            let durations: Vec<usize> = (0..p)
                .map(|_| r.random_range(cfg.durations[0]..=cfg.durations[1]))
                .collect();
            let (feat, mel) =
                render_utterance(spk, &table, &phonemes, &durations, cfg.formant_width, cfg.noise_std, &mut r);
            items.push(Item {
                id,
                speaker: spk.id,
                split: Split::Train,
                phonemes,
                durations,
                feat,
                mel,
            });
        }
    }
    assign_splits(cfg, &mut items);

    let norm = Normalization {
        f0: mean_std(items.iter().flat_map(|i| i.feat.data().iter().step_by(2).copied())),
        energy: mean_std(items.iter().flat_map(|i| i.feat.data().iter().skip(1).step_by(2).copied())),
        mel: mean_std(items.iter().flat_map(|i| i.mel.data().iter().copied())),
    };
    for item in &mut items {
        for (k, v) in item.feat.data_mut().iter_mut().enumerate() {
            let [m, s] = if k % 2 == 0 { norm.f0 } else { norm.energy };
            *v = (*v - m) / s;
        }
        let [m, s] = norm.mel;
        for v in item.mel.data_mut() {
            *v = (*v - m) / s;
        }
    }
    Ok(Dataset {
        config: cfg.clone(),
        speakers,
        phonemes: table,
        norm,
        items,
    })
}

/// Per seen speaker: shuffle its utterances, then cut by the split ratios.
fn assign_splits(cfg: &CorpusConfig, items: &mut [Item]) {
    let mut rng = stream(cfg.seed, u64::MAX);
    let n = cfg.utterances_per_speaker;
    for s in 0..cfg.n_speakers {
        let block = &mut items[s * n..(s + 1) * n];
        if cfg.unseen_speakers.contains(&s) {
            block.iter_mut().for_each(|i| i.split = Split::Unseen);
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_train = (cfg.split[0] * n as f64).round() as usize;
        let n_val = (cfg.split[1] * n as f64).round() as usize;
        for (rank, &k) in order.iter().enumerate() {
            block[k].split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
}

impl Dataset {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].split == split).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut blob: Vec<u8> = Vec::new();
        let mut entries = Vec::with_capacity(self.items.len());
        for item in &self.items {
            let feat_offset = blob.len();
            item.feat.data().iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
            let mel_offset = blob.len();
            item.mel.data().iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
            entries.push(ItemEntry {
                id: item.id,
                speaker: item.speaker,
                split: item.split,
                phonemes: item.phonemes.clone(),
                durations: item.durations.clone(),
                frames: item.frames(),
                feat_offset,
                mel_offset,
            });
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            byte_order: "little".into(),
            blob: BLOB_NAME.into(),
            blob_sha256: hex::encode(Sha256::digest(&blob)),
            config: self.config.clone(),
            speakers: self.speakers.clone(),
            phonemes: self.phonemes.clone(),
            norm: self.norm,
            items: entries,
        };
        write_file(&dir.join(BLOB_NAME), &blob)?;
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_file(&dir.join(MANIFEST_NAME), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_NAME);
        let text = fs::read(&mpath).map_err(io_err(&mpath))?;
        let corrupt = |detail: String| CorpusError::Corrupt {
            path: mpath.clone(),
            detail,
        };
        let m: Manifest = serde_json::from_slice(&text).map_err(|e| corrupt(e.to_string()))?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(corrupt(format!("unsupported format {} v{}", m.format, m.version)));
        }
        let bpath = dir.join(&m.blob);
        let blob = fs::read(&bpath).map_err(io_err(&bpath))?;
        if hex::encode(Sha256::digest(&blob)) != m.blob_sha256 {
            return Err(corrupt("blob hash mismatch".into()));
        }
        let read = |off: usize, n: usize| -> Result<Vec<f64>> {
            let bytes = blob
                .get(off..off + 8 * n)
                .ok_or_else(|| corrupt(format!("offset {off} outside blob")))?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let mut items = Vec::with_capacity(m.items.len());
        for e in m.items {
            let feat = Tensor::new(vec![e.frames, N_FEAT], read(e.feat_offset, e.frames * N_FEAT)?)
                .map_err(|err| corrupt(err.to_string()))?;
            let mel = Tensor::new(vec![e.frames, N_MELS], read(e.mel_offset, e.frames * N_MELS)?)
                .map_err(|err| corrupt(err.to_string()))?;
            if e.durations.iter().sum::<usize>() != e.frames || e.durations.len() != e.phonemes.len() {
                return Err(corrupt(format!("item {} durations do not match frames", e.id)));
            }
            items.push(Item {
                id: e.id,
                speaker: e.speaker,
                split: e.split,
                phonemes: e.phonemes,
                durations: e.durations,
                feat,
                mel,
            });
        }
        Ok(Self {
            config: m.config,
            speakers: m.speakers,
            phonemes: m.phonemes,
            norm: m.norm,
            items,
        })
    }
}

pub const MANIFEST_NAME: &str = "dataset.json";
pub const BLOB_NAME: &str = "dataset.bin";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    byte_order: String,
    blob: String,
    blob_sha256: String,
    config: CorpusConfig,
    speakers: Vec<SpeakerSpec>,
    phonemes: PhonemeTable,
    norm: Normalization,
    items: Vec<ItemEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemEntry {
    id: usize,
    speaker: usize,
    split: Split,
    phonemes: Vec<usize>,
    durations: Vec<usize>,
    frames: usize,
    feat_offset: usize,
    mel_offset: usize,
}

/// Splits `indices` into cross-speaker pairs: repeatedly take one item from
/// the speaker with the most remaining items and one from the runner-up.
/// Falls back to same-speaker pairs only when a single speaker remains.
fn cross_speaker_pairs(ds: &Dataset, indices: &[usize], rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut pools: Vec<(usize, Vec<usize>)> = Vec::new();
    for &i in indices {
        let s = ds.items[i].speaker;
        match pools.iter_mut().find(|(sp, _)| *sp == s) {
            Some((_, v)) => v.push(i),
            None => pools.push((s, vec![i])),
        }
    }
    pools.sort_by_key(|(s, _)| *s);
    for (_, v) in &mut pools {
        v.shuffle(rng);
    }
    let mut pairs = Vec::with_capacity(indices.len() / 2);
    loop {
        pools.retain(|(_, v)| !v.is_empty());
        // stable sort keeps speaker-id order on ties
        pools.sort_by(|a, b| b.1.len().cmp(&a.1.len()));
        match pools.len() {
            0 => break,
            1 => {
                let v = &mut pools[0].1;
                if v.len() < 2 {
                    break;
                }
                let a = v.pop().unwrap();
                let b = v.pop().unwrap();
                pairs.push((a, b));
            }
            _ => {
                let a = pools[0].1.pop().unwrap();
                let b = pools[1].1.pop().unwrap();
                pairs.push((a, b));
            }
        }
    }
    pairs
}

/// Item indices for one epoch: `batch / 2` shuffled pairs per batch, pair
/// `i` placed at positions `i` and `batch - 1 - i`. A trailing partial batch
/// is dropped.
pub fn batch_iter(ds: &Dataset, split: Split, batch: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch == 0 || batch % 2 != 0 {
        return Err(CorpusError::Invalid(format!(
            "batch size {batch} must be even and positive so every item has an interpolation partner"
        )));
    }
    let indices = ds.split_indices(split);
    if batch > indices.len() {
        return Err(CorpusError::Invalid(format!(
            "batch size {batch} exceeds the {} items of split {}",
            indices.len(),
            split.name()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut pairs = cross_speaker_pairs(ds, &indices, &mut rng);
    pairs.shuffle(&mut rng);
    let half = batch / 2;
    Ok(pairs
        .chunks_exact(half)
        .map(|chunk| {
            let mut b = vec![0; batch];
            for (i, &(x, y)) in chunk.iter().enumerate() {
                b[i] = x;
                b[batch - 1 - i] = y;
            }
            b
        })
        .collect())
}

/// Packed model-side view of a set of items.
#[derive(Clone, Debug)]
pub struct Batch {
    pub items: Vec<usize>,
    pub speakers: Vec<usize>,
    pub phonemes: Vec<Vec<usize>>,
    pub durations: Vec<Vec<usize>>,
    pub phoneme_segments: Vec<usize>,
    pub frame_segments: Vec<usize>,
    /// `[1, sum(P_i)]` log-duration targets.
    pub log_dur: Tensor,
    /// `[2, sum(T_i)]`
    pub feat: Tensor,
    /// `[80, sum(T_i)]`
    pub mel: Tensor,
    /// Frame-major `[T_i, 80]` mels for the speaker encoder.
    pub mels: Vec<Tensor>,
}

/// Concatenates frame-major `[T_i, c]` matrices into channel-major `[c, sum T_i]`.
pub fn pack_channels(parts: &[&Tensor]) -> Tensor {
    let c = parts[0].shape()[1];
    let total: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut out = vec![0.0; c * total];
    let mut off = 0;
    for p in parts {
        let t = p.shape()[0];
        for (r, row) in p.data().chunks(c).enumerate() {
            for (ch, &v) in row.iter().enumerate() {
                out[ch * total + off + r] = v;
            }
        }
        off += t;
    }
    Tensor::new(vec![c, total], out).expect("packed shape")
}

impl Batch {
    pub fn new(ds: &Dataset, indices: &[usize]) -> Self {
        let items: Vec<&Item> = indices.iter().map(|&i| &ds.items[i]).collect();
        let log_dur: Vec<f64> = items
            .iter()
            .flat_map(|i| i.durations.iter().map(|&d| log_duration(d)))
            .collect();
        let n = log_dur.len();
        Self {
            items: indices.to_vec(),
            speakers: items.iter().map(|i| i.speaker).collect(),
            phonemes: items.iter().map(|i| i.phonemes.clone()).collect(),
            durations: items.iter().map(|i| i.durations.clone()).collect(),
            phoneme_segments: items.iter().map(|i| i.phonemes.len()).collect(),
            frame_segments: items.iter().map(|i| i.frames()).collect(),
            log_dur: Tensor::new(vec![1, n], log_dur).expect("row"),
            feat: pack_channels(&items.iter().map(|i| &i.feat).collect::<Vec<_>>()),
            mel: pack_channels(&items.iter().map(|i| &i.mel).collect::<Vec<_>>()),
            mels: items.iter().map(|i| i.mel.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn phoneme_refs(&self) -> Vec<&[usize]> {
        self.phonemes.iter().map(Vec::as_slice).collect()
    }

    pub fn duration_refs(&self) -> Vec<&[usize]> {
        self.durations.iter().map(Vec::as_slice).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            utterances_per_speaker: 10,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn frames_equal_duration_sums() {
        let ds = synth_corpus(&small()).unwrap();
        for item in &ds.items {
            assert_eq!(item.frames(), item.durations.iter().sum::<usize>());
            assert_eq!(item.feat.shape(), &[item.frames(), 2]);
        }
    }

    #[test]
    fn noiseless_rendering_is_a_function_of_its_inputs() {
        let ds = synth_corpus(&small()).unwrap();
        let spk = &ds.speakers[1];
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(2);
        let x = render_utterance(spk, &ds.phonemes, &[3, 1, 4], &[2, 3, 2], 4.0, 0.0, &mut a);
        let y = render_utterance(spk, &ds.phonemes, &[3, 1, 4], &[2, 3, 2], 4.0, 0.0, &mut b);
        assert_eq!(x, y);
    }

    #[test]
    fn rejects_infeasible_configs() {
        for cfg in [
            CorpusConfig {
                utterances_per_speaker: 0,
                ..small()
            },
            CorpusConfig {
                n_speakers: 3,
                unseen_speakers: vec![],
                ..small()
            },
            CorpusConfig {
                unseen_speakers: vec![1, 2, 3, 4, 5, 6, 7],
                ..small()
            },
            CorpusConfig {
                split: [0.5, 0.1, 0.1],
                ..small()
            },
            CorpusConfig {
                unseen_speakers: vec![8],
                ..small()
            },
        ] {
            assert!(synth_corpus(&cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn splits_are_disjoint_and_unseen_stay_out_of_training() {
        let ds = synth_corpus(&CorpusConfig::default()).unwrap();
        let train = ds.split_indices(Split::Train);
        assert_eq!(train.len(), 6 * 32);
        assert_eq!(ds.split_indices(Split::Val).len(), 6 * 4);
        assert_eq!(ds.split_indices(Split::Unseen).len(), 2 * 40);
        for b in batch_iter(&ds, Split::Train, 8, 3).unwrap() {
            assert!(b.iter().all(|&i| !ds.config.unseen_speakers.contains(&ds.items[i].speaker)));
        }
    }

    #[test]
    fn batches_are_even_deterministic_and_cross_speaker() {
        let ds = synth_corpus(&CorpusConfig::default()).unwrap();
        let a = batch_iter(&ds, Split::Train, 8, 11).unwrap();
        assert_eq!(a, batch_iter(&ds, Split::Train, 8, 11).unwrap());
        assert_ne!(a, batch_iter(&ds, Split::Train, 8, 12).unwrap());
        assert_eq!(a.len(), 24);
        for b in &a {
            assert_eq!(b.len(), 8);
            for m in 0..8 {
                assert_ne!(ds.items[b[m]].speaker, ds.items[b[7 - m]].speaker);
            }
        }
        assert!(batch_iter(&ds, Split::Train, 7, 0).is_err());
    }

    #[test]
    fn packing_transposes_frames_into_columns() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![5.0, 6.0]).unwrap();
        let p = pack_channels(&[&a, &b]);
        assert_eq!(p.shape(), &[2, 3]);
        assert_eq!(p.data(), &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn save_load_round_trip_and_hash_check() {
        let ds = synth_corpus(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
        let bin = dir.path().join(BLOB_NAME);
        let mut bytes = fs::read(&bin).unwrap();
        bytes[17] ^= 1;
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(CorpusError::Corrupt { .. })));
    }
}

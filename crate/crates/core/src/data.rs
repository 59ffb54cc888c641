//! Manifests, the synthetic machine-sound corpus and epoch batching.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{read_wav, write_wav, Waveform};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Normal,
    Anomaly,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Normal => "normal",
            Condition::Anomaly => "anomaly",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "normal" => Ok(Condition::Normal),
            "anomaly" => Ok(Condition::Anomaly),
            _ => Err(format!("unknown condition {s:?}")),
        }
    }
}

/// `(machine_type, machine_id)`.
pub type MachineKey = (String, u32);

#[derive(Clone, Debug, PartialEq)]
pub enum ClipSource {
    Path(PathBuf),
    Synth(SynthSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub source: ClipSource,
    pub machine_type: String,
    pub machine_id: u32,
    pub split: Split,
    pub condition: Condition,
}

impl ClipRecord {
    pub fn key(&self) -> MachineKey {
        (self.machine_type.clone(), self.machine_id)
    }

    /// Reads or synthesizes the audio. Relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Waveform> {
        match &self.source {
            ClipSource::Path(p) if p.is_absolute() => read_wav(p),
            ClipSource::Path(p) => read_wav(base.join(p)),
            ClipSource::Synth(spec) => synth_clip(spec),
        }
    }
}

/// Sorted `(type, id) → class index` map.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    entries: Vec<MachineKey>,
}

impl ClassMap {
    pub fn from_keys(keys: impl IntoIterator<Item = MachineKey>) -> Self {
        let set: std::collections::BTreeSet<MachineKey> = keys.into_iter().collect();
        ClassMap {
            entries: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index(&self, machine_type: &str, machine_id: u32) -> Result<usize> {
        self.entries
            .binary_search_by(|(t, i)| (t.as_str(), *i).cmp(&(machine_type, machine_id)))
            .map_err(|_| Error::UnknownClass {
                machine_type: machine_type.to_string(),
                machine_id,
            })
    }

    pub fn key(&self, class: usize) -> &MachineKey {
        &self.entries[class]
    }

    pub fn keys(&self) -> &[MachineKey] {
        &self.entries
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<ClipRecord>,
    pub class_map: ClassMap,
    /// Directory relative clip paths are resolved against.
    pub base_dir: PathBuf,
}

#[derive(Debug, Deserialize)]
struct Row {
    path: String,
    machine_type: String,
    machine_id: String,
    split: String,
    condition: String,
}

pub const MANIFEST_HEADER: [&str; 5] = ["path", "machine_type", "machine_id", "split", "condition"];

impl Manifest {
    /// Validates records built in memory. `lines[i]` is reported for record `i`.
    fn build(records: Vec<ClipRecord>, lines: &[u64], base_dir: PathBuf) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Manifest {
                line: 1,
                message: "no records".into(),
            });
        }
        let mut seen_paths = HashSet::new();
        for (r, &line) in records.iter().zip(lines) {
            if r.split == Split::Train && r.condition == Condition::Anomaly {
                return Err(Error::Manifest {
                    line,
                    message: "anomaly clip in the train split".into(),
                });
            }
            if r.machine_type.is_empty() {
                return Err(Error::Manifest {
                    line,
                    message: "empty machine_type".into(),
                });
            }
            let identity = match &r.source {
                ClipSource::Path(p) => format!("path:{}", p.display()),
                ClipSource::Synth(s) => format!("synth:{s:?}"),
            };
            if !seen_paths.insert(identity) {
                return Err(Error::Manifest {
                    line,
                    message: "duplicate clip".into(),
                });
            }
        }
        let class_map = ClassMap::from_keys(records.iter().map(ClipRecord::key));
        if class_map.len() < 2 {
            return Err(Error::Manifest {
                line: lines[0],
                message: format!("need at least 2 (machine_type, machine_id) classes, found {}", class_map.len()),
            });
        }
        Ok(Manifest {
            records,
            class_map,
            base_dir,
        })
    }

    pub fn from_records(records: Vec<ClipRecord>) -> Result<Self> {
        let lines: Vec<u64> = (2..records.len() as u64 + 2).collect();
        Self::build(records, &lines, PathBuf::from("."))
    }

    pub fn parse_str(text: &str, base_dir: PathBuf) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::Manifest {
                line: 1,
                message: e.to_string(),
            })?
            .clone();
        if header.is_empty() && text.trim().is_empty() {
            return Err(Error::Manifest {
                line: 1,
                message: "no records".into(),
            });
        }
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Manifest {
                line: 1,
                message: format!("header must be `{}`", MANIFEST_HEADER.join(",")),
            });
        }
        let mut records = Vec::new();
        let mut lines = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Manifest {
                line: e.position().map_or(0, |p| physical_line(text, p.byte())),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| physical_line(text, p.byte()));
            let row: Row = rec.deserialize(Some(&header)).map_err(|e| Error::Manifest {
                line,
                message: e.to_string(),
            })?;
            let bad = |message: String| Error::Manifest { line, message };
            let machine_id = row
                .machine_id
                .parse::<u32>()
                .map_err(|_| bad(format!("machine_id {:?} is not a non-negative integer", row.machine_id)))?;
            records.push(ClipRecord {
                source: ClipSource::Path(PathBuf::from(row.path)),
                machine_type: row.machine_type,
                machine_id,
                split: row.split.parse().map_err(bad)?,
                condition: row.condition.parse().map_err(|m| Error::Manifest { line, message: m })?,
            });
            lines.push(line);
        }
        Self::build(records, &lines, base_dir)
    }

    pub fn n_classes(&self) -> usize {
        self.class_map.len()
    }

    pub fn class_of(&self, r: &ClipRecord) -> Result<usize> {
        self.class_map.index(&r.machine_type, r.machine_id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

fn physical_line(text: &str, byte: u64) -> u64 {
    let bytes = text.as_bytes();
    let mut end = (byte as usize).min(bytes.len());
    // a record's position can sit on blank lines skipped before it
    while end < bytes.len() && (bytes[end] == b'\n' || bytes[end] == b'\r') {
        end += 1;
    }
    bytes[..end].iter().filter(|&&b| b == b'\n').count() as u64 + 1
}

/// Reads a manifest CSV; relative clip paths resolve against its directory.
pub fn parse_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::parse_str(&text, base)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// An extra partial off the harmonic series.
    DetunedHarmonic,
    /// Short decaying noise bursts.
    TransientBursts,
    /// Noise confined to a frequency band, built from many random partials.
    BandNoise,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 3] = [
        PerturbationKind::DetunedHarmonic,
        PerturbationKind::TransientBursts,
        PerturbationKind::BandNoise,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Partial frequencies in Hz with their amplitudes.
    pub partials: Vec<(f64, f64)>,
    pub modulation_depth: f64,
    pub modulation_rate: f64,
    pub noise_level: f64,
    pub perturbation: PerturbationKind,
    pub strength: f64,
    pub duration_secs: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.sample_rate == 0 || !(self.duration_secs > 0.0) {
            return Err(Error::Config("synth clip needs positive rate and duration".into()));
        }
        if (self.duration_secs * self.sample_rate as f64).round() < 1.0 {
            return Err(Error::Config("synth clip is shorter than one sample".into()));
        }
        if self
            .partials
            .iter()
            .any(|&(f, a)| !(f > 0.0 && f < nyquist) || !(a >= 0.0 && a.is_finite()))
        {
            return Err(Error::Config(format!(
                "partials must lie in (0, {nyquist}) Hz with non-negative amplitude"
            )));
        }
        for (name, v) in [
            ("modulation_depth", self.modulation_depth),
            ("modulation_rate", self.modulation_rate),
            ("noise_level", self.noise_level),
            ("strength", self.strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.modulation_depth > 1.0 {
            return Err(Error::Config("modulation_depth must not exceed 1".into()));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration_secs * self.sample_rate as f64).round() as usize
    }
}

pub const SYNTH_PEAK: f64 = 0.9;

/// Deterministic machine-like tone: modulated partials plus gaussian noise,
/// plus `strength` times a perturbation drawn from an independent stream.
/// Clips whose peak exceeds [`SYNTH_PEAK`] are scaled down to it.
pub fn synth_clip(spec: &SynthSpec) -> Result<Waveform> {
    spec.validate()?;
    let n = spec.samples();
    let sr = spec.sample_rate as f64;
    let tau = std::f64::consts::TAU;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phases: Vec<f64> = spec.partials.iter().map(|_| rng.random_range(0.0..tau)).collect();
    let mod_phase = rng.random_range(0.0..tau);
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 1.0 + spec.modulation_depth * (tau * spec.modulation_rate * t + mod_phase).sin();
            let tone: f64 = spec
                .partials
                .iter()
                .zip(&phases)
                .map(|(&(f, a), &p)| a * (tau * f * t + p).sin())
                .sum();
            let noise: f64 = StandardNormal.sample(&mut rng);
            env * tone / 2.0 + spec.noise_level * noise
        })
        .collect();

    if spec.strength > 0.0 {
        let mut prng = ChaCha8Rng::seed_from_u64(spec.seed);
        prng.set_stream(1);
        let p = perturbation(spec, n, &mut prng);
        for (xi, pi) in x.iter_mut().zip(p) {
            *xi += spec.strength * pi;
        }
    }

    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > SYNTH_PEAK {
        let g = SYNTH_PEAK / peak;
        x.iter_mut()
            .for_each(|v| *v = (*v * g).clamp(-SYNTH_PEAK, SYNTH_PEAK));
    }
    Waveform::new(x, spec.sample_rate)
}

fn perturbation(spec: &SynthSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = spec.sample_rate as f64;
    let tau = std::f64::consts::TAU;
    let f0 = spec.partials.first().map_or(440.0, |p| p.0);
    let nyquist = sr / 2.0;
    match spec.perturbation {
        PerturbationKind::DetunedHarmonic => {
            // halfway between harmonics, with a slow frequency wobble
            let f = (f0 * rng.random_range(1.4..1.6)).min(nyquist * 0.9);
            let phase = rng.random_range(0.0..tau);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    0.5 * (tau * f * t + phase + 0.5 * (tau * 3.0 * t).sin()).sin()
                })
                .collect()
        }
        PerturbationKind::TransientBursts => {
            let mut out = vec![0.0; n];
            let per_second = 6.0;
            let count = ((n as f64 / sr) * per_second).ceil() as usize;
            let decay = sr * 0.01;
            for _ in 0..count {
                let start = rng.random_range(0..n);
                let len = (decay * 5.0) as usize;
                for k in 0..len.min(n - start) {
                    let v: f64 = StandardNormal.sample(rng);
                    out[start + k] += 0.8 * v * (-(k as f64) / decay).exp();
                }
            }
            out
        }
        PerturbationKind::BandNoise => {
            let lo = (f0 * 4.0).min(nyquist * 0.5);
            let hi = (lo * 2.0).min(nyquist * 0.95);
            let partials: Vec<(f64, f64)> = (0..24)
                .map(|_| (rng.random_range(lo..hi), rng.random_range(0.0..tau)))
                .collect();
            let norm = 0.6 / (partials.len() as f64).sqrt();
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    norm * partials.iter().map(|&(f, p)| (tau * f * t + p).sin()).sum::<f64>()
                })
                .collect()
        }
    }
}

/// Layout of a synthetic corpus mirroring the development-set structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub machine_types: usize,
    pub ids_per_type: usize,
    pub train_per_machine: usize,
    pub test_normal_per_machine: usize,
    pub test_anomaly_per_machine: usize,
    pub duration_secs: f64,
    pub sample_rate: u32,
    pub anomaly_strength: f64,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            machine_types: 4,
            ids_per_type: 2,
            train_per_machine: 100,
            test_normal_per_machine: 25,
            test_anomaly_per_machine: 25,
            duration_secs: 2.0,
            sample_rate: 16000,
            anomaly_strength: 0.6,
            noise_level: 0.02,
            seed: 7,
        }
    }
}

pub const MACHINE_TYPES: [&str; 6] = ["fan", "pump", "slider", "valve", "toycar", "toyconveyor"];

fn machine_type_name(t: usize) -> String {
    MACHINE_TYPES
        .get(t)
        .map_or_else(|| format!("machine{t}"), |s| s.to_string())
}

/// Every clip of the corpus as an in-memory synth record, train first.
pub fn synth_corpus(spec: &CorpusSpec) -> Result<Vec<ClipRecord>> {
    if spec.machine_types == 0 || spec.ids_per_type == 0 {
        return Err(Error::Config("corpus needs at least one type and one id".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    let mut machines = Vec::new();
    for t in 0..spec.machine_types {
        for id in 0..spec.ids_per_type {
            // types are an octave-ish apart, ids split each type's range
            let f0 = 110.0 * 1.45f64.powi(t as i32) * (1.0 + 0.18 * id as f64);
            let shape: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..1.0)).collect();
            let rate = rng.random_range(2.0..12.0);
            machines.push((t, id as u32, f0, shape, rate));
        }
    }
    let mut clip_seed = || rng.random::<u64>();
    let groups = [
        (Split::Train, Condition::Normal, spec.train_per_machine),
        (Split::Test, Condition::Normal, spec.test_normal_per_machine),
        (Split::Test, Condition::Anomaly, spec.test_anomaly_per_machine),
    ];
    for (split, condition, count) in groups {
        for (t, id, f0, shape, rate) in &machines {
            for _ in 0..count {
                let seed = clip_seed();
                let mut jitter = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
                let f = f0 * (1.0 + jitter.random_range(-0.01..0.01));
                let partials = shape
                    .iter()
                    .enumerate()
                    .map(|(h, &a)| (f * (h + 1) as f64, a / (h + 1) as f64))
                    .filter(|&(fh, _)| fh < spec.sample_rate as f64 * 0.45)
                    .collect();
                let synth = SynthSpec {
                    partials,
                    modulation_depth: 0.3,
                    modulation_rate: *rate,
                    noise_level: spec.noise_level,
                    perturbation: PerturbationKind::ALL[t % 3],
                    strength: if condition == Condition::Anomaly {
                        spec.anomaly_strength
                    } else {
                        0.0
                    },
                    duration_secs: spec.duration_secs,
                    sample_rate: spec.sample_rate,
                    seed,
                };
                records.push(ClipRecord {
                    source: ClipSource::Synth(synth),
                    machine_type: machine_type_name(*t),
                    machine_id: *id,
                    split,
                    condition,
                });
            }
        }
    }
    Ok(records)
}

/// Renders every record to `dir` as 16-bit WAV and writes `dir/manifest.csv`.
/// Returns the manifest path.
pub fn write_corpus(dir: &Path, records: &[ClipRecord]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest_path)?;
    w.write_record(MANIFEST_HEADER)?;
    for (i, r) in records.iter().enumerate() {
        let name = format!(
            "{}_{}_id{:02}_{}_{:05}.wav",
            r.split, r.condition, r.machine_id, r.machine_type, i
        );
        let wave = r.load(dir)?;
        write_wav(dir.join(&name), &wave)?;
        w.write_record([
            name.as_str(),
            r.machine_type.as_str(),
            &r.machine_id.to_string(),
            &r.split.to_string(),
            &r.condition.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// One minibatch: indices into `Manifest::records` with their class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<(usize, usize)>,
}

/// One epoch over the train records in a seeded permutation; the short final
/// batch is kept.
pub fn make_batches(manifest: &Manifest, batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch size {batch_size} leaves no mixup partner; need at least 2"
        )));
    }
    let mut items = Vec::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if r.split == Split::Train {
            items.push((i, manifest.class_of(r)?));
        }
    }
    if items.is_empty() {
        return Err(Error::Config("manifest has no train records".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    items.shuffle(&mut rng);
    Ok(items
        .chunks(batch_size)
        .map(|c| Batch { items: c.to_vec() })
        .collect())
}

/// Per-condition record counts for each machine, for summaries.
pub fn census(manifest: &Manifest) -> BTreeMap<(MachineKey, Split, Condition), usize> {
    let mut out = BTreeMap::new();
    for r in &manifest.records {
        *out.entry((r.key(), r.split, r.condition)).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{log_mel, mel_center_frequencies, MelConfig};

    fn tone(seed: u64) -> SynthSpec {
        SynthSpec {
            partials: vec![(300.0, 1.0), (600.0, 0.4)],
            modulation_depth: 0.2,
            modulation_rate: 4.0,
            noise_level: 0.05,
            perturbation: PerturbationKind::TransientBursts,
            strength: 0.0,
            duration_secs: 0.5,
            sample_rate: 16000,
            seed,
        }
    }

    #[test]
    fn synth_is_deterministic_and_bounded() {
        for kind in PerturbationKind::ALL {
            let spec = SynthSpec {
                perturbation: kind,
                strength: 3.0,
                ..tone(5)
            };
            let a = synth_clip(&spec).unwrap();
            let b = synth_clip(&spec).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 8000);
            assert!(a.samples().iter().all(|v| v.abs() <= SYNTH_PEAK));
        }
    }

    #[test]
    fn zero_strength_matches_the_normal_clip() {
        for kind in PerturbationKind::ALL {
            let normal = synth_clip(&tone(9)).unwrap();
            let anomaly = synth_clip(&SynthSpec {
                perturbation: kind,
                ..tone(9)
            })
            .unwrap();
            assert_eq!(normal, anomaly);
            let perturbed = synth_clip(&SynthSpec {
                perturbation: kind,
                strength: 0.5,
                ..tone(9)
            })
            .unwrap();
            assert_ne!(normal, perturbed);
        }
    }

    #[test]
    fn pure_500hz_tone_peaks_at_the_nearest_mel_bin() {
        let spec = SynthSpec {
            partials: vec![(500.0, 1.0)],
            modulation_depth: 0.0,
            noise_level: 0.0,
            duration_secs: 1.0,
            ..tone(1)
        };
        let w = synth_clip(&spec).unwrap();
        let cfg = MelConfig::default();
        let s = log_mel(&w, &cfg).unwrap();
        let centers = mel_center_frequencies(&cfg);
        let nearest = (0..centers.len())
            .min_by(|&a, &b| (centers[a] - 500.0).abs().total_cmp(&(centers[b] - 500.0).abs()))
            .unwrap();
        let (f, t) = (s.values.shape()[0], s.values.shape()[1]);
        for col in 1..t - 1 {
            let argmax = (0..f)
                .max_by(|&a, &b| s.values.at(&[a, col]).total_cmp(&s.values.at(&[b, col])))
                .unwrap();
            assert_eq!(argmax, nearest, "frame {col}");
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(synth_clip(&SynthSpec { partials: vec![(9000.0, 1.0)], ..tone(1) }).is_err());
        assert!(synth_clip(&SynthSpec { noise_level: -1.0, ..tone(1) }).is_err());
        assert!(synth_clip(&SynthSpec { duration_secs: 0.0, ..tone(1) }).is_err());
    }

    const HEADER: &str = "path,machine_type,machine_id,split,condition\n";

    #[test]
    fn manifest_builds_sorted_class_map() {
        let text = format!(
            "{HEADER}b.wav,pump,1,train,normal\na.wav,fan,2,train,normal\nc.wav,pump,0,test,anomaly\nd.wav,fan,1,test,normal\n"
        );
        let m = Manifest::parse_str(&text, PathBuf::new()).unwrap();
        assert_eq!(m.n_classes(), 4);
        assert_eq!(m.class_map.index("fan", 1).unwrap(), 0);
        assert_eq!(m.class_map.index("fan", 2).unwrap(), 1);
        assert_eq!(m.class_map.index("pump", 0).unwrap(), 2);
        assert_eq!(m.class_map.index("pump", 1).unwrap(), 3);
        assert!(matches!(m.class_map.index("valve", 0), Err(Error::UnknownClass { .. })));
        let again = Manifest::parse_str(&text, PathBuf::new()).unwrap();
        assert_eq!(m.class_map, again.class_map);
    }

    fn line_of(text: &str) -> u64 {
        match Manifest::parse_str(text, PathBuf::new()) {
            Err(Error::Manifest { line, .. }) => line,
            other => panic!("expected a manifest error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let ok = "a.wav,fan,0,train,normal\nb.wav,fan,1,train,normal\n";
        assert_eq!(line_of(&format!("{HEADER}{ok}c.wav,fan,0,train,anomaly\n")), 4);
        assert_eq!(line_of(&format!("{HEADER}{ok}a.wav,fan,0,test,normal\n")), 4);
        assert_eq!(line_of(&format!("{HEADER}{ok}c.wav,fan,0,test,broken\n")), 4);
        assert_eq!(line_of(&format!("{HEADER}{ok}c.wav,fan,x,test,normal\n")), 4);
        assert_eq!(line_of(&format!("{HEADER}{ok}c.wav,fan,0,dev,normal\n")), 4);
        assert_eq!(line_of("a,b,c\n"), 1);
        // blank lines still count
        assert_eq!(line_of(&format!("{HEADER}{ok}\nc.wav,fan,0,train,anomaly\n")), 5);
    }

    #[test]
    fn empty_manifest_reports_no_records() {
        for text in ["", HEADER] {
            let err = Manifest::parse_str(text, PathBuf::new()).unwrap_err();
            assert!(err.to_string().contains("no records"), "{err}");
        }
    }

    #[test]
    fn single_class_manifest_is_rejected() {
        let text = format!("{HEADER}a.wav,fan,0,train,normal\nb.wav,fan,0,test,anomaly\n");
        assert!(Manifest::parse_str(&text, PathBuf::new()).is_err());
    }

    fn counting_manifest(n: usize) -> Manifest {
        let mut text = HEADER.to_string();
        for i in 0..n {
            text.push_str(&format!("{i}.wav,fan,{},train,normal\n", i % 3));
        }
        text.push_str("x.wav,fan,0,test,anomaly\n");
        Manifest::parse_str(&text, PathBuf::new()).unwrap()
    }

    #[test]
    fn batches_cover_every_train_clip_once() {
        let m = counting_manifest(130);
        let batches = make_batches(&m, 64, 3).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.items.len()).collect();
        assert_eq!(sizes, vec![64, 64, 2]);
        let mut all: Vec<usize> = batches.iter().flat_map(|b| b.items.iter().map(|i| i.0)).collect();
        all.sort_unstable();
        assert_eq!(all, (0..130).collect::<Vec<_>>());
        for b in &batches {
            for &(i, c) in &b.items {
                assert_eq!(c, i % 3);
            }
        }
    }

    #[test]
    fn batch_order_follows_the_epoch_seed() {
        let m = counting_manifest(20);
        assert_eq!(make_batches(&m, 4, 1).unwrap(), make_batches(&m, 4, 1).unwrap());
        assert_ne!(make_batches(&m, 4, 1).unwrap(), make_batches(&m, 4, 2).unwrap());
        assert!(make_batches(&m, 1, 1).is_err());
    }

    #[test]
    fn corpus_layout_and_writer_round_trip() {
        let spec = CorpusSpec {
            machine_types: 2,
            ids_per_type: 2,
            train_per_machine: 3,
            test_normal_per_machine: 1,
            test_anomaly_per_machine: 2,
            duration_secs: 0.1,
            ..CorpusSpec::default()
        };
        let records = synth_corpus(&spec).unwrap();
        assert_eq!(records.len(), 4 * 6);
        assert_eq!(records, synth_corpus(&spec).unwrap());
        let m = Manifest::from_records(records.clone()).unwrap();
        assert_eq!(m.n_classes(), 4);

        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(dir.path(), &records).unwrap();
        let parsed = parse_manifest(&path).unwrap();
        assert_eq!(parsed.records.len(), records.len());
        assert_eq!(parsed.class_map, m.class_map);
        for (p, r) in parsed.records.iter().zip(&records) {
            assert_eq!((p.key(), p.split, p.condition), (r.key(), r.split, r.condition));
            let a = p.load(&parsed.base_dir).unwrap();
            let b = r.load(Path::new(".")).unwrap();
            assert_eq!(a.len(), b.len());
            // 16-bit quantization
            for (x, y) in a.samples().iter().zip(b.samples()) {
                assert!((x - y).abs() <= 1.0 / 32768.0 + 1e-12);
            }
        }
        let counts = census(&parsed);
        assert_eq!(counts[&(("fan".to_string(), 0), Split::Train, Condition::Normal)], 3);
    }
}

//! Deterministic synthetic corpus: class-labelled tone events with matching
//! frame-feature tracks, standing in for real video/audio pairs.
//!
//! Each example is a per-class carrier sine shaped by a sum of raised-cosine
//! amplitude events. The feature track encodes (class one-hot, envelope,
//! time phase), so the audio is predictable from the features.

use std::path::Path;

use ndarray::Array2;

use crate::conditioning::{frame_count, frame_timestamp, write_features};
use crate::error::{Error, Result};
use crate::nn::RngStream;
use crate::wav::{write_wav, SampleFormat, Waveform};

pub const CARRIER_LO_HZ: f64 = 220.0;
pub const CARRIER_HI_HZ: f64 = 3520.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DurationPolicy {
    Fixed(f64),
    Uniform(f64, f64),
}

impl DurationPolicy {
    fn draw(&self, rng: &mut RngStream) -> f64 {
        match *self {
            DurationPolicy::Fixed(d) => d,
            DurationPolicy::Uniform(lo, hi) => rng.uniform_range(lo, hi),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub durations: DurationPolicy,
    pub rate: u32,
    pub fps: u32,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Feature dim: class one-hot + envelope value + (sin, cos) time phase.
    pub fn feature_dim(&self) -> usize {
        self.num_classes + 3
    }
}

/// One amplitude event: a raised-cosine bump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub onset: f64,
    pub duration: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone)]
pub struct PairedExample {
    pub id: String,
    pub class: usize,
    pub duration: f64,
    pub seed: u64,
    pub timeline: Vec<Event>,
    pub features: Array2<f64>,
    pub waveform: Waveform,
}

/// Log-spaced carrier frequency for a class.
pub fn carrier_hz(class: usize, num_classes: usize) -> f64 {
    if num_classes <= 1 {
        return CARRIER_LO_HZ;
    }
    let frac = class as f64 / (num_classes - 1) as f64;
    CARRIER_LO_HZ * (CARRIER_HI_HZ / CARRIER_LO_HZ).powf(frac)
}

/// Envelope value at time t: sum of raised-cosine bumps, capped at 1.
pub fn envelope_at(timeline: &[Event], t: f64) -> f64 {
    let mut v = 0.0;
    for e in timeline {
        let u = (t - e.onset) / e.duration;
        if (0.0..=1.0).contains(&u) {
            v += e.amplitude * 0.5 * (1.0 - (2.0 * std::f64::consts::PI * u).cos());
        }
    }
    v.min(1.0)
}

/// Deterministically regenerate an example from its identity fields. The
/// per-example seed fixes the event timeline and the carrier phase.
pub fn generate_example(
    spec: &SyntheticSpec,
    id: &str,
    class: usize,
    duration: f64,
    example_seed: u64,
) -> Result<PairedExample> {
    if class >= spec.num_classes {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range for {} classes",
            spec.num_classes
        )));
    }
    let mut rng = RngStream::new(example_seed, "events");
    let num_events = 1 + rng.uniform_usize(4);
    let max_event = (duration / 2.0).min(4.0).max(0.8);
    let mut timeline = Vec::with_capacity(num_events);
    for _ in 0..num_events {
        let d = rng.uniform_range(0.8, max_event);
        let onset = rng.uniform_range(0.0, (duration - d).max(0.0));
        let amplitude = rng.uniform_range(0.4, 0.9);
        timeline.push(Event { onset, duration: d, amplitude });
    }
    let phase = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);

    let freq = carrier_hz(class, spec.num_classes);
    let num_samples = (duration * spec.rate as f64).round() as usize;
    let mut samples = Vec::with_capacity(num_samples);
    for i in 0..num_samples {
        let t = i as f64 / spec.rate as f64;
        let env = envelope_at(&timeline, t);
        samples.push(0.9 * env * (2.0 * std::f64::consts::PI * freq * t + phase).sin());
    }
    let waveform = Waveform::mono(samples, spec.rate)?;

    let n = frame_count(duration, spec.fps);
    let dim = spec.feature_dim();
    let mut features = Array2::<f64>::zeros((n, dim));
    for k in 0..n {
        let t = frame_timestamp(k, spec.fps);
        features[[k, class]] = 1.0;
        features[[k, spec.num_classes]] = envelope_at(&timeline, t);
        let ang = 2.0 * std::f64::consts::PI * t / 10.0;
        features[[k, spec.num_classes + 1]] = ang.sin();
        features[[k, spec.num_classes + 2]] = ang.cos();
    }

    Ok(PairedExample {
        id: id.to_string(),
        class,
        duration,
        seed: example_seed,
        timeline,
        features,
        waveform,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub class: usize,
    pub duration_seconds: f64,
    pub seed: u64,
    pub wav_path: String,
    pub feat_path: String,
}

impl ManifestEntry {
    pub fn class_of(&self) -> usize {
        self.class
    }
}

#[derive(Debug, Clone, Default)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::from("id,class,duration_seconds,seed,wav_path,feat_path\n");
        for e in &self.entries {
            // default f64 formatting round-trips exactly
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.id, e.class, e.duration_seconds, e.seed, e.wav_path, e.feat_path
            ));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 || line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 6 {
                return Err(Error::format(path, format!("line {}: expected 6 fields", lineno + 1)));
            }
            fn parse<T: std::str::FromStr>(
                path: &Path,
                lineno: usize,
                what: &str,
                v: &str,
            ) -> Result<T> {
                v.parse()
                    .map_err(|_| Error::format(path, format!("line {}: bad {what}", lineno + 1)))
            }
            entries.push(ManifestEntry {
                id: parts[0].to_string(),
                class: parse(path, lineno, "class", parts[1])?,
                duration_seconds: parse(path, lineno, "duration", parts[2])?,
                seed: parse(path, lineno, "seed", parts[3])?,
                wav_path: parts[4].to_string(),
                feat_path: parts[5].to_string(),
            });
        }
        Ok(CorpusManifest { entries })
    }
}

/// Generate `count` examples and write WAVs, feature files, and the manifest
/// into `out_dir`. Returns the manifest.
pub fn make_corpus(spec: &SyntheticSpec, count: usize, out_dir: &Path) -> Result<CorpusManifest> {
    if count == 0 {
        return Err(Error::InvalidArgument("corpus needs at least 1 example".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut corpus_rng = RngStream::new(spec.seed, "corpus");
    let mut manifest = CorpusManifest::default();
    for i in 0..count {
        let class = corpus_rng.uniform_usize(spec.num_classes);
        let duration = spec.durations.draw(&mut corpus_rng);
        let example_seed = corpus_rng.next_u64();
        let id = format!("ex{i:05}");
        let example = generate_example(spec, &id, class, duration, example_seed)?;

        let wav_name = format!("{id}.wav");
        let feat_name = format!("{id}.feat");
        write_wav(&out_dir.join(&wav_name), &example.waveform, SampleFormat::Float32)?;
        write_features(&out_dir.join(&feat_name), &example.features)?;
        manifest.entries.push(ManifestEntry {
            id,
            class,
            duration_seconds: duration,
            seed: example_seed,
            wav_path: wav_name,
            feat_path: feat_name,
        });
    }
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Read one example's files back from a corpus directory.
pub fn load_example(dir: &Path, entry: &ManifestEntry) -> Result<(Waveform, Array2<f64>)> {
    let wav = crate::wav::read_wav(&dir.join(&entry.wav_path))?;
    let feats = crate::conditioning::read_features(&dir.join(&entry.feat_path))?;
    Ok((wav, feats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec10() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 8,
            durations: DurationPolicy::Fixed(10.0),
            rate: 8000,
            fps: 8,
            seed: 77,
        }
    }

    #[test]
    fn corpus_regeneration_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let spec = spec10();
        let ma = make_corpus(&spec, 3, &a).unwrap();
        let mb = make_corpus(&spec, 3, &b).unwrap();
        assert_eq!(ma.entries, mb.entries);
        for e in &ma.entries {
            let fa = std::fs::read(a.join(&e.wav_path)).unwrap();
            let fb = std::fs::read(b.join(&e.wav_path)).unwrap();
            assert_eq!(fa, fb);
            let ga = std::fs::read(a.join(&e.feat_path)).unwrap();
            let gb = std::fs::read(b.join(&e.feat_path)).unwrap();
            assert_eq!(ga, gb);
        }
    }

    #[test]
    fn pretrain_split_durations_are_exactly_ten_seconds() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(&spec10(), 5, dir.path()).unwrap();
        for e in &m.entries {
            assert_eq!(e.duration_seconds, 10.0);
        }
        let (wav, feats) = load_example(dir.path(), &m.entries[0]).unwrap();
        assert_eq!(wav.num_samples(), 80_000);
        assert_eq!(feats.nrows(), 80);
        assert_eq!(feats.ncols(), 11);
    }

    #[test]
    fn uniform_durations_have_expected_mean() {
        // mean of U[10, 60] is 35; std of the mean over 1000 draws ~ 0.46
        let spec = SyntheticSpec {
            durations: DurationPolicy::Uniform(10.0, 60.0),
            ..spec10()
        };
        let mut rng = RngStream::new(spec.seed, "corpus");
        let mut sum = 0.0;
        let n = 1000;
        for _ in 0..n {
            let _class = rng.uniform_usize(spec.num_classes);
            sum += spec.durations.draw(&mut rng);
            let _seed = rng.next_u64();
        }
        let mean = sum / n as f64;
        assert!((33.0..=37.0).contains(&mean), "mean {mean}");
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            durations: DurationPolicy::Uniform(10.0, 60.0),
            ..spec10()
        };
        let m = make_corpus(&spec, 4, dir.path()).unwrap();
        let back = CorpusManifest::load(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(m.entries, back.entries);
    }

    #[test]
    fn regenerated_example_matches_manifest_identity() {
        let dir = tempfile::tempdir().unwrap();
        let spec = spec10();
        let m = make_corpus(&spec, 2, dir.path()).unwrap();
        let e = &m.entries[1];
        let regen =
            generate_example(&spec, &e.id, e.class, e.duration_seconds, e.seed).unwrap();
        let (wav, feats) = load_example(dir.path(), e).unwrap();
        // files hold f32; compare after the same cast
        for (a, b) in regen.waveform.samples.iter().zip(wav.samples.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        for (a, b) in regen.features.iter().zip(feats.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn audio_energy_tracks_feature_envelope() {
        // Pearson correlation between per-frame RMS and the envelope channel
        let spec = spec10();
        for i in 0..6 {
            let ex = generate_example(&spec, "t", i % 8, 10.0, 1000 + i as u64).unwrap();
            let frames = ex.features.nrows();
            let per_frame = ex.waveform.num_samples() / frames;
            let mut rms = Vec::with_capacity(frames);
            for k in 0..frames {
                let seg = ex
                    .waveform
                    .samples
                    .slice(ndarray::s![k * per_frame..(k + 1) * per_frame, 0]);
                rms.push((seg.iter().map(|v| v * v).sum::<f64>() / per_frame as f64).sqrt());
            }
            let env: Vec<f64> = (0..frames).map(|k| ex.features[[k, spec.num_classes]]).collect();
            let r = pearson(&rms, &env);
            assert!(r > 0.95, "example {i}: r = {r}");
        }
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            cov += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        cov / (va.sqrt() * vb.sqrt()).max(1e-12)
    }
}

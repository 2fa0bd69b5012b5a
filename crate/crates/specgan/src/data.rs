//! Deterministic synthetic (token, duration, spectrogram) corpus.
//!
//! Each vocabulary symbol owns a fixed formant template: 2-3 Gaussian bumps
//! over the frequency bins plus a cosine harmonic ripple. A sample draws a
//! token sequence and per-token durations, then renders each frame as the
//! token's log-domain template column with optional per-frame noise, clamped
//! to [-8, 4]. Everything derives from integer-hashed seeds, so a (seed,
//! index) pair reproduces bit-identical samples on any platform.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::generator::{DurationSequence, TokenSequence};
use crate::rng::{mix, Rng};
use crate::spectrogram::Spectrogram;

pub const CLAMP_LO: f64 = -8.0;
pub const CLAMP_HI: f64 = 4.0;

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub samples: usize,
    pub token_len_range: (usize, usize),
    pub duration_range: (usize, usize),
    pub mel_bins: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            vocab_size: 12,
            samples: 8,
            token_len_range: (2, 3),
            duration_range: (2, 8),
            mel_bins: 16,
            noise_std: 0.02,
            seed: 1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.samples == 0 || self.mel_bins == 0 {
            return Err(Error::Config("corpus sizes must be positive".into()));
        }
        let (tl, th) = self.token_len_range;
        let (dl, dh) = self.duration_range;
        if tl == 0 || tl > th || dl == 0 || dl > dh {
            return Err(Error::Config(format!(
                "invalid corpus ranges: tokens {:?}, durations {:?}",
                self.token_len_range, self.duration_range
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise std must be non-negative".into()));
        }
        Ok(())
    }
}

/// One training pair.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub tokens: TokenSequence,
    pub durations: DurationSequence,
    pub target: Spectrogram,
}

/// Linear-domain template (bumps + ripple) for a symbol.
fn template_linear(cfg: &CorpusConfig, symbol: usize) -> Vec<f64> {
    let n = cfg.mel_bins;
    let mut rng = Rng::substream(cfg.seed, mix(0x7e3a_11aa, symbol as u64));
    let bumps = rng.int_in(2, 3);
    let mut lin = vec![0.0; n];
    for _ in 0..bumps {
        let center = rng.f64_in(0.0, (n - 1) as f64);
        let sigma = rng.f64_in((n as f64 / 10.0).max(1.0), n as f64 / 4.0);
        let amp = rng.f64_in(0.3, 1.0);
        for (b, v) in lin.iter_mut().enumerate() {
            let d = (b as f64 - center) / sigma;
            *v += amp * (-0.5 * d * d).exp();
        }
    }
    let harmonic = rng.int_in(2, 4) as f64;
    let phase = rng.f64_in(0.0, std::f64::consts::TAU);
    let ripple_amp = rng.f64_in(0.1, 0.25);
    for (b, v) in lin.iter_mut().enumerate() {
        let angle = std::f64::consts::TAU * harmonic * b as f64 / n as f64 + phase;
        *v += ripple_amp * 0.5 * (1.0 + angle.cos());
    }
    lin
}

fn to_log(value: f64) -> f64 {
    value.max(1e-8).ln().clamp(CLAMP_LO, CLAMP_HI)
}

/// Noise-free log-domain column of a symbol; at zero noise every frame in
/// the symbol's span equals this exactly.
pub fn token_column(cfg: &CorpusConfig, symbol: usize) -> Vec<f64> {
    template_linear(cfg, symbol).into_iter().map(to_log).collect()
}

/// Renders sample `index` of the corpus.
pub fn render_sample(cfg: &CorpusConfig, index: usize) -> Result<SynthSample> {
    cfg.validate()?;
    if index >= cfg.samples {
        return Err(Error::IndexOutOfRange {
            index,
            len: cfg.samples,
        });
    }
    let mut rng = Rng::substream(cfg.seed, mix(0x5a3c_99ee, index as u64));
    let len = rng.int_in(cfg.token_len_range.0, cfg.token_len_range.1);
    let tokens: Vec<usize> = (0..len).map(|_| rng.int_in(0, cfg.vocab_size - 1)).collect();
    let durations: Vec<usize> = (0..len)
        .map(|_| rng.int_in(cfg.duration_range.0, cfg.duration_range.1))
        .collect();

    let templates: Vec<Vec<f64>> = tokens.iter().map(|&t| template_linear(cfg, t)).collect();
    let mut frames = Vec::with_capacity(durations.iter().sum());
    for (template, &dur) in templates.iter().zip(&durations) {
        for _ in 0..dur {
            let row: Vec<f64> = template
                .iter()
                .map(|&lin| to_log(lin + cfg.noise_std * rng.normal()))
                .collect();
            frames.push(row);
        }
    }
    Ok(SynthSample {
        tokens: TokenSequence(tokens),
        durations: DurationSequence(durations),
        target: Spectrogram::from_frames(&frames)?,
    })
}

/// Fully rendered corpus with deterministic shuffled batching.
#[derive(Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    samples: Vec<SynthSample>,
}

impl Corpus {
    pub fn build(config: CorpusConfig) -> Result<Self> {
        config.validate()?;
        let samples = (0..config.samples)
            .map(|i| render_sample(&config, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { config, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<&SynthSample> {
        self.samples.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: self.samples.len(),
        })
    }

    /// Shuffled index batches for one epoch. Every sample appears exactly
    /// once; a final partial batch is kept.
    pub fn batches(&self, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
        if batch_size == 0 || batch_size > self.samples.len() {
            return Err(Error::Config(format!(
                "batch size {batch_size} not in 1..={}",
                self.samples.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = Rng::substream(epoch_seed, 0xba7c_4e5d);
        for i in (1..order.len()).rev() {
            let j = rng.int_in(0, i);
            order.swap(i, j);
        }
        Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
    }

    /// Writes one text file per sample (`sample_<i>.txt`: a `T N L` header
    /// line then T rows of N floats) plus a manifest with the generating
    /// config.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, s) in self.samples.iter().enumerate() {
            let mut f = std::fs::File::create(dir.join(format!("sample_{i:05}.txt")))?;
            writeln!(
                f,
                "{} {} {}",
                s.target.frames(),
                s.target.bins(),
                s.tokens.len()
            )?;
            for t in 0..s.target.frames() {
                let row: Vec<String> = (0..s.target.bins())
                    .map(|b| format!("{:.17e}", s.target.at(t, b)))
                    .collect();
                writeln!(f, "{}", row.join(" "))?;
            }
        }
        let mut m = std::fs::File::create(dir.join("corpus_manifest.txt"))?;
        let c = &self.config;
        writeln!(m, "corpus.vocab_size = {}", c.vocab_size)?;
        writeln!(m, "corpus.samples = {}", c.samples)?;
        writeln!(m, "corpus.token_len_min = {}", c.token_len_range.0)?;
        writeln!(m, "corpus.token_len_max = {}", c.token_len_range.1)?;
        writeln!(m, "corpus.duration_min = {}", c.duration_range.0)?;
        writeln!(m, "corpus.duration_max = {}", c.duration_range.1)?;
        writeln!(m, "corpus.mel_bins = {}", c.mel_bins)?;
        writeln!(m, "corpus.noise_std = {}", c.noise_std)?;
        writeln!(m, "corpus.seed = {}", c.seed)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_index_reproduce_bitwise() {
        let cfg = CorpusConfig::default();
        let a = render_sample(&cfg, 3).unwrap();
        let b = render_sample(&cfg, 3).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.durations, b.durations);
        assert_eq!(a.target.tensor().data(), b.target.tensor().data());
    }

    #[test]
    fn zero_noise_frames_equal_token_columns() {
        let cfg = CorpusConfig {
            noise_std: 0.0,
            ..CorpusConfig::default()
        };
        let s = render_sample(&cfg, 0).unwrap();
        let mut frame = 0;
        for (tok, &dur) in s.tokens.0.iter().zip(&s.durations.0) {
            let column = token_column(&cfg, *tok);
            for _ in 0..dur {
                for b in 0..cfg.mel_bins {
                    assert_eq!(s.target.at(frame, b), column[b]);
                }
                frame += 1;
            }
        }
        assert_eq!(frame, s.target.frames());
    }

    #[test]
    fn frame_counts_sum_over_corpus() {
        let corpus = Corpus::build(CorpusConfig::default()).unwrap();
        let mut by_target = 0usize;
        let mut by_durations = 0usize;
        for i in 0..corpus.len() {
            let s = corpus.get(i).unwrap();
            by_target += s.target.frames();
            by_durations += s.durations.0.iter().sum::<usize>();
        }
        assert_eq!(by_target, by_durations);
    }

    #[test]
    fn all_values_finite_and_clamped() {
        let cfg = CorpusConfig {
            noise_std: 2.0,
            ..CorpusConfig::default()
        };
        for i in 0..cfg.samples {
            let s = render_sample(&cfg, i).unwrap();
            for v in s.target.tensor().data() {
                assert!(v.is_finite());
                assert!((CLAMP_LO..=CLAMP_HI).contains(v));
            }
        }
    }

    #[test]
    fn batches_are_deterministic_permutations() {
        let corpus = Corpus::build(CorpusConfig::default()).unwrap();
        let a = corpus.batches(4, 77).unwrap();
        let b = corpus.batches(4, 77).unwrap();
        assert_eq!(a, b);
        let c = corpus.batches(4, 78).unwrap();
        assert_ne!(a, c);

        let mut seen: Vec<usize> = a.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..corpus.len()).collect::<Vec<_>>());
    }

    #[test]
    fn duration_histogram_respects_bounds() {
        let cfg = CorpusConfig {
            samples: 64,
            ..CorpusConfig::default()
        };
        let corpus = Corpus::build(cfg.clone()).unwrap();
        let mut hist = std::collections::BTreeMap::new();
        for i in 0..corpus.len() {
            for &d in &corpus.get(i).unwrap().durations.0 {
                *hist.entry(d).or_insert(0usize) += 1;
            }
        }
        let min = *hist.keys().next().unwrap();
        let max = *hist.keys().last().unwrap();
        assert!(min >= cfg.duration_range.0);
        assert!(max <= cfg.duration_range.1);
        // with 64 samples every duration value should occur
        for d in cfg.duration_range.0..=cfg.duration_range.1 {
            assert!(hist.contains_key(&d), "duration {d} never drawn");
        }
    }

    #[test]
    fn out_of_range_index_rejected() {
        let cfg = CorpusConfig::default();
        assert!(matches!(
            render_sample(&cfg, cfg.samples),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn dump_writes_header_and_rows() {
        let dir = std::env::temp_dir().join(format!("specgan-dump-{}", std::process::id()));
        let corpus = Corpus::build(CorpusConfig::default()).unwrap();
        corpus.dump(&dir).unwrap();
        let s = corpus.get(0).unwrap();
        let text = std::fs::read_to_string(dir.join("sample_00000.txt")).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert_eq!(
            header,
            format!("{} {} {}", s.target.frames(), s.target.bins(), s.tokens.len())
        );
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), s.target.frames());
        let first: Vec<f64> = rows[0]
            .split_whitespace()
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(first.len(), s.target.bins());
        assert_eq!(first[0], s.target.at(0, 0));
        assert!(std::fs::read_to_string(dir.join("corpus_manifest.txt"))
            .unwrap()
            .contains("corpus.seed = 1"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn batch_size_larger_than_corpus_rejected() {
        let corpus = Corpus::build(CorpusConfig::default()).unwrap();
        assert!(corpus.batches(9, 0).is_err());
        assert!(corpus.batches(0, 0).is_err());
    }
}

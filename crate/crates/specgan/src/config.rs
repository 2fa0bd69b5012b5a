//! Run configuration: one `key = value` per line, `#` comments, every key
//! defaulted, unknown keys rejected. The same pair list is echoed into
//! checkpoints so a checkpoint is self-describing.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::CorpusConfig;
use crate::discriminator::{DiscriminatorConfig, Variant};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::optim::OptimizerConfig;
use crate::trainer::{DecayMode, TrainConfig};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub out_dir: String,
}

const KNOWN_KEYS: &[&str] = &[
    "corpus.vocab_size",
    "corpus.samples",
    "corpus.token_len_min",
    "corpus.token_len_max",
    "corpus.duration_min",
    "corpus.duration_max",
    "corpus.mel_bins",
    "corpus.noise_std",
    "corpus.seed",
    "gen.embed_dim",
    "gen.width",
    "gen.kernel",
    "disc.variant",
    "disc.channels",
    "disc.enc_kernel",
    "disc.head_kernel",
    "disc.enc_strides",
    "disc.leaky_alpha",
    "train.lambda_a",
    "train.lambda_f",
    "train.lambda_dur",
    "train.batch_size",
    "train.total_iters",
    "train.lr_start",
    "train.lr_floor",
    "train.decay_start_iter",
    "train.decay_mode",
    "train.seed",
    "train.checkpoint_every",
    "out.dir",
];

/// Parses config-file text into raw pairs.
pub fn parse_kv_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw_line) in text.lines().enumerate() {
        let line = match raw_line.split_once('#') {
            Some((before, _)) => before.trim(),
            None => raw_line.trim(),
        };
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got `{raw_line}`",
                lineno + 1
            ))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn parse_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_kv_text(&text)
}

fn get_parsed<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`"))),
    }
}

fn get_list(map: &BTreeMap<String, String>, key: &str, default: Vec<usize>) -> Result<Vec<usize>> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .split_whitespace()
            .map(|tok| {
                tok.parse()
                    .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{tok}`")))
            })
            .collect(),
    }
}

impl RunConfig {
    /// Desk-scale defaults: M-TF discriminator, 8-sample corpus at 16 bins,
    /// 2000 iterations of batch 4.
    pub fn default_desk() -> Self {
        let corpus = CorpusConfig::default();
        let generator = GeneratorConfig::new(corpus.vocab_size, corpus.mel_bins);
        let discriminator = DiscriminatorConfig::new(Variant::MTF, corpus.mel_bins);
        let train = TrainConfig::for_variant(Variant::MTF);
        RunConfig {
            corpus,
            generator,
            discriminator,
            train,
            out_dir: "runs/desk".to_string(),
        }
    }

    /// Builds a config from raw pairs over the desk defaults. Unknown keys
    /// are errors; lambda_a / lambda_f fall back to variant-dependent
    /// defaults when not given explicitly.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        for key in map.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
        }
        let mut cfg = RunConfig::default_desk();

        let c = &mut cfg.corpus;
        c.vocab_size = get_parsed(map, "corpus.vocab_size", c.vocab_size)?;
        c.samples = get_parsed(map, "corpus.samples", c.samples)?;
        c.token_len_range = (
            get_parsed(map, "corpus.token_len_min", c.token_len_range.0)?,
            get_parsed(map, "corpus.token_len_max", c.token_len_range.1)?,
        );
        c.duration_range = (
            get_parsed(map, "corpus.duration_min", c.duration_range.0)?,
            get_parsed(map, "corpus.duration_max", c.duration_range.1)?,
        );
        c.mel_bins = get_parsed(map, "corpus.mel_bins", c.mel_bins)?;
        c.noise_std = get_parsed(map, "corpus.noise_std", c.noise_std)?;
        c.seed = get_parsed(map, "corpus.seed", c.seed)?;

        let g = &mut cfg.generator;
        g.vocab_size = cfg.corpus.vocab_size;
        g.mel_bins = cfg.corpus.mel_bins;
        g.embed_dim = get_parsed(map, "gen.embed_dim", g.embed_dim)?;
        g.width = get_parsed(map, "gen.width", g.width)?;
        g.kernel = get_parsed(map, "gen.kernel", g.kernel)?;

        let variant = match map.get("disc.variant") {
            Some(v) => Variant::parse(v)?,
            None => Variant::MTF,
        };
        let d = &mut cfg.discriminator;
        d.variant = variant;
        d.mel_bins = cfg.corpus.mel_bins;
        d.channels = get_list(map, "disc.channels", d.channels.clone())?;
        d.enc_kernel = get_parsed(map, "disc.enc_kernel", d.enc_kernel)?;
        d.head_kernel = get_parsed(map, "disc.head_kernel", d.head_kernel)?;
        d.enc_strides = get_list(map, "disc.enc_strides", d.enc_strides.clone())?;
        d.leaky_alpha = get_parsed(map, "disc.leaky_alpha", d.leaky_alpha)?;

        let defaults = TrainConfig::for_variant(variant);
        let t = &mut cfg.train;
        *t = defaults;
        t.lambda_a = get_parsed(map, "train.lambda_a", t.lambda_a)?;
        t.lambda_f = get_parsed(map, "train.lambda_f", t.lambda_f)?;
        t.lambda_dur = get_parsed(map, "train.lambda_dur", t.lambda_dur)?;
        t.batch_size = get_parsed(map, "train.batch_size", t.batch_size)?;
        t.total_iters = get_parsed(map, "train.total_iters", t.total_iters)?;
        t.lr_start = get_parsed(map, "train.lr_start", t.lr_start)?;
        t.lr_floor = get_parsed(map, "train.lr_floor", t.lr_floor)?;
        t.decay_start_iter = get_parsed(map, "train.decay_start_iter", t.decay_start_iter)?;
        t.decay_mode = match map.get("train.decay_mode").map(|s| s.as_str()) {
            None => t.decay_mode,
            Some("after-start") => DecayMode::AfterStart,
            Some("complete-at-start") => DecayMode::CompleteAtStart,
            Some(other) => {
                return Err(Error::Config(format!(
                    "train.decay_mode must be after-start or complete-at-start, got `{other}`"
                )))
            }
        };
        t.seed = get_parsed(map, "train.seed", t.seed)?;
        t.checkpoint_every = get_parsed(map, "train.checkpoint_every", t.checkpoint_every)?;

        if let Some(dir) = map.get("out.dir") {
            cfg.out_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.train.validate()?;
        if self.generator.vocab_size != self.corpus.vocab_size
            || self.generator.mel_bins != self.corpus.mel_bins
            || self.discriminator.mel_bins != self.corpus.mel_bins
        {
            return Err(Error::Config(
                "generator/discriminator dimensions must match the corpus".into(),
            ));
        }
        Ok(())
    }

    /// Serializes back to pairs (resolved values, suitable for checkpoints).
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let c = &self.corpus;
        let g = &self.generator;
        let d = &self.discriminator;
        let t = &self.train;
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        vec![
            ("corpus.vocab_size".into(), c.vocab_size.to_string()),
            ("corpus.samples".into(), c.samples.to_string()),
            ("corpus.token_len_min".into(), c.token_len_range.0.to_string()),
            ("corpus.token_len_max".into(), c.token_len_range.1.to_string()),
            ("corpus.duration_min".into(), c.duration_range.0.to_string()),
            ("corpus.duration_max".into(), c.duration_range.1.to_string()),
            ("corpus.mel_bins".into(), c.mel_bins.to_string()),
            ("corpus.noise_std".into(), format!("{:e}", c.noise_std)),
            ("corpus.seed".into(), c.seed.to_string()),
            ("gen.embed_dim".into(), g.embed_dim.to_string()),
            ("gen.width".into(), g.width.to_string()),
            ("gen.kernel".into(), g.kernel.to_string()),
            ("disc.variant".into(), d.variant.as_str().to_string()),
            ("disc.channels".into(), join(&d.channels)),
            ("disc.enc_kernel".into(), d.enc_kernel.to_string()),
            ("disc.head_kernel".into(), d.head_kernel.to_string()),
            ("disc.enc_strides".into(), join(&d.enc_strides)),
            ("disc.leaky_alpha".into(), format!("{:e}", d.leaky_alpha)),
            ("train.lambda_a".into(), format!("{:e}", t.lambda_a)),
            ("train.lambda_f".into(), format!("{:e}", t.lambda_f)),
            ("train.lambda_dur".into(), format!("{:e}", t.lambda_dur)),
            ("train.batch_size".into(), t.batch_size.to_string()),
            ("train.total_iters".into(), t.total_iters.to_string()),
            ("train.lr_start".into(), format!("{:e}", t.lr_start)),
            ("train.lr_floor".into(), format!("{:e}", t.lr_floor)),
            ("train.decay_start_iter".into(), t.decay_start_iter.to_string()),
            (
                "train.decay_mode".into(),
                match t.decay_mode {
                    DecayMode::AfterStart => "after-start".to_string(),
                    DecayMode::CompleteAtStart => "complete-at-start".to_string(),
                },
            ),
            ("train.seed".into(), t.seed.to_string()),
            ("train.checkpoint_every".into(), t.checkpoint_every.to_string()),
            ("out.dir".into(), self.out_dir.clone()),
        ]
    }

    /// Optimizer constants are fixed by the training recipe.
    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_pairs() {
        let cfg = RunConfig::default_desk();
        let pairs: BTreeMap<String, String> = cfg.to_pairs().into_iter().collect();
        let back = RunConfig::from_kv(&pairs).unwrap();
        assert_eq!(back.to_pairs(), cfg.to_pairs());
    }

    #[test]
    fn defaults_pin_the_training_constants() {
        let cfg = RunConfig::default_desk();
        assert_eq!(cfg.train.lambda_dur, 0.02);
        assert_eq!(cfg.train.lr_start, 1e-3);
        assert_eq!(cfg.train.lr_floor, 1e-5);
        assert_eq!(cfg.train.decay_start_iter, 20_000);
        assert_eq!(cfg.train.optimizer.beta1, 0.9);
        assert_eq!(cfg.train.optimizer.beta2, 0.999);
        assert_eq!(cfg.train.optimizer.eps, 1e-8);
        assert_eq!(cfg.train.optimizer.lookahead_k, 5);
        assert_eq!(cfg.train.optimizer.lookahead_alpha, 0.5);
        assert_eq!(cfg.corpus.vocab_size, 12);
        assert_eq!(cfg.corpus.duration_range, (2, 8));
        assert_eq!(cfg.discriminator.channels, vec![32, 64, 128, 256]);
        assert_eq!(cfg.discriminator.leaky_alpha, 0.2);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let mut map = BTreeMap::new();
        map.insert("train.lambda_q".to_string(), "1".to_string());
        assert!(matches!(RunConfig::from_kv(&map), Err(Error::Config(_))));
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let text = "# a comment\n\ncorpus.samples = 4  # trailing\n";
        let map = parse_kv_text(text).unwrap();
        assert_eq!(map.get("corpus.samples").unwrap(), "4");
    }

    #[test]
    fn st_variant_defaults_lambdas_to_1_and_10() {
        let mut map = BTreeMap::new();
        map.insert("disc.variant".to_string(), "s-t".to_string());
        let cfg = RunConfig::from_kv(&map).unwrap();
        assert_eq!(cfg.train.lambda_a, 1.0);
        assert_eq!(cfg.train.lambda_f, 10.0);
        // U-Net variants keep 0.2 / 2
        let cfg = RunConfig::from_kv(&BTreeMap::new()).unwrap();
        assert_eq!(cfg.train.lambda_a, 0.2);
        assert_eq!(cfg.train.lambda_f, 2.0);
    }

    #[test]
    fn explicit_lambda_wins_over_variant_default() {
        let mut map = BTreeMap::new();
        map.insert("disc.variant".to_string(), "s-t".to_string());
        map.insert("train.lambda_a".to_string(), "0.5".to_string());
        let cfg = RunConfig::from_kv(&map).unwrap();
        assert_eq!(cfg.train.lambda_a, 0.5);
        assert_eq!(cfg.train.lambda_f, 10.0);
    }

    #[test]
    fn malformed_line_is_an_error() {
        assert!(parse_kv_text("not a pair\n").is_err());
    }
}

//! Training configuration in a plain `key = value` text format.
//!
//! ```text
//! # desk-scale run
//! preset = desk
//! epochs = 6
//! lr_decay_epochs = 2, 5
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors. `preset` (`desk` or `full`) may only appear before other keys.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::{InfoNceMode, LossTerms};
use crate::transformer::DecoderConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub d_model: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub gnn_input_dim: usize,
    /// Width of the last backbone layer; the second-last gets the rest.
    pub c_last: usize,
    pub kernel_size: usize,
    pub mlp_mult: usize,
    pub layer_loss_p: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub backbone_lr_factor: f64,
    /// 1-indexed epochs after which the learning rate decays.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub sinkhorn_temperature: f64,
    pub sinkhorn_iters: usize,
    pub infonce_mode: InfoNceMode,
    pub loss_terms: LossTerms,
    pub seed: u64,
    pub backbone_grid: usize,
    pub backbone_sigma: f64,
    pub backbone_noise: f64,
    pub train_pairs: Option<PathBuf>,
    pub val_pairs: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Full-size model: 1024 input features, d_model 648, 12 heads, 4 layers.
    pub fn full() -> Self {
        Self {
            d_model: 648,
            heads: 12,
            decoder_layers: 4,
            gnn_input_dim: 1024,
            c_last: 512,
            batch_size: 8,
            ..Self::desk()
        }
    }

    /// Small enough to train on a laptop CPU in minutes.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            decoder_layers: 2,
            gnn_input_dim: 32,
            c_last: 16,
            kernel_size: 5,
            mlp_mult: 4,
            layer_loss_p: 0.3,
            // 2000 pairs at batch 8 leave only 500 steps before the first decay.
            batch_size: 1,
            epochs: 6,
            base_lr: 5e-4,
            backbone_lr_factor: 0.03,
            lr_decay_epochs: vec![2, 5],
            lr_decay_factor: 0.1,
            sinkhorn_temperature: 0.1,
            sinkhorn_iters: 20,
            infonce_mode: InfoNceMode::Conventional,
            loss_terms: LossTerms::default(),
            seed: 0,
            backbone_grid: 32,
            backbone_sigma: 0.03,
            backbone_noise: 0.05,
            train_pairs: None,
            val_pairs: None,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            d_model: self.d_model,
            heads: self.heads,
            layers: self.decoder_layers,
            mlp_mult: self.mlp_mult,
        }
    }

    pub fn c_second(&self) -> usize {
        self.gnn_input_dim - self.c_last
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("decoder_layers", self.decoder_layers),
            ("gnn_input_dim", self.gnn_input_dim),
            ("kernel_size", self.kernel_size),
            ("mlp_mult", self.mlp_mult),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("sinkhorn_iters", self.sinkhorn_iters),
            ("backbone_grid", self.backbone_grid),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{k} must be positive")));
            }
        }
        if self.kernel_size < 2 {
            return Err(Error::config("kernel_size must be at least 2"));
        }
        if self.c_last > self.gnn_input_dim {
            return Err(Error::config("c_last exceeds gnn_input_dim"));
        }
        self.decoder().validate()?;
        let nonneg = [
            ("layer_loss_p", self.layer_loss_p),
            ("base_lr", self.base_lr),
            ("backbone_lr_factor", self.backbone_lr_factor),
            ("lr_decay_factor", self.lr_decay_factor),
            ("backbone_noise", self.backbone_noise),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{k} must be finite and non-negative")));
            }
        }
        if !(self.sinkhorn_temperature > 0.0) || !(self.backbone_sigma > 0.0) {
            return Err(Error::config("sinkhorn_temperature and backbone_sigma must be positive"));
        }
        if self.lr_decay_epochs.iter().any(|&e| e == 0) {
            return Err(Error::config("lr_decay_epochs are 1-indexed"));
        }
        Ok(())
    }

    /// Learning rate for 1-indexed `epoch`: one decay per listed epoch already completed.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e < epoch).count();
        self.base_lr * self.lr_decay_factor.powi(decays as i32)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        let mut seen: Vec<String> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line, message };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(err(format!("key {key:?} given twice")));
            }
            if key == "preset" {
                if !seen.is_empty() {
                    return Err(err("preset must come before other keys".into()));
                }
                cfg = match value {
                    "desk" => Self::desk(),
                    "full" => Self::full(),
                    other => return Err(err(format!("unknown preset {other:?}"))),
                };
            } else {
                cfg.set(key, value).map_err(|e| match e {
                    Error::Config(m) => err(m),
                    other => other,
                })?;
            }
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a file; relative data paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.train_pairs, &mut cfg.val_pairs].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "on" => Ok(true),
                "false" | "0" | "off" => Ok(false),
                _ => Err(Error::config(format!("{key}: expected true or false, got {v:?}"))),
            }
        }
        match key {
            "d_model" => self.d_model = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "decoder_layers" => self.decoder_layers = num(key, value)?,
            "gnn_input_dim" => self.gnn_input_dim = num(key, value)?,
            "c_last" => self.c_last = num(key, value)?,
            "kernel_size" => self.kernel_size = num(key, value)?,
            "mlp_mult" => self.mlp_mult = num(key, value)?,
            "layer_loss_p" => self.layer_loss_p = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "backbone_lr_factor" => self.backbone_lr_factor = num(key, value)?,
            "lr_decay_epochs" => {
                self.lr_decay_epochs = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "lr_decay_factor" => self.lr_decay_factor = num(key, value)?,
            "sinkhorn_temperature" => self.sinkhorn_temperature = num(key, value)?,
            "sinkhorn_iters" => self.sinkhorn_iters = num(key, value)?,
            "infonce_mode" => self.infonce_mode = value.parse()?,
            "loss_infonce" => self.loss_terms.infonce = flag(key, value)?,
            "loss_hs_final" => self.loss_terms.hyperspherical_final = flag(key, value)?,
            "loss_hs_layers" => self.loss_terms.hyperspherical_layers = flag(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "backbone_grid" => self.backbone_grid = num(key, value)?,
            "backbone_sigma" => self.backbone_sigma = num(key, value)?,
            "backbone_noise" => self.backbone_noise = num(key, value)?,
            "train_pairs" => self.train_pairs = Some(PathBuf::from(value)),
            "val_pairs" => self.val_pairs = Some(PathBuf::from(value)),
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key, in a form [`TrainConfig::parse`] reads back unchanged.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let decays: Vec<String> = self.lr_decay_epochs.iter().map(|e| e.to_string()).collect();
        let t = self.loss_terms;
        let _ = write!(
            s,
            "d_model = {}\nheads = {}\ndecoder_layers = {}\ngnn_input_dim = {}\nc_last = {}\n\
             kernel_size = {}\nmlp_mult = {}\nlayer_loss_p = {:?}\nbatch_size = {}\nepochs = {}\n\
             base_lr = {:?}\nbackbone_lr_factor = {:?}\nlr_decay_epochs = {}\nlr_decay_factor = {:?}\n\
             sinkhorn_temperature = {:?}\nsinkhorn_iters = {}\ninfonce_mode = {}\n\
             loss_infonce = {}\nloss_hs_final = {}\nloss_hs_layers = {}\nseed = {}\n\
             backbone_grid = {}\nbackbone_sigma = {:?}\nbackbone_noise = {:?}\n",
            self.d_model,
            self.heads,
            self.decoder_layers,
            self.gnn_input_dim,
            self.c_last,
            self.kernel_size,
            self.mlp_mult,
            self.layer_loss_p,
            self.batch_size,
            self.epochs,
            self.base_lr,
            self.backbone_lr_factor,
            decays.join(", "),
            self.lr_decay_factor,
            self.sinkhorn_temperature,
            self.sinkhorn_iters,
            self.infonce_mode,
            t.infonce,
            t.hyperspherical_final,
            t.hyperspherical_layers,
            self.seed,
            self.backbone_grid,
            self.backbone_sigma,
            self.backbone_noise,
        );
        for (k, v) in [("train_pairs", &self.train_pairs), ("val_pairs", &self.val_pairs)] {
            if let Some(p) = v {
                let _ = writeln!(s, "{k} = {}", p.display());
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_trace() {
        let cfg = TrainConfig::desk();
        let trace: Vec<f64> = (1..=6).map(|e| cfg.lr_for_epoch(e)).collect();
        let want = [5e-4, 5e-4, 5e-5, 5e-5, 5e-5, 5e-6];
        for (a, b) in trace.iter().zip(want) {
            assert!((a - b).abs() < 1e-18, "{trace:?}");
        }
    }

    #[test]
    fn parses_comments_and_lists() {
        let cfg = TrainConfig::parse(
            "# header\n\npreset = desk\nepochs = 3  # short run\nlr_decay_epochs = 1,2\ninfonce_mode = negatives-only\nloss_hs_layers = false\n",
        )
        .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lr_decay_epochs, vec![1, 2]);
        assert_eq!(cfg.infonce_mode, InfoNceMode::NegativesOnly);
        assert!(!cfg.loss_terms.hyperspherical_layers);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        let line_of = |text: &str| match TrainConfig::parse(text) {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(line_of("epochs = 2\nlearning_rate = 1\n"), 2);
        assert_eq!(line_of("epochs = 2\nepochs = 3\n"), 2);
        assert_eq!(line_of("# c\nepochs\n"), 2);
        assert_eq!(line_of("epochs = two\n"), 1);
        assert_eq!(line_of("epochs = 2\npreset = full\n"), 2);
        assert!(matches!(TrainConfig::parse("heads = 5\n"), Err(Error::Config(_))));
    }

    #[test]
    fn presets() {
        let p = TrainConfig::parse("preset = full\n").unwrap();
        assert_eq!((p.d_model, p.heads, p.decoder_layers, p.gnn_input_dim), (648, 12, 4, 1024));
        assert_eq!(p.decoder().head_dim(), 54);
        let d = TrainConfig::desk();
        assert_eq!((d.d_model, d.heads, d.decoder_layers, d.gnn_input_dim), (64, 4, 2, 32));
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::full();
        cfg.base_lr = 1.234e-4;
        cfg.backbone_noise = 0.1 + 0.2;
        cfg.val_pairs = Some("v.jsonl".into());
        cfg.loss_terms.infonce = false;
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}

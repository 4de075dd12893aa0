//! Flat `key = value` run configuration: defaults, then a config file, then
//! `CDCML_*` environment variables, then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use cdcml_core::dataset::{PairPolicy, SplitRatios};
use cdcml_core::eval::AblationFlags;
use cdcml_core::losses::{LossConfig, LossTerm};
use cdcml_core::nn::{ArchConfig, OptimizerState};
use cdcml_core::trainer::{TrainConfig, TrainMode};
use cdcml_core::va::SigmaProvenance;
use cdcml_core::Error;

pub const ENV_PREFIX: &str = "CDCML_";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Count,
    Real,
    Seed,
    Flag,
    Widths,
    Terms,
    Mode,
    Sigma,
    Seeds,
    Rows,
    Text,
}

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub kind: Kind,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, kind: Kind, help: &'static str) -> Key {
    Key { name, default, kind, help }
}

pub const KEYS: &[Key] = &[
    key("corpus", "corpus.txt", Kind::Text, "corpus manifest, relative to the root"),
    key("data_dir", "data", Kind::Text, "directory with split.txt and pair files"),
    key("out_dir", "out", Kind::Text, "output directory"),
    key("normalize_ratings", "false", Kind::Flag, "min-max normalize raw VA ratings on load"),
    key("workers", "0", Kind::Count, "worker threads, 0 for all cores"),
    key("batch_size", "128", Kind::Count, "pairs per minibatch"),
    key("epochs", "30", Kind::Count, "training epochs"),
    key("lr", "0.001", Kind::Real, "initial SGD learning rate"),
    key("lr_decay", "0.1", Kind::Real, "learning-rate decay factor"),
    key("lr_decay_every", "10", Kind::Count, "epochs between decays"),
    key("seed", "0", Kind::Seed, "training and initialization seed"),
    key("mode", "full", Kind::Mode, "full or similarity_only"),
    key("checkpoint_every", "0", Kind::Count, "also checkpoint every k epochs, 0 to disable"),
    key("terms", "cfr,cfm,sim,sfr_i,sfr_m,iva,mva", Kind::Terms, "enabled loss terms"),
    key("alpha", "1", Kind::Real, "feature-margin threshold"),
    key("epsilon", "1e-8", Kind::Real, "distance guard inside ratios and logarithms"),
    key("normalize_batch", "false", Kind::Flag, "divide summed loss terms by their anchor count"),
    key("weight_cfr", "1", Kind::Real, "weight of the cross-modal ratio term"),
    key("weight_cfm", "1", Kind::Real, "weight of the margin term"),
    key("weight_sim", "1", Kind::Real, "weight of the similarity regression term"),
    key("weight_sfr_i", "1", Kind::Real, "weight of the image ratio term"),
    key("weight_sfr_m", "1", Kind::Real, "weight of the music ratio term"),
    key("weight_iva", "1", Kind::Real, "weight of the image VA term"),
    key("weight_mva", "1", Kind::Real, "weight of the music VA term"),
    key("embed_dim", "512", Kind::Count, "shared embedding width"),
    key("branch_hidden", "512,512", Kind::Widths, "hidden widths of each branch"),
    key("sim_hidden", "512,128", Kind::Widths, "hidden widths of the similarity predictor"),
    key("va_hidden", "256,64", Kind::Widths, "hidden widths of the VA predictor"),
    key("dropout", "0.5", Kind::Real, "dropout rate in both predictors"),
    key("per_modality_va", "false", Kind::Flag, "separate VA predictor per modality"),
    key("images_per_clip", "50", Kind::Count, "candidate images per clip"),
    key("n_random", "30", Kind::Count, "random images per clip"),
    key("n_top", "10", Kind::Count, "most similar images per clip"),
    key("n_bottom", "10", Kind::Count, "least similar images per clip"),
    key("sample_rate", "0.1", Kind::Real, "fraction of generated pairs kept"),
    key("pair_seed", "0", Kind::Seed, "pair sampling seed"),
    key("split_train", "0.8", Kind::Real, "training fraction"),
    key("split_val", "0.05", Kind::Real, "validation fraction"),
    key("split_test", "0.15", Kind::Real, "test fraction"),
    key("split_seed", "0", Kind::Seed, "split shuffle seed"),
    key("sigma_mode", "exact", Kind::Sigma, "exact or sampled:<seed>:<count>"),
    key("synth_images", "200", Kind::Count, "synthetic image count"),
    key("synth_music", "100", Kind::Count, "synthetic clip count"),
    key("synth_image_dim", "16", Kind::Count, "synthetic image feature width"),
    key("synth_music_dim", "16", Kind::Count, "synthetic music feature width"),
    key("synth_noise", "0.05", Kind::Real, "synthetic feature noise std"),
    key("synth_seed", "0", Kind::Seed, "synthetic corpus seed"),
    key("ablation_rows", "sim;sim+cfr;sim+cfr+cfm;sim+va;sim+va+cfr+cfm+sfr", Kind::Rows, "ablation rows"),
    key("ablation_seeds", "0,1,2,3,4", Kind::Seeds, "ablation seeds"),
];

pub fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

fn check_value(k: &Key, raw: &str) -> std::result::Result<(), String> {
    let list = |raw: &str| -> Vec<String> { raw.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect() };
    let ok = match k.kind {
        Kind::Count => raw.parse::<usize>().is_ok(),
        Kind::Real => raw.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Seed => raw.parse::<u64>().is_ok(),
        Kind::Flag => raw.parse::<bool>().is_ok(),
        Kind::Widths => list(raw).iter().all(|w| w.parse::<usize>().is_ok_and(|w| w > 0)),
        Kind::Terms => list(raw).iter().all(|t| t.parse::<LossTerm>().is_ok()),
        Kind::Mode => raw.parse::<TrainMode>().is_ok(),
        Kind::Sigma => raw.parse::<SigmaProvenance>().is_ok(),
        Kind::Seeds => !list(raw).is_empty() && list(raw).iter().all(|s| s.parse::<u64>().is_ok()),
        Kind::Rows => raw.split(';').all(|r| r.trim().parse::<AblationFlags>().is_ok()),
        Kind::Text => !raw.is_empty(),
    };
    if ok {
        Ok(())
    } else {
        Err(format!("invalid value `{raw}` for `{}` ({})", k.name, k.help))
    }
}

/// Fully resolved configuration; every key has a validated value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
    root: PathBuf,
}

impl RunConfig {
    pub fn defaults(root: &Path) -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
            root: root.to_path_buf(),
        }
    }

    pub fn set(&mut self, name: &str, raw: &str) -> std::result::Result<(), Error> {
        let k = lookup(name).ok_or_else(|| Error::Config(format!("unknown key `{name}`")))?;
        let raw = raw.trim();
        check_value(k, raw).map_err(Error::Config)?;
        self.values.insert(k.name, raw.to_string());
        Ok(())
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io {
                context: format!("reading config {}", path.display()),
                source: e,
            })?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected `key = value`", path.display(), n + 1))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        }
        Ok(())
    }

    /// Applies `CDCML_<KEY>` variables; unknown `CDCML_` names are rejected.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (k, v) in vars {
            let name = k[ENV_PREFIX.len()..].to_ascii_lowercase();
            self.set(&name, &v).map_err(|e| Error::Config(format!("environment {k}: {e}")))?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> &str {
        self.values.get(name).unwrap_or_else(|| panic!("unregistered key {name}"))
    }

    fn parsed<T: std::str::FromStr>(&self, name: &str) -> T {
        self.get(name)
            .parse()
            .unwrap_or_else(|_| panic!("`{name}` was validated on set"))
    }

    pub fn count(&self, name: &str) -> usize {
        self.parsed(name)
    }

    pub fn real(&self, name: &str) -> f64 {
        self.parsed(name)
    }

    pub fn seed(&self, name: &str) -> u64 {
        self.parsed(name)
    }

    pub fn flag(&self, name: &str) -> bool {
        self.parsed(name)
    }

    fn list(&self, name: &str) -> Vec<String> {
        self.get(name)
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(self.get(name))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn arch(&self) -> ArchConfig {
        let widths = |k: &str| self.list(k).iter().map(|w| w.parse().expect("validated")).collect();
        ArchConfig {
            embed_dim: self.count("embed_dim"),
            branch_hidden: widths("branch_hidden"),
            sim_hidden: widths("sim_hidden"),
            va_hidden: widths("va_hidden"),
            dropout: self.real("dropout"),
            per_modality_va: self.flag("per_modality_va"),
        }
    }

    pub fn loss(&self) -> LossConfig {
        let terms: Vec<LossTerm> = self.list("terms").iter().map(|t| t.parse().expect("validated")).collect();
        let mut cfg = LossConfig::with_terms(&terms);
        cfg.alpha = self.real("alpha");
        cfg.epsilon = self.real("epsilon");
        cfg.normalize_batch = self.flag("normalize_batch");
        for t in LossTerm::ALL {
            cfg.weights[t.index()] = self.real(&format!("weight_{t}"));
        }
        cfg
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            batch_size: self.count("batch_size"),
            epochs: self.count("epochs"),
            optimizer: OptimizerState {
                base_lr: self.real("lr"),
                decay_factor: self.real("lr_decay"),
                decay_every: self.count("lr_decay_every"),
                epoch: 0,
            },
            loss: self.loss(),
            arch: self.arch(),
            seed: self.seed("seed"),
            mode: self.parsed("mode"),
            freeze_branches: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn policy(&self) -> Result<PairPolicy> {
        let p = PairPolicy {
            images_per_clip: self.count("images_per_clip"),
            n_random: self.count("n_random"),
            n_top: self.count("n_top"),
            n_bottom: self.count("n_bottom"),
            sample_rate: self.real("sample_rate"),
            seed: self.seed("pair_seed"),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn ratios(&self) -> Result<SplitRatios> {
        Ok(SplitRatios::new(
            self.real("split_train"),
            self.real("split_val"),
            self.real("split_test"),
        )?)
    }

    pub fn sigma_mode(&self) -> SigmaProvenance {
        self.parsed("sigma_mode")
    }

    pub fn ablation_rows(&self) -> Vec<AblationFlags> {
        self.get("ablation_rows")
            .split(';')
            .map(|r| r.trim().parse().expect("validated"))
            .collect()
    }

    pub fn ablation_seeds(&self) -> Vec<u64> {
        self.list("ablation_seeds").iter().map(|s| s.parse().expect("validated")).collect()
    }

    /// Every key in table order, one `key = value` line each.
    pub fn render(&self) -> String {
        KEYS.iter().map(|k| format!("{} = {}\n", k.name, self.get(k.name))).collect()
    }

    /// Writes the resolved configuration as `config.txt` in `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("config.txt");
        std::fs::write(&path, self.render()).map_err(|e| Error::Io {
            context: format!("writing {}", path.display()),
            source: e,
        })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_map_onto_core_defaults() {
        let c = RunConfig::defaults(Path::new("."));
        for k in KEYS {
            check_value(k, k.default).unwrap();
        }
        let t = c.train().unwrap();
        assert_eq!((t.batch_size, t.optimizer.base_lr, t.optimizer.decay_factor, t.optimizer.decay_every), (128, 1e-3, 0.1, 10));
        assert_eq!(t.arch.dropout, 0.5);
        assert_eq!(c.policy().unwrap(), PairPolicy::default());
        assert_eq!(c.ablation_rows(), AblationFlags::STANDARD);
        assert_eq!(c.loss(), LossConfig::default());
    }

    #[test]
    fn layering_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        std::fs::write(&file, "# comment\nbatch_size = 64\nlr = 0.01 # inline\n").unwrap();
        let mut c = RunConfig::defaults(dir.path());
        c.apply_file(&file).unwrap();
        c.apply_env([("CDCML_LR".to_string(), "0.02".to_string()), ("PATH".to_string(), "x".to_string())]).unwrap();
        assert_eq!(c.count("batch_size"), 64);
        assert_eq!(c.real("lr"), 0.02);

        std::fs::write(&file, "batch = 64\n").unwrap();
        let err = RunConfig::defaults(dir.path()).apply_file(&file).unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");
        assert!(c.clone().apply_env([("CDCML_BOGUS".to_string(), "1".to_string())]).is_err());
        assert!(c.set("mode", "sideways").is_err());
        assert!(c.set("terms", "sim,xyz").is_err());
    }

    #[test]
    fn render_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::defaults(dir.path());
        c.set("seed", "9").unwrap();
        c.echo_into(dir.path()).unwrap();
        let mut back = RunConfig::defaults(dir.path());
        back.apply_file(&dir.path().join("config.txt")).unwrap();
        assert_eq!(back, c);
    }
}

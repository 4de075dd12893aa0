use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ArgMatches;

use cdcml_core::dataset::{
    gen_synthetic, generate_split_pairs, load_corpus, read_pairs, read_split_manifest, split_corpus, split_sets,
    write_corpus, write_pairs, write_split_manifest, Corpus, LoadOptions, Modality, Split, SplitManifest, SplitSet,
};
use cdcml_core::eval::{evaluate, match_topk, run_ablation, AblationFlags, AblationRow, EvalReport, OraclePredictor, Predictor};
use cdcml_core::gradcheck::check_all;
use cdcml_core::nn::{load_checkpoint, save_checkpoint};
use cdcml_core::trainer::{train_from, TrainData};
use cdcml_core::{Error, Model};

use crate::config::RunConfig;
use crate::CheckFailed;

pub fn pairs_file(split: Split) -> String {
    format!("pairs-{split}.txt")
}

pub const SPLIT_FILE: &str = "split.txt";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        context: format!("creating {}", dir.display()),
        source: e,
    })?;
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })?;
    Ok(())
}

fn corpus(cfg: &RunConfig) -> Result<Corpus> {
    let opts = LoadOptions {
        normalize: cfg.flag("normalize_ratings"),
    };
    Ok(load_corpus(&cfg.path("corpus"), opts)?)
}

/// A corpus with its split manifest and the three split views.
pub struct Loaded {
    pub corpus: Corpus,
    pub manifest: SplitManifest,
    pub sets: [SplitSet; 3],
}

impl Loaded {
    pub fn set(&self, split: Split) -> &SplitSet {
        &self.sets[Split::ALL.iter().position(|&s| s == split).expect("member")]
    }
}

/// Reads the corpus and what `build-dataset` wrote to `data_dir`.
pub fn load(cfg: &RunConfig) -> Result<Loaded> {
    let corpus = corpus(cfg)?;
    let dir = cfg.path("data_dir");
    let manifest = read_split_manifest(&dir.join(SPLIT_FILE), Some(&corpus))?;
    let mut pairs: [Vec<_>; 3] = Default::default();
    for (slot, split) in pairs.iter_mut().zip(Split::ALL) {
        let path = dir.join(pairs_file(split));
        let file = read_pairs(&path)?;
        if file.sigma.to_bits() != manifest.scale.sigma().to_bits() {
            return Err(Error::Parse {
                path,
                line: 1,
                message: format!("sigma {} differs from the split manifest's {}", file.sigma, manifest.scale.sigma()),
            }
            .into());
        }
        *slot = file.pairs;
    }
    let sets = split_sets(&corpus, &manifest, pairs)?;
    Ok(Loaded { corpus, manifest, sets })
}

pub fn gen_synth(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let corpus = gen_synthetic(
        cfg.count("synth_images"),
        cfg.count("synth_music"),
        cfg.count("synth_image_dim"),
        cfg.count("synth_music_dim"),
        cfg.real("synth_noise"),
        cfg.seed("synth_seed"),
    )?;
    let path = cfg.path("corpus");
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| cfg.root().to_path_buf());
    create_dir(&dir)?;
    write_corpus(&corpus, &path)?;
    cfg.echo_into(&dir)?;
    writeln!(
        out,
        "wrote {} ({} images x {}, {} clips x {})",
        path.display(),
        corpus.images().len(),
        corpus.image_dim(),
        corpus.music().len(),
        corpus.music_dim()
    )?;
    Ok(())
}

pub fn build_dataset(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let corpus = corpus(cfg)?;
    let policy = cfg.policy()?;
    let manifest = split_corpus(&corpus, cfg.ratios()?, cfg.seed("split_seed"), cfg.sigma_mode())?;
    let pairs = generate_split_pairs(&corpus, &manifest, &policy)?;
    let dir = cfg.path("data_dir");
    create_dir(&dir)?;
    write_split_manifest(&manifest, &dir.join(SPLIT_FILE))?;
    let sigma = manifest.scale.sigma();
    for (split, p) in Split::ALL.into_iter().zip(&pairs) {
        write_pairs(p, sigma, policy.seed, &dir.join(pairs_file(split)))?;
    }
    cfg.echo_into(&dir)?;

    writeln!(out, "sigma = {sigma}")?;
    writeln!(out, "{:<6} {:>8} {:>8} {:>8}", "split", "images", "clips", "pairs")?;
    let mut totals = [0usize; 3];
    for (split, p) in Split::ALL.into_iter().zip(&pairs) {
        let row = [
            manifest.ids(split, Modality::Image).len(),
            manifest.ids(split, Modality::Music).len(),
            p.len(),
        ];
        for (t, r) in totals.iter_mut().zip(row) {
            *t += r;
        }
        writeln!(out, "{:<6} {:>8} {:>8} {:>8}", split.as_str(), row[0], row[1], row[2])?;
    }
    writeln!(out, "{:<6} {:>8} {:>8} {:>8}", "total", totals[0], totals[1], totals[2])?;
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let config = cfg.train()?;
    let data = load(cfg)?;
    let validation = data.set(Split::Validation);
    let inputs = TrainData {
        train: data.set(Split::Train),
        validation: (!validation.pairs().is_empty()).then_some(validation),
        scale: &data.manifest.scale,
    };
    let dir = cfg.path("out_dir");
    create_dir(&dir)?;
    cfg.echo_into(&dir)?;

    let every = cfg.count("checkpoint_every");
    let mut best = f64::INFINITY;
    let model = Model::new(data.corpus.image_dim(), data.corpus.music_dim(), &config.arch, config.seed)?;
    let (model, history) = train_from(model, &inputs, &config, |record, model| {
        if every > 0 && record.epoch % every == 0 {
            save_checkpoint(model, &dir.join(format!("epoch-{:03}.ckpt", record.epoch)))?;
        }
        if let Some(v) = &record.validation {
            if v.sim_mse < best {
                best = v.sim_mse;
                save_checkpoint(model, &dir.join("best.ckpt"))?;
            }
        }
        Ok(())
    })?;
    save_checkpoint(&model, &dir.join("model.ckpt"))?;
    let csv = history.to_csv();
    write_file(&dir.join("history.csv"), &csv)?;
    write!(out, "{csv}")?;
    Ok(())
}

/// Where predictions come from: a checkpoint or the ground-truth labels.
pub enum Source {
    Checkpoint(PathBuf),
    Oracle,
}

impl Source {
    pub fn from_matches(m: &ArgMatches) -> Self {
        match m.get_one::<String>("checkpoint") {
            Some(p) if !m.get_flag("oracle") => Source::Checkpoint(PathBuf::from(p)),
            _ => Source::Oracle,
        }
    }

    fn predictor(&self, cfg: &RunConfig, data: &Loaded) -> Result<Box<dyn Predictor>> {
        Ok(match self {
            Source::Oracle => Box::new(OraclePredictor {
                scale: data.manifest.scale,
            }),
            Source::Checkpoint(p) => {
                let path = cfg.root().join(p);
                let model: Model = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
                for (m, expected) in [(Modality::Image, data.corpus.image_dim()), (Modality::Music, data.corpus.music_dim())] {
                    let actual = match m {
                        Modality::Image => model.image_dim(),
                        Modality::Music => model.music_dim(),
                    };
                    if actual != expected {
                        return Err(Error::DimensionMismatch {
                            context: format!("checkpoint {m} input"),
                            expected,
                            actual,
                        }
                        .into());
                    }
                }
                Box::new(model)
            }
        })
    }
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse().map_err(|e: String| Error::Config(e).into())
}

pub fn eval(cfg: &RunConfig, source: &Source, split: &str, format: &str, out: &mut dyn Write) -> Result<()> {
    let data = load(cfg)?;
    let predictor = source.predictor(cfg, &data)?;
    let report = evaluate(predictor.as_ref(), data.set(parse_split(split)?))?;
    match format {
        "fields" => write!(out, "{}", report.to_fields())?,
        _ => writeln!(out, "{}\n{}", EvalReport::csv_header(), report.csv_row())?,
    }
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<AblationFlags>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        context: format!("reading {}", path.display()),
        source: e,
    })?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        rows.push(line.parse().map_err(|e: Error| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("{}: no ablation rows", path.display())).into());
    }
    Ok(rows)
}

pub fn ablate(cfg: &RunConfig, rows_file: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let rows = match rows_file {
        Some(p) => read_rows(p)?,
        None => cfg.ablation_rows(),
    };
    let config = cfg.train()?;
    let data = load(cfg)?;
    let validation = data.set(Split::Validation);
    let inputs = TrainData {
        train: data.set(Split::Train),
        validation: (!validation.pairs().is_empty()).then_some(validation),
        scale: &data.manifest.scale,
    };
    let table = run_ablation(&inputs, data.set(Split::Test), &rows, &cfg.ablation_seeds(), &config)?;
    let mut csv = format!("{}\n", AblationRow::csv_header());
    for row in &table {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    let dir = cfg.path("out_dir");
    create_dir(&dir)?;
    cfg.echo_into(&dir)?;
    write_file(&dir.join("ablation.csv"), &csv)?;
    write!(out, "{csv}")?;
    Ok(())
}

pub fn match_clip(
    cfg: &RunConfig,
    source: &Source,
    split: &str,
    music_id: &str,
    k: usize,
    out: &mut dyn Write,
) -> Result<()> {
    let data = load(cfg)?;
    let predictor = source.predictor(cfg, &data)?;
    let set = data.set(parse_split(split)?);
    let clip = set.music(music_id)?;
    let pool: Vec<_> = set.items(Modality::Image).iter().collect();
    let ranked = match_topk(predictor.as_ref(), clip, &pool, k)?;
    writeln!(out, "rank,image_id,similarity")?;
    for (rank, (id, score)) in ranked.iter().enumerate() {
        writeln!(out, "{},{id},{score}", rank + 1)?;
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, trials: usize, tolerance: f64, out: &mut dyn Write) -> Result<()> {
    let results = check_all(cfg.seed("seed"), trials)?;
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.passed(tolerance);
        writeln!(
            out,
            "{:<16} {} max_rel_error = {:.3e} (trial {} of {})",
            r.name,
            if ok { "PASS" } else { "FAIL" },
            r.max_rel_error,
            r.worst_trial,
            r.trials
        )?;
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if !failed.is_empty() {
        return Err(CheckFailed(failed.join(", ")).into());
    }
    Ok(())
}

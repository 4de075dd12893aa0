//! Plain-text corpus, pair and split files.
//!
//! Corpus manifest:
//! ```text
//! cdcml-corpus v1 image_dim=<d1> music_dim=<d2>
//! <modality>,<id>,<valence>,<arousal>,<features>
//! ```
//! where `<features>` is either `;`-separated decimals or a path (relative
//! to the manifest) to a flat little-endian `f32` file.
//!
//! Pair file: `cdcml-pairs v1 sigma=<s> seed=<n>`, then
//! `<image_id>,<music_id>,<similarity>,<origin>`.
//!
//! Split manifest: `cdcml-split v1 train=<r> val=<r> test=<r> sigma=<s>
//! sigma_mode=<mode> seed=<n>`, then `<split>,<modality>,<id>`.

use std::fmt::Write as _;
use std::path::Path;

use super::{Corpus, Item, Modality, PairRecord, Split, SplitManifest, SplitRatios};
use crate::error::{Error, Result};
use crate::fsio::{header_fields, header_value, parse_field, read_to_string, write_atomic};
use crate::va::{normalize_va, SigmaProvenance, SimilarityScale, VaPoint};

const CORPUS_MAGIC: &str = "cdcml-corpus v1";
const PAIRS_MAGIC: &str = "cdcml-pairs v1";
const SPLIT_MAGIC: &str = "cdcml-split v1";

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Min/range-normalize raw ratings per modality and dimension instead
    /// of requiring labels already in `[0, 1]`.
    pub normalize: bool,
}

fn body_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn check_id(path: &Path, line: usize, id: &str) -> Result<()> {
    if id.is_empty() || id.contains(|c: char| c == ',' || c.is_whitespace()) {
        return Err(Error::parse(path, line, format!("invalid id `{id}`")));
    }
    Ok(())
}

fn read_feature_file(manifest: &Path, line: usize, rel: &str, dim: usize) -> Result<Vec<f64>> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let file = base.join(rel);
    let bytes = std::fs::read(&file)
        .map_err(|e| Error::parse(manifest, line, format!("feature file {}: {e}", file.display())))?;
    if bytes.len() != dim * 4 {
        return Err(Error::parse(
            manifest,
            line,
            format!(
                "feature file {} holds {} bytes, expected {} (dim {dim} x f32)",
                file.display(),
                bytes.len(),
                dim * 4
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

/// Loads and validates a corpus manifest.
pub fn load_corpus(path: &Path, options: LoadOptions) -> Result<Corpus> {
    let text = read_to_string(path)?;
    let header = text.lines().next().unwrap_or("");
    let fields = header_fields(path, header, CORPUS_MAGIC)?;
    let image_dim: usize = parse_field(path, 1, "image_dim", header_value(path, &fields, "image_dim")?)?;
    let music_dim: usize = parse_field(path, 1, "music_dim", header_value(path, &fields, "music_dim")?)?;

    struct Raw {
        line: usize,
        modality: Modality,
        id: String,
        rating: (f64, f64),
        features: Vec<f64>,
    }
    let mut raw = Vec::new();
    for (line, row) in body_lines(&text) {
        let cols: Vec<&str> = row.splitn(5, ',').collect();
        if cols.len() != 5 {
            return Err(Error::parse(path, line, format!("expected 5 fields, got {}", cols.len())));
        }
        let modality: Modality = cols[0]
            .trim()
            .parse()
            .map_err(|e: String| Error::parse(path, line, e))?;
        let id = cols[1].trim().to_string();
        check_id(path, line, &id)?;
        let v: f64 = parse_field(path, line, "valence", cols[2])?;
        let a: f64 = parse_field(path, line, "arousal", cols[3])?;
        if !v.is_finite() || !a.is_finite() {
            return Err(Error::parse(path, line, format!("non-finite label for `{id}`")));
        }
        let dim = match modality {
            Modality::Image => image_dim,
            Modality::Music => music_dim,
        };
        let spec = cols[4].trim();
        let inline = spec.contains(';') || spec.parse::<f64>().is_ok();
        let features = if inline {
            spec.split(';')
                .map(|f| parse_field::<f64>(path, line, "feature value", f))
                .collect::<Result<Vec<_>>>()?
        } else {
            read_feature_file(path, line, spec, dim)?
        };
        if features.len() != dim {
            return Err(Error::parse(
                path,
                line,
                format!("{modality} `{id}` has {} features, manifest declares {dim}", features.len()),
            ));
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::parse(path, line, format!("non-finite feature for `{id}`")));
        }
        raw.push(Raw {
            line,
            modality,
            id,
            rating: (v, a),
            features,
        });
    }

    let mut images = Vec::new();
    let mut music = Vec::new();
    for modality in [Modality::Image, Modality::Music] {
        let rows: Vec<&Raw> = raw.iter().filter(|r| r.modality == modality).collect();
        let extent = |pick: fn(&Raw) -> f64| {
            rows.iter()
                .map(|r| pick(r))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
        };
        let (v_range, a_range) = (extent(|r| r.rating.0), extent(|r| r.rating.1));
        for r in rows {
            let label = if options.normalize {
                let norm = |x, (lo, hi)| {
                    normalize_va(x, lo, hi).map_err(|e| Error::parse(path, r.line, format!("normalizing {modality} labels: {e}")))
                };
                VaPoint::new(norm(r.rating.0, v_range)?, norm(r.rating.1, a_range)?)
            } else {
                VaPoint::new(r.rating.0, r.rating.1)
            }
            .map_err(|e| Error::parse(path, r.line, format!("label of `{}`: {e}", r.id)))?;
            let item = Item {
                id: r.id.clone(),
                modality,
                label,
                features: r.features.clone(),
            };
            match modality {
                Modality::Image => images.push(item),
                Modality::Music => music.push(item),
            }
        }
    }
    Corpus::new(images, music, image_dim, music_dim, path.display().to_string()).map_err(|e| match e {
        Error::DuplicateId { modality, id } => {
            let line = raw
                .iter()
                .filter(|r| r.modality.as_str() == modality && r.id == id)
                .nth(1)
                .map_or(0, |r| r.line);
            Error::parse(path, line, format!("duplicate {modality} id `{id}`"))
        }
        other => other,
    })
}

/// Renders a corpus manifest with inline features.
pub fn render_corpus(corpus: &Corpus) -> String {
    let mut out = format!(
        "{CORPUS_MAGIC} image_dim={} music_dim={}\n",
        corpus.image_dim(),
        corpus.music_dim()
    );
    for item in corpus.images().iter().chain(corpus.music()) {
        let _ = write!(
            out,
            "{},{},{},{},",
            item.modality,
            item.id,
            item.label.valence(),
            item.label.arousal()
        );
        for (k, f) in item.features.iter().enumerate() {
            if k > 0 {
                out.push(';');
            }
            let _ = write!(out, "{f}");
        }
        out.push('\n');
    }
    out
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    write_atomic(path, render_corpus(corpus).as_bytes())
}

/// Contents of a pair file.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFile {
    pub sigma: f64,
    pub seed: u64,
    pub pairs: Vec<PairRecord>,
}

pub fn render_pairs(pairs: &[PairRecord], sigma: f64, seed: u64) -> String {
    let mut out = format!("{PAIRS_MAGIC} sigma={sigma} seed={seed}\n");
    for p in pairs {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            p.image_id,
            p.music_id,
            p.similarity,
            p.origin.as_str()
        );
    }
    out
}

pub fn write_pairs(pairs: &[PairRecord], sigma: f64, seed: u64, path: &Path) -> Result<()> {
    write_atomic(path, render_pairs(pairs, sigma, seed).as_bytes())
}

pub fn read_pairs(path: &Path) -> Result<PairFile> {
    let text = read_to_string(path)?;
    let fields = header_fields(path, text.lines().next().unwrap_or(""), PAIRS_MAGIC)?;
    let sigma: f64 = parse_field(path, 1, "sigma", header_value(path, &fields, "sigma")?)?;
    let seed: u64 = parse_field(path, 1, "seed", header_value(path, &fields, "seed")?)?;
    let mut pairs = Vec::new();
    for (line, row) in body_lines(&text) {
        let cols: Vec<&str> = row.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            return Err(Error::parse(path, line, format!("expected 4 fields, got {}", cols.len())));
        }
        check_id(path, line, cols[0])?;
        check_id(path, line, cols[1])?;
        let similarity: f64 = parse_field(path, line, "similarity", cols[2])?;
        if !(similarity > 0.0 && similarity <= 1.0) {
            return Err(Error::parse(path, line, format!("similarity {similarity} outside (0, 1]")));
        }
        pairs.push(PairRecord {
            image_id: cols[0].to_string(),
            music_id: cols[1].to_string(),
            similarity,
            origin: cols[3].parse().map_err(|e: String| Error::parse(path, line, e))?,
        });
    }
    Ok(PairFile { sigma, seed, pairs })
}

pub fn render_split_manifest(m: &SplitManifest) -> String {
    let mut out = format!(
        "{SPLIT_MAGIC} train={} val={} test={} sigma={} sigma_mode={} seed={}\n",
        m.ratios.train,
        m.ratios.validation,
        m.ratios.test,
        m.scale.sigma(),
        m.scale.provenance(),
        m.seed
    );
    for split in Split::ALL {
        for modality in [Modality::Image, Modality::Music] {
            for id in m.ids(split, modality) {
                let _ = writeln!(out, "{split},{modality},{id}");
            }
        }
    }
    out
}

pub fn write_split_manifest(m: &SplitManifest, path: &Path) -> Result<()> {
    write_atomic(path, render_split_manifest(m).as_bytes())
}

/// Reads a split manifest; with `corpus` given, also checks disjointness
/// and coverage against it.
pub fn read_split_manifest(path: &Path, corpus: Option<&Corpus>) -> Result<SplitManifest> {
    let text = read_to_string(path)?;
    let fields = header_fields(path, text.lines().next().unwrap_or(""), SPLIT_MAGIC)?;
    let get = |k| header_value(path, &fields, k);
    let ratios = SplitRatios::new(
        parse_field(path, 1, "train ratio", get("train")?)?,
        parse_field(path, 1, "val ratio", get("val")?)?,
        parse_field(path, 1, "test ratio", get("test")?)?,
    )
    .map_err(|e| Error::parse(path, 1, e.to_string()))?;
    let sigma: f64 = parse_field(path, 1, "sigma", get("sigma")?)?;
    let provenance: SigmaProvenance = get("sigma_mode")?
        .parse()
        .map_err(|e: Error| Error::parse(path, 1, e.to_string()))?;
    let scale = SimilarityScale::new(sigma, provenance).map_err(|e| Error::parse(path, 1, e.to_string()))?;
    let seed: u64 = parse_field(path, 1, "seed", get("seed")?)?;

    let mut image_ids: [Vec<String>; 3] = Default::default();
    let mut music_ids: [Vec<String>; 3] = Default::default();
    for (line, row) in body_lines(&text) {
        let cols: Vec<&str> = row.split(',').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(Error::parse(path, line, format!("expected 3 fields, got {}", cols.len())));
        }
        let split: Split = cols[0].parse().map_err(|e: String| Error::parse(path, line, e))?;
        let modality: Modality = cols[1].parse().map_err(|e: String| Error::parse(path, line, e))?;
        check_id(path, line, cols[2])?;
        let target = match modality {
            Modality::Image => &mut image_ids,
            Modality::Music => &mut music_ids,
        };
        target[split.position()].push(cols[2].to_string());
    }
    let manifest = SplitManifest {
        ratios,
        image_ids,
        music_ids,
        scale,
        seed,
    };
    if let Some(corpus) = corpus {
        manifest.validate_against(corpus)?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_synthetic, split_corpus, PairOrigin};

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tmp();
        let corpus = gen_synthetic(6, 4, 3, 2, 0.1, 3).unwrap();
        let path = dir.path().join("corpus.txt");
        write_corpus(&corpus, &path).unwrap();
        let back = load_corpus(&path, LoadOptions::default()).unwrap();
        assert_eq!(back.images(), corpus.images());
        assert_eq!(back.music(), corpus.music());
        assert_eq!((back.image_dim(), back.music_dim()), (3, 2));
    }

    #[test]
    fn wrong_feature_length_names_the_row() {
        let dir = tmp();
        let path = dir.path().join("c.txt");
        std::fs::write(
            &path,
            "cdcml-corpus v1 image_dim=2 music_dim=2\nimage,a,0.1,0.2,1;2\nimage,b,0.3,0.4,1;2;3\n",
        )
        .unwrap();
        match load_corpus(&path, LoadOptions::default()) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("`b`"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn feature_files_and_normalization() {
        let dir = tmp();
        let feats: Vec<u8> = [0.5f32, -1.0].iter().flat_map(|f| f.to_le_bytes()).collect();
        std::fs::write(dir.path().join("m0.f32"), &feats).unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(
            &path,
            "cdcml-corpus v1 image_dim=1 music_dim=2\n\
             image,a,1,9,0.5\nimage,b,9,1,0.25\nimage,c,5,5,0\n\
             music,m0,-1,1,m0.f32\nmusic,m1,1,-1,1;2\n",
        )
        .unwrap();
        assert!(load_corpus(&path, LoadOptions::default()).is_err());
        let c = load_corpus(&path, LoadOptions { normalize: true }).unwrap();
        assert_eq!(c.get(Modality::Image, "c").unwrap().label, VaPoint::new(0.5, 0.5).unwrap());
        assert_eq!(c.get(Modality::Music, "m0").unwrap().features, vec![0.5, -1.0]);
        assert_eq!(c.get(Modality::Music, "m0").unwrap().label, VaPoint::new(0.0, 1.0).unwrap());
    }

    #[test]
    fn pairs_round_trip_and_reject_garbage() {
        let dir = tmp();
        let pairs: Vec<PairRecord> = (0..12)
            .map(|i| PairRecord {
                image_id: format!("i{i}"),
                music_id: format!("m{}", i % 3),
                similarity: 1.0 / (1.0 + i as f64 * 0.37),
                origin: [PairOrigin::Top, PairOrigin::Bottom, PairOrigin::Random][i % 3],
            })
            .collect();
        let path = dir.path().join("p.txt");
        write_pairs(&pairs, 0.4, 11, &path).unwrap();
        let back = read_pairs(&path).unwrap();
        assert_eq!(back, PairFile { sigma: 0.4, seed: 11, pairs });

        std::fs::write(&path, "cdcml-pairs v1 sigma=0.4 seed=1\na,b,1.5,top\n").unwrap();
        assert!(matches!(read_pairs(&path), Err(Error::Parse { line: 2, .. })));
        std::fs::write(&path, "cdcml-pairs v2 sigma=0.4 seed=1\n").unwrap();
        assert!(matches!(read_pairs(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn split_manifest_round_trip() {
        let dir = tmp();
        let corpus = gen_synthetic(40, 20, 2, 2, 0.0, 1).unwrap();
        let m = split_corpus(&corpus, SplitRatios::default(), 4, SigmaProvenance::Exact).unwrap();
        let path = dir.path().join("split.txt");
        write_split_manifest(&m, &path).unwrap();
        assert_eq!(read_split_manifest(&path, Some(&corpus)).unwrap(), m);

        let text = std::fs::read_to_string(&path).unwrap();
        let first_train = m.image_ids[0][0].clone();
        std::fs::write(&path, format!("{text}test,image,{first_train}\n")).unwrap();
        assert!(matches!(
            read_split_manifest(&path, Some(&corpus)),
            Err(Error::SplitOverlap { .. })
        ));
    }
}

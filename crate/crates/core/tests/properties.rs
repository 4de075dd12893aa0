use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cdcml_core::dataset::{gen_synthetic, generate_pairs, split_corpus, Item, Modality, PairOrigin, PairPolicy, SplitRatios, SplitSet, Split};
use cdcml_core::eval::{evaluate, Predictor, SpNet};
use cdcml_core::nn::{branch_specs, predictor_specs, ArchConfig, Mode};
use cdcml_core::va::{compute_sigma, SigmaProvenance};
use cdcml_core::{Model, Net, Scale, Va};

fn labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<Va> {
    (0..n).map(|_| Va::new(rng.random(), rng.random()).unwrap()).collect()
}

fn item(id: String, modality: Modality, label: Va) -> Item {
    Item {
        id,
        modality,
        features: vec![label.valence(), label.arousal()],
        label,
    }
}

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        embed_dim: 6,
        branch_hidden: vec![5],
        sim_hidden: vec![4, 3],
        va_hidden: vec![4, 3],
        dropout: 0.5,
        per_modality_va: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn exact_sigma_matches_a_double_loop(seed in any::<u64>(), n in 1usize..=100, m in 1usize..=100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (img, mus) = (labels(&mut rng, n), labels(&mut rng, m));
        let mut total = 0.0;
        for a in &img {
            for b in &mus {
                total += ((a.valence() - b.valence()).powi(2) + (a.arousal() - b.arousal()).powi(2)).sqrt();
            }
        }
        let brute = total / (n * m) as f64;
        let got = compute_sigma(&img, &mus, SigmaProvenance::Exact).unwrap().sigma();
        prop_assert!((got - brute).abs() <= 1e-12 * brute, "{got} vs {brute}");
    }

    #[test]
    fn selections_match_a_full_sort(seed in any::<u64>(), n in 8usize..60, m in 1usize..6, top in 1usize..4, bottom in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<Item> = labels(&mut rng, n).into_iter().enumerate().map(|(i, l)| item(format!("i{i:03}"), Modality::Image, l)).collect();
        let music: Vec<Item> = labels(&mut rng, m).into_iter().enumerate().map(|(i, l)| item(format!("m{i}"), Modality::Music, l)).collect();
        let policy = PairPolicy { images_per_clip: top + bottom + 2, n_top: top, n_bottom: bottom, n_random: 2, sample_rate: 1.0, seed };
        let scale = Scale::new(0.5, SigmaProvenance::Exact).unwrap();
        let (ir, mr): (Vec<&Item>, Vec<&Item>) = (images.iter().collect(), music.iter().collect());
        let pairs = generate_pairs(&ir, &mr, &policy, &scale).unwrap();
        prop_assert_eq!(&pairs, &generate_pairs(&ir, &mr, &policy, &scale).unwrap());

        let sim = |i: &Item, c: &Item| {
            let d = ((i.label.valence() - c.label.valence()).powi(2) + (i.label.arousal() - c.label.arousal()).powi(2)).sqrt();
            (-d / 0.5).exp()
        };
        for clip in &music {
            let mut order: Vec<&Item> = images.iter().collect();
            order.sort_by(|a, b| sim(b, clip).total_cmp(&sim(a, clip)).then(a.id.cmp(&b.id)));
            let mine: Vec<_> = pairs.iter().filter(|p| p.music_id == clip.id).collect();
            let ids = |o: PairOrigin| mine.iter().filter(|p| p.origin == o).map(|p| p.image_id.clone()).collect::<Vec<_>>();
            let want_top: Vec<String> = order[..top].iter().map(|i| i.id.clone()).collect();
            let mut want_bottom: Vec<String> = order[n - bottom..].iter().rev().map(|i| i.id.clone()).collect();
            let mut got_bottom = ids(PairOrigin::Bottom);
            want_bottom.sort();
            got_bottom.sort();
            prop_assert_eq!(ids(PairOrigin::Top), want_top);
            prop_assert_eq!(got_bottom, want_bottom);
            let mut all: Vec<String> = mine.iter().map(|p| p.image_id.clone()).collect();
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), policy.images_per_clip);
            for p in &mine {
                let img = images.iter().find(|i| i.id == p.image_id).unwrap();
                prop_assert!((p.similarity - sim(img, clip)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover_the_corpus(seed in any::<u64>(), n in 40usize..200, m in 40usize..120) {
        let corpus = gen_synthetic(n, m, 2, 2, 0.1, seed).unwrap();
        let manifest = split_corpus(&corpus, SplitRatios::new(0.8, 0.05, 0.15).unwrap(), seed, SigmaProvenance::Exact).unwrap();
        for (modality, total) in [(Modality::Image, n), (Modality::Music, m)] {
            let mut all: Vec<&String> = Split::ALL.iter().flat_map(|&s| manifest.ids(s, modality)).collect();
            prop_assert_eq!(all.len(), total);
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), total);
        }
        manifest.validate_against(&corpus).unwrap();
    }

    #[test]
    fn forward_and_backward_are_deterministic(seed in any::<u64>(), b in 2usize..8) {
        let mut specs = branch_specs(4, &[6], 5);
        specs.extend(predictor_specs(5, &[4], 2, 0.5));
        let net = Net::new(&specs, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = Array2::from_shape_fn((b, 4), |_| rng.random::<f64>() - 0.5);
        let g = Array2::from_shape_fn((b, 2), |_| rng.random::<f64>() - 0.5);
        let run = || {
            let mut n = net.clone();
            let (y, cache) = n.forward(x.view(), Mode::Train, seed).unwrap();
            let (gx, grads) = n.backward(&cache, g.view()).unwrap();
            (y, gx, grads, n)
        };
        let (a, b2) = (run(), run());
        prop_assert!(a.0.iter().zip(b2.0.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        prop_assert!(a.1.iter().zip(b2.1.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        prop_assert_eq!(a.2, b2.2);
        prop_assert_eq!(a.3, b2.3);
        prop_assert!(a.0.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

fn tiny_set(seed: u64) -> (SplitSet, Scale) {
    let corpus = gen_synthetic(30, 12, 3, 3, 0.1, seed).unwrap();
    let images: Vec<&Item> = corpus.images().iter().collect();
    let music: Vec<&Item> = corpus.music().iter().collect();
    let scale = Scale::new(0.5, SigmaProvenance::Exact).unwrap();
    let policy = PairPolicy { images_per_clip: 6, n_top: 2, n_bottom: 2, n_random: 2, sample_rate: 1.0, seed };
    let pairs = generate_pairs(&images, &music, &policy, &scale).unwrap();
    let set = SplitSet::new(Split::Test, corpus.images().to_vec(), corpus.music().to_vec(), pairs, 3, 3).unwrap();
    (set, scale)
}

#[test]
fn evaluation_leaves_the_model_untouched() {
    let (set, _) = tiny_set(3);
    let model = Model::new(3, 3, &tiny_arch(), 11).unwrap();
    let before = model.clone();
    let first = evaluate(&model, &set).unwrap();
    assert_eq!(model, before);
    assert_eq!(evaluate(&model, &set).unwrap(), first);
}

#[test]
fn separate_prediction_similarity_is_the_map_of_predicted_va() {
    let (set, scale) = tiny_set(5);
    let mut arch = tiny_arch();
    arch.per_modality_va = true;
    let sp = SpNet { model: Model::new(3, 3, &arch, 2).unwrap(), scale };
    let images: Vec<&Item> = set.items(Modality::Image).iter().take(10).collect();
    let music: Vec<&Item> = set.items(Modality::Music).iter().cycle().take(10).collect();
    let sims = sp.similarity(&images, &music).unwrap();
    let vi = sp.va(Modality::Image, &images).unwrap();
    let vm = sp.va(Modality::Music, &music).unwrap();
    for k in 0..10 {
        let p = Va::new(vi[k][0], vi[k][1]).unwrap();
        let q = Va::new(vm[k][0], vm[k][1]).unwrap();
        assert_eq!(sims[k].to_bits(), scale.similarity_between(&p, &q).to_bits());
    }
}

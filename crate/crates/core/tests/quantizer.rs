use mmq_core::dataio::{
    generate_synth, EmbeddingTable, Modality, PerModality, SynthConfig, TableTag,
};
use mmq_core::diffkit::{sq_dist, Matrix, MlpParams};
use mmq_core::losses::{KernelConfig, MmdEstimator};
use mmq_core::quantizer::{
    assign_ids, encode_item, export_code_embeddings, recon_registry, Branch, Codebook, LossWeights,
    QuantizerConfig, QuantizerModel, ReconContext,
};
use mmq_core::rng::Rng;

fn small_corpus(seed: u64) -> PerModality<EmbeddingTable> {
    let cfg = SynthConfig {
        items: 150,
        users: 100,
        seed,
        ..Default::default()
    };
    generate_synth(&cfg).unwrap().tables
}

fn small_cfg() -> QuantizerConfig {
    QuantizerConfig {
        codebook_size: PerModality::new(8, 8, 8),
        levels: PerModality::new(3, 3, 3),
        code_dim: 6,
        hidden: 16,
        epochs: 3,
        batch_size: 32,
        ..Default::default()
    }
}

/// Exhaustive nearest code, lowest index on ties.
fn argmin_oracle(r: &[f64], codes: &Matrix) -> usize {
    let d: Vec<f64> = (0..codes.rows())
        .map(|k| sq_dist(r, codes.row(k)))
        .collect();
    let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
    d.iter().position(|&x| x == best).unwrap()
}

#[test]
fn per_level_choice_matches_exhaustive_search() {
    let tables = small_corpus(1);
    let (model, _) = mmq_core::quantizer::train_mm_rqvae(&tables, &small_cfg()).unwrap();
    let assignments = assign_ids(&model, &tables).unwrap();
    let mut rng = Rng::new(5);
    for _ in 0..100 {
        let item = rng.below(150);
        for m in Modality::ALL {
            let a = assignments
                .iter()
                .find(|a| a.item == item as u64 && a.modality == m)
                .unwrap();
            let branch = &model.branches[m];
            let mut r = branch
                .encoder
                .apply(&Matrix::row_vector(tables[m].data.row(item)))
                .unwrap()
                .row(0)
                .to_vec();
            let mut zhat = vec![0.0; r.len()];
            for (l, cb) in branch.codebooks.iter().enumerate() {
                let k = argmin_oracle(&r, &cb.codes);
                assert_eq!(a.sids[l] as usize, k, "item {item} modality {m} level {l}");
                for ((ri, zi), c) in r.iter_mut().zip(zhat.iter_mut()).zip(cb.codes.row(k)) {
                    *ri -= c;
                    *zi += c;
                }
            }
            assert_eq!(a.quantized, zhat);
        }
    }
}

#[test]
fn greedy_path_beats_second_nearest_detours() {
    // Greedy residual search is not optimal for arbitrary codebooks. With a
    // zero code at every later level the greedy error after level `l` is at
    // most `d1 = ‖r − c_nearest‖²`, while a detour through the second-nearest
    // code ends at least `(√d2 − R)²` away, `R` being the reach of the later
    // levels. Whenever that bound separates the two, greedy must win.
    let mut rng = Rng::new(9);
    let books: Vec<Codebook> = (0..3)
        .map(|l| {
            let mut codes = Matrix::randn(6, 4, 0.3f64.powi(l as i32), &mut rng);
            if l > 0 {
                codes.row_mut(0).fill(0.0);
            }
            Codebook::new(l, codes).unwrap()
        })
        .collect();
    let reach = |from: usize| -> f64 {
        books[from..]
            .iter()
            .map(|cb| {
                (0..cb.size())
                    .map(|k| sq_dist(cb.codes.row(k), &[0.0; 4]).sqrt())
                    .fold(0.0, f64::max)
            })
            .sum()
    };
    let model = model_with(Branch {
        encoder: MlpParams::identity(4),
        decoder: MlpParams::identity(4),
        codebooks: books.clone(),
    });
    let mut checked = 0;
    for _ in 0..200 {
        let z: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let enc = encode_item(&model, Modality::Text, &z).unwrap();
        let err = sq_dist(&z, &enc.zhat);
        for swap in 0..3 {
            let mut r = z.clone();
            let mut zhat = vec![0.0; 4];
            let mut separated = false;
            for (l, cb) in books.iter().enumerate() {
                let mut order: Vec<usize> = (0..cb.size()).collect();
                order.sort_by(|&a, &b| {
                    sq_dist(&r, cb.codes.row(a)).total_cmp(&sq_dist(&r, cb.codes.row(b)))
                });
                if l == swap {
                    let d1 = sq_dist(&r, cb.codes.row(order[0]));
                    let d2 = sq_dist(&r, cb.codes.row(order[1]));
                    separated = d2.sqrt() - reach(l + 1) >= d1.sqrt();
                }
                let k = if l == swap { order[1] } else { order[0] };
                for ((ri, zi), c) in r.iter_mut().zip(zhat.iter_mut()).zip(cb.codes.row(k)) {
                    *ri -= c;
                    *zi += c;
                }
            }
            if separated {
                checked += 1;
                assert!(err <= sq_dist(&z, &zhat), "detour at level {swap}");
            }
        }
    }
    assert!(checked >= 150, "only {checked} separated cases");
}

fn model_with(branch: Branch) -> QuantizerModel {
    QuantizerModel {
        branches: PerModality::from_fn(|_| branch.clone()),
        kernels: PerModality::from_fn(|_| KernelConfig::new(1.0).unwrap()),
        estimator: MmdEstimator::Biased,
        weights: LossWeights::default(),
        epsilon: 0.1,
        recon: "mse".into(),
    }
}

#[test]
fn planted_centroids_reconstruct_to_noise_floor() {
    let mut rng = Rng::new(11);
    let centres = Matrix::randn(8, 5, 3.0, &mut rng);
    let noise = 0.05;
    let n = 400;
    let mut data = Matrix::zeros(n, 5);
    for i in 0..n {
        for j in 0..5 {
            data.set(i, j, centres.get(i % 8, j) + noise * rng.normal());
        }
    }
    let mut second = Matrix::zeros(2, 5);
    second.set(1, 0, 1e3);
    let branch = Branch {
        encoder: MlpParams::identity(5),
        decoder: MlpParams::identity(5),
        codebooks: vec![
            Codebook::new(0, centres).unwrap(),
            Codebook::new(1, second).unwrap(),
        ],
    };
    let enc = branch.encode(&data).unwrap();
    let recon = branch.decoder.apply(&enc.zhat).unwrap();
    let ctx = ReconContext {
        kernel: KernelConfig::new(1.0).unwrap(),
        estimator: MmdEstimator::Biased,
    };
    let (loss, _) = recon_registry()
        .create("mse")
        .unwrap()
        .loss(&data, &recon, &ctx)
        .unwrap();
    let floor = noise * noise;
    assert!((loss - floor).abs() < 0.2 * floor, "{loss} vs {floor}");
}

#[test]
fn exported_codes_rebuild_quantized_embeddings() {
    let tables = small_corpus(2);
    let (model, _) = mmq_core::quantizer::train_mm_rqvae(&tables, &small_cfg()).unwrap();
    let codes = export_code_embeddings(&model);
    assert_eq!(codes.len(), 9);
    for a in assign_ids(&model, &tables).unwrap() {
        let mut sum = vec![0.0; 6];
        for (l, &s) in a.sids.iter().enumerate() {
            let t = codes
                .iter()
                .find(|c| c.modality == a.modality && c.level == l)
                .unwrap();
            assert_eq!(t.table.tag, TableTag::Code);
            for (acc, v) in sum.iter_mut().zip(t.table.data.row(s as usize)) {
                *acc += v;
            }
        }
        assert_eq!(sum, a.quantized);
    }
}

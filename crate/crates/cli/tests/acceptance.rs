//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a criterion fails that is not listed in `KNOWN_FAILURES`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use mmq_cli::layout::RunLayout;
use mmq_cli::stages::{
    init_recommender, load_corpus, load_recommender, DiagnoseSummary, RecSummary,
};
use mmq_cli::{
    diagnose, gen_data, report, train_quantizer, train_rec, RunConfig, RunManifest, Selection,
};
use mmq_core::dataio::{generate_synth, Modality, PerModality, SplitExample, SynthConfig};
use mmq_core::diagnostics::{kendall_tau, rank_bound_check};
use mmq_core::diffkit::{
    grad_check, Activation, GradStore, Matrix, MlpParams, ParamSet, TensorMap,
};
use mmq_core::losses::{
    bce, info_nce, mmd2_with_grad, mse, rq_commitment_loss, KernelConfig, MmdEstimator,
};
use mmq_core::quantizer::{
    batch_loss, encode_item, take_snapshot, train_mm_rqvae, Branch, Codebook, LossWeights,
    QuantizerConfig, QuantizerModel,
};
use mmq_core::rng::Rng;
use mmq_core::seqrec::{
    evaluate, frequency_from_counts, fused_score, metrics_from_ranks, rank_of, BackboneConfig,
    ItemCatalog, Recommender, SeqRecConfig, TokenMode, TrainSequence, UserRank,
};

type Res<T> = Result<T, Box<dyn std::error::Error>>;

/// Criteria measured and reported as failing; see the README.
const KNOWN_FAILURES: &[usize] = &[6];
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const INSTANCES: usize = 100;
const TOL: f64 = 1e-4;
const BUDGET: Duration = Duration::from_secs(600);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn tensors(named: Vec<(&str, Matrix)>) -> TensorMap {
    TensorMap {
        tensors: named.into_iter().map(|(n, m)| (n.to_string(), m)).collect(),
    }
}

fn get<'a>(p: &'a TensorMap, name: &str) -> &'a Matrix {
    p.get(name).expect("tensor present")
}

/// Largest grad-check error over `INSTANCES` random instances.
fn worst(mut one: impl FnMut(&mut Rng) -> Res<f64>, seed: u64) -> Res<f64> {
    let mut rng = Rng::new(seed);
    let mut max = 0.0f64;
    for _ in 0..INSTANCES {
        max = max.max(one(&mut rng)?);
    }
    Ok(max)
}

fn dims(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.inclusive(lo, hi)
}

fn mmd_instance(rng: &mut Rng) -> Res<f64> {
    let (n, m, d) = (dims(rng, 2, 5), dims(rng, 2, 5), dims(rng, 1, 4));
    let p = tensors(vec![
        ("x", Matrix::randn(n, d, 1.0, rng)),
        ("y", Matrix::randn(m, d, 1.0, rng)),
    ]);
    let k = KernelConfig::new(rng.uniform_range(0.5, 2.5))?;
    let est = if rng.below(2) == 0 {
        MmdEstimator::Biased
    } else {
        MmdEstimator::Unbiased
    };
    Ok(grad_check(
        |p: &TensorMap| {
            let o = mmd2_with_grad(get(p, "x"), get(p, "y"), &k, est)?;
            let mut g = GradStore::new();
            g.insert("x", o.grad_x);
            g.insert("y", o.grad_y);
            Ok((o.value, g))
        },
        &p,
        1e-5,
    )?)
}

fn info_nce_instance(rng: &mut Rng) -> Res<f64> {
    let (b, d) = (dims(rng, 2, 5), dims(rng, 2, 4));
    let p = tensors(vec![
        ("a", Matrix::randn(b, d, 1.0, rng)),
        ("p", Matrix::randn(b, d, 1.0, rng)),
    ]);
    let eps = rng.uniform_range(0.2, 1.5);
    Ok(grad_check(
        |p: &TensorMap| {
            let o = info_nce(get(p, "a"), get(p, "p"), eps)?;
            let mut g = GradStore::new();
            g.insert("a", o.grad_anchors);
            g.insert("p", o.grad_positives);
            Ok((o.value, g))
        },
        &p,
        1e-5,
    )?)
}

fn bce_instance(rng: &mut Rng) -> Res<f64> {
    let n = dims(rng, 1, 8);
    let labels: Vec<f64> = (0..n).map(|_| rng.below(2) as f64).collect();
    let p = tensors(vec![("logits", Matrix::randn(1, n, 3.0, rng))]);
    Ok(grad_check(
        |p: &TensorMap| {
            let o = bce(get(p, "logits").data(), &labels)?;
            let mut g = GradStore::new();
            g.insert("logits", Matrix::row_vector(&o.grad));
            Ok((o.value, g))
        },
        &p,
        1e-5,
    )?)
}

fn mse_instance(rng: &mut Rng) -> Res<f64> {
    let (r, c) = (dims(rng, 1, 5), dims(rng, 1, 5));
    let p = tensors(vec![
        ("a", Matrix::randn(r, c, 1.0, rng)),
        ("b", Matrix::randn(r, c, 1.0, rng)),
    ]);
    Ok(grad_check(
        |p: &TensorMap| {
            let o = mse(get(p, "a"), get(p, "b"))?;
            let mut g = GradStore::new();
            g.insert("b", o.grad_a.scaled(-1.0));
            g.insert("a", o.grad_a);
            Ok((o.value, g))
        },
        &p,
        1e-5,
    )?)
}

/// Codes are checked against the codebook term and residuals against the
/// commitment term, the split the stop-gradients define.
fn commitment_instance(rng: &mut Rng) -> Res<f64> {
    let (levels, n, d) = (dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 4));
    let alpha = rng.uniform_range(0.1, 2.0);
    let mut named = Vec::new();
    for l in 0..levels {
        named.push((format!("r{l}"), Matrix::randn(n, d, 1.0, rng)));
        named.push((format!("c{l}"), Matrix::randn(n, d, 1.0, rng)));
    }
    let p = TensorMap { tensors: named };
    let split = |p: &TensorMap| {
        let r: Vec<Matrix> = (0..levels)
            .map(|l| get(p, &format!("r{l}")).clone())
            .collect();
        let c: Vec<Matrix> = (0..levels)
            .map(|l| get(p, &format!("c{l}")).clone())
            .collect();
        (r, c)
    };
    let codes = grad_check(
        |p: &TensorMap| {
            let (r, c) = split(p);
            let o = rq_commitment_loss(&r, &c, alpha)?;
            let mut g = GradStore::new();
            for (l, gc) in o.grad_codes.into_iter().enumerate() {
                g.insert(format!("c{l}"), gc);
            }
            Ok((o.codebook_term, g))
        },
        &p,
        1e-5,
    )?;
    let residuals = grad_check(
        |p: &TensorMap| {
            let (r, c) = split(p);
            let o = rq_commitment_loss(&r, &c, alpha)?;
            let mut g = GradStore::new();
            for (l, gr) in o.grad_residuals.into_iter().enumerate() {
                g.insert(format!("r{l}"), gr);
            }
            Ok((o.commitment_term, g))
        },
        &p,
        1e-5,
    )?;
    Ok(codes.max(residuals))
}

fn quantizer_instance(rng: &mut Rng) -> Res<f64> {
    let d = PerModality::new(dims(rng, 2, 4), dims(rng, 2, 5), dims(rng, 2, 5));
    let code_dim = dims(rng, 2, 3);
    let branches = PerModality::try_from_fn(|m| -> Res<Branch> {
        Ok(Branch {
            encoder: MlpParams::init(&[d[m], 4, code_dim], Activation::Identity, rng),
            decoder: MlpParams::init(&[code_dim, 4, d[m]], Activation::Identity, rng),
            codebooks: (0..2)
                .map(|l| Codebook::new(l, Matrix::randn(3, code_dim, 1.0, rng)))
                .collect::<Result<_, _>>()?,
        })
    })?;
    let model = QuantizerModel {
        branches,
        kernels: PerModality::try_from_fn(|_| KernelConfig::new(rng.uniform_range(0.8, 2.0)))?,
        estimator: MmdEstimator::Biased,
        weights: LossWeights {
            alpha: rng.uniform_range(0.1, 1.0),
            beta: rng.uniform_range(0.1, 1.0),
            gamma: rng.uniform_range(0.1, 1.0),
            recon: 1.0,
        },
        epsilon: 0.5,
        recon: if rng.below(2) == 0 {
            "mmd".into()
        } else {
            "mse".into()
        },
    };
    let n = dims(rng, 3, 6);
    let batch = PerModality::from_fn(|m| Matrix::randn(n, d[m], 1.0, rng));
    let snap = take_snapshot(&model, &batch)?;
    Ok(grad_check(
        |p: &QuantizerModel| batch_loss(p, &batch, &snap).map(|(l, g)| (l.total, g)),
        &model,
        1e-6,
    )?)
}

fn tiny_recommender(rng: &mut Rng, lora_rank: usize, mode: TokenMode) -> Res<Recommender> {
    let items = 7;
    let d = PerModality::new(3, 4, 2);
    let tables = PerModality::from_fn(|m| Matrix::randn(items, d[m], 1.0, rng));
    let sids = PerModality::from_fn(|_| {
        (0..items)
            .map(|_| vec![rng.below(3), rng.below(3)])
            .collect()
    });
    let counts: Vec<u64> = (0..items).map(|_| rng.below(20) as u64).collect();
    let catalog = ItemCatalog::new(tables, sids, frequency_from_counts(&counts))?;
    let codes = PerModality::from_fn(|_| {
        vec![Matrix::randn(3, 2, 1.0, rng), Matrix::randn(3, 2, 1.0, rng)]
    });
    let cfg = SeqRecConfig {
        backbone: BackboneConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            ff_dim: 12,
            max_len: 8,
            lora_rank,
            lora_alpha: 4.0,
        },
        token_mode: mode,
        fuse_hidden: 6,
        gate_hidden: 4,
        negatives: 2,
        seed: rng.next_u64(),
        ..SeqRecConfig::default()
    };
    let mut model = Recommender::init(&cfg, catalog, &codes)?;
    // Adapters start with B = 0; random B exercises every adapter path.
    if let Some(lora) = &mut model.backbone.lora {
        lora.visit_params_mut(&mut |_, m| {
            let (r, c) = m.shape();
            *m = Matrix::randn(r, c, 0.3, rng);
        });
    }
    Ok(model)
}

fn recommender_instance(rng: &mut Rng) -> Res<f64> {
    let mode = if rng.below(2) == 0 {
        TokenMode::Fused
    } else {
        TokenMode::PerModality
    };
    let lora = [0, 2][rng.below(2)];
    let model = tiny_recommender(rng, lora, mode)?;
    let batch: Vec<TrainSequence> = (0..2)
        .map(|_| TrainSequence {
            inputs: vec![rng.below(7), rng.below(7)],
            positives: vec![rng.below(7), rng.below(7)],
            negatives: vec![
                vec![rng.below(7), rng.below(7)],
                vec![rng.below(7), rng.below(7)],
            ],
        })
        .collect();
    Ok(grad_check(
        |p: &Recommender| p.batch_loss(&batch),
        &model,
        1e-6,
    )?)
}

fn criterion_gradients() -> Res<Outcome> {
    let t = Instant::now();
    let cases: Vec<(&str, Res<f64>)> = vec![
        ("mmd2", worst(mmd_instance, 1)),
        ("info_nce", worst(info_nce_instance, 2)),
        ("bce", worst(bce_instance, 3)),
        ("mse", worst(mse_instance, 4)),
        ("commitment", worst(commitment_instance, 5)),
        ("quantizer graph", worst(quantizer_instance, 6)),
        ("recommender graph", worst(recommender_instance, 7)),
    ];
    let elapsed = t.elapsed();
    let mut parts = Vec::new();
    let mut pass = elapsed < Duration::from_secs(60);
    for (name, r) in cases {
        let e = r?;
        pass &= e <= TOL;
        parts.push(format!("{name} {e:.1e}"));
    }
    Ok(outcome(
        pass,
        format!(
            "max rel. error over {INSTANCES} instances each: {}; {:.1}s",
            parts.join(", "),
            elapsed.as_secs_f64()
        ),
    ))
}

/// Tau-b from pair-by-pair counts.
fn brute_tau(a: &[f64], b: &[f64]) -> f64 {
    let (mut num, mut ta, mut tb, mut p) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            p += 1;
            let da = a[i].partial_cmp(&a[j]).unwrap();
            let db = b[i].partial_cmp(&b[j]).unwrap();
            use std::cmp::Ordering::Equal;
            if da == Equal {
                ta += 1;
            }
            if db == Equal {
                tb += 1;
            }
            if da != Equal && db != Equal {
                num += if da == db { 1 } else { -1 };
            }
        }
    }
    let denom = ((p - ta) as f64) * ((p - tb) as f64);
    if denom <= 0.0 {
        return 0.0;
    }
    (num as f64 / denom.sqrt()).clamp(-1.0, 1.0)
}

fn criterion_kendall() -> Res<Outcome> {
    let mut rng = Rng::new(11);
    let mut mismatches = 0;
    let mut with_ties = 0;
    for case in 0..1000 {
        let n = rng.inclusive(2, 200);
        let levels = [3, 10, 1000, usize::MAX][case % 4];
        let draw = |rng: &mut Rng| -> f64 {
            if levels == usize::MAX {
                rng.normal()
            } else {
                rng.below(levels) as f64
            }
        };
        let a: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let b: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        if levels < n {
            with_ties += 1;
        }
        if kendall_tau(&a, &b)?.to_bits() != brute_tau(&a, &b).to_bits() {
            mismatches += 1;
        }
    }
    let hand = kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0])?;
    Ok(outcome(
        mismatches == 0 && hand == 1.0 / 3.0,
        format!("{mismatches} mismatches in 1000 cases ({with_ties} with forced ties); [1,2,3] vs [1,3,2] = {hand}"),
    ))
}

fn criterion_quantization() -> Res<Outcome> {
    let corpus = generate_synth(&SynthConfig {
        items: 200,
        users: 100,
        seed: 21,
        ..SynthConfig::default()
    })?;
    let cfg = QuantizerConfig {
        codebook_size: PerModality::new(16, 16, 16),
        epochs: 2,
        ..QuantizerConfig::default()
    };
    let (model, _) = train_mm_rqvae(&corpus.tables, &cfg)?;
    let mut rng = Rng::new(22);
    let (mut choices, mut wrong, mut inexact) = (0, 0, 0);
    for _ in 0..100 {
        let item = rng.below(200);
        for m in Modality::ALL {
            let enc = encode_item(&model, m, corpus.tables[m].data.row(item))?;
            let mut residual = enc.z.clone();
            let mut sum = vec![0.0; residual.len()];
            for (l, cb) in model.branches[m].codebooks.iter().enumerate() {
                let mut best = (f64::INFINITY, 0);
                for k in 0..cb.codes.rows() {
                    let d: f64 = residual
                        .iter()
                        .zip(cb.codes.row(k))
                        .map(|(r, c)| (r - c) * (r - c))
                        .sum();
                    if d < best.0 {
                        best = (d, k);
                    }
                }
                choices += 1;
                wrong += usize::from(enc.sids[l] != best.1);
                let code = cb.codes.row(enc.sids[l]);
                residual.iter_mut().zip(code).for_each(|(r, c)| *r -= c);
                sum.iter_mut().zip(code).for_each(|(s, c)| *s += c);
            }
            inexact += usize::from(
                sum.iter()
                    .zip(&enc.zhat)
                    .any(|(a, b)| a.to_bits() != b.to_bits()),
            );
        }
    }
    Ok(outcome(
        wrong == 0 && inexact == 0,
        format!("{wrong} of {choices} level choices differ from exhaustive argmin; {inexact} of 300 ẑ not bit-equal to the code sum"),
    ))
}

fn criterion_rank_bound() -> Res<Outcome> {
    let mut rng = Rng::new(31);
    let mut violations = 0;
    let trials = 500;
    for _ in 0..trials {
        let rows = rng.inclusive(20, 60);
        let d = rng.inclusive(4, 24);
        let r = rng.inclusive(1, d.min(rows) - 1);
        let e = Matrix::randn(rows, r, 1.0, &mut rng).matmul(&Matrix::randn(r, d, 1.0, &mut rng));
        let d_out = rng.inclusive(4, 48);
        let w = Matrix::randn(d_out, d, 1.0, &mut rng);
        let b: Vec<f64> = (0..d_out).map(|_| rng.normal()).collect();
        let rep = rank_bound_check(&e, &w, &b, 1e-8)?;
        violations += usize::from(rep.lhs_rank > r + 1);
    }
    Ok(outcome(
        violations == 0,
        format!("{violations} violations of rank(W·E+b) <= r+1 in {trials} planted-rank trials"),
    ))
}

struct SeedRun {
    seed: u64,
    dir: PathBuf,
    cfg: RunConfig,
    elapsed: Duration,
    diag: DiagnoseSummary,
    rec: BTreeMap<String, RecSummary>,
}

fn run_seed(root: &Path, seed: u64) -> Res<SeedRun> {
    let dir = root.join(format!("seed{seed}"));
    let cfg = RunConfig {
        seed,
        out_dir: dir.clone(),
        ..RunConfig::default()
    }
    .resolve()?;
    let t = Instant::now();
    let sel = Selection::default();
    gen_data(&cfg)?;
    train_quantizer(&cfg, &sel)?;
    let rec = train_rec(&cfg, &sel)?
        .into_iter()
        .map(|r| (r.init.clone(), r))
        .collect();
    let diag = diagnose(&cfg, &sel)?;
    report(&dir)?;
    Ok(SeedRun {
        seed,
        dir,
        cfg,
        elapsed: t.elapsed(),
        diag,
        rec,
    })
}

fn criterion_collapse(run: &SeedRun) -> Res<Outcome> {
    let c = run
        .diag
        .collapse
        .as_ref()
        .ok_or("no collapse diagnostics")?;
    Ok(outcome(
        c.input_effective_rank > c.projection_effective_rank && run.elapsed <= BUDGET,
        format!(
            "effective rank: multimodal+SID input {} vs projection-only {} (of {}); full pipeline {:.0}s",
            c.input_effective_rank,
            c.projection_effective_rank,
            c.dimensions,
            run.elapsed.as_secs_f64()
        ),
    ))
}

fn directional(
    runs: &[SeedRun],
    pick: impl Fn(&SeedRun) -> Option<(f64, f64)>,
    names: (&str, &str),
) -> Res<Outcome> {
    let mut wins = 0;
    let mut parts = Vec::new();
    for r in runs {
        let (a, b) = pick(r).ok_or("missing tau")?;
        wins += usize::from(a > b);
        parts.push(format!("seed {}: {a:.3} vs {b:.3}", r.seed));
    }
    Ok(outcome(
        wins >= 4,
        format!(
            "{} > {} on {wins}/{} seeds ({})",
            names.0,
            names.1,
            runs.len(),
            parts.join("; ")
        ),
    ))
}

fn criterion_metrics() -> Res<Outcome> {
    let mut rng = Rng::new(41);
    let ks = [1, 3, 5];
    let mut mismatches = 0;
    let mut ndcg_above_hr = 0;
    for inst in 0..50 {
        let model = tiny_recommender(&mut rng, 2, TokenMode::Fused)?;
        let n = model.items();
        let examples: Vec<SplitExample> = (0..rng.inclusive(1, 6))
            .map(|u| SplitExample {
                user: u as u64,
                history: (0..rng.inclusive(1, 5)).map(|_| rng.below(n)).collect(),
                target: rng.below(n),
            })
            .collect();
        let got = evaluate(&model, &examples, &ks)?;
        let tables = model.inference_tables()?;
        let mut ranks = Vec::new();
        for ex in &examples {
            let o = model.hidden_state(&tables, &ex.history)?;
            let scores: Vec<f64> = (0..n)
                .map(|i| fused_score(&o, i, &model.head, &model.tokenizer, &model.catalog))
                .collect::<Result<_, _>>()?;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            ranks.push(order.iter().position(|&i| i == ex.target).unwrap() + 1);
        }
        // Tied scores on even instances: every rank comes from the id order.
        let tied: Vec<f64> = (0..n).map(|i| (i % 3) as f64).collect();
        let t = rng.below(n);
        let tie_rank = rank_of(&tied, t)?;
        let expected_tie_rank = 1
            + (0..n)
                .filter(|&i| tied[i] > tied[t] || (tied[i] == tied[t] && i < t))
                .count();
        mismatches += usize::from(inst % 2 == 0 && tie_rank != expected_tie_rank);
        let users = ranks.len() as f64;
        for &k in &ks {
            let hr = ranks.iter().filter(|&&r| r <= k).count() as f64 / users;
            let ndcg = ranks
                .iter()
                .filter(|&&r| r <= k)
                .map(|&r| 1.0 / ((r + 1) as f64).log2())
                .sum::<f64>()
                / users;
            let (ghr, gndcg) = (got.hr_at(k).unwrap(), got.ndcg_at(k).unwrap());
            mismatches += usize::from(ghr != hr || gndcg != ndcg);
            ndcg_above_hr += usize::from(gndcg > ghr);
        }
    }
    let single = metrics_from_ranks(
        vec![UserRank {
            user: 0,
            target: 0,
            rank: 3,
        }],
        &[5],
    )?;
    let n5 = single.ndcg_at(5).unwrap();
    Ok(outcome(
        mismatches == 0 && ndcg_above_hr == 0 && n5 == 0.5,
        format!("{mismatches} mismatches vs full-scan oracle on 50 instances; nDCG > HR {ndcg_above_hr} times; rank-3 nDCG@5 = {n5}"),
    ))
}

fn criterion_adapters(run: &SeedRun) -> Res<Outcome> {
    let layout = RunLayout::new(&run.dir);
    let corpus = load_corpus(&layout)?;
    let mut pass = true;
    let mut parts = Vec::new();
    for (init, summary) in &run.rec {
        let fresh = init_recommender(&layout, &run.cfg, &corpus, &summary.recon, init)?;
        let trained = load_recommender(&layout, &run.cfg, &corpus, init)?;
        let unchanged = fresh.base_checkpoint_bytes()? == trained.base_checkpoint_bytes()?;
        let adapters_moved = fresh.backbone.lora != trained.backbone.lora;
        pass &= unchanged && adapters_moved && summary.base_unchanged;
        parts.push(format!(
            "{init}: base bytes unchanged {unchanged}, adapters trained {adapters_moved}"
        ));
    }
    let p = run.rec.values().next().ok_or("no recommender run")?;
    Ok(outcome(
        pass,
        format!(
            "{}; trainable {} of {} backbone params ({:.2}%), {} of {} model params ({:.2}%)",
            parts.join("; "),
            p.params.backbone_trainable,
            p.params.backbone_total,
            100.0 * p.backbone_trainable_fraction,
            p.params.model_trainable,
            p.params.model_total,
            100.0 * p.model_trainable_fraction
        ),
    ))
}

fn criterion_learning(run: &SeedRun) -> Res<Outcome> {
    let r = run
        .rec
        .get("code-embeddings")
        .ok_or("no code-embeddings run")?;
    let hr = r.eval.hr_at(10).ok_or("no HR@10")?;
    let baseline = r.random_hr["10"];
    Ok(outcome(
        hr >= 5.0 * baseline && run.elapsed <= BUDGET,
        format!(
            "HR@10 {hr:.4} vs random {baseline:.4} ({:.1}x); pipeline {:.0}s",
            hr / baseline,
            run.elapsed.as_secs_f64()
        ),
    ))
}

fn mmq(args: &[&str]) -> Res<std::process::Output> {
    Ok(Command::new(env!("CARGO_BIN_EXE_mmq"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()?)
}

fn stage_checksums(dir: &Path) -> Res<BTreeMap<String, Vec<(PathBuf, String)>>> {
    let m = RunManifest::load(dir)?.ok_or("no manifest")?;
    Ok(m.stages
        .iter()
        .map(|(k, v)| (k.clone(), v.checksums()))
        .collect())
}

fn criterion_determinism(root: &Path) -> Res<Outcome> {
    let config = root.join("small.toml");
    std::fs::write(
        &config,
        "seed = 7\n[corpus.synthetic]\nitems = 150\nusers = 200\n[quantizer]\nepochs = 4\n[recommender]\nepochs = 1\n",
    )?;
    let config = config.to_str().ok_or("path")?;
    let (a, b) = (root.join("det_a"), root.join("det_b"));
    let (a_str, b_str) = (a.to_str().ok_or("path")?, b.to_str().ok_or("path")?);
    let commands = [
        "gen-data",
        "train-quantizer",
        "train-rec",
        "diagnose",
        "report",
    ];
    let mut differing = Vec::new();
    for cmd in commands {
        for out in [a_str, a_str, b_str] {
            let o = mmq(&[cmd, "--config", config, "--out", out])?;
            if !o.status.success() {
                return Err(
                    format!("mmq {cmd} failed: {}", String::from_utf8_lossy(&o.stderr)).into(),
                );
            }
            if out == a_str {
                // Compare the first and the repeated run in the same directory.
                let now = stage_checksums(&a)?;
                let key = now
                    .keys()
                    .filter(|k| k.starts_with(cmd))
                    .cloned()
                    .collect::<Vec<_>>();
                if key.is_empty() {
                    return Err(format!("no manifest record for {cmd}").into());
                }
                let path = root.join(format!("first_{cmd}.json"));
                let snapshot: Vec<_> = key.iter().map(|k| (k.clone(), now[k].clone())).collect();
                let text = format!("{snapshot:?}");
                if path.exists() {
                    if std::fs::read_to_string(&path)? != text {
                        differing.push(format!("{cmd} (repeat)"));
                    }
                } else {
                    std::fs::write(&path, text)?;
                }
            }
        }
    }
    let (ca, cb) = (stage_checksums(&a)?, stage_checksums(&b)?);
    for (stage, sums) in &ca {
        if cb.get(stage) != Some(sums) {
            differing.push(format!("{stage} (fresh directory)"));
        }
    }
    let files: usize = ca.values().map(Vec::len).sum();
    Ok(outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} subcommands repeated in place and in a fresh directory; {files} artifact checksums identical", commands.len())
        } else {
            format!("checksums differ for {}", differing.join(", "))
        },
    ))
}

fn main() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(usize, &str, Res<Outcome>)> = vec![
        (1, "gradient correctness", criterion_gradients()),
        (2, "kendall tau oracle", criterion_kendall()),
        (3, "quantization oracle", criterion_quantization()),
        (4, "rank bound", criterion_rank_bound()),
    ];
    let runs: Res<Vec<SeedRun>> = SEEDS.iter().map(|&s| run_seed(tmp.path(), s)).collect();
    match &runs {
        Ok(runs) => {
            results.push((
                5,
                "embedding collapse direction",
                criterion_collapse(&runs[0]),
            ));
            results.push((
                6,
                "mmd vs mse distance order",
                directional(
                    runs,
                    |r| {
                        Some((
                            *r.diag.quantized_tau.get("mmd")?,
                            *r.diag.quantized_tau.get("mse")?,
                        ))
                    },
                    ("tau(mmd)", "tau(mse)"),
                ),
            ));
            results.push((
                7,
                "sid init and forgetting",
                directional(
                    runs,
                    |r| {
                        Some((
                            *r.diag.sid_tau.get("code-embeddings")?,
                            *r.diag.sid_tau.get("random")?,
                        ))
                    },
                    ("tau(code-embeddings)", "tau(random)"),
                ),
            ));
        }
        Err(e) => {
            for (id, name) in [
                (5, "embedding collapse direction"),
                (6, "mmd vs mse distance order"),
                (7, "sid init and forgetting"),
            ] {
                results.push((id, name, Err(format!("pipeline failed: {e}").into())));
            }
        }
    }
    results.push((8, "ranking metric oracle", criterion_metrics()));
    match &runs {
        Ok(runs) => {
            results.push((9, "adapter contract", criterion_adapters(&runs[0])));
            results.push((10, "learning sanity", criterion_learning(&runs[0])));
        }
        Err(_) => {
            results.push((9, "adapter contract", Err("pipeline failed".into())));
            results.push((10, "learning sanity", Err("pipeline failed".into())));
        }
    }
    results.push((11, "cli determinism", criterion_determinism(tmp.path())));

    let mut unexpected = Vec::new();
    let mut passed = 0;
    for (id, name, r) in &results {
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        let tag = match (pass, KNOWN_FAILURES.contains(id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        passed += usize::from(pass);
        if !pass && !KNOWN_FAILURES.contains(id) {
            unexpected.push(*id);
        }
        println!("criterion {id:>2} {tag:<12} {name}: {detail}");
    }
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0}s; unexpected failures: {:?}",
        results.len(),
        start.elapsed().as_secs_f64(),
        unexpected
    );
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}

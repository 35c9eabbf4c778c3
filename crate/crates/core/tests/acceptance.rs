//! One PASS/FAIL line per acceptance criterion. Runs as a plain binary so
//! the lines are never captured; exits non-zero if any criterion fails.

use dart_core::data::{make_splits, Sample, SplitCounts, Splits};
use dart_core::downstream::anomaly::AnomalyModel;
use dart_core::downstream::embed::EmbeddingStore;
use dart_core::downstream::fewshot::SupportPolicy;
use dart_core::downstream::heads::HeadConfig;
use dart_core::downstream::tasks;
use dart_core::hd_mask::{build_mask_plan, MaskConfig};
use dart_core::loss::{focal_loss, infonce_pairs, recon_loss, severity_infonce, total_loss, type_orthogonality, LossConfig, PairSets};
use dart_core::model::{default_vocabulary, Ablation, Dart, GateMode};
use dart_core::persist::Checkpoint;
use dart_core::taxonomy::{DamageLabel, NUM_CLASSES};
use dart_core::tensor::{GradCheckOptions, Graph, Tensor};
use dart_core::train::ablate::{evaluate_model, run_one, summarize, AblationRun, ABLATION_SEEDS};
use dart_core::train::gradcheck::objective_gradient_check;
use dart_core::train::{run_curriculum, TrainConfig};
use dart_core::vision::ema_update;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn lab(c: usize) -> DamageLabel {
    DamageLabel::from_class(c).unwrap()
}

fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), d).unwrap()
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for seed in [1, 2, 3] {
        let opts = GradCheckOptions {
            step: 1e-5,
            max_coords: 3,
            seed,
        };
        let r = objective_gradient_check(seed, &opts).unwrap();
        worst = worst.max(r.max_rel_error);
        coords += r.coords_checked;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 300.0,
        format!("max rel error {worst:.2e} over {coords} coordinates, 3 seeds, {secs:.0}s"),
    )
}

fn ema_law() -> Outcome {
    let cfg = TrainConfig::toy();
    let mut m = Dart::<f64>::new(cfg.model_config(), default_vocabulary(), 7);
    let ids = m.vision_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &id in &ids {
        let shape = m.ema.value(id).shape().to_vec();
        m.ema.set_value(id, Tensor::randn(shape, 1.0, &mut rng)).unwrap();
    }
    let dist = |m: &Dart<f64>| -> f64 {
        ids.iter()
            .flat_map(|&id| m.ema.value(id).data().iter().zip(m.params.value(id).data()).map(|(a, b)| (a - b) * (a - b)))
            .sum::<f64>()
            .sqrt()
    };
    let mut prev = dist(&m);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        ema_update(&mut m.ema, &m.params, &ids, 0.996).unwrap();
        let d = dist(&m);
        worst = worst.max((d / prev - 0.996).abs());
        prev = d;
    }
    outcome(worst <= 1e-12, format!("max |ratio - 0.996| = {worst:.1e} over 100 steps"))
}

fn mask_statistics() -> Outcome {
    let sal: Vec<f64> = (0..64).map(|i| i as f64 / 63.0).collect();
    let cfg = MaskConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut dm, mut dn, mut bm, mut bn) = (0usize, 0usize, 0usize, 0usize);
    let mut min_visible = usize::MAX;
    for _ in 0..10_000 {
        let plan = build_mask_plan(&sal, &cfg, &mut rng).unwrap();
        min_visible = min_visible.min(plan.context.len());
        let masked: std::collections::HashSet<usize> = plan.target.iter().copied().collect();
        for (i, &d) in plan.dense.iter().enumerate() {
            let hit = usize::from(masked.contains(&i));
            if d {
                dm += hit;
                dn += 1;
            } else {
                bm += hit;
                bn += 1;
            }
        }
    }
    let (dr, br) = (dm as f64 / dn as f64, bm as f64 / bn as f64);
    outcome(
        (0.68..=0.72).contains(&dr) && (0.28..=0.32).contains(&br) && min_visible >= 10,
        format!("dense {dr:.4}, background {br:.4}, min visible {min_visible}"),
    )
}

fn brute_pairs(labels: &[DamageLabel]) -> Vec<PairSets> {
    (0..labels.len())
        .map(|i| {
            let others = (0..labels.len()).filter(|&j| j != i);
            PairSets {
                positives: others
                    .clone()
                    .filter(|&j| labels[i].damage_type == labels[j].damage_type && labels[i].severity != labels[j].severity)
                    .collect(),
                negatives: others.filter(|&j| labels[i].damage_type != labels[j].damage_type).collect(),
            }
        })
        .collect()
}

fn infonce_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=12);
        let labels: Vec<_> = (0..n).map(|_| lab(rng.random_range(0..NUM_CLASSES))).collect();
        mismatches += usize::from(infonce_pairs(&labels) != brute_pairs(&labels));
    }
    let g = Graph::<f64>::new();
    // Chafing/Low with Chafing/High, orthogonal: positive only, loss 0.
    let a = severity_infonce(g.constant(t(&[2, 3], &[1., 0., 0., 0., 1., 0.])), &[lab(0), lab(2)], 0.07).unwrap().item();
    // Two Chafing anchors with one CutStrands negative, all orthogonal: log 2.
    let b = severity_infonce(g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.])), &[lab(0), lab(2), lab(3)], 0.07)
        .unwrap()
        .item();
    // No anchor has a positive: loss 0.
    let c = severity_infonce(g.constant(t(&[3, 2], &[1., 0., 0., 1., 1., 1.])), &[lab(1), lab(1), lab(1)], 0.07).unwrap().item();
    let errs = [a.abs(), (b - 2f64.ln()).abs(), c.abs()];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    outcome(
        mismatches == 0 && worst < 1e-9,
        format!("{mismatches} set mismatches in 1000 batches; closed forms within {worst:.1e}"),
    )
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Graph::<f64>::new();
    let z = g.constant(Tensor::randn(vec![6, 8], 1.0, &mut rng));
    let recon = recon_loss(z, z, None, 1.0).unwrap().item();
    // Two types, rows constant within type, centroids orthonormal.
    let p = g.constant(t(&[4, 3], &[2., 0., 0., 0.5, 0., 0., 0., 3., 0., 0., 1., 0.]));
    let orth = type_orthogonality(p, &[lab(0), lab(1), lab(3), lab(5)], 0.5).unwrap().item();
    let logits = Tensor::randn(vec![6, NUM_CLASSES], 2.0, &mut rng);
    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..NUM_CLASSES)).collect();
    let focal = focal_loss(g.constant(logits.clone()), &labels, &[1.0; NUM_CLASSES], 0.0).unwrap().item();
    let ce = (0..6)
        .map(|i| {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() - row[labels[i]]
        })
        .sum::<f64>()
        / 6.0;
    let one = || Some(g.constant(Tensor::scalar(1.0)));
    let total = total_loss(&g, [one(), one(), one(), one()], LossConfig::default().lambdas).unwrap().1.total;
    let pass = recon == 0.0 && orth.abs() < 1e-12 && (focal - ce).abs() < 1e-12 && (total - 2.8).abs() < 1e-12;
    outcome(
        pass,
        format!("recon {recon:.1e}, orth {orth:.1e}, |focal - CE| {:.1e}, total {total}", (focal - ce).abs()),
    )
}

/// The trained E1 model and everything derived from it.
struct E1 {
    cfg: TrainConfig,
    splits: Splits,
    model: Dart<f64>,
    best_epoch: usize,
    store: EmbeddingStore,
    seconds: f64,
}

fn train_e1() -> E1 {
    let cfg = TrainConfig::default();
    let splits = make_splits(&SplitCounts::default(), cfg.seed).unwrap();
    let start = Instant::now();
    let cur = run_curriculum::<f64>(&cfg, &splits, |_| {}).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let store = EmbeddingStore::extract(&cur.best, &splits, GateMode::Predicted, cfg.eval_batch).unwrap();
    E1 {
        cfg,
        splits,
        model: cur.best,
        best_epoch: cur.best_epoch,
        store,
        seconds,
    }
}

fn end_to_end(e1: &E1) -> Outcome {
    let test = evaluate_model(&e1.model, &e1.splits.test, &e1.splits.norm, &e1.cfg).unwrap();
    outcome(
        test.accuracy >= 0.85 && test.macro_f1 >= 0.80 && e1.seconds < 1800.0,
        format!("test accuracy {:.4}, macro-F1 {:.4}, {:.0}s", test.accuracy, test.macro_f1, e1.seconds),
    )
}

fn severity(e1: &E1) -> Outcome {
    let m = tasks::severity_regress(&e1.store, &HeadConfig::regressor(e1.cfg.seed)).unwrap().test;
    outcome(
        m.spearman_defined && m.spearman >= 0.80 && m.within_one >= 0.95,
        format!("Spearman {:.4}, within-1 {:.4}", m.spearman, m.within_one),
    )
}

fn fewshot(e1: &E1) -> Outcome {
    let rows = tasks::fewshot(&e1.store, &[1, 5, 10, 20], 100, e1.cfg.seed, SupportPolicy::Cap).unwrap();
    let f1: Vec<f64> = rows.iter().map(|r| r.mean_macro_f1).collect();
    let full = tasks::train_classifier_head(&e1.store, &HeadConfig::classifier(e1.cfg.seed)).unwrap().test.macro_f1;
    let monotone = f1.windows(2).all(|w| w[1] >= w[0]);
    let gap = full - f1[3];
    let shown: Vec<String> = f1.iter().map(|v| format!("{v:.4}")).collect();
    outcome(
        monotone && gap <= 0.10,
        format!("macro-F1 at k=1,5,10,20: {}; full head {full:.4}", shown.join(", ")),
    )
}

fn geometry(e1: &E1) -> Outcome {
    let sev = tasks::severity_regress(&e1.store, &HeadConfig::regressor(e1.cfg.seed)).unwrap();
    let g = tasks::geometry(&e1.store, &sev.head, 7, 12).unwrap();
    let mid = g.interpolations.iter().map(|i| i.midpoint_distance).sum::<f64>() / g.interpolations.len() as f64;
    outcome(
        g.monotone_rate() >= 0.80 && g.cross_type_rate() >= 0.60,
        format!(
            "monotone rate {:.4}, cross-type top-3 {:.4}, midpoint-to-Medium cosine distance {mid:.4}",
            g.monotone_rate(),
            g.cross_type_rate()
        ),
    )
}

fn anomaly(e1: &E1) -> Outcome {
    let noise = tasks::noise_embeddings(&e1.model, &e1.splits.norm, &e1.store, 120, 7, GateMode::Predicted).unwrap();
    let (_, m) = tasks::anomaly(&e1.store, &noise).unwrap();
    // Affine invariance of the unshrunk distance on the trained embeddings.
    let train = e1.store.split(dart_core::data::Split::Train);
    let x = EmbeddingStore::matrix(&train);
    let y = EmbeddingStore::labels(&train);
    let d = x[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = DMatrix::from_fn(d, d, |i, j| rng.random_range(-0.3..0.3) + if i == j { 1.5 } else { 0.0 });
    let b = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
    let map = |r: &Vec<f64>| -> Vec<f64> { (&a * DVector::from_column_slice(r) + &b).iter().copied().collect() };
    let xt: Vec<Vec<f64>> = x.iter().map(map).collect();
    let m1 = AnomalyModel::fit_with(&x, &y, 0.0, 0.95).unwrap();
    let m2 = AnomalyModel::fit_with(&xt, &y, 0.0, 0.95).unwrap();
    let test = EmbeddingStore::matrix(&e1.store.split(dart_core::data::Split::Test));
    let drift = test
        .iter()
        .map(|r| (m1.score(r).unwrap().score - m2.score(&map(r)).unwrap().score).abs())
        .fold(0.0, f64::max);
    outcome(
        (m.train_flag_rate - 0.05).abs() <= 0.005 && m.auroc > 0.9 && drift < 1e-8,
        format!(
            "train flag rate {:.4}, noise AUROC {:.4}, affine drift {drift:.1e}",
            m.train_flag_rate, m.auroc
        ),
    )
}

fn reproducibility(e1: &E1) -> Outcome {
    let cfg = TrainConfig {
        phase1_epochs: 1,
        phase2_epochs: 1,
        ..TrainConfig::toy()
    };
    let splits = make_splits(&SplitCounts::default().scaled(0.1), 9).unwrap();
    let curve = || -> Vec<u64> {
        run_curriculum::<f64>(&cfg, &splits, |_| {}).unwrap().log.iter().map(|r| r.loss.total.to_bits()).collect()
    };
    let (c1, c2) = (curve(), curve());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e1.ckpt");
    Checkpoint::of_model(&e1.model, &e1.cfg, e1.splits.norm, &e1.splits.class_weights, 2, &[]).save(&path).unwrap();
    let restored = Checkpoint::load(&path).unwrap().model::<f64>().unwrap();
    let probe: Vec<&Sample> = e1.splits.test.samples.iter().take(16).collect();
    let before = e1.model.infer_samples(&probe, &e1.splits.norm, GateMode::Predicted, 8).unwrap();
    let after = restored.infer_samples(&probe, &e1.splits.norm, GateMode::Predicted, 8).unwrap();
    let max_delta = before
        .logits
        .iter()
        .flatten()
        .zip(after.logits.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    outcome(
        c1 == c2 && max_delta == 0.0,
        format!("{} loss values bitwise equal: {}; probe logits max |delta| {max_delta:e}", c1.len(), c1 == c2),
    )
}

/// Full curriculum for E1, E2, E4 and E6 under each seed; E1 with the
/// default seed is the model trained above.
fn ablation_direction(e1: &E1) -> Outcome {
    let test = evaluate_model(&e1.model, &e1.splits.test, &e1.splits.norm, &e1.cfg).unwrap();
    let mut runs = Vec::new();
    for a in [Ablation::E1, Ablation::E2, Ablation::E4, Ablation::E6] {
        for seed in ABLATION_SEEDS {
            runs.push(if a == Ablation::E1 && seed == e1.cfg.seed {
                AblationRun {
                    ablation: a.tag().to_string(),
                    seed,
                    best_epoch: e1.best_epoch,
                    accuracy: test.accuracy,
                    macro_f1: test.macro_f1,
                    weighted_f1: test.weighted_f1,
                }
            } else {
                run_one::<f64>(&e1.cfg, &e1.splits, a, seed).unwrap()
            });
        }
    }
    let table = summarize(runs);
    print!("{}", table.render());
    let row = |a| table.row(a).unwrap().accuracy;
    let (e1, e2, e4, e6) = (row(Ablation::E1), row(Ablation::E2), row(Ablation::E4), row(Ablation::E6));
    // A difference within one standard error of the difference counts as a tie.
    let se = |(_, s1): (f64, f64), (_, s2): (f64, f64)| ((s1 * s1 + s2 * s2) / ABLATION_SEEDS.len() as f64).sqrt();
    let at_least = |a: (f64, f64), b: (f64, f64)| a.0 >= b.0 - se(a, b);
    let tie = |a: (f64, f64), b: (f64, f64)| if a.0 >= b.0 { "" } else { " (tie within noise)" };
    let gap = e1.0 - e4.0;
    let pct = |(m, s): (f64, f64)| format!("{:.1}±{:.1}", 100.0 * m, 100.0 * s);
    outcome(
        gap >= 0.10 && at_least(e1, e2) && at_least(e1, e6),
        format!(
            "accuracy E1 {} E2 {}{} E4 {} E6 {}{}; E1-E4 gap {:.1} pp",
            pct(e1),
            pct(e2),
            tie(e1, e2),
            pct(e4),
            pct(e6),
            tie(e1, e6),
            100.0 * gap
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("{} criterion {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    };
    report(1, "gradient fidelity", gradient_fidelity());
    report(2, "EMA law", ema_law());
    report(3, "mask statistics", mask_statistics());
    report(4, "InfoNCE oracle", infonce_oracle());
    report(5, "loss identities", loss_identities());
    let e1 = train_e1();
    report(6, "end-to-end learning", end_to_end(&e1));
    report(7, "ablation direction", ablation_direction(&e1));
    report(8, "severity regression", severity(&e1));
    report(9, "few-shot trend", fewshot(&e1));
    report(10, "geometry", geometry(&e1));
    report(11, "anomaly", anomaly(&e1));
    report(12, "reproducibility", reproducibility(&e1));
    println!("{} of 12 criteria passed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

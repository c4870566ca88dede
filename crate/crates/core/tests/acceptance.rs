//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rsknet::accounting::{count_params, dsc_ratio, reference_table, table_gaps, Convention};
use rsknet::backbone::{ModelConfig, Network, MIN_FRAMES};
use rsknet::checkpoint::{network_from_container, network_to_container, Container};
use rsknet::corpus::{gen_toy_corpus, ToyConfig, ToyCorpus};
use rsknet::frontend::{FeatureConfig, Frontend};
use rsknet::gradsuite::{run_suite, GRAD_TOL};
use rsknet::head::{AmSoftmax, HeadKind};
use rsknet::kernels::conv::ConvSpec;
use rsknet::layers::ConvKind;
use rsknet::param::Module;
use rsknet::pipeline::{centering_mean, embed_all, embed_utterance, parallel_map, score_trials};
use rsknet::pooling::{pool, PoolKind};
use rsknet::scoring::{compute_eer, compute_min_dcf, det_points, DcfParams, Trial};
use rsknet::sk::attention_weights;
use rsknet::train::{Example, TrainConfig, Trainer};
use rsknet::Tensor3;

use common::*;

const PARAM_TOL: f64 = 0.05;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const TOY_BUDGET: Duration = Duration::from_secs(600);
const TOY_EER: f64 = 5.0;
const TOY_LOSS_RATIO: f64 = 0.1;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn param_table() -> Outcome {
    let rows: Vec<_> = reference_table().into_iter().map(|r| {
        let t = count_params(&r.config).unwrap().totals;
        (r, t)
    }).collect();
    let score = |c: Convention| {
        let gaps = table_gaps(&rows, c);
        let within = gaps.iter().filter(|g| g.abs() <= PARAM_TOL).count();
        (within, gaps)
    };
    let spread = |c: Convention| table_gaps(&rows, c).iter().map(|g| g.abs()).sum::<f64>();
    let best = Convention::ALL
        .into_iter()
        .max_by(|&a, &b| score(a).0.cmp(&score(b).0).then(spread(b).total_cmp(&spread(a))))
        .unwrap();
    let (within, gaps) = score(best);
    let listing: Vec<String> = rows
        .iter()
        .zip(&gaps)
        .map(|((r, t), g)| format!("{} {:.2}M/{}M ({:+.1}%)", r.name, t.get(best) as f64 / 1e6, r.millions, 100.0 * g))
        .collect();
    check(within == rows.len(), format!("{} convention, {within}/{} within 5%: {}", best.label(), rows.len(), listing.join(", ")))
}

fn savings_and_ratio() -> Outcome {
    let base = ModelConfig::rsknet_mtsp();
    let full = count_params(&base).unwrap();
    let (m, n) = (base.pooled_dim(), base.embed_dim);
    for p in [100, 150, 200] {
        let low = count_params(&ModelConfig { head: HeadKind::LowRank(p), ..base.clone() }).unwrap();
        let saved = full.count_under("head.") as i64 - low.count_under("head.") as i64;
        let total_saved = full.totals.core as i64 - low.totals.core as i64;
        let expect = (m * n) as i64 - (p * (m + n)) as i64;
        if saved != expect || total_saved != expect {
            return Err(format!("p={p}: saved {saved} (model {total_saved}), expected {expect}"));
        }
    }
    let dsc = count_params(&ModelConfig { conv_kind: ConvKind::DepthwiseSeparable, ..base.clone() }).unwrap();
    let dsc_counts: HashMap<&str, usize> = dsc.rows.iter().map(|r| (r.path.as_str(), r.count)).collect();
    let mut layers = 0;
    for r in &full.rows {
        let Some(prefix) = r.path.strip_suffix(".conv.weight") else { continue };
        let (Some(dw), Some(pw)) = (
            dsc_counts.get(format!("{prefix}.conv.dw.weight").as_str()),
            dsc_counts.get(format!("{prefix}.conv.pw.weight").as_str()),
        ) else {
            continue;
        };
        let [_, j, k, i, o] = r.shape[..] else { return Err(format!("{}: unexpected shape {:?}", r.path, r.shape)) };
        let measured = Ratio::new((dw + pw) as u64, r.count as u64);
        let law = dsc_ratio(j as u64, k as u64, i as u64, o as u64).unwrap();
        if measured != law {
            return Err(format!("{prefix}: measured {measured}, law {law}"));
        }
        layers += 1;
    }
    check(layers > 0, format!("savings exact for p in 100/150/200; separable ratio exact on {layers} layers"))
}

fn pooled_dims() -> Outcome {
    let mut found = Vec::new();
    for (cfg, want) in [(ModelConfig::rsknet_mtsp(), 10240), (ModelConfig::resnet34_sp(), 2560)] {
        let net = Network::<f32>::new(ModelConfig { num_classes: 4, ..cfg.clone() }, 0).unwrap();
        let out = net.forward_features(&Tensor3::zeros(MIN_FRAMES, cfg.freq_bins, 1)).unwrap();
        let len = pool(cfg.pooling, &out.stages).unwrap().len();
        if len != want || cfg.pooled_dim() != want || net.head.in_dim() != want {
            return Err(format!("{}: pooled {len}, declared {}, expected {want}", cfg.pooling, cfg.pooled_dim()));
        }
        found.push(format!("{} {len}", cfg.pooling));
    }
    Ok(found.join(", "))
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let results = run_suite(7).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    let worst = results.iter().max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error)).unwrap();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    check(
        failed.is_empty() && elapsed < GRAD_BUDGET,
        format!(
            "{} layer cases, worst {} at {:.2e} (tol {GRAD_TOL:.0e}), failed {failed:?}, {:.2}s",
            results.len(),
            worst.name,
            worst.report.max_rel_error,
            elapsed.as_secs_f64()
        ),
    )
}

fn invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut attn = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..64);
        let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(-700.0..700.0)).collect();
        let beta: Vec<f64> = (0..n).map(|_| rng.random_range(-700.0..700.0)).collect();
        let (a, b) = attention_weights(&alpha, &beta);
        attn = a.iter().zip(&b).map(|(x, y)| (x + y - 1.0).abs()).fold(attn, f64::max);
    }
    let mut pooling = 0.0f64;
    for _ in 0..20 {
        let t = rng.random_range(2..40);
        let xs = random_stages(&mut rng, t);
        let shuffled = shuffle_frames(&xs, &mut rng);
        for kind in [PoolKind::Mtsp, PoolKind::Sp, PoolKind::Gap] {
            let (a, b) = (pool(kind, &xs).unwrap(), pool(kind, &shuffled).unwrap());
            pooling = a.data.iter().zip(&b.data).map(|(u, v)| (u - v).abs() / (1.0 + u.abs())).fold(pooling, f64::max);
        }
    }
    let mut am = 0.0f64;
    for _ in 0..50 {
        let head = AmSoftmax::<f64>::new(6, 5, 30.0, 0.2, &mut rng).unwrap();
        let emb: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled: Vec<f64> = emb.iter().map(|v| v * k).collect();
        let (l1, l2) = (head.loss(&emb, &[0, 4, 2]).unwrap(), head.loss(&scaled, &[0, 4, 2]).unwrap());
        am = am.max((l1 - l2).abs() / l1.abs().max(1.0));
    }
    let params = DcfParams::default();
    let mut monotone = true;
    let mut det = true;
    for _ in 0..30 {
        let n = rng.random_range(2..800);
        let (scores, labels) = grid_trials(&mut rng, n);
        let eer = compute_eer(&scores, &labels).unwrap();
        let dcf = compute_min_dcf(&scores, &labels, &params).unwrap();
        for (_, g) in MONOTONE_MAPS {
            let mapped: Vec<f64> = scores.iter().map(|&s| g(s)).collect();
            monotone &= compute_eer(&mapped, &labels).unwrap() == eer;
            monotone &= compute_min_dcf(&mapped, &labels, &params).unwrap() == dcf;
        }
        let points = det_points(&scores, &labels).unwrap();
        det &= points.windows(2).all(|w| w[0].threshold < w[1].threshold && w[1].p_fa <= w[0].p_fa && w[1].p_fr >= w[0].p_fr);
    }
    check(
        attn <= 1e-12 && pooling <= 1e-12 && am <= 1e-6 && monotone && det,
        format!("|a+b-1| {attn:.1e}, shuffle {pooling:.1e}, am scale {am:.1e}, metrics monotone-invariant {monotone}, det monotone {det}"),
    )
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let params = [DcfParams::default(), DcfParams { c_fr: 10.0, c_fa: 1.0, p_target: 0.05 }];
    let sets = 120;
    let mut largest = 0;
    for case in 0..sets {
        let (scores, labels) = random_trials(&mut rng);
        largest = largest.max(scores.len());
        let p = &params[case % 2];
        let (eer, dcf) = brute_force(&scores, &labels, p);
        if compute_eer(&scores, &labels).unwrap() != eer || compute_min_dcf(&scores, &labels, p).unwrap() != dcf {
            return Err(format!("trial set {case} (n={}) differs from the threshold sweep", scores.len()));
        }
    }
    let mut gap = 0.0f64;
    let mut convs = 0;
    for _ in 0..300 {
        let (t, f, spec) = random_conv(&mut rng);
        gap = gap.max(conv_gap(t, f, &spec, &mut rng));
        convs += 1;
    }
    for (groups, stride, dilation) in [(1, 1, 1), (1, 2, 1), (1, 1, 2), (2, 1, 1), (8, 1, 1)] {
        gap = gap.max(conv_gap(16, 16, &ConvSpec::new(3, 8, 8, stride, dilation, groups).unwrap(), &mut rng));
        convs += 1;
    }
    check(gap <= 1e-12, format!("{sets} trial sets (n up to {largest}) exact; {convs} convolutions up to 16x16x8, max gap {gap:.1e}"))
}

fn features(corpus: &ToyCorpus, heldout: bool) -> Vec<Example> {
    let fe = Frontend::new(&FeatureConfig::default()).unwrap();
    let utts: Vec<_> = corpus.train().chain(corpus.heldout()).filter(|u| u.heldout == heldout).collect();
    parallel_map(&utts, 1, |u| {
        Ok(Example { id: u.id.clone(), label: u.speaker, features: fe.process(&corpus.synthesize(u)?)? })
    })
    .unwrap()
}

fn toy_run() -> Outcome {
    let t0 = Instant::now();
    let corpus = gen_toy_corpus(&ToyConfig::default()).unwrap();
    let train = features(&corpus, false);
    let heldout = features(&corpus, true);
    let model = ModelConfig { stage_widths: [8, 16, 32, 64], num_classes: 20, am_scale: 30.0, am_margin: 0.2, ..ModelConfig::rsknet_mtsp() };
    let cfg = TrainConfig { batch_size: 8, crop_frames: 48, lr_init: 0.05, max_epochs: 10, seed: 1, ..TrainConfig::default() };
    let mut trainer = Trainer::new(Network::new(model, 1).unwrap(), cfg).unwrap();
    trainer.run(&train, None, |_| {}).map_err(|e| e.to_string())?;
    let history = &trainer.state.loss_history;
    let (first, last) = (history[0], *history.last().unwrap());

    let net = &trainer.net;
    let mut embs = HashMap::new();
    for e in &heldout {
        let v = embed_utterance(net, &e.features).unwrap();
        embs.insert(e.id.clone(), v.iter().map(|&x| x as f64).collect::<Vec<f64>>());
    }
    let mut per_speaker = [0usize; 20];
    let subset: Vec<_> = train
        .iter()
        .filter(|e| {
            per_speaker[e.label] += 1;
            per_speaker[e.label] <= 10
        })
        .map(|e| e.features.clone())
        .collect();
    let mean = centering_mean(&embed_all(net, &subset, 1).unwrap()).unwrap();
    let trials: Vec<Trial> =
        corpus.trials().unwrap().into_iter().map(|(enroll, test, target)| Trial { enroll, test, target }).collect();
    let scores = score_trials(&embs, &trials, Some(&mean), 1).unwrap();
    let s: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = trials.iter().map(|t| t.target).collect();
    let eer = compute_eer(&s, &labels).unwrap();
    let elapsed = t0.elapsed();
    check(
        last < TOY_LOSS_RATIO * first && eer < TOY_EER && elapsed < TOY_BUDGET,
        format!(
            "{} epochs, loss {first:.3} -> {last:.4} ({:.1}%), EER {eer:.2}% on {} trials, {:.0}s",
            history.len(),
            100.0 * last / first,
            trials.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn bytes(c: &Container) -> Vec<u8> {
    let mut out = Vec::new();
    c.write_to(&mut out).unwrap();
    out
}

fn param_bits(net: &Network<f32>) -> Vec<u32> {
    let mut v = Vec::new();
    net.visit("", &mut |_, p| v.extend(p.value.iter().map(|x| x.to_bits())));
    v
}

fn determinism() -> Outcome {
    let corpus = gen_toy_corpus(&ToyConfig {
        n_speakers: 4,
        utts_per_speaker: 6,
        heldout_per_speaker: 2,
        n_trials: 10,
        min_secs: 0.8,
        max_secs: 1.5,
        ..ToyConfig::default()
    })
    .unwrap();
    let train = features(&corpus, false);
    let heldout = features(&corpus, true);
    if features(&corpus, false).iter().zip(&train).any(|(a, b)| a.features != b.features) {
        return Err("feature extraction differs between runs".into());
    }
    let model = ModelConfig { stage_depths: [1, 1, 1, 1], stage_widths: [4, 8, 16, 32], embed_dim: 32, num_classes: 4, ..ModelConfig::rsknet_mtsp() };
    let cfg = TrainConfig { batch_size: 4, crop_frames: 32, lr_init: 0.05, max_epochs: 2, seed: 5, ..TrainConfig::default() };
    let run = || {
        let mut t = Trainer::new(Network::new(model.clone(), 5).unwrap(), cfg.clone()).unwrap();
        t.run(&train, None, |_| {}).unwrap();
        t
    };
    let (a, b) = (run(), run());
    if bytes(&a.to_container()) != bytes(&b.to_container()) {
        return Err("two seeded training runs produced different checkpoints".into());
    }
    let feats: Vec<_> = heldout.iter().map(|e| e.features.clone()).collect();
    let bits = |w| embed_all(&a.net, &feats, w).unwrap().into_iter().flatten().map(f32::to_bits).collect::<Vec<_>>();
    let e1 = bits(1);
    if e1 != bits(1) || e1 != bits(3) {
        return Err("extraction is not bit-identical across runs and worker counts".into());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let c = network_to_container(&a.net);
    c.save(&path).unwrap();
    let loaded = Container::load(&path).unwrap();
    let back: Network<f32> = network_from_container(&loaded).unwrap();
    let resumed = Trainer::from_container(&Container::load(&{
        let p = dir.path().join("t.ckpt");
        a.to_container().save(&p).unwrap();
        p
    }).unwrap())
    .unwrap();
    let exact = bytes(&loaded) == bytes(&c)
        && param_bits(&back) == param_bits(&a.net)
        && bytes(&resumed.to_container()) == bytes(&a.to_container());
    check(exact, format!("training, extraction (1 and 3 workers) and checkpoint round-trip bit-identical, {} embedding values", e1.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("parameter table", param_table),
        ("low-rank savings and separable ratio", savings_and_ratio),
        ("pooled dimensions", pooled_dims),
        ("gradient suite", gradients),
        ("invariants", invariants),
        ("oracle equivalence", oracles),
        ("toy end-to-end run", toy_run),
        ("determinism", determinism),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failures = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(d) => println!("PASS {} {name}: {d}", i + 1),
            Err(d) => {
                failures += 1;
                println!("FAIL {} {name}: {d}", i + 1)
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}

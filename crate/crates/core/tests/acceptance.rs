//! Acceptance suite: every criterion runs in one test and prints a PASS/FAIL
//! line, then the test fails if any criterion did.

mod common;

use std::time::{Duration, Instant};

use damr::embed::{Embedder, Embedding, StubMode};
use damr::evaluator::train::batch_loss;
use damr::evaluator::{
    bpr_loss, forward, load_checkpoint, loss_and_grads, pretrain, ranking_accuracy, save_checkpoint, score,
    score_batch, MiningConfig, ScorerDims, ScorerParams, SeqBatch, TrainConfig, TrainTriplet,
};
use damr::harness::{self, EvalConfig, PlannerSetup, SynthSpec};
use damr::mcts::{backpropagate, sample_pseudo_pairs, search, uct, BackpropMode, SearchConfig, SearchTree};
use damr::planner::{OraclePlanner, Planner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn within(label: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{label}: got {got}, expected {want}"))
    }
}

fn in_time(start: Instant, limit: Duration, detail: String) -> Verdict {
    let t = start.elapsed();
    if t <= limit {
        Ok(format!("{detail}; {:.1}s", t.as_secs_f64()))
    } else {
        Err(format!(
            "{detail}; took {:.1}s, limit {}s",
            t.as_secs_f64(),
            limit.as_secs()
        ))
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn embedding(rng: &mut ChaCha8Rng, n: usize) -> Embedding {
    Embedding::new(random_vec(rng, n)).unwrap()
}

/// Small scorer with every tensor (gains and biases included) randomized.
fn random_scorer(rng: &mut ChaCha8Rng, d_in: usize) -> ScorerParams {
    let dims = ScorerDims {
        d_in,
        d_model: 8,
        layers: 2,
        heads: 2,
        d_ff: 16,
        max_len: 6,
    };
    let mut p = ScorerParams::init(dims, rng.gen()).unwrap();
    for t in p.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
    p
}

fn tally(count: &mut usize, r: Result<(), String>) -> Result<(), String> {
    *count += 1;
    r
}

// 1 -------------------------------------------------------------------------

fn equation_suite() -> Verdict {
    let start = Instant::now();
    let mut checks = 0;

    tally(
        &mut checks,
        within(
            "uct",
            uct(1.0, 1, 2, 1.0, BackpropMode::ClassicSum),
            1.0 + 2f64.ln().sqrt(),
            1e-9,
        ),
    )?;
    tally(
        &mut checks,
        within(
            "uct avg",
            uct(0.25, 4, 9, 0.5, BackpropMode::LiteralAvg),
            0.25 + 0.5 * (9f64.ln() / 4.0).sqrt(),
            1e-9,
        ),
    )?;

    let neg_log_sigmoid = |x: f64| -(1.0 / (1.0 + (-x).exp())).ln();
    tally(
        &mut checks,
        within("loss at equality", bpr_loss(0.7, 0.7), 2f64.ln(), 1e-9),
    )?;
    tally(
        &mut checks,
        within("loss +10", bpr_loss(10.0, 0.0), neg_log_sigmoid(10.0), 1e-9),
    )?;
    tally(
        &mut checks,
        within("loss -10", bpr_loss(0.0, 10.0), neg_log_sigmoid(-10.0), 1e-9),
    )?;

    // Parent with children (n=1, mean 0.2) and (n=3, mean 0.6).
    let e = damr::kg::EntityId;
    let r = damr::kg::RelationId(0);
    let mut tree = SearchTree::new(&[e(0)]);
    let root = tree.roots[0];
    let a = tree.add_child(root, r, e(1));
    let b = tree.add_child(root, r, e(2));
    tree.nodes[root].expanded = true;
    backpropagate(&mut tree, &[root, a], 0.2, BackpropMode::LiteralAvg);
    for reward in [0.4, 0.6, 0.8] {
        backpropagate(&mut tree, &[root, b], reward, BackpropMode::LiteralAvg);
    }
    tally(
        &mut checks,
        within("weighted average", tree.nodes[root].w, (0.2 + 3.0 * 0.6) / 4.0, 1e-9),
    )?;

    // Orientation: the higher search value becomes the positive.
    let mut tree = SearchTree::new(&[e(0)]);
    let root = tree.roots[0];
    let hi = tree.add_child(root, damr::kg::RelationId(1), e(1));
    let lo = tree.add_child(root, damr::kg::RelationId(2), e(2));
    backpropagate(&mut tree, &[root, lo], 0.3, BackpropMode::LiteralAvg);
    backpropagate(&mut tree, &[root, hi], 0.9, BackpropMode::LiteralAvg);
    let config = SearchConfig {
        pairs_per_finetune: 4,
        ..SearchConfig::default()
    };
    let pairs = sample_pseudo_pairs(&tree, &config, &mut ChaCha8Rng::seed_from_u64(0));
    checks += 1;
    if pairs.len() != 1 || pairs[0].positive != vec![damr::kg::RelationId(1)] {
        return Err(format!("orientation: {pairs:?}"));
    }
    tally(&mut checks, within("pair gap", pairs[0].gap, 0.6, 1e-9))?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let p = random_scorer(&mut rng, 6);
        let q = random_vec(&mut rng, 6);
        let len = rng.gen_range(1..=6);
        let hops: Vec<Vec<f64>> = (0..len).map(|_| random_vec(&mut rng, 6)).collect();
        let refs: Vec<&[f64]> = hops.iter().map(Vec::as_slice).collect();
        let enc = score(&p, &q, &refs).map_err(|e| e.to_string())?;
        checks += 1;
        if enc.alpha.iter().any(|&a| a < 0.0) {
            return Err("negative pooling weight".into());
        }
        tally(&mut checks, within("pooling sum", enc.alpha.iter().sum(), 1.0, 1e-9))?;
    }
    in_time(start, Duration::from_secs(1), format!("{checks} checks"))
}

// 2 -------------------------------------------------------------------------

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let delta = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let mut p = random_scorer(&mut rng, 6);
        let triplets: Vec<TrainTriplet> = (0..rng.gen_range(2..=5))
            .map(|_| {
                let pos = (0..rng.gen_range(1..=4)).map(|_| embedding(&mut rng, 6)).collect();
                let neg = (0..rng.gen_range(1..=4)).map(|_| embedding(&mut rng, 6)).collect();
                TrainTriplet::new(embedding(&mut rng, 6), pos, neg).unwrap()
            })
            .collect();
        let (_, grads) = loss_and_grads(&p, &triplets).map_err(|e| e.to_string())?;
        let analytic = grads.flatten();
        for _ in 0..100 {
            let i = rng.gen_range(0..analytic.len());
            let orig = *p.coord_mut(i);
            *p.coord_mut(i) = orig + delta;
            let up = batch_loss(&p, &triplets).unwrap();
            *p.coord_mut(i) = orig - delta;
            let down = batch_loss(&p, &triplets).unwrap();
            *p.coord_mut(i) = orig;
            let numeric = (up - down) / (2.0 * delta);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    if worst > 1e-4 {
        return Err(format!("max relative error {worst:.2e}"));
    }
    in_time(
        start,
        Duration::from_secs(30),
        format!("max relative error {worst:.2e} over 500 coordinates"),
    )
}

// 3 -------------------------------------------------------------------------

fn padding_invariance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let p = random_scorer(&mut rng, 5);
        let n = rng.gen_range(1..=6);
        let qs: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut rng, 5)).collect();
        let paths: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|_| (0..rng.gen_range(1..=6)).map(|_| random_vec(&mut rng, 5)).collect())
            .collect();
        let refs: Vec<Vec<&[f64]>> = paths.iter().map(|p| p.iter().map(Vec::as_slice).collect()).collect();
        let longest = refs.iter().map(Vec::len).max().unwrap();
        let batch = SeqBatch {
            questions: qs.iter().map(Vec::as_slice).collect(),
            paths: refs.clone(),
            pad_to: rng.gen_range(longest..=6),
        };
        let batched = forward(&p, &batch).map_err(|e| e.to_string())?.scores;
        for b in 0..n {
            let single = score(&p, &qs[b], &refs[b]).unwrap().score;
            worst = worst.max((batched[b] - single).abs());
        }
        let same_q = score_batch(&p, &qs[0], &refs).unwrap();
        for (b, s) in same_q.iter().enumerate() {
            worst = worst.max((s - score(&p, &qs[0], &refs[b]).unwrap().score).abs());
        }
    }
    if worst > 1e-9 {
        return Err(format!("max deviation {worst:.2e}"));
    }
    Ok(format!("max deviation {worst:.2e} over 100 batches"))
}

// 4 -------------------------------------------------------------------------

fn pretraining_sanity() -> Verdict {
    let start = Instant::now();
    let synth = |seed| {
        harness::generate_synthetic(&SynthSpec {
            entities: 1200,
            questions: 300,
            marker: true,
            seed,
            ..SynthSpec::default()
        })
        .unwrap()
    };
    let embedder = Embedder::stub(0, 64, StubMode::BagOfWords);
    let mining = MiningConfig {
        seed: 4,
        ..MiningConfig::default()
    };
    let train_set = synth(41);
    let held_set = synth(42);
    let train =
        harness::mine_dataset(&train_set.kg, &train_set.items, &embedder, &mining).map_err(|e| e.to_string())?;
    let held = harness::mine_dataset(&held_set.kg, &held_set.items, &embedder, &mining).map_err(|e| e.to_string())?;
    if train.len() < 500 {
        return Err(format!("only {} training triplets", train.len()));
    }
    let dims = ScorerDims {
        d_in: 64,
        d_model: 32,
        layers: 2,
        heads: 4,
        d_ff: 128,
        max_len: 8,
    };
    let mut params = ScorerParams::init(dims, 4).unwrap();
    let config = TrainConfig {
        epochs: 15,
        lr: 1e-4,
        batch_size: 32,
        seed: 4,
    };
    let curve = pretrain(&mut params, &train, &config).map_err(|e| e.to_string())?;
    let acc = ranking_accuracy(&params, &held).unwrap();
    let detail = format!(
        "{} triplets, final loss {:.3}, held-out accuracy {acc:.3} on {}",
        train.len(),
        curve.last().unwrap(),
        held.len()
    );
    if acc < 0.95 {
        return Err(detail);
    }
    in_time(start, Duration::from_secs(120), detail)
}

// 5, 6, 7 -------------------------------------------------------------------

/// Scorer dimensions for the end-to-end benchmark.
const E2E_DIMS: ScorerDims = ScorerDims {
    d_in: 128,
    d_model: 32,
    layers: 2,
    heads: 4,
    d_ff: 128,
    max_len: 8,
};

/// Pretrains on a larger synthetic graph over the same relation vocabulary
/// as the benchmark (answers branch, so overshooting paths are mined too).
fn e2e_scorer(embedder: &Embedder) -> Result<(ScorerParams, usize), String> {
    let train_set = harness::generate_synthetic(&SynthSpec {
        entities: 9600,
        questions: 2400,
        answer_branches: true,
        seed: 404,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let mining = MiningConfig {
        hard_per_positive: 10,
        seed: 1,
        ..MiningConfig::default()
    };
    let triplets =
        harness::mine_dataset(&train_set.kg, &train_set.items, embedder, &mining).map_err(|e| e.to_string())?;
    let mut params = ScorerParams::init(E2E_DIMS, 1).unwrap();
    let config = TrainConfig {
        epochs: 15,
        lr: 1e-3,
        batch_size: 32,
        seed: 1,
    };
    pretrain(&mut params, &triplets, &config).map_err(|e| e.to_string())?;
    Ok((params, triplets.len()))
}

fn benchmark() -> harness::Synthetic {
    harness::generate_synthetic(&SynthSpec {
        seed: 505,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn run_config(finetune: bool) -> SearchConfig {
    SearchConfig {
        iterations: 30,
        top_k: 3,
        max_len: 4,
        finetune,
        ..SearchConfig::default()
    }
}

fn evaluate(
    bench: &harness::Synthetic,
    scorer: &ScorerParams,
    embedder: &Embedder,
    noise: f64,
    finetune: bool,
    seed: u64,
) -> harness::EvalReport {
    let config = EvalConfig {
        search: run_config(finetune),
        seed,
        workers: 1,
        carry_scorer: false,
        timings: false,
    };
    harness::evaluate(
        &bench.kg,
        &bench.items,
        &PlannerSetup::Oracle { noise, seed },
        scorer,
        embedder,
        &config,
    )
    .unwrap()
}

struct Shared {
    embedder: Embedder,
    scorer: ScorerParams,
    bench: harness::Synthetic,
}

fn end_to_end(shared: &mut Option<Shared>) -> Verdict {
    let start = Instant::now();
    let embedder = Embedder::stub(0, E2E_DIMS.d_in, StubMode::BagOfWords);
    let (scorer, mined) = e2e_scorer(&embedder)?;
    let pretrain_secs = start.elapsed().as_secs_f64();
    let bench = benchmark();
    let report = evaluate(&bench, &scorer, &embedder, 0.0, true, 7);
    let hits = report.aggregate.hits_at_1;
    let detail = format!(
        "Hits@1 {hits:.2} on {} questions (pretraining on {mined} triplets took {pretrain_secs:.0}s)",
        report.per_question.len()
    );
    *shared = Some(Shared {
        embedder,
        scorer,
        bench,
    });
    if hits < 0.90 {
        return Err(detail);
    }
    in_time(start, Duration::from_secs(300), detail)
}

fn finetune_direction(shared: &Shared) -> Verdict {
    let (mut with, mut without) = (0.0, 0.0);
    let mut per_seed = Vec::new();
    for seed in 1..=5u64 {
        let a = evaluate(&shared.bench, &shared.scorer, &shared.embedder, 0.3, true, seed)
            .aggregate
            .hits_at_1;
        let b = evaluate(&shared.bench, &shared.scorer, &shared.embedder, 0.3, false, seed)
            .aggregate
            .hits_at_1;
        per_seed.push(format!("{a:.2}/{b:.2}"));
        with += a / 5.0;
        without += b / 5.0;
    }
    let gap = with - without;
    let detail = format!(
        "mean Hits@1 {with:.3} with fine-tuning vs {without:.3} without, gap {gap:+.3} (per seed {})",
        per_seed.join(" ")
    );
    if gap > 0.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn call_budget(shared: &Shared) -> Verdict {
    let config = run_config(true);
    let report = evaluate(&shared.bench, &shared.scorer, &shared.embedder, 0.0, true, 7);
    let mut total = 0u64;
    for (i, (item, rec)) in shared.bench.items.iter().zip(&report.per_question).enumerate() {
        let gold = item.gold_path.clone().unwrap();
        let planner = Planner::Mock(OraclePlanner::new(vec![gold], 0.0, 7));
        let topics = shared.bench.kg.resolve_entities(&item.topic_entities).unwrap();
        let mut params = shared.scorer.clone();
        let seed = 7 + i as u64;
        let result = search(
            &shared.bench.kg,
            &item.question,
            &topics,
            &planner,
            &mut params,
            &shared.embedder,
            &config,
            seed,
        )
        .map_err(|e| e.to_string())?;
        let calls = result.usage.llm_calls;
        if calls != result.stats.expansions as u64 || calls != rec.llm_calls || calls > config.iterations as u64 {
            return Err(format!(
                "{}: {calls} calls, {} expansions, report {}",
                item.id, result.stats.expansions, rec.llm_calls
            ));
        }
        total += calls;
    }
    let mean = total as f64 / report.per_question.len() as f64;
    within("aggregate calls", report.aggregate.llm_calls, mean, 1e-12)?;
    Ok(format!(
        "calls per question = expansions ≤ {}; mean {mean:.2}",
        config.iterations
    ))
}

// 8 -------------------------------------------------------------------------

fn cli_determinism() -> Verdict {
    use std::process::Command;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_damr"))
            .current_dir(dir.path())
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(String::from_utf8_lossy(&out.stderr).into_owned())
        }
    };
    run(&[
        "synth",
        "--seed",
        "8",
        "--questions",
        "20",
        "--entities",
        "80",
        "--out-kg",
        "kg.tsv",
        "--out-data",
        "qa.jsonl",
    ])?;
    run(&[
        "pretrain",
        "--kg",
        "kg.tsv",
        "--train",
        "qa.jsonl",
        "--out",
        "s.ckpt",
        "--epochs",
        "3",
        "--dim",
        "32",
        "--d-model",
        "16",
        "--seed",
        "8",
    ])?;
    let eval = |out: &str| {
        run(&[
            "eval",
            "--kg",
            "kg.tsv",
            "--data",
            "qa.jsonl",
            "--ckpt",
            "s.ckpt",
            "--planner",
            "mock",
            "--noise",
            "0.3",
            "--seed",
            "8",
            "--workers",
            "1",
            "--out",
            out,
        ])
    };
    eval("first.json")?;
    eval("second.json")?;
    let a = std::fs::read(dir.path().join("first.json")).map_err(|e| e.to_string())?;
    let b = std::fs::read(dir.path().join("second.json")).map_err(|e| e.to_string())?;
    if a != b {
        return Err("reports differ".into());
    }
    Ok(format!("two {}-byte reports identical", a.len()))
}

// 9 -------------------------------------------------------------------------

fn checkpoint_round_trip() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let p = random_scorer(&mut rng, 12);
    let q = random_vec(&mut rng, 12);
    let paths: Vec<Vec<Vec<f64>>> = (0..32)
        .map(|_| (0..rng.gen_range(1..=6)).map(|_| random_vec(&mut rng, 12)).collect())
        .collect();
    let refs: Vec<Vec<&[f64]>> = paths.iter().map(|p| p.iter().map(Vec::as_slice).collect()).collect();
    let before = score_batch(&p, &q, &refs).unwrap();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let file = dir.path().join("probe.ckpt");
    save_checkpoint(&p, &file).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&file).map_err(|e| e.to_string())?;
    let after = score_batch(&loaded, &q, &refs).unwrap();
    let same = before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits());
    if !same {
        return Err("scores changed after reload".into());
    }
    Ok("32 probe scores bit-identical".into())
}

// 10 ------------------------------------------------------------------------

fn graph_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    for i in 0..50 {
        common::graphs::check_instance(&mut rng).map_err(|e| format!("graph {i}: {e}"))?;
    }
    Ok("50 random graphs agree with the exhaustive references".into())
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let mut shared = None;
    let mut results: Vec<(u32, &str, Verdict)> = vec![
        (1, "equation unit suite", equation_suite()),
        (2, "gradient fidelity", gradient_fidelity()),
        (3, "padding invariance", padding_invariance()),
        (4, "pretraining sanity", pretraining_sanity()),
        (5, "end-to-end oracle run", end_to_end(&mut shared)),
    ];
    match &shared {
        Some(s) => {
            results.push((6, "fine-tuning ablation direction", finetune_direction(s)));
            results.push((7, "call budget", call_budget(s)));
        }
        None => {
            results.push((6, "fine-tuning ablation direction", Err("no pretrained scorer".into())));
            results.push((7, "call budget", Err("no pretrained scorer".into())));
        }
    }
    results.push((8, "eval determinism", cli_determinism()));
    results.push((9, "checkpoint round-trip", checkpoint_round_trip()));
    results.push((10, "small-instance graph oracles", graph_oracles()));

    println!();
    for (n, name, v) in &results {
        match v {
            Ok(d) => println!("[PASS] {n:>2}. {name}: {d}"),
            Err(d) => println!("[FAIL] {n:>2}. {name}: {d}"),
        }
    }
    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

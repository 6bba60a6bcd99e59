//! Acceptance harness. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;

use samga::checkpoint::{load_checkpoint, save_checkpoint, sidecar_path};
use samga::config::{RunConfig, SplitKind};
use samga::data::{generate_synthetic, load_dataset, make_split, save_dataset, ConceptPartition, Dataset, SplitPlan};
use samga::eval::report::Metrics;
use samga::eval::retrieval::retrieval_from_embeddings;
use samga::eval::{evaluate_retrieval, routing_report, run_ablation, RunReport, Variant};
use samga::gradcheck::{gradcheck, CheckStatus, GradcheckConfig};
use samga::model::BlockGroup;
use samga::objectives::{lambda_at, mmd_loss, retrieval_loss, ContrastiveHead, MmdConfig};
use samga::rng::{self, Rng, Stream};
use samga::target::{route_infer, route_with_masks, routing_deviation, Router};
use samga::trainer::{train, TrainSession};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Outcome = Result<(bool, String), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("routing arithmetic", c1_routing_arithmetic),
        ("loss oracles", c2_loss_oracles),
        ("gradient suite", c3_gradients),
        ("stage mechanics", c4_stage_mechanics),
        ("planted router recovery", c5_router_recovery),
        ("fusion ablation ordering", c6_fusion_ablation),
        ("two-stage ablation ordering", c7_stage_ablation),
        ("retrieval sanity", c8_retrieval_sanity),
        ("determinism and round trips", c9_determinism),
        ("invariances", c10_invariances),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let (pass, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {} {name}: {detail} [{:.1}s]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn softmax_oracle(logits: &[f64]) -> Vec<f64> {
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    logits.iter().map(|l| l.exp() / z).collect()
}

fn ranks_oracle(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            below + (equal - 1.0) / 2.0
        })
        .collect()
}

fn spearman_oracle(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks_oracle(a), ranks_oracle(b));
    let (ma, mb) = (mean(&ra), mean(&rb));
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

struct Experiment {
    config: RunConfig,
    data: Dataset,
    plan: SplitPlan,
}

/// Synthetic dataset for `seed`; intra and leave-one-out splits use subject
/// `seed mod S`.
fn experiment(base: &RunConfig, seed: u64) -> Result<Experiment, String> {
    let mut config = base.clone();
    config.seed = seed;
    if config.train.split_mode != SplitKind::Pooled {
        config.train.subject = Some(seed as usize % config.data.subjects);
    }
    let data = generate_synthetic(&config.data, seed).map_err(err)?;
    let partition = ConceptPartition::from_labels(&data).map_err(err)?;
    let plan = make_split(&data, config.split_mode().map_err(err)?, &partition).map_err(err)?;
    Ok(Experiment { config, data, plan })
}

fn c1_routing_arithmetic() -> Outcome {
    let logits = vec![-2.0, -1.0, 0.0, -1.0, -2.0];
    let router = Router::new(logits.clone(), 1, 1.0, 0.0, 0.0, 1e-8).map_err(err)?;
    let w = route_infer(&router);
    let published = [0.067, 0.183, 0.498, 0.183, 0.067];
    let oracle = softmax_oracle(&logits);
    let vs_published = w.iter().zip(&published).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let vs_oracle = w.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((
        vs_published <= 1e-3 && vs_oracle <= 1e-12,
        format!("weights {w:.4?}, max gap to published {vs_published:.1e}"),
    ))
}

fn c2_loss_oracles() -> Outcome {
    let unit = ContrastiveHead { log_tau: 0.0 };
    let pair = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
    let ortho = retrieval_loss(&unit, &pair, &pair).map_err(err)?;
    let ortho_gap = (ortho - (1.0 + (-1.0f64).exp()).ln()).abs();

    let m = 6;
    let same = vec![vec![0.4, -1.3, 2.2, 0.7]; m];
    let flat = retrieval_loss(&ContrastiveHead::with_tau(0.07), &same, &same).map_err(err)?;
    let flat_gap = (flat - (m as f64).ln()).abs();

    let repeated = vec![vec![1.5, -0.5, 0.25]; 4];
    let zero_gap = mmd_loss(&MmdConfig::default(), &repeated, &repeated).map_err(err)?.abs();

    // Pooled {a, b, a, b}: the median squared distance is ‖a−b‖², so a single
    // multiplier μ gives c = exp(−1/μ).
    let a = vec![0.3, -1.0, 2.0];
    let b = vec![-0.7, 0.5, 1.1];
    let z = vec![a, b];
    let mu: f64 = 0.5;
    let c = (-1.0 / mu).exp();
    let two_point = mmd_loss(&MmdConfig { multipliers: vec![mu] }, &z, &z).map_err(err)?;
    let two_point_gap = (two_point - (c - 1.0)).abs();

    let worst = [ortho_gap, flat_gap, zero_gap, two_point_gap].into_iter().fold(0.0, f64::max);
    Ok((
        worst <= 1e-10,
        format!(
            "orthonormal {ortho:.6}, uniform {flat:.6} vs ln {m}, repeated point {zero_gap:.1e}, two-point {two_point:.6} vs c-1 {:.6}; worst gap {worst:.1e}",
            c - 1.0
        ),
    ))
}

fn c3_gradients() -> Outcome {
    let groups = [
        BlockGroup::LayerProjector,
        BlockGroup::EegEncoder,
        BlockGroup::SharedEncoder,
        BlockGroup::RouterLogits,
        BlockGroup::SubjectBias,
        BlockGroup::LogTau,
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for lambda in [Some(0.4), None] {
        let cfg = GradcheckConfig { lambda, ..Default::default() };
        let report = gradcheck(&cfg).map_err(err)?;
        let all_pass = report.blocks.iter().all(|b| b.status == CheckStatus::Pass);
        let covered = groups.iter().all(|g| report.blocks.iter().any(|b| b.group == *g));
        let worst = report.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
        pass &= all_pass && covered && worst < 1e-4;
        parts.push(format!(
            "{}: {} blocks, max rel error {worst:.1e}",
            if lambda.is_some() { "mixed" } else { "retrieval" },
            report.blocks.len()
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn c4_stage_mechanics() -> Outcome {
    let mut base = RunConfig::default();
    base.train.patience = 0;
    let ex = experiment(&base, 0)?;
    let schedule = ex.config.schedule();
    let t_c = schedule.t_c;
    let epochs = ex.config.train.epochs;
    if t_c >= epochs {
        return Err(format!("need t_c < epochs, got {t_c} and {epochs}"));
    }
    let shared_bits = |s: &TrainSession| -> Vec<u64> {
        s.state()
            .model
            .block_values()
            .into_iter()
            .filter(|(name, _)| name.starts_with("shared"))
            .flat_map(|(_, v)| v.into_iter().map(f64::to_bits))
            .collect()
    };
    let mut session = TrainSession::new(&ex.data, ex.plan.clone(), ex.config.clone()).map_err(err)?;
    let mut at_switch = None;
    let mut frozen_ok = true;
    let mut lr_ok = true;
    let mut lambdas = Vec::new();
    let lr = ex.config.train.lr;
    let stage2_lr = lr * ex.config.train.stage2_lr_multiplier;
    while !session.is_finished() {
        let rec = session.run_epoch().map_err(err)?.clone();
        lambdas.push(rec.lambda);
        let expected_lr = if rec.epoch > t_c { stage2_lr } else { lr };
        lr_ok &= rec.lr == expected_lr;
        lr_ok &= rec.lambda == lambda_at(&schedule, rec.epoch);
        let bits = shared_bits(&session);
        if rec.epoch == t_c {
            at_switch = Some(bits);
        } else if rec.epoch > t_c {
            frozen_ok &= at_switch.as_ref() == Some(&bits);
        }
    }
    let ran = session.progress().history.len();
    let monotone = lambdas.windows(2).all(|w| w[1] <= w[0]);
    let switch_zero = lambdas.get(t_c) == Some(&0.0);
    Ok((
        ran == epochs && frozen_ok && lr_ok && monotone && switch_zero,
        format!(
            "{ran} epochs, switch after {t_c}: shared frozen bitwise {frozen_ok}, stage-2 lr {stage2_lr:e} {lr_ok}, λ non-increasing {monotone}, λ at switch+1 = {:?}",
            lambdas.get(t_c)
        ),
    ))
}

fn c5_router_recovery() -> Outcome {
    let mut base = RunConfig::default();
    base.train.split_mode = SplitKind::Pooled;
    let mut matches = 0;
    let mut rhos = Vec::new();
    for seed in SEEDS {
        let ex = experiment(&base, seed)?;
        let out = train(&ex.data, ex.plan.clone(), &ex.config).map_err(err)?;
        let model = &out.best.model;
        let planted = ex.data.manifest.planted_truth.as_ref().ok_or("dataset has no planted truth")?;
        if argmax(&model.inference_weights()) == argmax(&planted.global_weights()) {
            matches += 1;
        }
        let learned = routing_deviation(&model.router);
        let target = planted.deviation();
        let per_subject: Vec<f64> = (0..target.len())
            .map(|s| spearman_oracle(learned.row(s), &target[s]))
            .collect();
        let rho = mean(&per_subject);
        let reported = routing_report(model, &ex.data.manifest).mean_spearman.unwrap_or(f64::NAN);
        if (rho - reported).abs() > 1e-9 {
            return Err(format!("seed {seed}: reported Spearman {reported} disagrees with oracle {rho}"));
        }
        rhos.push(rho);
    }
    let mean_rho = mean(&rhos);
    Ok((
        matches >= 4 && mean_rho > 0.5,
        format!("argmax match {matches}/5, mean Spearman {mean_rho:.3} (per seed {rhos:.2?})"),
    ))
}

fn ablation_means(base: &RunConfig, variants: &[Variant]) -> Result<Vec<Vec<f64>>, String> {
    let mut top1 = vec![Vec::new(); variants.len()];
    for seed in SEEDS {
        let ex = experiment(base, seed)?;
        let rows = run_ablation(&ex.data, &ex.plan, &ex.config, variants, &[seed], |_| Ok(())).map_err(err)?;
        for (i, row) in rows.iter().enumerate() {
            top1[i].push(row.top1_mean);
        }
    }
    Ok(top1)
}

fn c6_fusion_ablation() -> Outcome {
    let mut base = RunConfig::default();
    base.train.split_mode = SplitKind::Pooled;
    base.data.subject_deviation_scale = 1.5;
    let top1 = ablation_means(&base, &[Variant::Learned, Variant::Uniform, Variant::SingleBest])?;
    let (learned, uniform, single) = (mean(&top1[0]), mean(&top1[1]), mean(&top1[2]));
    let margin = 100.0 * (learned - single);
    Ok((
        learned >= uniform && learned >= single && margin >= 2.0,
        format!("Top-1 learned {learned:.4}, uniform {uniform:.4}, single best {single:.4}; margin {margin:.1} points"),
    ))
}

fn c7_stage_ablation() -> Outcome {
    let mut base = RunConfig::default();
    base.train.split_mode = SplitKind::Loso;
    let top1 = ablation_means(&base, &[Variant::Learned, Variant::OneStage])?;
    let (two_stage, one_stage) = (mean(&top1[0]), mean(&top1[1]));
    Ok((
        two_stage >= one_stage,
        format!(
            "Top-1 two-stage {two_stage:.4} (per seed {:.3?}), one-stage {one_stage:.4} (per seed {:.3?})",
            top1[0], top1[1]
        ),
    ))
}

fn c8_retrieval_sanity() -> Outcome {
    let mut frozen = RunConfig::default();
    frozen.train.lr = 0.0;
    let (mut hits, mut queries, mut n_way) = (0.0, 0usize, 0usize);
    let mut trained = Vec::new();
    for seed in SEEDS {
        let ex = experiment(&frozen, seed)?;
        let out = train(&ex.data, ex.plan.clone(), &ex.config).map_err(err)?;
        let res = evaluate_retrieval(&out.best.model, &ex.data, &ex.plan.test, &[1]).map_err(err)?;
        hits += res.top1() * res.true_ranks.len() as f64;
        queries += res.true_ranks.len();
        n_way = res.n_way;

        let ex = experiment(&RunConfig::default(), seed)?;
        let out = train(&ex.data, ex.plan.clone(), &ex.config).map_err(err)?;
        trained.push(evaluate_retrieval(&out.best.model, &ex.data, &ex.plan.test, &[1]).map_err(err)?.top1());
    }
    let chance = 1.0 / n_way as f64;
    let untrained = hits / queries as f64;
    let se = (chance * (1.0 - chance) / queries as f64).sqrt();
    let z = (untrained - chance) / se;
    let trained_mean = mean(&trained);
    Ok((
        z.abs() <= 3.0 && trained_mean > 5.0 * chance,
        format!(
            "untrained Top-1 {untrained:.4} vs chance {chance:.4} over {queries} queries ({z:+.2} SE); trained intra Top-1 {trained_mean:.4} = {:.1}x chance",
            trained_mean / chance
        ),
    ))
}

fn read_dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(err)? {
        let path = entry.map_err(err)?.path();
        out.push((path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).map_err(err)?));
    }
    out.sort();
    Ok(out)
}

fn c9_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let root = tmp.path();
    let base = RunConfig::default();

    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let ex = experiment(&base, 3)?;
        let out = train(&ex.data, ex.plan.clone(), &ex.config).map_err(err)?;
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(err)?;
        save_checkpoint(&out.best, &dir.join("best.ckpt")).map_err(err)?;
        save_checkpoint(&out.last, &dir.join("last.ckpt")).map_err(err)?;
        let mut report = RunReport::new(&ex.config, ex.config.split_mode().map_err(err)?, None, &out);
        let res = evaluate_retrieval(&out.best.model, &ex.data, &ex.plan.test, &[1, 5]).map_err(err)?;
        report.metrics = Some(Metrics::from(&res));
        report.routing = Some(routing_report(&out.best.model, &ex.data.manifest));
        report.save(&dir).map_err(err)?;
        runs.push(read_dir_bytes(&dir)?);
    }
    let same_runs = runs[0] == runs[1];

    let ckpt = root.join("a").join("best.ckpt");
    let loaded = load_checkpoint(&ckpt).map_err(err)?;
    let again = root.join("again.ckpt");
    save_checkpoint(&loaded, &again).map_err(err)?;
    let ckpt_round_trip = fs::read(&ckpt).map_err(err)? == fs::read(&again).map_err(err)?
        && fs::read(sidecar_path(&ckpt)).map_err(err)? == fs::read(sidecar_path(&again)).map_err(err)?;

    let data = generate_synthetic(&base.data, 11).map_err(err)?;
    let regenerated = generate_synthetic(&base.data, 11).map_err(err)?;
    save_dataset(&data, &root.join("d1")).map_err(err)?;
    let reloaded = load_dataset(&root.join("d1")).map_err(err)?;
    save_dataset(&reloaded, &root.join("d2")).map_err(err)?;
    let regen_equal = data == regenerated;
    // Saving adds file checksums to the manifest; everything else must match.
    let mut stripped = reloaded.clone();
    stripped.manifest.checksums = None;
    let reload_equal = stripped == data;
    let files_equal = read_dir_bytes(&root.join("d1"))? == read_dir_bytes(&root.join("d2"))?;
    let data_round_trip = regen_equal && reload_equal && files_equal;

    Ok((
        same_runs && ckpt_round_trip && data_round_trip,
        format!(
            "repeat run identical {same_runs} ({} files), checkpoint save/load/save identical {ckpt_round_trip}, dataset regenerate/reload/re-save identical {regen_equal}/{reload_equal}/{files_equal}",
            runs[0].len()
        ),
    ))
}

fn random_rows(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

fn random_rotation(rng: &mut Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

fn rotate(q: &DMatrix<f64>, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| (q * nalgebra::DVector::from_column_slice(r)).iter().copied().collect())
        .collect()
}

fn c10_invariances() -> Outcome {
    let mut rng = rng::stream(2024, Stream::Data, &[]);
    let (n, d) = (48, 16);
    let mut metric_gap: f64 = 0.0;
    let mut loss_gap: f64 = 0.0;
    let mut ranks_equal = true;
    let head = ContrastiveHead::with_tau(0.07);
    for _ in 0..5 {
        let q = random_rotation(&mut rng, d);
        let cands = random_rows(&mut rng, n, d);
        let queries: Vec<Vec<f64>> = cands
            .iter()
            .map(|c| c.iter().map(|v| v + 0.8 * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let truth: Vec<usize> = (0..n).collect();
        let ids: Vec<usize> = (0..n).collect();
        let before = retrieval_from_embeddings(&queries, &truth, &cands, ids.clone(), &[1, 5]).map_err(err)?;
        let after =
            retrieval_from_embeddings(&rotate(&q, &queries), &truth, &rotate(&q, &cands), ids, &[1, 5]).map_err(err)?;
        ranks_equal &= before.true_ranks == after.true_ranks;
        for k in [1, 5] {
            metric_gap = metric_gap.max((before.top(k) - after.top(k)).abs());
        }
        let l0 = retrieval_loss(&head, &queries[..8], &cands[..8]).map_err(err)?;
        let l1 = retrieval_loss(&head, &rotate(&q, &queries[..8]), &rotate(&q, &cands[..8])).map_err(err)?;
        loss_gap = loss_gap.max((l0 - l1).abs());
    }

    let (subjects, k) = (4, 5);
    let mut router = Router::new(random_rows(&mut rng, 1, k).remove(0), subjects, 0.7, 0.0, 0.0, 1e-8).map_err(err)?;
    router.subject_bias.data = random_rows(&mut rng, 1, subjects * k).remove(0);
    let mask = vec![true, false, true, true, false];
    let base_infer = route_infer(&router);
    let base_train: Vec<Vec<f64>> = (0..subjects).map(|s| route_with_masks(&router, s, true, &mask).weights).collect();
    let mut shift_gap: f64 = 0.0;
    for shift in [-3.7, 0.25, 12.5] {
        let mut shifted = router.clone();
        shifted.global_logits.iter_mut().for_each(|v| *v += shift);
        let w = route_infer(&shifted);
        shift_gap = w.iter().zip(&base_infer).map(|(a, b)| (a - b).abs()).fold(shift_gap, f64::max);
        for (s, base) in base_train.iter().enumerate() {
            let w = route_with_masks(&shifted, s, true, &mask).weights;
            shift_gap = w.iter().zip(base).map(|(a, b)| (a - b).abs()).fold(shift_gap, f64::max);
        }
    }
    let dev = routing_deviation(&router);
    let row_sum_gap = (0..subjects).map(|s| dev.row(s).iter().sum::<f64>().abs()).fold(0.0, f64::max);

    let pass = ranks_equal && metric_gap <= 1e-10 && loss_gap <= 1e-10 && shift_gap <= 1e-10 && row_sum_gap <= 1e-10;
    Ok((
        pass,
        format!(
            "rotation: ranks equal {ranks_equal}, metric gap {metric_gap:.1e}, loss gap {loss_gap:.1e}; logit shift gap {shift_gap:.1e}; deviation row sums {row_sum_gap:.1e}"
        ),
    ))
}

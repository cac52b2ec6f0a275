//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails. Expected values come from independent oracles
//! written here, not from the library.
//!
//! Arguments (after `--`) that do not start with `-` filter criteria by
//! substring, e.g. `cargo test --test acceptance -- centre`.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::AssertUnwindSafe;
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use protosim_core::analytics::{
    centre_bias_map, specificity, SpecificityLabel, SpecificityOptions,
};
use protosim_core::backbone::{architecture, load_pretrained};
use protosim_core::index::{ImageRecord, IndexManifest, IndexStore, IndexedDataset, PrototypeIndex, Rank, TokenKind, INDEX_FORMAT};
use protosim_core::model::{init_params, BACKBONE_PREFIX};
use protosim_core::probe::{
    evaluate, extract_features, stratified_split, train_probe, zero_prototype_ablation,
    LabeledImages, ProbeConfig,
};
use protosim_core::protosim::{hard_assign, project, sample_gumbel, soft_assign, PrototypeBank};
use protosim_core::synthetic::{
    concept_purity, concepts, planted_class_model, render, write_planted_comparison,
    PlantedComparison, PlantedOptions,
};
use protosim_core::tensor_util::to_f64_vec;
use protosim_core::training::{
    dino_loss, ema_update, init_states, read_train_log, train, TrainConfig, Trainer,
    TRAIN_LOG_FILE,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ------------------------------------------------------------ oracles

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..x.len() {
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}

/// Column `j` of a row-major `k×t` matrix.
fn column(m: &[f64], k: usize, t: usize, j: usize) -> Vec<f64> {
    (0..k).map(|i| m[i * t + j]).collect()
}

// ------------------------------------------------------------ criteria

/// Hard columns are one-hot at the argmax, soft columns sum to one and
/// hard projection returns bank rows exactly.
fn assignment_laws() -> Check {
    let t0 = Instant::now();
    let (k, t, d) = (16, 1000, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let normal = Normal::new(0.0, 3.0).unwrap();
    let logits: Vec<f64> = (0..k * t).map(|_| normal.sample(&mut rng)).collect();
    let logits_t = Tensor::from_vec(logits.clone(), (k, t), &Device::Cpu).map_err(err)?;
    let noise = sample_gumbel(k, t, &mut rng).map_err(err)?;
    let noise_v = to_f64_vec(&noise).map_err(err)?;
    let hard = hard_assign(&logits_t, Some(&noise)).map_err(err)?;
    let hard_v = to_f64_vec(hard.tensor()).map_err(err)?;
    let soft = soft_assign(&logits_t, Some(&noise)).map_err(err)?;
    let soft_v = to_f64_vec(soft.tensor()).map_err(err)?;
    let mut worst_sum = 0.0f64;
    for j in 0..t {
        let perturbed: Vec<f64> = (0..k).map(|i| logits[i * t + j] + noise_v[i * t + j]).collect();
        let want = argmax(&perturbed);
        let col = column(&hard_v, k, t, j);
        for (i, v) in col.iter().enumerate() {
            let expected = if i == want { 1.0 } else { 0.0 };
            ensure(*v == expected, || format!("column {j}: hard entry {i} = {v}, argmax {want}"))?;
        }
        let s: f64 = column(&soft_v, k, t, j).iter().sum();
        worst_sum = worst_sum.max((s - 1.0).abs());
    }
    ensure(worst_sum <= 1e-5, || format!("soft column sum off by {worst_sum:e}"))?;
    let bank_rows: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let bank = PrototypeBank::new(Tensor::from_vec(bank_rows.concat(), (k, d), &Device::Cpu).map_err(err)?)
        .map_err(err)?;
    let z = project(&hard, &bank).map_err(err)?;
    let zv = z.tensor().to_vec2::<f64>().map_err(err)?;
    for j in 0..t {
        let want = argmax(&(0..k).map(|i| logits[i * t + j] + noise_v[i * t + j]).collect::<Vec<_>>());
        ensure(zv[j] == bank_rows[want], || format!("token {j} projection is not bank row {want}"))?;
    }
    let el = t0.elapsed();
    ensure(el < Duration::from_secs(5), || format!("took {el:?} (limit 5 s)"))?;
    Ok(format!("{t} columns, max |Σsoft−1| = {worst_sum:.1e}, {el:.2?}"))
}

/// Straight-through gradient w.r.t. logits equals central finite
/// differences of the soft (gumbel-softmax) path.
fn straight_through_gradients() -> Check {
    let t0 = Instant::now();
    let (k, d, t) = (8usize, 4usize, 5usize);
    let eps = 1e-5;
    let mut accepted = 0;
    let mut seed = 0u64;
    let mut worst = 0.0f64;
    while accepted < 50 {
        seed += 1;
        ensure(seed < 10_000, || "could not find 50 instances with margin > 0.5".into())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..k * t).map(|_| rng.random_range(-2.0..2.0)).collect();
        let noise = sample_gumbel(k, t, &mut rng).map_err(err)?;
        let nv = to_f64_vec(&noise).map_err(err)?;
        let margin_ok = (0..t).all(|j| {
            let mut c: Vec<f64> = (0..k).map(|i| logits[i * t + j] + nv[i * t + j]).collect();
            c.sort_by(|a, b| b.total_cmp(a));
            c[0] - c[1] > 0.5
        });
        if !margin_ok {
            continue;
        }
        accepted += 1;
        let bank: Vec<f64> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Analytic: L = Σ W ⊙ (hard(logits + g)ᵀ · bank).
        let var = Var::from_vec(logits.clone(), (k, t), &Device::Cpu).map_err(err)?;
        let bank_t = PrototypeBank::new(Tensor::from_vec(bank.clone(), (k, d), &Device::Cpu).map_err(err)?)
            .map_err(err)?;
        let a = hard_assign(var.as_tensor(), Some(&noise)).map_err(err)?;
        let z = project(&a, &bank_t).map_err(err)?;
        let w_t = Tensor::from_vec(w.clone(), (t, d), &Device::Cpu).map_err(err)?;
        let loss = (z.tensor() * &w_t).map_err(err)?.sum_all().map_err(err)?;
        let grads = loss.backward().map_err(err)?;
        let g = to_f64_vec(grads.get(var.as_tensor()).ok_or("no gradient reached the logits")?)
            .map_err(err)?;
        // Oracle: finite differences of the soft path.
        let soft_loss = |l: &[f64]| -> f64 {
            let mut total = 0.0;
            for j in 0..t {
                let p = softmax(&(0..k).map(|i| l[i * t + j] + nv[i * t + j]).collect::<Vec<_>>());
                for c in 0..d {
                    let zc: f64 = (0..k).map(|i| p[i] * bank[i * d + c]).sum();
                    total += w[j * d + c] * zc;
                }
            }
            total
        };
        let mut fd = vec![0.0; k * t];
        for idx in 0..k * t {
            let mut up = logits.clone();
            let mut dn = logits.clone();
            up[idx] += eps;
            dn[idx] -= eps;
            fd[idx] = (soft_loss(&up) - soft_loss(&dn)) / (2.0 * eps);
        }
        let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12);
        let rel = num / den;
        worst = worst.max(rel);
        ensure(rel <= 1e-3, || format!("seed {seed}: relative error {rel:e}"))?;
    }
    let el = t0.elapsed();
    ensure(el < Duration::from_secs(30), || format!("took {el:?} (limit 30 s)"))?;
    Ok(format!("50 instances, worst relative error {worst:.1e}, {el:.2?}"))
}

/// Empirical hard-selection frequencies under Gumbel noise match softmax.
fn gumbel_fidelity() -> Check {
    let logits = [1.0f64, 0.2, -0.7];
    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let l: Vec<f64> = (0..3).flat_map(|i| std::iter::repeat_n(logits[i], draws)).collect();
    let lt = Tensor::from_vec(l, (3, draws), &Device::Cpu).map_err(err)?;
    let noise = sample_gumbel(3, draws, &mut rng).map_err(err)?;
    let hard = hard_assign(&lt, Some(&noise)).map_err(err)?;
    let picks = hard.argmax_per_token().map_err(err)?;
    let mut freq = [0.0f64; 3];
    for p in picks {
        freq[p] += 1.0 / draws as f64;
    }
    let want = softmax(&logits);
    let dev = (0..3).map(|i| (freq[i] - want[i]).abs()).fold(0.0, f64::max);
    ensure(dev <= 0.01, || format!("max deviation {dev:.4} (freq {freq:?}, softmax {want:?})"))?;
    Ok(format!("{draws} draws, max |freq − softmax| = {dev:.4}"))
}

fn random_simplex(rng: &mut ChaCha8Rng, b: usize, o: usize) -> Vec<Vec<f64>> {
    (0..b)
        .map(|_| softmax(&(0..o).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>()))
        .collect()
}

fn to_tensor(rows: &[Vec<f64>]) -> Result<Tensor, String> {
    let (b, o) = (rows.len(), rows[0].len());
    Tensor::from_vec(rows.concat(), (b, o), &Device::Cpu).map_err(err)
}

/// Loss equals a brute-force enumeration of view pairs, vanishes for
/// matched one-hot views, and the teacher receives no gradient.
fn dino_loss_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, o) = (5, 9);
    let mut worst = 0.0f64;
    for v in [0usize, 2, 4] {
        let teacher: Vec<Vec<Vec<f64>>> = (0..2).map(|_| random_simplex(&mut rng, b, o)).collect();
        let student: Vec<Vec<Vec<f64>>> = (0..2 + v).map(|_| random_simplex(&mut rng, b, o)).collect();
        let mut total = 0.0;
        let mut pairs = 0;
        for (i, t) in teacher.iter().enumerate() {
            for (j, s) in student.iter().enumerate() {
                if i == j {
                    continue;
                }
                let ce: f64 = (0..b)
                    .map(|n| -(0..o).map(|c| t[n][c] * s[n][c].ln()).sum::<f64>())
                    .sum::<f64>()
                    / b as f64;
                total += ce;
                pairs += 1;
            }
        }
        let want = total / pairs as f64;
        let tt: Vec<Tensor> = teacher.iter().map(|x| to_tensor(x)).collect::<Result<_, _>>()?;
        let st: Vec<Tensor> = student.iter().map(|x| to_tensor(x)).collect::<Result<_, _>>()?;
        let got = dino_loss(&tt, &st)
            .map_err(err)?
            .to_scalar::<f64>()
            .map_err(err)?;
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-9, || format!("V={v}: loss {got} vs enumeration {want}"))?;
    }
    let one_hot: Vec<Vec<f64>> = (0..b)
        .map(|n| (0..o).map(|c| if c == n % o { 1.0 } else { 0.0 }).collect())
        .collect();
    let oh = to_tensor(&one_hot)?;
    let matched = dino_loss(&[oh.clone(), oh.clone()], &vec![oh.clone(); 4])
        .map_err(err)?
        .to_scalar::<f64>()
        .map_err(err)?;
    ensure(matched <= 1e-6, || format!("matched one-hot loss {matched}"))?;

    let dir = tempfile::tempdir().map_err(err)?;
    let planted = write_planted_comparison(
        dir.path(),
        &PlantedOptions {
            images_per_dataset: 8,
            specific_per_dataset: 1,
            shared: 1,
            size: 16,
            ..Default::default()
        },
    )
    .map_err(err)?;
    let cfg = tiny_config();
    let backbone = load_pretrained(&cfg.backbone).map_err(err)?;
    let mut trainer = Trainer::new(cfg, &backbone).map_err(err)?;
    let images: Vec<(String, protosim_core::image_ops::ImageTensor)> = planted.datasets[0]
        .list_images()
        .map_err(err)?
        .into_iter()
        .map(|e| Ok((e.image_id, protosim_core::image_ops::ImageTensor::load(&e.path).map_err(err)?)))
        .collect::<Result<_, String>>()?;
    let step = trainer
        .step(&images, protosim_core::protosim::AssignMode::Soft)
        .map_err(err)?;
    ensure(step.teacher_grads == 0, || format!("teacher received {} gradients", step.teacher_grads))?;
    ensure(step.student_grads > 0, || "student received no gradient".into())?;
    Ok(format!(
        "pair enumeration within {worst:.1e} for V∈{{0,2,4}}, matched loss {matched:.1e}, teacher gradients 0 (student {})",
        step.student_grads
    ))
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        learning_rate: 1e-3,
        epochs: 3,
        soft_epochs: 2,
        num_prototypes: 8,
        local_crops: 2,
        head_hidden_dim: 16,
        head_bottleneck_dim: 8,
        head_output_dim: 16,
        backbone: "toy-vit-s4-d16-l1-h2-i16,seed=3".into(),
        ..TrainConfig::default()
    }
}

/// EMA is exact and a frozen backbone stays bit-identical while training.
fn ema_and_freezing() -> Check {
    let backbone = load_pretrained("toy-vit-s4-d16-l1-h2-i16,seed=3").map_err(err)?;
    let cfg = tiny_config();
    let params = init_params(&backbone, 8, &cfg.head_config(), 5).map_err(err)?;
    let (student, mut teacher) = init_states(params, true, 16).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (_, v) in &student.trainable {
        let n = v.as_tensor().elem_count();
        let data: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        v.set(&Tensor::from_vec(data, v.as_tensor().dims(), &Device::Cpu).map_err(err)?)
            .map_err(err)?;
    }
    let before: BTreeMap<String, Vec<f64>> = student
        .trainable
        .iter()
        .map(|(k, _)| Ok((k.clone(), to_f64_vec(teacher.params.get(k).map_err(err)?).map_err(err)?)))
        .collect::<Result<_, String>>()?;
    let lambda = 0.996;
    ema_update(&mut teacher, &student, lambda).map_err(err)?;
    let mut worst = 0.0f64;
    for (k, v) in &student.trainable {
        let s = to_f64_vec(v.as_tensor()).map_err(err)?;
        let t = to_f64_vec(teacher.params.get(k).map_err(err)?).map_err(err)?;
        for ((b, s), t) in before[k].iter().zip(&s).zip(&t) {
            worst = worst.max((lambda * b + (1.0 - lambda) * s - t).abs());
        }
    }
    ensure(worst <= 1e-7, || format!("EMA deviates by {worst:e}"))?;

    let dir = tempfile::tempdir().map_err(err)?;
    let planted = write_planted_comparison(
        dir.path(),
        &PlantedOptions {
            images_per_dataset: 16,
            specific_per_dataset: 1,
            shared: 1,
            size: 16,
            ..Default::default()
        },
    )
    .map_err(err)?;
    let hash_before = backbone.parameter_hash().map_err(err)?;
    let out = train(&planted.datasets, tiny_config(), &backbone, None, |_| {}).map_err(err)?;
    let ckpt = out.trainer.to_checkpoint().map_err(err)?;
    let hash_after = ckpt.student.with_prefix(BACKBONE_PREFIX).hash_hex().map_err(err)?;
    ensure(hash_before == hash_after, || {
        format!("backbone hash changed: {hash_before} → {hash_after}")
    })?;
    ensure(ckpt.epoch == 3, || format!("ran {} epochs", ckpt.epoch))?;
    Ok(format!(
        "max EMA error {worst:.1e}; backbone hash {} unchanged over 3 epochs",
        &hash_before[..12]
    ))
}

// ---------------------------------------------------------------- planted

/// Training configuration of the planted end-to-end run.
const PLANTED_CONFIG: &str = "\
# planted comparison: tiny ViT trained from scratch with the bank
backbone = toy-vit-s8-d64,seed=0
train_backbone = true
num_prototypes = 64
epochs = 12
soft_epochs = 8
learning_rate = 0.001
batch_size = 64
local_crops = 2
head_hidden_dim = 128
head_bottleneck_dim = 32
head_output_dim = 128
seed = 0
";

struct PlantedRun {
    _dir: tempfile::TempDir,
    run_dir: PathBuf,
    report: serde_json::Value,
    records: Vec<ImageRecord>,
    truth: PlantedComparison,
    soft_epochs: usize,
    elapsed: Duration,
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_protosim"))
        .args(args)
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!(
            "`protosim {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn planted_run() -> Result<PlantedRun, String> {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let specs: Vec<String> = cli(&["synth", "--out", &p("data"), "--images-per-dataset", "2000"])?
        .lines()
        .map(str::to_string)
        .collect();
    std::fs::write(dir.path().join("train.conf"), PLANTED_CONFIG).map_err(err)?;
    let datasets = specs.join(",");
    cli(&["train", "--datasets", &datasets, "--config", &p("train.conf"), "--out", &p("run")])?;
    cli(&["index", "--checkpoint", &p("run"), "--dataset", &datasets, "--out", &p("index")])?;
    cli(&["compare", "--index", &p("index"), "--checkpoint", &p("run"), "--out", &p("report")])?;
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report/report.json")).map_err(err)?)
            .map_err(err)?;
    ensure(dir.path().join("report/index.html").is_file(), || "report HTML missing".into())?;
    let records = IndexStore::load(&dir.path().join("index"), false).map_err(err)?.records;
    let truth: PlantedComparison =
        serde_json::from_slice(&std::fs::read(dir.path().join("data/truth.json")).map_err(err)?)
            .map_err(err)?;
    let run_dir = dir.path().join("run");
    Ok(PlantedRun {
        _dir: dir,
        run_dir,
        report,
        records,
        truth,
        soft_epochs: 8,
        elapsed: t0.elapsed(),
    })
}

static PLANTED: std::sync::OnceLock<Result<PlantedRun, String>> = std::sync::OnceLock::new();

fn planted() -> Result<&'static PlantedRun, String> {
    PLANTED.get_or_init(planted_run).as_ref().map_err(Clone::clone)
}

/// Dataset-specific and shared prototypes emerge, and every planted
/// concept is recovered by some prototype.
fn planted_end_to_end() -> Check {
    let run = planted()?;
    let counts = &run.report["counts"];
    let specific = |d: &str| counts["specific"][d].as_u64().unwrap_or(0);
    let shared = counts["shared"].as_u64().unwrap_or(0);
    let purity = concept_purity(&run.records, &run.truth.concept_of);
    let expected: BTreeSet<&String> = run
        .truth
        .specific
        .values()
        .flatten()
        .chain(&run.truth.shared)
        .collect();
    ensure(purity.len() == expected.len(), || format!("{} of {} concepts indexed", purity.len(), expected.len()))?;
    let (worst_c, worst) = purity
        .iter()
        .map(|(c, (_, p))| (c.clone(), *p))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or_default();
    let mean = purity.values().map(|x| x.1).sum::<f64>() / purity.len().max(1) as f64;
    let distinct: BTreeSet<usize> = purity.values().map(|x| x.0).collect();
    let detail = format!(
        "specific A={} B={}, shared={shared}; purity min {worst:.3} ({worst_c}) mean {mean:.3}, {} distinct majority prototypes for {} concepts; {:.0?}",
        specific("A"),
        specific("B"),
        distinct.len(),
        purity.len(),
        run.elapsed
    );
    ensure(specific("A") >= 1 && specific("B") >= 1 && shared >= 1 && worst >= 0.6, || detail.clone())?;
    Ok(detail)
}

/// The epoch that switches to hard assignment has a higher mean loss than
/// the epoch before it.
fn soft_to_hard_bump() -> Check {
    let run = planted()?;
    let log = read_train_log(&run.run_dir.join(TRAIN_LOG_FILE)).map_err(err)?;
    let s = run.soft_epochs;
    ensure(log.len() > s, || format!("log has {} epochs", log.len()))?;
    let losses: Vec<String> = log.iter().map(|e| format!("{:.3}", e.loss)).collect();
    let detail = format!(
        "loss(epoch {}) = {:.4} vs loss(epoch {}) = {:.4}; log [{}]",
        s,
        log[s].loss,
        s - 1,
        log[s - 1].loss,
        losses.join(", ")
    );
    ensure(log[s].loss > log[s - 1].loss, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------ analytics

fn random_records(
    rng: &mut ChaCha8Rng,
    datasets: &[&str],
    images: usize,
    k: usize,
    n: usize,
) -> Vec<ImageRecord> {
    // Each dataset owns a slice of the prototype range and leaks into the
    // rest rarely; a tail of prototypes is drawn uniformly by everyone.
    let owned = k * 3 / 4 / datasets.len();
    let mut out = Vec::new();
    for (di, d) in datasets.iter().enumerate() {
        let own = di * owned..(di + 1) * owned;
        let shared = datasets.len() * owned..k;
        for i in 0..images {
            let draw = |rng: &mut ChaCha8Rng| -> usize {
                let r: f64 = rng.random();
                if r < 0.55 {
                    rng.random_range(own.clone())
                } else if r < 0.58 {
                    rng.random_range(0..k)
                } else {
                    rng.random_range(shared.clone())
                }
            };
            let class_prototype = draw(rng);
            let patch_prototypes: Vec<usize> = (0..n).map(|_| draw(rng)).collect();
            let top = vec![(class_prototype, rng.random_range(0..100) as f32 * 0.25)];
            out.push(ImageRecord {
                image_id: format!("{d}_{i:05}"),
                dataset_id: d.to_string(),
                class_prototype,
                patch_prototypes,
                top_affinities: top,
            });
        }
    }
    out
}

/// Labels equal a brute-force recount over the raw records.
fn specificity_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (k, n) = (400, 16);
    let records = random_records(&mut rng, &["A", "B", "C"], 120, k, n);
    let index = PrototypeIndex::build(k, n, &records).map_err(err)?;
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut checked = 0;
    let chosen: BTreeSet<usize> = std::iter::repeat_with(|| rng.random_range(0..k)).take(400).collect();
    let chosen: Vec<usize> = chosen.into_iter().take(100).collect();
    for kind in [TokenKind::Any, TokenKind::Class, TokenKind::Patch] {
        for threshold in [0.95, 0.8, 0.5] {
            let opts = SpecificityOptions {
                threshold,
                min_occurrences: 10,
                token_kind: kind,
            };
            for &p in &chosen {
                let mut per: BTreeMap<&str, u64> = BTreeMap::new();
                for r in &records {
                    let c = u64::from(r.class_prototype == p);
                    let q = r.patch_prototypes.iter().filter(|&&x| x == p).count() as u64;
                    *per.entry(&r.dataset_id).or_default() += match kind {
                        TokenKind::Class => c,
                        TokenKind::Patch => q,
                        TokenKind::Any => c + q,
                    };
                }
                let total: u64 = per.values().sum();
                let want = if total < 10 {
                    SpecificityLabel::InsufficientData
                } else {
                    let (d, m) = per.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).unwrap();
                    if *m as f64 / total as f64 > threshold {
                        SpecificityLabel::SpecificTo(d.to_string())
                    } else {
                        SpecificityLabel::Shared
                    }
                };
                let got = specificity(&index, p, &opts).map_err(err)?.label;
                ensure(got.as_ref() == Some(&want), || {
                    format!("prototype {p} ({kind}, {threshold}): {got:?} vs recount {want:?}")
                })?;
                let key = match &want {
                    SpecificityLabel::SpecificTo(_) => "specific",
                    SpecificityLabel::Shared => "shared",
                    SpecificityLabel::InsufficientData => "insufficient",
                };
                *seen.entry(key.into()).or_default() += 1;
                checked += 1;
            }
        }
    }
    ensure(seen.len() == 3, || format!("oracle only exercised {seen:?}"))?;
    Ok(format!("{checked} labels over 100 prototypes × 3 token kinds × 3 thresholds agree ({seen:?})"))
}

/// Planted centre co-assignment shows up as a centre/periphery contrast;
/// independent assignments give correlations near zero.
fn centre_bias() -> Check {
    let (side, k) = (8usize, 16usize);
    let n = side * side;
    let centre = protosim_core::analytics::centre_positions(side, side);
    let c = (side as f64 - 1.0) / 2.0;
    let in_disk = |q: usize| {
        let (r, col) = ((q / side) as f64, (q % side) as f64);
        ((r - c).powi(2) + (col - c).powi(2)).sqrt() <= 2.0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let make = |rng: &mut ChaCha8Rng, planted: bool, i: usize| {
        let marker = rng.random_range(0..k);
        let patch_prototypes: Vec<usize> = (0..n)
            .map(|q| if planted && in_disk(q) { marker } else { rng.random_range(0..k) })
            .collect();
        ImageRecord {
            image_id: format!("img{i:05}"),
            dataset_id: "A".into(),
            class_prototype: 0,
            patch_prototypes,
            top_affinities: vec![],
        }
    };
    let planted: Vec<ImageRecord> = (0..2000).map(|i| make(&mut rng, true, i)).collect();
    let refs: Vec<&ImageRecord> = planted.iter().collect();
    let map = centre_bias_map(&refs, (side, side), &centre).map_err(err)?;
    let value = |q: usize| map.values[q / side][q % side];
    let centre_cells: Vec<f64> = (0..n).filter(|&q| in_disk(q) && !centre.contains(&q)).map(value).collect();
    let periphery: Vec<f64> = (0..n).filter(|&q| !in_disk(q)).map(value).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let contrast = mean(&centre_cells) - mean(&periphery);
    ensure(contrast >= 0.5, || format!("centre − periphery = {contrast:.3}"))?;

    let random: Vec<ImageRecord> = (0..10_000).map(|i| make(&mut rng, false, i)).collect();
    let refs: Vec<&ImageRecord> = random.iter().collect();
    let map = centre_bias_map(&refs, (side, side), &centre).map_err(err)?;
    let worst = (0..n)
        .filter(|q| !centre.contains(q))
        .map(|q| map.values[q / side][q % side].abs())
        .fold(0.0, f64::max);
    ensure(worst <= 0.05, || format!("independent assignments: |r| up to {worst:.4}"))?;
    Ok(format!("planted contrast {contrast:.3}; independent max |r| {worst:.4} over 10k images"))
}

/// A linear probe separates planted classes, and zeroing each class's
/// prototype hurts that class only.
fn probe_and_ablation() -> Check {
    let (cfg, _) = architecture("toy-vit-s8-d64-l2-h4-i32").map_err(err)?;
    let classes = concepts(5);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let exemplars: Vec<Vec<_>> = classes
        .iter()
        .map(|c| (0..16).map(|_| render(c, 32, 0.0, &mut rng)).collect())
        .collect();
    let model = planted_class_model(&cfg, &exemplars, 16, 4).map_err(err)?;
    let mut data = LabeledImages {
        image_ids: vec![],
        labels: vec![],
        images: vec![],
    };
    for i in 0..400 {
        let c = &classes[i % 5];
        data.image_ids.push(format!("img{i:04}"));
        data.labels.push(c.name.clone());
        data.images.push(render(c, 32, 0.03, &mut rng));
    }
    let features = extract_features(&model, &data, &[], false, 64).map_err(err)?;
    let cfg = ProbeConfig::default();
    let split = stratified_split(&features.labels, cfg.val_fraction, cfg.seed);
    let probe = train_probe(&features, &split, &cfg).map_err(err)?;
    let eval = evaluate(&probe, &features, &split.val);
    let acc = eval.overall_accuracy;
    let agree = (0..features.labels.len())
        .filter(|&i| features.class_prototypes[i] == i % 5)
        .count() as f64
        / features.labels.len() as f64;
    ensure(acc >= 0.9, || {
        let per: Vec<String> = eval.per_class.iter().map(|c| format!("{} {:.2}", c.class, c.accuracy)).collect();
        format!("probe accuracy {acc:.3} ({}); class-prototype agreement {agree:.3}", per.join(", "))
    })?;
    // Class i's prototype is bank row i by construction.
    let class_map: BTreeMap<String, usize> = classes.iter().enumerate().map(|(i, c)| (c.name.clone(), i)).collect();
    let report = zero_prototype_ablation(&model, &data, &probe, &features, &split, &class_map, false, 64)
        .map_err(err)?;
    for e in &report.entries {
        ensure(e.delta >= 0.3, || format!("class {}: accuracy drop {:.3}", e.class, e.delta))?;
        ensure(e.max_untouched_change <= 0.05, || {
            format!("zeroing {} moved other classes by {:.3}", e.class, e.max_untouched_change)
        })?;
    }
    let min_drop = report.entries.iter().map(|e| e.delta).fold(f64::INFINITY, f64::min);
    let max_other = report.entries.iter().map(|e| e.max_untouched_change).fold(0.0, f64::max);
    Ok(format!(
        "accuracy {acc:.3}; per-class drop ≥ {min_drop:.3}, untouched change ≤ {max_other:.3}"
    ))
}

// ---------------------------------------------------------------- index

fn all_queries(index: &PrototypeIndex, datasets: &[&str]) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    for p in 0..index.k() {
        for kind in [TokenKind::Any, TokenKind::Class, TokenKind::Patch] {
            for rank in [Rank::Count, Rank::Affinity] {
                for d in std::iter::once(None).chain(datasets.iter().map(|d| Some(*d))) {
                    let q = index.query_occurrences(p, d, kind, rank).map_err(err)?;
                    out.extend(serde_json::to_vec(&q).map_err(err)?);
                    out.push(b'\n');
                }
            }
        }
        out.extend(serde_json::to_vec(&index.total_counts(p).map_err(err)?).map_err(err)?);
    }
    Ok(out)
}

/// Queries are byte-identical after save/load, and merging four shards in
/// any order reproduces the index of the concatenation.
fn index_round_trip_and_merge() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (k, n) = (24, 16);
    let datasets = ["A", "B", "C"];
    let records = random_records(&mut rng, &datasets, 60, k, n);
    let full = PrototypeIndex::build(k, n, &records).map_err(err)?;
    let expected = all_queries(&full, &datasets)?;

    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path().join("idx");
    let manifest = IndexManifest {
        format: INDEX_FORMAT.into(),
        num_prototypes: k,
        num_patches: n,
        grid: (4, 4),
        checkpoint: "checkpoint.safetensors".into(),
        checkpoint_hash: "0".repeat(64),
        datasets: datasets
            .iter()
            .map(|d| {
                let p = dir.path().join(d);
                std::fs::create_dir_all(&p).map_err(err)?;
                Ok(IndexedDataset {
                    descriptor: protosim_core::data::DatasetDescriptor::new(d, &p).map_err(err)?,
                    images: 60,
                    skipped: 0,
                    records_file: protosim_core::index::records_file_name(d),
                })
            })
            .collect::<Result<_, String>>()?,
    };
    IndexStore::save(&root, &manifest, &records).map_err(err)?;
    let cached = IndexStore::load(&root, false).map_err(err)?;
    ensure(all_queries(&cached.index, &datasets)? == expected, || "queries differ after load".into())?;
    std::fs::remove_file(root.join(protosim_core::index::POSTINGS_FILE)).map_err(err)?;
    let rebuilt = IndexStore::load(&root, true).map_err(err)?;
    ensure(all_queries(&rebuilt.index, &datasets)? == expected, || {
        "queries differ after rebuilding the postings cache".into()
    })?;

    let mut shuffled = records.clone();
    use rand::seq::SliceRandom;
    shuffled.shuffle(&mut rng);
    let shards: Vec<PrototypeIndex> = shuffled
        .chunks(shuffled.len().div_ceil(4))
        .map(|c| PrototypeIndex::build(k, n, c).map_err(err))
        .collect::<Result<_, _>>()?;
    ensure(shards.len() == 4, || format!("{} shards", shards.len()))?;
    let mut orders = 0;
    for perm in permutations(4) {
        let left = perm[1..].iter().try_fold(shards[perm[0]].clone(), |acc, &i| acc.merge(&shards[i]));
        let left = left.map_err(err)?;
        ensure(all_queries(&left, &datasets)? == expected, || format!("left fold {perm:?} differs"))?;
        let tree = shards[perm[0]]
            .merge(&shards[perm[1]])
            .and_then(|a| shards[perm[2]].merge(&shards[perm[3]]).and_then(|b| a.merge(&b)))
            .map_err(err)?;
        ensure(all_queries(&tree, &datasets)? == expected, || format!("tree merge {perm:?} differs"))?;
        orders += 2;
    }
    Ok(format!(
        "{} bytes of query results identical after save/load and cache rebuild; {orders} merge orders of 4 shards agree",
        expected.len()
    ))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

// -------------------------------------------------------------- service

/// Every golden request answers exactly as checked in, across two
/// independent server starts.
fn service_contract() -> Check {
    use protosim_service::fixture::{build_fixture, golden_dir, golden_text, TestServer, GOLDEN_REQUESTS};
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(err)?;
    rt.block_on(async {
        let dir = tempfile::tempdir().map_err(err)?;
        let fixture = build_fixture(&dir.path().join("fx")).map_err(err)?;
        let mut runs = Vec::new();
        for restart in 0..2 {
            let cache = dir.path().join(format!("cache{restart}"));
            let state = protosim_service::AppState::load(&fixture.serve_config(&cache)).map_err(err)?;
            let server = TestServer::start(Arc::new(state)).await.map_err(err)?;
            let client = protosim_client::Client::new(&server.url());
            let mut texts = BTreeMap::new();
            for (name, path) in GOLDEN_REQUESTS {
                let r = client.get_raw(path).await.map_err(err)?;
                texts.insert(*name, golden_text(r.status.as_u16(), r.content_type.as_deref().unwrap_or(""), &r.body));
            }
            server.stop().await.map_err(err)?;
            runs.push(texts);
        }
        ensure(runs[0] == runs[1], || "responses differ between restarts".into())?;
        for (name, text) in &runs[0] {
            let path = golden_dir().join(format!("{name}.txt"));
            let want = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            ensure(&want == text, || format!("{name} differs from its golden file"))?;
        }
        Ok(format!("{} endpoints match golden files across 2 restarts", runs[0].len()))
    })
}

// ----------------------------------------------------------------- main

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: &[(&str, fn() -> Check)] = &[
        ("assignment-laws", assignment_laws),
        ("straight-through-gradients", straight_through_gradients),
        ("gumbel-fidelity", gumbel_fidelity),
        ("dino-loss", dino_loss_checks),
        ("ema-and-freezing", ema_and_freezing),
        ("planted-end-to-end", planted_end_to_end),
        ("soft-to-hard-bump", soft_to_hard_bump),
        ("specificity-oracle", specificity_oracle),
        ("centre-bias", centre_bias),
        ("probe-and-ablation", probe_and_ablation),
        ("index-round-trip-and-merge", index_round_trip_and_merge),
        ("service-contract", service_contract),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| {
                Err(p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()))
            });
        let el = t0.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{el:.1?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{el:.1?}]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

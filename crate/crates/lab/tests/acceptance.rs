//! Acceptance suite. Every test prints one `criterion N ... PASS|FAIL` line
//! straight to stderr so the verdicts show up even when output is captured.

use std::io::Write;
use std::sync::OnceLock;

use comve_core::checkpoint::Checkpoint;
use comve_core::data::{augment, generate_synthetic, Augmenter, DatasetSplit, SplitName, SyntheticLexicon};
use comve_core::encoder::{EncoderConfig, LayerStack, Mode};
use comve_core::models::{fuse, ComveModel, ModelConfig, Task};
use comve_core::param::Grads;
use comve_core::rng::{seeded, standard_normal};
use comve_core::tensor::Tensor;
use comve_core::tokenizer::{TokenSequence, Vocab};
use comve_core::train::{
    batch_gradient, build_vocab, ensemble_predict, evaluate, fresh_model, instance_inputs, learning_curve, train,
    transfer_init, TrainConfig, TrainData, TrainOutcome, Variant,
};
use comve_lab::cli::run;
use comve_lab::io::{load_checkpoint, save_checkpoint};
use rand::seq::SliceRandom;
use tempfile::TempDir;

const HINT_SIGNAL: f64 = 0.3;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

type Verdict = Result<String, String>;

fn report(n: usize, name: &str, verdict: Verdict) {
    let (tag, detail) = match &verdict {
        Ok(d) => ("PASS", d.as_str()),
        Err(d) => ("FAIL", d.as_str()),
    };
    let line = format!("criterion {n} {name}: {tag} ({detail})\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
    if let Err(d) = verdict {
        panic!("criterion {n} failed: {d}");
    }
}

/// CPU seconds consumed by the calling thread.
fn thread_cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid out-pointer for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    assert_eq!(rc, 0);
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

fn synth(n: usize, seed: u64, split: SplitName) -> DatasetSplit {
    generate_synthetic(n, seed, &SyntheticLexicon::default(), HINT_SIGNAL, split).unwrap()
}

fn encoder(vocab_size: usize, hidden: usize, layers: usize, heads: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        hidden_size: hidden,
        embedding_size: hidden,
        num_layers: layers,
        num_heads: heads,
        ffn_size: 4 * hidden,
        max_position: 64,
        share_parameters: false,
        dropout: 0.0,
    }
}

/// The desk-scale configuration used for every training criterion.
fn desk_config(task: Task, vocab: &Vocab) -> TrainConfig {
    TrainConfig {
        task,
        model: ModelConfig {
            encoder: encoder(vocab.len(), 32, 2, 4),
            fusion_window: 2,
        },
        learning_rate: 1.5e-3,
        batch_size: 32,
        epochs: 10,
        eval_every: 200,
        patience: 1000,
        seed: 0,
        ..TrainConfig::default()
    }
}

fn jitter(model: &mut ComveModel, seed: u64, scale: f64) {
    let mut rng = seeded(seed);
    for id in model.store.ids().collect::<Vec<_>>() {
        for x in model.store.get_mut(id).data_mut() {
            *x += scale * standard_normal(&mut rng);
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// 1 -------------------------------------------------------------------------

fn forward_loss(model: &ComveModel, batch: &[(Vec<TokenSequence>, usize)]) -> f64 {
    let mut tape = comve_core::autodiff::Tape::with_params(&model.store);
    let groups: Vec<&[TokenSequence]> = batch.iter().map(|(g, _)| g.as_slice()).collect();
    let probs = model.probabilities_on_tape(&mut tape, &groups, &mut Mode::Eval).unwrap();
    let p = tape.value(probs);
    let width = groups[0].len();
    let total: f64 = batch.iter().enumerate().map(|(i, (_, y))| -p.data()[i * width + y].ln()).sum();
    total / batch.len() as f64
}

/// Worst norm-wise relative error over all parameter tensors, with the name
/// of the offending tensor. Tensors whose two gradients are both below
/// `1e-9` in norm count as matching.
fn gradient_error(task: Task) -> (f64, String, usize) {
    let train_split = synth(400, 1, SplitName::Train);
    let vocab = build_vocab(&train_split, 400).unwrap();
    let config = ModelConfig {
        encoder: EncoderConfig {
            embedding_size: 8,
            max_position: 48,
            ..encoder(vocab.len(), 16, 2, 2)
        },
        fusion_window: 2,
    };
    let mut model = ComveModel::init(task, &config, vocab, 21).unwrap();
    jitter(&mut model, 22, 0.3);
    let batch: Vec<_> = synth(2, 23, SplitName::Dev)
        .instances()
        .iter()
        .map(|i| instance_inputs(&model, i, true).unwrap())
        .collect();
    let refs: Vec<_> = batch.iter().collect();
    let mut grads = Grads::for_store(&model.store);
    batch_gradient(&model, &refs, &mut grads, &mut Mode::Eval).unwrap();

    const H: f64 = 1e-5;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut worst = (0.0, String::new(), 0);
    for id in model.store.ids().collect::<Vec<_>>() {
        let analytic = grads.get(id).to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x = model.store.get(id).data()[j];
            model.store.get_mut(id).data_mut()[j] = x + H;
            let up = forward_loss(&model, &batch);
            model.store.get_mut(id).data_mut()[j] = x - H;
            let down = forward_loss(&model, &batch);
            model.store.get_mut(id).data_mut()[j] = x;
            *slot = (up - down) / (2.0 * H);
        }
        worst.2 += analytic.len();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        let err = if scale < 1e-9 { 0.0 } else { norm(&diff) / scale };
        if err > worst.0 {
            worst.0 = err;
            worst.1 = model.store.entry(id).name.clone();
        }
    }
    worst
}

#[test]
fn criterion_1_gradient_fidelity() {
    let mut details = Vec::new();
    let mut ok = true;
    for task in [Task::SenMaking, Task::Explanation] {
        let start = thread_cpu_seconds();
        let (err, name, count) = gradient_error(task);
        let cpu = thread_cpu_seconds() - start;
        ok &= err < 1e-4 && cpu < 60.0;
        details.push(format!(
            "{}: {count} scalars, max rel err {err:.2e} in {name}, {cpu:.1} s cpu",
            task.name()
        ));
    }
    let d = details.join("; ");
    report(1, "gradient fidelity", if ok { Ok(d) } else { Err(d) });
}

// 2 -------------------------------------------------------------------------

fn jittered_model(task: Task, seed: u64) -> ComveModel {
    let train_split = synth(200, 1, SplitName::Train);
    let vocab = build_vocab(&train_split, 200).unwrap();
    let config = ModelConfig {
        encoder: encoder(vocab.len(), 32, 2, 4),
        fusion_window: 2,
    };
    let mut model = ComveModel::init(task, &config, vocab, seed).unwrap();
    jitter(&mut model, seed + 1, 0.1);
    model
}

fn symmetries() -> Verdict {
    let dev = synth(100, 31, SplitName::Dev);
    let a = jittered_model(Task::SenMaking, 32);
    for inst in dev.instances() {
        let ab = a.senmaking_forward(&inst.s1, &inst.s2).map_err(|e| e.to_string())?;
        let ba = a.senmaking_forward(&inst.s2, &inst.s1).map_err(|e| e.to_string())?;
        if ab[0].to_bits() != ba[1].to_bits() || ab[1].to_bits() != ba[0].to_bits() {
            return Err(format!("swap changed {}: {ab:?} vs {ba:?}", inst.id));
        }
    }
    let b = jittered_model(Task::Explanation, 33);
    let mut rng = seeded(34);
    for inst in dev.instances() {
        let opts: Vec<&str> = inst.options.as_ref().unwrap().iter().map(String::as_str).collect();
        let hint = comve_core::data::hint_of(inst);
        let base = b.explanation_forward(inst.nonsense(), hint, &opts).map_err(|e| e.to_string())?;
        let mut perm = vec![0usize, 1, 2];
        perm.shuffle(&mut rng);
        let shuffled: Vec<&str> = perm.iter().map(|&i| opts[i]).collect();
        let out = b.explanation_forward(inst.nonsense(), hint, &shuffled).map_err(|e| e.to_string())?;
        if perm.iter().enumerate().any(|(slot, &i)| out[slot].to_bits() != base[i].to_bits()) {
            return Err(format!("permutation {perm:?} changed {}", inst.id));
        }
    }
    for inst in dev.instances().iter().take(20) {
        let same = a.senmaking_forward(&inst.s1, &inst.s1).map_err(|e| e.to_string())?;
        let opt = &inst.options.as_ref().unwrap()[0];
        let triple = b
            .explanation_forward(inst.nonsense(), "", &[opt, opt, opt])
            .map_err(|e| e.to_string())?;
        if same != [0.5, 0.5] || triple.iter().any(|&p| p != 1.0 / 3.0) {
            return Err(format!("identical candidates not uniform on {}: {same:?} {triple:?}", inst.id));
        }
    }
    Ok("100 swaps and 100 option permutations bitwise equal, 20 identical-candidate checks exactly uniform".into())
}

#[test]
fn criterion_2_exact_symmetries() {
    report(2, "exact symmetries", symmetries());
}

// 3 -------------------------------------------------------------------------

fn fusion() -> Verdict {
    let model = jittered_model(Task::SenMaking, 41);
    let one = synth(1, 42, SplitName::Dev);
    let inst = &one.instances()[0];
    let seq = &model.dual_order_inputs(&inst.s1, &inst.s2).map_err(|e| e.to_string())?[0];
    let mut stack = model.encode(seq).map_err(|e| e.to_string())?;
    // Two more layers of arbitrary values so windows up to four fit.
    let mut rng = seeded(43);
    for _ in 0..2 {
        let shape = stack.states[0].shape().to_vec();
        let n = shape.iter().product();
        stack
            .states
            .push(Tensor::new(shape, (0..n).map(|_| standard_normal(&mut rng)).collect()).unwrap());
    }
    let stack = LayerStack { states: stack.states };
    let layers = stack.num_layers();

    for omega in [[0.0], [3.7], [-250.0]] {
        if fuse(&stack, &omega).unwrap() != stack.cls(layers) {
            return Err(format!("K=1 with omega {omega:?} is not the last CLS"));
        }
    }
    for k in [2usize, 4] {
        let fused = fuse(&stack, &vec![0.0; k]).unwrap();
        let d = fused.len();
        let expected: Vec<f64> = (0..d)
            .map(|j| (layers + 1 - k..=layers).map(|l| stack.cls(l)[j]).sum::<f64>() / k as f64)
            .collect();
        if fused != expected {
            return Err(format!("omega = 0 with K={k} is not the mean"));
        }
    }
    let omega = [0.25, -1.5, 2.0, 0.75];
    let base = fuse(&stack, &omega).unwrap();
    for c in [-3.0, 0.5, 17.0, 1024.0] {
        let shifted: Vec<f64> = omega.iter().map(|w| w + c).collect();
        if fuse(&stack, &shifted).unwrap() != base {
            return Err(format!("shift by {c} changed the fused vector"));
        }
    }
    Ok("K=1 equals last-layer CLS, zero omega gives the exact mean for K in {2, 4}, shifts by {-3, 0.5, 17, 1024} bitwise invariant".into())
}

#[test]
fn criterion_3_fusion_correctness() {
    report(3, "fusion correctness", fusion());
}

// 4 -------------------------------------------------------------------------

#[test]
fn criterion_4_random_baselines() {
    let train_split = synth(10_000, 101, SplitName::Train);
    let vocab = build_vocab(&train_split, 400).unwrap();
    let dev = synth(1000, 102, SplitName::Dev);
    let first = dev.instances().iter().filter(|i| i.sensible_index() == 0).count();
    let mut reasons = [0usize; 3];
    for i in dev.instances() {
        reasons[i.reason_index.unwrap()] += 1;
    }
    let mut details = vec![format!("labels: sensible first {first}/1000, reasons {reasons:?}")];
    let mut ok = true;
    for (task, chance) in [(Task::SenMaking, 0.5), (Task::Explanation, 1.0 / 3.0)] {
        let model = fresh_model(&desk_config(task, &vocab), vocab.clone()).unwrap();
        let acc = evaluate(&model, &dev, true).unwrap().accuracy;
        ok &= (acc - chance).abs() <= 0.05;
        details.push(format!("{} untrained accuracy {acc:.3} (chance {chance:.3})", task.name()));
    }
    let d = details.join("; ");
    report(4, "random baselines", if ok { Ok(d) } else { Err(d) });
}

// 5 -------------------------------------------------------------------------

struct Learned {
    vocab: Vocab,
    train: DatasetSplit,
    dev: DatasetSplit,
    runs: Vec<(Task, TrainOutcome, f64)>,
}

/// Both task models trained on 10000/1000/1000 synthetic instances, shared
/// with the transfer and ablation criteria.
fn learned() -> &'static Learned {
    static CELL: OnceLock<Learned> = OnceLock::new();
    CELL.get_or_init(|| {
        let train_split = synth(10_000, 201, SplitName::Train);
        let dev = synth(1000, 202, SplitName::Dev);
        let test = synth(1000, 203, SplitName::Test);
        let vocab = build_vocab(&train_split, 400).unwrap();
        let runs = [Task::SenMaking, Task::Explanation]
            .into_iter()
            .map(|task| {
                let config = TrainConfig {
                    target_dev_accuracy: Some(0.9),
                    ..desk_config(task, &vocab)
                };
                let data = TrainData {
                    train: &train_split,
                    dev: &dev,
                    test: Some(&test),
                };
                let start = thread_cpu_seconds();
                let out = train(&config, fresh_model(&config, vocab.clone()).unwrap(), &data, None).unwrap();
                (task, out, thread_cpu_seconds() - start)
            })
            .collect();
        Learned {
            vocab,
            train: train_split,
            dev,
            runs,
        }
    })
}

fn overfit(task: Task) -> (f64, u64) {
    let small = synth(32, 301, SplitName::Train);
    let vocab = build_vocab(&synth(10_000, 201, SplitName::Train), 400).unwrap();
    let config = TrainConfig {
        epochs: 300,
        eval_every: 10,
        target_dev_accuracy: Some(1.0),
        ..desk_config(task, &vocab)
    };
    let as_dev = small.clone().with_name(SplitName::Dev);
    let data = TrainData {
        train: &small,
        dev: &as_dev,
        test: None,
    };
    let out = train(&config, fresh_model(&config, vocab).unwrap(), &data, None).unwrap();
    (out.history.best_dev_accuracy, out.history.best_step)
}

#[test]
fn criterion_5_learnability() {
    let mut details = Vec::new();
    let mut ok = true;
    for task in [Task::SenMaking, Task::Explanation] {
        let (acc, step) = overfit(task);
        ok &= acc == 1.0 && step <= 300;
        details.push(format!("{} overfits 32 to {acc:.3} by step {step}", task.name()));
    }
    let learned = learned();
    let mut total_cpu = 0.0;
    for (task, out, cpu) in &learned.runs {
        let h = &out.history;
        let steps_per_epoch = learned.train.len().div_ceil(32) as u64;
        ok &= h.best_dev_accuracy >= 0.9 && h.best_step <= 10 * steps_per_epoch;
        total_cpu += cpu;
        details.push(format!(
            "{} dev {:.3} at step {} (epoch {:.1}), test {:.3}, {cpu:.0} s cpu",
            task.name(),
            h.best_dev_accuracy,
            h.best_step,
            h.best_step as f64 / steps_per_epoch as f64,
            h.final_test_accuracy.unwrap_or(f64::NAN)
        ));
    }
    ok &= total_cpu < 1800.0;
    let d = details.join("; ");
    report(5, "learnability", if ok { Ok(d) } else { Err(d) });
}

// 6-8 shared ----------------------------------------------------------------

fn source(task: Task) -> &'static Checkpoint {
    &learned().runs.iter().find(|(t, _, _)| *t == task).unwrap().1.checkpoint
}

/// Paired comparison: how many seeds favour `a` over `b`, and both means.
fn paired(a: &[f64], b: &[f64]) -> (usize, usize, f64, f64) {
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let ties = a.iter().zip(b).filter(|(x, y)| x == y).count();
    (wins, ties, mean(a), mean(b))
}

fn fmt(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Ablation runs start from the encoder of the other task's model, as the
/// full system does, and train on the full train split for three epochs.
fn ablation_run(task: Task, from: Task, seed: u64, hint: bool) -> f64 {
    let learned = learned();
    let config = TrainConfig {
        seed,
        epochs: 3,
        eval_every: 0,
        hint_enabled: hint,
        ..desk_config(task, &learned.vocab)
    };
    let model = transfer_init(source(from), task, &config.model, seed).unwrap();
    let data = TrainData {
        train: &learned.train,
        dev: &learned.dev,
        test: None,
    };
    train(&config, model, &data, None).unwrap().history.best_dev_accuracy
}

// 6 -------------------------------------------------------------------------

#[test]
fn criterion_6_hint_ablation() {
    let with: Vec<f64> = SEEDS.iter().map(|&s| ablation_run(Task::Explanation, Task::SenMaking, s, true)).collect();
    let without: Vec<f64> = SEEDS.iter().map(|&s| ablation_run(Task::Explanation, Task::SenMaking, s, false)).collect();
    let (wins, _, m_with, m_without) = paired(&with, &without);
    let d = format!(
        "hint wins {wins}/5 seeds, mean {m_with:.3} vs {m_without:.3}, with {} without {}",
        fmt(&with),
        fmt(&without)
    );
    report(6, "hint ablation direction", if wins >= 4 { Ok(d) } else { Err(d) });
}

// 7 -------------------------------------------------------------------------

#[test]
fn criterion_7_transfer_direction() {
    let learned = learned();
    let dev = DatasetSplit::new(SplitName::Dev, learned.dev.instances()[..500].to_vec()).unwrap();
    let config = TrainConfig {
        epochs: 10,
        eval_every: 0,
        ..desk_config(Task::Explanation, &learned.vocab)
    };
    let data = TrainData {
        train: &learned.train,
        dev: &dev,
        test: None,
    };
    let rows = learning_curve(
        &config,
        &learned.vocab,
        &data,
        &[0.1, 0.2],
        &SEEDS,
        Some(source(Task::SenMaking)),
    )
    .unwrap();
    let mut ok = true;
    let mut details = Vec::new();
    for fraction in [0.1, 0.2] {
        let pick = |v: Variant| -> Vec<f64> {
            rows.iter()
                .filter(|r| r.fraction == fraction && r.variant == v)
                .map(|r| r.dev_accuracy)
                .collect()
        };
        let (transfer, fresh) = (pick(Variant::Transfer), pick(Variant::Fresh));
        let (wins, _, mt, mf) = paired(&transfer, &fresh);
        ok &= transfer.len() >= 5 && mt > mf;
        details.push(format!(
            "fraction {fraction}: transfer mean {mt:.3} vs fresh {mf:.3} (wins {wins}/5) {} vs {}",
            fmt(&transfer),
            fmt(&fresh)
        ));
    }
    let d = details.join("; ");
    report(7, "transfer direction", if ok { Ok(d) } else { Err(d) });
}

// 8 -------------------------------------------------------------------------

#[test]
fn criterion_8_dual_order_vs_baseline() {
    let dual: Vec<f64> = SEEDS.iter().map(|&s| ablation_run(Task::SenMaking, Task::Explanation, s, true)).collect();
    let single: Vec<f64> = SEEDS
        .iter()
        .map(|&s| ablation_run(Task::BaselineSenMaking, Task::Explanation, s, true))
        .collect();
    let (wins, ties, m_dual, m_single) = paired(&dual, &single);
    let d = format!(
        "dual-order mean {m_dual:.3} vs independent {m_single:.3} (wins {wins}, ties {ties} of 5) {} vs {}",
        fmt(&dual),
        fmt(&single)
    );
    report(8, "dual-order vs baseline", if m_dual >= m_single { Ok(d) } else { Err(d) });
}

// 9 -------------------------------------------------------------------------

fn comve(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["comve"];
    argv.extend_from_slice(args);
    match run(argv) {
        0 => Ok(()),
        code => Err(format!("`comve {}` exited with {code}", args.join(" "))),
    }
}

fn pipeline() -> Verdict {
    let split = synth(300, 401, SplitName::Train);
    let doubled = augment(&split, Augmenter::Paraphrase, 402).map_err(|e| e.to_string())?;
    if doubled.len() != 2 * split.len() {
        return Err(format!("augmentation gave {} from {}", doubled.len(), split.len()));
    }
    for orig in split.instances() {
        let copy = doubled
            .instances()
            .iter()
            .find(|i| i.id != orig.id && i.id.starts_with(&orig.id))
            .ok_or(format!("no augmented copy of {}", orig.id))?;
        if copy.nonsense_index != orig.nonsense_index
            || copy.reason_index != orig.reason_index
            || copy.options != orig.options
        {
            return Err(format!("labels drifted on {}", orig.id));
        }
    }

    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let path = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    comve(&["synth", "--n", "64", "--dev-n", "16", "--test-n", "16", "--seed", "3", "--out", &path("data")])?;
    let config = r#"{
  "train": {
    "task": "explanation",
    "model": {
      "encoder": {"vocab_size": 200, "hidden_size": 16, "embedding_size": 16, "num_layers": 2,
                  "num_heads": 2, "ffn_size": 64, "max_position": 64, "share_parameters": false, "dropout": 0.1},
      "fusion_window": 2
    },
    "learning_rate": 0.003, "batch_size": 16, "epochs": 3, "eval_every": 4, "seed": 8
  },
  "data": {"train": "data/train.jsonl", "dev": "data/dev.jsonl", "test": "data/test.jsonl"},
  "vocab_size": 200
}"#;
    std::fs::write(path("run.json"), config).map_err(|e| e.to_string())?;
    comve(&["train", "--config", &path("run.json"), "--out", &path("r1")])?;
    comve(&["train", "--config", &path("run.json"), "--out", &path("r2")])?;
    for name in ["best.ckpt", "metrics.json", "history.csv", "vocab.txt", "merges.txt", "resolved_config.json"] {
        let a = std::fs::read(dir.path().join("r1").join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dir.path().join("r2").join(name)).map_err(|e| e.to_string())?;
        // The resolved config records the output directory, which differs.
        if name != "resolved_config.json" && a != b {
            return Err(format!("{name} differs between identical runs"));
        }
    }

    let ckpt_path = dir.path().join("r1").join("best.ckpt");
    let bytes = std::fs::read(&ckpt_path).map_err(|e| e.to_string())?;
    let ckpt = load_checkpoint(&ckpt_path).map_err(|e| e.to_string())?;
    let copy = dir.path().join("copy.ckpt");
    save_checkpoint(&copy, &ckpt).map_err(|e| e.to_string())?;
    if std::fs::read(&copy).map_err(|e| e.to_string())? != bytes {
        return Err("checkpoint changed on save/load".into());
    }

    let model = ckpt.to_model().map_err(|e| e.to_string())?;
    let dev = comve_lab::io::load_split(&dir.path().join("data").join("dev.jsonl"), SplitName::Dev)
        .map_err(|e| e.to_string())?;
    let single = evaluate(&model, &dev, true).map_err(|e| e.to_string())?;
    let members = vec![single.predictions.clone(); 3];
    let voted = ensemble_predict(&members).map_err(|e| e.to_string())?;
    if voted.iter().zip(&single.predictions).any(|((id, v), p)| *id != p.id || *v != p.predicted) {
        return Err("ensemble of identical members disagrees with the member".into());
    }
    Ok(format!(
        "augmentation {} -> {} with labels kept, two CLI training runs byte-identical, checkpoint of {} bytes round-trips, 3-member identical ensemble equals the single model",
        split.len(),
        doubled.len(),
        bytes.len()
    ))
}

#[test]
fn criterion_9_pipeline_exactness() {
    report(9, "pipeline exactness", pipeline());
}

//! End-to-end acceptance suite. Each criterion prints one `PASS`/`FAIL` line
//! and asserts; criteria run one at a time so wall-clock budgets are
//! measured without contention.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use contamlab::contamination::{
    inject, ratio_build, section_bounds, verify_manifest, ContaminationPlan, LabelFormat, Placement, Stage,
};
use contamlab::evaluation::{candidate_argmax, gap_points, read_records, side_accuracy, Side, Summary};
use contamlab::lab::{
    aggregate, build_corpus, build_data, preset, run_sweep, seed_tradeoff, AggregateRow, AxisPoint, ExperimentSpec,
    LrChoice, RunRecord,
};
use contamlab::model::{Bound, ModelConfig, ModelParams, TokenBatch};
use contamlab::tensor::{finite_difference_check, Tape, Tensor, Var, IGNORE_INDEX};
use contamlab::textdata::{gen_clean_corpus, gen_task, CorpusGen, TaskGen, CLS_ID, MASK_ID, PAD_ID, SEP_ID};
use contamlab::training::{
    adamw_step, audit_stage_order, batch_schedule, lr_at, mask_batch, AdamWConfig, CorruptionSplit, LrPolicy,
    MaskingConfig, ModelCheckpoint, OptimizerState,
};
use contamlab::Result;

// Pinned tolerances and budgets.
const GRAD_EPS: f64 = 1e-6;
const GRAD_INSTANCES: u64 = 10;
const GRAD_MAX_REL_ERR: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const ADAMW_TOL: f64 = 1e-12;
const LR_TOL: f64 = 1e-12;
const CONSTANT_LR: f64 = 2.77e-5;
const MASK_POSITIONS_MIN: usize = 100_000;
const MASK_FRACTION_RANGE: (f64, f64) = (0.145, 0.155);
const AUDIT_PAIRS: usize = 100;
const RATIO_SLACK_INSTANCES: f64 = 1.0;
const SHIFT_VECTORS: usize = 1000;
const NULL_SEEDS: usize = 10;
const NULL_SEM_MULTIPLE: f64 = 2.0;
const NULL_BUDGET: Duration = Duration::from_secs(15 * 60);
const COPIES: [usize; 4] = [0, 25, 100, 400];
const COPIES_TRIALS: usize = 5;
const COPIES_MAX_INVERSIONS: usize = 1;
const COPIES_INVERSION_POINTS: f64 = 1.0;
const COPIES_MEM_RISE: f64 = 10.0;
const COPIES_EXPL_RISE: f64 = 3.0;
const COPIES_BUDGET: Duration = Duration::from_secs(90 * 60);
const LABEL_MASK_QS: [f64; 4] = [0.0, 0.15, 0.5, 1.0];
const LABEL_MASK_COPIES: usize = 100;
const LABEL_MASK_STEP_TOL: f64 = 2.0;
const BATCH_SIZES: (usize, usize) = (4, 32);
const BATCH_MEM_GAP: f64 = 2.0;
const TRADEOFF_MAX_TRIALS: usize = 10;
const TRADEOFF_CASES: usize = 300;
const SPEARMAN_TOL: f64 = 1e-12;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Scratch directory shared by the sweep criteria of this run; checkpoints
/// are reused across criteria by configuration key.
fn workdir() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().expect("temp dir")).path()
}

fn sweep_dir(name: &str) -> PathBuf {
    let dir = workdir().join(name);
    std::fs::create_dir_all(&dir).unwrap();
    let shared = workdir().join("checkpoints");
    std::fs::create_dir_all(&shared).unwrap();
    #[cfg(unix)]
    {
        let link = dir.join("checkpoints");
        if !link.exists() {
            std::os::unix::fs::symlink(&shared, &link).unwrap();
        }
    }
    dir
}

fn report(id: u32, name: &str, ok: bool, detail: &str) {
    println!("criterion {id:>2} {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
}

fn run(spec: &mut ExperimentSpec, dir_name: &str) -> Vec<RunRecord> {
    spec.out_dir = Some(sweep_dir(dir_name));
    let out = run_sweep(spec).unwrap();
    for r in out.records.iter().filter(|r| !r.completed()) {
        println!("  trial failure at {}: {}", r.axis.label(), r.failure.as_deref().unwrap_or("?"));
    }
    assert_eq!(out.failures, 0, "{dir_name}: failed trials");
    out.records
}

fn rows(records: &[RunRecord]) -> Vec<AggregateRow> {
    aggregate(records).unwrap()
}

fn print_rows(rows: &[AggregateRow]) {
    for r in rows {
        println!(
            "  {:>12}: Mem {:7.2} Expl {:7.2} (sd {:.2}) unseen acc {:6.2}",
            r.axis.label(),
            r.mem.mean,
            r.expl.mean,
            r.expl.sd.unwrap_or(0.0),
            r.unseen_acc.mean
        );
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Weighted sum so every output coordinate reaches the scalar with a distinct coefficient.
fn project(tape: &mut Tape<f64>, y: Var, rng_seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = tape.constant(random_tensor(&mut rng, &shape, 1.0));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type Primitive = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn primitives() -> Vec<Primitive> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("batched_matmul", vec![vec![2, 3, 4], vec![2, 4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add", vec![vec![2, 3], vec![3]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![vec![2, 3]], Box::new(|t, v| t.scale(v[0], 0.37))),
        ("gelu", vec![vec![2, 5]], Box::new(|t, v| t.gelu(v[0]))),
        ("tanh", vec![vec![2, 5]], Box::new(|t, v| t.tanh(v[0]))),
        ("softmax", vec![vec![3, 4]], Box::new(|t, v| t.softmax(v[0]))),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))),
        ("gather", vec![vec![5, 3]], Box::new(|t, v| t.gather(v[0], &[4, 0, 4, 2], &[2, 2]))),
        ("concat", vec![vec![2, 3], vec![2, 2]], Box::new(|t, v| t.concat(&[v[0], v[1]], 1))),
        ("slice", vec![vec![2, 5]], Box::new(|t, v| t.slice(v[0], 1, 1, 4))),
        ("transpose", vec![vec![2, 3, 4]], Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", vec![vec![2, 6]], Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        ("sum", vec![vec![3, 3]], Box::new(|t, v| t.sum(v[0]))),
        ("cross_entropy", vec![vec![4, 5]], Box::new(|t, v| t.cross_entropy(v[0], &[1, IGNORE_INDEX, 4, 0], IGNORE_INDEX))),
        ("dropout_eval", vec![vec![2, 3]], Box::new(|t, v| t.dropout(v[0], 0.3, false))),
    ]
}

/// Toy MLM loss with the model's parameters as the checked inputs.
fn mlm_loss_check(seed: u64) -> f64 {
    let cfg = ModelConfig {
        num_layers: 1,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 12,
        max_seq_len: 6,
        dropout_rate: 0.0,
        ..ModelConfig::toy(16)
    };
    let params = ModelParams::<f64>::init(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Perturb so biases and gains are not at their initial constants.
    let inputs: Vec<Tensor<f64>> = params
        .tensors()
        .iter()
        .map(|t| {
            let data = t.data().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
            Tensor::from_vec(t.shape().to_vec(), data).unwrap()
        })
        .collect();
    let seqs = vec![
        vec![CLS_ID, MASK_ID, 7, 9, SEP_ID, PAD_ID],
        vec![CLS_ID, 11, MASK_ID, 5, 15, SEP_ID],
    ];
    let batch = TokenBatch::from_sequences(&seqs);
    let positions = [1usize, 8];
    let targets = [12i64, 6];
    let f = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let bound = Bound::from_vars(&params, vars)?;
        let hidden = bound.encode(tape, &batch, false)?;
        let logits = bound.mlm_logits_at(tape, hidden, &positions)?;
        tape.cross_entropy(logits, &targets, IGNORE_INDEX)
    };
    finite_difference_check(f, &inputs, GRAD_EPS).unwrap().max_rel_error
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let _g = serial();
    let t0 = Instant::now();
    let mut worst: (f64, &str) = (0.0, "");
    for (name, shapes, f) in primitives() {
        for i in 0..GRAD_INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(i * 7919 + name.len() as u64);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(&mut rng, s, 1.5)).collect();
            let g = finite_difference_check(|t, v| { let y = f(t, v)?; project(t, y, i) }, &inputs, GRAD_EPS).unwrap();
            if g.max_rel_error > worst.0 {
                worst = (g.max_rel_error, name);
            }
        }
    }
    for i in 0..GRAD_INSTANCES {
        let e = mlm_loss_check(i);
        if e > worst.0 {
            worst = (e, "mlm_loss");
        }
    }
    let elapsed = t0.elapsed();
    let ok = worst.0 <= GRAD_MAX_REL_ERR && elapsed <= GRAD_BUDGET;
    report(1, "finite-difference gradients", ok, &format!("max rel err {:.2e} at {}, {:.1}s", worst.0, worst.1, elapsed.as_secs_f64()));
    assert!(ok);
}

#[test]
fn criterion_02_adamw_matches_scalar_oracle() {
    let _g = serial();
    let cfg = AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-6, weight_decay: 0.01 };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 7;
    let init: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut params = vec![Tensor::from_vec(vec![n], init.clone()).unwrap()];
    let mut state = OptimizerState::new(&params);
    let (mut theta, mut m, mut v) = (init, vec![0.0; n], vec![0.0; n]);
    let mut worst = 0.0f64;
    for step in 1..=25 {
        let lr = 1e-3 * (1.0 + 0.1 * step as f64);
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        adamw_step(&mut params, &[Tensor::from_vec(vec![n], g.clone()).unwrap()], &mut state, lr, &cfg).unwrap();
        for i in 0..n {
            theta[i] -= lr * cfg.weight_decay * theta[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / (1.0 - cfg.beta1.powi(step));
            let vhat = v[i] / (1.0 - cfg.beta2.powi(step));
            theta[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            worst = worst.max((theta[i] - params[0].data()[i]).abs());
        }
    }
    let ok = worst <= ADAMW_TOL && state.step == 25;
    report(2, "AdamW step", ok, &format!("max abs diff {worst:.2e}"));
    assert!(ok);
}

#[test]
fn criterion_03_learning_rate_schedule() {
    let _g = serial();
    let mut worst = 0.0f64;
    for (total, frac, peak) in [(1000usize, 0.1, 5e-5), (37, 0.1, 1e-3), (10, 0.3, 2.0)] {
        let w = (frac * total as f64).ceil() as usize;
        let oracle = |s: usize| {
            if s < w {
                peak * (s + 1) as f64 / w as f64
            } else {
                peak * (total - s) as f64 / (total - w) as f64
            }
        };
        let policy = LrPolicy::LinearWarmupDecay { warmup_fraction: frac };
        for s in [0, w - 1, w, total / 2, total - 1] {
            worst = worst.max((lr_at(s, total, peak, &policy).unwrap() - oracle(s)).abs());
        }
    }
    let constant = LrPolicy::Constant { value: CONSTANT_LR };
    let exact = [0, 5, 99].iter().all(|&s| lr_at(s, 100, 5e-5, &constant).unwrap() == CONSTANT_LR);
    let ok = worst <= LR_TOL && exact;
    report(3, "learning-rate schedule", ok, &format!("max abs diff {worst:.2e}, constant exact {exact}"));
    assert!(ok);
}

#[test]
fn criterion_04_masking_statistics() {
    let _g = serial();
    let vocab = 200u32;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut seqs = Vec::new();
    let mut labels = Vec::new();
    let mut maskable = 0usize;
    while maskable < MASK_POSITIONS_MIN {
        let len = rng.random_range(3..20);
        let mut s = vec![CLS_ID];
        s.extend((0..len).map(|_| rng.random_range(5..vocab)));
        s.push(SEP_ID);
        s.extend([PAD_ID; 3]);
        maskable += len;
        labels.push(Some(len));
        seqs.push(s);
    }
    let cfg = MaskingConfig::default();
    let masked = mask_batch(&seqs, &vec![None; seqs.len()], &cfg, vocab as usize, &mut rng).unwrap();
    let fraction = masked.selected() as f64 / maskable as f64;
    let specials_intact = seqs.iter().zip(&masked.inputs).zip(&masked.targets).all(|((s, i), t)| {
        s.iter().enumerate().all(|(p, &id)| id >= 5 || (i[p] == id && t[p] == IGNORE_INDEX))
    });

    let full = MaskingConfig { label_mask_prob: Some(1.0), split: CorruptionSplit { mask: 1.0, random: 0.0, keep: 0.0 }, ..cfg };
    let masked = mask_batch(&seqs, &labels, &full, vocab as usize, &mut rng).unwrap();
    let labels_masked = labels.iter().zip(&masked.inputs).zip(&masked.targets).filter(|((l, i), t)| {
        let p = l.unwrap();
        i[p] == MASK_ID && t[p] != IGNORE_INDEX
    });
    let all_labels = labels_masked.count() == labels.len();

    let ok = (MASK_FRACTION_RANGE.0..=MASK_FRACTION_RANGE.1).contains(&fraction) && specials_intact && all_labels;
    report(4, "masking statistics", ok, &format!("fraction {fraction:.4} over {maskable}, specials intact {specials_intact}, q=1 labels {all_labels}"));
    assert!(ok);
}

#[test]
fn criterion_05_contamination_audit() {
    let _g = serial();
    let cg = CorpusGen { num_lines: 600, vocab_size: 150, line_len: (4, 8), ..Default::default() };
    let tg = TaskGen { num_classes: 3, num_train: 30, num_test: 40, text_len: (4, 6), cue_rank_offset: 40, ..Default::default() };
    let task = gen_task("audit", &tg, &cg, 5).unwrap();
    let clean = gen_clean_corpus(&cg, 6, &[]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut verified, mut conserved, mut contained, mut stage_cases) = (0, 0, 0, 0);
    for _ in 0..AUDIT_PAIRS {
        let placement = match rng.random_range(0..4) {
            0 => Placement::Shuffled,
            k => Placement::Stage(Stage::ALL[k - 1]),
        };
        let plan = ContaminationPlan {
            copies: rng.random_range(0..4),
            seen_fraction: rng.random_range(0.2..0.8),
            placement,
            label_format: if rng.random_bool(0.5) { LabelFormat::TextThenLabel } else { LabelFormat::LabelThenText },
            include_train_labels: rng.random_bool(0.5),
        };
        let seed = rng.random();
        let (corpus, m) = inject(&clean, &task, &plan, seed).unwrap();
        verified += usize::from(verify_manifest(&corpus, &m).passed());

        let mut expected: HashMap<&str, usize> = HashMap::new();
        for l in &clean {
            *expected.entry(l.as_str()).or_default() += 1;
        }
        for line in m.labeled_lines.values() {
            *expected.entry(line.as_str()).or_default() += plan.copies;
        }
        let mut got: HashMap<&str, usize> = HashMap::new();
        for l in &corpus {
            *got.entry(l.as_str()).or_default() += 1;
        }
        conserved += usize::from(expected == got);

        if let Placement::Stage(stage) = placement {
            stage_cases += 1;
            let (lo, hi) = section_bounds(corpus.len())[stage.index()];
            let labeled: Vec<&String> = m.labeled_lines.values().collect();
            contained += usize::from(corpus.iter().enumerate().all(|(i, l)| (lo..hi).contains(&i) || !labeled.contains(&l)));
        }
    }

    let source = gen_clean_corpus(&CorpusGen { num_lines: 20_000, ..cg.clone() }, 7, &[]).unwrap();
    let mut ratio_ok = true;
    for (ratio, target) in [((1, 10), 5000), ((1, 4), 3000), ((2, 7), 9000)] {
        let (corpus, m) = ratio_build(&task, &ContaminationPlan::default(), ratio, target, &source, 3).unwrap();
        let want = corpus.len() as f64 * ratio.0 as f64 / ratio.1 as f64;
        ratio_ok &= (m.injected.len() as f64 - want).abs() <= RATIO_SLACK_INSTANCES && verify_manifest(&corpus, &m).passed();
    }

    let ok = verified == AUDIT_PAIRS && conserved == AUDIT_PAIRS && contained == stage_cases && ratio_ok;
    report(
        5,
        "contamination audit",
        ok,
        &format!("verified {verified}/{AUDIT_PAIRS}, conserved {conserved}/{AUDIT_PAIRS}, contained {contained}/{stage_cases}, ratio {ratio_ok}"),
    );
    assert!(ok);
}

/// The cell every sweep criterion starts from, run once per suite.
fn copies_sweep_records() -> &'static Vec<RunRecord> {
    static RECORDS: OnceLock<(Vec<RunRecord>, Duration)> = OnceLock::new();
    &RECORDS
        .get_or_init(|| {
            let t0 = Instant::now();
            let mut spec = preset("copies_sweep").unwrap();
            spec.axis = COPIES.map(|copies| AxisPoint::Copies { copies }).to_vec();
            spec.num_trials = COPIES_TRIALS;
            let r = run(&mut spec, "copies");
            (r, t0.elapsed())
        })
        .0
}

#[test]
fn criterion_06_stored_records_reproduce_measures() {
    let _g = serial();
    let mut spec = preset("copies_sweep").unwrap();
    spec.axis = vec![AxisPoint::Copies { copies: 10 }];
    spec.base.corpus.num_lines = 4000;
    spec.num_trials = 2;
    let records = run(&mut spec, "records");
    let instances = sweep_dir("records").join("instances");
    let mut exact = true;
    for r in &records {
        let m = r.measures.as_ref().unwrap();
        let probe = read_records(&instances.join(format!("{}.probe.jsonl", r.fingerprint))).unwrap();
        let task = read_records(&instances.join(format!("{}.task.jsonl", r.fingerprint))).unwrap();
        let mem = gap_points(side_accuracy(&probe, Side::Seen).unwrap(), side_accuracy(&probe, Side::Unseen).unwrap());
        let expl = gap_points(side_accuracy(&task, Side::Seen).unwrap(), side_accuracy(&task, Side::Unseen).unwrap());
        exact &= mem == m.mem && expl == m.expl;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut invariant = 0;
    for _ in 0..SHIFT_VECTORS {
        let v = rng.random_range(8..64);
        let logits: Vec<f32> = (0..v).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mut candidates: Vec<u32> = (5..v as u32).collect();
        candidates.truncate(rng.random_range(2..=candidates.len()));
        let shift: f32 = rng.random_range(-100.0..100.0);
        let shifted: Vec<f32> = logits.iter().map(|x| x + shift).collect();
        invariant += usize::from(candidate_argmax(&logits, &candidates).unwrap() == candidate_argmax(&shifted, &candidates).unwrap());
    }
    let ok = exact && invariant == SHIFT_VECTORS;
    report(6, "records reproduce Mem/Expl", ok, &format!("exact {exact}, shift-invariant {invariant}/{SHIFT_VECTORS}"));
    assert!(ok);
}

#[test]
fn criterion_07_uncontaminated_null() {
    let _g = serial();
    let t0 = Instant::now();
    let mut spec = preset("baseline").unwrap();
    spec.num_trials = NULL_SEEDS;
    let records = run(&mut spec, "baseline");
    let elapsed = t0.elapsed();
    let rows = rows(&records);
    print_rows(&rows);
    let within = |s: &Summary| s.mean.abs() <= NULL_SEM_MULTIPLE * s.sem.unwrap();
    let ok = within(&rows[0].mem) && within(&rows[0].expl) && elapsed <= NULL_BUDGET;
    report(
        7,
        "uncontaminated null",
        ok,
        &format!(
            "Mem {:.2}±{:.2}, Expl {:.2}±{:.2} (SEM), {:.0}s",
            rows[0].mem.mean,
            rows[0].mem.sem.unwrap(),
            rows[0].expl.mean,
            rows[0].expl.sem.unwrap(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_08_copies_dose_response() {
    let _g = serial();
    let t0 = Instant::now();
    let rows = rows(copies_sweep_records());
    let elapsed = t0.elapsed();
    print_rows(&rows);
    let mem: Vec<f64> = rows.iter().map(|r| r.mem.mean).collect();
    let expl: Vec<f64> = rows.iter().map(|r| r.expl.mean).collect();
    let drops: Vec<f64> = mem.windows(2).map(|w| w[0] - w[1]).filter(|d| *d > 0.0).collect();
    let monotone = drops.len() <= COPIES_MAX_INVERSIONS && drops.iter().all(|d| *d <= COPIES_INVERSION_POINTS);
    let mem_rise = mem[3] - mem[0];
    let expl_rise = expl[3] - expl[0];
    let ok = monotone && mem_rise >= COPIES_MEM_RISE && expl_rise >= COPIES_EXPL_RISE && elapsed <= COPIES_BUDGET;
    report(
        8,
        "copies dose-response",
        ok,
        &format!("Mem {mem:.2?}, Mem rise {mem_rise:.2}, Expl rise {expl_rise:.2}, {:.0}s", elapsed.as_secs_f64()),
    );
    assert!(ok);
}

#[test]
fn criterion_09_label_masking_raises_mem() {
    let _g = serial();
    let mut spec = preset("label_mask_sweep").unwrap();
    spec.axis = LABEL_MASK_QS.map(|q| AxisPoint::LabelMaskProb { q }).to_vec();
    spec.base.plan.copies = LABEL_MASK_COPIES;
    let rows = rows(&run(&mut spec, "label_mask"));
    print_rows(&rows);
    let mem: Vec<f64> = rows.iter().map(|r| r.mem.mean).collect();
    let ok = mem.windows(2).all(|w| w[1] >= w[0] - LABEL_MASK_STEP_TOL);
    report(9, "label masking", ok, &format!("Mem {mem:.2?}"));
    assert!(ok);
}

#[test]
fn criterion_10_small_batches_memorize_more() {
    let _g = serial();
    let mut spec = preset("batch_sweep").unwrap();
    spec.axis = vec![
        AxisPoint::BatchSize { batch_size: BATCH_SIZES.0 },
        AxisPoint::BatchSize { batch_size: BATCH_SIZES.1 },
    ];
    let rows = rows(&run(&mut spec, "batch"));
    print_rows(&rows);
    let gap = rows[0].mem.mean - rows[1].mem.mean;
    let ok = gap >= BATCH_MEM_GAP;
    report(10, "batch size", ok, &format!("Mem(batch {}) - Mem(batch {}) = {gap:.2}", BATCH_SIZES.0, BATCH_SIZES.1));
    assert!(ok);
}

#[test]
fn criterion_11_stage_placement() {
    let _g = serial();
    let mut spec = preset("stage_sweep").unwrap();
    let mut audits = Vec::new();
    for point in &spec.axis {
        let cell = point.apply(&spec.base);
        let data = build_data(&cell).unwrap();
        let (_, manifest) = build_corpus(&cell, &data).unwrap();
        let schedule =
            batch_schedule(manifest.total_lines, cell.pretrain.batch_size, cell.pretrain.epochs, &manifest.plan.placement, cell.pretrain.seed);
        audits.push(audit_stage_order(&schedule, &manifest).unwrap().passed());
    }
    spec.axis = vec![
        AxisPoint::Stage { stage: Stage::First, lr: LrChoice::Decay },
        AxisPoint::Stage { stage: Stage::Last, lr: LrChoice::Decay },
    ];
    let rows = rows(&run(&mut spec, "stage"));
    print_rows(&rows);
    let (first, last) = (rows[0].expl.mean, rows[1].expl.mean);
    let ok = audits.iter().all(|a| *a) && last <= first;
    report(11, "stage placement", ok, &format!("audits {audits:?}, Expl first {first:.2}, last {last:.2}"));
    assert!(ok);
}

#[test]
fn criterion_12_deterministic_reruns() {
    let _g = serial();
    let make = || {
        let mut spec = preset("copies_sweep").unwrap();
        spec.axis = vec![AxisPoint::Copies { copies: 5 }];
        spec.base.corpus.num_lines = 3000;
        spec.num_trials = 2;
        spec
    };
    let dirs = ["determinism_a", "determinism_b"];
    let mut outs = Vec::new();
    for d in dirs {
        let mut spec = make();
        spec.out_dir = Some(workdir().join(d));
        outs.push(run_sweep(&spec).unwrap().records);
    }
    let same_records = outs[0].len() == outs[1].len() && outs[0].iter().zip(&outs[1]).all(|(a, b)| a.same_outcome(b));
    let ckpts = |d: &str| -> BTreeMap<String, Vec<u8>> {
        std::fs::read_dir(workdir().join(d).join("checkpoints"))
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
            })
            .collect()
    };
    let (a, b) = (ckpts(dirs[0]), ckpts(dirs[1]));
    let same_bytes = !a.is_empty() && a == b;
    let loads = a.values().all(|bytes| ModelCheckpoint::from_bytes(bytes).is_ok());
    let ok = same_records && same_bytes && loads;
    report(12, "deterministic reruns", ok, &format!("records identical {same_records}, {} checkpoint(s) bitwise identical {same_bytes}", a.len()));
    assert!(ok);
}

/// Lexicographically smallest index set of size `k` whose every member
/// ranks at least as high as every non-member under `better`.
fn enumerate_top(values: &[f64], k: usize, better: impl Fn(f64, f64) -> bool) -> Vec<usize> {
    let n = values.len();
    let mut best: Option<Vec<usize>> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let inside: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let valid = inside.iter().all(|&i| (0..n).filter(|j| mask & (1 << j) == 0).all(|j| !better(values[j], values[i])));
        if valid && best.as_ref().is_none_or(|b| inside < *b) {
            best = Some(inside);
        }
    }
    best.unwrap()
}

fn rank_by_counting(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            let less = values.iter().filter(|&&w| w < v).count() as f64;
            let equal = values.iter().filter(|&&w| w == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[test]
fn criterion_13_seed_tradeoff_matches_enumeration() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut agree = 0;
    for case in 0..TRADEOFF_CASES {
        let n = rng.random_range(6..=TRADEOFF_MAX_TRIALS);
        let k = rng.random_range(1..=n.min(4));
        // Coarse values force ties.
        let levels = if case % 2 == 0 { 4 } else { 1000 };
        let expl: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let gen: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let report = seed_tradeoff(&expl, &gen, k).unwrap();
        let mut top = enumerate_top(&expl, k, |a, b| a > b);
        let mut bottom = enumerate_top(&gen, k, |a, b| a < b);
        let overlap = top.iter().filter(|i| bottom.contains(i)).count();
        let rho = pearson(&rank_by_counting(&expl), &rank_by_counting(&gen));
        let mut got_top = report.top_expl.clone();
        let mut got_bottom = report.bottom_generalization.clone();
        got_top.sort_unstable();
        got_bottom.sort_unstable();
        top.sort_unstable();
        bottom.sort_unstable();
        agree += usize::from(
            got_top == top && got_bottom == bottom && report.overlap == overlap && (report.rank_correlation - rho).abs() <= SPEARMAN_TOL,
        );
    }
    let ok = agree == TRADEOFF_CASES;
    report(13, "seed trade-off", ok, &format!("{agree}/{TRADEOFF_CASES} cases agree"));
    assert!(ok);
}

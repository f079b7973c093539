//! Acceptance gate for the whole pipeline.
//!
//! Each test checks one release criterion end to end and prints a single
//! `[acceptance] <name>: PASS/FAIL` line (visible with `--nocapture`):
//!
//! 1. the angular-margin head degenerates to plain cosine-softmax, and its
//!    graph gradients agree with finite differences;
//! 2. the Cholesky-based Mahalanobis distance agrees with an explicit
//!    matrix inverse and is invariant under affine re-coordinatization;
//! 3. the tie-aware AUC equals exhaustive pair counting bit for bit;
//! 4. stage 1 provably never touches the machine-type head, stage 2 does;
//! 5. the full pipeline separates synthetic anomalies from normals;
//! 6. standardized training scores have zero mean and unit variance, and
//!    degenerate groups stay finite;
//! 7. every composed batch satisfies the balance/composition contract;
//! 8. two same-seed runs produce identical logs and score files.
//!
//! Tolerances and time budgets are pinned as constants next to each test.

use std::collections::BTreeMap;
use std::panic::AssertUnwindSafe;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use asdkit_core::audio::{AudioClip, MachineType};
use asdkit_core::autodiff::Tape;
use asdkit_core::config::{ConvNorm, EncoderConfig, PipelineConfig};
use asdkit_core::eval::{build_report, compute_auc, ScoreColumn};
use asdkit_core::heads::{ArcFaceHead, Stage};
use asdkit_core::linalg::cholesky;
use asdkit_core::manifest::{DatasetManifest, Split};
use asdkit_core::model::Model;
use asdkit_core::nn::ParamStore;
use asdkit_core::scorer::{
    fit_normal_statistics, fit_scorer, fit_standardization, mahalanobis_score, score_clip,
    standardize, write_score_csv, GroupStats, NormalStatistics, ScoreKind, ScoreRow, ScoreTriple,
};
use asdkit_core::synth::{synth_corpus, SynthMachine, SynthSpec};
use asdkit_core::trainer::{
    load_train_data, BatchComposer, Role, TrainData, TrainItem, TrainSession,
};
use asdkit_core::Tensor;

/// Runs a criterion body, prints its verdict line, and enforces the budget.
fn criterion(name: &str, budget: Duration, body: impl FnOnce()) {
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(AssertUnwindSafe(body));
    let elapsed = start.elapsed();
    let ok = outcome.is_ok() && elapsed <= budget;
    println!("[acceptance] {name}: {} ({elapsed:.2?})", if ok { "PASS" } else { "FAIL" });
    if let Err(cause) = outcome {
        std::panic::resume_unwind(cause);
    }
    assert!(elapsed <= budget, "{name} took {elapsed:?}, budget is {budget:?}");
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

// =========================================================================
// 1. angular-margin head: degenerate form and gradients
// =========================================================================

/// Loss agreement between the margin head at (s=1, m=0) and plain
/// cosine-softmax cross-entropy.
const MARGIN_FREE_TOL: f64 = 1e-9;
/// Central finite-difference step for the gradient check.
const GRAD_STEP: f64 = 1e-6;
/// Per-coordinate relative gradient tolerance.
const GRAD_REL_TOL: f64 = 1e-4;
/// Denominator floor so exactly-zero gradients do not divide by zero.
const GRAD_ABS_FLOOR: f64 = 1e-3;
const MARGIN_CASES: usize = 100;

#[test]
fn margin_head_matches_cosine_softmax_and_its_gradients_check_out() {
    criterion(
        "margin head degenerate form + gradient check",
        Duration::from_secs(10),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);

            // At scale 1 and margin 0 the head must reproduce cosine-softmax
            // cross-entropy exactly (up to the documented tolerance).
            for _ in 0..MARGIN_CASES {
                let classes = rng.gen_range(2..=5);
                let dim = rng.gen_range(2..=8);
                let mut store = ParamStore::<f64>::new();
                let head = ArcFaceHead::init(&mut store, &mut rng, classes, dim, 1.0, 0.0);
                let x: Vec<f64> = (0..dim).map(|_| gauss(&mut rng)).collect();
                let target = rng.gen_range(0..classes);

                let logits = head.logits(&store, &x, Some(target)).unwrap();
                let loss = log_sum_exp(&logits) - logits[target];

                let anchors = store.get(head.anchors);
                let xn = l2(&x);
                let cosines: Vec<f64> = (0..classes)
                    .map(|k| {
                        let row = anchors.row(k);
                        dot(&x, row) / (xn * l2(row))
                    })
                    .collect();
                let reference = log_sum_exp(&cosines) - cosines[target];

                assert!(
                    (loss - reference).abs() <= MARGIN_FREE_TOL,
                    "margin-free loss {loss} vs cosine-softmax {reference}"
                );
            }

            // Gradient check on the production configuration (s=16, m=1.28),
            // through the full graph: normalization, margin, cross-entropy.
            let mut store = ParamStore::<f64>::new();
            let head = ArcFaceHead::init(&mut store, &mut rng, 4, 6, 16.0, 1.28);
            let batch = 3;
            let x0 = Tensor::<f64>::from_fn([batch, 6], |_| 0.7 * gauss(&mut rng));
            let targets = [0usize, 2, 3];
            let contributes = [true, true, true];

            let loss_value = |store: &ParamStore<f64>, xv: &Tensor<f64>| -> f64 {
                let mut tape = Tape::new();
                let bound = store.bind(&mut tape);
                let x = tape.leaf(xv.clone());
                let logits = head.margin_logits_graph(&mut tape, &bound, x, &targets, &contributes);
                let loss = tape.cross_entropy_sum(logits, &targets, &contributes);
                tape.value(loss).data()[0]
            };

            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let x = tape.leaf(x0.clone());
            let logits = head.margin_logits_graph(&mut tape, &bound, x, &targets, &contributes);
            let loss = tape.cross_entropy_sum(logits, &targets, &contributes);
            let grads = tape.backward(loss);
            let gx = grads.get(x).expect("embedding gradient").clone();
            let ga = grads.get(bound[head.anchors.0]).expect("anchor gradient").clone();

            let check = |analytic: f64, numeric: f64, what: &str| {
                let rel = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(GRAD_ABS_FLOOR);
                assert!(
                    rel < GRAD_REL_TOL,
                    "{what}: analytic {analytic} vs finite-difference {numeric} (rel {rel:.3e})"
                );
            };

            for i in 0..x0.data().len() {
                let mut plus = x0.clone();
                let mut minus = x0.clone();
                plus.data_mut()[i] += GRAD_STEP;
                minus.data_mut()[i] -= GRAD_STEP;
                let numeric =
                    (loss_value(&store, &plus) - loss_value(&store, &minus)) / (2.0 * GRAD_STEP);
                check(gx.data()[i], numeric, &format!("embedding[{i}]"));
            }
            for i in 0..ga.data().len() {
                let mut plus = store.clone();
                let mut minus = store.clone();
                plus.get_mut(head.anchors).data_mut()[i] += GRAD_STEP;
                minus.get_mut(head.anchors).data_mut()[i] -= GRAD_STEP;
                let numeric =
                    (loss_value(&plus, &x0) - loss_value(&minus, &x0)) / (2.0 * GRAD_STEP);
                check(ga.data()[i], numeric, &format!("anchor[{i}]"));
            }
        },
    );
}

// =========================================================================
// 2. Mahalanobis distance: explicit inverse and affine invariance
// =========================================================================

const MAHA_REL_TOL: f64 = 1e-8;
const AFFINE_REL_TOL: f64 = 1e-8;
const MAHA_CASES: usize = 100;

/// Inverts a symmetric positive-definite matrix by Gauss-Jordan elimination
/// with partial pivoting. Deliberately naive: it shares no code with the
/// Cholesky path under test.
fn invert(mat: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = mat.len();
    let mut aug: Vec<Vec<f64>> = mat
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| aug[a][col].abs().total_cmp(&aug[b][col].abs()));
        let pivot = pivot.unwrap();
        aug.swap(col, pivot);
        let p = aug[col][col];
        assert!(p.abs() > 0.0, "singular matrix in oracle inverse");
        for v in aug[col].iter_mut() {
            *v /= p;
        }
        for row in 0..n {
            if row != col {
                let f = aug[row][col];
                for j in 0..2 * n {
                    aug[row][j] -= f * aug[col][j];
                }
            }
        }
    }
    aug.into_iter().map(|row| row[n..].to_vec()).collect()
}

#[test]
fn mahalanobis_matches_an_explicit_inverse_and_survives_affine_maps() {
    criterion(
        "Mahalanobis vs explicit inverse + affine invariance",
        Duration::from_secs(10),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(22);
            for _ in 0..MAHA_CASES {
                let dim = rng.gen_range(2..=16);
                let n = rng.gen_range(dim + 2..=dim + 30);

                // Correlated samples x = M z + c with a random mixing matrix.
                let mixing: Vec<Vec<f64>> = (0..dim)
                    .map(|_| (0..dim).map(|_| 0.7 * gauss(&mut rng)).collect())
                    .collect();
                let center: Vec<f64> = (0..dim).map(|_| 2.0 * gauss(&mut rng)).collect();
                let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                    let z: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
                    (0..dim).map(|i| dot(&mixing[i], &z) + center[i]).collect()
                };
                let samples: Vec<(u32, Vec<f64>)> = (0..n).map(|_| (5, draw(&mut rng))).collect();

                let stats = fit_normal_statistics(&samples).unwrap();
                let group = &stats.by_id[&5];

                // Oracle: naive mean/covariance, the same ridge rule, then an
                // explicit inverse and a direct quadratic form.
                let mean: Vec<f64> = (0..dim)
                    .map(|i| samples.iter().map(|(_, s)| s[i]).sum::<f64>() / n as f64)
                    .collect();
                let mut cov = vec![vec![0.0f64; dim]; dim];
                for (_, s) in &samples {
                    for i in 0..dim {
                        for j in 0..dim {
                            cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]);
                        }
                    }
                }
                for row in cov.iter_mut() {
                    for v in row.iter_mut() {
                        *v /= (n - 1) as f64;
                    }
                }
                let trace: f64 = (0..dim).map(|i| cov[i][i]).sum();
                let eps = (1e-3 * trace / dim as f64).max(1e-6);
                for (i, row) in cov.iter_mut().enumerate() {
                    row[i] += eps;
                }
                let inv = invert(&cov);

                let query = draw(&mut rng);
                let resid: Vec<f64> = (0..dim).map(|i| query[i] - mean[i]).collect();
                let quad: f64 = (0..dim)
                    .map(|i| resid[i] * dot(&inv[i], &resid))
                    .sum();
                let reference = quad.sqrt();

                let distance = mahalanobis_score(&stats, 5, &query).unwrap();
                let rel = (distance - reference).abs() / reference.max(1e-12);
                assert!(
                    rel <= MAHA_REL_TOL,
                    "dim {dim}, n {n}: distance {distance} vs oracle {reference} (rel {rel:.3e})"
                );

                // Affine invariance: map the fitted Gaussian (including its
                // ridge) and the query through x -> A x + b; the distance
                // must not move.
                let a: Vec<Vec<f64>> = (0..dim)
                    .map(|i| {
                        (0..dim)
                            .map(|j| 0.3 * gauss(&mut rng) + if i == j { 2.0 } else { 0.0 })
                            .collect()
                    })
                    .collect();
                let b: Vec<f64> = (0..dim).map(|_| gauss(&mut rng)).collect();

                let mu = group.mean.data();
                let mean2: Vec<f64> = (0..dim).map(|i| dot(&a[i], mu) + b[i]).collect();
                // covariance2 = A (Sigma + eps I) A^T, carried with a zero
                // ridge so the transported matrix is used verbatim.
                let mut reg = vec![vec![0.0f64; dim]; dim];
                for i in 0..dim {
                    for j in 0..dim {
                        reg[i][j] = group.covariance.data()[i * dim + j]
                            + if i == j { group.epsilon } else { 0.0 };
                    }
                }
                // (A reg A^T)_{ij} = sum_k sum_l A_{ik} reg_{kl} A_{jl}
                let mut cov2 = vec![vec![0.0f64; dim]; dim];
                for i in 0..dim {
                    for j in 0..dim {
                        let mut s = 0.0;
                        for k in 0..dim {
                            s += a[i][k] * dot(&reg[k], &a[j]);
                        }
                        cov2[i][j] = s;
                    }
                }
                let cov2_t = Tensor::<f64>::from_fn([dim, dim], |idx| cov2[idx / dim][idx % dim]);
                let group2 = GroupStats {
                    mean: Tensor::from_fn([dim], |i| mean2[i]),
                    covariance: cov2_t.clone(),
                    epsilon: 0.0,
                    chol: cholesky(&cov2_t).unwrap(),
                    count: group.count,
                };
                let stats2 = NormalStatistics {
                    by_id: BTreeMap::from([(5u32, group2)]),
                    dim,
                };
                let query2: Vec<f64> = (0..dim).map(|i| dot(&a[i], &query) + b[i]).collect();
                let mapped = mahalanobis_score(&stats2, 5, &query2).unwrap();
                let rel = (mapped - distance).abs() / distance.max(1e-12);
                assert!(
                    rel <= AFFINE_REL_TOL,
                    "dim {dim}: affine-mapped distance {mapped} vs original {distance} (rel {rel:.3e})"
                );
            }
        },
    );
}

// =========================================================================
// 3. AUC: bit-exact agreement with exhaustive pair counting
// =========================================================================

const AUC_SETS: usize = 200;
const AUC_MAX_N: usize = 200;

/// O(n^2) Mann-Whitney oracle: one point per won pair, half per tie.
fn auc_by_pair_counting(scores: &[f64], labels: &[bool]) -> f64 {
    let mut credit = 0.0f64;
    let mut pairs = 0u64;
    for (sa, la) in scores.iter().zip(labels) {
        if !la {
            continue;
        }
        for (sn, ln) in scores.iter().zip(labels) {
            if *ln {
                continue;
            }
            pairs += 1;
            if sa > sn {
                credit += 1.0;
            } else if sa == sn {
                credit += 0.5;
            }
        }
    }
    credit / pairs as f64
}

#[test]
fn auc_equals_exhaustive_pair_counting_exactly() {
    criterion("AUC vs exhaustive pair counting", Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for set in 0..AUC_SETS {
            let n = rng.gen_range(2..=AUC_MAX_N);
            // Quantized scores force plenty of ties; level count 0 means
            // continuous draws.
            let levels = rng.gen_range(0..=12);
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    if levels == 0 {
                        rng.gen::<f64>()
                    } else {
                        rng.gen_range(0..=levels) as f64 / levels as f64
                    }
                })
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            // Guarantee both classes appear.
            labels[0] = false;
            if n > 1 {
                labels[1] = true;
            }

            let fast = compute_auc(&scores, &labels).unwrap();
            let slow = auc_by_pair_counting(&scores, &labels);
            assert!(
                fast == slow,
                "set {set} (n {n}, levels {levels}): {fast} != {slow}"
            );
        }
    });
}

// =========================================================================
// shared toy-pipeline plumbing for criteria 4, 5 and 8
// =========================================================================

/// Two machine types with two IDs each; fundamentals far enough apart that
/// mel features can tell everything apart.
fn toy_spec(train_per_id: usize, test_normal: usize, test_anomaly: usize) -> SynthSpec {
    SynthSpec {
        sample_rate: 16_000,
        clip_seconds: 1.0,
        machines: vec![
            SynthMachine { name: "hum".into(), fundamentals_hz: vec![120.0, 300.0] },
            SynthMachine { name: "whir".into(), fundamentals_hz: vec![750.0, 1890.0] },
        ],
        train_per_id,
        test_normal_per_id: test_normal,
        test_anomaly_per_id: test_anomaly,
        noise_snr_db: 24.0,
    }
}

/// A one-block encoder over a 32-bin frontend: small enough for test budgets,
/// big enough to learn the toy corpus.
fn toy_config(seed: u64, stage1_epochs: usize, stage2_epochs: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.frontend.mel_bins = 32;
    cfg.encoder = EncoderConfig {
        input_dim: 32,
        model_dim: 16,
        num_blocks: 1,
        num_heads: 2,
        ffn_dim: 32,
        conv_kernel: 7,
        dropout: 0.0,
        embedding_dim: 16,
        conv_norm: ConvNorm::Batch,
    };
    cfg.train.stage1_epochs = stage1_epochs;
    cfg.train.stage2_epochs = stage2_epochs;
    cfg.train.batch_size = 8;
    cfg.train.learning_rate = 1e-3;
    cfg.train.grad_clip = Some(5.0);
    cfg.train.seed = seed;
    cfg
}

/// Machine IDs of one type present in the train split, in class order.
fn train_ids(manifest: &DatasetManifest, machine_type: &MachineType) -> Vec<u32> {
    let mut ids: Vec<u32> = manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Train && &e.machine_type == machine_type)
        .map(|e| e.machine_id)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Trains one model per machine type, scores every test clip with its type's
/// model, and returns (loss-log lines, score rows). Paths in the rows are
/// exactly the manifest paths.
fn run_toy_pipeline(
    manifest: &DatasetManifest,
    config: &PipelineConfig,
) -> (Vec<String>, Vec<ScoreRow>) {
    let mut types: Vec<MachineType> =
        manifest.entries.iter().map(|e| e.machine_type.clone()).collect();
    types.sort_by(|a, b| a.0.cmp(&b.0));
    types.dedup();

    let mut log_lines = Vec::new();
    let mut rows = Vec::new();
    for machine_type in &types {
        let data = load_train_data::<f64>(manifest, machine_type).unwrap();
        let model =
            Model::<f64>::init(config, machine_type.clone(), train_ids(manifest, machine_type), config.train.seed)
                .unwrap();
        let mut session = TrainSession::start(model);
        let logs = session.train_full(&data, None, |_| {}).unwrap();
        log_lines.extend(logs.iter().map(|l| format!("{}/{l}", machine_type.0)));

        let normals: Vec<(u32, AudioClip<f64>)> =
            data.normals.iter().map(|item| (item.machine_id, item.clip.clone())).collect();
        let state = fit_scorer(&session.model, &normals, &[]).unwrap();

        for (entry, clip) in
            manifest.load_clips::<f64>(Split::Test, Some(machine_type)).unwrap()
        {
            let (raw, combined) =
                score_clip(&session.model, &state, &clip, entry.machine_id).unwrap();
            rows.push(ScoreRow {
                path: entry.path.to_string_lossy().into_owned(),
                machine_type: machine_type.0.clone(),
                machine_id: entry.machine_id,
                a_out: raw.out.into(),
                a_arc: raw.arc.into(),
                a_maha: raw.maha.into(),
                combined: combined.into(),
            });
        }
    }
    (log_lines, rows)
}

// =========================================================================
// 4. stage separation: the type head is untouchable in stage 1
// =========================================================================

#[test]
fn stage_one_never_touches_the_type_head_and_stage_two_does() {
    criterion("stage-1 type-head freeze", Duration::from_secs(120), || {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_corpus(&toy_spec(20, 1, 1), 99, dir.path()).unwrap();
        let config = toy_config(4, 2, 1);

        let target = MachineType("hum".into());
        let data = load_train_data::<f64>(&manifest, &target).unwrap();
        let model =
            Model::<f64>::init(&config, target.clone(), train_ids(&manifest, &target), 4).unwrap();

        let snapshot = |m: &Model<f64>| -> Vec<Vec<f64>> {
            let mut tensors = vec![m.store.get(m.type_head.lin.w).data().to_vec()];
            if let Some(b) = m.type_head.lin.b {
                tensors.push(m.store.get(b).data().to_vec());
            }
            tensors
        };
        let encoder_probe = model.store.get(asdkit_core::nn::ParamId(0)).data().to_vec();
        let before = snapshot(&model);

        let mut session = TrainSession::start(model);
        session.run_epochs(&data, 2).unwrap();
        assert_eq!(
            snapshot(&session.model),
            before,
            "type head changed during stage 1"
        );
        assert_ne!(
            session.model.store.get(asdkit_core::nn::ParamId(0)).data().to_vec(),
            encoder_probe,
            "encoder never moved in stage 1"
        );

        session.advance_stage();
        session.run_epochs(&data, 1).unwrap();
        assert_ne!(
            snapshot(&session.model),
            before,
            "type head still frozen in stage 2"
        );
    });
}

// =========================================================================
// 5. end-to-end detection quality on the synthetic corpus
// =========================================================================

const E2E_MIN_COMBINED_AUC: f64 = 0.85;
const E2E_MAX_GAP_BELOW_BEST: f64 = 0.05;

#[test]
fn end_to_end_pipeline_detects_synthetic_anomalies() {
    criterion("end-to-end detection quality", Duration::from_secs(600), || {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_corpus(&toy_spec(24, 8, 9), 7, dir.path()).unwrap();
        let config = toy_config(42, 15, 10);

        let (_logs, rows) = run_toy_pipeline(&manifest, &config);
        let report = build_report(&rows, &manifest, &ScoreColumn::ALL).unwrap();
        println!("{}", report.render());

        let combined = report.overall_mean(ScoreColumn::Combined).unwrap();
        let best_single = [ScoreColumn::Out, ScoreColumn::Arc, ScoreColumn::Maha]
            .iter()
            .filter_map(|&k| report.overall_mean(k))
            .fold(f64::NEG_INFINITY, f64::max);

        assert!(
            combined >= E2E_MIN_COMBINED_AUC,
            "combined AUC {combined:.4} below the {E2E_MIN_COMBINED_AUC} bar"
        );
        assert!(
            combined >= best_single - E2E_MAX_GAP_BELOW_BEST,
            "combined AUC {combined:.4} trails the best single score {best_single:.4} \
             by more than {E2E_MAX_GAP_BELOW_BEST}"
        );
    });
}

// =========================================================================
// 6. standardization: zero mean, unit variance, degenerate groups finite
// =========================================================================

const STANDARD_TOL: f64 = 1e-9;

#[test]
fn standardized_training_scores_have_zero_mean_and_unit_variance() {
    criterion("score standardization", Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let mut training: Vec<(u32, ScoreTriple<f64>)> = Vec::new();
        for id in 1..=5u32 {
            for _ in 0..30 {
                training.push((
                    id,
                    ScoreTriple {
                        out: 3.0 * gauss(&mut rng) + id as f64,
                        arc: 0.5 * gauss(&mut rng) - 2.0,
                        maha: gauss(&mut rng).abs() * 10.0,
                    },
                ));
            }
        }
        // One degenerate machine: every training score identical.
        for _ in 0..4 {
            training.push((9, ScoreTriple { out: 2.5, arc: -1.0, maha: 7.0 }));
        }

        let params = fit_standardization(&training).unwrap();

        for id in 1..=5u32 {
            for kind in ScoreKind::ALL {
                let z: Vec<f64> = training
                    .iter()
                    .filter(|(i, _)| *i == id)
                    .map(|(_, t)| standardize(&params, id, kind, t.get(kind)).unwrap())
                    .collect();
                let n = z.len() as f64;
                let mean = z.iter().sum::<f64>() / n;
                let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
                assert!(
                    mean.abs() < STANDARD_TOL,
                    "id {id} {kind:?}: standardized mean {mean:e}"
                );
                assert!(
                    (var - 1.0).abs() < STANDARD_TOL,
                    "id {id} {kind:?}: standardized variance {var}"
                );
            }
        }

        // Degenerate group: the floored std keeps everything finite, both on
        // the training value itself and on unseen values.
        for kind in ScoreKind::ALL {
            let train_val = training.iter().find(|(i, _)| *i == 9).unwrap().1.get(kind);
            let same = standardize(&params, 9, kind, train_val).unwrap();
            assert_eq!(same, 0.0, "degenerate {kind:?} at its own mean");
            let off = standardize(&params, 9, kind, train_val + 1.0).unwrap();
            assert!(off.is_finite(), "degenerate {kind:?} off-mean: {off}");
        }
    });
}

// =========================================================================
// 7. batch composition invariants over many random manifests
// =========================================================================

const BATCH_PLAN_COUNT: usize = 10_000;

#[test]
fn composed_batches_always_satisfy_the_plan_contract() {
    criterion("batch composition invariants", Duration::from_secs(60), || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let tiny_clip = AudioClip::<f64>::new(vec![0.0], 16_000);
        let mut checked = 0usize;

        'outer: loop {
            let classes = rng.gen_range(1..=6);
            let id_classes: Vec<u32> = (0..classes).map(|k| 10 * k as u32 + 3).collect();
            let mut data = TrainData::<f64>::default();
            for &id in &id_classes {
                for _ in 0..rng.gen_range(1..=25) {
                    data.normals.push(TrainItem { clip: tiny_clip.clone(), machine_id: id });
                }
            }
            for _ in 0..rng.gen_range(0..=50usize) {
                data.pseudo.push(TrainItem { clip: tiny_clip.clone(), machine_id: 999 });
            }

            let stage = if !data.pseudo.is_empty() && rng.gen() { Stage::Two } else { Stage::One };
            let batch_size = match stage {
                // Stage 2 requires an even batch; stage 1 takes anything.
                Stage::Two => 2 * rng.gen_range(1..=16),
                Stage::One => rng.gen_range(1..=32),
            };

            let mut composer = BatchComposer::new(&data, &id_classes, batch_size, 0).unwrap();
            for _ in 0..rng.gen_range(1..=3) {
                composer.start_epoch(&mut rng);
                for _ in 0..composer.batches_per_epoch(stage) {
                    let plan = composer.compose(stage, data.pseudo.len(), &mut rng).unwrap();
                    plan.validate(stage, batch_size).unwrap();
                    // Entries must point at real pool items of the right kind.
                    for entry in &plan.entries {
                        match entry.role {
                            Role::Normal => {
                                let item = &data.normals[entry.index];
                                let class = entry.id_class.expect("normals carry a class");
                                assert_eq!(id_classes[class], item.machine_id);
                            }
                            Role::Pseudo => {
                                assert!(entry.index < data.pseudo.len());
                                assert!(entry.id_class.is_none());
                            }
                        }
                    }
                    checked += 1;
                    if checked == BATCH_PLAN_COUNT {
                        break 'outer;
                    }
                }
            }
        }
        assert_eq!(checked, BATCH_PLAN_COUNT);
    });
}

// =========================================================================
// 8. reproducibility: same seed, same logs, same score files
// =========================================================================

#[test]
fn same_seed_runs_produce_identical_logs_and_score_files() {
    criterion("same-seed reproducibility", Duration::from_secs(300), || {
        let run = || -> (Vec<String>, Vec<u8>) {
            let dir = tempfile::tempdir().unwrap();
            let manifest = synth_corpus(&toy_spec(6, 2, 2), 13, dir.path()).unwrap();
            let config = toy_config(5, 2, 1);
            let (logs, mut rows) = run_toy_pipeline(&manifest, &config);
            // Relativize paths so two runs in different directories can be
            // compared byte for byte.
            for row in rows.iter_mut() {
                let p = std::path::Path::new(&row.path);
                row.path =
                    p.strip_prefix(dir.path()).unwrap().to_string_lossy().into_owned();
            }
            let csv_path = dir.path().join("scores.csv");
            write_score_csv(&csv_path, &rows).unwrap();
            (logs, std::fs::read(&csv_path).unwrap())
        };

        let (logs_a, csv_a) = run();
        let (logs_b, csv_b) = run();
        assert_eq!(logs_a, logs_b, "loss logs diverged between same-seed runs");
        assert_eq!(csv_a, csv_b, "score files diverged between same-seed runs");
    });
}

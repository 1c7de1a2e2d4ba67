//! Built-in gradient and oracle suites, run by the `selfcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alignment::{contrastive_loss, duplicate_weights, AlignmentBatch};
use crate::config::{Augmentation, ModelConfig, TrainConfig};
use crate::cvp::{DiseaseQuery, DiseaseQuerySet};
use crate::encoders::Volume;
use crate::error::Result;
use crate::metrics::{evaluate, THRESHOLD};
use crate::model::{CaseText, Model};
use crate::tensor::{finite_diff_check, Conv3dSpec, Tape, Tensor, Var};

/// Largest accepted relative error between tape and central-difference
/// gradients.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Largest accepted gap between a library value and its brute-force oracle.
pub const ORACLE_TOLERANCE: f64 = 1e-10;
/// Largest accepted loss change under a batch permutation.
pub const PERMUTATION_TOLERANCE: f64 = 1e-12;
const FD_STEP: f64 = 1e-5;
/// Steps tried per element of the full objective. The larger one beats
/// roundoff on tiny gradients, the smaller one rarely straddles a relu
/// kink; an element passes if either central difference agrees.
const OBJECTIVE_STEPS: [f64; 2] = [1e-4, 1e-5];

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn bound(name: &str, value: f64, limit: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            passed: value < limit,
            detail: format!("max error {value:.3e} (limit {limit:.0e})"),
        }
    }

    fn failed(name: &str, err: impl std::fmt::Display) -> Self {
        CheckResult {
            name: name.to_string(),
            passed: false,
            detail: err.to_string(),
        }
    }
}

fn uniform(rng: &mut impl Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Values with magnitude in [0.2, 1], away from relu's kink.
fn signed(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Reduces any output to a scalar with fixed, non-uniform weights so that
/// every output element contributes a distinct gradient.
fn probe(y: Var<'_>) -> Result<Var<'_>> {
    let n = y.value().numel();
    let w = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin() + 0.1).collect();
    let w = y.tape().constant(Tensor::new(y.shape(), w)?);
    Ok(y.mul(w)?.sum())
}

/// Central-difference error of every tape primitive on random inputs.
pub fn primitive_gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, [$($input:expr),+], |$p:ident| $body:expr) => {{
            let inputs = vec![$($input),+];
            let err = finite_diff_check(|_t, $p| probe($body?), &inputs, FD_STEP)?;
            out.push(($name, err));
        }};
    }
    let r = &mut rng;
    check!("add", [signed(r, vec![2, 3]), signed(r, vec![2, 3])], |p| p[0].add(p[1]));
    check!("sub", [signed(r, vec![2, 3]), signed(r, vec![2, 3])], |p| p[0].sub(p[1]));
    check!("mul", [signed(r, vec![2, 3]), signed(r, vec![2, 3])], |p| p[0].mul(p[1]));
    check!("scale", [signed(r, vec![3])], |p| Ok::<_, crate::error::Error>(p[0].scale(-1.7)));
    check!("scale_by", [signed(r, vec![2, 2]), signed(r, vec![])], |p| p[0].scale_by(p[1]));
    check!("add_row", [signed(r, vec![3, 4]), signed(r, vec![4])], |p| p[0].add_row(p[1]));
    check!("exp", [signed(r, vec![4])], |p| Ok::<_, crate::error::Error>(p[0].exp()));
    check!("ln", [uniform(r, vec![4], 0.3, 2.0)], |p| Ok::<_, crate::error::Error>(p[0].ln()));
    check!("sigmoid", [signed(r, vec![4])], |p| Ok::<_, crate::error::Error>(p[0].sigmoid()));
    check!("relu", [signed(r, vec![6])], |p| Ok::<_, crate::error::Error>(p[0].relu()));
    let clamp_in = Tensor::vector(vec![-0.9, -0.3, 0.1, 0.35, 0.8, -0.1]);
    check!("clamp", [clamp_in], |p| Ok::<_, crate::error::Error>(p[0].clamp(-0.5, 0.5)));
    check!("matmul", [signed(r, vec![2, 3]), signed(r, vec![3, 4])], |p| p[0].matmul(p[1]));
    check!("matmul_t", [signed(r, vec![2, 3]), signed(r, vec![4, 3])], |p| p[0].matmul_t(p[1]));
    check!(
        "affine",
        [signed(r, vec![2, 3]), signed(r, vec![3, 4]), signed(r, vec![4])],
        |p| p[0].affine(p[1], p[2])
    );
    check!("transpose", [signed(r, vec![2, 3])], |p| p[0].transpose());
    check!("reshape", [signed(r, vec![2, 3])], |p| p[0].reshape(vec![3, 2]));
    check!("sum_axis", [signed(r, vec![2, 3, 2])], |p| p[0].sum_axis(1));
    check!("mean_axis", [signed(r, vec![2, 3])], |p| p[0].mean_axis(0));
    check!("sum", [signed(r, vec![2, 3])], |p| Ok::<_, crate::error::Error>(p[0].sum().scale(0.5)));
    check!("mean", [signed(r, vec![2, 3])], |p| Ok::<_, crate::error::Error>(p[0].mean().exp()));
    check!("softmax_rows", [signed(r, vec![2, 4])], |p| p[0].softmax(1));
    check!("softmax_cols", [signed(r, vec![3, 2])], |p| p[0].softmax(0));
    check!("log_softmax_rows", [signed(r, vec![2, 4])], |p| p[0].log_softmax(1));
    check!("log_softmax_cols", [signed(r, vec![3, 2])], |p| p[0].log_softmax(0));
    check!("l2_normalize", [signed(r, vec![2, 3])], |p| p[0].l2_normalize());
    check!("concat_rows", [signed(r, vec![1, 3]), signed(r, vec![2, 3])], |p| Var::concat(p, 0));
    check!("concat_cols", [signed(r, vec![2, 1]), signed(r, vec![2, 3])], |p| Var::concat(p, 1));
    check!("slice_cols", [signed(r, vec![2, 5])], |p| p[0].slice_cols(1, 4));
    check!("diagonal", [signed(r, vec![3, 3])], |p| p[0].diagonal());
    let spec = Conv3dSpec {
        kernel: [2, 2, 1],
        stride: [1, 2, 1],
        padding: [1, 0, 0],
    };
    check!(
        "conv3d",
        [signed(r, vec![3, 4, 2, 2]), signed(r, vec![8, 3]), signed(r, vec![3])],
        |p| p[0].conv3d(p[1], p[2], spec)
    );
    Ok(out)
}

/// Configuration of the smallest full model used for the objective check:
/// two modalities, an 8-patch grid, 8-wide embeddings and three classes.
pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        modalities: vec!["T1WI".into(), "T2WI".into()],
        input_dims: [4, 4, 2],
        num_classes: 3,
        batch_size: 2,
        epochs: 1,
        seed,
        augmentation: Augmentation::identity(),
        model: ModelConfig {
            conv_channels: vec![4],
            embed_dim: 8,
            proj_hidden: 8,
            decoder_blocks: 2,
            heads: 2,
            ffn_hidden: 8,
            classifier_hidden: 8,
            text_table_rows: 64,
            tau_init: 0.5,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn tiny_queries() -> Result<DiseaseQuerySet> {
    DiseaseQuerySet::new(
        ["infarct", "tumour", "bleed"]
            .iter()
            .map(|n| DiseaseQuery {
                name: n.to_string(),
                description: format!("{n} with abnormal signal"),
            })
            .collect(),
    )
}

/// Max relative error of the tape gradient of the full training objective
/// against central differences over every trainable parameter element, on
/// a batch of two cases.
pub fn objective_gradient_error(seed: u64) -> Result<f64> {
    let config = tiny_config(seed);
    let mut model = Model::init(config.clone(), tiny_queries()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f626a);
    // Zero-initialized biases put dead patches exactly on relu's kink;
    // jitter every trainable value to reach a generic point.
    let trainable: Vec<String> = model
        .store
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| !model.store.is_frozen(n))
        .collect();
    for name in &trainable {
        for v in model.store.get_mut(name).expect("listed name").data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let mut cases = Vec::new();
    for (i, labels) in [[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]].into_iter().enumerate() {
        let volumes = config
            .modalities
            .iter()
            .map(|m| Volume::new(m.clone(), config.input_dims, uniform(&mut rng, vec![32], -1.0, 1.0).into_data()))
            .collect::<Result<Vec<_>>>()?;
        let keys: Vec<String> = config
            .modalities
            .iter()
            .map(|m| format!("{m} hyperintensity in case {i}"))
            .collect();
        let global_key = format!("case {i} impression");
        let enc = model.text_encoder();
        let text = CaseText {
            modality: keys.iter().map(|k| enc.encode(k)).collect::<Result<_>>()?,
            global: enc.encode(&global_key)?,
            modality_keys: keys,
            global_key,
        };
        cases.push((volumes, text, labels.to_vec()));
    }
    let emb = model.query_embedding(&model.queries)?;

    let objective = |model: &Model, tape: &Tape| -> Result<f64> {
        let batch: Vec<_> = cases.iter().map(|(v, t, y)| (v.clone(), t, y.as_slice())).collect();
        Ok(model.batch_losses(tape, &batch, &emb)?.total.value().item())
    };
    let analytic = {
        let tape = Tape::new();
        let batch: Vec<_> = cases.iter().map(|(v, t, y)| (v.clone(), t, y.as_slice())).collect();
        let losses = model.batch_losses(&tape, &batch, &emb)?;
        tape.backward(losses.total)?.params()
    };

    let mut worst = 0.0f64;
    for name in trainable {
        let n = model.store.get(&name)?.numel();
        let grad = analytic.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(vec![n]));
        for k in 0..n {
            let orig = model.store.get(&name)?.data()[k];
            let mut eval_at = |v: f64| -> Result<f64> {
                model.store.get_mut(&name).expect("listed name").data_mut()[k] = v;
                objective(&model, &Tape::no_grad())
            };
            let mut rel = f64::INFINITY;
            for h in OBJECTIVE_STEPS {
                let numeric = (eval_at(orig + h)? - eval_at(orig - h)?) / (2.0 * h);
                let a = grad.data()[k];
                rel = rel.min((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
            }
            model.store.get_mut(&name).expect("listed name").data_mut()[k] = orig;
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Contrastive loss by explicit enumeration of every softmax term.
pub fn brute_force_contrastive(image: &[Vec<f64>], text: &[Vec<f64>], keys: &[String], tau: f64) -> f64 {
    let b = image.len();
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..b {
        let dup = keys.iter().filter(|k| **k == keys[i]).count() as f64;
        let sii = dot(&image[i], &text[i]);
        let row: f64 = (0..b).map(|j| dot(&image[i], &text[j]).exp()).sum();
        let col: f64 = (0..b).map(|j| dot(&image[j], &text[i]).exp()).sum();
        total += ((sii - row.ln()) + (sii - col.ln())) / dup;
    }
    -total / b as f64
}

/// Library contrastive loss over plain rows.
pub fn library_contrastive(image: &[Vec<f64>], text: &[Vec<f64>], keys: &[String], tau: f64) -> Result<f64> {
    let tape = Tape::no_grad();
    let rows = image
        .iter()
        .map(|r| Ok(tape.constant(Tensor::new(vec![1, r.len()], r.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    let batch = AlignmentBatch::assemble(&tape, &rows, text, keys)?
        .ok_or_else(|| crate::error::Error::Validation("empty alignment batch".into()))?;
    Ok(contrastive_loss(&batch, tape.constant(Tensor::scalar(tau.ln())))?.value().item())
}

fn unit_row(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Random batch of size `b` whose keys repeat, with identical text rows
/// for identical keys.
fn random_batch(rng: &mut impl Rng, b: usize, d: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<String>) {
    let distinct = rng.random_range(1..=b);
    let pool: Vec<Vec<f64>> = (0..distinct).map(|_| unit_row(rng, d)).collect();
    let ids: Vec<usize> = (0..b).map(|_| rng.random_range(0..distinct)).collect();
    let image = (0..b).map(|_| unit_row(rng, d)).collect();
    let text = ids.iter().map(|&i| pool[i].clone()).collect();
    let keys = ids.iter().map(|i| format!("report {i}")).collect();
    (image, text, keys)
}

fn loss_oracle_error(seed: u64, batches: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..batches {
        let b = rng.random_range(1..=8);
        let (image, text, keys) = random_batch(&mut rng, b, 8);
        let tau = rng.random_range(0.05..1.0);
        let lib = library_contrastive(&image, &text, &keys, tau)?;
        worst = worst.max((lib - brute_force_contrastive(&image, &text, &keys, tau)).abs());
    }
    Ok(worst)
}

fn permutation_error(seed: u64, batches: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..batches {
        let b = rng.random_range(2..=8);
        let (image, text, keys) = random_batch(&mut rng, b, 8);
        let tau = rng.random_range(0.05..1.0);
        let base = library_contrastive(&image, &text, &keys, tau)?;
        let mut order: Vec<usize> = (0..b).collect();
        for i in (1..b).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let pick = |v: &[Vec<f64>]| order.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        let keys_p: Vec<String> = order.iter().map(|&i| keys[i].clone()).collect();
        let permuted = library_contrastive(&pick(&image), &pick(&text), &keys_p, tau)?;
        worst = worst.max((base - permuted).abs());
    }
    Ok(worst)
}

fn duplicate_groups_sum_to_one(seed: u64, batches: usize) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batches).all(|_| {
        let b = rng.random_range(1..=16);
        let keys: Vec<String> = (0..b).map(|_| format!("r{}", rng.random_range(0..4))).collect();
        let w = duplicate_weights(&keys);
        keys.iter().all(|k| {
            let group: Vec<f64> = keys.iter().zip(&w).filter(|(o, _)| *o == k).map(|(_, w)| *w).collect();
            let n = group.len() as f64;
            let sum: f64 = group.iter().sum();
            group.iter().all(|&g| g == 1.0 / n) && (sum - 1.0).abs() <= n * f64::EPSILON
        })
    })
}

/// Pairwise-count AUC in percent.
pub fn naive_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0usize);
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi == 1 && yj == 0 {
                pairs += 1;
                wins += match scores[i].partial_cmp(&scores[j]) {
                    Some(std::cmp::Ordering::Greater) => 1.0,
                    Some(std::cmp::Ordering::Equal) => 0.5,
                    _ => 0.0,
                };
            }
        }
    }
    (pairs > 0).then(|| 100.0 * wins / pairs as f64)
}

/// AP in percent from each item's rank under a stable descending order.
pub fn naive_ap(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let rank = |i: usize| 1 + (0..scores.len()).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i] == 1).collect();
    if positives.is_empty() {
        return None;
    }
    let total: f64 = positives
        .iter()
        .map(|&i| positives.iter().filter(|&&j| rank(j) <= rank(i)).count() as f64 / rank(i) as f64)
        .sum();
    Some(100.0 * total / positives.len() as f64)
}

fn metrics_oracle_error(seed: u64, instances: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let gap = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => (a - b).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    for _ in 0..instances {
        let n = rng.random_range(1..=50);
        let c = rng.random_range(1..=13);
        let preds: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..c).map(|_| (rng.random_range(0..=10) as f64) / 10.0).collect())
            .collect();
        let labels: Vec<Vec<u8>> = (0..n).map(|_| (0..c).map(|_| rng.random_range(0..=1)).collect()).collect();
        let names: Vec<String> = (0..c).map(|k| format!("c{k}")).collect();
        let r = evaluate(&preds, &labels, &names)?;
        for (k, m) in r.per_class.iter().enumerate() {
            let s: Vec<f64> = preds.iter().map(|p| p[k]).collect();
            let y: Vec<u8> = labels.iter().map(|l| l[k]).collect();
            let tp = (0..n).filter(|&i| s[i] >= THRESHOLD && y[i] == 1).count();
            let fp = (0..n).filter(|&i| s[i] >= THRESHOLD && y[i] == 0).count();
            let fn_ = (0..n).filter(|&i| s[i] < THRESHOLD && y[i] == 1).count();
            let correct = (0..n).filter(|&i| (s[i] >= THRESHOLD) == (y[i] == 1)).count();
            let f1 = if tp + fp + fn_ == 0 { 100.0 } else { 200.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
            worst = worst
                .max(gap(m.auc, naive_auc(&s, &y)))
                .max(gap(m.ap, naive_ap(&s, &y)))
                .max((m.acc - 100.0 * correct as f64 / n as f64).abs())
                .max((m.f1 - f1).abs());
        }
    }
    Ok(worst)
}

/// Runs every suite; the CLI exits 0 iff all results pass.
pub fn run(seed: u64) -> Vec<CheckResult> {
    let mut results = Vec::new();
    match primitive_gradient_errors(seed) {
        Ok(errs) => results.extend(errs.iter().map(|(n, e)| CheckResult::bound(&format!("grad/{n}"), *e, GRAD_TOLERANCE))),
        Err(e) => results.push(CheckResult::failed("grad/primitives", e)),
    }
    results.push(match objective_gradient_error(seed) {
        Ok(e) => CheckResult::bound("grad/full_objective", e, GRAD_TOLERANCE),
        Err(e) => CheckResult::failed("grad/full_objective", e),
    });
    results.push(match loss_oracle_error(seed, 100) {
        Ok(e) => CheckResult::bound("loss/brute_force", e, ORACLE_TOLERANCE),
        Err(e) => CheckResult::failed("loss/brute_force", e),
    });
    let same = vec![vec![0.6, 0.8], vec![0.6, 0.8]];
    let keys = vec!["r".to_string(), "r".to_string()];
    results.push(match library_contrastive(&same, &same, &keys, 0.07) {
        Ok(v) => CheckResult::bound("loss/identical_pair_ln2", (v - 2f64.ln()).abs(), 1e-12),
        Err(e) => CheckResult::failed("loss/identical_pair_ln2", e),
    });
    results.push(match library_contrastive(&same[..1], &same[..1], &keys[..1], 0.07) {
        Ok(v) => CheckResult {
            name: "loss/single_pair_zero".into(),
            passed: v == 0.0,
            detail: format!("loss {v:e}"),
        },
        Err(e) => CheckResult::failed("loss/single_pair_zero", e),
    });
    results.push(CheckResult {
        name: "omega/group_sums".into(),
        passed: duplicate_groups_sum_to_one(seed, 100),
        detail: "each group member weighs 1/n; group sums are 1 to n ulp".into(),
    });
    results.push(match permutation_error(seed, 100) {
        Ok(e) => CheckResult::bound("omega/permutation", e, PERMUTATION_TOLERANCE),
        Err(e) => CheckResult::failed("omega/permutation", e),
    });
    results.push(match metrics_oracle_error(seed, 100) {
        Ok(e) => CheckResult::bound("metrics/naive", e, ORACLE_TOLERANCE),
        Err(e) => CheckResult::failed("metrics/naive", e),
    });
    let auc = crate::metrics::auc(&[0.9, 0.8, 0.1], &[1, 0, 1]);
    let ap = crate::metrics::average_precision(&[0.9, 0.8, 0.1], &[1, 0, 1]);
    results.push(CheckResult {
        name: "metrics/fixtures".into(),
        passed: auc == Some(50.0) && ap.is_some_and(|v| (v - 250.0 / 3.0).abs() < 1e-12),
        detail: format!("auc {auc:?}, ap {ap:?}"),
    });
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        for (name, err) in primitive_gradient_errors(7).unwrap() {
            assert!(err < GRAD_TOLERANCE, "{name}: {err}");
        }
    }

    #[test]
    fn full_objective_passes() {
        for seed in [42, 7, 2024] {
            let err = objective_gradient_error(seed).unwrap();
            assert!(err < GRAD_TOLERANCE, "seed {seed}: {err}");
        }
    }

    #[test]
    fn naive_metrics_agree_on_fixtures() {
        assert_eq!(naive_auc(&[0.9, 0.8, 0.1], &[1, 0, 1]), Some(50.0));
        assert!((naive_ap(&[0.9, 0.8, 0.1], &[1, 0, 1]).unwrap() - 250.0 / 3.0).abs() < 1e-12);
        assert_eq!(naive_ap(&[0.5, 0.5], &[0, 1]), Some(50.0));
    }

    #[test]
    fn all_suites_pass() {
        let failed: Vec<_> = run(42).into_iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }
}

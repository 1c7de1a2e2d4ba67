//! Combined objective, Adam with a poly schedule, augmentation and the
//! training loop.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{clamp_log_tau, LOG_TAU};
use crate::config::{Augmentation, Toggles, TrainConfig};
use crate::corpus::PreparedCase;
use crate::cvp::DiseaseQuerySet;
use crate::encoders::{Plane, Volume};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::{Tensor, Var};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `bce + (ℓ_g + Σ ℓ_k) / n` where only enabled alignment terms are
/// summed and `n` counts them.
pub fn total_loss<'t>(
    bce: Var<'t>,
    global: Var<'t>,
    modality: &[Var<'t>],
    toggles: &Toggles,
) -> Result<Var<'t>> {
    let all = std::iter::once(bce).chain(std::iter::once(global)).chain(modality.iter().copied());
    if all.clone().any(|v| !v.value().is_finite()) {
        return Err(Error::NonFinite("loss term".into()));
    }
    let mut terms = Vec::new();
    if toggles.global_align {
        terms.push(global);
    }
    if toggles.modality_align {
        terms.extend_from_slice(modality);
    }
    if terms.is_empty() {
        return Ok(bce);
    }
    let n = terms.len() as f64;
    let mut sum = terms[0];
    for t in &terms[1..] {
        sum = sum.add(*t)?;
    }
    bce.add(sum.scale(1.0 / n))
}

/// `lr0 · (1 − epoch/epochs)^power` for a zero-based epoch.
pub fn poly_lr(epoch: usize, config: &TrainConfig) -> f64 {
    let frac = 1.0 - epoch as f64 / config.epochs as f64;
    config.lr0 * frac.max(0.0).powf(config.poly_power)
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

/// One Adam update of every trainable tensor. Parameters absent from
/// `grads` see a zero gradient; frozen ones are never touched.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = store.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
    let names: Vec<String> = store
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| !store.is_frozen(n))
        .collect();
    for name in names {
        let p = store.get_mut(&name).expect("listed name");
        let n = p.numel();
        let shape = p.shape().to_vec();
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape.clone()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
        let g = grads.get(&name);
        for i in 0..n {
            let gi = g.map_or(0.0, |g| g.data()[i]) + weight_decay * p.data()[i];
            let mi = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            p.data_mut()[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
        }
    }
    if let Some(t) = store.get_mut(LOG_TAU) {
        t.data_mut().iter_mut().for_each(|x| *x = clamp_log_tau(*x));
    }
    Ok(())
}

/// Random flips shared by all K volumes, then one shared shift and scale.
pub fn augment(volumes: &[Volume], aug: &Augmentation, rng: &mut impl Rng) -> Vec<Volume> {
    let mut out = volumes.to_vec();
    for plane in Plane::ALL {
        if rng.random::<f64>() < aug.flip_prob {
            out.iter_mut().for_each(|v| v.flip(plane));
        }
    }
    let [s0, s1] = aug.intensity_shift_range;
    let [k0, k1] = aug.intensity_scale_range;
    let shift = rng.random_range(s0..=s1);
    let scale = rng.random_range(k0..=k1);
    if shift != 0.0 || scale != 1.0 {
        for v in &mut out {
            v.voxels_mut().iter_mut().for_each(|x| *x = (*x + shift) * scale);
        }
    }
    out
}

/// Mean loss terms over the steps of one epoch (1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub bce: f64,
    pub global: f64,
    pub modality: Vec<f64>,
    pub total: f64,
    pub lr: f64,
}

pub struct TrainOutput {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Seeded shuffled mini-batches; each step augments, runs the forward
/// pass, back-propagates the combined loss and applies Adam.
pub fn train(cases: &[PreparedCase], config: TrainConfig, queries: DiseaseQuerySet) -> Result<TrainOutput> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = Model::init(config.clone(), queries)?;
    let texts = cases
        .iter()
        .map(|c| model.case_text(c))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<f64>> = cases.iter().map(|c| c.labels.as_f64()).collect();
    if let Some(bad) = labels.iter().find(|l| l.len() != config.num_classes) {
        return Err(Error::Validation(format!(
            "case labels have {} classes, config expects {}",
            bad.len(),
            config.num_classes
        )));
    }
    let query_emb = model.query_embedding(&model.queries)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e);
    let mut adam = AdamState::default();
    let mut order: Vec<usize> = (0..cases.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = poly_lr(epoch, &config);
        order.shuffle(&mut rng);
        let mut sums = EpochLog {
            epoch: epoch + 1,
            bce: 0.0,
            global: 0.0,
            modality: vec![0.0; config.k()],
            total: 0.0,
            lr,
        };
        let mut steps = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let vols = augment(&cases[i].volumes, &config.augmentation, &mut rng);
                    (vols, &texts[i], labels[i].as_slice())
                })
                .collect();
            let tape = crate::tensor::Tape::new();
            let losses = model.batch_losses(&tape, &batch, &query_emb)?;
            let grads = tape.backward(losses.total)?.params();
            adam_step(&mut model.store, &grads, &mut adam, lr, config.weight_decay)?;
            sums.bce += losses.bce.value().item();
            sums.global += losses.global.value().item();
            for (s, l) in sums.modality.iter_mut().zip(&losses.modality) {
                *s += l.value().item();
            }
            sums.total += losses.total.value().item();
            steps += 1;
        }
        let n = steps as f64;
        sums.bce /= n;
        sums.global /= n;
        sums.modality.iter_mut().for_each(|v| *v /= n);
        sums.total /= n;
        log::info!(
            "epoch {}/{} L={:.5} bce={:.5} g={:.5} lr={:.3e}",
            sums.epoch,
            config.epochs,
            sums.total,
            sums.bce,
            sums.global,
            lr
        );
        log.push(sums);
    }
    Ok(TrainOutput { model, log })
}

/// CSV with header `epoch,l_bce,l_g,l_<modality>...,L,lr`.
pub fn loss_csv(modalities: &[String], log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,l_bce,l_g");
    for m in modalities {
        out.push_str(&format!(",l_{m}"));
    }
    out.push_str(",L,lr\n");
    for row in log {
        out.push_str(&format!("{},{:.17e},{:.17e}", row.epoch, row.bce, row.global));
        for v in &row.modality {
            out.push_str(&format!(",{v:.17e}"));
        }
        out.push_str(&format!(",{:.17e},{:.17e}\n", row.total, row.lr));
    }
    out
}

/// Writes the checkpoint directory and loss CSV atomically.
pub fn write_outputs(output: &TrainOutput, checkpoint: &Path, csv: &Path) -> Result<()> {
    output.model.save(checkpoint)?;
    crate::io::write_atomic(csv, loss_csv(&output.model.config.modalities, &output.log).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn scalars<'t>(tape: &'t Tape, v: &[f64]) -> Vec<Var<'t>> {
        v.iter().map(|&x| tape.constant(Tensor::scalar(x))).collect()
    }

    #[test]
    fn total_loss_weighting() {
        let tape = Tape::no_grad();
        let one = tape.constant(Tensor::scalar(1.0));
        let ks = scalars(&tape, &[1.0; 4]);
        let on = Toggles::default();
        assert_eq!(total_loss(one, one, &ks, &on).unwrap().value().item(), 2.0);
        let no_mod = Toggles {
            modality_align: false,
            ..on
        };
        assert_eq!(total_loss(one, one, &ks, &no_mod).unwrap().value().item(), 2.0);
        let zero = scalars(&tape, &[0.0; 5]);
        assert_eq!(total_loss(zero[0], zero[1], &zero[1..], &on).unwrap().value().item(), 0.0);
        let off = Toggles {
            modality_align: false,
            global_align: false,
            ..on
        };
        let mixed = scalars(&tape, &[0.3, 5.0, 7.0]);
        assert_eq!(total_loss(mixed[0], mixed[1], &mixed[2..], &off).unwrap().value().item(), 0.3);
        let nan = tape.constant(Tensor::scalar(f64::NAN));
        assert!(total_loss(one, nan, &ks, &on).is_err());
    }

    #[test]
    fn poly_schedule_points() {
        let cfg = TrainConfig::default();
        assert_eq!(poly_lr(0, &cfg), 0.0002);
        assert!((poly_lr(99, &cfg) - 0.0002 * 0.01f64.powf(0.9)).abs() < 1e-18);
        assert!((poly_lr(50, &cfg) - 1.0718e-4).abs() < 1e-8);
        for e in 1..100 {
            assert!(poly_lr(e, &cfg) < poly_lr(e - 1, &cfg));
        }
    }

    #[test]
    fn adam_first_step_and_zero_grad() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(1.0));
        store.insert_frozen("text.table", Tensor::vector(vec![0.25, -3.0]));
        let frozen_before = store.get("text.table").unwrap().clone();
        let mut st = AdamState::default();
        let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(1.0))]);
        adam_step(&mut store, &grads, &mut st, 0.1, 0.0).unwrap();
        assert!((store.get("p").unwrap().item() - 0.9).abs() < 1e-6);
        assert_eq!(store.get("text.table").unwrap(), &frozen_before);

        let mut store2 = ParamStore::new();
        store2.insert("w", Tensor::vector(vec![0.5, -1.5]));
        let before = store2.clone();
        adam_step(&mut store2, &BTreeMap::new(), &mut AdamState::default(), 0.1, 0.0).unwrap();
        assert_eq!(store2, before);

        let bad = BTreeMap::from([("w".to_string(), Tensor::scalar(1.0))]);
        assert!(adam_step(&mut store2, &bad, &mut AdamState::default(), 0.1, 0.0).is_err());
    }

    #[test]
    fn augment_identity_and_determinism() {
        let v = Volume::new("T1WI", [2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        let vols = vec![v.clone(), v.clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&vols, &Augmentation::identity(), &mut rng), vols);
        let run = |seed| augment(&vols, &Augmentation::default(), &mut ChaCha8Rng::seed_from_u64(seed));
        let a = run(5);
        assert_eq!(a, run(5));
        // the same transform hits every modality
        assert_eq!(a[0].voxels(), a[1].voxels());
    }

    #[test]
    fn csv_header() {
        let m = vec!["T1WI".to_string(), "DWI".to_string()];
        let csv = loss_csv(&m, &[]);
        assert_eq!(csv, "epoch,l_bce,l_g,l_T1WI,l_DWI,L,lr\n");
    }
}

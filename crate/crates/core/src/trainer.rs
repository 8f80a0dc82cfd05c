//! Adam training of [`IronModel`] with a mean-squared-error loss.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landscape::{read_exact, read_u32, read_u64, GridIndex, LABEL_SCALE};
use crate::net::{IronModel, INPUT_EDGE, OUTPUT_DIM};

const WINDOW_LEN: usize = INPUT_EDGE * INPUT_EDGE * INPUT_EDGE;
const DATASET_MAGIC: &[u8; 4] = b"IRND";
const DATASET_VERSION: u32 = 1;
const LABEL_ARITY: u32 = 3;
const EVAL_BATCH: usize = 64;

/// Where a sample was cut from. Not part of the dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOrigin {
    pub scene: usize,
    pub center: GridIndex,
    pub optimum: GridIndex,
}

/// One window and its normalized offset label, at storage precision.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: Vec<f32>,
    pub label: [f32; 3],
    pub origin: Option<SampleOrigin>,
}

impl TrainingSample {
    /// Six regression targets: the label, then zeros for the angle slots.
    pub fn target(&self) -> [f64; OUTPUT_DIM] {
        let mut t = [0.0; OUTPUT_DIM];
        for (d, l) in t.iter_mut().zip(self.label) {
            *d = l as f64;
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 40,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("train.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta2", "must lie in [0, 1)"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config("train.epsilon", "must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be >= 2"));
        }
        Ok(())
    }
}

/// Mean squared error over every component of the batch, and its gradient
/// with respect to `pred`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "prediction has {} values, target {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_model(model: &IronModel) -> Self {
        let shapes: Vec<usize> = model.parameters().iter().map(|p| p.len()).collect();
        Self::new(&shapes)
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let shapes_match = params.len() == grads.len()
        && params.len() == state.m.len()
        && params
            .iter()
            .zip(grads)
            .zip(&state.m)
            .all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !shapes_match {
        return Err(Error::Shape("parameter, gradient and Adam state shapes differ".into()));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

fn stack_inputs(samples: &[&TrainingSample]) -> Result<Vec<f64>> {
    let mut x = Vec::with_capacity(samples.len() * WINDOW_LEN);
    for s in samples {
        if s.input.len() != WINDOW_LEN {
            return Err(Error::Shape(format!(
                "sample holds {} values, expected {WINDOW_LEN}",
                s.input.len()
            )));
        }
        x.extend(s.input.iter().map(|&v| v as f64));
    }
    Ok(x)
}

fn stack_targets(samples: &[&TrainingSample]) -> Vec<f64> {
    samples.iter().flat_map(|s| s.target()).collect()
}

/// Trains in place and returns the mean training loss of every epoch.
///
/// `on_epoch` sees the 1-based epoch number and its mean loss.
pub fn train(
    model: &mut IronModel,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if samples.len() < cfg.batch_size {
        return Err(Error::config(
            "train.batch_size",
            format!("exceeds the {} training samples", samples.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::for_model(model);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // A lone trailing sample cannot provide batch statistics.
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let x = stack_inputs(&batch)?;
            let (out, cache) = model.forward_train(&x, batch.len())?;
            let (loss, grad) = mse_loss(&out, &stack_targets(&batch))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_no + 1,
                    loss,
                });
            }
            let grads = model.backward(&cache, &grad)?;
            adam_step(&mut model.parameters_mut(), &grads.params, &mut adam, cfg)?;
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        let mean = total / count as f64;
        history.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(history)
}

/// Anything that maps a batch of windows to `batch × 6` outputs.
pub trait BatchRegressor {
    fn regress(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>>;
}

impl BatchRegressor for IronModel {
    fn regress(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.infer(inputs, batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub mean_loss: f64,
    pub param_accuracy: f64,
    pub samples: usize,
}

/// Infer-mode loss and the fraction of samples whose three translation
/// outputs all lie strictly within `1/22` of the label.
pub fn evaluate_split<M: BatchRegressor + ?Sized>(
    model: &M,
    samples: &[TrainingSample],
) -> Result<SplitEvaluation> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let threshold = 1.0 / LABEL_SCALE;
    let (mut loss_sum, mut hits) = (0.0, 0usize);
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch: Vec<&TrainingSample> = chunk.iter().collect();
        let out = model.regress(&stack_inputs(&batch)?, batch.len())?;
        let targets = stack_targets(&batch);
        let (loss, _) = mse_loss(&out, &targets)?;
        loss_sum += loss * batch.len() as f64;
        for (o, t) in out.chunks(OUTPUT_DIM).zip(targets.chunks(OUTPUT_DIM)) {
            if (0..3).all(|a| (o[a] - t[a]).abs() < threshold) {
                hits += 1;
            }
        }
    }
    let n = samples.len();
    Ok(SplitEvaluation {
        mean_loss: loss_sum / n as f64,
        param_accuracy: hits as f64 / n as f64,
        samples: n,
    })
}

/// Seeded shuffle, then the first `train_fraction` for training.
pub fn split_dataset(
    samples: &[TrainingSample],
    train_fraction: f64,
    seed: u64,
) -> (Vec<TrainingSample>, Vec<TrainingSample>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((samples.len() as f64) * train_fraction).round() as usize;
    let pick = |ids: &[usize]| ids.iter().map(|&i| samples[i].clone()).collect();
    (pick(&idx[..cut]), pick(&idx[cut..]))
}

pub fn write_dataset<W: Write>(samples: &[TrainingSample], mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + samples.len() * 4 * (WINDOW_LEN + 3));
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(INPUT_EDGE as u32).to_le_bytes());
    buf.extend_from_slice(&LABEL_ARITY.to_le_bytes());
    for s in samples {
        if s.input.len() != WINDOW_LEN {
            return Err(Error::Shape(format!("sample holds {} values", s.input.len())));
        }
        for v in s.input.iter().chain(&s.label) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Vec<TrainingSample>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not an IRND dataset file".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let count = read_u64(&mut r, "sample count")?;
    let edge = read_u32(&mut r, "edge")?;
    let arity = read_u32(&mut r, "label arity")?;
    if edge as usize != INPUT_EDGE || arity != LABEL_ARITY {
        return Err(Error::Format(format!(
            "dataset holds {edge}³ windows with {arity} labels, expected {INPUT_EDGE}³ and {LABEL_ARITY}"
        )));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let per = 4 * (WINDOW_LEN + 3);
    if count.checked_mul(per as u64) != Some(rest.len() as u64) {
        return Err(Error::Format(format!(
            "payload of {} bytes does not hold {count} samples",
            rest.len()
        )));
    }
    let samples = rest
        .chunks_exact(per)
        .map(|rec| {
            let mut vals = rec
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()));
            let input: Vec<f32> = vals.by_ref().take(WINDOW_LEN).collect();
            let label = [vals.next().unwrap(), vals.next().unwrap(), vals.next().unwrap()];
            TrainingSample {
                input,
                label,
                origin: None,
            }
        })
        .collect::<Vec<_>>();
    if samples
        .iter()
        .any(|s| s.input.iter().chain(&s.label).any(|v| !v.is_finite()))
    {
        return Err(Error::Format("dataset holds non-finite values".into()));
    }
    Ok(samples)
}

/// Two-column `epoch,mean_loss` CSV with 1-based epochs.
pub fn write_loss_csv<W: Write>(history: &[f64], mut w: W) -> Result<()> {
    writeln!(w, "epoch,mean_loss")?;
    for (i, l) in history.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, l)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Architecture, InputNorm};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use std::cell::Cell;

    fn sample(seed: u64, label: [f32; 3]) -> TrainingSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrainingSample {
            input: (0..WINDOW_LEN).map(|_| rng.gen_range(0.0..1.0)).collect(),
            label,
            origin: None,
        }
    }

    #[test]
    fn mse_cases() {
        let (l, g) = mse_loss(&[0.5; 6], &[0.5; 6]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
        let (l, _) = mse_loss(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], &[0.0; 6]).unwrap();
        assert_abs_diff_eq!(l, 1.0 / 6.0, epsilon = 1e-15);
        assert!(mse_loss(&[0.0; 6], &[0.0; 12]).is_err());
    }

    #[test]
    fn mse_matches_two_loop_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = 7;
        let p: Vec<f64> = (0..batch * 6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..batch * 6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut expect = 0.0;
        for b in 0..batch {
            for c in 0..6 {
                expect += (p[b * 6 + c] - t[b * 6 + c]).powi(2);
            }
        }
        expect /= (batch * 6) as f64;
        let (l, g) = mse_loss(&p, &t).unwrap();
        assert_abs_diff_eq!(l, expect, epsilon = 1e-12);
        for i in 0..p.len() {
            assert_abs_diff_eq!(g[i], 2.0 * (p[i] - t[i]) / (batch * 6) as f64, epsilon = 1e-15);
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let cfg = TrainConfig::default();
        let mut w = vec![1.0, -2.0];
        let mut st = AdamState::new(&[2]);
        adam_step(&mut [&mut w[..]], &[vec![0.0, 0.0]], &mut st, &cfg).unwrap();
        assert_eq!(w, vec![1.0, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let cfg = TrainConfig::default();
        for g in [3.0, -0.5] {
            let mut w = vec![0.0];
            let mut st = AdamState::new(&[1]);
            adam_step(&mut [&mut w[..]], &[vec![g]], &mut st, &cfg).unwrap();
            assert_abs_diff_eq!(w[0], -cfg.learning_rate * f64::signum(g), epsilon = 1e-6);
        }
    }

    #[test]
    fn adam_descends_a_parabola() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut w = vec![1.0];
        let mut st = AdamState::new(&[1]);
        let mut prev = w[0];
        for _ in 0..3 {
            let g = vec![2.0 * w[0]];
            adam_step(&mut [&mut w[..]], &[g], &mut st, &cfg).unwrap();
            assert!(w[0] < prev);
            prev = w[0];
        }
        assert_eq!(st.t, 3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn overfits_one_repeated_sample() {
        let s = sample(1, [0.3, -0.2, 0.1]);
        let data: Vec<_> = (0..4).map(|_| s.clone()).collect();
        let mut model = IronModel::new(
            Architecture {
                conv_channels: vec![1, 4, 4, 4, 4],
                fc_sizes: vec![4, 8, 8, 8, 6],
            },
            InputNorm::Standardize,
            2,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 4,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let hist = train(&mut model, &data, &cfg, |_, _| {}).unwrap();
        assert_eq!(hist.len(), 200);
        let tail: f64 = hist[190..].iter().sum::<f64>() / 10.0;
        assert!(tail < 1e-3, "final loss {tail}");
        let head: f64 = hist[..10].iter().sum::<f64>() / 10.0;
        assert!(tail < head);
    }

    #[test]
    fn training_is_deterministic() {
        let data: Vec<_> = (0..6).map(|i| sample(i, [0.1 * i as f32, 0.0, -0.1])).collect();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed: 9,
            ..Default::default()
        };
        let run = || {
            let mut m = IronModel::new(Architecture::reduced(), InputNorm::Standardize, 1).unwrap();
            let h = train(&mut m, &data, &cfg, |_, _| {}).unwrap();
            (h, m)
        };
        let (h1, m1) = run();
        let (h2, m2) = run();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn training_rejects_bad_input() {
        let mut m = IronModel::new(Architecture::reduced(), InputNorm::None, 1).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(train(&mut m, &[], &cfg, |_, _| {}), Err(Error::EmptyInput(_))));
        let bad = TrainConfig { epochs: 0, ..cfg };
        assert!(train(&mut m, &[sample(0, [0.0; 3])], &bad, |_, _| {}).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut data: Vec<_> = (0..4).map(|i| sample(i, [0.0; 3])).collect();
        data[2].label = [f32::INFINITY, 0.0, 0.0];
        let mut m = IronModel::new(Architecture::reduced(), InputNorm::None, 1).unwrap();
        let cfg = TrainConfig { batch_size: 4, ..Default::default() };
        assert!(matches!(
            train(&mut m, &data, &cfg, |_, _| {}),
            Err(Error::Divergence { epoch: 1, batch: 1, .. })
        ));
    }

    /// Returns stored outputs in order, one batch at a time.
    struct Replay {
        outputs: Vec<[f64; 6]>,
        next: Cell<usize>,
    }

    impl BatchRegressor for Replay {
        fn regress(&self, _: &[f64], batch: usize) -> Result<Vec<f64>> {
            let start = self.next.get();
            self.next.set(start + batch);
            Ok(self.outputs[start..start + batch].iter().flatten().copied().collect())
        }
    }

    #[test]
    fn evaluation_cases() {
        let data: Vec<_> = (0..100)
            .map(|i| sample(i, [(i % 7) as f32 / 22.0, -0.5, 0.25]))
            .collect();
        let perfect = Replay {
            outputs: data.iter().map(|s| s.target()).collect(),
            next: Cell::new(0),
        };
        let e = evaluate_split(&perfect, &data).unwrap();
        assert_eq!((e.param_accuracy, e.mean_loss), (1.0, 0.0));

        let zeros = Replay {
            outputs: vec![[0.0; 6]; 2],
            next: Cell::new(0),
        };
        let flat = vec![sample(0, [0.0; 3]), sample(1, [0.0; 3])];
        assert_eq!(evaluate_split(&zeros, &flat).unwrap().param_accuracy, 1.0);

        let zeros = Replay {
            outputs: vec![[0.0; 6]; 1],
            next: Cell::new(0),
        };
        let off = vec![sample(0, [0.5, 0.0, 0.0])];
        assert_eq!(evaluate_split(&zeros, &off).unwrap().param_accuracy, 0.0);
        assert!(evaluate_split(&zeros, &[]).is_err());
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let data: Vec<_> = (0..3).map(|i| sample(i, [i as f32 / 22.0, 0.5, -1.0])).collect();
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 3 * 4 * (729 + 3));
        let back = read_dataset(&buf[..]).unwrap();
        assert_eq!(back, data);
        assert!(matches!(read_dataset(&buf[..buf.len() - 2]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[16] = 7;
        assert!(matches!(read_dataset(&bad[..]), Err(Error::Format(_))));
        assert!(matches!(read_dataset(&b"IRNT"[..]), Err(Error::Format(_))));
    }

    #[test]
    fn split_is_seeded_partition() {
        let data: Vec<_> = (0..20).map(|i| sample(i, [0.0; 3])).collect();
        let (a, b) = split_dataset(&data, 0.9, 4);
        assert_eq!((a.len(), b.len()), (18, 2));
        assert_eq!(split_dataset(&data, 0.9, 4).1, b);
        for s in &b {
            assert!(!a.contains(s));
        }
    }

    #[test]
    fn loss_csv_layout() {
        let mut out = Vec::new();
        write_loss_csv(&[0.5, 0.25], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "epoch,mean_loss\n1,0.5\n2,0.25\n");
    }
}

//! Pixel losses, Adam, the step-halving schedule and the training loop.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{backward_passes, run_passes, ModelParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    L1,
    L2,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            other => Err(Error::Config(format!("loss must be l1 or l2, got {other:?}"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
        })
    }
}

/// Mean pixel loss and its gradient with respect to `pred`.
///
/// L1 uses `sign(pred - target) / count`, with 0 at exact ties.
pub fn pixel_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, kind: LossKind) -> Result<(f64, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(
            "pixel_loss",
            format!("pred {} vs target {}", pred.shape(), target.shape()),
        ));
    }
    let count = pred.len().max(1) as f64;
    let inv = T::lit(1.0 / count);
    let two = T::lit(2.0 / count);
    let mut loss = 0.0f64;
    let grad: Vec<T> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            match kind {
                LossKind::L1 => {
                    loss += d.abs().as_f64();
                    if d > T::zero() {
                        inv
                    } else if d < T::zero() {
                        -inv
                    } else {
                        T::zero()
                    }
                }
                LossKind::L2 => {
                    loss += (d * d).as_f64();
                    d * two
                }
            }
        })
        .collect();
    Ok((loss / count, Tensor::from_vec(pred.shape(), grad)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// LR-space patch edge.
    pub patch_size: usize,
    /// Iterations between learning-rate halvings.
    pub halve_every: usize,
    pub max_iters: usize,
    pub loss: LossKind,
    pub seed: u64,
    /// Record the loss every this many iterations.
    pub log_every: usize,
    /// Optional global gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            patch_size: 32,
            halve_every: 200_000,
            max_iters: 1_000,
            loss: LossKind::L1,
            seed: 0,
            log_every: 10,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    /// Batch 8 for five-frame training; everything else as the image setting.
    pub fn video() -> Self {
        TrainConfig {
            batch_size: 8,
            ..Self::default()
        }
    }
}

/// `lr0 · 0.5^floor(iter / halve_every)`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    let halvings = iter / cfg.halve_every.max(1);
    cfg.lr0 * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32)
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

fn check_finite<T: Scalar>(grads: &ModelParams<T>, iteration: usize) -> Result<()> {
    for (name, g) in grads.named_tensors() {
        if !g.all_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of {name}"),
                iteration,
            });
        }
    }
    Ok(())
}

/// One bias-corrected Adam update. Gradients are checked for non-finite
/// values before anything is modified.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    check_finite(grads, state.t as usize)?;
    state.t += 1;
    let t = state.t.min(i32::MAX as u64) as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let corr1 = T::lit(1.0 - cfg.beta1.powi(t));
    let corr2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(cfg.eps));

    let grads = grads.named_tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, (_, g)), m), v) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

fn clip_gradients<T: Scalar>(grads: &mut ModelParams<T>, max_norm: f64) {
    let norm = grads
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.as_f64().powi(2)))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for t in grads.tensors_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Produces aligned `(input, target)` batches.
pub trait BatchSource<T: Scalar> {
    fn next_batch(&mut self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<T>, Tensor<T>)>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub records: Vec<LossRecord>,
}

impl LossHistory {
    /// Whitespace-separated `iter lr loss` table with a header line.
    pub fn to_table(&self) -> String {
        let mut s = String::from("# iter lr loss\n");
        for r in &self.records {
            let _ = writeln!(s, "{} {:.6e} {:.8e}", r.iter, r.lr, r.loss);
        }
        s
    }
}

/// Optimizer state for one training run.
pub struct Trainer<T> {
    pub params: ModelParams<T>,
    pub adam: AdamState<T>,
    pub cfg: TrainConfig,
    /// Recurrent passes per step (1 for ×2/×3, 2 for ×4, 3 for ×8).
    pub passes: usize,
    pub iter: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(params: ModelParams<T>, cfg: TrainConfig, passes: usize) -> Self {
        let adam = AdamState::new(&params);
        Trainer {
            params,
            adam,
            cfg,
            passes: passes.max(1),
            iter: 0,
        }
    }

    /// Forward, loss, backward and one Adam update. Returns the loss before
    /// the update. On error the parameters are left untouched.
    pub fn step(&mut self, input: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
        let (pred, caches) = run_passes(input, &self.params, self.passes)?;
        let (loss, grad) = pixel_loss(&pred, target, self.cfg.loss)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                iteration: self.iter,
            });
        }
        let (mut grads, _) = backward_passes(&grad, &caches, &self.params)?;
        check_finite(&grads, self.iter)?;
        if let Some(max_norm) = self.cfg.clip_norm {
            clip_gradients(&mut grads, max_norm);
        }
        let lr = lr_at(self.iter, &self.cfg);
        adam_step(&mut self.params, &grads, &mut self.adam, lr, &self.cfg)?;
        self.iter += 1;
        Ok(loss)
    }
}

/// Runs `cfg.max_iters` training steps on `params`.
///
/// A loss is recorded after the first step, after every `log_every`-th step
/// and after the last one; `on_log` sees it with the updated parameters
/// (`rec.iter + 1` steps done), which is where callers write checkpoints. If a step fails the
/// parameters from the last successful step are kept in `params`.
pub fn fit<T: Scalar, S: BatchSource<T>>(
    params: &mut ModelParams<T>,
    source: &mut S,
    cfg: &TrainConfig,
    passes: usize,
    mut on_log: impl FnMut(&LossRecord, &ModelParams<T>),
) -> Result<LossHistory> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = Trainer::new(params.clone(), cfg.clone(), passes);
    let mut history = LossHistory::default();
    let log_every = cfg.log_every.max(1);
    let mut outcome = Ok(());
    for it in 0..cfg.max_iters {
        let step = source
            .next_batch(cfg.batch_size, &mut rng)
            .and_then(|(x, y)| trainer.step(&x, &y));
        let loss = match step {
            Ok(l) => l,
            Err(e) => {
                outcome = Err(e);
                break;
            }
        };
        if it == 0 || (it + 1) % log_every == 0 || it + 1 == cfg.max_iters {
            let rec = LossRecord {
                iter: it,
                lr: lr_at(it, cfg),
                loss,
            };
            history.records.push(rec);
            on_log(&rec, &trainer.params);
        }
    }
    *params = trainer.params;
    outcome.map(|_| history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::NetConfig;
    use crate::gradcheck::{check_gradient, random_tensor};
    use crate::tensor::Shape;

    fn scalar_model(p: f64) -> ModelParams<f64> {
        // smallest legal model; only the first weight element is used
        let cfg = NetConfig {
            feat: 1,
            growth: 1,
            blocks: 1,
            units: 1,
            ..NetConfig::reference()
        };
        let mut m = ModelParams::<f64>::zeros(cfg).unwrap();
        m.tensors_mut()[0].data_mut()[0] = p;
        m
    }

    #[test]
    fn loss_parsing() {
        assert_eq!("L1".parse::<LossKind>().unwrap(), LossKind::L1);
        assert_eq!("l2".parse::<LossKind>().unwrap(), LossKind::L2);
        assert!("huber".parse::<LossKind>().is_err());
    }

    #[test]
    fn identical_inputs_give_zero_loss_and_gradient() {
        let x = random_tensor::<f32>(Shape::new(2, 3, 4, 4), 1);
        for kind in [LossKind::L1, LossKind::L2] {
            let (l, g) = pixel_loss(&x, &x, kind).unwrap();
            assert_eq!(l, 0.0);
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn constant_residual_l1() {
        let t = Tensor::<f64>::zeros(Shape::new(1, 3, 2, 2));
        let p = Tensor::full(t.shape(), 0.5);
        assert_eq!(pixel_loss(&p, &t, LossKind::L1).unwrap().0, 0.5);
        assert_eq!(pixel_loss(&p, &t, LossKind::L2).unwrap().0, 0.25);
    }

    #[test]
    fn loss_shape_mismatch() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 3, 2, 2));
        let b = Tensor::<f32>::zeros(Shape::new(1, 3, 2, 3));
        assert!(pixel_loss(&a, &b, LossKind::L1).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let p = random_tensor::<f64>(Shape::new(2, 3, 3, 3), 2);
        let t = random_tensor::<f64>(p.shape(), 3);
        for kind in [LossKind::L1, LossKind::L2] {
            let (_, g) = pixel_loss(&p, &t, kind).unwrap();
            let e = check_gradient(&p, |x| pixel_loss(x, &t, kind).unwrap().0, |_| g.clone());
            assert!(e < 1e-4, "{kind}: {e}");
        }
    }

    #[test]
    fn schedule_halves() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-4);
        assert_eq!(lr_at(199_999, &cfg), 1e-4);
        assert_eq!(lr_at(200_000, &cfg), 5e-5);
        assert_eq!(lr_at(400_000, &cfg), 2.5e-5);
        let mut prev = f64::INFINITY;
        for it in (0..2_000_000).step_by(50_000) {
            let lr = lr_at(it, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_step_is_a_no_op() {
        let mut p = ModelParams::<f64>::init(NetConfig { feat: 2, growth: 1, blocks: 1, units: 1, ..NetConfig::reference() }, 1).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let g = p.zeros_like();
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut st, 1e-3, &TrainConfig::default()).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.t, 3);
    }

    /// Hand-unrolled Adam on a single scalar.
    fn adam_oracle(p0: f64, grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        p
    }

    #[test]
    fn scalar_adam_matches_hand_recurrence() {
        let cfg = TrainConfig::default();
        let mut p = scalar_model(1.0);
        let mut g = p.zeros_like();
        g.tensors_mut()[0].data_mut()[0] = 1.0;
        let mut st = AdamState::new(&p);

        adam_step(&mut p, &g, &mut st, 1e-4, &cfg).unwrap();
        let one = p.named_tensors()[0].1.data()[0];
        assert!((one - (1.0 - 1e-4 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((one - 0.9999).abs() < 1e-9);

        adam_step(&mut p, &g, &mut st, 1e-4, &cfg).unwrap();
        let two = p.named_tensors()[0].1.data()[0];
        assert!((two - adam_oracle(1.0, &[1.0, 1.0], 1e-4)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_reported_by_name() {
        let mut p = scalar_model(1.0);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.tensors_mut()[3].data_mut()[0] = f64::NAN;
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &g, &mut st, 1e-4, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("head.1.bias"), "{err}");
        assert_eq!(p, before);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn history_table_format() {
        let h = LossHistory {
            records: vec![LossRecord { iter: 0, lr: 1e-4, loss: 0.5 }],
        };
        let t = h.to_table();
        assert!(t.starts_with("# iter lr loss\n0 1.000000e-4 5.00000000e-1"), "{t}");
    }

    struct FixedPair(Tensor<f32>, Tensor<f32>);

    impl BatchSource<f32> for FixedPair {
        fn next_batch(&mut self, _: usize, _: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
            Ok((self.0.clone(), self.1.clone()))
        }
    }

    fn micro_setup() -> (ModelParams<f32>, FixedPair) {
        let cfg = NetConfig { feat: 4, growth: 2, blocks: 1, units: 1, ..NetConfig::reference() };
        let p = ModelParams::init(cfg, 5).unwrap();
        let x = random_tensor::<f32>(Shape::new(1, 3, 6, 6), 6).map(|v| 0.5 + 0.4 * v);
        let y = random_tensor::<f32>(Shape::new(1, 3, 12, 12), 7).map(|v| 0.5 + 0.4 * v);
        (p, FixedPair(x, y))
    }

    #[test]
    fn zero_iterations_leave_parameters_untouched() {
        let (mut p, mut src) = micro_setup();
        let before = p.clone();
        let cfg = TrainConfig { max_iters: 0, ..TrainConfig::default() };
        let h = fit(&mut p, &mut src, &cfg, 1, |_, _| {}).unwrap();
        assert!(h.records.is_empty());
        assert_eq!(p, before);
    }

    #[test]
    fn same_seed_gives_identical_histories() {
        let cfg = TrainConfig { max_iters: 20, log_every: 1, lr0: 1e-3, ..TrainConfig::default() };
        let run = || {
            let (mut p, mut src) = micro_setup();
            let h = fit(&mut p, &mut src, &cfg, 1, |_, _| {}).unwrap();
            (h, p)
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
        assert_eq!(h1.records.len(), 20);
    }

    #[test]
    fn non_finite_input_aborts_and_keeps_last_good_parameters() {
        let (mut p, mut src) = micro_setup();
        src.0.data_mut()[0] = f32::NAN;
        let before = p.clone();
        let cfg = TrainConfig { max_iters: 5, ..TrainConfig::default() };
        let err = fit(&mut p, &mut src, &cfg, 1, |_, _| {}).unwrap_err();
        assert!(matches!(err, Error::NonFinite { iteration: 0, .. }), "{err}");
        assert_eq!(p, before);
    }

    #[test]
    fn single_pair_loss_eventually_decreases() {
        let (mut p, mut src) = micro_setup();
        let cfg = TrainConfig { max_iters: 300, log_every: 1, lr0: 1e-3, ..TrainConfig::default() };
        let h = fit(&mut p, &mut src, &cfg, 1, |_, _| {}).unwrap();
        let losses: Vec<f64> = h.records.iter().map(|r| r.loss).collect();
        let tenth = losses.len() / 10;
        let head = losses[..tenth].iter().copied().fold(f64::INFINITY, f64::min);
        let tail = losses[losses.len() - tenth..].iter().copied().fold(f64::INFINITY, f64::min);
        assert!(tail < head, "{tail} !< {head}");
    }
}

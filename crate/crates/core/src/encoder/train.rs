use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Xy;
use crate::types::HyperParams;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSize {
    Rows(usize),
    Full,
}

impl BatchSize {
    fn rows(self, n: usize) -> usize {
        match self {
            BatchSize::Rows(b) => b.clamp(1, n.max(1)),
            BatchSize::Full => n.max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Also the horizon of the linear learning-rate decay.
    pub max_epochs: usize,
    pub batch_size: BatchSize,
    /// Epochs without a new validation minimum before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 40,
            batch_size: BatchSize::Rows(32),
            patience: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch; the full training loss for epoch 0.
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    /// Epoch of the returned parameters (0 is the initial state).
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub diverged: bool,
}

/// Mean squared error over all rows and voxels.
fn mse(x: &Array2<f64>, y: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> f64 {
    let r = x.dot(w) + b - y;
    r.iter().map(|v| v * v).sum::<f64>() / r.len().max(1) as f64
}

/// `MSE + 0.5 * wd * |W|^2`; the bias is not decayed.
pub fn objective(data: &Xy, w: &Array2<f64>, b: &Array1<f64>, wd: f64) -> f64 {
    mse(&data.x, &data.y, w, b) + 0.5 * wd * w.iter().map(|v| v * v).sum::<f64>()
}

/// Gradient of [`objective`] with respect to `W` and `b`.
pub fn mse_gradient(data: &Xy, w: &Array2<f64>, b: &Array1<f64>, wd: f64) -> (Array2<f64>, Array1<f64>) {
    let (gw, gb, _) = batch_gradient(&data.x, &data.y, w, b);
    (gw + &(w * wd), gb)
}

fn batch_gradient(
    x: &Array2<f64>,
    y: &Array2<f64>,
    w: &Array2<f64>,
    b: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, f64) {
    let r = x.dot(w) + b - y;
    let scale = 2.0 / r.len().max(1) as f64;
    let loss = r.iter().map(|v| v * v).sum::<f64>() / r.len().max(1) as f64;
    let gw = x.t().dot(&r) * scale;
    let gb = r.sum_axis(Axis(0)) * scale;
    (gw, gb, loss)
}

struct AdamW {
    mw: Array2<f64>,
    vw: Array2<f64>,
    mb: Array1<f64>,
    vb: Array1<f64>,
    t: i32,
}

impl AdamW {
    fn new(f: usize, v: usize) -> Self {
        Self {
            mw: Array2::zeros((f, v)),
            vw: Array2::zeros((f, v)),
            mb: Array1::zeros(v),
            vb: Array1::zeros(v),
            t: 0,
        }
    }

    fn step(
        &mut self,
        w: &mut Array2<f64>,
        b: &mut Array1<f64>,
        gw: &Array2<f64>,
        gb: &Array1<f64>,
        lr: f64,
        wd: f64,
    ) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        w.mapv_inplace(|p| p * (1.0 - lr * wd));
        ndarray::Zip::from(w)
            .and(&mut self.mw)
            .and(&mut self.vw)
            .and(gw)
            .for_each(|p, m, v, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
            });
        ndarray::Zip::from(b)
            .and(&mut self.mb)
            .and(&mut self.vb)
            .and(gb)
            .for_each(|p, m, v, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
            });
    }
}

/// Trains a zero-initialised linear head with AdamW.
///
/// With `validation`, training runs up to `epochs` and stops once `patience` epochs pass
/// without a new validation minimum; the parameters from the best epoch are returned.
/// Without it, exactly `epochs` epochs are run. Either way the learning rate decays linearly
/// to zero over `cfg.max_epochs` epochs, so a shortened retrain follows the same schedule.
pub fn fit(
    train: &Xy,
    validation: Option<&Xy>,
    hp: HyperParams,
    cfg: &TrainConfig,
    epochs: usize,
    rng: &mut ChaCha8Rng,
) -> FitResult {
    let n = train.rows();
    let (f, v) = (train.x.ncols(), train.y.ncols());
    let mut w = Array2::zeros((f, v));
    let mut b = Array1::zeros(v);
    let batch = cfg.batch_size.rows(n);
    let steps_per_epoch = n.div_ceil(batch);
    let horizon = (cfg.max_epochs.max(epochs) * steps_per_epoch).max(1) as f64;
    let mut opt = AdamW::new(f, v);
    let mut order: Vec<usize> = (0..n).collect();

    let val_loss = |w: &Array2<f64>, b: &Array1<f64>| validation.map(|d| mse(&d.x, &d.y, w, b));
    let mut history = vec![EpochMetrics {
        epoch: 0,
        train_loss: mse(&train.x, &train.y, &w, &b),
        validation_loss: val_loss(&w, &b),
    }];
    let mut best = (0usize, history[0].validation_loss.unwrap_or(f64::INFINITY));
    let mut snapshot = (w.clone(), b.clone());
    let mut diverged = false;
    let mut step = 0usize;

    for epoch in 1..=epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            let xb = train.x.select(Axis(0), chunk);
            let yb = train.y.select(Axis(0), chunk);
            let (gw, gb, loss) = batch_gradient(&xb, &yb, &w, &b);
            loss_sum += loss * chunk.len() as f64;
            let lr = hp.learning_rate * (1.0 - step as f64 / horizon);
            opt.step(&mut w, &mut b, &gw, &gb, lr, hp.weight_decay);
            step += 1;
        }
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / n.max(1) as f64,
            validation_loss: val_loss(&w, &b),
        };
        history.push(metrics);
        let finite = metrics.train_loss.is_finite()
            && metrics.validation_loss.is_none_or(f64::is_finite)
            && w.iter().all(|p| p.is_finite());
        if !finite {
            diverged = true;
            break;
        }
        match metrics.validation_loss {
            Some(vl) => {
                if vl < best.1 {
                    best = (epoch, vl);
                    snapshot = (w.clone(), b.clone());
                } else if epoch - best.0 >= cfg.patience {
                    break;
                }
            }
            None => {
                best.0 = epoch;
                snapshot = (w.clone(), b.clone());
            }
        }
    }

    FitResult {
        weights: snapshot.0,
        bias: snapshot.1,
        best_epoch: best.0,
        history,
        diverged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn random_xy(n: usize, f: usize, v: usize, noise: f64, seed: u64) -> (Xy, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, f), |_| rng.sample::<f64, _>(StandardNormal));
        let w = Array2::from_shape_fn((f, v), |_| rng.sample::<f64, _>(StandardNormal) * 0.5);
        let y = x.dot(&w) + Array2::from_shape_fn((n, v), |_| rng.sample::<f64, _>(StandardNormal) * noise);
        (Xy { x, y }, w)
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (data, _) = random_xy(12, 4, 3, 0.3, 1);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let w = Array2::from_shape_fn((4, 3), |_| r.random::<f64>() - 0.5);
        let b = Array1::from_shape_fn(3, |_| r.random::<f64>() - 0.5);
        let wd = 0.3;
        let (gw, gb) = mse_gradient(&data, &w, &b, wd);
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[[i, j]] += h;
                wm[[i, j]] -= h;
                let fd = (objective(&data, &wp, &b, wd) - objective(&data, &wm, &b, wd)) / (2.0 * h);
                assert!((fd - gw[[i, j]]).abs() <= 1e-4 * fd.abs().max(1e-8), "{fd} vs {}", gw[[i, j]]);
            }
        }
        for j in 0..3 {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[j] += h;
            bm[j] -= h;
            let fd = (objective(&data, &w, &bp, wd) - objective(&data, &w, &bm, wd)) / (2.0 * h);
            assert!((fd - gb[j]).abs() <= 1e-4 * fd.abs().max(1e-8));
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initialisation() {
        let (train, _) = random_xy(40, 5, 2, 0.1, 3);
        let (val, _) = random_xy(10, 5, 2, 0.1, 4);
        let hp = HyperParams {
            learning_rate: 0.0,
            weight_decay: 1e-5,
        };
        let cfg = TrainConfig {
            patience: 100,
            ..TrainConfig::default()
        };
        let out = fit(&train, Some(&val), hp, &cfg, 10, &mut rng());
        assert!(out.weights.iter().all(|&v| v == 0.0));
        assert!(out.bias.iter().all(|&v| v == 0.0));
        let v0 = out.history[0].validation_loss.unwrap();
        assert!(out.history.iter().all(|m| m.validation_loss == Some(v0)));
    }

    #[test]
    fn decay_shrinks_weight_norm_every_epoch() {
        // one feature, one voxel: both runs see identical gradient signs, and the decayed run
        // additionally multiplies by (1 - lr wd) each step
        let x = Array2::from_shape_fn((16, 1), |(i, _)| 1.0 + (i % 4) as f64);
        let y = &x * 2.0;
        let data = Xy { x, y };
        let cfg = TrainConfig {
            max_epochs: 20,
            batch_size: BatchSize::Rows(4),
            patience: 3,
        };
        let norms = |wd: f64| {
            (1..=20)
                .map(|e| {
                    let hp = HyperParams {
                        learning_rate: 1e-3,
                        weight_decay: wd,
                    };
                    fit(&data, None, hp, &cfg, e, &mut rng()).weights[[0, 0]].abs()
                })
                .collect::<Vec<_>>()
        };
        let plain = norms(0.0);
        let decayed = norms(1e-5);
        for (p, d) in plain.iter().zip(&decayed) {
            assert!(d < p, "{d} !< {p}");
        }
    }

    #[test]
    fn first_step_matches_update_rule() {
        // first AdamW step from zero moves every weight by -lr * sign(g)
        let x = ndarray::array![[1.0, -2.0], [0.5, 1.0]];
        let y = ndarray::array![[1.0], [-1.0]];
        let data = Xy { x, y };
        let cfg = TrainConfig {
            max_epochs: 1,
            batch_size: BatchSize::Full,
            patience: 3,
        };
        let hp = HyperParams {
            learning_rate: 0.01,
            weight_decay: 1e-5,
        };
        let out = fit(&data, None, hp, &cfg, 1, &mut rng());
        let (gw, gb) = mse_gradient(&data, &Array2::zeros((2, 1)), &Array1::zeros(1), 0.0);
        for (w, g) in out.weights.iter().zip(gw.iter()) {
            let expect = -0.01 * g / (g.abs() + EPS);
            assert!((w - expect).abs() < 1e-15);
        }
        assert!((out.bias[0] + 0.01 * gb[0] / (gb[0].abs() + EPS)).abs() < 1e-15);
    }

    #[test]
    fn full_batch_loss_is_monotone_for_small_steps() {
        let (data, _) = random_xy(60, 6, 3, 0.2, 9);
        let cfg = TrainConfig {
            max_epochs: 400,
            batch_size: BatchSize::Full,
            patience: 3,
        };
        let hp = HyperParams {
            learning_rate: 5e-3,
            weight_decay: 0.0,
        };
        let out = fit(&data, None, hp, &cfg, 400, &mut rng());
        // entry e holds the loss evaluated before step e
        let losses: Vec<f64> = out.history.iter().skip(1).map(|m| m.train_loss).collect();
        assert!(losses.windows(2).all(|p| p[1] <= p[0]), "{losses:?}");
        assert!(losses.last().unwrap() < &(0.5 * losses[0]));
    }

    #[test]
    fn early_stopping_respects_patience() {
        let (train, _) = random_xy(30, 20, 2, 2.0, 10);
        let (val, _) = random_xy(30, 20, 2, 2.0, 11);
        let cfg = TrainConfig {
            max_epochs: 40,
            batch_size: BatchSize::Rows(8),
            patience: 3,
        };
        let hp = HyperParams {
            learning_rate: 1e-2,
            weight_decay: 0.0,
        };
        let out = fit(&train, Some(&val), hp, &cfg, 40, &mut rng());
        let last = out.history.last().unwrap().epoch;
        assert!(last <= out.best_epoch + cfg.patience);
        let best_loss = out.history[out.best_epoch].validation_loss.unwrap();
        assert!(out.history.iter().all(|m| m.validation_loss.unwrap() >= best_loss));
    }

    #[test]
    fn non_finite_loss_is_flagged_not_fatal() {
        let (mut data, _) = random_xy(20, 3, 1, 0.1, 12);
        data.y[[3, 0]] = f64::INFINITY;
        let hp = HyperParams {
            learning_rate: 1e-2,
            weight_decay: 0.0,
        };
        let out = fit(&data, None, hp, &TrainConfig::default(), 5, &mut rng());
        assert!(out.diverged);
    }

    #[test]
    fn deterministic_given_rng_seed() {
        let (data, _) = random_xy(50, 4, 2, 0.5, 13);
        let hp = HyperParams {
            learning_rate: 3e-3,
            weight_decay: 1e-6,
        };
        let a = fit(&data, None, hp, &TrainConfig::default(), 5, &mut rng());
        let b = fit(&data, None, hp, &TrainConfig::default(), 5, &mut rng());
        assert_eq!(a.weights, b.weights);
    }
}

//! Mini-batch training with Adam, early stopping on validation MSE, and
//! evaluation against a last-value baseline.

use rand::seq::SliceRandom;

use super::{ForecastModel, Params};
use crate::data::{mae, mse, Split, WindowedDataset};
use crate::error::{Error, Result};
use crate::random;
use crate::tensor::{Exec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Windows of a batch are evaluated concurrently under `Parallel`.
    pub exec: Exec,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            batch: 32,
            patience: 3,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Averaged over the epoch's windows, each taken before its batch update.
    pub train_mse: f64,
    pub train_mae: f64,
    /// `NaN` when the validation split holds no window.
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<EpochStats>,
    /// Epoch whose weights were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Adam with the usual `β₁ = 0.9, β₂ = 0.999, ε = 1e-8`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &Params<Tensor>) -> Self {
        let zeros: Vec<Tensor> = params
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut Params<Tensor>, grads: &Params<Tensor>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let grads = grads.named();
        for (k, p) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[k].1.data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Repeats the last input row `m` times.
pub fn last_value_forecast(x: &Tensor, m: usize) -> Tensor {
    let n = x.shape()[0];
    let last = x.row(n - 1);
    let data = (0..m).flat_map(|_| last.iter().copied()).collect();
    Tensor::from_parts(vec![m, last.len()], data)
}

/// Mean error of `predict` over the windows of `split`; `None` if it has none.
fn evaluate_with(
    data: &WindowedDataset,
    split: Split,
    exec: Exec,
    predict: impl Fn(&Tensor) -> Result<Tensor> + Sync + Send,
) -> Result<Option<Metrics>> {
    let idx: Vec<usize> = (0..data.len(split)).collect();
    if idx.is_empty() {
        return Ok(None);
    }
    let per = exec.map(&idx, |&k| -> Result<(f64, f64)> {
        let (x, y) = data.window(split, k);
        let pred = predict(&x)?;
        Ok((mse(&pred, &y)?, mae(&pred, &y)?))
    });
    let (mut se, mut ae) = (0.0, 0.0);
    for r in per {
        let (a, b) = r?;
        se += a;
        ae += b;
    }
    let count = idx.len() as f64;
    Ok(Some(Metrics {
        mse: se / count,
        mae: ae / count,
    }))
}

/// Model error over `split`, in standardized units.
pub fn evaluate(
    model: &ForecastModel,
    data: &WindowedDataset,
    split: Split,
    exec: Exec,
) -> Result<Option<Metrics>> {
    let kind = model.config.attention();
    evaluate_with(data, split, exec, |x| {
        model.forward_with(x, kind, Exec::Sequential)
    })
}

/// Error of the last-value-repeat forecast over `split`.
pub fn evaluate_last_value(data: &WindowedDataset, split: Split) -> Result<Option<Metrics>> {
    let m = data.spec.m;
    evaluate_with(data, split, Exec::Sequential, |x| {
        Ok(last_value_forecast(x, m))
    })
}

fn diverged(epoch: usize, curve: &[EpochStats]) -> Error {
    let last = |f: fn(&EpochStats) -> f64| curve.iter().rev().map(f).find(|v| v.is_finite());
    Error::Diverged {
        epoch,
        last_train: last(|s| s.train_mse),
        last_val: last(|s| s.val_mse),
    }
}

pub fn train(
    model: &mut ForecastModel,
    data: &WindowedDataset,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    train_with_progress(model, data, opts, |_| {})
}

/// Trains in place. Batch gradients are summed in window order, so runs are
/// reproducible whatever the execution strategy. The weights of the best
/// validation epoch are restored at the end.
pub fn train_with_progress(
    model: &mut ForecastModel,
    data: &WindowedDataset,
    opts: &TrainOptions,
    mut progress: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    if data.is_empty(Split::Train) {
        return Err(Error::TooShort {
            length: data.data.shape()[0],
            msg: "no training windows".into(),
        });
    }
    if opts.batch == 0 || !opts.lr.is_finite() || opts.lr < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "bad training options {opts:?}"
        )));
    }
    let (m, d) = (data.spec.m, data.features());
    if model.config.n != data.spec.n || model.config.m != m || model.config.d_features != d {
        return Err(Error::InvalidArgument(format!(
            "model expects n = {}, m = {}, d = {}; data has n = {}, m = {m}, d = {d}",
            model.config.n, model.config.m, model.config.d_features, data.spec.n
        )));
    }

    let mut rng = random::rng(model.config.seed.wrapping_add(0x5eed));
    let mut adam = Adam::new(opts.lr, &model.params);
    let windows = data.len(Split::Train);
    let mut order: Vec<usize> = (0..windows).collect();
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, Params<Tensor>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut sq = vec![0.0; windows];
        let mut ab = vec![0.0; windows];
        for batch in order.chunks(opts.batch) {
            let current = &*model;
            let results = opts.exec.map(batch, |&k| {
                let (x, y) = data.window(Split::Train, k);
                let (loss, pred, grads) = current.loss_and_grads(&x, &y)?;
                Ok::<_, Error>((loss, mae(&pred, &y)?, grads))
            });
            let mut sum: Option<Params<Tensor>> = None;
            for (&k, r) in batch.iter().zip(results) {
                let (loss, abs, grads) = r?;
                if !loss.is_finite() {
                    return Err(diverged(epoch, &curve));
                }
                sq[k] = loss;
                ab[k] = abs;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        let g = grads.named();
                        for (j, t) in acc.tensors_mut().into_iter().enumerate() {
                            t.add_inplace(g[j].1)?;
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for t in grads.tensors_mut() {
                t.map_inplace(|v| v * scale);
            }
            adam.update(&mut model.params, &grads);
        }

        let val = evaluate(model, data, Split::Val, opts.exec)?;
        let stats = EpochStats {
            epoch,
            train_mse: sq.iter().sum::<f64>() / windows as f64,
            train_mae: ab.iter().sum::<f64>() / windows as f64,
            val_mse: val.map_or(f64::NAN, |v| v.mse),
            val_mae: val.map_or(f64::NAN, |v| v.mae),
        };
        progress(&stats);
        curve.push(stats);

        let monitor = val.map_or(stats.train_mse, |v| v.mse);
        if !monitor.is_finite() {
            return Err(diverged(epoch, &curve[..curve.len() - 1]));
        }
        if best.as_ref().is_none_or(|b| monitor < b.0) {
            best = Some((monitor, epoch, model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                stopped_early = epoch < opts.epochs;
                break;
            }
        }
    }

    let best_epoch = best.map(|(_, epoch, params)| {
        model.params = params;
        epoch
    });
    Ok(TrainReport {
        curve,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_series, Fractions, Series, SynthKind, WindowSpec};
    use crate::model::{Mechanism, ModelConfig};

    fn small_model(d: usize, n: usize, m: usize, seed: u64) -> ForecastModel {
        let mut cfg = ModelConfig::new(Mechanism::Lam, d, 4, 1, n, m, 2);
        cfg.seed = seed;
        ForecastModel::new(cfg).unwrap()
    }

    #[test]
    fn last_value_baseline_repeats() {
        let x = Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap();
        let f = last_value_forecast(&x, 3);
        assert_eq!(f.data(), &[3., 4., 3., 4., 3., 4.]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let model = small_model(1, 4, 2, 0);
        let mut params = model.params.clone();
        let grads = params.map(|t| t.map(|_| 2.0));
        let mut adam = Adam::new(0.1, &params);
        adam.update(&mut params, &grads);
        let before = model.params.named();
        for (k, (_, t)) in params.named().into_iter().enumerate() {
            let diff = before[k].1.zip_with(t, "adam", |a, b| a - b).unwrap();
            assert!(diff.data().iter().all(|&v| (v - 0.1).abs() < 1e-8));
        }
    }

    #[test]
    fn constant_series_is_learned_quickly() {
        let len = 2000;
        let values = Tensor::full(&[len, 1], 0.7);
        let series = Series::new(vec!["c".into()], values).unwrap();
        let ds = WindowedDataset::from_standardized(
            &series,
            WindowSpec::new(8, 2),
            Fractions::default(),
        )
        .unwrap();
        let mut model = small_model(1, 8, 2, 1);
        let opts = TrainOptions {
            epochs: 5,
            lr: 1e-2,
            ..TrainOptions::default()
        };
        let report = train(&mut model, &ds, &opts).unwrap();
        let first = report.curve[0].train_mse;
        let val = evaluate(&model, &ds, Split::Val, Exec::default())
            .unwrap()
            .unwrap();
        assert!(
            val.mse < 1e-3,
            "val mse {} (first epoch train {first})",
            val.mse
        );
    }

    #[test]
    fn zero_learning_rate_freezes_the_curve() {
        let s = synth_series(SynthKind::Sines, 300, 2, 2);
        let ds = WindowedDataset::standardize_split_window(
            &s,
            WindowSpec::new(10, 3),
            Fractions::default(),
        )
        .unwrap();
        let mut model = small_model(2, 10, 3, 4);
        let before = model.params.clone();
        let opts = TrainOptions {
            epochs: 3,
            lr: 0.0,
            patience: 10,
            ..TrainOptions::default()
        };
        let report = train(&mut model, &ds, &opts).unwrap();
        assert_eq!(report.curve.len(), 3);
        for s in &report.curve {
            assert_eq!(s.train_mse, report.curve[0].train_mse);
            assert_eq!(s.val_mse, report.curve[0].val_mse);
        }
        for (a, b) in before.named().iter().zip(model.params.named()) {
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn runs_are_reproducible_across_exec_modes() {
        let s = synth_series(SynthKind::TrendSeason, 300, 2, 3);
        let ds = WindowedDataset::standardize_split_window(
            &s,
            WindowSpec::new(10, 3),
            Fractions::default(),
        )
        .unwrap();
        let run = |exec| {
            let mut model = small_model(2, 10, 3, 5);
            let opts = TrainOptions {
                epochs: 2,
                exec,
                ..TrainOptions::default()
            };
            let report = train(&mut model, &ds, &opts).unwrap();
            (
                report,
                model
                    .params
                    .named()
                    .into_iter()
                    .map(|(_, t)| t.clone())
                    .collect::<Vec<_>>(),
            )
        };
        let a = run(Exec::Sequential);
        assert_eq!(a, run(Exec::Sequential));
        assert_eq!(a, run(Exec::Parallel));
    }

    #[test]
    fn zero_epochs_keep_initial_weights() {
        let s = synth_series(SynthKind::Sines, 200, 1, 2);
        let ds = WindowedDataset::standardize_split_window(
            &s,
            WindowSpec::new(8, 2),
            Fractions::default(),
        )
        .unwrap();
        let mut model = small_model(1, 8, 2, 6);
        let before = model.params.clone();
        let report = train(
            &mut model,
            &ds,
            &TrainOptions {
                epochs: 0,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert!(report.curve.is_empty() && report.best_epoch.is_none());
        assert_eq!(before.named().len(), model.params.named().len());
        for (a, b) in before.named().iter().zip(model.params.named()) {
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn mismatched_data_is_rejected() {
        let s = synth_series(SynthKind::Sines, 200, 2, 2);
        let ds = WindowedDataset::standardize_split_window(
            &s,
            WindowSpec::new(8, 2),
            Fractions::default(),
        )
        .unwrap();
        let mut model = small_model(1, 8, 2, 6);
        assert!(train(&mut model, &ds, &TrainOptions::default()).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let s = synth_series(SynthKind::Sines, 200, 1, 2);
        let ds = WindowedDataset::standardize_split_window(
            &s,
            WindowSpec::new(8, 2),
            Fractions::default(),
        )
        .unwrap();
        let mut model = small_model(1, 8, 2, 6);
        model.params.time.map_inplace(|_| 1e300);
        let err = train(
            &mut model,
            &ds,
            &TrainOptions {
                epochs: 2,
                ..TrainOptions::default()
            },
        );
        assert!(
            matches!(err, Err(Error::Diverged { epoch: 1, .. })),
            "{err:?}"
        );
    }
}

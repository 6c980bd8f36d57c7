//! Minibatch Adam training shared by every loss variant.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffengine::{Matrix, Tape, Var};
use crate::error::{CotError, Result};
use crate::rng::RngStream;

use super::{AdamConfig, CotConfig, LossTerms};

/// A model/data pair that can produce a loss for a batch of sample indices.
pub trait Trainable {
    /// Mutable parameters, in the order [`Trainable::loss`] returns their vars.
    fn parameters_mut(&mut self) -> Vec<&mut Matrix>;

    /// Number of indexable training samples (the batching axis).
    fn n_samples(&self) -> usize;

    /// Loss for the samples in `batch` plus the parameter vars on `tape`.
    fn loss<'t>(
        &self,
        tape: &'t Tape,
        batch: &[usize],
        rng: &mut RngStream,
    ) -> Result<(LossTerms<'t>, Vec<Var<'t>>)>;
}

/// `k` distinct indices below `n`, or all of `0..n` when `k >= n`.
pub(crate) fn subsample(rng: &mut RngStream, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut p = rng.permutation(n);
    p.truncate(k);
    p
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    pub fn update(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(CotError::Graph(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Matrix::zeros(g.dim())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            if p.dim() != g.dim() || m.dim() != g.dim() {
                return Err(CotError::Graph(
                    "parameter shape changed between steps".into(),
                ));
            }
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Minibatch averages of the loss components for one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub transport: f64,
    pub reg1: f64,
    pub reg2: f64,
}

/// Runs `cfg.epochs` epochs of Adam; each epoch visits every sample once in a
/// fresh random order. Shuffling and noise come from stream 1 of `cfg.seed`.
pub fn train<P: Trainable>(
    problem: &mut P,
    cfg: &CotConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let n = problem.n_samples();
    if n == 0 {
        return Err(CotError::InvalidParameter("empty training set".into()));
    }
    let batch = cfg.batch_size.unwrap_or(n).min(n);
    let mut rng = RngStream::with_stream(cfg.seed, 1);
    let mut adam = Adam::new(cfg.optimizer);
    let mut tape = Tape::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = rng.permutation(n);
        let mut acc = [0.0; 4];
        let mut steps = 0usize;
        for idx in order.chunks(batch) {
            tape.reset();
            let grads = {
                let (terms, vars) = problem.loss(&tape, idx, &mut rng)?;
                let values = terms.values();
                for (name, v) in ["loss", "transport", "reg1", "reg2"]
                    .iter()
                    .zip([values.0, values.1, values.2, values.3])
                {
                    if !v.is_finite() {
                        return Err(CotError::Diverged {
                            epoch,
                            term: name.to_string(),
                        });
                    }
                }
                acc[0] += values.0;
                acc[1] += values.1;
                acc[2] += values.2;
                acc[3] += values.3;
                let g = tape.backward(terms.total)?;
                vars.iter().map(|v| g.wrt_or_zeros(*v)).collect::<Vec<_>>()
            };
            if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(CotError::Diverged {
                    epoch,
                    term: "gradient".into(),
                });
            }
            adam.update(&mut problem.parameters_mut(), &grads)?;
            steps += 1;
        }
        let s = steps as f64;
        let rec = EpochRecord {
            epoch,
            loss: acc[0] / s,
            transport: acc[1] / s,
            reg1: acc[2] / s,
            reg2: acc[3] / s,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(history)
}

pub fn write_trace_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss", "transport_term", "reg1", "reg2"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.loss.to_string(),
            r.transport.to_string(),
            r.reg1.to_string(),
            r.reg2.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// loss = Σ (w - target)², no regularizers.
    struct Quadratic {
        w: Matrix,
        target: Matrix,
    }

    impl Trainable for Quadratic {
        fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
            vec![&mut self.w]
        }
        fn n_samples(&self) -> usize {
            4
        }
        fn loss<'t>(
            &self,
            tape: &'t Tape,
            _batch: &[usize],
            _rng: &mut RngStream,
        ) -> Result<(LossTerms<'t>, Vec<Var<'t>>)> {
            let w = tape.leaf(self.w.clone());
            let t = w.sub(tape.constant(self.target.clone()))?.square().sum();
            let zero = tape.scalar(0.0);
            Ok((LossTerms::combine(t, zero, None, 0.0, 0.0)?, vec![w]))
        }
    }

    fn quad() -> Quadratic {
        Quadratic {
            w: Matrix::zeros((2, 2)),
            target: ndarray::array![[1.0, -2.0], [0.5, 3.0]],
        }
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        let mut q = quad();
        let cfg = CotConfig {
            epochs: 400,
            batch_size: Some(4),
            optimizer: AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
            ..CotConfig::default()
        };
        let h = train(&mut q, &cfg, |_| {}).unwrap();
        assert_eq!(h.len(), 400);
        assert!(h.last().unwrap().loss < 1e-4);
        assert!((&q.w - &q.target).iter().all(|d| d.abs() < 1e-2));
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut w = ndarray::array![[1.0, -1.0]];
        let mut adam = Adam::new(AdamConfig::default());
        adam.update(&mut [&mut w], &[ndarray::array![[3.0, -0.2]]])
            .unwrap();
        assert!((w[[0, 0]] - (1.0 - 5e-3)).abs() < 1e-9);
        assert!((w[[0, 1]] - (-1.0 + 5e-3)).abs() < 1e-9);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let mut q = quad();
        let cfg = CotConfig {
            epochs: 0,
            ..CotConfig::default()
        };
        assert!(train(&mut q, &cfg, |_| {}).unwrap().is_empty());
        assert_eq!(q.w, Matrix::zeros((2, 2)));
    }

    #[test]
    fn minibatches_give_one_step_each() {
        let mut q = quad();
        let cfg = CotConfig {
            epochs: 3,
            batch_size: Some(3),
            ..CotConfig::default()
        };
        let mut seen = Vec::new();
        train(&mut q, &cfg, |r| seen.push(r.epoch)).unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
        // 4 samples in batches of 3: two Adam steps per epoch
        let mut q2 = quad();
        let mut adam = Adam::new(cfg.optimizer);
        for _ in 0..6 {
            let g = (&q2.w - &q2.target) * 2.0;
            adam.update(&mut [&mut q2.w], &[g]).unwrap();
        }
        assert!((&q.w - &q2.w).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn trace_csv_has_expected_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        let rec = EpochRecord {
            epoch: 0,
            loss: 1.5,
            transport: 0.5,
            reg1: 0.25,
            reg2: 0.75,
        };
        write_trace_csv(&p, &[rec]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "epoch,loss,transport_term,reg1,reg2\n0,1.5,0.5,0.25,0.75\n"
        );
    }
}

//! Optimisation and evaluation protocol: Adam with step decay, stratified
//! k-fold splits, grid search by mean validation accuracy.

mod cv;
mod model;

use std::fmt;

use crate::autodiff::ParamStore;
use crate::conv::ConvKind;
use crate::error::{Error, Result};
use crate::pool::PoolKind;

pub use cv::{cross_validate, kfold_split, mean_std, CvOptions, CvReport, FoldResult, Split, VALIDATION_FRACTION};
pub use model::{accuracy, train_model, Architecture, Batch, DataShape, Model, PreparedGraph, TrainOutcome};

pub const INITIAL_LR: f64 = 0.01;
pub const LR_DECAY: f64 = 0.5;
pub const LR_STEP: usize = 50;

/// `0.01 · 0.5^⌊epoch / 50⌋`.
pub fn lr_at_epoch(epoch: usize) -> f64 {
    INITIAL_LR * LR_DECAY.powi((epoch / LR_STEP) as i32)
}

/// Largest layer count allowed for each convolution.
pub fn max_layers(conv: ConvKind) -> usize {
    match conv {
        ConvKind::Tagcn => 5,
        ConvKind::Gcn | ConvKind::Sage => 15,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    pub conv: ConvKind,
    pub pool: PoolKind,
    pub num_conv_layers: usize,
    pub hidden_channels: usize,
    pub dropout: f64,
    /// Fraction of nodes kept (Top-k, SagPool), cluster ratio (DiffPool),
    /// or ratio of the mean graph size used for SortPool's `k`.
    pub pool_ratio: f64,
    /// Polynomial order `K`, TAGCN only.
    pub order: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Pool after every convolution instead of once after the last.
    pub hierarchical: bool,
    /// Kernel count of the SortPool 1-D convolution.
    pub sortpool_kernels: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            conv: ConvKind::Gcn,
            pool: PoolKind::None,
            num_conv_layers: 3,
            hidden_channels: 32,
            dropout: 0.0,
            pool_ratio: 0.25,
            order: 3,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            hierarchical: false,
            sortpool_kernels: 16,
        }
    }
}

impl HyperParams {
    pub fn new(conv: ConvKind, pool: PoolKind) -> Self {
        Self {
            conv,
            pool,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let max = max_layers(self.conv);
        if !(1..=max).contains(&self.num_conv_layers) {
            return Err(Error::Validation(format!(
                "{} supports 1..={max} layers, got {}",
                self.conv, self.num_conv_layers
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.pool_ratio > 0.0 && self.pool_ratio <= 1.0) {
            return Err(Error::Validation(format!(
                "pool ratio {} outside (0, 1]",
                self.pool_ratio
            )));
        }
        if self.hidden_channels == 0 || self.batch_size == 0 || self.sortpool_kernels == 0 {
            return Err(Error::Validation(
                "hidden channels, batch size and kernel count must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Compact comma-free description, e.g. `layers=3;hidden=32;dropout=0.5;ratio=0.25;K=3`.
    pub fn describe(&self) -> String {
        let mut s = format!(
            "layers={};hidden={};dropout={}",
            self.num_conv_layers, self.hidden_channels, self.dropout
        );
        if self.pool != PoolKind::None {
            s.push_str(&format!(";ratio={}", self.pool_ratio));
        }
        if self.conv == ConvKind::Tagcn {
            s.push_str(&format!(";K={}", self.order));
        }
        s
    }
}

impl fmt::Display for HyperParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} {}", self.conv, self.pool, self.describe())
    }
}

/// Which hyperparameter grid to search.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    Small,
    Full,
}

impl std::str::FromStr for GridKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(GridKind::Small),
            "full" | "paper" => Ok(GridKind::Full),
            other => Err(Error::Argument(format!(
                "unknown grid {other:?} (expected small or full)"
            ))),
        }
    }
}

/// Grid axes: layers, channels, dropouts, ratios, TAGCN orders.
type Axes = (Vec<usize>, Vec<usize>, Vec<f64>, Vec<f64>, Vec<usize>);

/// Cartesian product of the grid axes over `base`.
pub fn build_grid(kind: GridKind, base: &HyperParams) -> Vec<HyperParams> {
    let (layers, channels, dropouts, ratios, orders): Axes = match kind {
        GridKind::Small => {
            let mut layers = vec![2, 3, 5];
            if base.conv != ConvKind::Tagcn {
                layers.push(10);
            }
            (layers, vec![32, 64], vec![0.0, 0.5], vec![0.25, 0.5], vec![base.order])
        }
        GridKind::Full => (
            (1..=max_layers(base.conv)).collect(),
            vec![16, 32, 64, 128],
            vec![0.0, 0.25, 0.5],
            vec![0.1, 0.25, 0.5, 0.75],
            if base.conv == ConvKind::Tagcn {
                vec![1, 2, 3]
            } else {
                vec![base.order]
            },
        ),
    };
    let ratios = if base.pool == PoolKind::None {
        vec![base.pool_ratio]
    } else {
        ratios
    };
    let mut grid = Vec::new();
    for &l in &layers {
        for &c in &channels {
            for &d in &dropouts {
                for &r in &ratios {
                    for &k in &orders {
                        grid.push(HyperParams {
                            num_conv_layers: l,
                            hidden_channels: c,
                            dropout: d,
                            pool_ratio: r,
                            order: k,
                            ..base.clone()
                        });
                    }
                }
            }
        }
    }
    grid
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let shapes: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    pub fn first_moment(&self, param: usize) -> &[f64] {
        &self.m[param]
    }

    pub fn second_moment(&self, param: usize) -> &[f64] {
        &self.v[param]
    }

    /// One update from the gradients stored on the parameters. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((param, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = param.grad().map(<[f64]>::to_vec);
            let values = param.values_mut();
            for i in 0..values.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                values[i] -= step;
            }
        }
    }
}

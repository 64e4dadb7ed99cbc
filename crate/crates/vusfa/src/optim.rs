//! Shared RMSProp state and the lock discipline for asynchronous updates.
//!
//! The global network is a list of parameter blocks, each fused with its
//! squared-gradient running average behind one mutex. Workers interact with
//! it through exactly two operations: `snapshot` (copy current values) and
//! `apply` (RMSProp update from a gradient set). In the default mode those
//! are atomic per block, so updates from different workers may interleave
//! between blocks; strict mode serializes whole snapshots and whole updates
//! for bitwise-reproducible runs.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::tensor::{GradSet, ParamSet, Tensor};

/// RMSProp hyperparameters. s ← ρ·s + (1−ρ)·g²; θ ← θ − lr·g/√(s+ε).
#[derive(Debug, Clone, Copy)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 7e-4,
            decay: 0.99,
            eps: 1e-10,
        }
    }
}

struct Block {
    value: Tensor,
    sq: Tensor,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ApplyOutcome {
    pub applied_blocks: usize,
    /// Blocks skipped because their gradient contained NaN or ±inf.
    pub rejected_blocks: usize,
}

/// Globally shared parameters plus optimizer statistics.
pub struct SharedNet {
    names: Vec<String>,
    blocks: Vec<Mutex<Block>>,
    cfg: RmsPropConfig,
    strict: Option<Mutex<()>>,
    nan_rejects: AtomicU64,
}

impl SharedNet {
    pub fn new(params: ParamSet, cfg: RmsPropConfig, strict: bool) -> Self {
        let sq: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self::with_stats(params, sq, cfg, strict)
    }

    /// Rebuild from checkpointed values and optimizer statistics.
    pub fn with_stats(params: ParamSet, sq: Vec<Tensor>, cfg: RmsPropConfig, strict: bool) -> Self {
        assert_eq!(params.len(), sq.len(), "optimizer stats must align");
        let names = params.names().map(str::to_string).collect();
        let blocks = params
            .iter()
            .zip(sq)
            .map(|((_, t), s)| {
                debug_assert_eq!(t.shape(), s.shape());
                Mutex::new(Block {
                    value: (**t).clone(),
                    sq: s,
                })
            })
            .collect();
        Self {
            names,
            blocks,
            cfg,
            strict: strict.then(|| Mutex::new(())),
            nan_rejects: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> RmsPropConfig {
        self.cfg
    }

    /// Copy the current parameter values into a worker-local set.
    pub fn snapshot(&self) -> ParamSet {
        let _guard = self.strict.as_ref().map(|m| m.lock().unwrap());
        let mut out = ParamSet::new();
        for (name, block) in self.names.iter().zip(&self.blocks) {
            let value = block.lock().unwrap().value.clone();
            out.insert(name, value).expect("unique names");
        }
        out
    }

    /// RMSProp update from a gradient set aligned with this net's layout.
    ///
    /// Blocks whose gradient is not finite are left untouched and counted.
    pub fn apply(&self, grads: &GradSet) -> ApplyOutcome {
        assert_eq!(grads.len(), self.blocks.len(), "gradient layout mismatch");
        let _guard = self.strict.as_ref().map(|m| m.lock().unwrap());
        let mut outcome = ApplyOutcome::default();
        for (block, grad) in self.blocks.iter().zip(grads.iter()) {
            if !grad.all_finite() {
                outcome.rejected_blocks += 1;
                self.nan_rejects.fetch_add(1, Ordering::Relaxed);
                continue;
            }
            let mut b = block.lock().unwrap();
            let decay = self.cfg.decay;
            let lr = self.cfg.lr;
            let eps = self.cfg.eps;
            let Block { value, sq } = &mut *b;
            for ((v, s), &g) in value
                .data_mut()
                .iter_mut()
                .zip(sq.data_mut().iter_mut())
                .zip(grad.data().iter())
            {
                *s = decay * *s + (1.0 - decay) * g * g;
                *v -= lr * g / (*s + eps).sqrt();
            }
            outcome.applied_blocks += 1;
        }
        outcome
    }

    pub fn rejected_updates(&self) -> u64 {
        self.nan_rejects.load(Ordering::Relaxed)
    }

    /// Current parameters and optimizer statistics, for checkpointing.
    pub fn export(&self) -> (ParamSet, Vec<Tensor>) {
        let _guard = self.strict.as_ref().map(|m| m.lock().unwrap());
        let mut params = ParamSet::new();
        let mut sq = Vec::with_capacity(self.blocks.len());
        for (name, block) in self.names.iter().zip(&self.blocks) {
            let b = block.lock().unwrap();
            params.insert(name, b.value.clone()).expect("unique names");
            sq.push(b.sq.clone());
        }
        (params, sq)
    }
}

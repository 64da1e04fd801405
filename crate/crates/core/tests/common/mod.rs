//! Shared helpers for the integration tests: a central-difference gradient
//! oracle and small corpus builders.

#![allow(dead_code)]

use mtut_core::graph::{Graph, Var};
use mtut_core::{generate_corpus, Corpus, DataConfig, ParamStore, Tensor};

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-4;
/// Smallest denominator of the relative error, so gradients that are zero
/// up to rounding are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-3;

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink (ReLU, max, min).
    pub skipped: usize,
    pub worst_rel: f64,
    pub worst_at: String,
}

impl FdReport {
    pub fn passes(&self) -> bool {
        self.checked > 0 && self.worst_rel < FD_REL_TOL
    }

    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.worst_rel > self.worst_rel {
            self.worst_rel = other.worst_rel;
            self.worst_at = other.worst_at;
        }
    }
}

fn eval(store: &ParamStore, f: &impl Fn(&mut Graph) -> Var) -> (f64, u64) {
    let mut g = Graph::new(store);
    let out = f(&mut g);
    (g.scalar(out), g.branch_signature())
}

/// Compares the tape's gradient of the scalar built by `f` against central
/// differences, for every tensor in `store` whose name starts with one of
/// `prefixes` (all tensors when empty). At most `per_tensor` coordinates of
/// each tensor are probed, spread evenly.
pub fn fd_check(store: &ParamStore, prefixes: &[&str], per_tensor: usize, f: impl Fn(&mut Graph) -> Var) -> FdReport {
    let (analytic, base_sig) = {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        let grads = g.backward(out);
        (g.param_grads(&grads), g.branch_signature())
    };
    let mut report = FdReport::default();
    let names: Vec<String> = store
        .names()
        .filter(|n| prefixes.is_empty() || prefixes.iter().any(|p| n.starts_with(p)))
        .cloned()
        .collect();
    for name in names {
        let len = store.get(&name).unwrap().numel();
        let stride = len.div_ceil(per_tensor.max(1)).max(1);
        for i in (0..len).step_by(stride) {
            let mut probe = store.clone();
            let x0 = probe.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = x0 + FD_STEP;
            let (fp, sp) = eval(&probe, &f);
            probe.get_mut(&name).unwrap().data_mut()[i] = x0 - FD_STEP;
            let (fm, sm) = eval(&probe, &f);
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let an = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(FD_FLOOR);
            report.checked += 1;
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_at = format!("{name}[{i}] analytic {an:.6e} fd {fd:.6e}");
            }
        }
    }
    report
}

/// Uniform values in `[-scale, scale]` from a fixed stream.
pub fn random_tensor(seed: u64, shape: &[usize], scale: f64) -> Tensor {
    use rand::Rng;
    let mut r = mtut_core::rng::stream(seed, "test-tensor", &[]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect())
}

pub fn tiny_corpus(seed: u64, identities: usize, per_identity: usize) -> Corpus {
    let data = DataConfig { identities, per_identity, ..DataConfig::default() };
    generate_corpus(seed, &data).unwrap()
}

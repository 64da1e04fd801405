//! Batch normalization layers for the encoders.
//!
//! While training, a layer normalizes with the statistics of the batch at
//! hand and logs them; the trainer folds the log into running averages
//! (`<prefix>.running_mean`, `<prefix>.running_var`) after each step. In an
//! inference graph the running averages are used instead, so a sample's
//! embedding does not depend on the rest of its batch.

use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Weight of the newest batch in the running averages.
pub const MOMENTUM: f64 = 0.1;
const EPS: f64 = 1e-5;

/// Batch statistics one layer saw during a training forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub prefix: String,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

pub fn init_norm(store: &mut ParamStore, prefix: &str, channels: usize) {
    store.init_const(&format!("{prefix}.gamma"), &[channels], 1.0);
    store.init_const(&format!("{prefix}.beta"), &[channels], 0.0);
    store.init_const(&format!("{prefix}.running_mean"), &[channels], 0.0);
    store.init_const(&format!("{prefix}.running_var"), &[channels], 1.0);
}

/// Whether `name` is a running statistic rather than a trained parameter.
pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Normalization layer over the channels of `[N, C, H, W]` or `[R, C]`.
pub fn norm_layer(g: &mut Graph, prefix: &str, x: Var) -> Var {
    if g.training() {
        let gamma = g.param(&format!("{prefix}.gamma"));
        let beta = g.param(&format!("{prefix}.beta"));
        let y = g.batch_norm(x, gamma, beta);
        g.tag(prefix, y);
        y
    } else {
        let p = g.params();
        let get = |s: &str| p.get(&format!("{prefix}.{s}")).unwrap_or_else(|| panic!("missing {prefix}.{s}")).data();
        let (gamma, beta, mean, var) = (get("gamma"), get("beta"), get("running_mean"), get("running_var"));
        let scale: Vec<f64> = gamma.iter().zip(var).map(|(g, v)| g / (v + EPS).sqrt()).collect();
        let shift: Vec<f64> = beta.iter().zip(mean).zip(&scale).map(|((b, m), s)| b - m * s).collect();
        g.channel_affine(x, &scale, &shift)
    }
}

/// Statistics of every normalization layer in a training graph.
pub fn collect_stats(g: &Graph) -> Vec<NormStats> {
    g.tagged()
        .iter()
        .filter_map(|(prefix, v)| {
            let (mean, var, count) = g.batch_stats(*v)?;
            let correction = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            Some(NormStats {
                prefix: prefix.clone(),
                mean: mean.to_vec(),
                var: var.iter().map(|v| v * correction).collect(),
            })
        })
        .collect()
}

/// Folds one step's batch statistics into the running averages.
pub fn update_running(params: &mut ParamStore, stats: &[NormStats]) {
    for s in stats {
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let name = format!("{}.{suffix}", s.prefix);
            let t = params.get_mut(&name).unwrap_or_else(|| panic!("missing {name}"));
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - MOMENTUM) * *r + MOMENTUM * b;
            }
        }
    }
}

#![allow(dead_code)]

use mtts_core::config::Config;
use mtts_core::tensor::{ParamSet, Tensor};

/// Four speakers (one unseen), short utterances, a 16-step schedule.
pub fn small_config() -> Config {
    let mut cfg = Config::default();
    cfg.corpus.n_speakers = 4;
    cfg.corpus.utterances_per_speaker = 10;
    cfg.corpus.unseen_speakers = vec![3];
    cfg.corpus.phonemes = [3, 6];
    cfg.corpus.durations = [2, 4];
    cfg.train.batch_size = 4;
    cfg.train.pretrain_steps = 8;
    cfg.train.adversarial_steps = 8;
    cfg.train.checkpoint_interval = 5;
    cfg.train.optimizer.warmup_steps = 4;
    cfg
}

pub fn values(set: &ParamSet) -> Vec<(String, Vec<f64>)> {
    set.iter().map(|p| (p.name.clone(), p.value.data().to_vec())).collect()
}

/// Bitwise equality of every weight.
pub fn same_bits(a: &ParamSet, b: &ParamSet) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|(p, q)| {
            p.name == q.name
                && p.value.shape() == q.value.shape()
                && p.value.data().iter().zip(q.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

pub fn max_abs_diff(a: &ParamSet, b: &ParamSet) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|(p, q)| p.value.data().iter().zip(q.value.data()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Columns `[start, start + len)` of a `[c, n]` tensor.
pub fn columns(t: &Tensor, start: usize, len: usize) -> Tensor {
    let (c, n) = t.dims2().unwrap();
    let mut out = Vec::with_capacity(c * len);
    for r in 0..c {
        out.extend_from_slice(&t.data()[r * n + start..r * n + start + len]);
    }
    Tensor::new(vec![c, len], out).unwrap()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

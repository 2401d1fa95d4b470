//! Frozen speaker encoder and embedding interpolation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ParamId, ParamSet, Result, Tensor, TensorError};
use crate::N_MELS;

pub const NAMESPACE: &str = "encoder";

/// Exclusive upper bound of the interpolation coefficient.
pub const ALPHA_MAX: f64 = 0.5;

/// Unit-norm speaker vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding(pub Vec<f64>);

impl SpeakerEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a) * norm(b)).max(1e-300)
}

/// Mean/std pooling over frames, a fixed random projection, then L2
/// normalization. Weights are frozen at construction and never enter a tape.
#[derive(Clone, Debug)]
pub struct SpeakerEncoder {
    pub params: ParamSet,
    weight: ParamId,
    d_z: usize,
}

impl SpeakerEncoder {
    pub fn new(d_z: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stats = 2 * N_MELS;
        let bound = (3.0 / stats as f64).sqrt();
        let mut w = Tensor::zeros(&[d_z, stats]);
        for v in w.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        let mut params = ParamSet::new(NAMESPACE);
        let weight = params.add("proj.weight", w);
        params.freeze_all();
        Self { params, weight, d_z }
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    /// `mel` is `[T, 80]`, frames as rows.
    pub fn embed(&self, mel: &Tensor) -> Result<SpeakerEmbedding> {
        let (t, f) = mel.dims2()?;
        if t == 0 || f != N_MELS {
            return Err(TensorError::InvalidShape {
                op: "embed",
                detail: format!("expected [T >= 1, {N_MELS}] mel, got {:?}", mel.shape()),
            });
        }
        let d = mel.data();
        let mut stats = vec![0.0; 2 * N_MELS];
        for bin in 0..N_MELS {
            let mean = (0..t).map(|r| d[r * f + bin]).sum::<f64>() / t as f64;
            let var = (0..t).map(|r| (d[r * f + bin] - mean).powi(2)).sum::<f64>() / t as f64;
            stats[bin] = mean;
            stats[N_MELS + bin] = var.sqrt();
        }
        let w = self.params.get(self.weight).value.data();
        let mut z: Vec<f64> = w
            .chunks(2 * N_MELS)
            .map(|row| row.iter().zip(&stats).map(|(a, b)| a * b).sum())
            .collect();
        let n = norm(&z);
        if !(n.is_finite() && n > 0.0) {
            return Err(TensorError::InvalidShape {
                op: "embed",
                detail: "pooled statistics project to a zero vector".into(),
            });
        }
        z.iter_mut().for_each(|v| *v /= n);
        Ok(SpeakerEmbedding(z))
    }
}

/// `m` is paired with `M - 1 - m` (0-based).
pub fn pair_index(m: usize, batch: usize) -> usize {
    batch - 1 - m
}

/// `M` draws from the open interval `(0, 0.5)`.
pub fn sample_alpha(m: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..m)
        .map(|_| loop {
            let a: f64 = rng.random_range(0.0..ALPHA_MAX);
            if a > 0.0 {
                break a;
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationBatch {
    pub alphas: Vec<f64>,
    pub tilde_z: Vec<Vec<f64>>,
}

/// `z~_m = a_m z_m + (1 - a_m) z_pair(m)`, not re-normalized.
pub fn interpolate(z: &[Vec<f64>], alphas: &[f64]) -> Result<InterpolationBatch> {
    let m = z.len();
    if m % 2 != 0 {
        return Err(TensorError::InvalidShape {
            op: "interpolate",
            detail: format!("batch of {m} is odd; use an even batch size so every item has a partner"),
        });
    }
    if alphas.len() != m {
        return Err(TensorError::InvalidShape {
            op: "interpolate",
            detail: format!("{} alphas for {m} embeddings", alphas.len()),
        });
    }
    let tilde_z = (0..m)
        .map(|i| {
            let (a, p) = (alphas[i], &z[pair_index(i, m)]);
            z[i].iter().zip(p).map(|(x, y)| a * x + (1.0 - a) * y).collect()
        })
        .collect();
    Ok(InterpolationBatch {
        alphas: alphas.to_vec(),
        tilde_z,
    })
}

/// Column-stacks embeddings into `[d_z, M]`.
pub fn stack_columns(z: &[Vec<f64>]) -> Tensor {
    let d = z.first().map_or(0, Vec::len);
    let m = z.len();
    let mut data = vec![0.0; d * m];
    for (j, col) in z.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            data[i * m + j] = v;
        }
    }
    Tensor::new(vec![d, m], data).expect("consistent embedding dimension")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mel(t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * N_MELS).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![t, N_MELS], data).unwrap()
    }

    #[test]
    fn unit_norm_and_frame_order_invariant() {
        let enc = SpeakerEncoder::new(32, 1);
        let m = mel(7, 3);
        let z = enc.embed(&m).unwrap();
        assert!((z.norm() - 1.0).abs() < 1e-12);
        let mut rows: Vec<&[f64]> = m.data().chunks(N_MELS).collect();
        rows.reverse();
        rows.swap(1, 4);
        let permuted = Tensor::new(vec![7, N_MELS], rows.concat()).unwrap();
        let zp = enc.embed(&permuted).unwrap();
        for (a, b) in z.0.iter().zip(&zp.0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_empty_mel() {
        let enc = SpeakerEncoder::new(8, 1);
        assert!(enc.embed(&Tensor::zeros(&[0, N_MELS])).is_err());
    }

    #[test]
    fn alpha_support_determinism_and_mean() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let xs = sample_alpha(100_000, &mut a);
        assert_eq!(xs, sample_alpha(100_000, &mut b));
        assert!(xs.iter().all(|&x| x > 0.0 && x < ALPHA_MAX));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((mean - 0.25).abs() < 0.005, "{mean}");
    }

    #[test]
    fn interpolation_formula() {
        let z = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let out = interpolate(&z, &[0.3, 0.4]).unwrap();
        assert_eq!(out.tilde_z[0], vec![0.3, 0.7]);
        assert!((out.tilde_z[1][0] - 0.6).abs() < 1e-15);
        assert!((out.tilde_z[1][1] - 0.4).abs() < 1e-15);

        let mid = interpolate(&z, &[0.5, 0.5]).unwrap();
        assert_eq!(mid.tilde_z[0], mid.tilde_z[1]);

        let lim = interpolate(&z, &[1e-12, 1e-12]).unwrap();
        assert!((lim.tilde_z[0][1] - 1.0).abs() < 1e-11);
    }

    #[test]
    fn odd_batch_rejected_with_guidance() {
        let err = interpolate(&vec![vec![1.0]; 3], &[0.1; 3]).unwrap_err();
        assert!(err.to_string().contains("even batch size"));
    }

    #[test]
    fn pairing_is_an_involution_and_convex() {
        let enc = SpeakerEncoder::new(16, 2);
        let z: Vec<Vec<f64>> = (0..6).map(|i| enc.embed(&mel(5, i)).unwrap().0).collect();
        for m in 0..6 {
            assert_eq!(pair_index(pair_index(m, 6), 6), m);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = interpolate(&z, &sample_alpha(6, &mut rng)).unwrap();
        for (m, zt) in out.tilde_z.iter().enumerate() {
            let bound = norm(&z[m]).max(norm(&z[pair_index(m, 6)]));
            assert!(norm(zt) <= bound + 1e-12);
        }
    }

    #[test]
    fn stacking_puts_each_embedding_in_a_column() {
        let t = stack_columns(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.data(), &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
    }
}

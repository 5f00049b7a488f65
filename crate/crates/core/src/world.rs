//! Synthetic audio-visual world with a known conditional distribution.
//!
//! Latent frame `j` (visual frame `i = j / f`, phase `j % f`) has mean
//! `G = tanh(A [v_{i-1}; v_i; v_{i+1}] + B c_s + phase_{j % f} + b)` and
//! Gaussian spread `noise_std` around it. `[A | B]` is rescaled to unit
//! spectral norm so `G` is 1-Lipschitz in (window, speaker).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::SemanticTarget;
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

const GP_LENGTH_SCALE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub visual_dim: usize,
    pub latent_dim: usize,
    pub speaker_dim: usize,
    pub upsample_factor: usize,
    pub t_v_min: usize,
    pub t_v_max: usize,
    pub noise_std: f64,
    pub n_speakers: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            visual_dim: 32,
            latent_dim: 16,
            speaker_dim: 8,
            upsample_factor: 2,
            t_v_min: 8,
            t_v_max: 12,
            noise_std: 0.1,
            n_speakers: 4,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("visual_dim", self.visual_dim),
            ("latent_dim", self.latent_dim),
            ("speaker_dim", self.speaker_dim),
            ("upsample_factor", self.upsample_factor),
            ("t_v_min", self.t_v_min),
            ("n_speakers", self.n_speakers),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("world.{name} must be at least 1")));
            }
        }
        if self.t_v_max < self.t_v_min {
            return Err(Error::Config("world.t_v_max must be >= world.t_v_min".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config("world.noise_std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[T_v, D_v]`
    pub visual: Tensor,
    /// `[D_s]`
    pub speaker: Tensor,
    /// `[T_v * f, D_a]`
    pub target: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub cfg: WorldConfig,
    /// `[D_a, 3 D_v + D_s]`
    map: Tensor,
    bias: Tensor,
    /// `[f, D_a]`
    phase: Tensor,
    speakers: Vec<Tensor>,
    gp_kernel: Vec<f64>,
}

fn spectral_norm(m: &Tensor) -> f64 {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let a = m.data();
    let mut v = vec![1.0 / (c as f64).sqrt(); c];
    let mut sigma = 0.0;
    for _ in 0..500 {
        let u: Vec<f64> = (0..r).map(|i| (0..c).map(|j| a[i * c + j] * v[j]).sum()).collect();
        let w: Vec<f64> = (0..c).map(|j| (0..r).map(|i| a[i * c + j] * u[i]).sum()).collect();
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        let next = n.sqrt();
        v = w.into_iter().map(|x| x / n).collect();
        if (next - sigma).abs() <= 1e-14 * next {
            return next;
        }
        sigma = next;
    }
    sigma
}

impl World {
    pub fn new(cfg: &WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.seed, "world");
        let cols = 3 * cfg.visual_dim + cfg.speaker_dim;
        let mut map = Tensor::randn(&[cfg.latent_dim, cols], 1.0, &mut r);
        let s = spectral_norm(&map);
        // 1% headroom for the power-iteration estimate
        map = map.scale(1.0 / (s * 1.01));
        let bias = Tensor::randn(&[cfg.latent_dim], 0.1, &mut r);
        let phase = Tensor::randn(&[cfg.upsample_factor, cfg.latent_dim], 0.3, &mut r);
        let speakers = (0..cfg.n_speakers)
            .map(|_| {
                let v = Tensor::randn(&[cfg.speaker_dim], 1.0, &mut r);
                let n = v.norm();
                v.scale(1.0 / n)
            })
            .collect();
        let radius = (3.0 * GP_LENGTH_SCALE).ceil() as i64;
        let raw: Vec<f64> = (-radius..=radius)
            .map(|d| (-((d * d) as f64) / (GP_LENGTH_SCALE * GP_LENGTH_SCALE)).exp())
            .collect();
        let norm = raw.iter().map(|w| w * w).sum::<f64>().sqrt();
        Ok(Self {
            cfg: cfg.clone(),
            map,
            bias,
            phase,
            speakers,
            gp_kernel: raw.into_iter().map(|w| w / norm).collect(),
        })
    }

    pub fn speakers(&self) -> &[Tensor] {
        &self.speakers
    }

    /// Fixed semantic map for this world, `dim` features per frame.
    pub fn semantic_target(&self, dim: usize) -> SemanticTarget {
        let mut r = rng::stream(self.cfg.seed, "semantic");
        SemanticTarget::random(self.cfg.latent_dim, dim, true, &mut r)
    }

    /// Ground-truth mean for a single latent frame given the flattened
    /// `[v_{i-1}; v_i; v_{i+1}; c_s]` input and phase.
    pub fn frame_mean(&self, input: &[f64], phase: usize) -> Result<Tensor> {
        let cols = self.map.shape()[1];
        if input.len() != cols || phase >= self.cfg.upsample_factor {
            return crate::error::shape_err("world frame", &[input.len(), phase], &[cols, self.cfg.upsample_factor]);
        }
        let d_a = self.cfg.latent_dim;
        let a = self.map.data();
        let p = &self.phase.data()[phase * d_a..(phase + 1) * d_a];
        let out = (0..d_a)
            .map(|k| {
                let z: f64 = a[k * cols..(k + 1) * cols].iter().zip(input).map(|(w, x)| w * x).sum();
                (z + self.bias.data()[k] + p[k]).tanh()
            })
            .collect();
        Ok(Tensor::from_vec(out))
    }

    /// Conditional mean `G(visual, speaker)`, `[T_v * f, D_a]`. Edge frames
    /// reuse the nearest visual frame as the missing neighbour.
    pub fn mean(&self, visual: &Tensor, speaker: &Tensor) -> Result<Tensor> {
        let (t_v, d_v) = (visual.shape()[0], visual.shape()[1]);
        if d_v != self.cfg.visual_dim || speaker.len() != self.cfg.speaker_dim {
            return crate::error::shape_err(
                "world mean",
                &[d_v, speaker.len()],
                &[self.cfg.visual_dim, self.cfg.speaker_dim],
            );
        }
        let f = self.cfg.upsample_factor;
        let row = |i: usize| &visual.data()[i * d_v..(i + 1) * d_v];
        let mut out = Vec::with_capacity(t_v * f * self.cfg.latent_dim);
        let mut input = Vec::with_capacity(self.map.shape()[1]);
        for i in 0..t_v {
            input.clear();
            input.extend_from_slice(row(i.saturating_sub(1)));
            input.extend_from_slice(row(i));
            input.extend_from_slice(row((i + 1).min(t_v - 1)));
            input.extend_from_slice(speaker.data());
            for ph in 0..f {
                out.extend(self.frame_mean(&input, ph)?.into_data());
            }
        }
        Tensor::new(&[t_v * f, self.cfg.latent_dim], out)
    }

    /// Smooth unit-variance Gaussian-process visual features, `[T_v, D_v]`.
    pub fn draw_visual(&self, rng: &mut StreamRng, t_v: usize) -> Tensor {
        let k = &self.gp_kernel;
        let r = k.len() / 2;
        let d = self.cfg.visual_dim;
        let noise = Tensor::randn(&[t_v + 2 * r, d], 1.0, rng);
        let mut out = vec![0.0; t_v * d];
        for i in 0..t_v {
            for (o, w) in k.iter().enumerate() {
                let src = &noise.data()[(i + o) * d..(i + o + 1) * d];
                for (acc, x) in out[i * d..(i + 1) * d].iter_mut().zip(src) {
                    *acc += w * x;
                }
            }
        }
        Tensor::new(&[t_v, d], out).expect("sized by construction")
    }

    /// `mean + noise_std * N(0, I)`.
    pub fn draw_target(&self, mean: &Tensor, rng: &mut StreamRng) -> Tensor {
        let s = self.cfg.noise_std;
        if s == 0.0 {
            return mean.clone();
        }
        let mut out = mean.clone();
        for m in out.data_mut() {
            *m += s * rng.sample::<f64, _>(StandardNormal);
        }
        out
    }

    pub fn draw_t_v(&self, rng: &mut StreamRng) -> usize {
        rng.random_range(self.cfg.t_v_min..=self.cfg.t_v_max)
    }

    pub fn draw_sample(&self, rng: &mut StreamRng, t_v: usize) -> Result<Sample> {
        if t_v < self.cfg.t_v_min || t_v > self.cfg.t_v_max {
            return Err(Error::Contract(format!(
                "T_v = {t_v} outside the configured range [{}, {}]",
                self.cfg.t_v_min, self.cfg.t_v_max
            )));
        }
        self.draw_sample_any_length(rng, t_v)
    }

    /// [`Self::draw_sample`] without the configured length range.
    pub fn draw_sample_any_length(&self, rng: &mut StreamRng, t_v: usize) -> Result<Sample> {
        let spk = rng.random_range(0..self.speakers.len());
        let visual = self.draw_visual(rng, t_v);
        let speaker = self.speakers[spk].clone();
        let mean = self.mean(&visual, &speaker)?;
        let target = self.draw_target(&mean, rng);
        Ok(Sample {
            visual,
            speaker,
            target,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_conditions: usize,
    pub n_draws: usize,
    pub t_v: usize,
    pub n_permutations: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_conditions: 8,
            n_draws: 16,
            t_v: 10,
            n_permutations: 200,
            seed: 1234,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n_conditions: usize,
    pub n_draws: usize,
    /// `|mean(gen) - G| / |G|`, pooled over all conditions.
    pub rel_mean_error: f64,
    /// Per-frame `|mean(gen)_j - G_j|`, averaged over frames and conditions.
    pub mean_frame_error: f64,
    /// Root-mean empirical per-element std of generations.
    pub gen_std: f64,
    pub noise_std: f64,
    /// `gen_std / noise_std`; absent for a deterministic world.
    pub std_ratio: Option<f64>,
    /// Unbiased RBF MMD^2 summed over conditions.
    pub mmd2: f64,
    pub mmd_p_value: f64,
    pub n_permutations: usize,
}

/// Unbiased MMD^2 between the first `n` and remaining rows of `k` (an
/// `(n + m)^2` Gram matrix) under the row assignment `idx`.
fn mmd2_unbiased(k: &[f64], size: usize, idx: &[usize], n: usize) -> f64 {
    let m = size - n;
    let (a, b) = idx.split_at(n);
    let mut xx = 0.0;
    for (p, &i) in a.iter().enumerate() {
        for &j in &a[p + 1..] {
            xx += k[i * size + j];
        }
    }
    let mut yy = 0.0;
    for (p, &i) in b.iter().enumerate() {
        for &j in &b[p + 1..] {
            yy += k[i * size + j];
        }
    }
    let mut xy = 0.0;
    for &i in a {
        for &j in b {
            xy += k[i * size + j];
        }
    }
    2.0 * xx / (n * (n - 1)) as f64 + 2.0 * yy / (m * (m - 1)) as f64 - 2.0 * xy / (n * m) as f64
}

/// RBF Gram matrix with the median pairwise squared distance as bandwidth.
fn rbf_gram(samples: &[&Tensor]) -> Vec<f64> {
    let n = samples.len();
    let mut d2 = vec![0.0; n * n];
    let mut off = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d = samples[i].sub(samples[j]).expect("same shape").sq_norm();
            d2[i * n + j] = d;
            d2[j * n + i] = d;
            off.push(d);
        }
    }
    off.sort_by(f64::total_cmp);
    let med = off.get(off.len() / 2).copied().unwrap_or(1.0);
    let bw = if med > 0.0 { med } else { 1.0 };
    d2.iter().map(|d| (-d / bw).exp()).collect()
}

/// Evaluate a conditional generator against the world's ground truth.
///
/// For each of `n_conditions` held-out (visual, speaker) pairs the generator
/// is called `n_draws` times with fresh `x0 ~ N(0, I)`. The MMD test pools
/// per-condition statistics and permutes labels within each condition.
pub fn eval_generation<G>(world: &World, cfg: &EvalConfig, mut generate: G) -> Result<EvalMetrics>
where
    G: FnMut(&Tensor, &Tensor, &Tensor) -> Result<Tensor>,
{
    if cfg.n_conditions == 0 || cfg.n_draws < 2 {
        return Err(Error::Config("eval needs n_conditions >= 1 and n_draws >= 2".into()));
    }
    let mut cond_rng = rng::stream(cfg.seed, "eval.conditions");
    let mut x0_rng = rng::stream(cfg.seed, "eval.noise");
    let mut truth_rng = rng::stream(cfg.seed, "eval.truth");
    let mut perm_rng = rng::stream(cfg.seed, "eval.permutation");

    let (mut err2, mut g2, mut frame_err, mut frames, mut var_sum, mut var_n) = (0.0, 0.0, 0.0, 0usize, 0.0, 0usize);
    let mut grams = Vec::with_capacity(cfg.n_conditions);
    for _ in 0..cfg.n_conditions {
        let sample = world.draw_sample_any_length(&mut cond_rng, cfg.t_v)?;
        let g = world.mean(&sample.visual, &sample.speaker)?;
        let gens = (0..cfg.n_draws)
            .map(|_| {
                let x0 = Tensor::randn(g.shape(), 1.0, &mut x0_rng);
                generate(&sample.visual, &sample.speaker, &x0)
            })
            .collect::<Result<Vec<_>>>()?;
        let truths: Vec<Tensor> = (0..cfg.n_draws).map(|_| world.draw_target(&g, &mut truth_rng)).collect();

        let n = cfg.n_draws as f64;
        let mut mean = Tensor::zeros(g.shape());
        for x in &gens {
            if x.shape() != g.shape() {
                return crate::error::shape_err("eval generation", x.shape(), g.shape());
            }
            mean = mean.add(x)?;
        }
        let mean = mean.scale(1.0 / n);
        let diff = mean.sub(&g)?;
        err2 += diff.sq_norm();
        g2 += g.sq_norm();
        let d_a = g.shape()[1];
        for row in diff.data().chunks(d_a) {
            frame_err += row.iter().map(|x| x * x).sum::<f64>().sqrt();
            frames += 1;
        }
        for x in &gens {
            var_sum += x.sub(&mean)?.sq_norm() / (n - 1.0);
        }
        var_n += g.len();

        let pooled: Vec<&Tensor> = gens.iter().chain(&truths).collect();
        grams.push(rbf_gram(&pooled));
    }

    let size = 2 * cfg.n_draws;
    let mut idx: Vec<usize> = (0..size).collect();
    let stat = |grams: &[Vec<f64>], perms: &[Vec<usize>]| -> f64 {
        grams
            .iter()
            .zip(perms)
            .map(|(k, p)| mmd2_unbiased(k, size, p, cfg.n_draws))
            .sum()
    };
    let ident = vec![idx.clone(); grams.len()];
    let observed = stat(&grams, &ident);
    let mut exceed = 0;
    for _ in 0..cfg.n_permutations {
        let perms: Vec<Vec<usize>> = (0..grams.len())
            .map(|_| {
                for i in (1..size).rev() {
                    let j = perm_rng.random_range(0..=i);
                    idx.swap(i, j);
                }
                idx.clone()
            })
            .collect();
        if stat(&grams, &perms) >= observed {
            exceed += 1;
        }
    }
    let gen_std = (var_sum / var_n as f64).sqrt();
    let s = world.cfg.noise_std;
    Ok(EvalMetrics {
        n_conditions: cfg.n_conditions,
        n_draws: cfg.n_draws,
        rel_mean_error: if g2 > 0.0 { (err2 / g2).sqrt() } else { err2.sqrt() },
        mean_frame_error: frame_err / frames as f64,
        gen_std,
        noise_std: s,
        std_ratio: (s > 0.0).then(|| gen_std / s),
        mmd2: observed,
        mmd_p_value: (1 + exceed) as f64 / (1 + cfg.n_permutations) as f64,
        n_permutations: cfg.n_permutations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(noise: f64, speakers: usize) -> World {
        World::new(&WorldConfig {
            noise_std: noise,
            n_speakers: speakers,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn same_seed_same_world() {
        assert_eq!(world(0.1, 3), world(0.1, 3));
        let other = World::new(&WorldConfig {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(world(0.1, 4), other);
    }

    #[test]
    fn single_speaker_is_shared() {
        let w = world(0.1, 1);
        let mut r = rng::stream(0, "data");
        let a = w.draw_sample(&mut r, 8).unwrap();
        let b = w.draw_sample(&mut r, 9).unwrap();
        assert_eq!(a.speaker, b.speaker);
    }

    #[test]
    fn noiseless_target_is_the_mean() {
        let w = world(0.0, 2);
        let mut r = rng::stream(0, "data");
        let s = w.draw_sample(&mut r, 10).unwrap();
        assert_eq!(s.target, w.mean(&s.visual, &s.speaker).unwrap());
    }

    #[test]
    fn target_length_follows_factor() {
        let w = World::new(&WorldConfig {
            t_v_min: 6,
            ..Default::default()
        })
        .unwrap();
        let mut r = rng::stream(0, "data");
        let s = w.draw_sample(&mut r, 6).unwrap();
        assert_eq!(s.target.shape(), &[12, 16]);
        assert!(matches!(w.draw_sample(&mut r, 40), Err(Error::Contract(_))));
    }

    #[test]
    fn frame_map_is_one_lipschitz() {
        let w = world(0.1, 2);
        let mut r = rng::stream(5, "probe");
        let cols = 3 * 32 + 8;
        for _ in 0..200 {
            let a = Tensor::randn(&[cols], 1.0, &mut r);
            let b = a.add(&Tensor::randn(&[cols], 0.3, &mut r)).unwrap();
            let ga = w.frame_mean(a.data(), 1).unwrap();
            let gb = w.frame_mean(b.data(), 1).unwrap();
            assert!(ga.sub(&gb).unwrap().norm() <= a.sub(&b).unwrap().norm());
        }
    }

    #[test]
    fn visual_has_unit_variance_and_is_smooth() {
        let w = world(0.1, 2);
        let mut r = rng::stream(1, "gp");
        let v = w.draw_visual(&mut r, 2000);
        let var = v.sq_norm() / v.len() as f64;
        assert!((var - 1.0).abs() < 0.1, "{var}");
        let d = 32;
        let lag1: f64 = (0..1999)
            .map(|i| (0..d).map(|c| v.data()[i * d + c] * v.data()[(i + 1) * d + c]).sum::<f64>())
            .sum::<f64>()
            / (1999 * d) as f64;
        // kernel autocorrelation at lag 1 is exp(-1 / (2 l^2)) = 0.946
        assert!((lag1 / var - (-1.0f64 / 18.0).exp()).abs() < 0.05, "{lag1}");
    }

    #[test]
    fn repeated_draws_average_to_the_mean() {
        let w = world(0.1, 2);
        let mut r = rng::stream(0, "data");
        let s = w.draw_sample(&mut r, 8).unwrap();
        let g = w.mean(&s.visual, &s.speaker).unwrap();
        let n = 400;
        let mut acc = Tensor::zeros(g.shape());
        for _ in 0..n {
            acc = acc.add(&w.draw_target(&g, &mut r)).unwrap();
        }
        let dev = acc.scale(1.0 / n as f64).sub(&g).unwrap().max_abs();
        // max over 256 entries of |N(0, s^2/n)|: 4 sigma covers it comfortably
        assert!(dev < 4.0 * 0.1 / (n as f64).sqrt(), "{dev}");
    }

    #[test]
    fn zero_velocity_generator_is_the_null_baseline() {
        let w = world(0.1, 2);
        let cfg = EvalConfig {
            n_conditions: 3,
            n_draws: 8,
            n_permutations: 50,
            ..Default::default()
        };
        let m = eval_generation(&w, &cfg, |_, _, x0| Ok(x0.clone())).unwrap();
        assert!((m.rel_mean_error - 1.0).abs() < 0.5, "{m:?}");
        assert!(m.mmd_p_value < 0.05, "{m:?}");
    }

    #[test]
    fn oracle_generator_passes_the_permutation_test() {
        let w = world(0.1, 2);
        let cfg = EvalConfig::default();
        let mut r = rng::stream(77, "oracle");
        let m = eval_generation(&w, &cfg, |v, s, _| {
            let g = w.mean(v, s)?;
            Ok(w.draw_target(&g, &mut r))
        })
        .unwrap();
        assert!(m.mmd_p_value > 0.05, "{m:?}");
        assert!(m.rel_mean_error < 0.1, "{m:?}");
        assert!((m.std_ratio.unwrap() - 1.0).abs() < 0.1, "{m:?}");
    }

    #[test]
    fn mmd_of_identical_labels_is_symmetric() {
        let k = vec![1.0, 0.5, 0.2, 0.1, 0.5, 1.0, 0.3, 0.2, 0.2, 0.3, 1.0, 0.6, 0.1, 0.2, 0.6, 1.0];
        let a = mmd2_unbiased(&k, 4, &[0, 1, 2, 3], 2);
        let b = mmd2_unbiased(&k, 4, &[2, 3, 0, 1], 2);
        assert!((a - b).abs() < 1e-15);
        // hand value: 2*0.5/2 + 2*0.6/2 - 2*(0.2+0.1+0.3+0.2)/4
        assert!((a - (0.5 + 0.6 - 0.4)).abs() < 1e-15);
    }
}

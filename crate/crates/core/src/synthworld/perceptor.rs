use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::split::{split_dataset, Split};
use super::world::SyntheticWorld;
use crate::error::{Error, Result};
use crate::numerics::linalg::{covariance, jacobi_eigen};
use crate::numerics::Tensor;
use crate::rng;

/// Standard deviation of the noise added to semantic essence coordinates.
pub const SEMANTIC_ESSENCE_NOISE: f64 = 0.05;
/// Standard deviation of the semantic filler coordinates (variance 0.01).
pub const SEMANTIC_FILLER_NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptorMode {
    /// Shared, coordinate-aligned semantic space (Weak MAF).
    Semantic,
    /// Per-modality self-supervised encoder (Strong MAF).
    Isolated,
    /// Untrained random projection (ablation).
    RandomInit,
}

impl PerceptorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PerceptorMode::Semantic => "semantic",
            PerceptorMode::Isolated => "isolated",
            PerceptorMode::RandomInit => "random_init",
        }
    }
}

impl FromStr for PerceptorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(Self::Semantic),
            "isolated" => Ok(Self::Isolated),
            "random_init" => Ok(Self::RandomInit),
            other => Err(Error::Config(format!(
                "unknown perceptor mode '{other}' (expected semantic, isolated or random_init)"
            ))),
        }
    }
}

/// An affine perceptor `z = x W + b + noise`, with independent Gaussian noise
/// of per-coordinate standard deviation `noise_sd`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptorMap {
    /// `d x D`
    pub weight: Tensor,
    /// `1 x D`
    pub bias: Tensor,
    pub noise_sd: Vec<f64>,
    /// Number of trailing output coordinates that are structurally zero.
    pub padded: usize,
}

impl PerceptorMap {
    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Maps raw rows; row `i` draws its noise from a stream keyed by
    /// `noise_key` followed by `i`.
    pub fn apply(&self, x: &Tensor, noise_key: &[u64]) -> Result<Tensor> {
        let mut z = x.matmul(&self.weight)?;
        let cols = z.cols();
        for (i, row) in z.data_mut().chunks_mut(cols).enumerate() {
            self.finish_row(row, noise_key, i);
        }
        Ok(z)
    }

    fn finish_row(&self, row: &mut [f64], noise_key: &[u64], index: usize) {
        for (v, b) in row.iter_mut().zip(self.bias.data()) {
            *v += b;
        }
        if self.noise_sd.iter().any(|&s| s > 0.0) {
            let mut key = noise_key.to_vec();
            key.push(index as u64);
            let mut r = rng::stream(&key);
            for (v, &sd) in row.iter_mut().zip(&self.noise_sd) {
                let g: f64 = r.sample(StandardNormal);
                *v += sd * g;
            }
        }
    }
}

/// Semantic perceptor of modality `k`: essence read out at gain `g_e` into the
/// first `e` coordinates (shared across modalities), style at gain `g_s` plus
/// a modality offset into the next `s`, and low-variance filler after that.
pub fn semantic_map(world: &SyntheticWorld, k: usize) -> Result<PerceptorMap> {
    world.check_modality(k)?;
    let c = &world.config;
    let (e, s, d, big_d) = (c.essence_dim, c.style_dim, c.raw_dim, c.perceptor_dim);
    let params = &world.modalities[k];
    let style_cols = s.min(big_d - e);
    let mut weight = Tensor::zeros(d, big_d);
    let mut bias = Tensor::zeros(1, big_d);
    let mut noise_sd = vec![SEMANTIC_FILLER_NOISE; big_d];
    for j in 0..e {
        for r in 0..d {
            weight.set(r, j, c.semantic_essence_gain * params.mixing.get(r, j));
        }
        noise_sd[j] = SEMANTIC_ESSENCE_NOISE;
    }
    for j in 0..style_cols {
        for r in 0..d {
            weight.set(r, e + j, c.semantic_style_gain * params.mixing.get(r, e + j));
        }
        bias.set(0, e + j, params.semantic_offset[j]);
        noise_sd[e + j] = 0.0;
    }
    Ok(PerceptorMap {
        weight,
        bias,
        noise_sd,
        padded: 0,
    })
}

/// Maps a raw row of modality `k` into the semantic space. `index` is the
/// row's sample index, which keys its noise: row `i` of a semantic dataset is
/// exactly `perceive_semantic(world, k, raw_i, i)`.
pub fn perceive_semantic(world: &SyntheticWorld, k: usize, x: &[f64], index: usize) -> Result<Vec<f64>> {
    let map = semantic_map(world, k)?;
    if x.len() != world.config.raw_dim {
        return Err(Error::Dimension(format!(
            "raw row has {} entries, world raw_dim is {}",
            x.len(),
            world.config.raw_dim
        )));
    }
    let mut z = Tensor::row_vector(x.to_vec()).matmul(&map.weight)?.into_data();
    map.finish_row(&mut z, &perceptor_noise_key(world, k, rng::tag("sample")), index);
    Ok(z)
}

/// PCA whitening fit on unlabeled rows: center, project onto the top
/// `min(D, d)` principal components, scale each to unit variance, pad to `D`.
/// Components whose variance is numerically zero are padded as well.
pub fn fit_isolated_perceptor(raw: &Tensor, output_dim: usize) -> Result<PerceptorMap> {
    if raw.rows() < output_dim {
        return Err(Error::Input(format!(
            "isolated perceptor needs at least {output_dim} rows, got {}",
            raw.rows()
        )));
    }
    let d = raw.cols();
    let (cov, mean) = covariance(raw)?;
    let eig = jacobi_eigen(&cov)?;
    let top = eig.values.first().copied().unwrap_or(0.0);
    let keep = output_dim
        .min(d)
        .min(eig.values.iter().take_while(|&&v| v > 1e-10 * top.max(f64::MIN_POSITIVE)).count());
    if keep < output_dim.min(d) {
        log::warn!(
            "isolated perceptor: input rank {keep} below {} components, padding with zeros",
            output_dim.min(d)
        );
    }
    let mut weight = Tensor::zeros(d, output_dim);
    for j in 0..keep {
        let scale = 1.0 / eig.values[j].sqrt();
        for r in 0..d {
            weight.set(r, j, eig.vectors.get(r, j) * scale);
        }
    }
    let bias = mean.matmul(&weight)?.scale(-1.0);
    Ok(PerceptorMap {
        weight,
        bias,
        noise_sd: vec![0.0; output_dim],
        padded: output_dim - keep,
    })
}

/// Fresh Gaussian projection `d -> D` with entries `N(0, 1/d)`.
pub fn random_init_map(world: &SyntheticWorld, k: usize) -> Result<PerceptorMap> {
    world.check_modality(k)?;
    let c = &world.config;
    let mut r = rng::stream(&[c.seed, rng::tag("random-init-perceptor"), k as u64]);
    let sd = 1.0 / (c.raw_dim as f64).sqrt();
    let data = (0..c.raw_dim * c.perceptor_dim)
        .map(|_| sd * r.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(PerceptorMap {
        weight: Tensor::new(c.raw_dim, c.perceptor_dim, data)?,
        bias: Tensor::zeros(1, c.perceptor_dim),
        noise_sd: vec![0.0; c.perceptor_dim],
        padded: 0,
    })
}

/// Materialized features of one modality, ready for training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityDataset {
    pub modality: usize,
    pub mode: PerceptorMode,
    pub features: Tensor,
    pub labels: Vec<u8>,
    pub splits: Vec<Split>,
    /// Ground-truth latents behind each row.
    pub essence: Tensor,
    pub style: Tensor,
}

impl ModalityDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn subset(&self, split: Split) -> (Tensor, Vec<u8>) {
        let idx = self.indices(split);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (self.features.select_rows(&idx), labels)
    }

    /// CSV with header `modality,row,split,label,f0..f{D-1}`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("modality,row,split,label");
        for j in 0..self.features.cols() {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{},{},{},{}", self.modality, i, self.splits[i].as_str(), self.labels[i]);
            for v in self.features.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the perceptor of modality `k` for a run holding out `held_out`.
/// The isolated perceptor is fit on the modality's own training rows, labels unused.
pub fn build_perceptor(
    world: &SyntheticWorld,
    mode: PerceptorMode,
    k: usize,
    held_out: usize,
) -> Result<PerceptorMap> {
    match mode {
        PerceptorMode::Semantic => semantic_map(world, k),
        PerceptorMode::RandomInit => random_init_map(world, k),
        PerceptorMode::Isolated => {
            let raw = world.raw(k, held_out)?;
            let splits = split_dataset(&raw.labels, world.split_seed(k))?;
            let train: Vec<usize> = (0..raw.labels.len()).filter(|&i| splits[i] == Split::Train).collect();
            fit_isolated_perceptor(&raw.x.select_rows(&train), world.config.perceptor_dim)
        }
    }
}

/// Noise-stream key for perceptor outputs of modality `k`.
pub fn perceptor_noise_key(world: &SyntheticWorld, k: usize, purpose: u64) -> Vec<u64> {
    vec![world.config.seed, purpose, rng::tag("perceptor-noise"), k as u64]
}

/// Materializes modality `k` through the given perceptor, with the style leak
/// appropriate for a run whose unseen modality is `held_out`.
pub fn apply_perceptor(
    mode: PerceptorMode,
    world: &SyntheticWorld,
    k: usize,
    held_out: usize,
) -> Result<ModalityDataset> {
    world.check_modality(k)?;
    let raw = world.raw(k, held_out)?;
    let map = build_perceptor(world, mode, k, held_out)?;
    let features = map.apply(&raw.x, &perceptor_noise_key(world, k, rng::tag("sample")))?;
    let splits = split_dataset(&raw.labels, world.split_seed(k))?;
    Ok(ModalityDataset {
        modality: k,
        mode,
        features,
        labels: raw.labels,
        splits,
        essence: raw.essence,
        style: raw.style,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_world, WorldConfig};

    fn world(n: usize) -> SyntheticWorld {
        generate_world(&WorldConfig {
            samples_per_modality: n,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn semantic_dataset_contract() {
        let w = world(500);
        let ds = apply_perceptor(PerceptorMode::Semantic, &w, 1, 2).unwrap();
        assert_eq!(ds.features.shape(), (500, 64));
        assert_eq!(ds.indices(Split::Train).len(), 300);
        assert_eq!(ds.indices(Split::Val).len(), 100);
        assert_eq!(ds.indices(Split::Test).len(), 100);
        assert_eq!(ds, apply_perceptor(PerceptorMode::Semantic, &w, 1, 2).unwrap());
    }

    #[test]
    fn essence_coordinates_recover_gain_times_essence() {
        let mut cfg = WorldConfig {
            samples_per_modality: 200,
            semantic_style_gain: 0.0,
            observation_noise: 0.0,
            ..WorldConfig::default()
        };
        cfg.seed = 5;
        let w = generate_world(&cfg).unwrap();
        let ds = apply_perceptor(PerceptorMode::Semantic, &w, 0, 2).unwrap();
        for i in 0..200 {
            for j in 0..8 {
                let diff = ds.features.get(i, j) - 0.5 * ds.essence.get(i, j);
                assert!(diff.abs() < 5.0 * SEMANTIC_ESSENCE_NOISE);
            }
        }
    }

    #[test]
    fn aligned_essence_coordinates_correlate_across_modalities() {
        let w = world(1000);
        let a = apply_perceptor(PerceptorMode::Semantic, &w, 0, 2).unwrap();
        let b = apply_perceptor(PerceptorMode::Semantic, &w, 1, 2).unwrap();
        for j in 0..8 {
            let xa: Vec<f64> = (0..1000).map(|i| a.features.get(i, j)).collect();
            let xb: Vec<f64> = (0..1000).map(|i| b.features.get(i, j)).collect();
            assert!(pearson(&xa, &xb) > 0.9);
        }
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn isolated_whitening_contract() {
        let w = world(1000);
        let raw = w.raw(0, 2).unwrap();
        let map = fit_isolated_perceptor(&raw.x, 64).unwrap();
        assert_eq!(map, fit_isolated_perceptor(&raw.x, 64).unwrap());
        assert_eq!(map.padded, 0);
        let z = map.apply(&raw.x, &[0]).unwrap();
        let (cov, mean) = covariance(&z).unwrap();
        for j in 0..64 {
            assert!(mean.get(0, j).abs() < 1e-9);
            assert!((cov.get(j, j) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn isolated_pads_rank_deficient_input() {
        let cfg = WorldConfig {
            samples_per_modality: 300,
            observation_noise: 0.0,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg).unwrap();
        let map = fit_isolated_perceptor(&w.raw(0, 2).unwrap().x, 64).unwrap();
        assert_eq!(map.padded, 32);
        assert!((0..96).all(|r| map.weight.get(r, 63) == 0.0));
    }

    #[test]
    fn fakes_have_larger_whitened_norm() {
        let w = world(2000);
        let ds = apply_perceptor(PerceptorMode::Isolated, &w, 0, 2).unwrap();
        let norm = |class: u8| {
            let rows: Vec<usize> = (0..2000).filter(|&i| ds.labels[i] == class).collect();
            rows.iter()
                .map(|&i| ds.features.row(i).iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                / rows.len() as f64
        };
        assert!(norm(1) > norm(0) + 1.0);
    }

    #[test]
    fn random_init_is_seeded_per_modality() {
        let w = world(100);
        let a = random_init_map(&w, 0).unwrap();
        assert_eq!(a, random_init_map(&w, 0).unwrap());
        assert_ne!(a, random_init_map(&w, 1).unwrap());
        let var: f64 = a.weight.data().iter().map(|v| v * v).sum::<f64>() / a.weight.len() as f64;
        assert!((var - 1.0 / 96.0).abs() < 0.002);
    }

    #[test]
    fn mode_parsing_and_csv() {
        assert_eq!("random_init".parse::<PerceptorMode>().unwrap(), PerceptorMode::RandomInit);
        assert!(matches!("foo".parse::<PerceptorMode>(), Err(Error::Config(_))));
        let w = world(20);
        let csv = apply_perceptor(PerceptorMode::Semantic, &w, 0, 1).unwrap().to_csv();
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("modality,row,split,label,f0,f1"));
        assert!(header.ends_with(",f63"));
        assert_eq!(lines.count(), 20);
        assert!(csv.ends_with('\n'));
    }

    #[test]
    fn single_row_perception_matches_dataset_rows() {
        let w = world(30);
        let raw = w.raw(1, 2).unwrap();
        let ds = apply_perceptor(PerceptorMode::Semantic, &w, 1, 2).unwrap();
        for i in [0, 17, 29] {
            let z = perceive_semantic(&w, 1, raw.x.row(i), i).unwrap();
            assert_eq!(z.as_slice(), ds.features.row(i));
            assert_eq!(z, perceive_semantic(&w, 1, raw.x.row(i), i).unwrap());
        }
    }

    #[test]
    fn wrong_modality_is_a_contract_error() {
        let w = world(20);
        assert!(matches!(perceive_semantic(&w, 7, &[0.0; 96], 0), Err(Error::Contract(_))));
    }
}

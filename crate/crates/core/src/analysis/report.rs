use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::stats::{
    coactivation_core, kl_matrix, mean_off_diagonal, pca_k95, pca_project_2d, variance_explained, CoactivationCore,
};
use crate::algorithms::Model;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synthworld::{ModalityDataset, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    /// Perceptor outputs, the detector's input.
    Semantic,
    /// Last hidden layer of the detector.
    Forensic,
}

impl Space {
    pub const ALL: [Space; 2] = [Space::Semantic, Space::Forensic];

    pub fn as_str(self) -> &'static str {
        match self {
            Space::Semantic => "semantic",
            Space::Forensic => "forensic",
        }
    }
}

/// Feature rows of one (space, modality, label) group with the latents
/// behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGroup {
    pub space: Space,
    pub modality: usize,
    pub label: u8,
    pub features: Tensor,
    pub essence: Tensor,
    pub style: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureBundle {
    pub groups: Vec<FeatureGroup>,
    /// Forensic-layer activations on fake rows, one matrix per modality.
    pub fake_activations: Vec<Tensor>,
}

impl FeatureBundle {
    pub fn group(&self, space: Space, modality: usize, label: u8) -> Option<&FeatureGroup> {
        self.groups
            .iter()
            .find(|g| g.space == space && g.modality == modality && g.label == label)
    }

    pub fn modalities(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self.groups.iter().map(|g| g.modality).collect();
        m.sort_unstable();
        m.dedup();
        m
    }
}

/// Features of every modality's rows of `split` in both spaces, split by label.
pub fn collect_features(model: &Model, datasets: &[ModalityDataset], split: Split) -> Result<FeatureBundle> {
    let mut bundle = FeatureBundle::default();
    for data in datasets {
        let idx = data.indices(split);
        let x = data.features.select_rows(&idx);
        let forensic = model.forward(&x)?.forensic_features;
        for label in [0u8, 1] {
            let rows: Vec<usize> = (0..idx.len()).filter(|&r| data.labels[idx[r]] == label).collect();
            if rows.len() < 2 {
                return Err(Error::Input(format!(
                    "modality {} has fewer than two rows of label {label} in the {} split",
                    data.modality,
                    split.as_str()
                )));
            }
            let source: Vec<usize> = rows.iter().map(|&r| idx[r]).collect();
            for (space, feats) in [(Space::Semantic, &x), (Space::Forensic, &forensic)] {
                bundle.groups.push(FeatureGroup {
                    space,
                    modality: data.modality,
                    label,
                    features: feats.select_rows(&rows),
                    essence: data.essence.select_rows(&source),
                    style: data.style.select_rows(&source),
                });
            }
            if label == 1 {
                bundle.fake_activations.push(forensic.select_rows(&rows));
            }
        }
    }
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlEntry {
    pub space: Space,
    pub label: u8,
    /// `matrix[i][j] = KL(modality i || modality j)`.
    pub matrix: Vec<Vec<f64>>,
    pub mean_off_diagonal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct K95Entry {
    pub space: Space,
    pub label: u8,
    pub modality: usize,
    pub k95: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2Entry {
    pub space: Space,
    pub modality: usize,
    pub style_r2: f64,
    pub essence_r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub space: Space,
    pub modality: usize,
    pub label: u8,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub shrinkage: f64,
    pub modalities: Vec<usize>,
    pub kl: Vec<KlEntry>,
    pub k95: Vec<K95Entry>,
    pub coactivation: CoactivationCore,
    pub r2: Vec<R2Entry>,
    pub projection: Vec<ProjectedPoint>,
}

impl AnalysisReport {
    pub fn kl(&self, space: Space, label: u8) -> Option<&KlEntry> {
        self.kl.iter().find(|e| e.space == space && e.label == label)
    }

    pub fn k95(&self, space: Space, label: u8, modality: usize) -> Option<usize> {
        self.k95
            .iter()
            .find(|e| e.space == space && e.label == label && e.modality == modality)
            .map(|e| e.k95)
    }

    /// `(style R², essence R²)` averaged over modalities.
    pub fn mean_r2(&self, space: Space) -> (f64, f64) {
        let rows: Vec<&R2Entry> = self.r2.iter().filter(|e| e.space == space).collect();
        let n = rows.len().max(1) as f64;
        (
            rows.iter().map(|e| e.style_r2).sum::<f64>() / n,
            rows.iter().map(|e| e.essence_r2).sum::<f64>() / n,
        )
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One line per matrix entry: `space,label,from,to,kl`.
    pub fn kl_csv(&self) -> String {
        let mut out = String::from("space,label,from_modality,to_modality,kl\n");
        for e in &self.kl {
            for (i, row) in e.matrix.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    let _ = writeln!(out, "{},{},{},{},{v:.9}", e.space.as_str(), e.label, self.modalities[i], self.modalities[j]);
                }
            }
        }
        out
    }

    pub fn projection_csv(&self) -> String {
        let mut out = String::from("space,modality,label,x,y\n");
        for p in &self.projection {
            let _ = writeln!(out, "{},{},{},{:.9},{:.9}", p.space.as_str(), p.modality, p.label, p.x, p.y);
        }
        out
    }
}

/// All diagnostics of one bundle. `top_n` defaults to a quarter of the
/// forensic width.
pub fn analyze_bundle(bundle: &FeatureBundle, shrinkage: f64, top_n: Option<usize>) -> Result<AnalysisReport> {
    let modalities = bundle.modalities();
    let group = |space, m, label| {
        bundle
            .group(space, m, label)
            .ok_or_else(|| Error::Input(format!("bundle lacks {space:?} features of modality {m}, label {label}")))
    };
    let mut kl = Vec::new();
    let mut k95 = Vec::new();
    let mut r2 = Vec::new();
    let mut projection = Vec::new();
    for space in Space::ALL {
        for label in [0u8, 1] {
            let groups: Vec<&FeatureGroup> = modalities.iter().map(|&m| group(space, m, label)).collect::<Result<_>>()?;
            let feats: Vec<&Tensor> = groups.iter().map(|g| &g.features).collect();
            let matrix = kl_matrix(&feats, shrinkage)?;
            kl.push(KlEntry {
                space,
                label,
                mean_off_diagonal: mean_off_diagonal(&matrix),
                matrix,
            });
            for g in &groups {
                k95.push(K95Entry {
                    space,
                    label,
                    modality: g.modality,
                    k95: pca_k95(&g.features)?,
                });
            }
        }
        let mut pooled_parts = Vec::new();
        let mut tags = Vec::new();
        for &m in &modalities {
            let (real, fake) = (group(space, m, 0)?, group(space, m, 1)?);
            let x = Tensor::vconcat(&[&real.features, &fake.features])?;
            let essence = Tensor::vconcat(&[&real.essence, &fake.essence])?;
            let style = Tensor::vconcat(&[&real.style, &fake.style])?;
            r2.push(R2Entry {
                space,
                modality: m,
                style_r2: variance_explained(&x, &style)?,
                essence_r2: variance_explained(&x, &essence)?,
            });
            for g in [real, fake] {
                tags.extend(std::iter::repeat_n((m, g.label), g.features.rows()));
                pooled_parts.push(&g.features);
            }
        }
        let coords = pca_project_2d(&Tensor::vconcat(&pooled_parts)?)?;
        for (i, &(m, label)) in tags.iter().enumerate() {
            projection.push(ProjectedPoint {
                space,
                modality: m,
                label,
                x: coords.get(i, 0),
                y: coords.get(i, 1),
            });
        }
    }
    let acts: Vec<&Tensor> = bundle.fake_activations.iter().collect();
    let width = acts.first().map_or(0, |a| a.cols());
    let coactivation = coactivation_core(&acts, top_n.unwrap_or(width / 4))?;
    Ok(AnalysisReport {
        shrinkage,
        modalities,
        kl,
        k95,
        coactivation,
        r2,
        projection,
    })
}

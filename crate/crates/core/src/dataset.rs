//! Line-delimited JSON pair records and their preparation for the model.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract_keypoint_features, Backbone, ImageSource, SampleDiagnostics};
use crate::geometry::{KeypointGraph, KeypointSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    pub keypoints: Vec<[f64; 2]>,
    /// One latent per keypoint, rendered by a synthetic backbone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latents: Option<Vec<Vec<f64>>>,
    /// Precomputed feature file, relative to the pair file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    /// Render-noise seed for synthetic images.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub pair_id: String,
    pub class_id: usize,
    /// Keypoint `i` of image 1 corresponds to keypoint `truth[i]` of image 2.
    pub truth: Vec<usize>,
    pub image1: ImageRecord,
    pub image2: ImageRecord,
}

impl ImageRecord {
    fn validate(&self) -> Result<()> {
        if self.keypoints.is_empty() {
            return Err(Error::Contract(format!("image {} has no keypoints", self.id)));
        }
        match (&self.latents, &self.features) {
            (Some(l), None) => {
                if l.len() != self.keypoints.len() {
                    return Err(Error::Contract(format!(
                        "image {}: {} latents for {} keypoints",
                        self.id,
                        l.len(),
                        self.keypoints.len()
                    )));
                }
                let w = l[0].len();
                if w == 0 || l.iter().any(|r| r.len() != w) {
                    return Err(Error::Contract(format!("image {}: ragged latents", self.id)));
                }
                Ok(())
            }
            (None, Some(_)) => Ok(()),
            _ => Err(Error::Contract(format!(
                "image {} needs exactly one of `latents` or `features`",
                self.id
            ))),
        }
    }

    pub fn keypoint_set(&self) -> Result<KeypointSet> {
        KeypointSet::new(self.keypoints.clone(), self.id.clone())
    }

    fn latent_tensor(&self) -> Option<Result<Tensor>> {
        self.latents.as_ref().map(|l| Tensor::from_rows(l))
    }
}

impl PairRecord {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.image1.validate()?;
        self.image2.validate()?;
        let m = self.image1.keypoints.len();
        if self.image2.keypoints.len() != m || self.truth.len() != m {
            return Err(Error::Contract(format!(
                "pair {}: keypoint counts {} / {} and {} truth entries",
                self.pair_id,
                m,
                self.image2.keypoints.len(),
                self.truth.len()
            )));
        }
        let mut seen = vec![false; m];
        for &j in &self.truth {
            if j >= m || std::mem::replace(&mut seen[j], true) {
                return Err(Error::Contract(format!("pair {}: truth is not a permutation", self.pair_id)));
            }
        }
        Ok(())
    }
}

/// Reads records; errors carry the 1-based line number.
pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: format!("{}: {e}", path.display()),
        })?;
        rec.validate().map_err(|e| Error::Parse {
            line: line_no,
            message: format!("{}: {e}", path.display()),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[PairRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Everything the model needs for one pair, computed once.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub pair_id: String,
    pub class_id: usize,
    pub truth: Vec<usize>,
    pub x1: Tensor,
    pub x2: Tensor,
    pub graph1: KeypointGraph,
    pub graph2: KeypointGraph,
    pub pooled1: Vec<f64>,
    pub pooled2: Vec<f64>,
    pub diagnostics: SampleDiagnostics,
}

impl PreparedPair {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

fn prepare_image(
    img: &ImageRecord,
    backbone: &dyn Backbone,
    input_dim: usize,
    base_dir: Option<&Path>,
    diag: &mut SampleDiagnostics,
) -> Result<(Tensor, KeypointGraph, Vec<f64>)> {
    let kp = img.keypoint_set()?;
    let out = match (img.latent_tensor(), &img.features) {
        (Some(lat), _) => {
            let lat = lat?;
            backbone.forward(&ImageSource::Latents {
                latents: &lat,
                keypoints: &kp,
                seed: img.seed,
            })?
        }
        (None, Some(p)) => {
            let path = match base_dir {
                Some(b) if p.is_relative() => b.join(p),
                _ => p.clone(),
            };
            backbone.forward(&ImageSource::FeatureFile(&path))?
        }
        (None, None) => return Err(Error::Contract(format!("image {} has no source", img.id))),
    };
    let x = extract_keypoint_features(&out, &kp, input_dim, diag)?;
    let graph = KeypointGraph::build(&kp.coords, true);
    Ok((x, graph, out.pooled_mean()))
}

/// Runs the backbone and builds both graphs (self-loops on).
pub fn prepare_pair(
    rec: &PairRecord,
    backbone: &dyn Backbone,
    input_dim: usize,
    base_dir: Option<&Path>,
) -> Result<PreparedPair> {
    rec.validate()?;
    let mut diag = SampleDiagnostics::default();
    let (x1, graph1, pooled1) = prepare_image(&rec.image1, backbone, input_dim, base_dir, &mut diag)?;
    let (x2, graph2, pooled2) = prepare_image(&rec.image2, backbone, input_dim, base_dir, &mut diag)?;
    Ok(PreparedPair {
        pair_id: rec.pair_id.clone(),
        class_id: rec.class_id,
        truth: rec.truth.clone(),
        x1,
        x2,
        graph1,
        graph2,
        pooled1,
        pooled2,
        diagnostics: diag,
    })
}

/// Prepares many pairs in parallel, preserving order.
pub fn prepare_all(
    recs: &[PairRecord],
    backbone: &dyn Backbone,
    input_dim: usize,
    base_dir: Option<&Path>,
) -> Result<Vec<PreparedPair>> {
    use rayon::prelude::*;
    recs.par_iter()
        .map(|r| prepare_pair(r, backbone, input_dim, base_dir))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SyntheticBackbone;
    use crate::synth::{generate_dataset, SyntheticPairSpec};

    #[test]
    fn jsonl_round_trip() {
        let spec = SyntheticPairSpec {
            num_pairs: 5,
            ..SyntheticPairSpec::default()
        };
        let pairs = generate_dataset(&spec, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        write_pairs(&path, &pairs).unwrap();
        assert_eq!(read_pairs(&path).unwrap(), pairs);
    }

    #[test]
    fn malformed_lines_report_position() {
        let spec = SyntheticPairSpec {
            num_pairs: 2,
            ..SyntheticPairSpec::default()
        };
        let pairs = generate_dataset(&spec, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let good = serde_json::to_string(&pairs[0]).unwrap();
        std::fs::write(&path, format!("{good}\n{{\"pair_id\": 3\n")).unwrap();
        assert!(matches!(read_pairs(&path), Err(Error::Parse { line: 2, .. })));

        let mut bad = pairs[1].clone();
        bad.truth[0] = bad.truth[1];
        std::fs::write(&path, format!("{good}\n\n{}\n", serde_json::to_string(&bad).unwrap())).unwrap();
        assert!(matches!(read_pairs(&path), Err(Error::Parse { line: 3, .. })));

        let extra = good.replacen('{', "{\"colour\": 1, ", 1);
        std::fs::write(&path, extra).unwrap();
        assert!(matches!(read_pairs(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn prepare_uses_both_sources() {
        let spec = SyntheticPairSpec {
            num_pairs: 1,
            latent_dim: 8,
            signal_dims: 8,
            ..SyntheticPairSpec::default()
        };
        let mut rec = generate_dataset(&spec, 2).unwrap().remove(0);
        let bb = SyntheticBackbone::new(16, 4, 4, 0.03, 0.0).unwrap();
        let p = prepare_pair(&rec, &bb, 8, None).unwrap();
        assert_eq!(p.x1.shape(), &[rec.len(), 8]);
        assert_eq!(p.pooled2.len(), 8);

        // Swap image 2 to a precomputed file holding the same render.
        let dir = tempfile::tempdir().unwrap();
        let lat = Tensor::from_rows(rec.image2.latents.as_ref().unwrap()).unwrap();
        let out = bb.render(&lat, &rec.image2.keypoint_set().unwrap(), rec.image2.seed).unwrap();
        crate::features::write_feature_file(&dir.path().join("b.nmtf"), &out).unwrap();
        rec.image2.latents = None;
        rec.image2.features = Some("b.nmtf".into());
        let q = prepare_pair(&rec, &bb, 8, Some(dir.path())).unwrap();
        assert!(q.x2.max_abs_diff(&p.x2) < 1e-6);
        assert_eq!(q.x1, p.x1);
    }
}

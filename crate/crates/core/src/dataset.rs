//! Data ingestion (MNIST IDX files, synthetic Gaussian clusters), IID
//! partitioning across clients, and trigger (backdoor) patterns.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CrflError, Result};
use crate::rng::{self, label};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Per-coordinate standard deviation of the synthetic clusters.
pub const SYNTHETIC_NOISE_STD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl LabeledSample {
    pub fn dim(&self) -> usize {
        self.features.len()
    }

    /// True when every feature lies in `[0, 1]` and the label is below `classes`.
    pub fn is_valid(&self, classes: usize) -> bool {
        self.label < classes && self.features.iter().all(|&x| (0.0..=1.0).contains(&x))
    }
}

/// Additive sparse perturbation plus the label the poisoned sample is
/// relabelled to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerPattern {
    indices: Vec<usize>,
    values: Vec<f64>,
    target_label: usize,
    magnitude: f64,
}

impl TriggerPattern {
    pub fn new(indices: Vec<usize>, values: Vec<f64>, target_label: usize) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(CrflError::config(format!(
                "trigger has {} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        let mut seen = indices.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != indices.len() {
            return Err(CrflError::config("trigger indices must be distinct"));
        }
        let magnitude = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(TriggerPattern {
            indices,
            values,
            target_label,
            magnitude,
        })
    }

    /// Same as [`TriggerPattern::new`] but with `values` rescaled so that the
    /// dense perturbation has l2 norm `magnitude`.
    pub fn with_magnitude(
        indices: Vec<usize>,
        values: Vec<f64>,
        target_label: usize,
        magnitude: f64,
    ) -> Result<Self> {
        if !(magnitude >= 0.0 && magnitude.is_finite()) {
            return Err(CrflError::config(
                "trigger magnitude must be finite and >= 0",
            ));
        }
        let raw = TriggerPattern::new(indices, values, target_label)?;
        if raw.magnitude == 0.0 {
            if magnitude == 0.0 {
                return Ok(raw);
            }
            return Err(CrflError::config("cannot rescale an all-zero trigger"));
        }
        let factor = magnitude / raw.magnitude;
        let values = raw.values.iter().map(|v| v * factor).collect();
        let mut out = TriggerPattern::new(raw.indices, values, target_label)?;
        // keep the declared magnitude exact rather than the re-summed one
        out.magnitude = magnitude;
        Ok(out)
    }

    /// Default MNIST pixel pattern: pixels (0,0), (0,1), (1,0) of a 28×28
    /// image, equal deltas, l2 norm 0.1, target digit 0.
    pub fn mnist_default() -> Self {
        TriggerPattern::with_magnitude(vec![0, 1, 28], vec![1.0; 3], 0, 0.1)
            .expect("static pattern is valid")
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn target_label(&self) -> usize {
        self.target_label
    }

    /// l2 norm of the pre-clamp perturbation.
    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    pub fn max_index(&self) -> Option<usize> {
        self.indices.iter().copied().max()
    }

    pub fn dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }

    /// Add the perturbation to `features` in place and clamp the touched
    /// coordinates to `[0, 1]`.
    pub fn perturb_features(&self, features: &mut [f64]) {
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            features[i] = (features[i] + v).clamp(0.0, 1.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    samples: Vec<LabeledSample>,
}

impl ClientDataset {
    pub fn new(client_id: usize, samples: Vec<LabeledSample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| CrflError::config(format!("client {client_id} has an empty dataset")))?;
        let dim = first.dim();
        if samples.iter().any(|s| s.dim() != dim) {
            return Err(CrflError::Consistency(format!(
                "client {client_id} has samples of differing dimension"
            )));
        }
        Ok(ClientDataset { client_id, samples })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].dim()
    }

    pub fn into_samples(self) -> Vec<LabeledSample> {
        self.samples
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsMode {
    Uniform,
    BySize,
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub clients: Vec<ClientDataset>,
    /// Aggregation weights `p_i`, summing to one.
    pub weights: Vec<f64>,
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
}

fn format_err(path: &Path, message: impl Into<String>) -> CrflError {
    CrflError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Decode an IDX image/label pair from memory. Pixel bytes are divided by
/// 255; images are flattened row-major.
pub fn decode_idx(
    images: &[u8],
    labels: &[u8],
    images_path: &Path,
    labels_path: &Path,
) -> Result<Vec<LabeledSample>> {
    let magic =
        read_u32_be(images, 0).ok_or_else(|| format_err(images_path, "truncated header"))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            images_path,
            format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let lmagic =
        read_u32_be(labels, 0).ok_or_else(|| format_err(labels_path, "truncated header"))?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(format_err(
            labels_path,
            format!("bad label magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let header = |b: &[u8], off: usize, p: &Path| {
        read_u32_be(b, off)
            .ok_or_else(|| format_err(p, "truncated header"))
            .map(|v| v as usize)
    };
    let count = header(images, 4, images_path)?;
    let rows = header(images, 8, images_path)?;
    let cols = header(images, 12, images_path)?;
    let label_count = header(labels, 4, labels_path)?;
    if count != label_count {
        return Err(CrflError::Consistency(format!(
            "{} declares {count} images but {} declares {label_count} labels",
            images_path.display(),
            labels_path.display()
        )));
    }
    let dim = rows * cols;
    let pixels = &images[16..];
    let label_bytes = &labels[8..];
    if pixels.len() != count * dim {
        return Err(format_err(
            images_path,
            format!(
                "expected {} pixel bytes, found {}",
                count * dim,
                pixels.len()
            ),
        ));
    }
    if label_bytes.len() != count {
        return Err(format_err(
            labels_path,
            format!("expected {count} label bytes, found {}", label_bytes.len()),
        ));
    }
    Ok(pixels
        .chunks_exact(dim.max(1))
        .zip(label_bytes)
        .map(|(px, &l)| LabeledSample {
            features: px.iter().map(|&b| b as f64 / 255.0).collect(),
            label: l as usize,
        })
        .collect())
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<LabeledSample>> {
    let images = fs::read(images_path).map_err(|e| CrflError::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| CrflError::io(labels_path, e))?;
    decode_idx(&images, &labels, images_path, labels_path)
}

/// Centre of class `c`: `0.5 ± separation/2` per coordinate, positive on the
/// coordinates `j ≡ c (mod C)`.
fn synthetic_center(dim: usize, classes: usize, class: usize, separation: f64) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let sign = if j % classes == class { 1.0 } else { -1.0 };
            0.5 + sign * separation / 2.0
        })
        .collect()
}

/// Gaussian clusters around one fixed centre per class, clamped to `[0, 1]`.
/// Sample `i` has label `i mod C`.
pub fn generate_synthetic(
    n: usize,
    dim: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    if classes == 0 || n < classes || dim < classes {
        return Err(CrflError::config(format!(
            "synthetic data needs n >= C and d >= C (n={n}, d={dim}, C={classes})"
        )));
    }
    if !(separation > 0.0) {
        return Err(CrflError::config("synthetic separation must be > 0"));
    }
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| synthetic_center(dim, classes, c, separation))
        .collect();
    let noise = Normal::new(0.0, SYNTHETIC_NOISE_STD).expect("valid std");
    let mut stream = rng::derive_stream(seed, label::SYNTHETIC, 0, 0);
    Ok((0..n)
        .map(|i| {
            let label = i % classes;
            let features = centers[label]
                .iter()
                .map(|&m| (m + noise.sample(&mut stream)).clamp(0.0, 1.0))
                .collect();
            LabeledSample { features, label }
        })
        .collect())
}

/// Seeded shuffle, then contiguous splits whose sizes differ by at most one.
pub fn partition_iid(
    samples: Vec<LabeledSample>,
    n_clients: usize,
    mode: WeightsMode,
    seed: u64,
) -> Result<Partition> {
    if n_clients == 0 {
        return Err(CrflError::config("client count must be >= 1"));
    }
    if samples.is_empty() {
        return Err(CrflError::config("cannot partition an empty dataset"));
    }
    if n_clients > samples.len() {
        return Err(CrflError::config(format!(
            "{n_clients} clients but only {} samples",
            samples.len()
        )));
    }
    let total = samples.len();
    let mut order: Vec<usize> = (0..total).collect();
    let mut stream = rng::derive_stream(seed, label::PARTITION, 0, 0);
    order.shuffle(&mut stream);

    let mut slots: Vec<Option<LabeledSample>> = samples.into_iter().map(Some).collect();
    let base = total / n_clients;
    let extra = total % n_clients;
    let mut cursor = 0;
    let mut clients = Vec::with_capacity(n_clients);
    for id in 0..n_clients {
        let size = base + usize::from(id < extra);
        let chunk = order[cursor..cursor + size]
            .iter()
            .map(|&i| slots[i].take().expect("each index used once"))
            .collect();
        cursor += size;
        clients.push(ClientDataset::new(id, chunk)?);
    }
    let weights = match mode {
        WeightsMode::Uniform => vec![1.0 / n_clients as f64; n_clients],
        WeightsMode::BySize => clients
            .iter()
            .map(|c| c.len() as f64 / total as f64)
            .collect(),
    };
    Ok(Partition { clients, weights })
}

/// Backdoored copy of `sample`: clamped additive trigger and the target label.
pub fn apply_trigger(sample: &LabeledSample, pattern: &TriggerPattern) -> LabeledSample {
    let mut features = sample.features.clone();
    pattern.perturb_features(&mut features);
    LabeledSample {
        features,
        label: pattern.target_label(),
    }
}

/// Project a feature vector onto the unit l2 ball. Scaling down keeps every
/// coordinate in `[0, 1]`, and the projection is non-expansive.
pub fn project_unit_ball(features: &mut [f64]) {
    let norm = features.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1.0 {
        for x in features.iter_mut() {
            *x /= norm;
        }
    }
}

pub fn cap_input_norm(samples: &mut [LabeledSample]) {
    for s in samples {
        project_unit_ball(&mut s.features);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&count.to_be_bytes());
        b.extend_from_slice(&rows.to_be_bytes());
        b.extend_from_slice(&cols.to_be_bytes());
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn decodes_hand_made_idx() {
        let images = idx_images(2, 2, 2, &[0, 255, 128, 0, 10, 20, 30, 40]);
        let labels = idx_labels(&[3, 7]);
        let out = decode_idx(&images, &labels, Path::new("i"), Path::new("l")).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].features, vec![0.0, 1.0, 128.0 / 255.0, 0.0]);
        assert_eq!(out[0].label, 3);
        assert_eq!(out[1].features[3], 40.0 / 255.0);
        assert_eq!(out[1].label, 7);
    }

    #[test]
    fn rejects_bad_magic_and_count_mismatch() {
        let mut images = idx_images(1, 1, 1, &[5]);
        images[2] = 0;
        images[3] = 0;
        let err =
            decode_idx(&images, &idx_labels(&[1]), Path::new("i"), Path::new("l")).unwrap_err();
        assert!(matches!(err, CrflError::Format { .. }));

        let images = idx_images(2, 1, 1, &[5, 6]);
        let err =
            decode_idx(&images, &idx_labels(&[1]), Path::new("i"), Path::new("l")).unwrap_err();
        assert!(matches!(err, CrflError::Consistency(_)));

        let truncated = idx_images(2, 1, 1, &[5]);
        let err = decode_idx(
            &truncated,
            &idx_labels(&[1, 2]),
            Path::new("i"),
            Path::new("l"),
        )
        .unwrap_err();
        assert!(matches!(err, CrflError::Format { .. }));
    }

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let a = generate_synthetic(300, 10, 3, 0.4, 7).unwrap();
        assert_eq!(a.len(), 300);
        for c in 0..3 {
            assert_eq!(a.iter().filter(|s| s.label == c).count(), 100);
        }
        assert!(a.iter().all(|s| s.is_valid(3)));
        let b = generate_synthetic(300, 10, 3, 0.4, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(300, 10, 3, 0.4, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_preconditions() {
        assert!(generate_synthetic(2, 10, 3, 0.4, 1).is_err());
        assert!(generate_synthetic(30, 2, 3, 0.4, 1).is_err());
        assert!(generate_synthetic(30, 10, 3, 0.0, 1).is_err());
    }

    #[test]
    fn even_partition() {
        let data = generate_synthetic(100, 4, 2, 1.0, 1).unwrap();
        let part = partition_iid(data, 20, WeightsMode::BySize, 3).unwrap();
        assert_eq!(part.clients.len(), 20);
        assert!(part.clients.iter().all(|c| c.len() == 5));
        assert!(part.weights.iter().all(|&p| (p - 0.05).abs() < 1e-15));
    }

    #[test]
    fn uneven_partition_weights() {
        let data = generate_synthetic(101, 4, 2, 1.0, 1).unwrap();
        let part = partition_iid(data, 20, WeightsMode::BySize, 3).unwrap();
        let sizes: Vec<usize> = part.clients.iter().map(|c| c.len()).collect();
        assert_eq!(sizes.iter().filter(|&&s| s == 6).count(), 1);
        assert_eq!(sizes.iter().sum::<usize>(), 101);
        let big = sizes.iter().position(|&s| s == 6).unwrap();
        assert!((part.weights[big] - 6.0 / 101.0).abs() < 1e-15);
        assert!((part.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn partition_errors() {
        let data = generate_synthetic(10, 4, 2, 1.0, 1).unwrap();
        assert!(partition_iid(data.clone(), 11, WeightsMode::Uniform, 0).is_err());
        assert!(partition_iid(data, 0, WeightsMode::Uniform, 0).is_err());
        assert!(partition_iid(Vec::new(), 1, WeightsMode::Uniform, 0).is_err());
    }

    #[test]
    fn trigger_identity_and_clamp() {
        let s = LabeledSample {
            features: vec![0.95, 0.2, 0.0],
            label: 2,
        };
        let zero = TriggerPattern::new(vec![0, 1], vec![0.0, 0.0], 2).unwrap();
        assert_eq!(apply_trigger(&s, &zero), s);

        let bump = TriggerPattern::new(vec![0], vec![0.2], 1).unwrap();
        let out = apply_trigger(&s, &bump);
        assert_eq!(out.features, vec![1.0, 0.2, 0.0]);
        assert_eq!(out.label, 1);
        // re-applying stays saturated at 1 for this coordinate
        assert_eq!(apply_trigger(&out, &bump).features[0], 1.0);

        let down = TriggerPattern::new(vec![1], vec![-0.5], 0).unwrap();
        assert_eq!(apply_trigger(&s, &down).features[1], 0.0);
    }

    #[test]
    fn trigger_magnitude_rescaling() {
        let p = TriggerPattern::mnist_default();
        assert_eq!(p.indices(), &[0, 1, 28]);
        assert_eq!(p.target_label(), 0);
        let dense_norm = p.dense(784).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((dense_norm - 0.1).abs() <= 1e-12 * 0.1);
        assert!((p.magnitude() - 0.1).abs() < 1e-15);
        assert!((p.values()[0] - 0.1 / 3f64.sqrt()).abs() < 1e-15);

        assert!(TriggerPattern::new(vec![0, 0], vec![1.0, 1.0], 0).is_err());
        assert!(TriggerPattern::new(vec![0], vec![1.0, 1.0], 0).is_err());
        assert!(TriggerPattern::with_magnitude(vec![0], vec![0.0], 0, 0.1).is_err());
    }

    #[test]
    fn unit_ball_projection() {
        let mut v = vec![1.0, 1.0, 1.0, 1.0];
        project_unit_ball(&mut v);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-15);
        let mut small = vec![0.3, 0.4];
        project_unit_ball(&mut small);
        assert_eq!(small, vec![0.3, 0.4]);
    }
}

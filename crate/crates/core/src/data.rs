//! Federated dataset construction: synthetic latent-cluster mixtures,
//! Dirichlet label-skew partitions, and IDX (MNIST-family) file loading.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{Batch, Matrix};
use crate::rng::{self, tag};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceData {
    pub device_id: usize,
    pub train: Batch,
    pub test: Batch,
    pub true_cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub devices: Vec<DeviceData>,
    pub classes: usize,
    pub input_dim: usize,
}

impl FederatedDataset {
    pub fn m(&self) -> usize {
        self.devices.len()
    }

    /// Ground-truth cluster labels if every device carries one.
    pub fn true_clusters(&self) -> Option<Vec<usize>> {
        self.devices.iter().map(|d| d.true_cluster).collect()
    }

    pub fn train_sizes(&self) -> Vec<usize> {
        self.devices.iter().map(|d| d.train.len()).collect()
    }

    /// Restriction to the given devices, renumbered `0..idx.len()`.
    pub fn subset(&self, idx: &[usize]) -> FederatedDataset {
        let devices = idx
            .iter()
            .enumerate()
            .map(|(new_id, &i)| DeviceData {
                device_id: new_id,
                ..self.devices[i].clone()
            })
            .collect();
        FederatedDataset {
            devices,
            classes: self.classes,
            input_dim: self.input_dim,
        }
    }
}

/// Parameters of the synthetic latent-cluster mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub m: usize,
    pub k_true: usize,
    pub per_device: usize,
    pub input_dim: usize,
    pub classes: usize,
    /// Standard deviation of the shared class means.
    #[serde(default = "default_separation")]
    pub class_separation: f64,
    /// Standard deviation of each cluster's offset from the shared means.
    #[serde(default = "default_shift")]
    pub cluster_shift: f64,
    /// Within-class noise standard deviation.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_train_ratio")]
    pub train_ratio: f64,
}

fn default_separation() -> f64 {
    3.0
}
fn default_shift() -> f64 {
    0.5
}
fn default_noise() -> f64 {
    1.0
}
pub(crate) fn default_train_ratio() -> f64 {
    0.8
}

impl SynthSpec {
    pub fn new(m: usize, k_true: usize, per_device: usize, input_dim: usize, classes: usize) -> Self {
        SynthSpec {
            m,
            k_true,
            per_device,
            input_dim,
            classes,
            class_separation: default_separation(),
            cluster_shift: default_shift(),
            noise: default_noise(),
            train_ratio: default_train_ratio(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, r: &str| Err(Error::config(format!("data.synthetic.{f}"), r));
        if self.k_true == 0 {
            return err("k_true", "must be at least 1");
        }
        if self.m < self.k_true {
            return err("m", "must be at least k_true");
        }
        if self.per_device < 2 {
            return err("per_device", "must be at least 2");
        }
        if self.input_dim == 0 {
            return err("input_dim", "must be at least 1");
        }
        if self.classes < 2 {
            return err("classes", "must be at least 2");
        }
        if !(self.class_separation >= 0.0 && self.cluster_shift >= 0.0 && self.noise >= 0.0) {
            return err("class_separation", "scales must be non-negative");
        }
        if !(self.train_ratio > 0.0 && self.train_ratio <= 1.0) {
            return err("train_ratio", "must lie in (0, 1]");
        }
        Ok(())
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Devices are dealt round-robin to `k_true` latent clusters. Cluster `c`
/// draws inputs around the shared class means plus its own offset, and
/// labels latent class `j` as `(j + c) mod classes`, so the input-to-label
/// map differs between clusters.
pub fn synth_mixture(spec: &SynthSpec, seed: u64) -> Result<FederatedDataset> {
    spec.validate().map_err(|e| match e {
        Error::Config { field, reason } => Error::invalid(format!("{field}: {reason}")),
        other => other,
    })?;
    let d = spec.input_dim;
    let mut rng = rng::rng_for(seed, &[tag::DATA]);
    let base: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..d).map(|_| spec.class_separation * normal(&mut rng)).collect())
        .collect();
    let means: Vec<Vec<Vec<f64>>> = (0..spec.k_true)
        .map(|_| {
            base.iter()
                .map(|mu| mu.iter().map(|v| v + spec.cluster_shift * normal(&mut rng)).collect())
                .collect()
        })
        .collect();

    let devices = (0..spec.m)
        .map(|i| {
            let cluster = i % spec.k_true;
            let mut rng = rng::rng_for(seed, &[tag::DATA, i as u64]);
            let mut data = Vec::with_capacity(spec.per_device * d);
            let mut labels = Vec::with_capacity(spec.per_device);
            for _ in 0..spec.per_device {
                let latent = rng.random_range(0..spec.classes);
                data.extend(means[cluster][latent].iter().map(|mu| mu + spec.noise * normal(&mut rng)));
                labels.push((latent + cluster) % spec.classes);
            }
            let all = Batch::new(Matrix::new(spec.per_device, d, data)?, labels)?;
            let (train, test) = train_test_split(&all, spec.train_ratio, rng::derive_seed(seed, &[tag::SPLIT, i as u64]))?;
            Ok(DeviceData {
                device_id: i,
                train,
                test,
                true_cluster: Some(cluster),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(FederatedDataset {
        devices,
        classes: spec.classes,
        input_dim: d,
    })
}

fn dirichlet_sample(rng: &mut impl Rng, alpha: f64, m: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|g| g / total).collect()
    } else {
        // every gamma draw underflowed: put the mass on one device
        let mut p = vec![0.0; m];
        p[rng.random_range(0..m)] = 1.0;
        p
    }
}

/// Sample indices per device. For each class, shuffles that class's samples
/// and cuts them by Dirichlet(alpha) proportions over the `m` devices.
/// Devices left empty take one sample from the current largest device.
pub fn dirichlet_indices(labels: &[usize], m: usize, alpha: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if labels.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if m == 0 {
        return Err(Error::invalid("device count must be at least 1"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("alpha must be positive"));
    }
    if labels.len() < m {
        return Err(Error::invalid(format!("{} samples cannot cover {m} devices", labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |&c| c + 1);
    let mut rng = rng::rng_for(seed, &[tag::PARTITION]);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); m];

    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let props = dirichlet_sample(&mut rng, alpha, m);
        let n = members.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (dev, p) in props.iter().enumerate() {
            cum += p;
            let end = if dev + 1 == m {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            parts[dev].extend_from_slice(&members[start..end]);
            start = end;
        }
    }

    while let Some(empty) = parts.iter().position(Vec::is_empty) {
        let largest = (0..m)
            .max_by(|&a, &b| parts[a].len().cmp(&parts[b].len()).then(b.cmp(&a)))
            .expect("m >= 1");
        let moved = parts[largest].pop().expect("largest device holds >= 2 samples");
        parts[empty].push(moved);
    }
    Ok(parts)
}

/// Dirichlet label-skew partition of a pooled dataset, followed by a
/// per-device train/test split.
pub fn dirichlet_partition(
    inputs: &Matrix,
    labels: &[usize],
    m: usize,
    alpha: f64,
    train_ratio: f64,
    seed: u64,
) -> Result<FederatedDataset> {
    check_len(inputs.rows(), labels.len())?;
    let parts = dirichlet_indices(labels, m, alpha, seed)?;
    let pooled = Batch::new(inputs.clone(), labels.to_vec())?;
    let classes = labels.iter().max().map_or(0, |&c| c + 1);
    let devices = parts
        .iter()
        .enumerate()
        .map(|(i, idx)| {
            let (train, test) = train_test_split(&pooled.select(idx), train_ratio, rng::derive_seed(seed, &[tag::SPLIT, i as u64]))?;
            Ok(DeviceData {
                device_id: i,
                train,
                test,
                true_cluster: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FederatedDataset {
        devices,
        classes,
        input_dim: inputs.cols(),
    })
}

/// Shuffled split; the first part gets `floor(ratio * n)` samples, at least one.
pub fn train_test_split(data: &Batch, ratio: f64, seed: u64) -> Result<(Batch, Batch)> {
    if data.is_empty() {
        return Err(Error::Empty("batch to split"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid("split ratio must lie in (0, 1]"));
    }
    let n = data.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::rng_for(seed, &[tag::SPLIT]));
    let n_train = ((ratio * n as f64 + 1e-9).floor() as usize).clamp(1, n);
    Ok((data.select(&idx[..n_train]), data.select(&idx[n_train..])))
}

fn read_be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    let chunk = bytes.get(at..at + 4).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        needed: at + 4,
        available: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
}

fn read_idx(path: &Path, magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let found = read_be_u32(&bytes, 0, path)?;
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|k| read_be_u32(&bytes, 4 + 4 * k, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let needed = header + dims.iter().product::<usize>();
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            available: bytes.len(),
        });
    }
    Ok((dims, bytes[header..needed].to_vec()))
}

/// Reads an IDX image/label file pair. Pixels are scaled to `[0, 1]` and
/// flattened row-major, one image per matrix row.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<(Matrix, Vec<usize>)> {
    let (idims, pixels) = read_idx(images_path.as_ref(), IDX_IMAGES_MAGIC)?;
    let (ldims, labels) = read_idx(labels_path.as_ref(), IDX_LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let n = idims[0];
    let width = idims[1] * idims[2];
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Ok((Matrix::new(n, width, data)?, labels.into_iter().map(usize::from).collect()))
}

/// Encodes images (`rows x cols` each) and labels as IDX byte streams.
pub fn encode_idx(images: &[Vec<u8>], rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [images.len(), rows, cols] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    for im in images {
        img.extend_from_slice(im);
    }
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, predict, sgd_step, supervised_loss_grad, Activation, ModelArch};
    use crate::metrics::accuracy;

    #[test]
    fn synth_round_robin_clusters() {
        let ds = synth_mixture(&SynthSpec::new(4, 2, 10, 3, 2), 1).unwrap();
        assert_eq!(ds.true_clusters().unwrap(), vec![0, 1, 0, 1]);
        let ds = synth_mixture(&SynthSpec::new(5, 1, 10, 3, 2), 1).unwrap();
        assert_eq!(ds.true_clusters().unwrap(), vec![0; 5]);
        assert!(ds.devices.iter().all(|d| d.train.len() == 8 && d.test.len() == 2));
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec::new(6, 3, 12, 4, 3);
        let a = synth_mixture(&spec, 42).unwrap();
        let b = synth_mixture(&spec, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_mixture(&spec, 43).unwrap());
    }

    #[test]
    fn synth_rejects_bad_sizes() {
        assert!(synth_mixture(&SynthSpec::new(1, 2, 10, 3, 2), 0).is_err());
        assert!(synth_mixture(&SynthSpec::new(3, 0, 10, 3, 2), 0).is_err());
        assert!(synth_mixture(&SynthSpec::new(3, 1, 1, 3, 2), 0).is_err());
    }

    #[test]
    fn synth_clusters_conflict_under_permutation() {
        // Train once on cluster 0 pooled data, score on cluster 1.
        let ds = synth_mixture(&SynthSpec::new(8, 2, 50, 5, 2), 9).unwrap();
        let pool = |c: usize, test: bool| {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for d in ds.devices.iter().filter(|d| d.true_cluster == Some(c)) {
                let b = if test { &d.test } else { &d.train };
                for r in 0..b.len() {
                    rows.push(b.inputs.row(r).to_vec());
                    labels.push(b.labels[r]);
                }
            }
            Batch::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
        };
        let train0 = pool(0, false);
        let arch = ModelArch::new(vec![5, 2], Activation::Tanh).unwrap();
        let mut model = init_model(&arch, 3);
        for _ in 0..200 {
            let (_, g) = supervised_loss_grad(&model, &train0).unwrap();
            model = sgd_step(&model, &g, 0.5).unwrap();
        }
        let own = pool(0, true);
        let other = pool(1, true);
        let acc_own = accuracy(&predict(&model, &own.inputs).unwrap(), &own.labels).unwrap();
        let acc_other = accuracy(&predict(&model, &other.inputs).unwrap(), &other.labels).unwrap();
        assert!(acc_own > 0.9, "own-cluster accuracy {acc_own}");
        assert!(acc_other < 0.5, "cross-cluster accuracy {acc_other}");
    }

    fn label_data(per_class: usize, classes: usize) -> (Matrix, Vec<usize>) {
        let labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
        let rows: Vec<Vec<f64>> = (0..labels.len()).map(|i| vec![i as f64]).collect();
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn dirichlet_is_a_partition() {
        let (_, labels) = label_data(37, 3);
        for seed in 0..5 {
            let parts = dirichlet_indices(&labels, 7, 0.5, seed).unwrap();
            let mut all: Vec<usize> = parts.concat();
            all.sort_unstable();
            assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            assert!(parts.iter().all(|p| !p.is_empty()));
        }
    }

    #[test]
    fn dirichlet_large_alpha_tracks_global_proportions() {
        let (x, labels) = label_data(500, 2);
        let ds = dirichlet_partition(&x, &labels, 10, 1e6, 1.0, 4).unwrap();
        for d in &ds.devices {
            let share = d.train.labels.iter().filter(|&&y| y == 0).count() as f64 / d.train.len() as f64;
            assert!((share - 0.5).abs() < 0.05, "device {} share {share}", d.device_id);
        }
    }

    fn mean_max_share(labels: &[usize], alpha: f64, seeds: u64) -> f64 {
        let mut total = 0.0;
        let mut count = 0.0;
        for seed in 0..seeds {
            for p in dirichlet_indices(labels, 10, alpha, seed).unwrap() {
                let zeros = p.iter().filter(|&&i| labels[i] == 0).count();
                let share = zeros.max(p.len() - zeros) as f64 / p.len() as f64;
                total += share;
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn dirichlet_small_alpha_is_more_skewed() {
        let (_, labels) = label_data(500, 2);
        let skewed = mean_max_share(&labels, 0.5, 12);
        let flat = mean_max_share(&labels, 1e6, 12);
        assert!(skewed > flat + 0.1, "alpha 0.5: {skewed}, alpha 1e6: {flat}");
    }

    #[test]
    fn dirichlet_repairs_empty_devices() {
        // 12 samples over 10 devices with tiny alpha leaves most devices empty before repair.
        let labels = vec![0usize; 12];
        let parts = dirichlet_indices(&labels, 10, 0.01, 3).unwrap();
        assert!(parts.iter().all(|p| !p.is_empty()));
        assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), 12);
    }

    #[test]
    fn dirichlet_errors() {
        assert!(matches!(dirichlet_indices(&[], 2, 0.5, 0), Err(Error::Empty(_))));
        assert!(dirichlet_indices(&[0, 1], 3, 0.5, 0).is_err());
        assert!(dirichlet_indices(&[0, 1], 2, 0.0, 0).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let (x, labels) = label_data(5, 2);
        let b = Batch::new(x, labels).unwrap();
        let (tr, te) = train_test_split(&b, 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let (tr2, te2) = train_test_split(&b, 0.8, 1).unwrap();
        assert_eq!((tr.clone(), te.clone()), (tr2, te2));
        let (tr, te) = train_test_split(&b, 1.0, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (10, 0));
        let (tr, _) = train_test_split(&b, 0.01, 1).unwrap();
        assert_eq!(tr.len(), 1);
        assert!(train_test_split(&Batch::default(), 0.5, 0).is_err());
        assert!(train_test_split(&b, 0.0, 0).is_err());
    }

    fn write_pair(dir: &Path, img: &[u8], lab: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("images.idx");
        let lp = dir.join("labels.idx");
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_round_trip_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = encode_idx(&[vec![0; 4], vec![255; 4]], 2, 2, &[3, 7]);
        let (ip, lp) = write_pair(dir.path(), &img, &lab);
        let (x, y) = load_idx(&ip, &lp).unwrap();
        assert_eq!(x.rows(), 2);
        assert_eq!(x.row(0), &[0.0; 4]);
        assert_eq!(x.row(1), &[1.0; 4]);
        assert_eq!(y, vec![3, 7]);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = encode_idx(&[vec![0; 4], vec![255; 4]], 2, 2, &[3, 7]);

        let (ip, lp) = write_pair(dir.path(), &img, &lab[..lab.len() - 1]);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Truncated { .. })));

        let (ip, lp) = write_pair(dir.path(), &lab, &lab);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::BadMagic { expected: IDX_IMAGES_MAGIC, .. })));

        let (_, short) = encode_idx(&[], 2, 2, &[3]);
        let (ip, lp) = write_pair(dir.path(), &img, &short);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::CountMismatch { images: 2, labels: 1 })));

        assert!(matches!(load_idx(dir.path().join("nope"), &lp), Err(Error::Io { .. })));
    }
}

//! Synthetic classification data, Dirichlet label-skew partitioning and the
//! server-side split into an unlabeled probe set and a labeled test set.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{LabeledDataset, UnlabeledDataset};
use crate::rng::{derive_seed, seeded_rng, SimRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn new(num_clients: usize, alpha: f64, seed: u64) -> Result<Self> {
        if num_clients == 0 {
            return Err(Error::invalid("num_clients must be at least 1"));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self {
            num_clients,
            alpha,
            seed,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DataBundle {
    pub client_sets: Vec<LabeledDataset>,
    pub server_unlabeled: UnlabeledDataset,
    pub server_test: LabeledDataset,
}

impl DataBundle {
    /// Splits off the server sets, then partitions the remainder over clients.
    pub fn build(
        pool: &LabeledDataset,
        n_unlabeled: usize,
        n_test: usize,
        split_seed: u64,
        partition: &PartitionSpec,
    ) -> Result<Self> {
        let (server_unlabeled, server_test, rest) = split_server(pool, n_unlabeled, n_test, split_seed)?;
        let client_sets = dirichlet_partition(&rest, partition)?;
        Ok(Self {
            client_sets,
            server_unlabeled,
            server_test,
        })
    }
}

/// Balanced Gaussian blobs with identity covariance. Class `n` is centred at a
/// pseudo-random unit direction scaled by `class_separation`. Samples are
/// emitted class by class.
pub fn make_synthetic(
    num_classes: usize,
    input_dim: usize,
    samples_per_class: usize,
    class_separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::invalid("num_classes must be at least 2"));
    }
    if input_dim == 0 || samples_per_class == 0 {
        return Err(Error::invalid("input_dim and samples_per_class must be at least 1"));
    }
    if !class_separation.is_finite() || class_separation < 0.0 {
        return Err(Error::invalid("class_separation must be finite and non-negative"));
    }
    let mut rng = seeded_rng(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let mut dir: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.iter_mut().for_each(|x| *x *= class_separation / norm);
            dir
        })
        .collect();

    let total = num_classes * samples_per_class;
    let mut feats = Vec::with_capacity(total * input_dim);
    let mut labels = Vec::with_capacity(total);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..samples_per_class {
            feats.extend(center.iter().map(|c| c + rng.sample::<f64, _>(StandardNormal)));
            labels.push(class);
        }
    }
    LabeledDataset::new(Matrix::from_vec(total, input_dim, feats)?, labels, num_classes)
}

/// Natural log of a `Gamma(shape, 1)` draw (Marsaglia–Tsang). Working in log
/// space keeps tiny-shape draws from underflowing to zero.
fn ln_gamma_sample(shape: f64, rng: &mut SimRng) -> f64 {
    if shape < 1.0 {
        // G(a) = G(a + 1) * U^(1/a)
        let u: f64 = 1.0 - rng.random::<f64>();
        return ln_gamma_sample(shape + 1.0, rng) + u.ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.random();
        if u > 0.0 && u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return (d * v).ln();
        }
    }
}

/// One draw from a symmetric `Dir(alpha * 1_k)`.
pub fn sample_dirichlet(alpha: f64, k: usize, rng: &mut SimRng) -> Vec<f64> {
    let logs: Vec<f64> = (0..k).map(|_| ln_gamma_sample(alpha, rng)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= sum);
    p
}

/// Integer counts summing exactly to `total`, proportional to `p`
/// (largest-remainder rounding, ties to the lowest index).
fn apportion(p: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|x| x * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-class Dirichlet label skew over `spec.num_clients` clients.
///
/// Every client ends with at least one sample: empty clients take one sample
/// from the currently largest client.
pub fn dirichlet_partition(data: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<LabeledDataset>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("dirichlet_partition"));
    }
    let k = spec.num_clients;
    if data.len() < k {
        return Err(Error::invalid(format!(
            "cannot give each of {k} clients a sample from a pool of {}",
            data.len()
        )));
    }
    let mut rng = seeded_rng(spec.seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (i, &l) in data.labels().iter().enumerate() {
        by_class[l].push(i);
    }

    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); k];
    for members in by_class.iter_mut() {
        // Draw proportions even for empty classes so the stream does not depend on class presence.
        let p = sample_dirichlet(spec.alpha, k, &mut rng);
        members.shuffle(&mut rng);
        let counts = apportion(&p, members.len());
        let mut cursor = 0;
        for (client, &c) in counts.iter().enumerate() {
            assignment[client].extend_from_slice(&members[cursor..cursor + c]);
            cursor += c;
        }
    }

    while let Some(empty) = assignment.iter().position(Vec::is_empty) {
        let largest = (0..k)
            .max_by(|&a, &b| assignment[a].len().cmp(&assignment[b].len()).then(b.cmp(&a)))
            .expect("k >= 1");
        let moved = assignment[largest].pop().expect("largest client is non-empty");
        assignment[empty].push(moved);
    }

    Ok(assignment
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            data.subset(&idx)
        })
        .collect())
}

/// Seeded shuffle, then `(unlabeled, test, remainder)`.
pub fn split_server(
    data: &LabeledDataset,
    n_unlabeled: usize,
    n_test: usize,
    seed: u64,
) -> Result<(UnlabeledDataset, LabeledDataset, LabeledDataset)> {
    if n_unlabeled + n_test > data.len() {
        return Err(Error::invalid(format!(
            "server split needs {} samples but the dataset has {}",
            n_unlabeled + n_test,
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seeded_rng(seed));
    let (unlabeled, rest) = order.split_at(n_unlabeled);
    let (test, remainder) = rest.split_at(n_test);
    Ok((
        data.subset(unlabeled).without_labels(),
        data.subset(test),
        data.subset(remainder),
    ))
}

/// Shannon entropy (nats) of a client's label histogram.
pub fn label_entropy(data: &LabeledDataset) -> f64 {
    let n = data.len() as f64;
    data.class_counts()
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Reads `f0,...,f{D-1},label` CSV. Non-finite feature tokens are rejected.
/// `num_classes` defaults to `max(label) + 1` (at least 2).
pub fn read_csv<R: Read>(reader: R, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::DataFile(e.to_string()))?.clone();
    let width = headers.len();
    if width < 2 {
        return Err(Error::DataFile(
            "need at least one feature column and a label column".into(),
        ));
    }
    for (i, h) in headers.iter().take(width - 1).enumerate() {
        if h.trim() != format!("f{i}") {
            return Err(Error::DataFile(format!("column {i} must be named f{i}, found `{h}`")));
        }
    }
    if headers[width - 1].trim() != "label" {
        return Err(Error::DataFile("last column must be named `label`".into()));
    }

    let dim = width - 1;
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::DataFile(e.to_string()))?;
        let row = line + 2;
        for tok in record.iter().take(dim) {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| Error::DataFile(format!("line {row}: bad number `{tok}`")))?;
            if !v.is_finite() {
                return Err(Error::DataFile(format!("line {row}: non-finite value `{tok}`")));
            }
            feats.push(v);
        }
        let tok = &record[dim];
        let label: usize = tok
            .trim()
            .parse()
            .map_err(|_| Error::DataFile(format!("line {row}: bad label `{tok}`")))?;
        labels.push(label);
    }
    let inferred = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    let classes = num_classes.unwrap_or(inferred);
    let rows = labels.len();
    LabeledDataset::new(Matrix::from_vec(rows, dim, feats)?, labels, classes)
}

pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), num_classes)
}

/// Seed for the synthetic generator of a run.
pub(crate) fn synthetic_seed(base: u64) -> u64 {
    derive_seed(base, &[crate::rng::stream::SYNTHETIC])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{accuracy, init_params, sgd_train, Architecture, SgdConfig};

    fn sorted_rows(m: &Matrix) -> Vec<Vec<u64>> {
        let mut rows: Vec<Vec<u64>> = m.iter_rows().map(|r| r.iter().map(|x| x.to_bits()).collect()).collect();
        rows.sort();
        rows
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let d = make_synthetic(3, 2, 50, 4.0, 1).unwrap();
        assert_eq!(d.len(), 150);
        assert_eq!(d.class_counts(), vec![50, 50, 50]);
        assert_eq!(d, make_synthetic(3, 2, 50, 4.0, 1).unwrap());
        assert_ne!(d, make_synthetic(3, 2, 50, 4.0, 2).unwrap());
    }

    fn train_and_score(sep: f64) -> f64 {
        let data = make_synthetic(4, 8, 250, sep, 5).unwrap();
        let (_, test, train) = split_server(&data, 0, 200, 9).unwrap();
        let arch = Architecture::logistic(8, 4).unwrap();
        let cfg = SgdConfig {
            epochs: 20,
            batch_size: 32,
            lr: 0.1,
        };
        let model = sgd_train(&init_params(arch, 1), &train, &cfg, 2).unwrap();
        accuracy(&model, &test).unwrap()
    }

    #[test]
    fn zero_separation_is_chance_level() {
        let acc = train_and_score(0.0);
        assert!((acc - 0.25).abs() <= 0.1, "accuracy {acc}");
    }

    #[test]
    fn large_separation_is_learnable() {
        let acc = train_and_score(6.0);
        assert!(acc >= 0.9, "accuracy {acc}");
    }

    #[test]
    fn split_server_sizes_determinism_and_conservation() {
        let data = make_synthetic(4, 3, 250, 2.0, 3).unwrap();
        let (u, t, r) = split_server(&data, 100, 200, 4).unwrap();
        assert_eq!((u.len(), t.len(), r.len()), (100, 200, 700));
        let (u2, t2, r2) = split_server(&data, 100, 200, 4).unwrap();
        assert_eq!((u, t.clone(), r.clone()), (u2.clone(), t2, r2));

        let mut joined = u2.features().to_rows();
        joined.extend(t.features().to_rows());
        joined.extend(r.features().to_rows());
        let joined = Matrix::from_rows(&joined).unwrap();
        assert_eq!(sorted_rows(&joined), sorted_rows(data.features()));
        let mut counts = t.class_counts();
        for (c, x) in counts.iter_mut().zip(r.class_counts()) {
            *c += x;
        }
        assert_eq!(counts.iter().sum::<usize>(), 900);
    }

    #[test]
    fn split_server_rejects_oversized_request() {
        let data = make_synthetic(2, 2, 5, 1.0, 0).unwrap();
        assert!(split_server(&data, 6, 5, 0).is_err());
    }

    #[test]
    fn single_client_gets_everything() {
        let data = make_synthetic(3, 2, 20, 1.0, 0).unwrap();
        let parts = dirichlet_partition(&data, &PartitionSpec::new(1, 0.5, 0).unwrap()).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0], data);
    }

    #[test]
    fn huge_alpha_is_nearly_balanced() {
        let data = make_synthetic(10, 2, 100, 1.0, 0).unwrap();
        let parts = dirichlet_partition(&data, &PartitionSpec::new(10, 1e6, 42).unwrap()).unwrap();
        for p in &parts {
            assert!((p.len() as f64 - 100.0).abs() <= 10.0, "client size {}", p.len());
        }
    }

    #[test]
    fn small_alpha_is_skewed() {
        let data = make_synthetic(10, 2, 100, 1.0, 0).unwrap();
        let parts = dirichlet_partition(&data, &PartitionSpec::new(10, 0.1, 42).unwrap()).unwrap();
        let skewed = parts.iter().any(|p| {
            let top = *p.class_counts().iter().max().unwrap();
            top as f64 > 0.5 * p.len() as f64
        });
        assert!(skewed);
    }

    #[test]
    fn partition_conserves_samples_and_never_leaves_a_client_empty() {
        // 6 samples for 6 clients at tiny alpha: some clients must be repaired.
        let data = make_synthetic(2, 2, 3, 1.0, 0).unwrap();
        for seed in 0..20 {
            let parts = dirichlet_partition(&data, &PartitionSpec::new(6, 0.05, seed).unwrap()).unwrap();
            assert!(parts.iter().all(|p| !p.is_empty()));
            let mut rows: Vec<Vec<f64>> = parts.iter().flat_map(|p| p.features().to_rows()).collect();
            rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut orig = data.features().to_rows();
            orig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(rows, orig);
        }
        assert!(dirichlet_partition(&data, &PartitionSpec::new(7, 1.0, 0).unwrap()).is_err());
    }

    #[test]
    fn entropy_is_monotone_in_alpha() {
        let data = make_synthetic(10, 2, 100, 1.0, 0).unwrap();
        for seed in 0..5 {
            let mean_entropy = |alpha: f64| {
                let parts = dirichlet_partition(&data, &PartitionSpec::new(10, alpha, seed).unwrap()).unwrap();
                parts.iter().map(label_entropy).sum::<f64>() / parts.len() as f64
            };
            let e: Vec<f64> = [1e6, 1.0, 0.5, 0.1].iter().map(|&a| mean_entropy(a)).collect();
            assert!(e.windows(2).all(|w| w[1] <= w[0]), "seed {seed}: {e:?}");
        }
    }

    #[test]
    fn dirichlet_draws_are_on_the_simplex() {
        let mut rng = seeded_rng(3);
        for alpha in [1e-3, 0.1, 1.0, 7.5, 1e6] {
            let p = sample_dirichlet(alpha, 12, &mut rng);
            assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_sampler_has_the_right_mean() {
        let mut rng = seeded_rng(17);
        for shape in [0.3, 1.0, 4.0] {
            let n = 20_000;
            let mean = (0..n).map(|_| ln_gamma_sample(shape, &mut rng).exp()).sum::<f64>() / n as f64;
            assert!(
                (mean - shape).abs() < 0.05 * shape.max(1.0),
                "shape {shape}: mean {mean}"
            );
        }
    }

    #[test]
    fn apportion_conserves_total() {
        assert_eq!(apportion(&[0.5, 0.25, 0.25], 10), vec![5, 3, 2]);
        assert_eq!(apportion(&[0.0, 1.0], 7), vec![0, 7]);
        assert_eq!(apportion(&[0.3, 0.3, 0.4], 0), vec![0, 0, 0]);
    }

    #[test]
    fn csv_round_trip_and_rejections() {
        let text = "f0,f1,label\n0.5,-1.25,1\n3,4e-2,0\n";
        let d = read_csv(text.as_bytes(), None).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels(), &[1, 0]);
        assert_eq!(d.features().row(1), &[3.0, 0.04]);
        assert_eq!(d.num_classes(), 2);

        assert!(read_csv("f0,f1,label\nNaN,1,0\n".as_bytes(), None).is_err());
        assert!(read_csv("f0,f1,label\ninf,1,0\n".as_bytes(), None).is_err());
        assert!(read_csv("f0,x,label\n1,1,0\n".as_bytes(), None).is_err());
        assert!(read_csv("f0,f1,label\n1,1,-1\n".as_bytes(), None).is_err());
        assert!(read_csv("f0,f1,label\n1,1,4\n".as_bytes(), Some(3)).is_err());
    }
}

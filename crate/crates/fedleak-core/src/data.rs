//! In-memory image datasets, a synthetic corpus, and client partitioning.

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled image collection with contiguous pixel storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// (channels, height, width) of every image.
    pub input: (usize, usize, usize),
    pub classes: usize,
    pixels: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        input: (usize, usize, usize),
        classes: usize,
        pixels: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Dataset> {
        let dim = input.0 * input.1 * input.2;
        if dim == 0 {
            return Err(Error::input("image dimensions must be nonzero"));
        }
        if pixels.len() != labels.len() * dim {
            return Err(Error::input(format!(
                "{} labels need {} pixels, got {}",
                labels.len(),
                labels.len() * dim,
                pixels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::input(format!("label {} out of range for {} classes", bad, classes)));
        }
        Ok(Dataset { name: name.into(), input, classes, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Pixels per image.
    pub fn image_dim(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.image_dim();
        &self.pixels[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Mean pixel value of image `i`.
    pub fn brightness(&self, i: usize) -> f64 {
        let img = self.image(i);
        img.iter().sum::<f64>() / img.len() as f64
    }

    pub fn brightnesses(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.brightness(i)).collect()
    }

    /// Gather `indices` into a [b, c, h, w] batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let d = self.image_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::input(format!("index {} out of range ({} images)", i, self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let (c, h, w) = self.input;
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let d = self.image_dim();
        let mut pixels = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::input(format!("index {} out of range ({} images)", i, self.len())));
            }
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(self.name.clone(), self.input, self.classes, pixels, labels)
    }

    /// Deterministic shuffle-and-cut into a (front, back) pair.
    pub fn split(&self, front_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&front_fraction) {
            return Err(Error::config("split fraction must lie in [0, 1]"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let cut = ((self.len() as f64) * front_fraction).round() as usize;
        Ok((self.subset(&idx[..cut])?, self.subset(&idx[cut..])?))
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Synthetic labeled corpus built for brightness-based attacks and quick
/// training runs.
///
/// Every class uses the same multiset of template values (a seeded
/// permutation of an even grid over [0, 1]), so class templates have
/// identical mean and per-image brightness is controlled solely by a
/// per-image offset: brightness varies continuously and independently of
/// the label, distinct images collide with probability zero, and pixel
/// values stay inside [0.05, 0.87] so no clipping ever distorts them.
pub fn synthetic_classes(
    input: (usize, usize, usize),
    classes: usize,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    let dim = input.0 * input.1 * input.2;
    if dim < 2 {
        return Err(Error::config("need at least 2 pixels per image"));
    }
    if classes < 2 {
        return Err(Error::config("need at least 2 classes"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let base: Vec<f64> = (0..dim).map(|i| i as f64 / (dim - 1) as f64).collect();
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let mut t = base.clone();
            t.shuffle(&mut rng);
            t
        })
        .collect();
    let offset = Uniform::new(0.05, 0.31);
    let noise = Uniform::new(0.0, 0.06);
    let mut pixels = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let beta = offset.sample(&mut rng);
        for p in 0..dim {
            pixels.push(0.5 * templates[c][p] + beta + noise.sample(&mut rng));
        }
        labels.push(c);
    }
    Dataset::new("synthetic", input, classes, pixels, labels)
}

/// Uniform random split of `n_items` indices into `n_clients` shards of
/// near-equal size.
pub fn partition_iid(n_items: usize, n_clients: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_clients == 0 {
        return Err(Error::config("need at least one client"));
    }
    let mut idx: Vec<usize> = (0..n_items).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let base = n_items / n_clients;
    let extra = n_items % n_clients;
    let mut out = Vec::with_capacity(n_clients);
    let mut pos = 0usize;
    for c in 0..n_clients {
        let take = base + usize::from(c < extra);
        out.push(idx[pos..pos + take].to_vec());
        pos += take;
    }
    Ok(out)
}

/// Label-skewed split. Client `c` favours class `c % classes`: a
/// `bias` fraction of its shard (rounded) is drawn from that class, the rest
/// from the other classes. `bias = 0` degenerates to a uniform split and
/// `bias = 1` gives single-class shards while the favoured pools last; when a
/// pool runs dry the draw falls back to whatever samples remain, so every
/// index is assigned exactly once.
pub fn partition_noniid(
    labels: &[usize],
    classes: usize,
    n_clients: usize,
    bias: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if n_clients == 0 {
        return Err(Error::config("need at least one client"));
    }
    if !(0.0..=1.0).contains(&bias) {
        return Err(Error::config(format!("bias {} outside [0, 1]", bias)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::input(format!("label {} out of range for {} classes", bad, classes)));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    // per-class pools, shuffled so pops are random draws without replacement
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        pools[l].push(i);
    }
    for p in pools.iter_mut() {
        p.shuffle(&mut rng);
    }
    let n = labels.len();
    let base = n / n_clients;
    let extra = n % n_clients;
    let sizes: Vec<usize> = (0..n_clients).map(|c| base + usize::from(c < extra)).collect();

    // phase 1: reserve every client's dominant quota before anyone draws
    // fillers, so late clients cannot find their class pool drained
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(n_clients);
    let mut quotas = Vec::with_capacity(n_clients);
    for (c, &size) in sizes.iter().enumerate() {
        let dominant = c % classes;
        let want_dom = ((bias * size as f64).round() as usize).min(size);
        quotas.push(want_dom);
        let mut shard = Vec::with_capacity(size);
        for _ in 0..want_dom {
            match pools[dominant].pop() {
                Some(i) => shard.push(i),
                None => break,
            }
        }
        out.push(shard);
    }

    // phase 2: fill remainders from the other classes, one draw per client
    // round-robin so pool exhaustion near the end is shared instead of
    // dumped on the last client; a dry draw falls back to whatever remains,
    // and a zero quota means no restriction at all
    loop {
        let mut progressed = false;
        for (c, &size) in sizes.iter().enumerate() {
            if out[c].len() >= size {
                continue;
            }
            let dominant = c % classes;
            let restrict = quotas[c] > 0;
            let allow_dominant =
                !restrict || pools.iter().enumerate().all(|(k, p)| k == dominant || p.is_empty());
            let total: usize = pools
                .iter()
                .enumerate()
                .map(|(k, p)| if k == dominant && !allow_dominant { 0 } else { p.len() })
                .sum();
            if total == 0 {
                continue;
            }
            let mut pick = Uniform::new(0, total).sample(&mut rng);
            for (k, pool) in pools.iter_mut().enumerate() {
                if k == dominant && !allow_dominant {
                    continue;
                }
                if pick < pool.len() {
                    let j = pool.len() - 1 - pick;
                    out[c].push(pool.swap_remove(j));
                    progressed = true;
                    break;
                }
                pick -= pool.len();
            }
        }
        if !progressed {
            break;
        }
    }
    for shard in out.iter_mut() {
        shard.shuffle(&mut rng);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_pixels_stay_inside_the_safe_band() {
        let ds = synthetic_classes((1, 8, 8), 4, 200, 5).unwrap();
        for i in 0..ds.len() {
            for &v in ds.image(i) {
                assert!((0.05..=0.87).contains(&v), "pixel {} escaped", v);
            }
        }
    }

    #[test]
    fn synthetic_brightness_is_continuous_and_class_free() {
        let ds = synthetic_classes((1, 8, 8), 4, 400, 9).unwrap();
        let b = ds.brightnesses();
        // no ties
        let mut sorted = b.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for w in sorted.windows(2) {
            assert!(w[1] > w[0]);
        }
        // per-class brightness means agree (templates share one multiset)
        let mut sums = vec![0.0; 4];
        let mut counts = vec![0usize; 4];
        for i in 0..ds.len() {
            sums[ds.label(i)] += b[i];
            counts[ds.label(i)] += 1;
        }
        let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, c)| s / *c as f64).collect();
        for m in &means {
            assert!((m - means[0]).abs() < 0.02, "class means drifted: {:?}", means);
        }
    }

    #[test]
    fn synthetic_is_deterministic_in_seed() {
        let a = synthetic_classes((1, 6, 6), 3, 60, 42).unwrap();
        let b = synthetic_classes((1, 6, 6), 3, 60, 42).unwrap();
        assert_eq!(a, b);
        let c = synthetic_classes((1, 6, 6), 3, 60, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn batch_gathers_rows_in_order() {
        let ds = synthetic_classes((1, 4, 4), 2, 10, 1).unwrap();
        let (x, y) = ds.batch(&[3, 0, 7]).unwrap();
        assert_eq!(x.shape(), &[3, 1, 4, 4]);
        assert_eq!(y, vec![ds.label(3), ds.label(0), ds.label(7)]);
        assert_eq!(&x.data()[..16], ds.image(3));
    }

    #[test]
    fn iid_partition_covers_every_index_once() {
        let parts = partition_iid(103, 7, 3).unwrap();
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        for p in &parts {
            assert!(p.len() == 14 || p.len() == 15);
        }
    }

    #[test]
    fn noniid_half_bias_gives_half_dominant_share() {
        let n = 10_000usize;
        let classes = 10usize;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let parts = partition_noniid(&labels, classes, 10, 0.5, 7).unwrap();
        // demand equals supply exactly, so the tail of the fill is forced;
        // round-robin keeps every client within a few samples of the target
        for (c, shard) in parts.iter().enumerate() {
            let dom = shard.iter().filter(|&&i| labels[i] == c % classes).count();
            let share = dom as f64 / shard.len() as f64;
            assert!((share - 0.5).abs() < 0.02, "client {} share {}", c, share);
        }
    }

    #[test]
    fn noniid_zero_bias_is_uniform_over_classes() {
        let n = 10_000usize;
        let classes = 10usize;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let parts = partition_noniid(&labels, classes, 10, 0.0, 11).unwrap();
        // chi-squared against uniform per client; 9 dof, 99.9th pct = 27.88
        for shard in &parts {
            let mut counts = vec![0f64; classes];
            for &i in shard {
                counts[labels[i]] += 1.0;
            }
            let expect = shard.len() as f64 / classes as f64;
            let chi2: f64 = counts.iter().map(|c| (c - expect).powi(2) / expect).sum();
            assert!(chi2 < 27.88, "chi2 {} too large for a uniform split", chi2);
        }
    }

    #[test]
    fn noniid_full_bias_gives_single_class_shards() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let parts = partition_noniid(&labels, 4, 4, 1.0, 2).unwrap();
        let mut seen = 0usize;
        for (c, shard) in parts.iter().enumerate() {
            assert_eq!(shard.len(), 25);
            assert!(shard.iter().all(|&i| labels[i] == c % 4));
            seen += shard.len();
        }
        assert_eq!(seen, 100);
    }

    #[test]
    fn noniid_partition_is_exhaustive_and_disjoint() {
        let labels: Vec<usize> = (0..517).map(|i| (i * 13) % 7).collect();
        let parts = partition_noniid(&labels, 7, 5, 0.8, 19).unwrap();
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..517).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_a_partition() {
        let ds = synthetic_classes((1, 4, 4), 2, 50, 3).unwrap();
        let (a, b) = ds.split(0.8, 1).unwrap();
        assert_eq!(a.len(), 40);
        assert_eq!(b.len(), 10);
    }
}

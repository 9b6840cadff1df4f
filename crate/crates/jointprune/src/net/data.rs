use crate::error::{Error, Result};
use crate::net::store::Tensor;
use crate::rng::DetRng;

/// Balanced synthetic classification set: single-channel square images with
/// one directional sinusoid pattern per class.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<usize>,
    pub spatial: usize,
    pub num_classes: usize,
}

/// A stack of images plus labels, ready for a forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let px = self.spatial * self.spatial;
        &self.images[i * px..(i + 1) * px]
    }

    /// Gather the given sample indices into one batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let px = self.spatial * self.spatial;
        let mut inputs = Tensor::zeros(indices.len(), 1, self.spatial, self.spatial);
        let mut labels = Vec::with_capacity(indices.len());
        for (b, &i) in indices.iter().enumerate() {
            inputs.data[b * px..(b + 1) * px].copy_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Batch { inputs, labels }
    }
}

fn gen_split(
    num_classes: usize,
    spatial: usize,
    per_class: usize,
    rng: &mut DetRng,
) -> Dataset {
    let px = spatial * spatial;
    let mut images = Vec::with_capacity(num_classes * per_class * px);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let theta = std::f64::consts::PI * class as f64 / num_classes as f64;
        let (ct, st) = (theta.cos(), theta.sin());
        let freq = 2.0 * std::f64::consts::TAU / spatial as f64;
        for _ in 0..per_class {
            let phase = 0.4 * rng.next_normal();
            let amp = 1.0 + 0.1 * rng.next_normal();
            for y in 0..spatial {
                for x in 0..spatial {
                    let proj = x as f64 * ct + y as f64 * st;
                    let signal = amp * (freq * proj + phase).sin();
                    images.push(signal + 0.15 * rng.next_normal());
                }
            }
            labels.push(class);
        }
    }
    Dataset {
        images,
        labels,
        spatial,
        num_classes,
    }
}

/// 4x area-pool an image (for the separability probe only).
fn pooled(img: &[f64], spatial: usize) -> Vec<f64> {
    let s = (spatial / 4).max(1);
    let block = spatial / s;
    let mut out = vec![0.0; s * s];
    for oy in 0..s {
        for ox in 0..s {
            let mut acc = 0.0;
            for dy in 0..block {
                for dx in 0..block {
                    acc += img[(oy * block + dy) * spatial + (ox * block + dx)];
                }
            }
            out[oy * s + ox] = acc / (block * block) as f64;
        }
    }
    out
}

/// Nearest-centroid accuracy of the val split against train-split centroids,
/// both at 4x reduced resolution.
fn probe_accuracy(train: &Dataset, val: &Dataset) -> f64 {
    let s = (train.spatial / 4).max(1);
    let dim = s * s;
    let mut centroids = vec![vec![0.0; dim]; train.num_classes];
    let mut counts = vec![0usize; train.num_classes];
    for i in 0..train.len() {
        let p = pooled(train.image(i), train.spatial);
        let c = train.label(i);
        for (acc, v) in centroids[c].iter_mut().zip(&p) {
            *acc += v;
        }
        counts[c] += 1;
    }
    for (c, count) in counts.iter().enumerate() {
        for v in centroids[c].iter_mut() {
            *v /= (*count).max(1) as f64;
        }
    }
    let mut correct = 0usize;
    for i in 0..val.len() {
        let p = pooled(val.image(i), val.spatial);
        let best = centroids
            .iter()
            .enumerate()
            .map(|(c, cen)| {
                let d2: f64 = cen.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum();
                (c, d2)
            })
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0;
        if best == val.label(i) {
            correct += 1;
        }
    }
    correct as f64 / val.len() as f64
}

/// Generate balanced train/val splits and verify they are learnable: a
/// nearest-centroid classifier on 4x-downsampled images must reach 80% val
/// accuracy. Regenerates with a fresh stream up to 5 times before giving up.
pub fn make_dataset(
    num_classes: usize,
    spatial: usize,
    train_per_class: usize,
    val_per_class: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if num_classes < 2 || spatial < 4 || train_per_class < 1 || val_per_class < 1 {
        return Err(Error::InvalidArgument(
            "dataset needs >= 2 classes, spatial >= 4 and nonzero split sizes".into(),
        ));
    }
    let attempts = 5;
    let mut best = 0.0f64;
    for attempt in 0..attempts {
        let mut rng = DetRng::new(seed, attempt as u64);
        let train = gen_split(num_classes, spatial, train_per_class, &mut rng);
        let val = gen_split(num_classes, spatial, val_per_class, &mut rng);
        let acc = probe_accuracy(&train, &val);
        if acc >= 0.8 {
            return Ok((train, val));
        }
        best = best.max(acc);
    }
    Err(Error::DatasetSeparability {
        attempts,
        best,
    })
}

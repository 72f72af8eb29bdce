//! Synthetic Gaussian-mixture classification data and IID device shards.

use std::io::{Read, Write};

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{orthonormal_rows, sample_gaussian, Label, RngStream, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vector>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vector::dim)
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Writes `feature_0..feature_{d-1},label` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let io = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("feature_{j}")).collect();
        header.push("label".into());
        out.write_record(&header).map_err(io)?;
        for (x, y) in self.features.iter().zip(&self.labels) {
            let mut row: Vec<String> = x.as_slice().iter().map(|v| format!("{v:?}")).collect();
            row.push(y.to_string());
            out.write_record(&row).map_err(io)?;
        }
        out.flush()
            .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))
    }

    pub fn read_csv<R: Read>(r: R, split: Split) -> Result<Self> {
        let io = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers().map_err(io)?.clone();
        let d = header.len().saturating_sub(1);
        let header_ok = header.len() >= 2
            && header.get(d) == Some("label")
            && (0..d).all(|j| header.get(j) == Some(format!("feature_{j}").as_str()));
        if !header_ok {
            return Err(Error::InvalidArgument(
                "csv header must be feature_0..feature_{d-1},label".into(),
            ));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(io)?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("bad feature {s:?}: {e}")))
            };
            let x = (0..d)
                .map(|j| parse(&rec[j]))
                .collect::<Result<Vec<f64>>>()?;
            features.push(Vector::try_new(x)?);
            labels.push(
                rec[d]
                    .parse::<usize>()
                    .map_err(|e| Error::InvalidArgument(format!("bad label {:?}: {e}", &rec[d])))?,
            );
        }
        Ok(Self {
            features,
            labels,
            split,
        })
    }
}

/// Parameters of the synthetic mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub n: usize,
    pub d_x: usize,
    pub classes: usize,
    /// Distance between any two class means, in units of the per-coordinate noise std.
    pub margin: f64,
}

/// Balanced Gaussian mixture split 80/20 per class.
///
/// Class means are `margin/√2` times orthonormal directions, so every pair of
/// means is exactly `margin` apart; within-class noise is `N(0, I)`.
pub fn generate(seed: u64, spec: &DataSpec) -> Result<(Dataset, Dataset)> {
    let DataSpec {
        n,
        d_x,
        classes,
        margin,
    } = *spec;
    if classes < 2 || n < 2 * classes || d_x < classes || !(margin >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "degenerate data parameters: n={n}, d_x={d_x}, classes={classes}, margin={margin}"
        )));
    }
    let root = RngStream::new(seed).child("data");
    let means = if margin > 0.0 {
        orthonormal_rows(&root.child("means"), classes, d_x, margin / 2f64.sqrt())?
    } else {
        crate::numerics::Matrix::zeros(classes, d_x)
    };
    let noise = sample_gaussian(&root.child("noise"), n, d_x, 1.0)?;

    let mut train = Dataset {
        features: Vec::new(),
        labels: Vec::new(),
        split: Split::Train,
    };
    let mut test = Dataset {
        features: Vec::new(),
        labels: Vec::new(),
        split: Split::Test,
    };
    let mut by_class: Vec<Vec<Vector>> = vec![Vec::new(); classes];
    for i in 0..n {
        let y = i % classes;
        let x: Vec<f64> = noise
            .row(i)
            .iter()
            .zip(means.row(y))
            .map(|(e, m)| e + m)
            .collect();
        by_class[y].push(Vector::new(x));
    }
    for (y, xs) in by_class.into_iter().enumerate() {
        let n_test = ((xs.len() as f64) * 0.2)
            .round()
            .clamp(1.0, (xs.len() - 1) as f64) as usize;
        let n_train = xs.len() - n_test;
        for (j, x) in xs.into_iter().enumerate() {
            let ds = if j < n_train { &mut train } else { &mut test };
            ds.features.push(x);
            ds.labels.push(y);
        }
    }
    Ok((train, test))
}

/// Indices into the training set held by each device.
pub type Shard = Vec<usize>;

/// Gives each of `k_devices` a class-balanced sample of `⌊fraction·n⌋`
/// examples, without replacement inside a shard and independently across
/// shards.
pub fn partition(
    ds: &Dataset,
    classes: usize,
    k_devices: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<Shard>> {
    if k_devices == 0 || !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need k_devices >= 1 and fraction in (0,1], got {k_devices}, {fraction}"
        )));
    }
    let size = (fraction * ds.len() as f64 + 1e-9).floor() as usize;
    if size == 0 {
        return Err(Error::InvalidArgument(
            "partition would produce empty shards".into(),
        ));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        pools[y].push(i);
    }
    let root = RngStream::new(seed).child("partition");
    let mut shards = Vec::with_capacity(k_devices);
    for k in 0..k_devices {
        let mut g = root.device(k).generator();
        let class_offset = k % classes;
        let mut shard = Vec::with_capacity(size);
        let mut quotas = vec![size / classes; classes];
        // Remainder rotates over classes so the total stays balanced across devices.
        for j in 0..size % classes {
            quotas[(class_offset + j) % classes] += 1;
        }
        // Fall back to other classes when a pool is smaller than its quota.
        let mut deficit = 0;
        for (c, quota) in quotas.iter_mut().enumerate() {
            if *quota > pools[c].len() {
                deficit += *quota - pools[c].len();
                *quota = pools[c].len();
            }
        }
        for c in 0..classes {
            let extra = (pools[c].len() - quotas[c]).min(deficit);
            quotas[c] += extra;
            deficit -= extra;
        }
        for (c, &quota) in quotas.iter().enumerate() {
            let picked: Vec<usize> = pools[c].choose_multiple(&mut g, quota).copied().collect();
            shard.extend(picked);
        }
        shard.sort_unstable();
        shards.push(shard);
    }
    Ok(shards)
}

/// Stream for per-round minibatch selection on a device.
pub fn batch_stream(seed: u64, round: usize, device: usize) -> RngStream {
    RngStream::new(seed)
        .child("batch")
        .round(round)
        .device(device)
        .child(Label::Purpose("sample".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(margin: f64) -> DataSpec {
        DataSpec {
            n: 400,
            d_x: 8,
            classes: 4,
            margin,
        }
    }

    #[test]
    fn generation_is_deterministic_and_stratified() {
        let a = generate(1, &spec(3.0)).unwrap();
        let b = generate(1, &spec(3.0)).unwrap();
        assert_eq!(a, b);
        let (train, test) = a;
        assert_eq!(train.len() + test.len(), 400);
        assert_eq!(train.len(), 320);
        assert!(train.class_counts(4).iter().all(|&c| c == 80));
        assert!(test.class_counts(4).iter().all(|&c| c == 20));
    }

    #[test]
    fn tiny_sets_keep_every_class_in_both_splits() {
        let (train, test) = generate(
            0,
            &DataSpec {
                n: 8,
                d_x: 4,
                classes: 4,
                margin: 1.0,
            },
        )
        .unwrap();
        assert!(train.class_counts(4).iter().all(|&c| c >= 1));
        assert!(test.class_counts(4).iter().all(|&c| c >= 1));
    }

    #[test]
    fn degenerate_parameters_rejected() {
        assert!(generate(
            0,
            &DataSpec {
                n: 7,
                d_x: 4,
                classes: 4,
                margin: 1.0
            }
        )
        .is_err());
        assert!(generate(
            0,
            &DataSpec {
                n: 100,
                d_x: 2,
                classes: 4,
                margin: 1.0
            }
        )
        .is_err());
    }

    #[test]
    fn full_fraction_single_device_is_the_train_set() {
        let (train, _) = generate(2, &spec(1.0)).unwrap();
        let shards = partition(&train, 4, 1, 1.0, 9).unwrap();
        assert_eq!(shards[0], (0..train.len()).collect::<Vec<_>>());
    }

    #[test]
    fn shards_are_balanced() {
        let (train, _) = generate(
            2,
            &DataSpec {
                n: 2000,
                d_x: 16,
                classes: 4,
                margin: 3.0,
            },
        )
        .unwrap();
        let shards = partition(&train, 4, 15, 0.05, 11).unwrap();
        let size = (0.05 * train.len() as f64).floor() as usize;
        for shard in &shards {
            assert_eq!(shard.len(), size);
            let mut counts = [0usize; 4];
            for &i in shard {
                counts[train.labels[i]] += 1;
            }
            let exact = size as f64 / 4.0;
            assert!(
                counts.iter().all(|&c| (c as f64 - exact).abs() <= 1.0),
                "{counts:?}"
            );
            let mut dedup = shard.clone();
            dedup.dedup();
            assert_eq!(dedup.len(), shard.len());
        }
        let other = partition(&train, 4, 15, 0.05, 12).unwrap();
        assert_ne!(shards, other);
    }

    #[test]
    fn csv_round_trip() {
        let (train, _) = generate(
            3,
            &DataSpec {
                n: 16,
                d_x: 4,
                classes: 2,
                margin: 2.0,
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        train.write_csv(&mut buf).unwrap();
        let header = String::from_utf8(buf.clone()).unwrap();
        assert!(header.starts_with("feature_0,feature_1,feature_2,feature_3,label\n"));
        let back = Dataset::read_csv(buf.as_slice(), Split::Train).unwrap();
        assert_eq!(back, train);
    }
}

//! Synthetic multi-hospital classification data.
//!
//! Each client draws features from two class-conditional Gaussians,
//!
//! ```text
//! x = offset_k + (2y - 1) * (class_sep / 2) * u + noise_scale * N(0, I)
//! ```
//!
//! where `u` is a unit direction shared by every client and `offset_k ~
//! N(0, client_shift^2 I)` is a per-client perturbation that models
//! inter-hospital distribution shift. Class counts per client are exact:
//! `round(size * label_frac)` positives.
//!
//! The train/test split is stratified: each class contributes
//! `round(0.8 * count)` examples to train, so both labels reach the training
//! set whenever both are present, and `|train|` stays within one example of
//! 80%.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};

pub const TRAIN_FRACTION: f64 = 0.8;
pub const MIN_CLIENT_SIZE: usize = 10;

/// Client sizes proportional to the slide counts of the six TCGA NSCLC sites.
pub const DEFAULT_SIZES: [usize; 6] = [267, 211, 207, 199, 223, 110];
/// Class-1 fractions chosen to give a visibly non-IID label mix.
pub const DEFAULT_LABEL_FRACS: [f64; 6] = [0.55, 0.40, 0.65, 0.50, 0.30, 0.70];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    /// 1-based.
    pub client_id: usize,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sizes: Vec<usize>,
    pub label_fracs: Vec<f64>,
    pub input_dim: usize,
    /// Distance between the two class means.
    pub class_sep: f64,
    /// Per-coordinate standard deviation of the within-class noise.
    pub noise_scale: f64,
    /// Per-coordinate standard deviation of each client's mean offset.
    pub client_shift: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sizes: DEFAULT_SIZES.to_vec(),
            label_fracs: DEFAULT_LABEL_FRACS.to_vec(),
            input_dim: 128,
            class_sep: 36.0,
            noise_scale: 20.0,
            client_shift: 5.0,
            seed: 2023,
        }
    }
}

impl DataConfig {
    /// The default profile stretched or truncated to `k` clients by cycling.
    pub fn with_clients(k: usize) -> Self {
        let base = Self::default();
        Self {
            sizes: (0..k).map(|i| DEFAULT_SIZES[i % 6]).collect(),
            label_fracs: (0..k).map(|i| DEFAULT_LABEL_FRACS[i % 6]).collect(),
            ..base
        }
    }

    pub fn clients(&self) -> usize {
        self.sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::config("data.sizes", "at least one client is required"));
        }
        if self.label_fracs.len() != self.sizes.len() {
            return Err(Error::config(
                "data.label_fracs",
                format!(
                    "has {} entries but data.sizes has {}",
                    self.label_fracs.len(),
                    self.sizes.len()
                ),
            ));
        }
        if let Some(s) = self.sizes.iter().find(|&&s| s < MIN_CLIENT_SIZE) {
            return Err(Error::config(
                "data.sizes",
                format!("every client needs at least {MIN_CLIENT_SIZE} examples, found {s}"),
            ));
        }
        if let Some(f) = self.label_fracs.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::config("data.label_fracs", format!("{f} is outside [0, 1]")));
        }
        if self.input_dim == 0 {
            return Err(Error::config("data.input_dim", "must be positive"));
        }
        for (field, v) in [
            ("data.class_sep", self.class_sep),
            ("data.noise_scale", self.noise_scale),
            ("data.client_shift", self.client_shift),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(field, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

fn gaussian_vec<R: Rng>(rng: &mut R, dim: usize, sd: f64) -> Vec<f64> {
    (0..dim).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Generates every client's dataset. Deterministic in `cfg.seed`.
pub fn generate_clients(cfg: &DataConfig) -> Result<Vec<ClientDataset>> {
    cfg.validate()?;
    let d = cfg.input_dim;

    let mut dir_rng = substream(cfg.seed, Purpose::DataFeatures, 0, 0);
    let mut direction = gaussian_vec(&mut dir_rng, d, 1.0);
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        direction[0] = 1.0;
    } else {
        direction.iter_mut().for_each(|v| *v /= norm);
    }
    let half_sep = cfg.class_sep / 2.0;

    let mut out = Vec::with_capacity(cfg.clients());
    for (i, (&size, &frac)) in cfg.sizes.iter().zip(&cfg.label_fracs).enumerate() {
        let client_id = i + 1;
        let mut rng = substream(cfg.seed, Purpose::DataFeatures, client_id as u64, 0);
        let offset = gaussian_vec(&mut rng, d, cfg.client_shift);
        let positives = (size as f64 * frac).round() as usize;

        let mut by_class: [Vec<Example>; 2] = [Vec::new(), Vec::new()];
        for n in 0..size {
            let label = u8::from(n < positives);
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let noise = gaussian_vec(&mut rng, d, cfg.noise_scale);
            let features = (0..d)
                .map(|j| offset[j] + sign * half_sep * direction[j] + noise[j])
                .collect();
            by_class[usize::from(label)].push(Example { features, label });
        }

        let mut split_rng = substream(cfg.seed, Purpose::DataSplit, client_id as u64, 0);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for mut class in by_class {
            class.shuffle(&mut split_rng);
            let n_train = (class.len() as f64 * TRAIN_FRACTION).round() as usize;
            let rest = class.split_off(n_train);
            train.extend(class);
            test.extend(rest);
        }
        train.shuffle(&mut split_rng);
        test.shuffle(&mut split_rng);
        out.push(ClientDataset {
            client_id,
            train,
            test,
        });
    }
    Ok(out)
}

/// Writes `clients` as CSV.
///
/// Header: `client_id,split,label,x0,...,x{d-1}`; one row per example,
/// `split` is `train` or `test`. Floats use Rust's shortest round-trip
/// representation, so [`read_csv`] recovers identical values.
pub fn write_csv<W: Write>(clients: &[ClientDataset], mut out: W) -> Result<()> {
    let dim = clients
        .iter()
        .flat_map(|c| c.train.iter().chain(&c.test))
        .map(|e| e.features.len())
        .next()
        .unwrap_or(0);
    let mut header = String::from("client_id,split,label");
    for j in 0..dim {
        write!(header, ",x{j}").unwrap();
    }
    writeln!(out, "{header}")?;
    for c in clients {
        for (split, rows) in [("train", &c.train), ("test", &c.test)] {
            for e in rows.iter() {
                let mut line = format!("{},{split},{}", c.client_id, e.label);
                for v in &e.features {
                    write!(line, ",{v}").unwrap();
                }
                writeln!(out, "{line}")?;
            }
        }
    }
    Ok(())
}

/// Reads the format produced by [`write_csv`]. Client ids must be 1..=K
/// with no gaps.
pub fn read_csv<R: BufRead>(input: R) -> Result<Vec<ClientDataset>> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or(Error::Parse {
            line: 1,
            reason: "missing header".into(),
        })??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[..3] != ["client_id", "split", "label"] {
        return Err(Error::Parse {
            line: 1,
            reason: "expected header client_id,split,label,x0,...".into(),
        });
    }
    let dim = cols.len() - 3;
    let mut clients: Vec<ClientDataset> = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Parse {
            line: line_no,
            reason,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 3 {
            return Err(bad(format!("expected {} fields, found {}", dim + 3, fields.len())));
        }
        let client_id: usize = fields[0]
            .parse()
            .map_err(|_| bad(format!("bad client_id `{}`", fields[0])))?;
        let label: u8 = match fields[2] {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("label must be 0 or 1, found `{other}`"))),
        };
        let features = fields[3..]
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| bad("non-numeric or non-finite feature".into()))?;
        if client_id == 0 {
            return Err(bad("client ids start at 1".into()));
        }
        while clients.len() < client_id {
            clients.push(ClientDataset {
                client_id: clients.len() + 1,
                train: Vec::new(),
                test: Vec::new(),
            });
        }
        let example = Example { features, label };
        let c = &mut clients[client_id - 1];
        match fields[1] {
            "train" => c.train.push(example),
            "test" => c.test.push(example),
            other => return Err(bad(format!("split must be train or test, found `{other}`"))),
        }
    }
    if let Some(c) = clients.iter().find(|c| c.train.is_empty()) {
        return Err(Error::usage(format!("client {} has no training examples", c.client_id)));
    }
    Ok(clients)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(size: usize, frac: f64) -> DataConfig {
        DataConfig {
            sizes: vec![size],
            label_fracs: vec![frac],
            ..DataConfig::default()
        }
    }

    fn positives(rows: &[Example]) -> usize {
        rows.iter().filter(|e| e.label == 1).count()
    }

    #[test]
    fn zero_fraction_gives_all_negatives() {
        let c = &generate_clients(&single(50, 0.0)).unwrap()[0];
        assert_eq!(positives(&c.train) + positives(&c.test), 0);
        let c = &generate_clients(&single(50, 1.0)).unwrap()[0];
        assert_eq!(positives(&c.train) + positives(&c.test), 50);
    }

    #[test]
    fn hundred_examples_split_80_20() {
        let c = &generate_clients(&single(100, 0.5)).unwrap()[0];
        assert_eq!((c.train.len(), c.test.len()), (80, 20));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = DataConfig::default();
        assert_eq!(generate_clients(&cfg).unwrap(), generate_clients(&cfg).unwrap());
        let other = DataConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_clients(&cfg).unwrap(), generate_clients(&other).unwrap());
    }

    #[test]
    fn class_counts_and_split_ratio() {
        let cfg = DataConfig {
            sizes: vec![10, 11, 37, 267, 110, 13],
            label_fracs: vec![0.1, 0.95, 0.33, 0.55, 0.7, 0.5],
            ..DataConfig::default()
        };
        for (c, (&size, &frac)) in generate_clients(&cfg)
            .unwrap()
            .iter()
            .zip(cfg.sizes.iter().zip(&cfg.label_fracs))
        {
            assert_eq!(c.len(), size);
            let pos = positives(&c.train) + positives(&c.test);
            assert_eq!(pos, (size as f64 * frac).round() as usize);
            let expected_train = 0.8 * size as f64;
            assert!((c.train.len() as f64 - expected_train).abs() <= 1.0);
            assert!(positives(&c.train) > 0 && positives(&c.train) < c.train.len());
            assert!(c.train.iter().all(|e| e.features.len() == cfg.input_dim));
        }
    }

    #[test]
    fn split_is_a_partition_of_the_generated_set() {
        let c = &generate_clients(&single(57, 0.4)).unwrap()[0];
        let mut all: Vec<Vec<u64>> = c
            .train
            .iter()
            .chain(&c.test)
            .map(|e| e.features.iter().map(|v| v.to_bits()).collect())
            .collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n, "train and test overlap");
        assert_eq!(n, 57);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cases = [
            (DataConfig { sizes: vec![9], label_fracs: vec![0.5], ..DataConfig::default() }, "data.sizes"),
            (single(20, 1.5), "data.label_fracs"),
            (DataConfig { label_fracs: vec![0.5], ..DataConfig::default() }, "data.label_fracs"),
            (DataConfig { input_dim: 0, ..DataConfig::default() }, "data.input_dim"),
            (DataConfig { noise_scale: -1.0, ..DataConfig::default() }, "data.noise_scale"),
        ];
        for (cfg, field) in cases {
            match generate_clients(&cfg) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error for {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let cfg = DataConfig {
            sizes: vec![12, 15],
            label_fracs: vec![0.5, 0.2],
            input_dim: 3,
            ..DataConfig::default()
        };
        let clients = generate_clients(&cfg).unwrap();
        let mut buf = Vec::new();
        write_csv(&clients, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("client_id,split,label,x0,x1,x2\n"));
        assert_eq!(read_csv(&buf[..]).unwrap(), clients);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let text = "client_id,split,label,x0\n1,train,0,0.5\n1,train,2,0.1\n";
        assert_eq!(
            read_csv(text.as_bytes()).unwrap_err(),
            Error::Parse {
                line: 3,
                reason: "label must be 0 or 1, found `2`".into()
            }
        );
        assert!(matches!(read_csv("a,b\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }
}

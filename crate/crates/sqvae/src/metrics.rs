//! Evaluation metrics shared by the training loop and reporting, plus the
//! metric-row record that training emits and the CSV layer serializes.

use crate::{Error, Result};

/// One reported row: per-epoch (or per-step) loss terms and evaluation
/// metrics. Optional fields stay empty for model kinds they do not apply
/// to; everything present must be finite.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub epoch: u64,
    pub step: u64,
    pub loss_total: f64,
    pub loss_recon: f64,
    pub loss_reg: f64,
    pub loss_negent: f64,
    pub loss_decvar: f64,
    pub loss_const: f64,
    pub val_loss: Option<f64>,
    pub sigma2: Option<f64>,
    pub sigma2_phi: Option<f64>,
    pub kappa: Option<f64>,
    pub kappa_phi: Option<f64>,
    pub perplexity: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub test_mse: Option<f64>,
    pub pixel_error: Option<f64>,
    pub miou: Option<f64>,
    pub tau: f64,
}

/// Column order of the versioned CSV schema.
pub const METRIC_COLUMNS: &[&str] = &[
    "run_id",
    "epoch",
    "step",
    "loss_total",
    "loss_recon",
    "loss_reg",
    "loss_negent",
    "loss_decvar",
    "loss_const",
    "val_loss",
    "sigma2",
    "sigma2_phi",
    "kappa",
    "kappa_phi",
    "perplexity",
    "mean_entropy",
    "test_mse",
    "pixel_error",
    "miou",
    "tau",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Format(format!("bad float field {s:?}")))
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        debug_assert!(!self.run_id.contains(','));
        [
            self.run_id.clone(),
            self.epoch.to_string(),
            self.step.to_string(),
            self.loss_total.to_string(),
            self.loss_recon.to_string(),
            self.loss_reg.to_string(),
            self.loss_negent.to_string(),
            self.loss_decvar.to_string(),
            self.loss_const.to_string(),
            fmt_opt(self.val_loss),
            fmt_opt(self.sigma2),
            fmt_opt(self.sigma2_phi),
            fmt_opt(self.kappa),
            fmt_opt(self.kappa_phi),
            fmt_opt(self.perplexity),
            fmt_opt(self.mean_entropy),
            fmt_opt(self.test_mse),
            fmt_opt(self.pixel_error),
            fmt_opt(self.miou),
            self.tau.to_string(),
        ]
        .join(",")
    }

    pub fn parse_csv_line(line: &str) -> Result<MetricRow> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != METRIC_COLUMNS.len() {
            return Err(Error::Format(format!(
                "metric row has {} fields, expected {}",
                fields.len(),
                METRIC_COLUMNS.len()
            )));
        }
        let f64_at = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("bad float field {:?}", fields[i])))
        };
        let u64_at = |i: usize| -> Result<u64> {
            fields[i]
                .parse::<u64>()
                .map_err(|_| Error::Format(format!("bad integer field {:?}", fields[i])))
        };
        Ok(MetricRow {
            run_id: fields[0].to_string(),
            epoch: u64_at(1)?,
            step: u64_at(2)?,
            loss_total: f64_at(3)?,
            loss_recon: f64_at(4)?,
            loss_reg: f64_at(5)?,
            loss_negent: f64_at(6)?,
            loss_decvar: f64_at(7)?,
            loss_const: f64_at(8)?,
            val_loss: parse_opt(fields[9])?,
            sigma2: parse_opt(fields[10])?,
            sigma2_phi: parse_opt(fields[11])?,
            kappa: parse_opt(fields[12])?,
            kappa_phi: parse_opt(fields[13])?,
            perplexity: parse_opt(fields[14])?,
            mean_entropy: parse_opt(fields[15])?,
            test_mse: parse_opt(fields[16])?,
            pixel_error: parse_opt(fields[17])?,
            miou: parse_opt(fields[18])?,
            tau: f64_at(19)?,
        })
    }
}

/// Mean over all entries of the squared difference.
pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape {
            op: "mse",
            detail: format!("{} vs {} entries", x.len(), y.len()),
        });
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// Percentage of positions where the class labels disagree.
pub fn pixel_error(labels: &[usize], predictions: &[usize]) -> Result<f64> {
    if labels.len() != predictions.len() || labels.is_empty() {
        return Err(Error::Shape {
            op: "pixel_error",
            detail: format!("{} vs {} entries", labels.len(), predictions.len()),
        });
    }
    let wrong = labels.iter().zip(predictions).filter(|(a, b)| a != b).count();
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

/// Mean class-wise intersection over union. Classes absent from both maps
/// are excluded from the mean (the usual segmentation convention).
pub fn miou(labels: &[usize], predictions: &[usize], classes: usize) -> Result<f64> {
    if labels.len() != predictions.len() {
        return Err(Error::Shape {
            op: "miou",
            detail: format!("{} vs {} entries", labels.len(), predictions.len()),
        });
    }
    let mut intersection = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&l, &p) in labels.iter().zip(predictions) {
        if l >= classes || p >= classes {
            return Err(Error::Contract(format!(
                "class out of range: label {l}, prediction {p}, classes {classes}"
            )));
        }
        if l == p {
            intersection[l] += 1;
            union[l] += 1;
        } else {
            union[l] += 1;
            union[p] += 1;
        }
    }
    let mut total = 0.0;
    let mut present = 0usize;
    for c in 0..classes {
        if union[c] > 0 {
            total += intersection[c] as f64 / union[c] as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::Contract("miou of empty maps".into()));
    }
    Ok(total / present as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[0.5, 0.2], &[0.5, 0.2]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!((mse(&[0.0, 1.0], &[0.5, 0.5]).unwrap() - 0.25).abs() < 1e-15);
        assert!(mse(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn pixel_error_examples() {
        assert_eq!(pixel_error(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(pixel_error(&[0, 0], &[1, 1]).unwrap(), 100.0);
        assert_eq!(pixel_error(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 25.0);
    }

    #[test]
    fn miou_examples() {
        assert_eq!(miou(&[0, 1, 1], &[0, 1, 1], 2).unwrap(), 1.0);
        // Complete swap of two classes: both IoUs are 0.
        assert_eq!(miou(&[0, 0, 1, 1], &[1, 1, 0, 0], 2).unwrap(), 0.0);
        // IoU_0 = 1/2, IoU_1 = 2/3 -> mean 7/12.
        let got = miou(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert!((got - 7.0 / 12.0).abs() < 1e-12);
        // A class absent from both maps does not drag the mean down.
        let got = miou(&[0, 0, 1, 1], &[0, 1, 1, 1], 5).unwrap();
        assert!((got - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn miou_one_iff_identical_and_pixel_error_zero_iff_identical() {
        let a = vec![0, 1, 2, 1, 0];
        let b = vec![0, 1, 2, 2, 0];
        assert!(miou(&a, &a, 3).unwrap() == 1.0);
        assert!(miou(&a, &b, 3).unwrap() < 1.0);
        assert_eq!(pixel_error(&a, &a).unwrap(), 0.0);
        assert!(pixel_error(&a, &b).unwrap() > 0.0);
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_equivariant(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..40),
            swap_seed in 0u64..1000
        ) {
            let labels: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let preds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let mut rng = crate::rng::Rng::from_seed(swap_seed);
            let perm = rng.permutation(labels.len());
            let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let pp: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();

            let e1 = pixel_error(&labels, &preds).unwrap();
            let e2 = pixel_error(&pl, &pp).unwrap();
            prop_assert!((e1 - e2).abs() < 1e-12);

            let m1 = miou(&labels, &preds, 4).unwrap();
            let m2 = miou(&pl, &pp, 4).unwrap();
            prop_assert!((m1 - m2).abs() < 1e-12);

            let xf: Vec<f64> = labels.iter().map(|&v| v as f64).collect();
            let yf: Vec<f64> = preds.iter().map(|&v| v as f64).collect();
            let pxf: Vec<f64> = pl.iter().map(|&v| v as f64).collect();
            let pyf: Vec<f64> = pp.iter().map(|&v| v as f64).collect();
            let s1 = mse(&xf, &yf).unwrap();
            let s2 = mse(&pxf, &pyf).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-12);
        }
    }
}

//! Reconstruction and sparsity metrics.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::models::Sae;
use crate::numeric::{dot, norm, Matrix};

fn same_shape(op: &'static str, x: &Matrix, recon: &Matrix) -> Result<()> {
    if x.shape() != recon.shape() {
        return Err(Error::shape(op, x.shape(), recon.shape()));
    }
    Ok(())
}

/// `Σ‖x - x̂‖² / Σ‖x‖²` over the whole set.
pub fn nmse(x: &Matrix, recon: &Matrix) -> Result<f64> {
    same_shape("nmse", x, recon)?;
    let denom = x.frobenius_sq();
    if denom == 0.0 {
        return Err(Error::invalid("nmse is undefined for an all-zero input"));
    }
    Ok(x.sub(recon)?.frobenius_sq() / denom)
}

/// `Σ‖x - x̂‖² / Σ‖x - mean(x)‖²`, the mean taken per column.
pub fn fvu(x: &Matrix, recon: &Matrix) -> Result<f64> {
    same_shape("fvu", x, recon)?;
    let n = x.rows() as f64;
    let mean: Vec<f64> = x.sum_rows().into_iter().map(|s| s / n).collect();
    let variance: f64 = x
        .row_iter()
        .map(|row| {
            row.iter()
                .zip(&mean)
                .map(|(v, m)| (v - m).powi(2))
                .sum::<f64>()
        })
        .sum();
    if !(variance > 0.0) {
        return Err(Error::invalid("fvu is undefined for zero-variance data"));
    }
    Ok(x.sub(recon)?.frobenius_sq() / variance)
}

/// Mean count of entries with `|code| > threshold` per row.
pub fn mean_l0(codes: &Matrix, threshold: f64) -> f64 {
    if codes.rows() == 0 {
        return 0.0;
    }
    let active = codes
        .as_slice()
        .iter()
        .filter(|v| v.abs() > threshold)
        .count();
    active as f64 / codes.rows() as f64
}

/// Mean per-row cosine between `x` and `x̂`; rows where either side is zero
/// are skipped.
pub fn cosine_sim(x: &Matrix, recon: &Matrix) -> Result<f64> {
    same_shape("cosine_sim", x, recon)?;
    let mut total = 0.0;
    let mut rows = 0usize;
    for (a, b) in x.row_iter().zip(recon.row_iter()) {
        let denom = norm(a) * norm(b);
        if denom > 0.0 {
            total += dot(a, b) / denom;
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(Error::invalid(
            "cosine similarity needs a row with nonzero norms",
        ));
    }
    Ok(total / rows as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryScore {
    pub mean_max_cos: f64,
    /// Ground-truth directions matched above [`RECOVERY_MATCH_THRESHOLD`].
    pub matched: usize,
}

pub const RECOVERY_MATCH_THRESHOLD: f64 = 0.9;

/// For each ground-truth column, the largest absolute cosine against any
/// learned column. Both inputs hold one direction per column.
pub fn recovery_score(learned: &Matrix, truth: &Matrix) -> Result<RecoveryScore> {
    if learned.rows() != truth.rows() {
        return Err(Error::shape(
            "recovery_score",
            learned.shape(),
            truth.shape(),
        ));
    }
    if truth.cols() == 0 {
        return Err(Error::invalid(
            "recovery_score needs at least one ground-truth direction",
        ));
    }
    let unit = |m: &Matrix| -> Vec<Vec<f64>> {
        (0..m.cols())
            .map(|c| {
                let col = m.column(c);
                let n = norm(&col);
                if n > 0.0 {
                    col.iter().map(|v| v / n).collect()
                } else {
                    col
                }
            })
            .collect()
    };
    let learned = unit(learned);
    let truth = unit(truth);
    let mut total = 0.0;
    let mut matched = 0;
    for t in &truth {
        let best = learned.iter().map(|l| dot(l, t).abs()).fold(0.0, f64::max);
        total += best;
        if best > RECOVERY_MATCH_THRESHOLD {
            matched += 1;
        }
    }
    Ok(RecoveryScore {
        mean_max_cos: total / truth.len() as f64,
        matched,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KStar {
    pub mean: f64,
    pub rounded: usize,
}

/// Average support size per sample over a stream of code batches.
pub fn estimate_k_star<'a, I>(batches: I) -> Result<KStar>
where
    I: IntoIterator<Item = &'a Matrix>,
{
    let mut rows = 0usize;
    let mut active = 0usize;
    for b in batches {
        rows += b.rows();
        active += b.as_slice().iter().filter(|v| **v != 0.0).count();
    }
    if rows == 0 {
        return Err(Error::invalid("K* needs at least one sample"));
    }
    let mean = active as f64 / rows as f64;
    Ok(KStar {
        mean,
        rounded: mean.round() as usize,
    })
}

/// Counts of samples by number of active concepts. Bucket `i` holds
/// samples with exactly `i` active concepts; the last bucket also absorbs
/// anything larger.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(buckets: usize) -> Self {
        Self {
            counts: vec![0; buckets.max(1)],
        }
    }

    pub fn add_codes(&mut self, codes: &Matrix) {
        let last = self.counts.len() - 1;
        for row in codes.row_iter() {
            let l0 = row.iter().filter(|v| **v != 0.0).count();
            self.counts[l0.min(last)] += 1;
        }
    }

    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if self.counts.len() != other.counts.len() {
            return Err(Error::invalid(format!(
                "cannot merge histograms with {} and {} buckets",
                self.counts.len(),
                other.counts.len()
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("active_concepts\tsamples\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{i}\t{c}\n"));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut counts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 && line.starts_with("active_concepts") || line.trim().is_empty() {
                continue;
            }
            let bad = || Error::invalid(format!("histogram line {}: `{line}`", i + 1));
            let (b, c) = line.split_once('\t').ok_or_else(bad)?;
            let b: usize = b.parse().map_err(|_| bad())?;
            if b != counts.len() {
                return Err(bad());
            }
            counts.push(c.parse().map_err(|_| bad())?);
        }
        if counts.is_empty() {
            return Err(Error::invalid("empty histogram"));
        }
        Ok(Self { counts })
    }
}

pub fn activation_histogram<'a, I>(batches: I, buckets: usize) -> Histogram
where
    I: IntoIterator<Item = &'a Matrix>,
{
    let mut h = Histogram::new(buckets);
    for b in batches {
        h.add_codes(b);
    }
    h
}

/// Fraction of samples on which each concept fires.
pub fn concept_frequencies<'a, I>(batches: I, m: usize) -> Vec<f64>
where
    I: IntoIterator<Item = &'a Matrix>,
{
    let mut fired = vec![0u64; m];
    let mut rows = 0u64;
    for b in batches {
        rows += b.rows() as u64;
        for row in b.row_iter() {
            for (f, v) in fired.iter_mut().zip(row) {
                if *v != 0.0 {
                    *f += 1;
                }
            }
        }
    }
    fired
        .into_iter()
        .map(|f| {
            if rows == 0 {
                0.0
            } else {
                f as f64 / rows as f64
            }
        })
        .collect()
}

pub const REPORT_FORMAT: &str = "report_v1";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub samples: usize,
    pub nmse: f64,
    pub fvu: f64,
    pub mean_l0: f64,
    pub cosine_sim: f64,
    /// Concepts that never fired on the evaluation set, as a fraction of M.
    pub dead_fraction: f64,
    pub k_star: KStar,
    pub recovery: Option<RecoveryScore>,
    pub histogram: Histogram,
    /// Per-concept firing frequency.
    pub concept_frequency: Vec<f64>,
}

/// Runs `model` over `x` in batches of `batch_size` and gathers every metric.
pub fn evaluate<S: Sae + ?Sized>(
    model: &S,
    x: &Matrix,
    batch_size: usize,
    truth: Option<&Matrix>,
) -> Result<MetricsReport> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let m = model.config().m;
    let mut codes = Vec::new();
    let mut recons = Vec::new();
    let mut start = 0;
    while start < x.rows() {
        let end = (start + batch_size).min(x.rows());
        let fwd = model.forward(&x.slice_rows(start, end))?;
        if !fwd.recon.is_finite() || !fwd.codes.is_finite() {
            return Err(Error::NonFinite("evaluation forward pass"));
        }
        codes.push(fwd.codes);
        recons.push(fwd.recon);
        start = end;
    }
    let recon = Matrix::vstack(&recons)?;
    let all_codes = Matrix::vstack(&codes)?;
    let concept_frequency = concept_frequencies(&codes, m);
    let dead = concept_frequency.iter().filter(|f| **f == 0.0).count();
    let recovery = match truth {
        Some(t) => Some(recovery_score(&model.dictionary()?, t)?),
        None => None,
    };
    Ok(MetricsReport {
        samples: x.rows(),
        nmse: nmse(x, &recon)?,
        fvu: fvu(x, &recon)?,
        mean_l0: mean_l0(&all_codes, 0.0),
        cosine_sim: cosine_sim(x, &recon)?,
        dead_fraction: dead as f64 / m as f64,
        k_star: estimate_k_star(&codes)?,
        recovery,
        histogram: activation_histogram(&codes, m + 1),
        concept_frequency,
    })
}

impl MetricsReport {
    /// Flat `key=value` lines followed by the histogram block.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k}={v}\n"));
        kv("format", REPORT_FORMAT.to_string());
        kv("samples", self.samples.to_string());
        kv("nmse", format!("{:?}", self.nmse));
        kv("fvu", format!("{:?}", self.fvu));
        kv("mean_l0", format!("{:?}", self.mean_l0));
        kv("cosine_sim", format!("{:?}", self.cosine_sim));
        kv("dead_fraction", format!("{:?}", self.dead_fraction));
        kv("k_star", format!("{:?}", self.k_star.mean));
        kv("k_star_rounded", self.k_star.rounded.to_string());
        match &self.recovery {
            Some(r) => {
                kv("recovery_mean_max_cos", format!("{:?}", r.mean_max_cos));
                kv("recovery_matched", r.matched.to_string());
            }
            None => {
                kv("recovery_mean_max_cos", "na".into());
                kv("recovery_matched", "na".into());
            }
        }
        // Reserved; not computed by this crate.
        kv("cknna", "na".into());
        kv("mean_ms", "na".into());
        kv("max_ms", "na".into());
        out.push_str("\n[histogram]\n");
        out.push_str(&self.histogram.to_tsv());
        out.push_str("\n[concept_frequency]\nconcept\tfrequency\n");
        for (i, f) in self.concept_frequency.iter().enumerate() {
            out.push_str(&format!("{i}\t{f:?}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut sections = text.split("\n[");
        let head = sections.next().unwrap_or_default();
        let mut kv = BTreeMap::new();
        for line in head.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("report line `{line}` is not key=value")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        if kv.get("format").map(String::as_str) != Some(REPORT_FORMAT) {
            return Err(Error::invalid(format!("report is not {REPORT_FORMAT}")));
        }
        let get = |k: &str| -> Result<&String> {
            kv.get(k)
                .ok_or_else(|| Error::invalid(format!("report lacks `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::invalid(format!("report key `{k}` is not a number")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::invalid(format!("report key `{k}` is not an integer")))
        };
        let recovery = if get("recovery_mean_max_cos")? == "na" {
            None
        } else {
            Some(RecoveryScore {
                mean_max_cos: num("recovery_mean_max_cos")?,
                matched: int("recovery_matched")?,
            })
        };
        let mut histogram = None;
        let mut concept_frequency = Vec::new();
        for sec in sections {
            if let Some(body) = sec.strip_prefix("histogram]\n") {
                histogram = Some(Histogram::from_tsv(body)?);
            } else if let Some(body) = sec.strip_prefix("concept_frequency]\n") {
                for line in body.lines().skip(1).filter(|l| !l.trim().is_empty()) {
                    let f = line
                        .split_once('\t')
                        .and_then(|(_, f)| f.parse().ok())
                        .ok_or_else(|| Error::invalid(format!("bad frequency line `{line}`")))?;
                    concept_frequency.push(f);
                }
            }
        }
        Ok(MetricsReport {
            samples: int("samples")?,
            nmse: num("nmse")?,
            fvu: num("fvu")?,
            mean_l0: num("mean_l0")?,
            cosine_sim: num("cosine_sim")?,
            dead_fraction: num("dead_fraction")?,
            k_star: KStar {
                mean: num("k_star")?,
                rounded: int("k_star_rounded")?,
            },
            recovery,
            histogram: histogram.ok_or_else(|| Error::invalid("report lacks a histogram block"))?,
            concept_frequency,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::{sparsemax, topk};
    use crate::numeric::{randn, Rng};

    #[test]
    fn nmse_cases() {
        let x = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert_eq!(nmse(&x, &x).unwrap(), 0.0);
        assert_eq!(nmse(&x, &Matrix::zeros(1, 2)).unwrap(), 1.0);
        let r = Matrix::from_rows(&[[0.5, 0.0]]).unwrap();
        assert_eq!(nmse(&x, &r).unwrap(), 0.25);
        assert!(nmse(&Matrix::zeros(2, 2), &Matrix::zeros(2, 2)).is_err());
        assert!(nmse(&x, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn fvu_cases() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 6.0]]).unwrap();
        assert_eq!(fvu(&x, &x).unwrap(), 0.0);
        let mean = Matrix::from_rows(&[[2.0, 4.0], [2.0, 4.0]]).unwrap();
        assert_eq!(fvu(&x, &mean).unwrap(), 1.0);
        // Variance about the column mean: 1 + 4 + 1 + 4 = 10.
        // Residual of [[1,2],[3,6]] vs [[1,2],[3,6-√5]] would be 5: use
        // a residual of 5 split as 1² + 2² in one row.
        let half = Matrix::from_rows(&[[2.0, 4.0], [3.0, 6.0]]).unwrap();
        assert_eq!(fvu(&x, &half).unwrap(), 0.5);
        assert!(fvu(
            &Matrix::from_rows(&[[1.0], [1.0]]).unwrap(),
            &Matrix::zeros(2, 1)
        )
        .is_err());
    }

    #[test]
    fn fvu_equals_nmse_for_centered_data() {
        let x = Matrix::from_rows(&[[1.0, -2.0], [-1.0, 2.0]]).unwrap();
        let r = Matrix::from_rows(&[[0.5, -1.0], [-0.75, 2.5]]).unwrap();
        assert!((fvu(&x, &r).unwrap() - nmse(&x, &r).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn l0_cases() {
        assert_eq!(mean_l0(&Matrix::zeros(4, 6), 0.0), 0.0);
        let mut rng = Rng::new(2);
        let z = randn(&mut rng, 10, 20, 1.0).unwrap();
        let mut codes = Matrix::zeros(10, 20);
        for r in 0..10 {
            codes.row_mut(r).copy_from_slice(
                &topk(
                    &z.row(r).iter().map(|v| v.abs() + 0.1).collect::<Vec<_>>(),
                    5,
                )
                .unwrap(),
            );
        }
        assert_eq!(mean_l0(&codes, 0.0), 5.0);

        let mut sm = Matrix::zeros(10, 20);
        let mut support = 0;
        for r in 0..10 {
            let c = sparsemax(z.row(r)).unwrap();
            support += c.support_size();
            sm.row_mut(r).copy_from_slice(&c.values);
        }
        assert_eq!(mean_l0(&sm, 0.0), support as f64 / 10.0);
        assert_eq!(estimate_k_star([&sm]).unwrap().mean, mean_l0(&sm, 0.0));
    }

    #[test]
    fn cosine_cases() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [0.5, -1.0]]).unwrap();
        assert!((cosine_sim(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_sim(&x, &x.scale(-1.0)).unwrap() + 1.0).abs() < 1e-15);
        let orth = Matrix::from_rows(&[[-2.0, 1.0], [2.0, 1.0]]).unwrap();
        assert_eq!(cosine_sim(&x, &orth).unwrap(), 0.0);
    }

    #[test]
    fn recovery_of_exact_dictionary() {
        let mut rng = Rng::new(9);
        let truth = randn(&mut rng, 6, 4, 1.0).unwrap();
        let junk = randn(&mut rng, 6, 3, 1.0).unwrap();
        let learned = Matrix::from_vec(
            6,
            7,
            (0..6)
                .flat_map(|r| {
                    truth
                        .row(r)
                        .iter()
                        .chain(junk.row(r))
                        .copied()
                        .collect::<Vec<_>>()
                })
                .collect(),
        )
        .unwrap();
        let s = recovery_score(&learned, &truth).unwrap();
        assert!((s.mean_max_cos - 1.0).abs() < 1e-12);
        assert_eq!(s.matched, 4);
        assert!(recovery_score(&Matrix::zeros(5, 2), &truth).is_err());
    }

    #[test]
    fn recovery_invariant_to_column_scale_sign_and_order() {
        let mut rng = Rng::new(10);
        let truth = randn(&mut rng, 8, 5, 1.0).unwrap();
        let learned = randn(&mut rng, 8, 12, 1.0).unwrap();
        let base = recovery_score(&learned, &truth).unwrap();
        let mut changed = Matrix::zeros(8, 12);
        for c in 0..12 {
            let src = 11 - c;
            let s = if c % 2 == 0 { -3.5 } else { 0.25 };
            for r in 0..8 {
                changed.set(r, c, s * learned.get(r, src));
            }
        }
        let other = recovery_score(&changed, &truth).unwrap();
        assert!((base.mean_max_cos - other.mean_max_cos).abs() < 1e-12);
        assert_eq!(base.matched, other.matched);
    }

    #[test]
    fn recovery_of_unrelated_dictionary_is_low() {
        // Random directions in R^32: |cos| concentrates around 1/√32 ≈ 0.18,
        // and the max over a handful of columns stays well under 0.3.
        let mut rng = Rng::new(12);
        let truth = randn(&mut rng, 32, 16, 1.0).unwrap();
        let learned = randn(&mut rng, 32, 4, 1.0).unwrap();
        let s = recovery_score(&learned, &truth).unwrap();
        assert!(s.mean_max_cos <= 0.3, "{}", s.mean_max_cos);
    }

    #[test]
    fn k_star_cases() {
        let mut a = Matrix::zeros(3, 30);
        for r in 0..3 {
            for j in 0..24 {
                a.set(r, j, 1.0);
            }
        }
        let k = estimate_k_star([&a]).unwrap();
        assert_eq!((k.mean, k.rounded), (24.0, 24));

        let mut b = Matrix::zeros(2, 8);
        for j in 0..2 {
            b.set(0, j, 1.0);
        }
        for j in 0..6 {
            b.set(1, j, 1.0);
        }
        assert_eq!(estimate_k_star([&b]).unwrap().mean, 4.0);
        assert!(estimate_k_star(std::iter::empty::<&Matrix>()).is_err());
    }

    #[test]
    fn histogram_cases() {
        let mut codes = Matrix::zeros(5, 8);
        for r in 0..5 {
            for j in 0..3 {
                codes.set(r, (r + j) % 8, 0.5);
            }
        }
        let h = activation_histogram([&codes], 9);
        assert_eq!(h.counts.iter().filter(|c| **c > 0).count(), 1);
        assert_eq!(h.counts[3], 5);
        assert_eq!(h.total(), 5);

        let other = activation_histogram([&Matrix::zeros(2, 8)], 9);
        let merged = activation_histogram([&codes, &Matrix::zeros(2, 8)], 9);
        let mut sum = h.clone();
        sum.merge(&other).unwrap();
        assert_eq!(sum, merged);
        assert_eq!(Histogram::from_tsv(&merged.to_tsv()).unwrap(), merged);
    }

    #[test]
    fn report_text_round_trip() {
        let report = MetricsReport {
            samples: 10,
            nmse: 0.125,
            fvu: 0.2,
            mean_l0: 3.5,
            cosine_sim: 0.9,
            dead_fraction: 0.25,
            k_star: KStar {
                mean: 3.5,
                rounded: 4,
            },
            recovery: Some(RecoveryScore {
                mean_max_cos: 0.8,
                matched: 3,
            }),
            histogram: Histogram {
                counts: vec![1, 2, 7],
            },
            concept_frequency: vec![0.1, 0.0],
        };
        let text = report.to_text();
        assert!(text.starts_with("format=report_v1\n"));
        assert_eq!(MetricsReport::from_text(&text).unwrap(), report);
    }
}

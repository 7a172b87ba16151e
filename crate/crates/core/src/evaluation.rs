//! Metrics and diagnostics: per-AU F1, Pearson correlation matrices, their
//! RMS distance, pairwise cosine statistics of AU tokens, and attention
//! export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::FanTrans;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    /// `2TP / (2TP + FP + FN)`, or 0 when the denominator vanishes.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_au_f1: Vec<f64>,
    pub macro_f1: f64,
    pub confusion: Vec<Confusion>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "au,tp,fp,fn,tn,f1";

    /// One row per AU followed by a `macro` row with only the F1 filled.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for (i, (c, f1)) in self.confusion.iter().zip(&self.per_au_f1).enumerate() {
            let _ = writeln!(s, "{i},{},{},{},{},{f1:.6}", c.tp, c.fp, c.fn_, c.tn);
        }
        let _ = writeln!(s, "macro,,,,,{:.6}", self.macro_f1);
        s
    }

    pub fn table(&self) -> String {
        let mut s = String::from("  AU      TP     FP     FN     TN      F1\n");
        for (i, (c, f1)) in self.confusion.iter().zip(&self.per_au_f1).enumerate() {
            let _ = writeln!(s, "{i:>4} {:>7}{:>7}{:>7}{:>7}  {f1:>6.4}", c.tp, c.fp, c.fn_, c.tn);
        }
        let _ = write!(s, "macro-F1 {:.4}", self.macro_f1);
        s
    }
}

fn check_matrix<T>(rows: &[Vec<T>], what: &str) -> Result<usize> {
    let n = rows.first().map_or(0, Vec::len);
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::usage(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(n)
}

pub fn f1_scores(pred: &[Vec<bool>], labels: &[Vec<bool>]) -> Result<MetricsReport> {
    let n = check_matrix(labels, "labels")?;
    if pred.len() != labels.len() || check_matrix(pred, "predictions")? != n {
        return Err(Error::usage(format!(
            "prediction shape {}x{} does not match label shape {}x{n}",
            pred.len(),
            pred.first().map_or(0, Vec::len),
            labels.len()
        )));
    }
    let mut confusion = vec![Confusion::default(); n];
    for (p, y) in pred.iter().zip(labels) {
        for (c, (&p, &y)) in confusion.iter_mut().zip(p.iter().zip(y)) {
            match (p, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    let per_au_f1: Vec<f64> = confusion.iter().map(Confusion::f1).collect();
    let macro_f1 = per_au_f1.iter().sum::<f64>() / n as f64;
    Ok(MetricsReport {
        per_au_f1,
        macro_f1,
        confusion,
    })
}

/// Pairwise Pearson coefficients. Entries touching a constant column are 0
/// with `undefined` set.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrMatrix {
    pub n: usize,
    pub m: Vec<f64>,
    pub undefined: Vec<bool>,
}

impl CorrMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i * self.n + j]
    }

    pub fn is_undefined(&self, i: usize, j: usize) -> bool {
        self.undefined[i * self.n + j]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| format!("{:.6}", self.get(i, j))).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

pub fn correlation_matrix_f64(rows: &[Vec<f64>]) -> Result<CorrMatrix> {
    if rows.len() < 2 {
        return Err(Error::usage("correlation needs at least two samples"));
    }
    let n = check_matrix(rows, "correlation input")?;
    let count = rows.len() as f64;
    let mean: Vec<f64> = (0..n).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / count).collect();
    let mut cov = vec![0.0; n * n];
    for r in rows {
        for i in 0..n {
            let di = r[i] - mean[i];
            for j in i..n {
                cov[i * n + j] += di * (r[j] - mean[j]);
            }
        }
    }
    let mut m = vec![0.0; n * n];
    let mut undefined = vec![false; n * n];
    for i in 0..n {
        for j in i..n {
            let den = (cov[i * n + i] * cov[j * n + j]).sqrt();
            let (v, undef) = if den > 0.0 {
                let v = if i == j { 1.0 } else { (cov[i * n + j] / den).clamp(-1.0, 1.0) };
                (v, false)
            } else {
                (0.0, true)
            };
            m[i * n + j] = v;
            m[j * n + i] = v;
            undefined[i * n + j] = undef;
            undefined[j * n + i] = undef;
        }
    }
    Ok(CorrMatrix { n, m, undefined })
}

pub fn correlation_matrix(rows: &[Vec<bool>]) -> Result<CorrMatrix> {
    let f: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect();
    correlation_matrix_f64(&f)
}

/// Root mean square of the element-wise differences.
pub fn corr_distance(a: &CorrMatrix, b: &CorrMatrix) -> Result<f64> {
    if a.n != b.n {
        return Err(Error::usage(format!("correlation matrices are {0}x{0} and {1}x{1}", a.n, b.n)));
    }
    let sq: f64 = a.m.iter().zip(&b.m).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / a.m.len() as f64).sqrt())
}

pub const COSINE_BINS: usize = 40;

#[derive(Clone, Debug, PartialEq)]
pub struct CosineStats {
    /// Counts over `[-1, 1]` in steps of 0.05; the last bin includes 1.
    pub histogram: Vec<usize>,
    pub mean: f64,
    pub pairs: usize,
    /// Zero-norm rows left out of every pair.
    pub skipped_rows: usize,
}

pub fn cosine_bin(s: f64) -> usize {
    (((s + 1.0) / 0.05).floor().max(0.0) as usize).min(COSINE_BINS - 1)
}

/// Pairwise cosine similarity among the rows of each `[N, D]` token matrix.
pub fn cosine_stats(tokens: &[Tensor]) -> Result<CosineStats> {
    let mut histogram = vec![0; COSINE_BINS];
    let (mut total, mut pairs, mut skipped) = (0.0, 0usize, 0usize);
    for t in tokens {
        let [n, d] = t.shape()[..] else {
            return Err(Error::dim(format!("token matrix must be [N, D], got {:?}", t.shape())));
        };
        let rows: Vec<&[f64]> = t.data().chunks(d).collect();
        let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        skipped += norms.iter().filter(|&&v| v == 0.0).count();
        for i in 0..n {
            for j in i + 1..n {
                if norms[i] == 0.0 || norms[j] == 0.0 {
                    continue;
                }
                let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
                let s = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                histogram[cosine_bin(s)] += 1;
                total += s;
                pairs += 1;
            }
        }
    }
    let mean = if pairs == 0 { 0.0 } else { total / pairs as f64 };
    Ok(CosineStats {
        histogram,
        mean,
        pairs,
        skipped_rows: skipped,
    })
}

/// Files written by [`export_attention`].
#[derive(Clone, Debug)]
pub struct AttentionExport {
    pub csv: PathBuf,
    pub images: Vec<PathBuf>,
    pub rows: usize,
}

pub const ATTENTION_CSV: &str = "attention.csv";

/// Writes the post-drop attention of every block of the deployed
/// transformer for one sample, and one 8-bit PGM per AU showing `|W_au|`
/// reshaped to `H_c × W_c`.
///
/// CSV columns: `block,head,row,c0..c{N-1}`. Values are printed in Rust's
/// shortest round-trip form. PGM intensities scale the largest `|W_au|`
/// entry to 255; an all-zero `W_au` gives black images.
pub fn export_attention(model: &FanTrans, fa: &Tensor, dir: &Path) -> Result<AttentionExport> {
    let fa = match fa.ndim() {
        3 => fa.reshape(&[1, fa.shape()[0], fa.shape()[1], fa.shape()[2]])?,
        4 if fa.shape()[0] == 1 => fa.clone(),
        _ => return Err(Error::dim(format!("export_attention takes one sample, got {:?}", fa.shape()))),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = String::new();
    let mut rows = 0;
    let mut g = Graph::new();
    let x = g.constant(fa);
    let out = model.forward(&mut g, x)?;
    let traces = if out.attn2.is_empty() { &out.attn1 } else { &out.attn2 };
    if let Some(first) = traces.first() {
        let n = g.shape(first.post_drop)[2];
        let header: Vec<String> = (0..n).map(|j| format!("c{j}")).collect();
        let _ = writeln!(csv, "block,head,row,{}", header.join(","));
    }
    for (block, tr) in traces.iter().enumerate() {
        let a = g.value(tr.post_drop);
        let n = a.shape()[2];
        for (head, mat) in a.data().chunks(n * n).enumerate() {
            for (row, vals) in mat.chunks(n).enumerate() {
                let cells: Vec<String> = vals.iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(csv, "{block},{head},{row},{}", cells.join(","));
                rows += 1;
            }
        }
    }
    let csv_path = dir.join(ATTENTION_CSV);
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let w = &model.params.get(model.conv_head().au_proj_id()).value;
    let (hw, n_au) = (w.shape()[0], w.shape()[1]);
    let side = (hw as f64).sqrt() as usize;
    let peak = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut images = Vec::with_capacity(n_au);
    for au in 0..n_au {
        let mut bytes = format!("P5\n{side} {side}\n255\n").into_bytes();
        for p in 0..hw {
            let v = w.data()[p * n_au + au].abs();
            let level = if peak > 0.0 { (v / peak * 255.0).round() } else { 0.0 };
            bytes.push(level as u8);
        }
        let path = dir.join(format!("w_au_{au}.pgm"));
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        images.push(path);
    }
    Ok(AttentionExport {
        csv: csv_path,
        images,
        rows,
    })
}

/// Parses the CSV written by [`export_attention`] back into one
/// `[N, N]` matrix per `(block, head)` in file order.
pub fn parse_attention_csv(text: &str) -> Result<Vec<Tensor>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format("empty attention CSV"))?;
    let n = header.split(',').count().saturating_sub(3);
    if n == 0 {
        return Err(Error::format("attention CSV header has no value columns"));
    }
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(n * n);
    for (ln, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n + 3 {
            return Err(Error::format(format!("attention CSV line {} has {} cells", ln + 2, cells.len())));
        }
        for c in &cells[3..] {
            current.push(c.parse::<f64>().map_err(|_| Error::format(format!("bad number '{c}'")))?);
        }
        if current.len() == n * n {
            out.push(Tensor::new(&[n, n], std::mem::take(&mut current))?);
        }
    }
    if !current.is_empty() {
        return Err(Error::format("attention CSV ends mid-matrix"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_formula() {
        let c = Confusion { tp: 2, fp: 1, fn_: 1, tn: 5 };
        assert!((c.f1() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(Confusion::default().f1(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let y = vec![vec![true, false]];
        assert!(matches!(f1_scores(&[vec![true]], &y), Err(Error::Usage(_))));
        assert!(matches!(f1_scores(&[], &y), Err(Error::Usage(_))));
    }

    #[test]
    fn constant_column_is_flagged() {
        let rows = vec![vec![true, true], vec![false, true], vec![true, true]];
        let c = correlation_matrix(&rows).unwrap();
        assert_eq!(c.get(0, 0), 1.0);
        assert!(c.is_undefined(1, 1) && c.is_undefined(0, 1));
        assert_eq!(c.get(0, 1), 0.0);
        assert!(correlation_matrix(&rows[..1]).is_err());
    }

    #[test]
    fn bins_cover_the_closed_interval() {
        assert_eq!(cosine_bin(-1.0), 0);
        assert_eq!(cosine_bin(1.0), COSINE_BINS - 1);
        assert_eq!(cosine_bin(0.0), 20);
    }
}

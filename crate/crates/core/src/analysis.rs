//! Classical MDS of encoder token features and the scatter-plot output.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::LanguageId;
use crate::model::{frame_source, ModelParams};
use crate::tensor::Scalar;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("non-finite or ragged input")]
    BadInput,
    #[error("need at least {min} points per language (src {src}, tgt {tgt})")]
    SingleLanguage { src: usize, tgt: usize, min: usize },
    #[error("cloud has no projection")]
    NotProjected,
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

pub const MDS_TOL: f64 = 1e-9;
pub const MDS_MAX_ITER: usize = 10_000;
/// Minimum points per language for the overlap statistic.
pub const MIN_PER_LANGUAGE: usize = 10;

/// Feature vectors tagged by language, with an optional 2-D projection.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCloud {
    pub points: Vec<(Vec<f64>, LanguageId)>,
    pub projected: Option<Vec<(f64, f64, LanguageId)>>,
}

impl EmbeddingCloud {
    pub fn new(points: Vec<(Vec<f64>, LanguageId)>) -> Self {
        EmbeddingCloud { points, projected: None }
    }

    /// Runs [`classical_mds`] and stores the result.
    pub fn project(&mut self) -> Result<()> {
        let vecs: Vec<&[f64]> = self.points.iter().map(|(v, _)| v.as_slice()).collect();
        let xy = classical_mds(&vecs)?;
        self.projected = Some(
            xy.into_iter()
                .zip(&self.points)
                .map(|([x, y], (_, l))| (x, y, *l))
                .collect(),
        );
        Ok(())
    }
}

/// Largest eigenpair of a symmetric matrix by power iteration.
fn power_iteration(b: &[f64], n: usize, seed: u64) -> (f64, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..MDS_MAX_ITER {
        let w: Vec<f64> = b.par_chunks(n).map(|row| dot(row, &v)).collect();
        lambda = dot(&v, &w);
        let norm = dot(&w, &w).sqrt();
        if norm == 0.0 {
            return (0.0, v);
        }
        let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
        // sign-agnostic convergence: a negative eigenvalue flips v every step
        let diff_same: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let diff_flip: f64 = next.iter().zip(&v).map(|(a, b)| (a + b).powi(2)).sum::<f64>().sqrt();
        v = next;
        if diff_same.min(diff_flip) < MDS_TOL {
            break;
        }
    }
    let w: Vec<f64> = b.par_chunks(n).map(|row| dot(row, &v)).collect();
    lambda = if lambda.is_finite() { dot(&v, &w) } else { lambda };
    (lambda, v)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Classical (Torgerson) MDS into two dimensions with Euclidean distances.
///
/// The squared-distance matrix is double-centered and its top two
/// eigenpairs found by power iteration with deflation. A non-positive
/// eigenvalue leaves that coordinate at zero.
pub fn classical_mds<V: AsRef<[f64]> + Sync>(points: &[V]) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n < 3 {
        return Err(AnalysisError::TooFewPoints(n));
    }
    let dim = points[0].as_ref().len();
    if points
        .iter()
        .any(|p| p.as_ref().len() != dim || p.as_ref().iter().any(|x| !x.is_finite()))
    {
        return Err(AnalysisError::BadInput);
    }
    let mut b: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / n, k % n);
            let (p, q) = (points[i].as_ref(), points[j].as_ref());
            p.iter().zip(q).map(|(a, c)| (a - c).powi(2)).sum()
        })
        .collect();
    // B = -1/2 J D² J
    let row_means: Vec<f64> = b.chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    b.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, x) in row.iter_mut().enumerate() {
            *x = -0.5 * (*x - row_means[i] - row_means[j] + grand);
        }
    });
    let mut out = vec![[0.0; 2]; n];
    for (axis, seed) in [(0usize, 11u64), (1, 12)] {
        let (lambda, v) = power_iteration(&b, n, seed);
        if lambda <= 0.0 {
            if lambda < -MDS_TOL {
                log::warn!("MDS eigenvalue {lambda} is negative; dimension {axis} set to zero");
            }
            continue;
        }
        let s = lambda.sqrt();
        for (o, x) in out.iter_mut().zip(&v) {
            o[axis] = x * s;
        }
        b.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            for (j, x) in row.iter_mut().enumerate() {
                *x -= lambda * v[i] * v[j];
            }
        });
    }
    Ok(out)
}

/// Mixing statistic in [0, 1]: twice the fraction of projected points whose
/// nearest neighbour belongs to the other language, clamped. Near 1 for
/// fully mixed clouds, near 0 for separated ones.
pub fn feature_overlap_report(cloud: &EmbeddingCloud) -> Result<f64> {
    let proj = cloud.projected.as_ref().ok_or(AnalysisError::NotProjected)?;
    let src = proj.iter().filter(|p| p.2 == LanguageId::Src).count();
    let tgt = proj.len() - src;
    if src < MIN_PER_LANGUAGE || tgt < MIN_PER_LANGUAGE {
        return Err(AnalysisError::SingleLanguage {
            src,
            tgt,
            min: MIN_PER_LANGUAGE,
        });
    }
    let other: usize = proj
        .par_iter()
        .enumerate()
        .map(|(i, &(x, y, l))| {
            let mut best = f64::INFINITY;
            let mut best_lang = l;
            for (j, &(u, v, m)) in proj.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (x - u).powi(2) + (y - v).powi(2);
                if d < best {
                    best = d;
                    best_lang = m;
                }
            }
            usize::from(best_lang != l)
        })
        .sum();
    Ok((2.0 * other as f64 / proj.len() as f64).clamp(0.0, 1.0))
}

pub const TGT_COLOR: &str = "#d62728";
pub const SRC_COLOR: &str = "#1f77b4";

/// SVG scatter plot: target-language points red, source-language points
/// blue, axes scaled to the data, with a legend. Output is a pure function
/// of the projection.
pub fn render_scatter(cloud: &EmbeddingCloud) -> Result<String> {
    let proj = cloud.projected.as_ref().ok_or(AnalysisError::NotProjected)?;
    let (w, h, m) = (640.0, 480.0, 40.0);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y, _) in proj {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if proj.is_empty() {
        (x0, x1, y0, y1) = (-1.0, 1.0, -1.0, 1.0);
    }
    let span = |a: f64, b: f64| if b - a > 1e-12 { b - a } else { 1.0 };
    let (sx, sy) = ((w - 2.0 * m) / span(x0, x1), (h - 2.0 * m) / span(y0, y1));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g stroke="black" stroke-width="1"><line x1="{m}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b}"/></g>"#,
        b = h - m,
        r = w - m
    );
    let _ = writeln!(
        s,
        r#"<text x="{m}" y="{ty}" font-size="10">x: [{x0:.3}, {x1:.3}]  y: [{y0:.3}, {y1:.3}]</text>"#,
        ty = h - 10.0
    );
    for &(x, y, l) in proj {
        let (color, tag) = match l {
            LanguageId::Tgt => (TGT_COLOR, "tgt"),
            LanguageId::Src => (SRC_COLOR, "src"),
        };
        let px = m + (x - x0) * sx;
        let py = h - m - (y - y0) * sy;
        let _ = writeln!(
            s,
            r#"<circle cx="{px:.3}" cy="{py:.3}" r="2.5" fill="{color}" fill-opacity="0.6" data-lang="{tag}"/>"#
        );
    }
    let lx = w - 150.0;
    let _ = writeln!(s, r#"<g font-size="12">"#);
    let _ = writeln!(s, r#"<rect x="{lx}" y="12" width="10" height="10" fill="{TGT_COLOR}"/><text x="{}" y="21">target language</text>"#, lx + 16.0);
    let _ = writeln!(s, r#"<rect x="{lx}" y="30" width="10" height="10" fill="{SRC_COLOR}"/><text x="{}" y="39">source language</text>"#, lx + 16.0);
    let _ = writeln!(s, "</g>\n</svg>");
    Ok(s)
}

pub fn emit_scatter(cloud: &EmbeddingCloud, path: &Path) -> Result<()> {
    let svg = render_scatter(cloud)?;
    std::fs::write(path, svg).map_err(|source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn token_features<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    lines: &[String],
    lang: LanguageId,
) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<Result<Vec<Vec<f64>>>> = lines
        .par_iter()
        .map(|line| {
            let mut seq = vocab.encode(line, lang)?;
            seq.ids.truncate(params.config.max_len.saturating_sub(1));
            let m = params.encode_eval(&frame_source(&seq))?;
            Ok((0..m.rows)
                .map(|r| m.row(r).iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect())
                .collect())
        })
        .collect();
    let mut out = Vec::new();
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

/// Token-level encoder features of both samples, at most `per_language`
/// of each, subsampled with `seed`.
pub fn collect_features<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    src_lines: &[String],
    tgt_lines: &[String],
    per_language: usize,
    seed: u64,
) -> Result<EmbeddingCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3D5);
    let mut points = Vec::new();
    for (lines, lang) in [(src_lines, LanguageId::Src), (tgt_lines, LanguageId::Tgt)] {
        let feats = token_features(params, vocab, lines, lang)?;
        let mut idx: Vec<usize> = if feats.len() > per_language {
            sample(&mut rng, feats.len(), per_language).into_vec()
        } else {
            (0..feats.len()).collect()
        };
        idx.sort_unstable();
        points.extend(idx.into_iter().map(|i| (feats[i].clone(), lang)));
    }
    Ok(EmbeddingCloud::new(points))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    #[test]
    fn right_triangle_is_preserved() {
        let pts = [vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let out = classical_mds(&pts).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
                assert!((dist(out[i], out[j]) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_points_collapse() {
        let pts = vec![vec![3.0, -1.0, 2.0]; 5];
        let out = classical_mds(&pts).unwrap();
        assert!(out.iter().all(|p| p[0] == 0.0 && p[1] == 0.0));
    }

    #[test]
    fn input_errors() {
        assert!(matches!(classical_mds(&[vec![0.0], vec![1.0]]), Err(AnalysisError::TooFewPoints(2))));
        assert!(matches!(
            classical_mds(&[vec![0.0], vec![f64::NAN], vec![1.0]]),
            Err(AnalysisError::BadInput)
        ));
    }

    fn two_clusters(gap: f64) -> EmbeddingCloud {
        let mut pts = Vec::new();
        for i in 0..20 {
            let t = i as f64 * 0.01;
            pts.push((vec![t, t * 0.5], LanguageId::Src));
            pts.push((vec![gap + t, t * 0.3], LanguageId::Tgt));
        }
        let mut c = EmbeddingCloud::new(pts);
        c.project().unwrap();
        c
    }

    #[test]
    fn separated_clusters_do_not_overlap() {
        assert_eq!(feature_overlap_report(&two_clusters(100.0)).unwrap(), 0.0);
    }

    #[test]
    fn overlap_needs_both_languages() {
        let mut c = EmbeddingCloud::new((0..30).map(|i| (vec![i as f64, 0.0], LanguageId::Src)).collect());
        c.project().unwrap();
        assert!(matches!(feature_overlap_report(&c), Err(AnalysisError::SingleLanguage { .. })));
        let c = EmbeddingCloud::new(vec![]);
        assert!(matches!(feature_overlap_report(&c), Err(AnalysisError::NotProjected)));
    }

    #[test]
    fn scatter_marks_and_determinism() {
        let mut c = EmbeddingCloud::new(vec![
            (vec![0.0, 0.0], LanguageId::Src),
            (vec![1.0, 0.0], LanguageId::Tgt),
        ]);
        c.projected = Some(vec![(0.0, 0.0, LanguageId::Src), (1.0, 0.0, LanguageId::Tgt)]);
        let a = render_scatter(&c).unwrap();
        assert_eq!(a.matches("<circle").count(), 2);
        assert_eq!(a, render_scatter(&c).unwrap());
    }
}

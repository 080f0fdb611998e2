//! Post-hoc feature diagnostics: descriptor cosine-similarity structure,
//! neighborhood consistency, descriptor-norm statistics, and attention-map
//! export as grayscale heatmaps plus CSV score tables.
//!
//! All statistics are computed in `f64` regardless of the map's scalar type,
//! and all functions here are pure except the two file exporters.

use std::error::Error;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::backbone::FeatureMap;
use crate::elem::Elem;
use crate::heads::AttentionMap;

#[derive(Debug)]
pub enum AnalysisError {
    /// Fewer than four spatial sites leave no 8-connected structure worth
    /// summarizing.
    GridTooSmall { r: usize },
    SiteMismatch { expected: usize, got: usize },
    EmptySet,
    Io { path: PathBuf, source: io::Error },
    Malformed { detail: String },
}

impl fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalysisError::GridTooSmall { r } => {
                write!(f, "need at least 4 spatial sites, map has {r}")
            }
            AnalysisError::SiteMismatch { expected, got } => {
                write!(f, "attention has {got} sites, grid implies {expected}")
            }
            AnalysisError::EmptySet => write!(f, "no feature maps supplied"),
            AnalysisError::Io { path, source } => {
                write!(f, "io error at {}: {source}", path.display())
            }
            AnalysisError::Malformed { detail } => write!(f, "malformed score table: {detail}"),
        }
    }
}

impl Error for AnalysisError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            AnalysisError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// Pairwise cosine similarities between the `r` descriptors of one feature
/// map. Symmetric with a unit diagonal; rows and columns of zero-vector
/// descriptors are zero and their sites are flagged.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    r: usize,
    values: Vec<f64>,
    zero_sites: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn r(&self) -> usize {
        self.r
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.r + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Sites whose descriptor is the zero vector.
    pub fn zero_sites(&self) -> &[usize] {
        &self.zero_sites
    }

    /// One CSV row per site, shortest-round-trip float rendering.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.r) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

fn descriptor_f64<E: Elem>(map: &FeatureMap<E>, site: usize) -> Vec<f64> {
    (0..map.d).map(|c| map.at(c, site).as_f64()).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity between every pair of local descriptors.
pub fn descriptor_cosine_matrix<E: Elem>(map: &FeatureMap<E>) -> SimilarityMatrix {
    let r = map.r();
    let descriptors: Vec<Vec<f64>> = (0..r).map(|j| descriptor_f64(map, j)).collect();
    let zero_sites: Vec<usize> = (0..r)
        .filter(|&j| descriptors[j].iter().all(|&v| v == 0.0))
        .collect();
    let mut values = vec![0.0; r * r];
    for i in 0..r {
        for j in i..r {
            let v = if i == j && !descriptors[i].iter().all(|&v| v == 0.0) {
                1.0
            } else {
                cosine(&descriptors[i], &descriptors[j])
            };
            values[i * r + j] = v;
            values[j * r + i] = v;
        }
    }
    SimilarityMatrix { r, values, zero_sites }
}

/// Mean cosine similarity over all 8-connected neighbor pairs of the h×w
/// descriptor grid, each unordered pair counted once.
pub fn neighbor_consistency<E: Elem>(map: &FeatureMap<E>) -> Result<f64, AnalysisError> {
    let (h, w) = (map.h, map.w);
    if map.r() < 4 {
        return Err(AnalysisError::GridTooSmall { r: map.r() });
    }
    let descriptors: Vec<Vec<f64>> = (0..map.r()).map(|j| descriptor_f64(map, j)).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for y in 0..h {
        for x in 0..w {
            let here = y * w + x;
            let mut accumulate = |ny: usize, nx: usize| {
                total += cosine(&descriptors[here], &descriptors[ny * w + nx]);
                pairs += 1;
            };
            if x + 1 < w {
                accumulate(y, x + 1);
            }
            if y + 1 < h {
                if x > 0 {
                    accumulate(y + 1, x - 1);
                }
                accumulate(y + 1, x);
                if x + 1 < w {
                    accumulate(y + 1, x + 1);
                }
            }
        }
    }
    Ok(total / pairs as f64)
}

/// Dataset-level summary: mean of [`neighbor_consistency`] over many maps.
pub fn mean_neighbor_consistency<E: Elem>(maps: &[FeatureMap<E>]) -> Result<f64, AnalysisError> {
    if maps.is_empty() {
        return Err(AnalysisError::EmptySet);
    }
    let mut total = 0.0;
    for map in maps {
        total += neighbor_consistency(map)?;
    }
    Ok(total / maps.len() as f64)
}

/// Mean and population standard deviation of the per-descriptor L2 norms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub stddev: f64,
}

impl NormStats {
    /// Standard deviation relative to the mean; 0 for an all-zero map.
    pub fn relative_spread(&self) -> f64 {
        if self.mean == 0.0 {
            0.0
        } else {
            self.stddev / self.mean
        }
    }
}

pub fn descriptor_norm_stats<E: Elem>(map: &FeatureMap<E>) -> NormStats {
    let r = map.r();
    assert!(r > 0, "feature map has no spatial sites");
    let norms: Vec<f64> = (0..r)
        .map(|j| descriptor_f64(map, j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mean = norms.iter().sum::<f64>() / r as f64;
    let var = norms.iter().map(|n| (n - mean) * (n - mean)).sum::<f64>() / r as f64;
    NormStats { mean, stddev: var.sqrt() }
}

/// Renders the normalized α grid as an 8-bit grayscale raster, upsampled to
/// `extent`×`extent` by nearest neighbor and scaled so the largest α maps
/// to 255. The header carries a comment line recording that scale.
fn attention_pgm_bytes(alphas: &[f64], h: usize, w: usize, extent: usize) -> Vec<u8> {
    let max = alphas.iter().cloned().fold(0.0, f64::max);
    let mut bytes = format!(
        "P5\n# attention heatmap: alpha {max:?} maps to 255\n{extent} {extent}\n255\n"
    )
    .into_bytes();
    for y in 0..extent {
        let sy = y * h / extent;
        for x in 0..extent {
            let sx = x * w / extent;
            let alpha = alphas[sy * w + sx];
            let pixel = if max > 0.0 { (alpha / max * 255.0).round() as u8 } else { 0 };
            bytes.push(pixel);
        }
    }
    bytes
}

/// One CSV row per site: grid coordinates, raw score, normalized weight.
pub fn attention_csv<E: Elem>(att: &AttentionMap<E>, h: usize, w: usize) -> String {
    debug_assert_eq!(att.len(), h * w, "attention sites must fill the grid");
    let mut out = String::from("site,y,x,raw,normalized\n");
    for site in 0..att.len() {
        out.push_str(&format!(
            "{site},{},{},{:?},{:?}\n",
            site / w,
            site % w,
            att.raw()[site].as_f64(),
            att.normalized()[site].as_f64()
        ));
    }
    out
}

/// Parses a table written by [`attention_csv`] back into
/// `(raw, normalized)` pairs in site order.
pub fn parse_attention_csv(text: &str) -> Result<Vec<(f64, f64)>, AnalysisError> {
    let mut lines = text.lines();
    match lines.next() {
        Some("site,y,x,raw,normalized") => {}
        other => {
            return Err(AnalysisError::Malformed {
                detail: format!("unexpected header {other:?}"),
            })
        }
    }
    let mut scores = Vec::new();
    for (index, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(AnalysisError::Malformed {
                detail: format!("row {index} has {} fields, expected 5", fields.len()),
            });
        }
        let site: usize = fields[0]
            .parse()
            .map_err(|_| AnalysisError::Malformed { detail: format!("row {index}: bad site") })?;
        if site != index {
            return Err(AnalysisError::Malformed {
                detail: format!("row {index} labeled site {site}"),
            });
        }
        let parse = |field: &str| {
            field.parse::<f64>().map_err(|_| AnalysisError::Malformed {
                detail: format!("row {index}: bad float {field:?}"),
            })
        };
        scores.push((parse(fields[3])?, parse(fields[4])?));
    }
    Ok(scores)
}

/// Writes the heatmap PGM at `path` and the score table beside it with a
/// `.csv` extension. `extent` is the source image's side length; the α grid
/// is `h`×`w` in row-major site order.
pub fn export_attention_map<E: Elem>(
    att: &AttentionMap<E>,
    h: usize,
    w: usize,
    extent: usize,
    path: &Path,
) -> Result<(), AnalysisError> {
    if att.len() != h * w {
        return Err(AnalysisError::SiteMismatch { expected: h * w, got: att.len() });
    }
    let alphas: Vec<f64> = att.normalized().iter().map(|v| v.as_f64()).collect();
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| AnalysisError::Io { path, source }
    };
    fs::write(path, attention_pgm_bytes(&alphas, h, w, extent)).map_err(io_err(path))?;
    let csv_path = path.with_extension("csv");
    fs::write(&csv_path, attention_csv(att, h, w)).map_err(io_err(&csv_path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn map_from_descriptors(h: usize, w: usize, descriptors: &[Vec<f64>]) -> FeatureMap<f64> {
        assert_eq!(descriptors.len(), h * w);
        let d = descriptors[0].len();
        let mut values = vec![0.0; d * h * w];
        for (site, desc) in descriptors.iter().enumerate() {
            for (c, &v) in desc.iter().enumerate() {
                values[c * h * w + site] = v;
            }
        }
        FeatureMap::new(d, h, w, values)
    }

    #[test]
    fn identical_descriptors_give_all_ones() {
        let map = map_from_descriptors(2, 2, &vec![vec![0.3, -1.2, 0.5]; 4]);
        let sim = descriptor_cosine_matrix(&map);
        assert_eq!(sim.r(), 4);
        assert!(sim.values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(sim.zero_sites().is_empty());
    }

    #[test]
    fn orthogonal_and_antiparallel_pairs() {
        let map = map_from_descriptors(1, 2, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let sim = descriptor_cosine_matrix(&map);
        assert_eq!(sim.at(0, 1), 0.0);
        assert_eq!(sim.at(0, 0), 1.0);

        let map = map_from_descriptors(1, 2, &[vec![2.0, -1.0], vec![-4.0, 2.0]]);
        let sim = descriptor_cosine_matrix(&map);
        assert_relative_eq!(sim.at(0, 1), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_descriptors_are_flagged_and_zeroed() {
        let map = map_from_descriptors(
            2,
            2,
            &[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 2.0], vec![0.0, 0.0]],
        );
        let sim = descriptor_cosine_matrix(&map);
        assert_eq!(sim.zero_sites(), &[1, 3]);
        for j in 0..4 {
            assert_eq!(sim.at(1, j), 0.0);
            assert_eq!(sim.at(j, 3), 0.0);
        }
        assert_eq!(sim.at(1, 1), 0.0);
        assert_eq!(sim.at(0, 0), 1.0);
    }

    #[test]
    fn matrix_csv_has_one_row_per_site() {
        let map = map_from_descriptors(1, 2, &[vec![1.0], vec![2.0]]);
        let csv = descriptor_cosine_matrix(&map).to_csv();
        assert_eq!(csv, "1.0,1.0\n1.0,1.0\n");
    }

    proptest! {
        #[test]
        fn cosine_matrix_invariants_hold(
            values in proptest::collection::vec(-3.0f64..3.0, 3 * 3 * 4),
        ) {
            let map = FeatureMap::new(4, 3, 3, values);
            let sim = descriptor_cosine_matrix(&map);
            for i in 0..sim.r() {
                for j in 0..sim.r() {
                    let v = sim.at(i, j);
                    prop_assert!((-1.0..=1.0).contains(&v));
                    prop_assert_eq!(v, sim.at(j, i));
                }
                if !sim.zero_sites().contains(&i) {
                    prop_assert_eq!(sim.at(i, i), 1.0);
                }
            }
        }
    }

    #[test]
    fn constant_map_is_perfectly_consistent() {
        let map = map_from_descriptors(3, 3, &vec![vec![0.7, -0.1]; 9]);
        assert_relative_eq!(neighbor_consistency(&map).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn checkerboard_matches_enumeration_oracle() {
        let (h, w) = (4, 4);
        let sign = |y: usize, x: usize| if (y + x) % 2 == 0 { 1.0 } else { -1.0 };
        let descriptors: Vec<Vec<f64>> =
            (0..h * w).map(|site| vec![sign(site / w, site % w), 0.0]).collect();
        let map = map_from_descriptors(h, w, &descriptors);

        let mut total = 0.0;
        let mut pairs = 0;
        for y in 0..h {
            for x in 0..w {
                for (dy, dx) in [(0i64, 1i64), (1, -1), (1, 0), (1, 1)] {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if (0..h as i64).contains(&ny) && (0..w as i64).contains(&nx) {
                        total += sign(y, x) * sign(ny as usize, nx as usize);
                        pairs += 1;
                    }
                }
            }
        }
        let oracle = total / pairs as f64;
        let got = neighbor_consistency(&map).unwrap();
        assert_relative_eq!(got, oracle, epsilon = 1e-12);
        assert_relative_eq!(got, -1.0 / 7.0, epsilon = 1e-12);
    }

    #[test]
    fn consistency_is_invariant_under_orthogonal_transforms() {
        let descriptors: Vec<Vec<f64>> = (0..6)
            .map(|s| vec![(s as f64 * 0.9).sin(), (s as f64 * 1.7).cos(), s as f64 - 2.0])
            .collect();
        let map = map_from_descriptors(2, 3, &descriptors);
        let base = neighbor_consistency(&map).unwrap();

        let (c, s) = (0.6f64, 0.8f64);
        let rotated: Vec<Vec<f64>> = descriptors
            .iter()
            .map(|d| vec![c * d[0] - s * d[1], s * d[0] + c * d[1], -d[2]])
            .collect();
        let map = map_from_descriptors(2, 3, &rotated);
        assert_relative_eq!(neighbor_consistency(&map).unwrap(), base, epsilon = 1e-12);

        let permuted: Vec<Vec<f64>> = descriptors.iter().map(|d| vec![d[2], d[0], -d[1]]).collect();
        let map = map_from_descriptors(2, 3, &permuted);
        assert_relative_eq!(neighbor_consistency(&map).unwrap(), base, epsilon = 1e-12);
    }

    #[test]
    fn tiny_grids_are_rejected() {
        let map = map_from_descriptors(1, 2, &[vec![1.0], vec![2.0]]);
        assert!(matches!(
            neighbor_consistency(&map),
            Err(AnalysisError::GridTooSmall { r: 2 })
        ));
        let square = map_from_descriptors(2, 2, &vec![vec![1.0]; 4]);
        assert!(neighbor_consistency(&square).is_ok());
        assert!(matches!(mean_neighbor_consistency::<f64>(&[]), Err(AnalysisError::EmptySet)));
    }

    #[test]
    fn mean_consistency_averages_per_map_values() {
        let constant = map_from_descriptors(2, 2, &vec![vec![1.0, 0.0]; 4]);
        let mixed = map_from_descriptors(
            2,
            2,
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]],
        );
        let a = neighbor_consistency(&constant).unwrap();
        let b = neighbor_consistency(&mixed).unwrap();
        let mean = mean_neighbor_consistency(&[constant, mixed]).unwrap();
        assert_relative_eq!(mean, (a + b) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn norm_stats_match_hand_arithmetic() {
        let map = map_from_descriptors(1, 2, &[vec![3.0, 0.0], vec![0.0, -5.0]]);
        let stats = descriptor_norm_stats(&map);
        assert_relative_eq!(stats.mean, 4.0, epsilon = 1e-12);
        assert_relative_eq!(stats.stddev, 1.0, epsilon = 1e-12);
        assert_relative_eq!(stats.relative_spread(), 0.25, epsilon = 1e-12);

        let constant = map_from_descriptors(2, 2, &vec![vec![0.4, 0.3]; 4]);
        assert_eq!(descriptor_norm_stats(&constant).stddev, 0.0);
    }

    proptest! {
        #[test]
        fn norm_stats_scale_with_absolute_lambda(
            values in proptest::collection::vec(-2.0f64..2.0, 2 * 2 * 3),
            lambda in -4.0f64..4.0,
        ) {
            let map = FeatureMap::new(3, 2, 2, values.clone());
            let base = descriptor_norm_stats(&map);
            let scaled = FeatureMap::new(3, 2, 2, values.iter().map(|v| v * lambda).collect());
            let stats = descriptor_norm_stats(&scaled);
            prop_assert!((stats.mean - lambda.abs() * base.mean).abs() < 1e-9);
            prop_assert!((stats.stddev - lambda.abs() * base.stddev).abs() < 1e-9);
        }
    }

    fn pgm_pixels(bytes: &[u8]) -> &[u8] {
        let mut newlines = 0;
        let header_end = bytes
            .iter()
            .position(|&b| {
                if b == b'\n' {
                    newlines += 1;
                }
                newlines == 4
            })
            .expect("four header lines")
            + 1;
        &bytes[header_end..]
    }

    #[test]
    fn uniform_attention_renders_a_constant_image() {
        let att = AttentionMap::from_raw(vec![0.5f64; 4]).unwrap();
        let alphas: Vec<f64> = att.normalized().iter().copied().collect();
        let bytes = attention_pgm_bytes(&alphas, 2, 2, 8);
        let pixels = pgm_pixels(&bytes);
        assert_eq!(pixels.len(), 64);
        assert!(pixels.iter().all(|&p| p == 255));
        assert!(bytes.starts_with(b"P5\n#"));
    }

    #[test]
    fn one_hot_attention_renders_a_single_bright_block() {
        let att = AttentionMap::from_raw(vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let alphas: Vec<f64> = att.normalized().iter().copied().collect();
        let bytes = attention_pgm_bytes(&alphas, 2, 2, 8);
        let pixels = pgm_pixels(&bytes);
        for y in 0..8 {
            for x in 0..8 {
                let expected = if y < 4 && x >= 4 { 255 } else { 0 };
                assert_eq!(pixels[y * 8 + x], expected, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn csv_round_trip_recovers_scores() {
        let raw = vec![0.125, 0.5, 0.9375, 0.0625, 0.25, 0.75];
        let att = AttentionMap::from_raw(raw.clone()).unwrap();
        let text = attention_csv(&att, 2, 3);
        let parsed = parse_attention_csv(&text).unwrap();
        assert_eq!(parsed.len(), 6);
        for (site, &(r, n)) in parsed.iter().enumerate() {
            assert!((r - raw[site]).abs() < 1e-6);
            assert!((n - att.normalized()[site]).abs() < 1e-6);
        }
        assert!(parse_attention_csv("bogus\n1,2,3").is_err());
        assert!(parse_attention_csv("site,y,x,raw,normalized\n7,0,0,0.1,0.1").is_err());
    }

    #[test]
    fn export_writes_heatmap_and_score_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episode_0_query_3.pgm");
        let att = AttentionMap::from_raw(vec![0.25f32, 0.5, 0.125, 1.0]).unwrap();
        export_attention_map(&att, 2, 2, 16, &path).unwrap();

        let pgm = fs::read(&path).unwrap();
        assert!(pgm.starts_with(b"P5\n# attention heatmap"));
        assert!(pgm.len() > 16 * 16);
        let text = fs::read_to_string(path.with_extension("csv")).unwrap();
        let parsed = parse_attention_csv(&text).unwrap();
        for (site, &(raw, _)) in parsed.iter().enumerate() {
            assert!((raw - att.raw()[site].as_f64()).abs() < 1e-6);
        }

        let wrong = AttentionMap::from_raw(vec![0.5f32; 3]).unwrap();
        assert!(matches!(
            export_attention_map(&wrong, 2, 2, 16, &path),
            Err(AnalysisError::SiteMismatch { expected: 4, got: 3 })
        ));
    }
}

//! Node-visit heat maps rendered as binary PGM (P5) images.
//!
//! Intensity maps the fraction of all accumulated tree nodes falling in a
//! cell: a cell holding `anchor` (or more) of the samples is pure black,
//! with linear interpolation to pure white at zero.

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct HeatmapSpec {
    pub width: usize,
    pub height: usize,
    /// Fraction of samples that renders a cell pure black
    /// (0.01 for the passage maps, 0.002 for the bug trap).
    pub anchor: f64,
}

#[derive(Deserialize)]
struct DumpRecord {
    config: Vec<f64>,
}

/// Per-cell visit counts accumulated over one or more tree dumps (JSONL of
/// node records). Returns the grid and the total node count.
pub fn accumulate_dumps(dumps: &[String], spec: &HeatmapSpec) -> Result<(Vec<u64>, u64)> {
    if dumps.is_empty() {
        return Err(Error::EmptyDataset("no tree dumps".into()));
    }
    let mut counts = vec![0u64; spec.width * spec.height];
    let mut total = 0u64;
    for dump in dumps {
        for line in dump.lines().filter(|l| !l.trim().is_empty()) {
            let record: DumpRecord = serde_json::from_str(line)?;
            let (x, y) = (record.config[0], record.config[1]);
            total += 1;
            if x < 0.0 || y < 0.0 {
                continue;
            }
            let (cx, cy) = (x.floor() as usize, y.floor() as usize);
            if cx < spec.width && cy < spec.height {
                counts[cy * spec.width + cx] += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyDataset("tree dumps contain no nodes".into()));
    }
    Ok((counts, total))
}

/// Gray value for one cell: `255 * (1 - clamp(count/total/anchor, 0, 1))`,
/// rounded; 0 is black.
pub fn pixel_value(count: u64, total: u64, anchor: f64) -> u8 {
    let fraction = count as f64 / total as f64;
    let intensity = (fraction / anchor).clamp(0.0, 1.0);
    (255.0 * (1.0 - intensity)).round() as u8
}

/// Render the counts as a binary PGM image. Deterministic bytes.
pub fn emit_pgm(counts: &[u64], total: u64, spec: &HeatmapSpec) -> Vec<u8> {
    assert_eq!(counts.len(), spec.width * spec.height);
    let mut out = format!("P5\n{} {}\n255\n", spec.width, spec.height).into_bytes();
    out.extend(counts.iter().map(|&c| pixel_value(c, total, spec.anchor)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(w: usize, h: usize, anchor: f64) -> HeatmapSpec {
        HeatmapSpec {
            width: w,
            height: h,
            anchor,
        }
    }

    fn dump_of(points: &[(f64, f64)]) -> String {
        points
            .iter()
            .enumerate()
            .map(|(i, (x, y))| {
                format!(r#"{{"id":{i},"parent":null,"config":[{x},{y}],"cost":0.0}}"#)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn single_node_blackens_its_cell() {
        let s = spec(4, 4, 0.5);
        let (counts, total) = accumulate_dumps(&[dump_of(&[(1.5, 2.5)])], &s).unwrap();
        assert_eq!(total, 1);
        let img = emit_pgm(&counts, total, &s);
        let header_len = img.len() - 16;
        let pixels = &img[header_len..];
        // fraction 1.0 / anchor 0.5 clamps to 1 -> black.
        assert_eq!(pixels[2 * 4 + 1], 0);
        assert!(pixels.iter().filter(|&&p| p == 0).count() == 1);
        assert!(pixels.iter().filter(|&&p| p == 255).count() == 15);
    }

    #[test]
    fn uniform_counts_uniform_gray() {
        let s = spec(3, 3, 0.5);
        let points: Vec<(f64, f64)> = (0..3)
            .flat_map(|x| (0..3).map(move |y| (x as f64 + 0.5, y as f64 + 0.5)))
            .collect();
        let (counts, total) = accumulate_dumps(&[dump_of(&points)], &s).unwrap();
        let img = emit_pgm(&counts, total, &s);
        let pixels = &img[img.len() - 9..];
        // Every cell holds 1/9 of the samples; intensity (1/9)/0.5 = 2/9.
        let want = (255.0_f64 * (1.0 - (1.0 / 9.0) / 0.5)).round() as u8;
        assert!(pixels.iter().all(|&p| p == want), "{pixels:?} vs {want}");
    }

    #[test]
    fn pixels_match_per_cell_recomputation() {
        let s = spec(8, 6, 0.01);
        let mut rng = crate::numerics::RngStream::new(5, 0);
        let points: Vec<(f64, f64)> = (0..500)
            .map(|_| (rng.uniform(0.0, 8.0), rng.uniform(0.0, 6.0)))
            .collect();
        let dump = dump_of(&points);
        let (counts, total) = accumulate_dumps(&[dump], &s).unwrap();
        let img = emit_pgm(&counts, total, &s);
        let pixels = &img[img.len() - 48..];
        // Recompute every pixel directly from the point list.
        for cy in 0..6 {
            for cx in 0..8 {
                let count = points
                    .iter()
                    .filter(|(x, y)| x.floor() as usize == cx && y.floor() as usize == cy)
                    .count() as u64;
                let frac = count as f64 / total as f64;
                let want = (255.0 * (1.0 - (frac / 0.01).clamp(0.0, 1.0))).round() as u8;
                assert_eq!(pixels[cy * 8 + cx], want);
            }
        }
    }

    #[test]
    fn deterministic_bytes_and_empty_errors() {
        let s = spec(4, 4, 0.01);
        let d = dump_of(&[(0.5, 0.5), (2.5, 3.5)]);
        let a = {
            let (c, t) = accumulate_dumps(std::slice::from_ref(&d), &s).unwrap();
            emit_pgm(&c, t, &s)
        };
        let b = {
            let (c, t) = accumulate_dumps(&[d], &s).unwrap();
            emit_pgm(&c, t, &s)
        };
        assert_eq!(a, b);
        assert!(accumulate_dumps(&[], &s).is_err());
        assert!(accumulate_dumps(&[String::new()], &s).is_err());
    }
}

//! CSV formats.
//!
//! Discrete measures and plans use the format: header line `d,k` (point
//! dimension, atom count), then one row per atom, `x_1..x_d,w` for measures
//! and `x_1..x_d,y_1..y_d,w` for plans. UTF-8, `.` decimal separator.
//! Floats are written in shortest round-trip form, so write -> parse is
//! bit-exact.
//!
//! The parsers are used on untrusted input (files, fuzzing); they must never
//! panic and they validate sizes before allocating.

use crate::measures::{DiscreteMeasure, DiscretePlan};
use crate::{Error, Result};

/// Hard caps so that a malformed header cannot trigger huge allocations.
const MAX_DIM: usize = 4096;
const MAX_ATOMS: usize = 16_777_216;

pub fn format_f64(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("bad float {s:?}")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|_| Error::Parse(format!("bad integer {s:?}")))
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let mut it = line.split(',');
    let d = parse_usize(it.next().ok_or_else(|| Error::Parse("empty header".into()))?)?;
    let k = parse_usize(it.next().ok_or_else(|| Error::Parse("header needs d,k".into()))?)?;
    if it.next().is_some() {
        return Err(Error::Parse("header has trailing fields".into()));
    }
    if d == 0 || d > MAX_DIM {
        return Err(Error::Parse(format!("dimension {d} out of range")));
    }
    if k == 0 || k > MAX_ATOMS {
        return Err(Error::Parse(format!("atom count {k} out of range")));
    }
    Ok((d, k))
}

fn parse_row(line: &str, fields: usize) -> Result<Vec<f64>> {
    let parts: Vec<&str> = line.split(',').collect();
    if parts.len() != fields {
        return Err(Error::Parse(format!(
            "row has {} fields, expected {fields}",
            parts.len()
        )));
    }
    parts.iter().map(|p| parse_f64(p)).collect()
}

pub fn write_discrete_measure(m: &DiscreteMeasure) -> String {
    let mut out = format!("{},{}\n", m.dim(), m.len());
    for (p, w) in m.points().iter().zip(m.weights()) {
        for c in p {
            out.push_str(&format_f64(*c));
            out.push(',');
        }
        out.push_str(&format_f64(*w));
        out.push('\n');
    }
    out
}

pub fn parse_discrete_measure(text: &str) -> Result<DiscreteMeasure> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let (d, k) = parse_header(lines.next().ok_or_else(|| Error::Parse("empty file".into()))?)?;
    let mut points = Vec::with_capacity(k.min(65536));
    let mut weights = Vec::with_capacity(k.min(65536));
    for _ in 0..k {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse("fewer rows than header promises".into()))?;
        let row = parse_row(line, d + 1)?;
        weights.push(row[d]);
        points.push(row[..d].to_vec());
    }
    if lines.next().is_some() {
        return Err(Error::Parse("more rows than header promises".into()));
    }
    DiscreteMeasure::new(points, weights)
}

pub fn write_discrete_plan(p: &DiscretePlan) -> String {
    let mut out = format!("{},{}\n", p.dim_x(), p.len());
    for a in p.atoms() {
        for c in &a.x {
            out.push_str(&format_f64(*c));
            out.push(',');
        }
        for c in &a.y {
            out.push_str(&format_f64(*c));
            out.push(',');
        }
        out.push_str(&format_f64(a.w));
        out.push('\n');
    }
    out
}

pub fn parse_discrete_plan(text: &str) -> Result<DiscretePlan> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let (d, k) = parse_header(lines.next().ok_or_else(|| Error::Parse("empty file".into()))?)?;
    if d > MAX_DIM / 2 {
        return Err(Error::Parse(format!("plan dimension {d} out of range")));
    }
    let mut triples = Vec::with_capacity(k.min(65536));
    for _ in 0..k {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse("fewer rows than header promises".into()))?;
        let row = parse_row(line, 2 * d + 1)?;
        triples.push((row[..d].to_vec(), row[d..2 * d].to_vec(), row[2 * d]));
    }
    if lines.next().is_some() {
        return Err(Error::Parse("more rows than header promises".into()));
    }
    DiscretePlan::from_triples(triples)
}

/// Plain rows of coordinates, one point per line, no header.
pub fn write_points(points: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for p in points {
        let row: Vec<String> = p.iter().map(|c| format_f64(*c)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_points(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    let mut width = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row: Vec<f64> = line
            .split(',')
            .map(parse_f64)
            .collect::<Result<Vec<f64>>>()?;
        if let Some(w) = width {
            if row.len() != w {
                return Err(Error::Parse("ragged rows".into()));
            }
        } else {
            width = Some(row.len());
        }
        out.push(row);
    }
    if out.is_empty() {
        return Err(Error::Parse("no data rows".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn measure_round_trip_exact() {
        let m = DiscreteMeasure::new(
            vec![vec![0.1, -2.5e-7], vec![3.25, 1.0 / 3.0]],
            vec![0.25, 0.75],
        )
        .unwrap();
        let text = write_discrete_measure(&m);
        let back = parse_discrete_measure(&text).unwrap();
        assert_eq!(back.points(), m.points());
        assert_eq!(back.weights(), m.weights());
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(parse_discrete_measure("").is_err());
        assert!(parse_discrete_measure("0,1\n1.0").is_err());
        assert!(parse_discrete_measure("1,999999999999\n0,1").is_err());
        assert!(parse_discrete_measure("1,1,9\n0,1").is_err());
    }

    #[test]
    fn rejects_row_mismatch() {
        assert!(parse_discrete_measure("2,1\n0.0,1.0").is_err());
        assert!(parse_discrete_measure("1,2\n0.0,1.0").is_err());
        assert!(parse_discrete_measure("1,1\n0.0,0.5\n1.0,0.5").is_err());
    }

    proptest! {
        #[test]
        fn plan_round_trip(
            n in 1usize..8,
            d in 1usize..4,
            seed_pts in proptest::collection::vec(-1e6f64..1e6, 64),
            raw_w in proptest::collection::vec(1e-3f64..1.0, 8),
        ) {
            let total: f64 = raw_w[..n].iter().sum();
            let mut triples = Vec::new();
            for i in 0..n {
                let x: Vec<f64> = (0..d).map(|j| seed_pts[(i * d + j) % seed_pts.len()]).collect();
                let y: Vec<f64> = (0..d).map(|j| seed_pts[(i * d + j + 13) % seed_pts.len()]).collect();
                triples.push((x, y, raw_w[i] / total));
            }
            // exact renormalization so the simplex check passes
            let s: f64 = triples.iter().map(|t| t.2).sum();
            for t in &mut triples { t.2 /= s; }
            if let Ok(plan) = DiscretePlan::from_triples(triples) {
                let text = write_discrete_plan(&plan);
                let back = parse_discrete_plan(&text).unwrap();
                prop_assert_eq!(back.len(), plan.len());
                for (a, b) in back.atoms().iter().zip(plan.atoms()) {
                    prop_assert_eq!(&a.x, &b.x);
                    prop_assert_eq!(&a.y, &b.y);
                    prop_assert_eq!(a.w, b.w);
                }
            }
        }
    }
}

//! TUM trajectory text format: `timestamp tx ty tz qx qy qz qw` per line.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Error)]
pub enum TumError {
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// `%.{digits}g` as printed by C.
pub fn format_g(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let p = digits.max(1);
    let sci = format!("{:.*e}", p - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= p as i32 {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (p as i32 - 1 - exp).max(0) as usize;
    strip_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn format_line(stamp: f64, pose: &Pose) -> String {
    let t = pose.translation;
    let q = pose.rotation.quaternion();
    let mut line = String::new();
    for (i, v) in [stamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w].iter().enumerate() {
        if i > 0 {
            line.push(' ');
        }
        let _ = write!(line, "{}", format_g(*v, 9));
    }
    line
}

pub fn to_string(trajectory: &[(f64, Pose)]) -> String {
    let mut out = String::new();
    for (stamp, pose) in trajectory {
        out.push_str(&format_line(*stamp, pose));
        out.push('\n');
    }
    out
}

pub fn parse(text: &str) -> Result<Vec<(f64, Pose)>, TumError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| TumError::Parse { line: i + 1, message };
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|e| err(format!("{f:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        if fields.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", fields.len())));
        }
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        let q = Quaternion::new(fields[7], fields[4], fields[5], fields[6]);
        if q.norm() < 1e-9 {
            return Err(err("zero quaternion".into()));
        }
        let pose = Pose::new(UnitQuaternion::new_normalize(q), Vector3::new(fields[1], fields[2], fields[3]));
        out.push((fields[0], pose));
    }
    Ok(out)
}

pub fn write(path: impl AsRef<Path>, trajectory: &[(f64, Pose)]) -> Result<(), TumError> {
    let path = path.as_ref();
    std::fs::write(path, to_string(trajectory)).map_err(|source| TumError::Io { path: path.display().to_string(), source })
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<(f64, Pose)>, TumError> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|source| TumError::Io { path: path.display().to_string(), source })?;
    parse(&text)
}

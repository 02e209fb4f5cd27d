//! Plain-text parameter checkpoints.
//!
//! ```text
//! ssrobust-checkpoint v1
//! param <name> <tag> <rank> <dim_1> ... <dim_rank>
//! <value_1> <value_2> ...
//! ```
//!
//! One `param` header per parameter, followed by one line with all values in
//! row-major order. Values are written with Rust's shortest round-trip float
//! formatting, so a save/load cycle reproduces every bit.

use std::fmt::Write as _;
use std::path::Path;

use super::graph::{ParamStore, Tag};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const HEADER: &str = "ssrobust-checkpoint v1";

pub fn to_string(params: &ParamStore) -> Result<String> {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    for p in params.iter() {
        if p.name.is_empty() || p.name.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!("parameter name '{}' cannot be stored", p.name)));
        }
        let shape = p.value.shape();
        write!(out, "param {} {} {}", p.name, p.tag, shape.len()).unwrap();
        for d in shape {
            write!(out, " {d}").unwrap();
        }
        out.push('\n');
        let values: Vec<String> = p.value.data().iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&values.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn from_str(text: &str) -> Result<ParamStore> {
    let parse_err = |line: usize, msg: &str| Error::Parse(format!("checkpoint line {line}: {msg}"));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        _ => return Err(parse_err(1, "missing header")),
    }
    let mut store = ParamStore::default();
    while let Some((ln, line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 4 || fields[0] != "param" {
            return Err(parse_err(ln, "expected 'param <name> <tag> <rank> <dims>'"));
        }
        let tag: Tag = fields[2].parse().map_err(|_| parse_err(ln, "unknown tag"))?;
        let rank: usize = fields[3].parse().map_err(|_| parse_err(ln, "bad rank"))?;
        if fields.len() != 4 + rank {
            return Err(parse_err(ln, "rank does not match the number of dims"));
        }
        let shape = fields[4..]
            .iter()
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| parse_err(ln, "bad dimension"))?;
        let (vln, values) = lines.next().ok_or_else(|| parse_err(ln, "missing value line"))?;
        let data = values
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| parse_err(vln, "bad value"))?;
        let tensor = Tensor::new(&shape, data).map_err(|e| parse_err(vln, &e.to_string()))?;
        store
            .insert(fields[1], tag, tensor)
            .map_err(|e| parse_err(ln, &e.to_string()))?;
    }
    Ok(store)
}

pub fn save(params: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    from_str(&std::fs::read_to_string(path)?)
}

/// Copies values from `source` into `target`; names, tags and shapes must
/// match exactly.
pub fn restore(target: &mut ParamStore, source: &ParamStore) -> Result<()> {
    if target.len() != source.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} parameters, model has {}",
            source.len(),
            target.len()
        )));
    }
    for p in source.iter() {
        let t = target
            .get_mut(&p.name)
            .ok_or_else(|| Error::Shape(format!("model has no parameter '{}'", p.name)))?;
        if t.tag != p.tag || t.value.shape() != p.value.shape() {
            return Err(Error::Shape(format!("parameter '{}' differs in tag or shape", p.name)));
        }
        t.value.data_mut().copy_from_slice(p.value.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ParamStore::default();
        s.insert("ext.w", Tag::Extractor, Tensor::new(&[2, 2], vec![0.1, -1e-300, 1.0 / 3.0, 2.5e10]).unwrap())
            .unwrap();
        s.insert("head.b", Tag::Head, Tensor::new(&[1], vec![-0.0]).unwrap()).unwrap();
        s.insert("lel", Tag::Fusion, Tensor::scalar(f64::MIN_POSITIVE)).unwrap();
        let text = to_string(&s).unwrap();
        let back = from_str(&text).unwrap();
        for (a, b) in s.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tag, b.tag);
            assert_eq!(a.value.shape(), b.value.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn malformed_input_is_rejected() {
        assert!(from_str("nope").is_err());
        assert!(from_str(&format!("{HEADER}\nparam w head 1 2\n1.0\n")).is_err());
        assert!(from_str(&format!("{HEADER}\nparam w body 1 1\n1.0\n")).is_err());
        assert!(from_str(&format!("{HEADER}\nparam w head 1 1\n")).is_err());
    }

    #[test]
    fn restore_checks_layout() {
        let mut a = ParamStore::default();
        a.insert("w", Tag::Head, Tensor::zeros(&[2])).unwrap();
        let mut b = ParamStore::default();
        b.insert("w", Tag::Head, Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        restore(&mut a, &b).unwrap();
        assert_eq!(a.get("w").unwrap().value.data(), &[1.0, 2.0]);
        let mut c = ParamStore::default();
        c.insert("w", Tag::Fusion, Tensor::zeros(&[2])).unwrap();
        assert!(restore(&mut c, &b).is_err());
    }
}

//! Fixed 17-significant-digit number output.
//!
//! JSON documents written by this crate emit every float as
//! `d.dddddddddddddddde±x`, which round-trips `f64` exactly. Use the
//! `serialize_with` helpers below on report fields; non-finite values are
//! written as `null` and read back as NaN.

use serde::de::Deserializer;
use serde::ser::{Error as _, SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

pub fn sig17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Like [`sig17`] but empty for non-finite values (CSV cells).
pub fn sig17_or_empty(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => sig17(v),
        _ => String::new(),
    }
}

struct Num(f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            let raw = RawValue::from_string(sig17(self.0)).map_err(S::Error::custom)?;
            raw.serialize(s)
        } else {
            s.serialize_none()
        }
    }
}

fn nan_if_null<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

pub mod scalar {
    use super::*;

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        Num(*x).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        nan_if_null(d)
    }
}

pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(xs.len()))?;
        for &x in xs {
            seq.serialize_element(&Num(x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v = Vec::<Option<f64>>::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
    }
}

/// Row-major nested arrays.
pub mod matrix {
    use super::*;

    struct Row<'a>(&'a [f64]);

    impl Serialize for Row<'_> {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            vector::serialize(self.0, s)
        }
    }

    pub fn serialize<S: Serializer>(rows: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(rows.len()))?;
        for r in rows {
            seq.serialize_element(&Row(r))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let v = Vec::<Vec<Option<f64>>>::deserialize(d)?;
        Ok(v
            .into_iter()
            .map(|r| r.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
            .collect())
    }
}

pub mod optional {
    use super::*;

    pub fn serialize<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match x {
            Some(v) => Num(*v).serialize(s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Option::<f64>::deserialize(d)
    }
}

pub fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> nalgebra::DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    nalgebra::DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Doc {
        #[serde(with = "scalar")]
        a: f64,
        #[serde(with = "vector")]
        v: Vec<f64>,
    }

    #[test]
    fn writes_seventeen_digits() {
        let doc = Doc { a: 0.1, v: vec![1.0, -2.5e-300] };
        let s = serde_json::to_string(&doc).unwrap();
        assert_eq!(
            s,
            r#"{"a":1.0000000000000001e-1,"v":[1.0000000000000000e0,-2.5000000000000000e-300]}"#
        );
    }

    #[test]
    fn nan_becomes_null() {
        let doc = Doc { a: f64::NAN, v: vec![] };
        let s = serde_json::to_string(&doc).unwrap();
        assert_eq!(s, r#"{"a":null,"v":[]}"#);
        let back: Doc = serde_json::from_str(&s).unwrap();
        assert!(back.a.is_nan());
    }

    proptest! {
        #[test]
        fn exact_round_trip(a in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO,
                            v in proptest::collection::vec(proptest::num::f64::NORMAL, 0..8)) {
            let doc = Doc { a, v };
            let back: Doc = serde_json::from_str(&serde_json::to_string(&doc).unwrap()).unwrap();
            prop_assert_eq!(back.a.to_bits(), doc.a.to_bits());
            prop_assert_eq!(back.v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            doc.v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }
}

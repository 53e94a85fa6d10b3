//! Number formatting shared by every metric and log writer: six
//! significant digits.

/// Rounds to six significant digits. Non-finite values pass through.
pub fn round6(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.5e}").parse().unwrap_or(v)
}

/// Six significant digits in the shortest plain or exponent form.
pub fn fmt6(v: f64) -> String {
    let r = round6(v);
    if r == 0.0 {
        return "0".into();
    }
    format!("{r}")
}

/// Serde helper for `f64` fields.
pub fn ser6<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round6(*v))
}

/// Serde helper for `Vec<f64>` fields.
pub fn ser6_vec<S: serde::Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        seq.serialize_element(&round6(*x))?;
    }
    seq.end()
}

/// Serde helper for `Option<f64>` fields.
pub fn ser6_opt<S: serde::Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_some(&round6(*x)),
        None => s.serialize_none(),
    }
}

//! Serde adapter for dense matrices: row-major data with explicit dims,
//! the on-disk layout for every matrix-valued field in this crate.

use faer::Mat;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
struct MatRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

pub fn serialize<S: Serializer>(m: &Mat<f64>, s: S) -> Result<S::Ok, S::Error> {
    let repr = MatRepr {
        rows: m.nrows(),
        cols: m.ncols(),
        data: (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
            .collect(),
    };
    repr.serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat<f64>, D::Error> {
    let repr = MatRepr::deserialize(d)?;
    if repr.data.len() != repr.rows * repr.cols {
        return Err(D::Error::custom(format!(
            "matrix data length {} does not match {} x {}",
            repr.data.len(),
            repr.rows,
            repr.cols
        )));
    }
    Ok(Mat::from_fn(repr.rows, repr.cols, |i, j| {
        repr.data[i * repr.cols + j]
    }))
}

#[cfg(test)]
mod tests {
    use faer::Mat;

    #[derive(serde::Serialize, serde::Deserialize)]
    struct Holder {
        #[serde(with = "super")]
        m: Mat<f64>,
    }

    #[test]
    fn roundtrip_is_exact() {
        let m = Mat::from_fn(2, 3, |i, j| (i * 3 + j) as f64 * 0.1 + 1e-17);
        let json = serde_json::to_string(&Holder { m: m.clone() }).unwrap();
        let back: Holder = serde_json::from_str(&json).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(m[(i, j)].to_bits(), back.m[(i, j)].to_bits());
            }
        }
    }
}

//! CSV export of datasets and feature matrices.

use std::fmt::Write as _;

use super::DomainDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn feature_header(out: &mut String, first: &str, d: usize) {
    out.push_str(first);
    for i in 0..d {
        let _ = write!(out, ",feature_{i}");
    }
    out.push('\n');
}

/// `index,label,feature_0..feature_{d-1}`; image sets are flattened and
/// preceded by a `# shape=h,w,c` line. Unlabeled rows leave `label` empty.
pub fn dataset_csv(ds: &DomainDataset) -> String {
    let mut out = String::new();
    if let &[h, w, c] = ds.sample_shape() {
        let _ = writeln!(out, "# shape={h},{w},{c}");
    }
    let d: usize = ds.sample_shape().iter().product();
    feature_header(&mut out, "index,label", d);
    for (i, row) in ds.inputs.data().chunks(d).enumerate() {
        let _ = write!(out, "{i},");
        if let Some(l) = &ds.labels {
            let _ = write!(out, "{}", l.classes()[i]);
        }
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// `label,f_0..f_{d-1}` rows of flattened features.
pub fn embeddings_csv(features: &Tensor<f32>, labels: &[usize]) -> Result<String> {
    let n = features.dims()[0];
    if labels.len() != n {
        return Err(Error::contract(format!("{} labels for {n} feature rows", labels.len())));
    }
    let d = features.numel() / n;
    let mut out = String::from("label");
    for i in 0..d {
        let _ = write!(out, ",f_{i}");
    }
    out.push('\n');
    for (row, label) in features.data().chunks(d).zip(labels) {
        let _ = write!(out, "{label}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

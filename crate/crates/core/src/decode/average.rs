use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Checkpoint;

/// Element-wise mean of checkpoints with identical parameter manifests.
/// The header (and config echo) of the first checkpoint is kept.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Contract("averaging needs at least one checkpoint".into()))?;
    for (i, ck) in checkpoints.iter().enumerate().skip(1) {
        let same = ck.header.params.len() == first.header.params.len()
            && ck.header.params.iter().zip(&first.header.params).all(|(a, b)| a.name == b.name && a.shape == b.shape);
        if !same {
            return Err(Error::Format(format!("checkpoint {i} has a different parameter manifest")));
        }
    }
    let n = checkpoints.len() as f64;
    let mut out = first.clone();
    for (k, t) in out.tensors.iter_mut().enumerate() {
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            *v = checkpoints.iter().map(|c| c.tensors[k].data()[j]).sum::<f64>() / n;
        }
    }
    Ok(out)
}

pub fn average_checkpoint_files(paths: &[impl AsRef<Path>]) -> Result<Checkpoint> {
    let cks = paths.iter().map(|p| Checkpoint::load(p.as_ref())).collect::<Result<Vec<_>>>()?;
    average_checkpoints(&cks)
}

//! Head checkpoints in the embedding container.
//!
//! Records are `P:k`, `W:row:r`, `b`, `A:row:r` and `bD`. The container
//! dimension is `2d` (the projection row width); shorter rows are zero-padded
//! and the sidecar carries the true shapes and the training config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::store::{decode_records, encode_records, read_sidecar, Sidecar, StoreKind};

use super::{DistillError, DistillHead, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointShapes {
    pub dim: usize,
    pub prompts: [usize; 2],
    pub projection: [usize; 2],
    pub bias: usize,
    pub discriminator: [usize; 2],
}

pub fn write_checkpoint(head: &DistillHead, config: &TrainConfig, path: &Path) -> Result<(), DistillError> {
    let d = head.dim();
    let width = 2 * d;
    let padded = |v: &[f64]| {
        let mut row: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        row.resize(width, 0.0);
        row
    };
    let mut rows: Vec<(String, Vec<f32>)> = Vec::new();
    for k in 0..head.num_prompts() {
        rows.push((format!("P:{k}"), padded(head.prompt(k))));
    }
    for r in 0..d {
        rows.push((format!("W:row:{r}"), padded(&head.projection[r * width..(r + 1) * width])));
    }
    rows.push(("b".into(), padded(&head.bias)));
    for r in 0..d {
        rows.push((format!("A:row:{r}"), padded(&head.discriminator[r * d..(r + 1) * d])));
    }
    rows.push(("bD".into(), padded(&[head.disc_bias])));

    let bytes = encode_records(width, rows.len(), rows.iter().map(|(id, v)| (id.as_str(), v.as_slice())));
    std::fs::write(path, bytes)?;

    let shapes = CheckpointShapes {
        dim: d,
        prompts: [head.num_prompts(), d],
        projection: [d, width],
        bias: d,
        discriminator: [d, d],
    };
    let mut extra = serde_json::Map::new();
    extra.insert("shapes".into(), serde_json::to_value(&shapes)?);
    extra.insert("config".into(), serde_json::to_value(config)?);
    let sidecar = Sidecar {
        path: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        dim: width,
        count: rows.len(),
        kind: StoreKind::Checkpoint,
        extra,
    };
    std::fs::write(crate::store::sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

/// Loads a head (parameters are stored as f32).
pub fn read_checkpoint(path: &Path) -> Result<(DistillHead, Option<TrainConfig>), DistillError> {
    let sidecar = read_sidecar(path)?.ok_or_else(|| DistillError::BadCheckpoint("missing sidecar".into()))?;
    let shapes: CheckpointShapes = serde_json::from_value(
        sidecar.extra.get("shapes").cloned().ok_or_else(|| DistillError::BadCheckpoint("no shapes".into()))?,
    )?;
    let config = sidecar.extra.get("config").cloned().map(serde_json::from_value).transpose()?;
    let (width, records) = decode_records(std::io::BufReader::new(std::fs::File::open(path)?))?;
    let d = shapes.dim;
    if width != 2 * d {
        return Err(DistillError::BadCheckpoint(format!("container width {width} for dim {d}")));
    }
    let rows: std::collections::HashMap<String, Vec<f32>> = records.into_iter().collect();
    let row = |id: String, len: usize| -> Result<Vec<f64>, DistillError> {
        let r = rows.get(&id).ok_or_else(|| DistillError::BadCheckpoint(format!("missing row {id}")))?;
        Ok(r[..len].iter().map(|&x| f64::from(x)).collect())
    };
    let m = shapes.prompts[0];
    let mut head = DistillHead::identity(d, m.max(1), 0);
    head.prompts = (0..m).map(|k| row(format!("P:{k}"), d)).collect::<Result<Vec<_>, _>>()?.concat();
    head.projection = (0..d).map(|r| row(format!("W:row:{r}"), width)).collect::<Result<Vec<_>, _>>()?.concat();
    head.bias = row("b".into(), d)?;
    head.discriminator = (0..d).map(|r| row(format!("A:row:{r}"), d)).collect::<Result<Vec<_>, _>>()?.concat();
    head.disc_bias = row("bD".into(), 1)?[0];
    Ok((head, config))
}

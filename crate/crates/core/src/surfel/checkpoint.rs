//! Surfel checkpoints as PLY: position, tangent axes, radii, opacity and
//! `3 (D + 1)^2` SH values, all doubles. Header comments carry `sh_degree D`
//! and `iteration N`.

use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use super::{Surfel, SurfelSet};
use crate::pointcloud::ply::{self, ScalarType};
use crate::pointcloud::{PlyEncoding, PlyError};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error("checkpoint: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub surfels: SurfelSet,
    pub iteration: usize,
}

const BASE: [&str; 12] = [
    "x", "y", "z", "tu_x", "tu_y", "tu_z", "tv_x", "tv_y", "tv_z", "ru", "rv", "opacity",
];

fn sh_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub fn save_checkpoint(set: &SurfelSet, iteration: usize, path: &Path) -> Result<(), CheckpointError> {
    let n_sh = sh_count(set.sh_degree);
    let sh_names: Vec<String> = (0..3 * n_sh).map(|i| format!("sh_{i}")).collect();
    let mut props: Vec<(&str, ScalarType)> = BASE.iter().map(|n| (*n, ScalarType::F64)).collect();
    props.extend(sh_names.iter().map(|n| (n.as_str(), ScalarType::F64)));
    let comments = vec![format!("sh_degree {}", set.sh_degree), format!("iteration {iteration}")];
    ply::write_vertices(
        path,
        PlyEncoding::BinaryLittleEndian,
        &comments,
        &props,
        set.len(),
        (0..set.len()).map(|i| {
            let s = set.get(i);
            let mut row = vec![
                s.p.x, s.p.y, s.p.z, s.tu.x, s.tu.y, s.tu.z, s.tv.x, s.tv.y, s.tv.z, s.ru, s.rv, s.opacity,
            ];
            for c in &s.sh[..n_sh] {
                row.extend_from_slice(&[c.x, c.y, c.z]);
            }
            row
        }),
    )?;
    Ok(())
}

fn comment_value(comments: &[String], key: &str) -> Option<usize> {
    comments.iter().find_map(|c| {
        let mut it = c.split_whitespace();
        (it.next() == Some(key)).then(|| it.next()?.parse().ok()).flatten()
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let table = ply::read_vertices(path)?;
    let degree = comment_value(&table.comments, "sh_degree")
        .ok_or_else(|| CheckpointError::Invalid("missing `sh_degree` comment".into()))?;
    if degree > 1 {
        return Err(CheckpointError::Invalid(format!("unsupported SH degree {degree}")));
    }
    let iteration = comment_value(&table.comments, "iteration").unwrap_or(0);
    let base = table.require(&BASE)?;
    let sh_names: Vec<String> = (0..3 * sh_count(degree)).map(|i| format!("sh_{i}")).collect();
    let sh_refs: Vec<&str> = sh_names.iter().map(String::as_str).collect();
    let sh_cols = table.require(&sh_refs)?;
    let mut surfels = Vec::with_capacity(table.len);
    for i in 0..table.len {
        let v = |c: usize| base[c][i];
        let mut sh = [Vector3::zeros(); 4];
        for (j, coef) in sh.iter_mut().take(sh_count(degree)).enumerate() {
            *coef = Vector3::new(sh_cols[3 * j][i], sh_cols[3 * j + 1][i], sh_cols[3 * j + 2][i]);
        }
        let s = Surfel {
            p: Vector3::new(v(0), v(1), v(2)),
            tu: Vector3::new(v(3), v(4), v(5)),
            tv: Vector3::new(v(6), v(7), v(8)),
            ru: v(9),
            rv: v(10),
            opacity: v(11),
            sh,
        };
        let finite = [s.p, s.tu, s.tv].iter().all(|a| a.iter().all(|x| x.is_finite()))
            && s.ru.is_finite()
            && s.rv.is_finite()
            && s.opacity.is_finite();
        if !finite || s.tu.norm() == 0.0 || s.tu.cross(&s.tv).norm() == 0.0 {
            return Err(CheckpointError::Invalid(format!("surfel {i} has a degenerate frame")));
        }
        surfels.push(s);
    }
    Ok(Checkpoint {
        surfels: SurfelSet::from_surfels(&surfels, degree),
        iteration,
    })
}

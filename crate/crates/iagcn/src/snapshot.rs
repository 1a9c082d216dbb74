//! Embedding snapshot files.
//!
//! Layout: one ASCII header line `IAGCN1 <n> <m> <d> <K>` followed by raw
//! little-endian f64s — user rows, then item rows (row-major), then the K+1
//! layer-combination values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EmbeddingTable, LayerWeights, Model};

const MAGIC: &str = "IAGCN1";

/// Raw contents of a snapshot file.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotData {
    pub num_users: u32,
    pub num_items: u32,
    pub dim: usize,
    pub num_layers: usize,
    pub user_emb: Vec<f64>,
    pub item_emb: Vec<f64>,
    pub betas: Vec<f64>,
}

pub fn write_snapshot(path: &Path, model: &Model) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let t = &model.table;
    writeln!(
        w,
        "{MAGIC} {} {} {} {}",
        t.num_users, t.num_items, t.dim, model.hp.num_layers
    )
    .map_err(|e| Error::io(path, e))?;
    let mut dump = |values: &[f64]| -> Result<()> {
        for v in values {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    };
    dump(&t.user_emb)?;
    dump(&t.item_emb)?;
    dump(&model.beta.betas())?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<SnapshotData> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)
            .map_err(|_| Error::SnapshotFormat("truncated header".into()))?;
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
        if header.len() > 256 {
            return Err(Error::SnapshotFormat("header line too long".into()));
        }
    }
    let header = String::from_utf8(header)
        .map_err(|_| Error::SnapshotFormat("header is not UTF-8".into()))?;
    let mut tokens = header.split_ascii_whitespace();
    if tokens.next() != Some(MAGIC) {
        return Err(Error::SnapshotFormat(format!(
            "bad magic in header {header:?}, expected {MAGIC}"
        )));
    }
    let mut next_num = |name: &str| -> Result<u64> {
        tokens
            .next()
            .ok_or_else(|| Error::SnapshotFormat(format!("missing {name} in header")))?
            .parse()
            .map_err(|_| Error::SnapshotFormat(format!("non-numeric {name} in header")))
    };
    let num_users = next_num("n")? as u32;
    let num_items = next_num("m")? as u32;
    let dim = next_num("d")? as usize;
    let num_layers = next_num("K")? as usize;

    let mut load = |len: usize, what: &str| -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::SnapshotFormat(format!("truncated {what} block")))?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let user_emb = load(num_users as usize * dim, "user embedding")?;
    let item_emb = load(num_items as usize * dim, "item embedding")?;
    let betas = load(num_layers + 1, "beta")?;

    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::SnapshotFormat("trailing bytes after beta block".into()));
    }

    Ok(SnapshotData {
        num_users,
        num_items,
        dim,
        num_layers,
        user_emb,
        item_emb,
        betas,
    })
}

impl SnapshotData {
    /// Reassembles a model around the stored parameters; mode fields
    /// (guide, beta trainability, tau, ...) come from `hp`.
    pub fn into_model(self, hp: crate::model::Hyperparams) -> Result<Model> {
        if hp.dim != self.dim {
            return Err(Error::SnapshotMismatch(format!(
                "config dim {} vs snapshot dim {}",
                hp.dim, self.dim
            )));
        }
        if hp.num_layers != self.num_layers {
            return Err(Error::SnapshotMismatch(format!(
                "config layers {} vs snapshot layers {}",
                hp.num_layers, self.num_layers
            )));
        }
        let table = EmbeddingTable::from_rows(
            self.num_users,
            self.num_items,
            self.dim,
            self.user_emb,
            self.item_emb,
        )?;
        let beta = LayerWeights::from_betas(
            &self.betas,
            matches!(hp.beta_mode, crate::model::BetaMode::Learned),
        )?;
        Ok(Model { hp, table, beta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BetaMode, GuideMode, Hyperparams};

    fn small_model() -> Model {
        let hp = Hyperparams {
            dim: 3,
            num_layers: 2,
            tau: 1.0,
            guide_mode: GuideMode::Interactive,
            beta_mode: BetaMode::Learned,
            l2_lambda: 1e-4,
            learning_rate: 1e-3,
        };
        let mut model = Model::init(hp, 4, 5, 77).unwrap();
        model.beta.logits_mut().copy_from_slice(&[0.1, -0.4, 0.9]);
        model
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.bin");
        let model = small_model();
        write_snapshot(&path, &model).unwrap();
        let data = read_snapshot(&path).unwrap();
        assert_eq!(data.num_users, 4);
        assert_eq!(data.num_items, 5);
        assert_eq!(data.dim, 3);
        assert_eq!(data.num_layers, 2);
        assert_eq!(data.user_emb, model.table.user_emb);
        assert_eq!(data.item_emb, model.table.item_emb);
        let want = model.beta.betas();
        for (a, b) in data.betas.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
        let restored = data.into_model(model.hp).unwrap();
        let b2 = restored.beta.betas();
        for (a, b) in b2.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_layer_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.bin");
        let model = small_model();
        write_snapshot(&path, &model).unwrap();
        let data = read_snapshot(&path).unwrap();
        let mut hp = model.hp;
        hp.num_layers = 3;
        let err = data.into_model(hp).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('2'), "{msg}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.bin");
        let model = small_model();
        write_snapshot(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_snapshot(&path),
            Err(Error::SnapshotFormat(_))
        ));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.bin");
        std::fs::write(&path, b"NOPE 1 1 1 0\n").unwrap();
        assert!(matches!(
            read_snapshot(&path),
            Err(Error::SnapshotFormat(_))
        ));
    }
}

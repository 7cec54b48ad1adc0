//! Checkpoint files: the core codec wrapped with file IO.

use std::path::Path;

use rst_core::TicketCheckpoint;

use crate::error::{Result, WorkbenchError};

pub fn save(path: &Path, ckpt: &TicketCheckpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| WorkbenchError::io(parent, e))?;
    }
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| WorkbenchError::io(path, e))
}

pub fn load(path: &Path) -> Result<TicketCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| WorkbenchError::io(path, e))?;
    TicketCheckpoint::from_bytes(&bytes).map_err(|e| match e {
        rst_core::Error::BadCheckpoint { offset, what } => WorkbenchError::BadFormat {
            path: path.into(),
            what,
            offset,
        },
        other => WorkbenchError::Core {
            stage: "checkpoint",
            source: other,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rst_core::{
        search_rst, AttackConfig, DataSplit, InitMethod, InitSpec, NetworkSpec, Prng, Schedule,
        SparsityPattern, Tensor,
    };

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut prng = Prng::new(1);
        let data = DataSplit::new(
            Tensor::new(&[8, 1, 1, 2], prng.vec_uniform(16, 0.0, 1.0)).unwrap(),
            (0..8).map(|i| i % 2).collect(),
            2,
        )
        .unwrap();
        let outcome = search_rst(
            &NetworkSpec::toy_linear((1, 1, 2), 2),
            InitSpec::new(InitMethod::SignedKaimingConstant, 4),
            &data,
            0.5,
            SparsityPattern::Element,
            &AttackConfig::fgsm(0.1, (0.0, 1.0)).unwrap(),
            &Schedule::new(2, 4, 0.1, 0.9, vec![], 0.1).unwrap(),
            Prng::new(5),
        )
        .unwrap();

        let dir = std::env::temp_dir().join(format!("rst-ckpt-{}", std::process::id()));
        let p1 = dir.join("a.ckpt");
        let p2 = dir.join("b.ckpt");
        save(&p1, &outcome.checkpoint).unwrap();
        let loaded = load(&p1).unwrap();
        save(&p2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "save -> load -> save must be byte-identical"
        );
        std::fs::remove_dir_all(&dir).ok();
    }
}

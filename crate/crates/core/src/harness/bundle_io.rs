//! On-disk model bundles: a directory holding `bundle.json`, the curve
//! basis and a parameter checkpoint with `deq/`, `lin/`, `hal/` and `ref/`
//! prefixes.

use std::fs;
use std::path::Path;

use diffcore::Checkpoint;
use serde::{Deserialize, Serialize};

use crate::crf::{load_basis, write_basis};
use crate::error::{invalid, Error, Result};
use crate::nets::{ModelBundle, Net, NetConfig};
use crate::objectives::LossWeights;

pub const BUNDLE_FILE: &str = "bundle.json";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleConfig {
    pub version: u32,
    pub net: NetConfig,
    pub gamma_thresh: f64,
    pub lambdas: LossWeights,
    /// Relative to the bundle directory.
    pub basis: String,
    pub params: String,
}

pub fn save_bundle(bundle: &ModelBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = BundleConfig {
        version: BUNDLE_VERSION,
        net: bundle.config.clone(),
        gamma_thresh: bundle.gamma_thresh,
        lambdas: bundle.lambdas,
        basis: "basis.emor".into(),
        params: "params.ckpt".into(),
    };
    write_basis(&bundle.basis, dir.join(&cfg.basis))?;
    let mut ckpt = Checkpoint::new();
    for net in Net::ALL {
        ckpt.add_params(net.prefix(), bundle.params(net))?;
    }
    let params = dir.join(&cfg.params);
    fs::write(&params, ckpt.to_bytes()).map_err(|e| Error::io(&params, e))?;
    let json = dir.join(BUNDLE_FILE);
    fs::write(&json, serde_json::to_string_pretty(&cfg)? + "\n").map_err(|e| Error::io(&json, e))
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<ModelBundle> {
    let dir = dir.as_ref();
    let json = dir.join(BUNDLE_FILE);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let cfg: BundleConfig = serde_json::from_str(&text)?;
    if cfg.version != BUNDLE_VERSION {
        return Err(Error::Format(format!(
            "unsupported bundle version {}",
            cfg.version
        )));
    }
    cfg.net.validate()?;
    if !(cfg.gamma_thresh > 0.0 && cfg.gamma_thresh < 1.0) {
        return Err(invalid!(
            "gamma_thresh must lie in (0, 1), got {}",
            cfg.gamma_thresh
        ));
    }
    cfg.lambdas.validate()?;
    let basis = load_basis(dir.join(&cfg.basis))?;
    let params = dir.join(&cfg.params);
    let bytes = fs::read(&params).map_err(|e| Error::io(&params, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    let bundle = ModelBundle {
        config: cfg.net,
        deq: ckpt.params(Net::Deq.prefix())?,
        lin: ckpt.params(Net::Lin.prefix())?,
        hal: ckpt.params(Net::Hal.prefix())?,
        refine: ckpt.params(Net::Ref.prefix())?,
        basis,
        gamma_thresh: cfg.gamma_thresh,
        lambdas: cfg.lambdas,
    };
    for net in Net::ALL {
        if bundle.params(net).is_empty() {
            return Err(Error::Format(format!(
                "checkpoint has no `{}` parameters",
                net.prefix()
            )));
        }
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::shipped_basis;
    use crate::nets::HeadInits;

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = ModelBundle::init(
            NetConfig::toy(),
            shipped_basis().clone(),
            HeadInits::default(),
            1,
        )
        .unwrap();
        save_bundle(&b, dir.path()).unwrap();
        assert_eq!(load_bundle(dir.path()).unwrap(), b);
    }
}

//! Versioned JSON archives for trained models.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::denoiser::{DenoiserPair, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::unet::UNet;
use crate::nn::ConditionalNet;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Archive<T> {
    format_version: u32,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_config: Option<TrainConfig>,
    payload: T,
}

/// Write `payload` under a `kind` tag.
pub fn save_archive<T: Serialize>(path: &Path, kind: &str, payload: &T, train_config: Option<&TrainConfig>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let archive = Archive { format_version: FORMAT_VERSION, kind: kind.to_string(), train_config: train_config.cloned(), payload };
    let text = serde_json::to_string(&archive)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read an archive written by [`save_archive`], checking version and kind.
pub fn load_archive<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<(T, Option<TrainConfig>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    let version = raw.get("format_version").and_then(Value::as_u64);
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Version(format!(
            "{}: format_version {:?}, expected {FORMAT_VERSION}",
            path.display(),
            version
        )));
    }
    let found = raw.get("kind").and_then(Value::as_str).unwrap_or("");
    if found != kind {
        return Err(Error::Version(format!("{}: archive kind '{found}', expected '{kind}'", path.display())));
    }
    let archive: Archive<T> =
        serde_json::from_value(raw).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    Ok((archive.payload, archive.train_config))
}

pub fn save_denoiser(path: &Path, pair: &DenoiserPair<UNet>, train_config: Option<&TrainConfig>) -> Result<()> {
    save_archive(path, "denoiser", pair, train_config)
}

pub fn load_denoiser(path: &Path) -> Result<DenoiserPair<UNet>> {
    load_denoiser_with_config(path).map(|(p, _)| p)
}

pub fn load_denoiser_with_config(path: &Path) -> Result<(DenoiserPair<UNet>, Option<TrainConfig>)> {
    let (mut pair, cfg): (DenoiserPair<UNet>, _) = load_archive(path, "denoiser")?;
    pair.schedule = pair.schedule.revalidate()?;
    for p in pair.restorer.params_mut().into_iter().chain(pair.noiser.params_mut()) {
        p.ensure_buffers();
    }
    Ok((pair, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ArchConfig;
    use crate::diffusion::Orientation;
    use crate::schedules::{make_schedule, NoiseShape, RestorationShape};

    fn small_pair() -> DenoiserPair<UNet> {
        let s = make_schedule(5, NoiseShape::Cosine, RestorationShape::Linear).unwrap();
        DenoiserPair::new_unet(&ArchConfig { base_width: 4, t_embedding_dim: 8 }, s, Orientation::HeMinusIhc, 3)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/ckpt.json");
        let pair = small_pair();
        let cfg = TrainConfig::default();
        save_denoiser(&path, &pair, Some(&cfg)).unwrap();
        let (back, back_cfg) = load_denoiser_with_config(&path).unwrap();
        assert_eq!(back, pair);
        assert_eq!(back_cfg, Some(cfg));
        assert_eq!(back.schedule.gammas(), pair.schedule.gammas());
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_denoiser(Path::new("/nonexistent/model.json")).unwrap_err();
        assert_eq!(err.kind(), "io");
        assert!(err.to_string().contains("/nonexistent/model.json"));
    }

    #[test]
    fn version_and_kind_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"format_version": 99, "kind": "denoiser", "payload": {}}"#).unwrap();
        assert_eq!(load_denoiser(&path).unwrap_err().kind(), "version");
        save_archive(&path, "classifier", &1u8, None).unwrap();
        assert_eq!(load_denoiser(&path).unwrap_err().kind(), "version");
    }
}

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KEY_MATERIAL_TYPE: &str = "CKM1";

/// How a DEK reached its master key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Wrapping {
    /// `wrapped_dek` was produced by the KMS under the master key.
    Single,
    /// `wrapped_dek` was wrapped locally under a KEK; the KEK itself was
    /// wrapped by the KMS.
    Double { kek_id: [u8; 16], wrapped_kek: String },
}

/// Everything a reader needs to recover one DEK, stored next to the data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    pub is_footer_key: bool,
    pub master_key_id: String,
    pub wrapped_dek: String,
    pub wrapping: Wrapping,
}

impl KeyMaterial {
    pub fn is_double_wrapped(&self) -> bool {
        matches!(self.wrapping, Wrapping::Double { .. })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeyMaterialJson {
    #[serde(rename = "keyMaterialType")]
    key_material_type: String,
    #[serde(rename = "isFooterKey")]
    is_footer_key: bool,
    #[serde(rename = "masterKeyID")]
    master_key_id: String,
    #[serde(rename = "doubleWrapping")]
    double_wrapping: bool,
    #[serde(rename = "wrappedDEK")]
    wrapped_dek: String,
    #[serde(rename = "kekID", default, skip_serializing_if = "Option::is_none")]
    kek_id: Option<String>,
    #[serde(rename = "wrappedKEK", default, skip_serializing_if = "Option::is_none")]
    wrapped_kek: Option<String>,
}

pub fn encode_key_material(km: &KeyMaterial) -> String {
    let (double_wrapping, kek_id, wrapped_kek) = match &km.wrapping {
        Wrapping::Single => (false, None, None),
        Wrapping::Double { kek_id, wrapped_kek } => (true, Some(BASE64.encode(kek_id)), Some(wrapped_kek.clone())),
    };
    let json = KeyMaterialJson {
        key_material_type: KEY_MATERIAL_TYPE.to_string(),
        is_footer_key: km.is_footer_key,
        master_key_id: km.master_key_id.clone(),
        double_wrapping,
        wrapped_dek: km.wrapped_dek.clone(),
        kek_id,
        wrapped_kek,
    };
    serde_json::to_string(&json).expect("key material serializes")
}

pub fn decode_key_material(s: &str) -> Result<KeyMaterial> {
    let json: KeyMaterialJson = serde_json::from_str(s).map_err(|e| Error::MalformedKeyMaterial(e.to_string()))?;
    if json.key_material_type != KEY_MATERIAL_TYPE {
        return Err(Error::MalformedKeyMaterial(format!(
            "unsupported keyMaterialType {:?}",
            json.key_material_type
        )));
    }
    if json.master_key_id.is_empty() {
        return Err(Error::MalformedKeyMaterial("empty masterKeyID".into()));
    }
    let wrapping = match (json.double_wrapping, json.kek_id, json.wrapped_kek) {
        (false, None, None) => Wrapping::Single,
        (true, Some(kek_id), Some(wrapped_kek)) => {
            let raw = BASE64
                .decode(&kek_id)
                .map_err(|e| Error::MalformedKeyMaterial(format!("kekID is not base64: {e}")))?;
            let kek_id: [u8; 16] = raw
                .try_into()
                .map_err(|_| Error::MalformedKeyMaterial("kekID must be 16 bytes".into()))?;
            Wrapping::Double { kek_id, wrapped_kek }
        }
        (true, _, _) => {
            return Err(Error::MalformedKeyMaterial(
                "doubleWrapping requires kekID and wrappedKEK".into(),
            ))
        }
        (false, _, _) => {
            return Err(Error::MalformedKeyMaterial(
                "kekID/wrappedKEK present without doubleWrapping".into(),
            ))
        }
    };
    Ok(KeyMaterial {
        is_footer_key: json.is_footer_key,
        master_key_id: json.master_key_id,
        wrapped_dek: json.wrapped_dek,
        wrapping,
    })
}

//! Model files and encoder weight archives.
//!
//! Both are safetensors containers. A model file carries, in the header
//! metadata, the format tag and version, the full [`VariantSpec`] as JSON, the
//! scalar type and a SHA-256 over the payload (`name \0 bytes` for every
//! tensor in name order). Tensor names are the model's parameter names.
//!
//! Encoder archives use the reference backbone's layer names unchanged,
//! e.g. `patch_embed1.proj.weight`, `block2.0.attn.kv.bias`, `norm4.weight`.
//! On load a leading `backbone.` or `encoder.` is stripped, so full-model
//! state dictionaries work too; anything else that does not match (such as a
//! classification `head.*`) is reported as unexpected.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::SafeTensors;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::backbone::MixTransformer;
use crate::error::{Error, Result};
use crate::model::{EsfpNet, VariantSpec};
use crate::nn::{Param, Parameterized};
use crate::scalar::Scalar;

pub const MODEL_FORMAT: &str = "esfpnet-model";
pub const ENCODER_FORMAT: &str = "esfpnet-encoder";
pub const FORMAT_VERSION: u32 = 1;

const ARCHIVE_PREFIXES: [&str; 2] = ["backbone.", "encoder."];

fn payload_digest<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> String {
    let mut h = Sha256::new();
    for (name, bytes) in tensors {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update(bytes);
    }
    format!("{:x}", h.finalize())
}

fn collect_params<T: Scalar>(
    visit: impl FnOnce(&mut dyn FnMut(&str, &Param<T>)),
) -> BTreeMap<String, (Vec<usize>, Vec<u8>)> {
    let mut out = BTreeMap::new();
    visit(&mut |name, p| {
        out.insert(
            name.to_string(),
            (p.value.shape().to_vec(), T::to_le_bytes_vec(p.value.data())),
        );
    });
    out
}

fn serialize<T: Scalar>(
    tensors: &BTreeMap<String, (Vec<usize>, Vec<u8>)>,
    mut metadata: HashMap<String, String>,
) -> Result<Vec<u8>> {
    metadata.insert(
        "payload_sha256".into(),
        payload_digest(tensors.iter().map(|(n, (_, b))| (n.as_str(), b.as_slice()))),
    );
    metadata.insert("scalar".into(), T::NAME.into());
    let views = tensors
        .iter()
        .map(|(name, (shape, bytes))| {
            TensorView::new(T::DTYPE, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Archive(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, &Some(metadata)).map_err(|e| Error::Archive(e.to_string()))
}

/// Write to a sibling temporary file and rename, so readers never see a
/// half-written file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialize a full model to bytes.
pub fn model_to_bytes<T: Scalar>(model: &EsfpNet<T>) -> Result<Vec<u8>> {
    let tensors = collect_params::<T>(|f| model.visit("", f));
    let spec = serde_json::to_string(&model.spec).map_err(|e| Error::Archive(e.to_string()))?;
    let metadata = HashMap::from([
        ("format".to_string(), MODEL_FORMAT.to_string()),
        ("format_version".to_string(), FORMAT_VERSION.to_string()),
        ("variant".to_string(), model.spec.id.clone()),
        ("spec".to_string(), spec),
    ]);
    serialize::<T>(&tensors, metadata)
}

pub fn save_model<T: Scalar>(model: &EsfpNet<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &model_to_bytes(model)?)
}

fn open_checked<'a>(
    bytes: &'a [u8],
    format: &str,
) -> Result<(SafeTensors<'a>, HashMap<String, String>)> {
    let (_, header) = SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Integrity(format!("unreadable container: {e}")))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let st = SafeTensors::deserialize(bytes)
        .map_err(|e| Error::Integrity(format!("unreadable container: {e}")))?;
    match meta.get("format") {
        Some(f) if f == format => {}
        other => {
            return Err(Error::Integrity(format!(
                "expected a `{format}` file, found format {:?}",
                other.map(String::as_str).unwrap_or("<none>")
            )))
        }
    }
    let version = meta
        .get("format_version")
        .map(String::as_str)
        .unwrap_or("<none>");
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::Version {
            found: version.to_string(),
            supported: FORMAT_VERSION,
        });
    }
    let mut names: Vec<String> = st.names().into_iter().cloned().collect();
    names.sort();
    let views: Vec<(String, TensorView<'a>)> = names
        .into_iter()
        .map(|n| {
            let v = st.tensor(&n).expect("name listed by the container");
            (n, v)
        })
        .collect();
    let digest = payload_digest(views.iter().map(|(n, v)| (n.as_str(), v.data())));
    if meta.get("payload_sha256") != Some(&digest) {
        return Err(Error::Integrity("payload checksum mismatch".into()));
    }
    Ok((st, meta))
}

fn read_tensor<T: Scalar>(name: &str, view: &TensorView<'_>, expected: &[usize]) -> Result<Vec<T>> {
    if view.shape() != expected {
        return Err(Error::TensorShape {
            name: name.to_string(),
            expected: expected.to_vec(),
            actual: view.shape().to_vec(),
        });
    }
    T::from_le_bytes_slice(view.data(), view.dtype()).ok_or_else(|| {
        Error::Archive(format!(
            "tensor `{name}` has unsupported dtype {:?}",
            view.dtype()
        ))
    })
}

/// Parse a model from bytes. With `expected_variant`, a file holding a
/// different variant id is rejected.
pub fn model_from_bytes<T: Scalar>(
    bytes: &[u8],
    expected_variant: Option<&str>,
) -> Result<EsfpNet<T>> {
    let (st, meta) = open_checked(bytes, MODEL_FORMAT)?;
    let spec_json = meta
        .get("spec")
        .ok_or_else(|| Error::Integrity("model file has no variant spec".into()))?;
    let spec: VariantSpec = serde_json::from_str(spec_json)
        .map_err(|e| Error::Integrity(format!("bad variant spec: {e}")))?;
    if let Some(expected) = expected_variant {
        let want = VariantSpec::from_id(expected)
            .map(|s| s.id)
            .unwrap_or_else(|_| expected.to_string());
        if spec.id != want {
            return Err(Error::VariantMismatch {
                expected: want,
                found: spec.id,
            });
        }
    }
    let mut model = EsfpNet::<T>::new(spec, 0, 0.0)?;
    let mut present: BTreeSet<String> = st.names().into_iter().cloned().collect();
    let mut failure = None;
    model.visit_mut("", &mut |name, p| {
        if failure.is_some() {
            return;
        }
        let loaded = match st.tensor(name) {
            Ok(view) => read_tensor::<T>(name, &view, p.value.shape()),
            Err(_) => Err(Error::Integrity(format!("missing tensor `{name}`"))),
        };
        match loaded {
            Ok(data) => {
                p.value.data_mut().copy_from_slice(&data);
                present.remove(name);
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = present.into_iter().next() {
        return Err(Error::Integrity(format!("unexpected tensor `{extra}`")));
    }
    Ok(model)
}

/// Load a model file, trusting the variant recorded in it.
pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<EsfpNet<T>> {
    model_from_bytes(&fs::read(path)?, None)
}

/// Load a model file and require it to hold `variant`.
pub fn load_model_strict<T: Scalar>(path: impl AsRef<Path>, variant: &str) -> Result<EsfpNet<T>> {
    model_from_bytes(&fs::read(path)?, Some(variant))
}

/// Outcome of applying a weight archive to an encoder.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PretrainedManifest {
    pub loaded: Vec<String>,
    /// Encoder parameters absent from the archive (left at their initial values).
    pub missing: Vec<String>,
    /// Archive tensors that matched no encoder parameter.
    pub unexpected: Vec<String>,
}

impl PretrainedManifest {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

/// Serialize encoder weights under their reference names.
pub fn encoder_to_bytes<T: Scalar>(encoder: &MixTransformer<T>) -> Result<Vec<u8>> {
    let tensors = collect_params::<T>(|f| encoder.visit("", f));
    let metadata = HashMap::from([
        ("format".to_string(), ENCODER_FORMAT.to_string()),
        ("format_version".to_string(), FORMAT_VERSION.to_string()),
    ]);
    serialize::<T>(&tensors, metadata)
}

pub fn save_encoder_archive<T: Scalar>(
    encoder: &MixTransformer<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_atomic(path.as_ref(), &encoder_to_bytes(encoder)?)
}

fn reference_name(name: &str) -> &str {
    ARCHIVE_PREFIXES
        .iter()
        .find_map(|p| name.strip_prefix(p))
        .unwrap_or(name)
}

/// Overwrite `encoder` parameters from archive bytes.
///
/// Every matched tensor is shape-checked before anything is written, so a
/// mismatch leaves the encoder untouched. Only the container itself is
/// required to be well formed; format metadata is optional so that archives
/// converted by external tools load as well.
pub fn apply_pretrained<T: Scalar>(
    encoder: &mut MixTransformer<T>,
    bytes: &[u8],
) -> Result<PretrainedManifest> {
    let st = SafeTensors::deserialize(bytes)
        .map_err(|e| Error::Archive(format!("unreadable archive: {e}")))?;
    let mut by_ref: BTreeMap<&str, String> = BTreeMap::new();
    for name in st.names() {
        by_ref.insert(reference_name(name), name.clone());
    }

    let mut staged: Vec<(String, Vec<T>)> = Vec::new();
    let mut manifest = PretrainedManifest::default();
    let mut failure = None;
    encoder.visit("", &mut |name, p| {
        if failure.is_some() {
            return;
        }
        match by_ref.remove(name) {
            Some(stored) => {
                let view = st.tensor(&stored).expect("name listed by the archive");
                match read_tensor::<T>(name, &view, p.value.shape()) {
                    Ok(data) => staged.push((name.to_string(), data)),
                    Err(e) => failure = Some(e),
                }
            }
            None => manifest.missing.push(name.to_string()),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let mut staged = staged.into_iter();
    encoder.visit_mut("", &mut |name, p| {
        if manifest.missing.iter().any(|m| m == name) {
            return;
        }
        let (n, data) = staged
            .next()
            .expect("one staged tensor per loaded parameter");
        debug_assert_eq!(n, name);
        p.value.data_mut().copy_from_slice(&data);
        manifest.loaded.push(n);
    });
    manifest.unexpected = by_ref.into_values().collect();
    Ok(manifest)
}

/// Randomly initialized encoder for `spec`, then overwritten from the archive at `path`.
pub fn load_pretrained<T: Scalar>(
    path: impl AsRef<Path>,
    spec: &VariantSpec,
    seed: u64,
) -> Result<(MixTransformer<T>, PretrainedManifest)> {
    let bytes = fs::read(path)?;
    let mut model = EsfpNet::<T>::new(spec.clone(), seed, 0.0)?;
    let manifest = apply_pretrained(&mut model.encoder, &bytes)?;
    Ok((model.encoder, manifest))
}

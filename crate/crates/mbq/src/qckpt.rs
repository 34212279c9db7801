//! Quantized checkpoint directory: `manifest.json`, one packed blob per
//! linear layer and the layer's equalization vector as a 1 × n MBT1 tensor.

use std::fs;
use std::path::Path;

use mbq_core::calib::{Candidate, ErrorTable, EqualizationVector, ModalWeights};
use mbq_core::pack::{decode_blob, encode_blob};
use mbq_core::pipeline::{capture_inputs, objective_values, LayerQuant, Method, QuantizedModel, Scheme};
use mbq_core::quant::{quantize, QuantSpec};
use mbq_core::toyvlm::{token_grad_weights_all, LinearId, ModelConfig, SyntheticSample, ToyModel};
use mbq_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::format::{load_mbt, read_json, save_mbt, write_json};

pub const QUANT_FORMAT: &str = "mbq-quantized/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantManifest {
    pub format: String,
    pub method: Method,
    pub scheme: Scheme,
    pub group_size: usize,
    pub vision_factor: f64,
    /// Seed of the random-split relabeling streams.
    pub seed: u64,
    pub model: ModelConfig,
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer: String,
    pub spec: QuantSpec,
    pub shape: [usize; 2],
    pub blob: String,
    pub equalization: String,
    pub chosen: Candidate,
    pub objective_value: Option<f64>,
    pub candidate_values: Vec<(Candidate, f64)>,
    pub g_vision: Option<f64>,
    pub g_language: Option<f64>,
    pub recon_mse: f64,
    pub recon_weighted_mae: Option<f64>,
}

/// Settings needed to reproduce a checkpoint's search.
#[derive(Debug, Clone, Copy)]
pub struct QuantMeta {
    pub group_size: usize,
    pub vision_factor: f64,
    pub seed: u64,
}

pub fn save_quantized(dir: &Path, qm: &QuantizedModel, model: &ModelConfig, meta: QuantMeta) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let mut layers = Vec::with_capacity(qm.layers.len());
    for l in &qm.layers {
        let name = l.layer.name();
        let blob = format!("{name}.blob");
        let equalization = format!("{name}.e.mbt");
        fs::write(dir.join(&blob), encode_blob(&l.weight)?).at(dir.join(&blob))?;
        let e = Matrix::new(1, l.e.len(), l.e.factors().to_vec())?;
        save_mbt(&dir.join(&equalization), &e, None)?;
        layers.push(LayerEntry {
            layer: name,
            spec: l.weight.spec,
            shape: [l.weight.rows, l.weight.cols],
            blob,
            equalization,
            chosen: l.chosen,
            objective_value: l.objective_value,
            candidate_values: l.candidate_values.clone(),
            g_vision: l.g_vision,
            g_language: l.g_language,
            recon_mse: l.recon_mse,
            recon_weighted_mae: l.recon_weighted_mae,
        });
    }
    let manifest = QuantManifest {
        format: QUANT_FORMAT.into(),
        method: qm.method,
        scheme: qm.scheme,
        group_size: meta.group_size,
        vision_factor: meta.vision_factor,
        seed: meta.seed,
        model: *model,
        layers,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<QuantManifest> {
    let m: QuantManifest = read_json(&dir.join("manifest.json"))?;
    if m.format != QUANT_FORMAT {
        return Err(Error::Format(format!("{}: unsupported checkpoint format '{}'", dir.display(), m.format)));
    }
    Ok(m)
}

pub fn load_quantized(dir: &Path) -> Result<(QuantizedModel, QuantManifest)> {
    let manifest = read_manifest(dir)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let layer = LinearId::parse(&entry.layer)
            .ok_or_else(|| Error::Format(format!("unknown layer name '{}'", entry.layer)))?;
        let bytes = fs::read(dir.join(&entry.blob)).at(dir.join(&entry.blob))?;
        let weight = decode_blob(&bytes, &entry.spec)?;
        if [weight.rows, weight.cols] != entry.shape {
            return Err(Error::Format(format!("{}: blob shape disagrees with manifest", entry.blob)));
        }
        let (e, _) = load_mbt(&dir.join(&entry.equalization))?;
        if e.shape() != (1, entry.shape[1]) {
            return Err(Error::Format(format!("{}: expected 1 x {} factors", entry.equalization, entry.shape[1])));
        }
        layers.push(LayerQuant {
            layer,
            chosen: entry.chosen,
            e: EqualizationVector::new(e.into_data())?,
            weight,
            objective_value: entry.objective_value,
            candidate_values: entry.candidate_values.clone(),
            g_vision: entry.g_vision,
            g_language: entry.g_language,
            recon_mse: entry.recon_mse,
            recon_weighted_mae: entry.recon_weighted_mae,
        });
    }
    Ok((QuantizedModel { method: manifest.method, scheme: manifest.scheme, layers }, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAudit {
    pub layer: String,
    /// Stored codes, scales and zeros equal a fresh quantization of `W ⊙ E`.
    pub weights_match: bool,
    pub stored_objective: Option<f64>,
    pub recomputed_objective: Option<f64>,
    /// Stored value is the minimum of the stored candidate curve.
    pub is_argmin: bool,
}

impl LayerAudit {
    pub fn ok(&self) -> bool {
        self.weights_match && self.is_argmin && self.stored_objective == self.recomputed_objective
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub ok: bool,
    pub layers: Vec<LayerAudit>,
}

/// Recomputes every stored objective value at the stored `E` from the FP
/// model and the calibration samples the checkpoint was built from.
pub fn verify(dir: &Path, fp: &ToyModel, calib: &[SyntheticSample]) -> Result<Audit> {
    let (qm, manifest) = load_quantized(dir)?;
    if manifest.model != *fp.config() {
        return Err(Error::Format("checkpoint was made for a different model configuration".into()));
    }
    let inputs = capture_inputs(fp, calib)?;
    let token_weights = match qm.method {
        Method::TokenWise => Some(token_grad_weights_all(fp, calib)?),
        _ => None,
    };
    let specs = qm.scheme.specs(manifest.group_size);
    let mut layers = Vec::new();
    for l in &qm.layers {
        let w = fp.linear_weight(l.layer);
        let fresh = quantize(&w.scale_cols(l.e.factors())?, &specs.weight.fit_to(w.cols()))?;
        let recomputed = match qm.method.objective(manifest.vision_factor) {
            None => None,
            Some(kind) => {
                let table = ErrorTable::for_vector(&w, &inputs[l.layer.index()], &specs, qm.scheme.mode(), &l.e)?;
                let sens = match (l.g_vision, l.g_language) {
                    (Some(v), Some(g)) => Some(ModalWeights::new(v, g)?),
                    _ => None,
                };
                let tw = token_weights.as_ref().map(|t| &t[l.layer.index()]);
                Some(objective_values(&table, kind, sens, tw, manifest.seed, l.layer)?[0])
            }
        };
        let is_argmin = match l.objective_value {
            None => l.chosen == Candidate::Identity,
            Some(v) => l.candidate_values.iter().all(|(_, c)| v <= *c) && l.candidate_values.iter().any(|(c, x)| *c == l.chosen && *x == v),
        };
        layers.push(LayerAudit {
            layer: l.layer.name(),
            weights_match: fresh == l.weight,
            stored_objective: l.objective_value,
            recomputed_objective: recomputed,
            is_argmin,
        });
    }
    Ok(Audit { ok: layers.iter().all(LayerAudit::ok), layers })
}

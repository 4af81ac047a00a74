//! Writing synthetic captures to disk, and the JSON job format read by
//! `routelens synth`.

use std::path::Path;

use routelens_core::synth::{self, AmplifiedRouting, SynthError, SynthSpec, SyntheticCapture};
use serde::{Deserialize, Serialize};

use crate::capture::{
    Capture, CaptureError, CaptureManifest, CaptureWriter, Dtype, LayerData, Selections,
    SequenceText, FORMAT_VERSION,
};

/// Language codes assigned to synthetic language indices, in order.
pub const LANGUAGE_CODES: [&str; 12] = [
    "en", "zh", "es", "fr", "de", "ja", "ko", "ru", "pt", "it", "ar", "hi",
];

pub const SYNTH_HOOK_POINT: &str = "synthetic router input";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    #[default]
    Capture,
    Paths,
    Amplification,
}

/// Contents of a `--spec` file: the generator parameters plus which
/// generator to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthJob {
    #[serde(default)]
    pub generator: Generator,
    /// Only read by the amplification generator.
    #[serde(default = "default_routing")]
    pub routing: AmplifiedRouting,
    #[serde(default = "default_model_name")]
    pub model_name: String,
    #[serde(flatten)]
    pub spec: SynthSpec,
}

fn default_routing() -> AmplifiedRouting {
    AmplifiedRouting::Dense
}

fn default_model_name() -> String {
    "synthetic".into()
}

impl SynthJob {
    pub fn generate(&self) -> Result<SyntheticCapture, SynthError> {
        match self.generator {
            Generator::Capture => synth::gen_synthetic_capture(&self.spec),
            Generator::Paths => synth::plant_paths(&self.spec),
            Generator::Amplification => {
                synth::plant_amplification(&self.spec, self.routing).map(|(c, _)| c)
            }
        }
    }
}

pub fn synthetic_manifest(
    cap: &SyntheticCapture,
    model_name: &str,
    languages: &[String],
) -> CaptureManifest {
    let n = cap.layers.len();
    CaptureManifest {
        format_version: FORMAT_VERSION,
        model_name: model_name.to_string(),
        num_layers: n,
        hidden_dim: cap.spec.hidden_dim,
        experts_per_layer: cap.layers.iter().map(|l| l.router.rows()).collect(),
        top_k: 1,
        dtype: Dtype::F32,
        layer_index_map: (0..n as u32).collect(),
        token_count: cap.meta.len(),
        languages: languages.to_vec(),
        hook_point: SYNTH_HOOK_POINT.into(),
        has_router_scores: false,
        vocab_size: Some(cap.spec.vocab_size),
        notes: Default::default(),
    }
}

fn default_languages(count: u8) -> Result<Vec<String>, CaptureError> {
    if count as usize > LANGUAGE_CODES.len() {
        return Err(CaptureError::Invalid(format!(
            "at most {} synthetic languages are supported",
            LANGUAGE_CODES.len()
        )));
    }
    Ok(LANGUAGE_CODES[..count.max(1) as usize]
        .iter()
        .map(|s| s.to_string())
        .collect())
}

/// Writes `cap` as an f32 capture with recorded selections.
pub fn write_synthetic(
    cap: &SyntheticCapture,
    dir: impl AsRef<Path>,
    model_name: &str,
) -> Result<Capture, CaptureError> {
    let languages = default_languages(cap.spec.num_languages)?;
    write_with(
        cap,
        dir,
        synthetic_manifest(cap, model_name, &languages),
        &[],
    )
}

pub(crate) fn write_with(
    cap: &SyntheticCapture,
    dir: impl AsRef<Path>,
    manifest: CaptureManifest,
    sequences: &[SequenceText],
) -> Result<Capture, CaptureError> {
    let mut w = CaptureWriter::create(dir, manifest)?;
    for (i, layer) in cap.layers.iter().enumerate() {
        w.write_layer(LayerData {
            layer: i as u32,
            router: &layer.router,
            states: &layer.states,
            meta: &cap.meta,
            top1: Selections::All(&layer.top1),
            scores: None,
        })?;
    }
    if !sequences.is_empty() {
        w.write_sequences(sequences)?;
    }
    w.finish()
}

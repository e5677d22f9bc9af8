//! JSON Schema of [`PipelineConfig`], derived from the default document so
//! every key carries its default, plus a description table.

use serde_json::{json, Map, Value};

use crate::config::PipelineConfig;

/// Description of every documented key, by JSON pointer.
pub const DESCRIPTIONS: &[(&str, &str)] = &[
    ("/flow_degrade", "Flow-based degradation of clean clips."),
    ("/flow_degrade/tau_px", "Flow magnitude in pixels above which a pixel counts as moving."),
    ("/flow_degrade/block_px", "Block edge in pixels for blur kernel selection."),
    ("/flow_degrade/density", "Fraction of the moving area covered by blending ellipses."),
    ("/flow_degrade/samples_k", "Previous-frame samples averaged inside each ellipse."),
    ("/flow_degrade/strength_min", "Lower bound of the per-ellipse blending strength."),
    ("/flow_degrade/strength_max", "Upper bound of the per-ellipse blending strength."),
    ("/flow_degrade/apply_at", "Resolution the degradation is applied at: low or high."),
    ("/sdedit", "Model-guided degradation of conditioning latents."),
    ("/sdedit/alpha", "Noise ratio in [0, 1]; 0 leaves the latent unchanged."),
    ("/sdedit/steps", "Euler steps from alpha back to 0."),
    ("/model", "Network shape. Attention settings live in /attention."),
    ("/model/codec", "Latent codec."),
    ("/model/codec/fs", "Spatial patch edge of the codec."),
    ("/model/codec/ft", "Frames folded into each latent frame after the first."),
    ("/model/width", "Token width of the transformer."),
    ("/model/heads", "Attention heads; must divide width."),
    ("/model/depth", "Transformer blocks; even so shifted layers pair up."),
    ("/model/upsample", "Spatial upsampling factor from condition to output."),
    ("/model/cond_kernel", "Odd (t, h, w) extents of both conditioning convolutions."),
    ("/model/text_dim", "Width of the text embedding slot."),
    ("/model/mlp_ratio", "Feed-forward expansion factor."),
    ("/model/seed", "Parameter initialization seed."),
    ("/train", "Training recipe shared by the three stages."),
    ("/train/batch", "Samples per optimizer step."),
    ("/train/lr", "Learning rate."),
    ("/train/weight_decay", "Decoupled weight decay."),
    ("/train/optimizer", "adamw or sgd."),
    ("/train/momentum", "Momentum of sgd."),
    ("/train/noise_aug", "Interval the conditioning noise level is drawn from."),
    ("/train/noise_aug/lo", "Lowest noise level."),
    ("/train/noise_aug/hi", "Highest noise level."),
    ("/train/text_dropout", "Probability of replacing the text embedding by the null prompt."),
    ("/train/seed", "Seed of per-step sample draws."),
    ("/train/stage_steps", "Optimizer steps of stages 1, 2 and 3."),
    ("/train/dataset", "Synthetic training clips."),
    ("/train/dataset/clips", "Number of clips."),
    ("/train/dataset/frames", "Frames per clip; must be 1 mod the temporal folding factor."),
    ("/train/dataset/height", "Frame height in pixels."),
    ("/train/dataset/width", "Frame width in pixels."),
    ("/train/dataset/seed", "Seed of clip content."),
    ("/train/long_frames", "Frames per clip in stage 3."),
    ("/sampler", "Timestep sampling."),
    ("/sampler/train_with", "\"uniform\", or {\"detail-aware\": {\"path\": sampler.csv}}."),
    ("/sampler/traces", "Held-out synthetic clips traced by sampler build without --clips."),
    ("/sampler/steps", "Denoising steps per trace."),
    ("/sampler/aug_level", "Conditioning noise level while tracing."),
    ("/sampler/seed", "Seed of traced clips and their noise."),
    ("/sampler/detail", "Detail-aware distribution construction."),
    ("/sampler/detail/hf_cut", "Normalized frequency above which DCT coefficients count as detail."),
    ("/sampler/detail/norm", "l1 or l2 norm of per-step detail change."),
    ("/attention", "Attention of every transformer block."),
    ("/attention/mode", "full, swin or sparse-local."),
    ("/attention/window", "Window extents (h, w) in latent tokens."),
    ("/attention/top_k", "Extra windows each window attends to in sparse-local mode."),
    ("/attention/selection", "window-mean or per-query window ranking."),
    ("/attention/temporal", "Temporal units."),
    ("/attention/temporal/unit", "Latent frames per unit."),
    ("/attention/temporal/shift", "Frames the units are rolled by on odd layers."),
    ("/attention/temporal/shift_enabled", "Whether odd layers use rolled units."),
    ("/curation", "Clip screening."),
    ("/curation/frames", "Frames sampled uniformly per clip."),
    ("/curation/brightness_min", "Lowest accepted mean luma in [0, 1]."),
    ("/curation/brightness_max", "Highest accepted mean luma in [0, 1]."),
    ("/curation/laplacian_min", "Lowest accepted Laplacian variance on the 0-255 luma scale."),
    ("/curation/musiq_min", "Lowest accepted external quality score."),
    ("/curation/musiq_command", "Scorer command; the clip path is appended and a number is read from stdout. null disables the filter."),
];

/// Allowed values of enumerated keys.
const ENUMS: &[(&str, &[&str])] = &[
    ("/flow_degrade/apply_at", &["low", "high"]),
    ("/train/optimizer", &["adamw", "sgd"]),
    ("/sampler/detail/norm", &["l1", "l2"]),
    ("/attention/mode", &["full", "swin", "sparse-local"]),
    ("/attention/selection", &["window-mean", "per-query"]),
];

fn description(pointer: &str) -> Option<&'static str> {
    DESCRIPTIONS.iter().find(|d| d.0 == pointer).map(|d| d.1)
}

fn node(pointer: &str, value: &Value) -> Value {
    let mut out = Map::new();
    if let Some(d) = description(pointer) {
        out.insert("description".into(), json!(d));
    }
    if pointer == "/sampler/train_with" {
        out.insert(
            "oneOf".into(),
            json!([
                {"const": "uniform"},
                {
                    "type": "object",
                    "additionalProperties": false,
                    "required": ["detail-aware"],
                    "properties": {"detail-aware": {
                        "type": "object",
                        "additionalProperties": false,
                        "required": ["path"],
                        "properties": {"path": {"type": "string"}}
                    }}
                }
            ]),
        );
        out.insert("default".into(), value.clone());
        return Value::Object(out);
    }
    if pointer == "/curation/musiq_command" {
        out.insert("type".into(), json!(["array", "null"]));
        out.insert("items".into(), json!({"type": "string"}));
        out.insert("default".into(), value.clone());
        return Value::Object(out);
    }
    match value {
        Value::Object(fields) => {
            out.insert("type".into(), json!("object"));
            out.insert("additionalProperties".into(), json!(false));
            let props: Map<String, Value> = fields
                .iter()
                .map(|(k, v)| (k.clone(), node(&format!("{pointer}/{k}"), v)))
                .collect();
            out.insert("properties".into(), Value::Object(props));
        }
        Value::Array(items) => {
            out.insert("type".into(), json!("array"));
            out.insert("minItems".into(), json!(items.len()));
            out.insert("maxItems".into(), json!(items.len()));
            if let Some(first) = items.first() {
                out.insert("items".into(), json!({"type": scalar_type(first)}));
            }
            out.insert("default".into(), value.clone());
        }
        _ => {
            out.insert("type".into(), json!(scalar_type(value)));
            if let Some((_, allowed)) = ENUMS.iter().find(|e| e.0 == pointer) {
                out.insert("enum".into(), json!(allowed));
            }
            out.insert("default".into(), value.clone());
        }
    }
    Value::Object(out)
}

fn scalar_type(v: &Value) -> &'static str {
    match v {
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_u64() || n.is_i64() => "integer",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Null => "null",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

pub fn schema() -> Value {
    let defaults = serde_json::to_value(PipelineConfig::default()).expect("config serializes");
    let mut root = match node("", &defaults) {
        Value::Object(m) => m,
        _ => unreachable!("the config is an object"),
    };
    let mut head = Map::new();
    head.insert("$schema".into(), json!("https://json-schema.org/draft/2020-12/schema"));
    head.insert("title".into(), json!("gvr pipeline configuration"));
    head.append(&mut root);
    Value::Object(head)
}

pub fn schema_text() -> String {
    serde_json::to_string_pretty(&schema()).expect("schema serializes") + "\n"
}

/// Pointers of every key of the default document.
pub fn default_pointers() -> Vec<String> {
    fn walk(pointer: String, v: &Value, out: &mut Vec<String>) {
        if let Value::Object(m) = v {
            for (k, v) in m {
                let p = format!("{pointer}/{k}");
                out.push(p.clone());
                if p != "/sampler/train_with" {
                    walk(p, v, out);
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(String::new(), &serde_json::to_value(PipelineConfig::default()).unwrap(), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_is_documented() {
        let missing: Vec<String> = default_pointers().into_iter().filter(|p| description(p).is_none()).collect();
        assert!(missing.is_empty(), "undocumented keys: {missing:?}");
        let pointers = default_pointers();
        let stale: Vec<&str> = DESCRIPTIONS.iter().map(|d| d.0).filter(|p| !pointers.iter().any(|q| q == p)).collect();
        assert!(stale.is_empty(), "descriptions of unknown keys: {stale:?}");
    }

    #[test]
    fn enum_defaults_are_allowed() {
        let defaults = serde_json::to_value(PipelineConfig::default()).unwrap();
        for (pointer, allowed) in ENUMS {
            let v = defaults.pointer(pointer).and_then(Value::as_str).unwrap();
            assert!(allowed.contains(&v), "{pointer} = {v}");
        }
    }

    #[test]
    fn enum_values_parse() {
        for (pointer, allowed) in ENUMS {
            for value in *allowed {
                let mut doc = serde_json::to_value(PipelineConfig::default()).unwrap();
                *doc.pointer_mut(pointer).unwrap() = json!(value);
                PipelineConfig::from_json(&doc.to_string()).unwrap_or_else(|e| panic!("{pointer} = {value}: {e}"));
            }
        }
    }
}

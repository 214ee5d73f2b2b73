#![allow(dead_code)]

use std::path::PathBuf;

use serde_json::Value;
use vqvc_core::model::Model;
use vqvc_core::quantizer::{IndexGrid, StageIndices};
use vqvc_core::weights::WeightBundle;
use vqvc_core::Tensor;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

pub fn fixture(name: &str) -> Value {
    let text = std::fs::read_to_string(fixture_dir().join(name)).expect("fixture file");
    serde_json::from_str(&text).expect("fixture json")
}

pub fn tensor(v: &Value) -> Tensor {
    let shape = v["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap() as usize).collect();
    let data = v["data"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap() as f32).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn grid(v: &Value) -> IndexGrid {
    let stages = v
        .as_array()
        .unwrap()
        .iter()
        .map(|s| {
            let plane = |i: usize| s["planes"][i].as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as u32).collect();
            StageIndices {
                height: s["height"].as_u64().unwrap() as usize,
                width: s["width"].as_u64().unwrap() as usize,
                planes: [plane(0), plane(1)],
            }
        })
        .collect();
    IndexGrid { stages }
}

pub fn golden_model() -> Model {
    Model::from_bundle(WeightBundle::load(fixture_dir().join("weights.vqvcw")).unwrap()).unwrap()
}

/// Integer-defined test images shared with the reference generator.
pub fn pattern_image(kind: &str, c: usize, h: usize, w: usize) -> Tensor {
    let hash = |i: u64, k: u64| (i * 2654435761 + k * 40503) & 0xFFFF_FFFF;
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = ((i / (h * w)) as u64, ((i / w) % h) as u64, (i % w) as u64);
        let base = (x * 3 + y * 2 + ch * 50 + hash(i as u64, 1) % 64) % 256;
        let v = match kind {
            "a" => base,
            "b" => (base * 3 / 4 + hash(i as u64, 2) % 48) % 256,
            _ => 255 - base,
        };
        v as f32 / 255.0
    })
}

pub struct GoldenCheck {
    pub stage: &'static str,
    pub max_abs: f32,
    pub grids_exact: bool,
}

/// Runs every pipeline stage on its fixture input.
pub fn golden_checks() -> Vec<GoldenCheck> {
    use vqvc_core::autoencoder::DecoderVariant;
    use vqvc_core::context::wca_layer;
    use vqvc_core::Numerics;

    let m = golden_model();
    let num = Numerics::default();
    let mut out = Vec::new();
    let mut push = |stage, got: Tensor, want: &Value, grids_exact| {
        let want = tensor(want);
        assert_eq!(got.shape(), want.shape(), "{stage}");
        out.push(GoldenCheck { stage, max_abs: got.max_abs_diff(&want), grids_exact });
    };

    let f = fixture("encode_image.json");
    push("encode_image", m.autoencoder.encode_image(&tensor(&f["input"]), &num).unwrap(), &f["output"], true);

    let f = fixture("decode_image.json");
    let x = m.autoencoder.decode_image(&tensor(&f["input"]), DecoderVariant::Standard, &num).unwrap();
    push("decode_image", x, &f["output"], true);

    let f = fixture("wca_layer.json");
    let (cur, reference) = (tensor(&f["current"]), tensor(&f["reference"]));
    let ctx = &m.context_encoder;
    let y = wca_layer(&cur, &reference, ctx.config(), &ctx.blocks()[0].wca, &num).unwrap();
    push("wca_layer", y, &f["output"], true);

    let f = fixture("context_encode.json");
    let y = m.context_encoder.run(&tensor(&f["current"]), &tensor(&f["reference"]), &num).unwrap();
    push("context_encode", y, &f["output"], true);

    let f = fixture("context_decode.json");
    let y = m.context_decoder.run(&tensor(&f["current"]), &tensor(&f["reference"]), &num).unwrap();
    push("context_decode", y, &f["output"], true);

    let f = fixture("multistage_quantize.json");
    let (g, yhat) = m.keyframe.quantize(&tensor(&f["input"]), &num).unwrap();
    push("multistage_quantize", yhat, &f["output"], g == grid(&f["grids"]));
    out
}

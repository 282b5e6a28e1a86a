//! Writing generated sequences to disk: `frame_%04d.png` plus `run.json`.

use std::path::Path;

use serde_json::{json, Value};
use streetscape_core::Result;
use streetscape_scene::png::write_png;

use crate::config::SamplerConfig;
use crate::engine::StreetscapeRun;

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:04}.png")
}

pub fn sampler_json(c: &SamplerConfig) -> Value {
    json!({
        "steps": c.steps,
        "cfg_scale": c.cfg_scale,
        "resample": c.resample,
        "warp_init": c.warp_init,
        "context": c.context,
        "control_scale": c.control_scale,
        "seed": c.seed,
    })
}

/// Writes every frame and a run manifest. `extra` is merged into the manifest
/// (seeds, trajectory file, mode, ...).
pub fn write_run(dir: &Path, run: &StreetscapeRun, config: &SamplerConfig, extra: Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, f) in run.frames.iter().enumerate() {
        write_png(f, dir.join(frame_name(i)))?;
    }
    let frames: Vec<Value> = run
        .cameras
        .iter()
        .zip(&run.steps)
        .enumerate()
        .map(|(i, (cam, step))| {
            json!({
                "file": frame_name(i),
                "step": step,
                "camera": cam.to_record().to_vec(),
            })
        })
        .collect();
    let mut manifest = json!({
        "sampler": sampler_json(config),
        "frames": frames,
        "model_calls": run.model_calls,
        "known_mismatches": run.known_mismatches,
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut manifest, extra) {
        m.extend(e);
    }
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| streetscape_core::Error::format(e.to_string()))?;
    std::fs::write(dir.join("run.json"), text + "\n")?;
    Ok(())
}

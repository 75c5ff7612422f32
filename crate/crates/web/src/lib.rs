//! Browser bindings: quadrature energy phase response, architecture counts,
//! and synthetic motion clips.

use artnet::architectures::{analyze, text_report, ArchName, ArchSpec, Conventions, REFERENCE_CLASSES};
use artnet::data::{Task, TaskSpec, DIRECTIONS};
use artnet::relation_math::{argmax, phase_response_curve, quadrature_pair};
use wasm_bindgen::prelude::*;

const DIRECTION_NAMES: [&str; 8] = ["right", "left", "down", "up", "down-right", "up-left", "down-left", "up-right"];

fn js_err(e: artnet::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Energy response to a sinusoid and its copy shifted by each of `steps`
/// evenly spaced shifts in `[-period/2, period/2]`.
pub fn phase_curve(period: f64, amplitude: f64, steps: usize) -> artnet::Result<(Vec<f64>, Vec<f64>)> {
    let len = (2.0 * period).ceil().max(4.0) as usize;
    let fw = quadrature_pair(2.0 * std::f64::consts::PI / period, len)?;
    let n = steps.max(2);
    let shifts: Vec<f64> = (0..n).map(|i| period * (i as f64 / (n - 1) as f64 - 0.5)).collect();
    let resp = phase_response_curve(2.0 * std::f64::consts::PI / period, amplitude, &shifts, &fw)?;
    Ok((shifts, resp))
}

/// Interleaved `[shift, response, shift, response, ...]`.
#[wasm_bindgen]
pub fn phase_response(period: f64, amplitude: f64, steps: usize) -> Result<Vec<f64>, JsValue> {
    let (s, r) = phase_curve(period, amplitude, steps).map_err(js_err)?;
    Ok(s.into_iter().zip(r).flat_map(|(a, b)| [a, b]).collect())
}

/// Shift at which the response peaks.
#[wasm_bindgen]
pub fn phase_peak(period: f64, amplitude: f64, steps: usize) -> Result<f64, JsValue> {
    let (s, r) = phase_curve(period, amplitude, steps).map_err(js_err)?;
    Ok(argmax(&r).map_or(f64::NAN, |i| s[i]))
}

#[wasm_bindgen]
pub fn architecture_names() -> Vec<String> {
    ArchName::ALL.iter().map(|a| a.as_str().to_string()).collect()
}

pub fn report(arch: &str, t: usize, h: usize, w: usize, convention: &str) -> artnet::Result<String> {
    let conventions: Conventions = convention.parse()?;
    let spec = ArchSpec::named(arch.parse()?, REFERENCE_CLASSES)?;
    Ok(text_report(&analyze(&spec, [t, h, w], conventions)?))
}

/// Shape trace and parameter/FLOP counts as plain text.
#[wasm_bindgen]
pub fn architecture_report(arch: &str, t: usize, h: usize, w: usize, convention: &str) -> Result<String, JsValue> {
    report(arch, t, h, w, convention).map_err(js_err)
}

#[wasm_bindgen]
pub struct Clip {
    frames: usize,
    height: usize,
    width: usize,
    label: usize,
    pixels: Vec<f32>,
}

#[wasm_bindgen]
impl Clip {
    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> usize {
        self.frames
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn label(&self) -> usize {
        self.label
    }

    #[wasm_bindgen(getter)]
    pub fn direction(&self) -> String {
        DIRECTION_NAMES[self.label].to_string()
    }

    /// Grey values in `[0, 1]`, frame-major.
    pub fn pixels(&self) -> Vec<f32> {
        self.pixels.clone()
    }
}

pub fn make_clip(seed: u64, index: u64, noise_std: f64, directions: usize) -> artnet::Result<Clip> {
    let spec = TaskSpec {
        task: Task::Motion,
        classes: directions,
        directions,
        noise_std,
        seed,
        ..TaskSpec::default()
    };
    spec.validate()?;
    let sample = spec.sample(index, &spec.textures())?;
    let [_, t, h, w] = spec.volume_shape();
    debug_assert!(sample.label < DIRECTIONS.len());
    Ok(Clip {
        frames: t,
        height: h,
        width: w,
        label: sample.label,
        pixels: sample.volume.data().iter().map(|&v| v as f32).collect(),
    })
}

/// One sample of the default 4-direction motion task.
#[wasm_bindgen]
pub fn motion_clip(seed: u32, index: u32, noise_std: f64, directions: usize) -> Result<Clip, JsValue> {
    make_clip(seed as u64, index as u64, noise_std, directions).map_err(js_err)
}

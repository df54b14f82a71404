//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain values and returns a JSON string; errors become
//! JavaScript exceptions carrying the message.

use rd_binn_core::grid::{total_count, Domain};
use rd_binn_core::solver::StepperSettings;
use rd_binn_core::sr::{canonical_template, select_best, sr_candidates, CanonicalForm, FitData, SrConfig, SymbolicExpr};
use rd_binn_core::synth::{apply_noise, generate_clean, InitialCondition, ModelSpec, NoiseSpec, TrueModel};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct Classified {
    pub expr: String,
    pub template: String,
    pub coefficients: Vec<f64>,
    pub complexity: usize,
    /// Samples on `U` in [0, 1] for plotting.
    pub u: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct Simulation {
    pub times: Vec<f64>,
    pub clean_counts: Vec<f64>,
    pub noisy_counts: Vec<f64>,
    pub n_x1: usize,
    pub n_x2: usize,
    /// Noisy frames, each `n_x1 * n_x2` values in row-major order over `x1`.
    pub frames: Vec<Vec<f64>>,
    pub peak: f64,
}

#[derive(Debug, Serialize)]
pub struct Discovery {
    pub template: String,
    pub expr: String,
    pub frequency: usize,
    pub n_candidates: usize,
    pub candidates: Vec<String>,
}

fn samples(e: &SymbolicExpr, lo: f64, hi: f64, n: usize) -> Result<(Vec<f64>, Vec<f64>), String> {
    let u: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect();
    let y = u.iter().map(|&x| e.eval(x)).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
    Ok((u, y))
}

/// Parses `expr` in `U` and reports its template class and coefficients.
pub fn classify_expr(expr: &str) -> Result<Classified, String> {
    let e = SymbolicExpr::parse(expr).map_err(|e| e.to_string())?;
    let form = CanonicalForm::of(&e);
    let (u, y) = samples(&e, 0.0, 1.0, 65)?;
    Ok(Classified {
        expr: e.to_string(),
        template: form.template().text,
        coefficients: form.coefficients(),
        complexity: e.complexity(),
        u,
        y,
    })
}

/// Solves the reference window from the default initial condition and adds noise.
pub fn simulate_reference(diffusion: &str, growth: &str, noise_fraction: f64, seed: u64) -> Result<Simulation, String> {
    if !(noise_fraction >= 0.0 && noise_fraction.is_finite()) {
        return Err("noise fraction must be a non-negative number".into());
    }
    let domain = Domain::new((0.0, 1.5), (0.0, 1.1), (0.0, 2.0)).map_err(|e| e.to_string())?;
    let ic = InitialCondition::default().on_grid(domain, 0.1, 0.1, 0.0).map_err(|e| e.to_string())?;
    let spec = ModelSpec {
        diffusion: diffusion.into(),
        growth: growth.into(),
        ..ModelSpec::default()
    };
    let model = TrueModel::from_spec(&spec, ic).map_err(|e| e.to_string())?;
    let times: Vec<f64> = (0..9).map(|s| 0.25 * s as f64).collect();
    let clean = generate_clean(&model, &times, StepperSettings::default()).map_err(|e| e.to_string())?;
    let peak = clean.max_value();
    let noisy = apply_noise(&clean, &NoiseSpec { gamma: 0.0, omega: noise_fraction * peak, seed }).map_err(|e| e.to_string())?;
    let counts = |f: &rd_binn_core::grid::DensityField| -> Result<Vec<f64>, String> {
        (0..f.n_t()).map(|s| total_count(f, s).map_err(|e| e.to_string())).collect()
    };
    Ok(Simulation {
        clean_counts: counts(&clean)?,
        noisy_counts: counts(&noisy)?,
        n_x1: noisy.n_x1(),
        n_x2: noisy.n_x2(),
        frames: (0..noisy.n_t()).map(|s| noisy.frame(s).to_vec()).collect(),
        peak,
        times,
    })
}

/// Samples `expr` on `U` in [0.05, 0.95] and rediscovers it with `repeats` short regression runs.
pub fn discover_expr(expr: &str, repeats: usize, seed: u64) -> Result<Discovery, String> {
    let e = SymbolicExpr::parse(expr).map_err(|e| e.to_string())?;
    let (u, y) = samples(&e, 0.05, 0.95, 64)?;
    let data = FitData::unweighted(u, y).map_err(|e| e.to_string())?;
    let cfg = SrConfig {
        population: 120,
        generations: 80,
        repeats: repeats.clamp(1, 10),
        ..SrConfig::default()
    };
    let cands = sr_candidates(&data, &cfg, seed).map_err(|e| e.to_string())?;
    let best = select_best(&cands).map_err(|e| e.to_string())?;
    Ok(Discovery {
        template: best.template.text.clone(),
        expr: best.expr.to_string(),
        frequency: best.frequency,
        n_candidates: best.n_candidates,
        candidates: cands.iter().map(|c| format!("{}  [{}]", c.expr, canonical_template(&c.expr).text)).collect(),
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|m| JsValue::from_str(&m))
}

#[wasm_bindgen]
pub fn classify(expr: &str) -> Result<String, JsValue> {
    to_js(classify_expr(expr))
}

#[wasm_bindgen]
pub fn simulate(diffusion: &str, growth: &str, noise_fraction: f64, seed: u32) -> Result<String, JsValue> {
    to_js(simulate_reference(diffusion, growth, noise_fraction, seed as u64))
}

#[wasm_bindgen]
pub fn discover(expr: &str, repeats: u32, seed: u32) -> Result<String, JsValue> {
    to_js(discover_expr(expr, repeats as usize, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifies_the_reference_rates() {
        let d = classify_expr("0.01 + 0.02*exp(2*U)").unwrap();
        assert_eq!(d.template, "C0 + C1*exp(C2*U)");
        assert_eq!(d.u.len(), d.y.len());
        assert!((d.y[0] - 0.03).abs() < 1e-12);
        assert_eq!(classify_expr("1 - U").unwrap().template, "C0 - C1*U");
        assert!(classify_expr("exp(").is_err());
    }

    #[test]
    fn reference_simulation_has_the_data_shape() {
        let s = simulate_reference("0.01 + 0.02*exp(2*U)", "1 - U", 0.1, 3).unwrap();
        assert_eq!((s.n_x1, s.n_x2, s.frames.len()), (15, 11, 9));
        assert!(s.clean_counts.windows(2).all(|w| w[1] > w[0]));
        let json: serde_json::Value = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(json["times"].as_array().unwrap().len(), 9);
        assert!(simulate_reference("1", "0", -1.0, 0).is_err());
    }

    #[test]
    fn discovers_a_linear_rate() {
        let d = discover_expr("0.5 - 0.3*U", 2, 11).unwrap();
        assert_eq!(d.template, "C0 - C1*U");
        assert_eq!(d.n_candidates, 2);
    }
}

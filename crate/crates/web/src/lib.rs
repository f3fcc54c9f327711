//! Browser demo: a generated patient timeline, the model's pooling and
//! attention weights over it, and the learnable time-gap encoding.
//!
//! Every export returns a JSON string. The plain functions in [`demo`] hold
//! the logic so they can be tested natively.

use wasm_bindgen::prelude::*;

pub mod demo {
    use clinrisk::datagen::{contaminate, generate_cohort, label_probability, ContaminationSpec, GenConfig};
    use clinrisk::experiments::explain;
    use clinrisk::ingest::{fit_feature_space, vectorize, PatientSequence};
    use clinrisk::numcore::Tensor2;
    use clinrisk::{ModelConfig, ModelParams, Result};
    use serde::Serialize;

    const VOCAB: usize = 20;
    const CONT_DIM: usize = 4;

    fn gen(seed: u64, n_patients: usize) -> GenConfig {
        GenConfig {
            n_patients,
            len_min: 3,
            len_max: 16,
            vocab_size: VOCAB,
            cont_dim: CONT_DIM,
            risk_code: 7,
            seed,
            ..GenConfig::default()
        }
    }

    #[derive(Serialize)]
    pub struct TimelineEvent {
        pub t: f64,
        pub code: u32,
        pub risk_code: bool,
        pub values: Vec<f64>,
        pub contaminated: bool,
    }

    #[derive(Serialize)]
    pub struct Timeline {
        pub patient_id: String,
        pub label: u8,
        pub true_probability: f64,
        pub events: Vec<TimelineEvent>,
    }

    /// Patient `index` of a small seeded cohort, with a fraction `rho` of
    /// the cohort's events replaced by noise.
    pub fn timeline(seed: u64, index: usize, rho: f64) -> Result<Timeline> {
        let cfg = gen(seed, index + 1);
        let cohort = generate_cohort(&cfg)?;
        let noisy = contaminate(&cohort, &ContaminationSpec::new(rho, seed))?;
        let (clean, dirty) = (&cohort[index], &noisy[index]);
        Ok(Timeline {
            patient_id: clean.patient_id.clone(),
            label: clean.label,
            true_probability: label_probability(clean, &cfg)?,
            events: clean
                .events
                .iter()
                .zip(&dirty.events)
                .map(|(c, d)| TimelineEvent {
                    t: d.t,
                    code: d.code,
                    risk_code: d.code == cfg.risk_code,
                    values: d.values.clone(),
                    contaminated: c.values != d.values,
                })
                .collect(),
        })
    }

    #[derive(Serialize)]
    pub struct Explanation {
        pub patient_id: String,
        pub times: Vec<f64>,
        pub codes: Vec<u32>,
        pub yhat: f64,
        pub pooling: Vec<f64>,
        /// `attention[layer][head]` as a row-major T × T matrix.
        pub attention: Vec<Vec<Vec<f64>>>,
        pub t: usize,
    }

    fn model(seed: u64, d_in: usize, d_model: usize, n_heads: usize) -> Result<ModelParams> {
        ModelParams::init(
            &ModelConfig {
                d_in,
                d_model,
                n_heads,
                n_layers: 2,
                ..ModelConfig::default()
            },
            seed,
        )
    }

    fn patient(seed: u64, index: usize) -> Result<(Vec<PatientSequence>, PatientSequence)> {
        let cohort = generate_cohort(&gen(seed, (index + 1).max(32)))?;
        let p = cohort[index].clone();
        Ok((cohort, p))
    }

    /// Forward pass of a freshly initialized model over one patient.
    pub fn explain_patient(seed: u64, index: usize, d_model: usize, n_heads: usize) -> Result<Explanation> {
        let (cohort, p) = patient(seed, index)?;
        let fs = fit_feature_space(&cohort, VOCAB)?;
        let v = vectorize(&p, &fs)?;
        let params = model(seed, fs.d_in(), d_model, n_heads)?;
        let (yhat, pooling, attention) = explain(&params, &v)?;
        Ok(Explanation {
            patient_id: p.patient_id.clone(),
            times: p.events.iter().map(|e| e.t).collect(),
            codes: p.events.iter().map(|e| e.code).collect(),
            yhat,
            pooling,
            attention,
            t: v.len(),
        })
    }

    #[derive(Serialize)]
    pub struct Curves {
        pub dt: Vec<f64>,
        /// One curve per model dimension: `relu(w_t·Δt + b_t)`.
        pub curves: Vec<Vec<f64>>,
    }

    /// Temporal encoding of each dimension over `[0, dt_max]`, with the
    /// initialized `w_t` and a shared bias `bias`.
    pub fn temporal_curves(
        seed: u64,
        d_model: usize,
        dt_max: f64,
        steps: usize,
        bias: f64,
        log1p: bool,
    ) -> Result<Curves> {
        let params = model(seed, 1, d_model, 1)?;
        let steps = steps.max(2);
        let dt: Vec<f64> = (0..steps).map(|i| dt_max * i as f64 / (steps - 1) as f64).collect();
        let w: &Tensor2 = &params.embed.w_t;
        let curves = (0..d_model)
            .map(|j| {
                dt.iter()
                    .map(|&g| {
                        let x = if log1p { g.ln_1p() } else { g };
                        (w.get(0, j) * x + bias).max(0.0)
                    })
                    .collect()
            })
            .collect();
        Ok(Curves { dt, curves })
    }
}

fn to_js<T: serde::Serialize>(r: clinrisk::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn patient_timeline(seed: u64, index: usize, rho: f64) -> Result<String, JsError> {
    to_js(demo::timeline(seed, index, rho))
}

#[wasm_bindgen]
pub fn attention_maps(seed: u64, index: usize, d_model: usize, n_heads: usize) -> Result<String, JsError> {
    to_js(demo::explain_patient(seed, index, d_model, n_heads))
}

#[wasm_bindgen]
pub fn temporal_encoding(
    seed: u64,
    d_model: usize,
    dt_max: f64,
    steps: usize,
    bias: f64,
    log1p: bool,
) -> Result<String, JsError> {
    to_js(demo::temporal_curves(seed, d_model, dt_max, steps, bias, log1p))
}

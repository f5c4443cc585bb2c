//! Browser bindings. Each export returns a JSON string so the page needs no
//! generated TypeScript types; the same functions run natively in tests.

use nanotile::cost::{self, OpPoint};
use nanotile::ctrl::{self, ProbTrace, ReactionScenario};
use nanotile::l2plan::{plan_single_stack, plan_two_stack, BufKind, L2Config};
use nanotile::net::build_dronet;
use nanotile::tiler::plan_network;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Frame rate, power and energy per frame over the operating-point grid.
pub fn sweep_value(l1_budget: usize) -> Result<Value, String> {
    let s = plan_network(&build_dronet(), l1_budget).map_err(err)?;
    let cal = cost::calibrated().map_err(err)?;
    let pts = cost::sweep(&s, &cost::default_grid(), cal).map_err(err)?;
    let best = cost::min_energy(&pts).ok_or("empty grid")?;
    let point = |p: &cost::SweepPoint| json!({ "vdd": p.op.vdd, "fc": p.op.f_fc_mhz, "cl": p.op.f_cl_mhz, "fps": p.fps, "mw": p.soc_mw, "mj": p.energy_mj });
    Ok(json!({
        "l1_budget": l1_budget,
        "points": pts.iter().map(point).collect::<Vec<_>>(),
        "best": point(&best),
    }))
}

/// Cost breakdown at a single operating point.
pub fn cost_value(vdd: f64, fc: f64, cl: f64, l1_budget: usize) -> Result<Value, String> {
    let s = plan_network(&build_dronet(), l1_budget).map_err(err)?;
    let r = cost::frame_report(&s, OpPoint::new(vdd, fc, cl), cost::calibrated().map_err(err)?).map_err(err)?;
    Ok(json!({
        "fps": r.fps,
        "mw": r.soc_mw,
        "mj": r.energy_mj,
        "mac_per_cycle": r.mac_per_cycle(),
        "cycles": { "l3": r.l3_cl_cycles, "l2l1": r.l2l1_exposed_cycles, "compute": r.compute_cycles, "total": r.total_cl_cycles },
        "layers": r.layers.iter().map(|l| json!({ "name": l.name, "exec_ms": l.exec_ms, "l3_ms": l.l3_ms })).collect::<Vec<_>>(),
    }))
}

/// Per-step stack occupancy of the L2 allocation plan.
pub fn l2_plan_value(two_stacks: bool, inplace_relu: bool, frame_outside: bool) -> Result<Value, String> {
    let g = build_dronet();
    let cfg = L2Config { inplace_relu, frame_outside, ..L2Config::default() };
    let p = if two_stacks { plan_two_stack(&g, &cfg) } else { plan_single_stack(&g, &cfg) }.map_err(err)?;
    let kind = |k: BufKind| match k {
        BufKind::Frame => "frame",
        BufKind::Activation => "activation",
        BufKind::Weights => "weights",
    };
    let steps: Vec<Value> = p
        .occupancy
        .iter()
        .map(|o| {
            let stacks: Vec<Value> = o
                .live
                .iter()
                .map(|live| {
                    Value::Array(
                        live.iter()
                            .map(|&b| json!({ "name": p.buffers[b].name, "kind": kind(p.buffers[b].kind), "bytes": p.buffers[b].bytes }))
                            .collect(),
                    )
                })
                .collect();
            json!({ "name": o.name, "bytes": o.bytes, "stacks": stacks })
        })
        .collect();
    Ok(json!({
        "stacks": p.stacks,
        "capacity": cfg.capacity,
        "peak": p.peak,
        "frame_bytes": p.frame_bytes,
        "headroom": p.headroom(),
        "headroom_with_frames": p.headroom_with_frames(),
        "steps": steps,
    }))
}

/// Obstacle reaction at each frame rate on a clean step trace, with the
/// distance-to-obstacle profile for plotting.
pub fn react_value(rates: &[f64], inference_ms: f64) -> Result<Value, String> {
    let base = ReactionScenario::standard(rates.first().copied().unwrap_or(10.0), inference_ms / 1e3);
    let trace = ProbTrace::step(base.appear, base.horizon() + 2.0, 1e-3);
    let outs = ctrl::reaction_sweep(&base, rates, &trace).map_err(err)?;
    let rows: Vec<Value> = outs
        .iter()
        .map(|o| {
            json!({
                "fps": o.frame_rate,
                "stop_time": o.stop_time,
                "distance_at_stop": o.distance_at_stop_cmd,
                "stop_distance": o.stop_distance,
                "stopped": o.stopped_before_obstacle,
            })
        })
        .collect();
    Ok(json!({
        "speed": base.speed,
        "appear": base.appear,
        "free": base.free,
        "decel": base.decel,
        "inference_ms": inference_ms,
        "outcomes": rows,
    }))
}

fn to_js(v: Result<Value, String>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn sweep(l1_budget: usize) -> Result<String, JsError> {
    to_js(sweep_value(l1_budget))
}

#[wasm_bindgen]
pub fn cost_at(vdd: f64, fc: f64, cl: f64, l1_budget: usize) -> Result<String, JsError> {
    to_js(cost_value(vdd, fc, cl, l1_budget))
}

#[wasm_bindgen]
pub fn l2_plan(two_stacks: bool, inplace_relu: bool, frame_outside: bool) -> Result<String, JsError> {
    to_js(l2_plan_value(two_stacks, inplace_relu, frame_outside))
}

#[wasm_bindgen]
pub fn react(rates: Vec<f64>, inference_ms: f64) -> Result<String, JsError> {
    to_js(react_value(&rates, inference_ms))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_minimum() {
        let v = sweep_value(60 * 1024).unwrap();
        assert_eq!(v["best"]["vdd"], 1.0);
        assert_eq!(v["best"]["cl"], 100.0);
        assert_eq!(v["points"].as_array().unwrap().len(), 9 + 25);
    }

    #[test]
    fn l2_occupancy_matches_peak() {
        let v = l2_plan_value(true, true, true).unwrap();
        let peak = v["peak"].as_u64().unwrap();
        let max = v["steps"].as_array().unwrap().iter().map(|s| s["bytes"].as_array().unwrap().iter().map(|b| b.as_u64().unwrap()).sum::<u64>()).max();
        assert_eq!(Some(peak), max);
        assert!(l2_plan_value(false, true, true).unwrap()["peak"].as_u64().unwrap() > peak);
    }

    #[test]
    fn reaction_rows() {
        let v = react_value(&[5.0, 10.0], 57.5).unwrap();
        let rows = v["outcomes"].as_array().unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0]["stop_time"].as_f64().unwrap() > rows[1]["stop_time"].as_f64().unwrap());
    }

    #[test]
    fn cost_point() {
        let v = cost_value(1.0, 50.0, 100.0, 60 * 1024).unwrap();
        assert!((v["fps"].as_f64().unwrap() - 6.5).abs() < 0.5);
        assert_eq!(v["layers"].as_array().unwrap().len(), 18);
    }

    #[test]
    fn errors_are_reported() {
        assert!(sweep_value(1024).is_err());
        assert!(react_value(&[-1.0], 10.0).is_err());
    }
}

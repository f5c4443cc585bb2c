//! Output filtering, stop decision and the obstacle-reaction study.

use std::fmt::Write as _;

use crate::{Error, Result};

/// Low-pass coefficient for both network outputs.
pub const ALPHA: f64 = 0.7;
/// Filtered collision probability above which a stop is commanded.
pub const STOP_THRESHOLD: f64 = 0.7;
/// Constant deceleration that stops 4 m/s in 0.7 m.
pub const BRAKE_DECEL: f64 = 4.0 * 4.0 / (2.0 * 0.7);
/// Shortest time the vehicle needs to come to rest.
pub const MIN_STOP_TIME: f64 = 0.4;
/// Yaw rate per radian of filtered steering.
pub const YAW_GAIN: f64 = 1.0;

fn unit(name: &str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {x} outside [0, 1]")))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("alpha = {alpha} outside (0, 1]")))
    }
}

/// One step of `p_k = (1 - alpha) p_{k-1} + alpha c_k`.
pub fn filter_step(p_prev: f64, c: f64, alpha: f64) -> Result<f64> {
    unit("p_prev", p_prev)?;
    unit("c", c)?;
    check_alpha(alpha)?;
    Ok((1.0 - alpha) * p_prev + alpha * c)
}

pub fn stop_decision(p: f64) -> bool {
    p > STOP_THRESHOLD
}

/// Forward speed `v_max (1 - p)`, zero once a stop fires.
pub fn velocity_command(p: f64, v_max: f64) -> Result<f64> {
    unit("p", p)?;
    if !(v_max >= 0.0 && v_max.is_finite()) {
        return Err(Error::Domain(format!("v_max = {v_max}")));
    }
    Ok(if stop_decision(p) { 0.0 } else { (v_max * (1.0 - p)).max(0.0) })
}

pub fn yaw_rate(theta_filtered: f64) -> f64 {
    YAW_GAIN * theta_filtered
}

/// Constant-deceleration stop: `(v / a, v^2 / 2a)`.
pub fn braking_envelope(v: f64, decel: f64) -> Result<(f64, f64)> {
    if !(v >= 0.0 && v.is_finite()) || !(decel > 0.0 && decel.is_finite()) {
        return Err(Error::Domain(format!("v = {v}, decel = {decel}")));
    }
    Ok((v / decel, v * v / (2.0 * decel)))
}

/// Stop envelope honouring both the deceleration and the minimum stop time.
/// A linear ramp down over `MIN_STOP_TIME` covers `v * MIN_STOP_TIME / 2`.
pub fn conservative_envelope(v: f64, decel: f64) -> Result<(f64, f64)> {
    let (t, d) = braking_envelope(v, decel)?;
    if v == 0.0 {
        return Ok((0.0, 0.0));
    }
    Ok((t.max(MIN_STOP_TIME), d.max(v * MIN_STOP_TIME / 2.0)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Command {
    pub velocity: f64,
    pub yaw_rate: f64,
    pub stop: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlState {
    pub p: f64,
    pub theta: f64,
    pub v: f64,
    pub alpha: f64,
    pub v_max: f64,
}

impl ControlState {
    pub fn new(v_max: f64) -> Self {
        ControlState { p: 0.0, theta: 0.0, v: v_max, alpha: ALPHA, v_max }
    }

    /// Folds in one network output pair and returns the command.
    pub fn update(&mut self, collision: f64, steering: f64) -> Result<Command> {
        self.p = filter_step(self.p, collision, self.alpha)?;
        if !steering.is_finite() {
            return Err(Error::Domain(format!("steering = {steering}")));
        }
        self.theta = (1.0 - self.alpha) * self.theta + self.alpha * steering;
        self.v = velocity_command(self.p, self.v_max)?;
        Ok(Command { velocity: self.v, yaw_rate: yaw_rate(self.theta), stop: stop_decision(self.p) })
    }
}

/// Collision-probability samples `(t, c)`, read with sample and hold.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbTrace {
    pub samples: Vec<(f64, f64)>,
}

impl ProbTrace {
    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        for w in samples.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::Domain(format!("timestamps not increasing at {}", w[1].0)));
            }
        }
        for &(t, c) in &samples {
            if !t.is_finite() {
                return Err(Error::Domain(format!("timestamp {t}")));
            }
            unit("c", c)?;
        }
        Ok(ProbTrace { samples })
    }

    /// `c = 0` before `appear`, `1` from then on, sampled every `dt` up to `until`.
    pub fn step(appear: f64, until: f64, dt: f64) -> Self {
        let n = (until / dt).ceil() as usize;
        let mut samples: Vec<(f64, f64)> = (0..=n).map(|i| (i as f64 * dt, 0.0)).collect();
        samples.retain(|s| s.0 < appear);
        samples.push((appear, 1.0));
        if until > appear {
            samples.push((until, 1.0));
        }
        ProbTrace { samples }
    }

    /// CSV with a `timestamp_s,c_k` header.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut v = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("timestamp")) {
                continue;
            }
            let mut f = line.split(',').map(str::trim);
            let parse = |s: Option<&str>| -> Result<f64> {
                s.and_then(|s| s.parse().ok()).ok_or_else(|| Error::Domain(format!("line {}: {line:?}", i + 1)))
            };
            v.push((parse(f.next())?, parse(f.next())?));
        }
        Self::new(v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("timestamp_s,c_k\n");
        for (t, c) in &self.samples {
            let _ = writeln!(s, "{t},{c}");
        }
        s
    }

    pub fn end(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.0)
    }

    pub fn at(&self, t: f64) -> f64 {
        let i = self.samples.partition_point(|s| s.0 <= t);
        if i == 0 {
            0.0
        } else {
            self.samples[i - 1].1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReactionScenario {
    /// Constant approach speed (m/s).
    pub speed: f64,
    /// Obstacle appearance time (s).
    pub appear: f64,
    /// Free distance when the obstacle appears (m).
    pub free: f64,
    pub frame_rate: f64,
    /// Inference time per frame (s).
    pub inference: f64,
    pub decel: f64,
}

impl ReactionScenario {
    /// 4 m/s approach, obstacle at 4 s with 4 m free.
    pub fn standard(frame_rate: f64, inference: f64) -> Self {
        ReactionScenario { speed: 4.0, appear: 4.0, free: 4.0, frame_rate, inference, decel: BRAKE_DECEL }
    }

    pub fn period(&self) -> f64 {
        1.0 / self.frame_rate
    }

    /// A decision on the frame captured at `t` is available at `t + latency`.
    pub fn latency(&self) -> f64 {
        self.period() + self.inference
    }

    /// Time at which the obstacle is reached if nothing happens.
    pub fn horizon(&self) -> f64 {
        self.appear + self.free / self.speed
    }

    fn check(&self) -> Result<()> {
        let pos = [self.speed, self.appear, self.free, self.frame_rate, self.decel];
        if pos.iter().all(|x| *x > 0.0 && x.is_finite()) && self.inference >= 0.0 && self.inference.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!("scenario {self:?}")))
        }
    }

    /// Closed-form stop-command time on a clean step trace: the first frame at
    /// or after the appearance, one more frame, then the latency.
    pub fn step_stop_time(&self) -> f64 {
        let k = (self.appear * self.frame_rate - 1e-9).ceil();
        k / self.frame_rate + self.period() + self.latency()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReactionOutcome {
    pub frame_rate: f64,
    pub stop_time: Option<f64>,
    /// Distance left to the obstacle when the stop command fires.
    pub distance_at_stop_cmd: Option<f64>,
    pub stop_distance: f64,
    pub stopped_before_obstacle: bool,
    pub frames: usize,
}

/// Samples the trace at the frame rate, filters, and brakes on the first
/// threshold crossing. The vehicle keeps its approach speed until then.
pub fn simulate_reaction(sc: &ReactionScenario, trace: &ProbTrace) -> Result<ReactionOutcome> {
    sc.check()?;
    let horizon = sc.horizon();
    let last_capture = horizon - sc.latency();
    if trace.end() + 1e-9 < last_capture.max(sc.appear) {
        return Err(Error::TraceTooShort { covered: trace.end(), needed: last_capture.max(sc.appear) });
    }
    let (_, stop_distance) = conservative_envelope(sc.speed, sc.decel)?;
    let mut p = 0.0;
    let mut k = 0usize;
    let mut stop_time = None;
    loop {
        let t = k as f64 / sc.frame_rate;
        let decided = t + sc.latency();
        if decided >= horizon {
            break;
        }
        k += 1;
        p = filter_step(p, trace.at(t), ALPHA)?;
        if stop_decision(p) {
            stop_time = Some(decided);
            break;
        }
    }
    let distance_at_stop_cmd = stop_time.map(|t| sc.free - sc.speed * (t - sc.appear).max(0.0));
    let stopped = distance_at_stop_cmd.is_some_and(|d| d >= stop_distance);
    Ok(ReactionOutcome { frame_rate: sc.frame_rate, stop_time, distance_at_stop_cmd, stop_distance, stopped_before_obstacle: stopped, frames: k })
}

/// Runs the scenario at each frame rate.
pub fn reaction_sweep(base: &ReactionScenario, rates: &[f64], trace: &ProbTrace) -> Result<Vec<ReactionOutcome>> {
    rates.iter().map(|&f| simulate_reaction(&ReactionScenario { frame_rate: f, ..*base }, trace)).collect()
}

pub fn outcomes_csv(outcomes: &[ReactionOutcome]) -> String {
    let mut s = String::from("frame_rate_hz,stop_cmd_s,distance_at_stop_m,stop_distance_m,result\n");
    let opt = |o: Option<f64>| o.map(|v| format!("{v:.4}")).unwrap_or_default();
    for o in outcomes {
        let result = if o.stopped_before_obstacle { "stopped" } else { "collision" };
        let _ = writeln!(s, "{},{},{},{:.4},{result}", o.frame_rate, opt(o.stop_time), opt(o.distance_at_stop_cmd), o.stop_distance);
    }
    s
}

//! Host and accelerator interaction protocol as a discrete-event timeline.
//!
//! Times are integer nanoseconds so steady-state periods compare exactly.

use std::fmt::Write as _;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProtoStep {
    WakeInterrupt,
    KernelFetch,
    CameraConfig,
    FrameDma,
    WeightLoad,
    Compute,
    ResultSpi,
    AckInterrupt,
}

impl ProtoStep {
    pub fn name(self) -> &'static str {
        match self {
            ProtoStep::WakeInterrupt => "wake_interrupt",
            ProtoStep::KernelFetch => "kernel_fetch",
            ProtoStep::CameraConfig => "camera_config",
            ProtoStep::FrameDma => "frame_dma",
            ProtoStep::WeightLoad => "weight_load",
            ProtoStep::Compute => "compute",
            ProtoStep::ResultSpi => "result_spi",
            ProtoStep::AckInterrupt => "ack_interrupt",
        }
    }

    fn once_per_mission(self) -> bool {
        matches!(self, ProtoStep::WakeInterrupt | ProtoStep::KernelFetch | ProtoStep::CameraConfig)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Actor {
    Host,
    Accelerator,
    Udma,
}

impl Actor {
    pub fn name(self) -> &'static str {
        match self {
            Actor::Host => "host",
            Actor::Accelerator => "accelerator",
            Actor::Udma => "udma",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolEvent {
    pub step: ProtoStep,
    pub actor: Actor,
    pub start_ns: u64,
    pub end_ns: u64,
    pub frame: Option<usize>,
    /// Frame buffer written by a frame DMA.
    pub buffer: Option<usize>,
    /// Named kernel fetched at setup.
    pub kernel: Option<String>,
}

/// Durations of the protocol phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timings {
    pub frame_dma_ns: u64,
    pub compute_ns: u64,
    pub result_ns: u64,
    /// Kernel fetch plus camera configuration.
    pub setup_ns: u64,
}

fn ns(s: f64) -> Result<u64> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Domain(format!("duration {s} s must be positive")));
    }
    Ok((s * 1e9).round().max(1.0) as u64)
}

impl Timings {
    pub fn from_secs(frame_dma_s: f64, compute_s: f64, result_s: f64, setup_s: f64) -> Result<Self> {
        Ok(Timings { frame_dma_ns: ns(frame_dma_s)?, compute_ns: ns(compute_s)?, result_ns: ns(result_s)?, setup_ns: ns(setup_s)? })
    }

    /// Camera readout at 60 fps, a short SPI reply and 100 ms of setup around
    /// the given compute time.
    pub fn with_compute(compute_s: f64) -> Result<Self> {
        Self::from_secs(1.0 / 60.0, compute_s, 100e-6, 0.1)
    }

    /// Closed-form steady-state period.
    pub fn period_ns(&self) -> u64 {
        self.frame_dma_ns.max(self.compute_ns + self.result_ns)
    }

    fn check(&self) -> Result<()> {
        if [self.frame_dma_ns, self.compute_ns, self.result_ns, self.setup_ns].contains(&0) {
            return Err(Error::Domain(format!("timings must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Frame buffers in the L2 frame region.
pub const FRAME_BUFFERS: usize = 2;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Timeline {
    pub events: Vec<ProtocolEvent>,
}

impl Timeline {
    fn find(&self, step: ProtoStep, frame: Option<usize>) -> Vec<&ProtocolEvent> {
        self.events.iter().filter(|e| e.step == step && e.frame == frame).collect()
    }

    pub fn frames(&self) -> usize {
        self.events.iter().filter(|e| e.step == ProtoStep::FrameDma).count()
    }

    /// Spacing of the last two result deliveries.
    pub fn steady_period_ns(&self) -> Option<u64> {
        let ends: Vec<u64> = self.events.iter().filter(|e| e.step == ProtoStep::ResultSpi).map(|e| e.end_ns).collect();
        (ends.len() >= 2).then(|| ends[ends.len() - 1] - ends[ends.len() - 2])
    }

    pub fn fps(&self) -> Option<f64> {
        self.steady_period_ns().map(|p| 1e9 / p as f64)
    }

    /// Frame DMAs that run while the previous frame computes.
    pub fn overlaps(&self) -> usize {
        let mut n = 0;
        for d in self.events.iter().filter(|e| e.step == ProtoStep::FrameDma) {
            let Some(k) = d.frame else { continue };
            if k == 0 {
                continue;
            }
            if self.find(ProtoStep::Compute, Some(k - 1)).iter().any(|c| d.start_ns < c.end_ns && c.start_ns < d.end_ns) {
                n += 1;
            }
        }
        n
    }

    /// Largest number of frame buffers holding a frame at once. A buffer is
    /// held from the start of its DMA to the end of the frame's compute.
    pub fn max_live_buffers(&self) -> usize {
        let spans = self.buffer_spans();
        let mut points: Vec<(u64, i32)> = spans.iter().flat_map(|s| [(s.1, 1), (s.2, -1)]).collect();
        points.sort_by_key(|&(t, d)| (t, d));
        let (mut cur, mut best) = (0i32, 0i32);
        for (_, d) in points {
            cur += d;
            best = best.max(cur);
        }
        best as usize
    }

    /// `(buffer, start, end, frame)` per frame.
    fn buffer_spans(&self) -> Vec<(Option<usize>, u64, u64, usize)> {
        let mut v = Vec::new();
        for d in self.events.iter().filter(|e| e.step == ProtoStep::FrameDma) {
            let Some(k) = d.frame else { continue };
            let end = self.find(ProtoStep::Compute, Some(k)).first().map_or(d.end_ns, |c| c.end_ns);
            v.push((d.buffer, d.start_ns, end, k));
        }
        v
    }

    pub fn to_csv(&self) -> String {
        let t = |n: u64| format!("{}.{:09}", n / 1_000_000_000, n % 1_000_000_000);
        let mut s = String::from("frame,step,actor,t_start,t_end\n");
        for e in &self.events {
            let frame = e.frame.map(|f| f.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{frame},{},{},{},{}", e.step.name(), e.actor.name(), t(e.start_ns), t(e.end_ns));
        }
        s
    }
}

/// Simulates a mission of `n_frames` with double-buffered frame acquisition.
pub fn run_mission(n_frames: usize, tm: &Timings, kernel: &str) -> Result<Timeline> {
    tm.check()?;
    let mut ev = Vec::new();
    let mut push = |step, actor, start_ns, end_ns, frame, buffer| {
        ev.push(ProtocolEvent { step, actor, start_ns, end_ns, frame, buffer, kernel: None });
    };
    push(ProtoStep::WakeInterrupt, Actor::Host, 0, 0, None, None);
    let fetch_end = tm.setup_ns / 2;
    push(ProtoStep::KernelFetch, Actor::Accelerator, 0, fetch_end, None, None);
    push(ProtoStep::CameraConfig, Actor::Accelerator, fetch_end, tm.setup_ns, None, None);
    ev[1].kernel = Some(kernel.to_string());

    let mut dma_end = vec![0u64; n_frames];
    let mut compute_end = vec![0u64; n_frames];
    let mut last_dma_end = tm.setup_ns;
    let mut accel_free = tm.setup_ns;
    let mut frame_events = Vec::new();
    for k in 0..n_frames {
        // The buffer is free once the frame two back has been consumed.
        let buffer_free = if k >= FRAME_BUFFERS { compute_end[k - FRAME_BUFFERS] } else { tm.setup_ns };
        let d0 = last_dma_end.max(buffer_free);
        dma_end[k] = d0 + tm.frame_dma_ns;
        last_dma_end = dma_end[k];
        let c0 = dma_end[k].max(accel_free);
        compute_end[k] = c0 + tm.compute_ns;
        let r1 = compute_end[k] + tm.result_ns;
        accel_free = r1;
        let f = Some(k);
        frame_events.push((ProtoStep::FrameDma, Actor::Udma, d0, dma_end[k], f, Some(k % FRAME_BUFFERS)));
        frame_events.push((ProtoStep::WeightLoad, Actor::Udma, c0, c0, f, None));
        frame_events.push((ProtoStep::Compute, Actor::Accelerator, c0, compute_end[k], f, None));
        frame_events.push((ProtoStep::ResultSpi, Actor::Accelerator, compute_end[k], r1, f, None));
        frame_events.push((ProtoStep::AckInterrupt, Actor::Accelerator, r1, r1, f, None));
    }
    frame_events.sort_by_key(|e| (e.2, e.3, e.4, e.0));
    for (step, actor, s, e, f, b) in frame_events {
        ev.push(ProtocolEvent { step, actor, start_ns: s, end_ns: e, frame: f, buffer: b, kernel: None });
    }
    Ok(Timeline { events: ev })
}

/// Every causal, resource and buffer rule the timeline breaks.
pub fn validate_timeline(tl: &Timeline) -> Vec<String> {
    let mut v = Vec::new();
    for e in &tl.events {
        if e.start_ns > e.end_ns {
            v.push(format!("{} of frame {:?} ends before it starts", e.step.name(), e.frame));
        }
        if e.step.once_per_mission() != e.frame.is_none() {
            v.push(format!("{} has the wrong frame scope", e.step.name()));
        }
    }
    let once = |s: ProtoStep| tl.find(s, None);
    let (wake, fetch, config) = (once(ProtoStep::WakeInterrupt), once(ProtoStep::KernelFetch), once(ProtoStep::CameraConfig));
    for (name, list) in [("wake_interrupt", &wake), ("kernel_fetch", &fetch), ("camera_config", &config)] {
        if list.len() != 1 {
            v.push(format!("{name} occurs {} times", list.len()));
        }
    }
    if v.iter().any(|s| s.contains("occurs")) {
        return v;
    }
    let (wake, fetch, config) = (wake[0], fetch[0], config[0]);
    if wake.end_ns > fetch.start_ns || fetch.end_ns > config.start_ns {
        v.push("setup out of order".into());
    }
    let mut frames: Vec<usize> = tl.events.iter().filter_map(|e| e.frame).collect();
    frames.sort_unstable();
    frames.dedup();
    let chain = [ProtoStep::FrameDma, ProtoStep::Compute, ProtoStep::ResultSpi, ProtoStep::AckInterrupt];
    let mut prev_result_end = 0;
    let mut prev_dma: Option<&ProtocolEvent> = None;
    for &k in &frames {
        let one = |s: ProtoStep| {
            let l = tl.find(s, Some(k));
            (l.len() == 1).then(|| l[0])
        };
        let steps: Vec<_> = [ProtoStep::FrameDma, ProtoStep::WeightLoad, ProtoStep::Compute, ProtoStep::ResultSpi, ProtoStep::AckInterrupt]
            .iter()
            .map(|&s| (s, one(s)))
            .collect();
        if let Some((s, _)) = steps.iter().find(|(_, e)| e.is_none()) {
            v.push(format!("frame {k}: {} missing or repeated", s.name()));
            continue;
        }
        let get = |s: ProtoStep| steps.iter().find(|(t, _)| *t == s).and_then(|(_, e)| *e).expect("checked");
        let (dma, wl, comp) = (get(ProtoStep::FrameDma), get(ProtoStep::WeightLoad), get(ProtoStep::Compute));
        if dma.start_ns < config.end_ns || wl.start_ns < config.end_ns {
            v.push(format!("frame {k}: transfer before camera configuration"));
        }
        if wl.end_ns > comp.start_ns {
            v.push(format!("frame {k}: compute before weight load"));
        }
        for w in chain.windows(2) {
            if get(w[0]).end_ns > get(w[1]).start_ns {
                v.push(format!("frame {k}: {} before {} ends", w[1].name(), w[0].name()));
            }
        }
        if comp.start_ns < prev_result_end {
            v.push(format!("frame {k}: compute overlaps the previous frame on the accelerator"));
        }
        prev_result_end = get(ProtoStep::ResultSpi).end_ns;
        if let Some(p) = prev_dma {
            if dma.start_ns < p.end_ns {
                v.push(format!("frame {k}: frame DMA overlaps the previous one"));
            }
        }
        prev_dma = Some(dma);
    }
    let spans = tl.buffer_spans();
    for (i, a) in spans.iter().enumerate() {
        for b in &spans[i + 1..] {
            let overlap = a.1 < b.2 && b.1 < a.2;
            if overlap && (a.0.is_none() || a.0 == b.0) {
                v.push(format!("frames {} and {} share a frame buffer while both are live", a.3, b.3));
            }
        }
    }
    let live = tl.max_live_buffers();
    if live > FRAME_BUFFERS {
        v.push(format!("{live} frame buffers live at once"));
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn compute_bound_mission() {
        let tm = Timings::with_compute(0.158).unwrap();
        let tl = run_mission(10, &tm, "dronet").unwrap();
        assert!(validate_timeline(&tl).is_empty(), "{:?}", validate_timeline(&tl));
        assert_eq!(tl.steady_period_ns(), Some(tm.period_ns()));
        assert!((tl.fps().unwrap() - 6.3).abs() < 0.1);
        assert!(tl.max_live_buffers() <= 2);
        assert_eq!(tl.events[1].kernel.as_deref(), Some("dronet"));
    }

    #[test]
    fn single_frame_has_no_overlap() {
        let tl = run_mission(1, &Timings::with_compute(0.1).unwrap(), "k").unwrap();
        assert_eq!(tl.overlaps(), 0);
        assert_eq!(tl.steady_period_ns(), None);
        assert!(validate_timeline(&tl).is_empty());
    }

    #[test]
    fn acquisition_bound() {
        let tm = Timings::from_secs(0.2, 0.05, 0.01, 0.1).unwrap();
        let tl = run_mission(6, &tm, "k").unwrap();
        assert_eq!(tl.steady_period_ns(), Some(200_000_000));
    }

    #[test]
    fn catches_result_before_compute() {
        let mut tl = run_mission(3, &Timings::with_compute(0.1).unwrap(), "k").unwrap();
        let c = tl.events.iter().position(|e| e.step == ProtoStep::Compute && e.frame == Some(1)).unwrap();
        tl.events[c].end_ns += 1_000_000_000;
        assert!(!validate_timeline(&tl).is_empty());
    }

    #[test]
    fn shared_buffer_is_a_violation() {
        let mut tl = run_mission(3, &Timings::with_compute(0.1).unwrap(), "k").unwrap();
        assert!(tl.overlaps() > 0);
        for e in tl.events.iter_mut().filter(|e| e.step == ProtoStep::FrameDma) {
            e.buffer = Some(0);
        }
        assert!(validate_timeline(&tl).iter().any(|m| m.contains("share")));
    }

    #[test]
    fn csv_header() {
        let tl = run_mission(2, &Timings::with_compute(0.1).unwrap(), "k").unwrap();
        let csv = tl.to_csv();
        assert!(csv.starts_with("frame,step,actor,t_start,t_end\n"));
        assert!(csv.contains(",kernel_fetch,accelerator,0.000000000,0.050000000"));
    }

    #[test]
    fn rejects_nonpositive() {
        assert!(Timings::from_secs(0.0, 0.1, 0.1, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn period_closed_form(d in 1u64..1_000_000, c in 1u64..1_000_000, r in 1u64..100_000, s in 1u64..1_000_000, n in 3usize..12) {
            let tm = Timings { frame_dma_ns: d, compute_ns: c, result_ns: r, setup_ns: s };
            let tl = run_mission(n, &tm, "k").unwrap();
            prop_assert!(validate_timeline(&tl).is_empty());
            prop_assert_eq!(tl.steady_period_ns(), Some(tm.period_ns()));
            prop_assert!(tl.max_live_buffers() <= FRAME_BUFFERS);
        }
    }
}

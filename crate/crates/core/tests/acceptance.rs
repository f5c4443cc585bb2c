//! Acceptance suite. Runs as a plain binary so every criterion prints its
//! verdict even when an earlier one fails.

use std::time::Instant;

use nanotile::cost::{self, calibrated, default_grid, frame_report, min_energy, sweep, OpPoint, Targets};
use nanotile::ctrl::{self, ProbTrace, ReactionScenario};
use nanotile::exec::{audit_trace, execute_schedule, MemSim};
use nanotile::fxp::{quantize, Acc32, Q412};
use nanotile::kernels::{infer_raw, Fixed, Tensor3};
use nanotile::l2plan::{plan_single_stack, plan_two_stack, L2Config};
use nanotile::net::{build_dronet, mac_count, param_count, LayerKind, NetworkGraph, WeightStore};
use nanotile::offload::{run_mission, validate_timeline, Timings, FRAME_BUFFERS};
use nanotile::tiler::{self, plan_network, NodeOp, Scheme, Step, TilePlan, TileSchedule};
use num_bigint::BigInt;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const KB: usize = 1024;
const BUDGETS: [usize; 3] = [16 * KB, 32 * KB, 60 * KB];

struct Verdict {
    ok: bool,
    notes: Vec<String>,
}

impl Verdict {
    fn new() -> Self {
        Verdict { ok: true, notes: Vec::new() }
    }

    fn check(&mut self, cond: bool, what: impl Into<String>) {
        let what = what.into();
        if cond {
            self.notes.push(what);
        } else {
            self.ok = false;
            self.notes.push(format!("FAILED {what}"));
        }
    }
}

fn frame(g: &NetworkGraph, seed: u64) -> Tensor3<Q412> {
    let s = g.shape(g.input);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    Tensor3::from_vec(s.c, s.h, s.w, (0..s.elems()).map(|_| Q412(rng.gen_range(0..=4096))).collect()).unwrap()
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol * target.abs()
}

fn mac_accounting(g: &NetworkGraph) -> Verdict {
    let mut v = Verdict::new();
    let r = mac_count(g);
    v.check((40_000_000..=42_000_000).contains(&r.total), format!("total {} MAC", r.total));
    let mut exact = true;
    for (l, (id, m)) in g.layers.iter().zip(&r.per_layer) {
        let closed = match l.kind {
            LayerKind::Conv => l.k_out * l.k_in * l.kh * l.kw * l.h_out * l.w_out,
            LayerKind::FullyConnected => l.k_in * l.k_out,
            _ => 0,
        } as u64;
        if closed != *m {
            exact = false;
            v.notes.push(format!("{id}: {m} vs {closed}"));
        }
    }
    v.check(exact, format!("{} per-layer counts match the closed form", r.per_layer.len()));
    v
}

fn weight_sizes(g: &NetworkGraph) -> Verdict {
    let mut v = Verdict::new();
    let p = param_count(g);
    v.check(p.bytes_4 > KB * KB, format!("{} params, {} B at 4 B", p.params, p.bytes_4));
    v.check(p.bytes_2 > 512 * KB, format!("{} B at 2 B", p.bytes_2));
    v
}

/// Straight nested-loop interpreter on explicitly padded tensors with wide
/// integer accumulators.
fn naive(g: &NetworkGraph, w: &WeightStore, x: &Tensor3<Q412>) -> (i16, i16) {
    type T = Vec<Vec<Vec<i64>>>;
    let sat = |v: i64| v.clamp(i16::MIN as i64, i16::MAX as i64);
    let mut t: Vec<Option<T>> = vec![None; g.tensors.len()];
    t[g.input] = Some((0..x.c).map(|c| (0..x.h).map(|y| (0..x.w).map(|i| x.at(c, y, i).0 as i64).collect()).collect()).collect());
    for (li, l) in g.layers.iter().enumerate() {
        let a = t[l.inputs[0]].clone().unwrap();
        let (c_in, h, wd) = (a.len(), a[0].len(), a[0][0].len());
        let out: T = match l.kind {
            LayerKind::Conv => {
                let lw = w.for_layer(li).unwrap();
                let (ho, wo) = (h.div_ceil(l.stride), wd.div_ceil(l.stride));
                let pad = |n: usize, o: usize, k: usize| ((o - 1) * l.stride + k).saturating_sub(n) / 2;
                let (pt, pl) = (pad(h, ho, l.kh), pad(wd, wo, l.kw));
                let ph = (ho - 1) * l.stride + l.kh;
                let pw = (wo - 1) * l.stride + l.kw;
                let mut p = vec![vec![vec![0i64; pw]; ph]; c_in];
                for c in 0..c_in {
                    for y in 0..h {
                        for i in 0..wd {
                            if y + pt < ph && i + pl < pw {
                                p[c][y + pt][i + pl] = a[c][y][i];
                            }
                        }
                    }
                }
                let mut o = vec![vec![vec![0i64; wo]; ho]; l.k_out];
                for k in 0..l.k_out {
                    for y in 0..ho {
                        for i in 0..wo {
                            let mut s = (lw.b[k].0 as i64) << 12;
                            for c in 0..c_in {
                                for dy in 0..l.kh {
                                    for dx in 0..l.kw {
                                        let wi = ((k * c_in + c) * l.kh + dy) * l.kw + dx;
                                        s += lw.w[wi].0 as i64 * p[c][y * l.stride + dy][i * l.stride + dx];
                                    }
                                }
                            }
                            let mut r = sat(s >> 12);
                            if l.fused_relu {
                                r = r.max(0);
                            }
                            o[k][y][i] = r;
                        }
                    }
                }
                o
            }
            LayerKind::MaxPool => {
                let (ho, wo) = (h.div_ceil(2), wd.div_ceil(2));
                (0..c_in)
                    .map(|c| {
                        (0..ho)
                            .map(|y| {
                                (0..wo)
                                    .map(|i| {
                                        let mut m = i64::MIN;
                                        for yy in 2 * y..(2 * y + 2).min(h) {
                                            for xx in 2 * i..(2 * i + 2).min(wd) {
                                                m = m.max(a[c][yy][xx]);
                                            }
                                        }
                                        m
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            }
            LayerKind::Relu => a.iter().map(|p| p.iter().map(|r| r.iter().map(|v| (*v).max(0)).collect()).collect()).collect(),
            LayerKind::Add => {
                let b = t[l.inputs[1]].clone().unwrap();
                let mut o = a.clone();
                for c in 0..c_in {
                    for y in 0..h {
                        for i in 0..wd {
                            let s = sat(a[c][y][i] + b[c][y][i]);
                            o[c][y][i] = if l.fused_relu { s.max(0) } else { s };
                        }
                    }
                }
                o
            }
            LayerKind::FullyConnected => {
                let lw = w.for_layer(li).unwrap();
                let flat: Vec<i64> = a.iter().flatten().flatten().copied().collect();
                let mut o = vec![vec![vec![0i64]]; l.k_out];
                for k in 0..l.k_out {
                    let mut s = (lw.b[k].0 as i64) << 12;
                    for (j, xv) in flat.iter().enumerate() {
                        s += lw.w[k * flat.len() + j].0 as i64 * xv;
                    }
                    o[k][0][0] = sat(s >> 12);
                }
                o
            }
        };
        t[l.output] = Some(out);
    }
    let outs = g.outputs();
    let head = |i: usize| t[outs[i]].as_ref().unwrap()[0][0][0] as i16;
    (head(0), head(1))
}

fn bit_exactness(g: &NetworkGraph) -> Verdict {
    let mut v = Verdict::new();
    let l2 = plan_two_stack(g, &L2Config::default()).unwrap();
    let scheds: Vec<TileSchedule> = BUDGETS.iter().map(|&b| plan_network(g, b).unwrap()).collect();
    let seeds: Vec<u64> = (0..100).collect();
    let results: Vec<(u64, Vec<bool>, bool)> = seeds
        .par_iter()
        .map(|&seed| {
            let w = WeightStore::random(g, seed);
            let x = frame(g, seed);
            let oracle = infer_raw::<Fixed>(g, &w, x.clone()).unwrap();
            let mut mem = MemSim::default();
            let same: Vec<bool> = scheds
                .iter()
                .map(|s| match execute_schedule(g, s, &l2, &w, &x, &mut mem) {
                    Ok(out) => out.raw == oracle,
                    Err(_) => false,
                })
                .collect();
            let naive_ok = seed >= 20 || naive(g, &w, &x) == (oracle.steering.0, oracle.collision_logit.0);
            (seed, same, naive_ok)
        })
        .collect();
    for (i, b) in BUDGETS.iter().enumerate() {
        let bad: Vec<u64> = results.iter().filter(|r| !r.1[i]).map(|r| r.0).collect();
        v.check(bad.is_empty(), format!("{} KB: {}/100 seeds bit-exact{}", b / KB, 100 - bad.len(), if bad.is_empty() { String::new() } else { format!(" (bad {bad:?})") }));
    }
    let bad: Vec<u64> = results.iter().filter(|r| !r.2).map(|r| r.0).collect();
    v.check(bad.is_empty(), format!("naive interpreter agrees on {}/20 seeds", 20 - bad.len()));
    v
}

/// L1 bytes a plan's steps actually touch, counted from tile extents alone.
fn walked_footprint(node: &tiler::NodeKernel, plan: &TilePlan) -> usize {
    let g = &node.geom;
    let e = 2;
    let mut input = vec![[0usize; 2]; node.operands()];
    let mut weights = [0usize; 2];
    let mut output = [0usize; 2];
    let mut acc = 0;
    let mut scratch = 0;
    for s in plan.steps(node) {
        match s {
            Step::LoadInput { operand, slot, ch, rows, cols, .. } => {
                let b = ch.len() * (rows.end - rows.start) as usize * (cols.end - cols.start) as usize * e;
                input[operand][slot] = input[operand][slot].max(b);
            }
            Step::LoadWeights { slot, kout, .. } => weights[slot] = weights[slot].max(kout.len() * (g.weight_elems() + 1) * e),
            Step::Store { slot, kout, rows, .. } => output[slot] = output[slot].max(kout.len() * rows.len() * g.w_out * e),
            Step::Compute { kout, out_rows, first, last, .. } => {
                let body = g.body_rows(&out_rows).len() * g.body_w;
                if node.op != NodeOp::Relu && node.op != NodeOp::Add {
                    let plane = if node.op == NodeOp::Fc { 1 } else { body };
                    if !(first && last) {
                        acc = acc.max(4 * kout.len() * plane);
                    } else if g.pool {
                        scratch = scratch.max(4 * body);
                    }
                }
            }
        }
    }
    // a partial accumulator doubles as pooling stage, so scratch is only
    // needed without one
    if acc > 0 {
        scratch = 0;
    }
    let mut sum: usize = input.iter().flatten().sum::<usize>() + weights.iter().sum::<usize>() + output.iter().sum::<usize>() + acc + scratch;
    // a single-slot stream that is not double buffered is counted once
    let _ = &mut sum;
    sum
}

fn budget_safety(g: &NetworkGraph) -> Verdict {
    let mut v = Verdict::new();
    let l2 = plan_two_stack(g, &L2Config::default()).unwrap();
    let params = &calibrated().unwrap().cycle;
    for &b in &BUDGETS {
        let s = plan_network(g, b).unwrap();
        let w = WeightStore::random(g, 7);
        let mut mem = MemSim::default();
        let out = execute_schedule(g, &s, &l2, &w, &frame(g, 7), &mut mem).unwrap();
        let rep = audit_trace(&out.trace, &mem);
        v.check(rep.ok() && rep.peak_l1 <= b && rep.peak_l2 <= 512 * KB, format!("{} KB: trace peak L1 {} B, L2 {} B", b / KB, rep.peak_l1, rep.peak_l2));
        let walked = s.nodes.iter().zip(&s.plans).map(|(n, p)| walked_footprint(n, p)).max().unwrap();
        v.check(walked <= b, format!("{} KB: walked footprint {walked} B", b / KB));
        let mut optimal = true;
        for (i, (n, p)) in s.nodes.iter().zip(&s.plans).enumerate() {
            let mut all = Vec::new();
            for scheme in [Scheme::Spatial, Scheme::FeatureWise] {
                all.extend(tiler::enumerate_tilings(i, n, b, scheme, params).unwrap_or_default());
            }
            if all.is_empty() {
                all = tiler::enumerate_candidates(i, n, b, params).unwrap();
            }
            let best = all.iter().map(|p| p.est_cycles).fold(f64::INFINITY, f64::min);
            if p.est_cycles > best {
                optimal = false;
                v.notes.push(format!("{}: {} > {}", n.name, p.est_cycles, best));
            }
        }
        v.check(optimal, format!("{} KB: every node at the enumeration minimum", b / KB));
    }
    v
}

fn memory_plan(g: &NetworkGraph) -> Verdict {
    let mut v = Verdict::new();
    let cfg = L2Config::default();
    let two = plan_two_stack(g, &cfg).unwrap();
    let one = plan_single_stack(g, &cfg).unwrap();
    v.check((333_000..=407_000).contains(&two.peak), format!("two-stack peak {} B", two.peak));
    v.check((598_000..=732_000).contains(&one.peak) && one.peak > 512 * KB, format!("single-stack peak {} B", one.peak));
    let mut always = true;
    for frame_outside in [false, true] {
        for inplace_relu in [false, true] {
            for frame_slots in [0, 1, 2] {
                let c = L2Config { frame_outside, inplace_relu, frame_slots, ..cfg };
                let (a, b) = (plan_two_stack(g, &c).unwrap(), plan_single_stack(g, &c).unwrap());
                always &= a.peak <= b.peak;
            }
        }
    }
    v.check(always, "two-stack <= single-stack in all 12 configurations");
    v
}

fn calibration(g: &NetworkGraph) -> Verdict {
    let mut v = Verdict::new();
    let cal = calibrated().unwrap();
    let t = Targets::load().unwrap();
    let s = plan_network(g, tiler::DEFAULT_L1_BUDGET).unwrap();
    v.check(cal.fit.free_parameters <= 6, format!("{} fitted parameters", cal.fit.free_parameters));
    let eq = frame_report(&s, OpPoint::new(1.0, 50.0, 50.0), cal).unwrap();
    let rows = [
        ("L3-L2", eq.l3_cl_cycles, t.breakdown[0]),
        ("L2-L1", eq.l2l1_exposed_cycles, t.breakdown[1]),
        ("compute", eq.compute_cycles, t.breakdown[2]),
        ("total", eq.total_cl_cycles, t.breakdown[3]),
    ];
    for (name, got, want) in rows {
        v.check(within(got, want, 0.10), format!("{name} {:.3} M vs {:.3} M", got / 1e6, want / 1e6));
    }
    let lr = frame_report(&s, t.layer_op, cal).unwrap();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut matched = 0;
    for l in &lr.layers {
        if let Some(tl) = t.layers.iter().find(|x| x.node == l.name) {
            matched += 1;
            let e = (l.exec_ms - tl.exec_ms).abs() / tl.exec_ms;
            if e > worst.0 {
                worst = (e, l.name.clone());
            }
        }
    }
    v.check(matched == t.layers.len() && worst.0 <= 0.30, format!("{matched} layers, worst {} off by {:.1}%", worst.1, 100.0 * worst.0));
    let eff = frame_report(&s, OpPoint::new(1.0, 50.0, 100.0), cal).unwrap();
    let peak = frame_report(&s, OpPoint::new(1.2, 250.0, 250.0), cal).unwrap();
    v.check((eff.fps - 6.0).abs() <= 1.0, format!("{:.2} fps at 1.0 V 50/100", eff.fps));
    v.check((peak.fps - 18.0).abs() <= 2.0, format!("{:.2} fps at 1.2 V 250/250", peak.fps));
    v.check(within(eff.soc_mw, 45.0, 0.15), format!("{:.1} mW at 1.0 V 50/100", eff.soc_mw));
    v.check(within(peak.soc_mw, 272.0, 0.15), format!("{:.1} mW at 1.2 V 250/250", peak.soc_mw));
    let pts = sweep(&s, &default_grid(), cal).unwrap();
    let best = min_energy(&pts).unwrap().op;
    v.check(best == OpPoint::new(1.0, 50.0, 100.0), format!("min energy at {} V {}/{}", best.vdd, best.f_fc_mhz, best.f_cl_mhz));
    v.check(within(peak.mac_per_cycle(), 2.81, 0.05), format!("{:.3} MAC/cycle", peak.mac_per_cycle()));
    v
}

fn control(g: &NetworkGraph) -> Verdict {
    let mut v = Verdict::new();
    let cal = calibrated().unwrap();
    let s = plan_network(g, tiler::DEFAULT_L1_BUDGET).unwrap();
    let inference = frame_report(&s, OpPoint::new(1.2, 250.0, 250.0), cal).unwrap().frame_s;
    let trace = ProbTrace::step(4.0, 10.0, 0.001);
    let mut closed = true;
    for f in [5.0, 8.0, 10.0, 15.0, 20.0, 25.0] {
        let sc = ReactionScenario::standard(f, inference);
        let o = ctrl::simulate_reaction(&sc, &trace).unwrap();
        closed &= o.stop_time.is_some_and(|t| (t - sc.step_stop_time()).abs() < 1e-9);
    }
    v.check(closed, "stop time equals first frame + one frame + latency at 5..25 Hz");
    let o10 = ctrl::simulate_reaction(&ReactionScenario::standard(10.0, inference), &trace).unwrap();
    v.check(
        o10.stopped_before_obstacle,
        format!("10 Hz: stop at {:.3} s, {:.2} m left, needs {:.2} m", o10.stop_time.unwrap_or(f64::NAN), o10.distance_at_stop_cmd.unwrap_or(f64::NAN), o10.stop_distance),
    );
    let o5 = ctrl::simulate_reaction(&ReactionScenario::standard(5.0, inference), &trace).unwrap();
    v.check(
        !o5.stopped_before_obstacle,
        format!("5 Hz collides: stop at {:.3} s, {:.2} m left, needs {:.2} m", o5.stop_time.unwrap_or(f64::NAN), o5.distance_at_stop_cmd.unwrap_or(f64::NAN), o5.stop_distance),
    );
    let mut runner = TestRunner::new(Config { cases: 10_000, failure_persistence: None, ..Config::default() });
    let convex = runner
        .run(&(0.0f64..=1.0, 0.0f64..=1.0, 0.001f64..=1.0), |(p, c, a)| {
            let q = ctrl::filter_step(p, c, a).unwrap();
            prop_assert!(p.min(c) - 1e-15 <= q && q <= p.max(c) + 1e-15);
            Ok(())
        })
        .is_ok();
    v.check(convex, "filter convex over 10^4 cases");
    v
}

fn protocol() -> Verdict {
    let mut v = Verdict::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut valid, mut exact, mut buffers) = (0, 0, 0);
    for _ in 0..1000 {
        let tm = Timings {
            frame_dma_ns: rng.gen_range(1..500_000_000),
            compute_ns: rng.gen_range(1..500_000_000),
            result_ns: rng.gen_range(1..10_000_000),
            setup_ns: rng.gen_range(1..1_000_000_000),
        };
        let tl = run_mission(rng.gen_range(2..24), &tm, "dronet").unwrap();
        valid += validate_timeline(&tl).is_empty() as usize;
        exact += (tl.steady_period_ns() == Some(tm.period_ns())) as usize;
        buffers += (tl.max_live_buffers() <= FRAME_BUFFERS) as usize;
    }
    v.check(valid == 1000, format!("{valid}/1000 timelines valid"));
    v.check(exact == 1000, format!("{exact}/1000 periods equal max(acquisition, compute + result)"));
    v.check(buffers == 1000, format!("{buffers}/1000 within {FRAME_BUFFERS} frame buffers"));
    v
}

fn fixed_point() -> Verdict {
    let mut v = Verdict::new();
    let cfg = || TestRunner::new(Config { cases: 100_000, failure_persistence: None, ..Config::default() });
    let mono = cfg()
        .run(&(-20.0f64..20.0, -20.0f64..20.0), |(a, b)| {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize(lo).unwrap() <= quantize(hi).unwrap());
            Ok(())
        })
        .is_ok();
    v.check(mono, "quantize monotone");
    let rmono = cfg()
        .run(&(any::<i32>(), any::<i32>()), |(a, b)| {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(Acc32(lo).renorm() <= Acc32(hi).renorm());
            Ok(())
        })
        .is_ok();
    v.check(rmono, "renorm monotone");
    let sat = cfg()
        .run(&(8.0f64..1e12), |x| {
            prop_assert_eq!(quantize(x).unwrap(), Q412::MAX);
            prop_assert_eq!(quantize(-x - 1.0).unwrap(), Q412::MIN);
            prop_assert_eq!(Acc32((x as i64).min(i32::MAX as i64) as i32 | (1 << 28)).renorm(), Q412::MAX);
            Ok(())
        })
        .is_ok();
    v.check(sat, "saturation");
    let trip = cfg()
        .run(&any::<i16>(), |r| {
            prop_assert_eq!(quantize(Q412(r).dequantize()).unwrap(), Q412(r));
            Ok(())
        })
        .is_ok();
    v.check(trip, "round trip");
    let dot = cfg()
        .run(&(proptest::collection::vec((-4096i16..=4096, -4096i16..=4096), 0..48), any::<i16>()), |(terms, b)| {
            let acc = terms.iter().fold(Acc32::from_bias(Q412(b)), |a, &(x, y)| a.mac(Q412(x), Q412(y)));
            let exact: BigInt = terms.iter().fold(BigInt::from(b) << 12usize, |a, &(x, y)| a + BigInt::from(x) * BigInt::from(y));
            prop_assert_eq!(BigInt::from(acc.0), exact.clone());
            let want = (exact >> 12usize).clamp(BigInt::from(i16::MIN), BigInt::from(i16::MAX));
            prop_assert_eq!(BigInt::from(acc.renorm().0), want);
            Ok(())
        })
        .is_ok();
    v.check(dot, "dot product equals big-integer oracle");
    v.notes.push("10^5 cases each".into());
    v
}

fn main() {
    let g = build_dronet();
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("MAC accounting", Box::new(|| mac_accounting(&g))),
        ("weight-size claims", Box::new(|| weight_sizes(&g))),
        ("bit-exactness", Box::new(|| bit_exactness(&g))),
        ("budget safety", Box::new(|| budget_safety(&g))),
        ("memory-plan reproduction", Box::new(|| memory_plan(&g))),
        ("cost-model calibration", Box::new(|| calibration(&g))),
        ("control properties", Box::new(control_verdict(&g))),
        ("protocol", Box::new(protocol)),
        ("fixed-point unit properties", Box::new(fixed_point)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let v = run();
        let secs = t0.elapsed().as_secs_f64();
        if !v.ok {
            failed += 1;
        }
        println!("criterion {} {name}: {} [{:.1} s] {}", i + 1, if v.ok { "PASS" } else { "FAIL" }, secs, v.notes.join("; "));
    }
    let _ = cost::ETA_CONV;
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn control_verdict(g: &NetworkGraph) -> impl Fn() -> Verdict + '_ {
    move || control(g)
}

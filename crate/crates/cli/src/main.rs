use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use nanotile::cost::{self, OpPoint};
use nanotile::ctrl::{self, ProbTrace, ReactionScenario};
use nanotile::exec::{audit_trace, run_tiled};
use nanotile::kernels::{infer_untiled, Arithmetic};
use nanotile::l2plan::{plan_single_stack, plan_two_stack, L2Config};
use nanotile::metrics::{self, Records};
use nanotile::net::{self, build_dronet, GrayImage, WeightStore, INPUT_SIDE};
use nanotile::offload::{run_mission, Timings};
use nanotile::tiler::{plan_network, DEFAULT_L1_BUDGET};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// First line of every CSV the tool writes.
const CSV_VERSION: &str = "# nanotile-csv v1";

#[derive(Parser)]
#[command(name = "nanotile", version, about = "Fixed-point DroNet inference, tiling, memory and cost planning for an 8-core cluster")]
struct Cli {
    /// Emit machine-readable CSV instead of text.
    #[arg(long, global = true)]
    csv: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one frame through the network.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Execute the tiled schedule on the simulated memory hierarchy and compare with the untiled result.
        #[arg(long)]
        tiled: bool,
        #[arg(long, default_value_t = DEFAULT_L1_BUDGET)]
        l1_budget: usize,
        /// Write the tiled execution trace to this file as CSV.
        #[arg(long, requires = "tiled")]
        trace_out: Option<PathBuf>,
    },
    /// Print the per-node tiling schedule.
    Plan {
        #[arg(long, default_value_t = DEFAULT_L1_BUDGET)]
        l1_budget: usize,
    },
    /// Print the L2 allocation plan.
    Mem {
        /// Use a single stack instead of two.
        #[arg(long)]
        single: bool,
        /// Print allocation events instead of per-step occupancy (CSV only).
        #[arg(long)]
        events: bool,
    },
    /// Estimate cycles, frame rate and power at one operating point.
    Cost {
        #[arg(long, default_value_t = 1.0)]
        vdd: f64,
        /// Fabric-controller clock in MHz.
        #[arg(long, default_value_t = 50.0)]
        fc: f64,
        /// Cluster clock in MHz.
        #[arg(long, default_value_t = 100.0)]
        cl: f64,
        #[arg(long, default_value_t = DEFAULT_L1_BUDGET)]
        l1_budget: usize,
    },
    /// Frame rate, power and energy over the voltage and frequency grid.
    Sweep {
        #[arg(long, default_value_t = DEFAULT_L1_BUDGET)]
        l1_budget: usize,
    },
    /// Obstacle reaction study at one or more frame rates.
    React {
        /// Frame rates in Hz, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = vec![5.0, 10.0, 20.0])]
        fps: Vec<f64>,
        /// Collision-probability trace (timestamp_s,c_k). Defaults to a clean step at the appearance time.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Inference time in seconds. Defaults to the modelled time at 1.2 V, 250/250 MHz.
        #[arg(long)]
        inference: Option<f64>,
    },
    /// Simulate the host and accelerator offload protocol.
    Mission {
        #[arg(long, default_value_t = 10)]
        frames: usize,
        /// Accelerator time per frame in ms. Defaults to the modelled time at 1.0 V, 50/100 MHz.
        #[arg(long)]
        compute_ms: Option<f64>,
        #[arg(long, default_value = "dronet")]
        kernel: String,
    },
    /// Prediction quality: EVA, RMSE, accuracy and F1.
    Eval {
        /// CSV with steering,collision predictions (collision as probability).
        #[arg(long)]
        predictions: PathBuf,
        /// CSV with steering,collision ground truth (collision as 0 or 1).
        #[arg(long)]
        labels: PathBuf,
    },
    /// Write a weight file.
    GenWeights {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// All-zero weights instead of random ones.
        #[arg(long)]
        zeros: bool,
    },
    /// Write a random 8-bit PGM image.
    GenImage {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = INPUT_SIDE)]
        width: usize,
        #[arg(long, default_value_t = INPUT_SIDE)]
        height: usize,
    },
}

fn existing(p: &Path) -> Result<&Path> {
    if !p.exists() {
        bail!("file not found: {}", p.display());
    }
    Ok(p)
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(existing(p)?).with_context(|| format!("reading {}", p.display()))
}

fn versioned(body: &str) -> String {
    format!("{CSV_VERSION}\n{body}")
}

fn schedule(budget: usize) -> Result<nanotile::tiler::TileSchedule> {
    Ok(plan_network(&build_dronet(), budget)?)
}

fn frame_time(op: OpPoint) -> Result<f64> {
    Ok(cost::frame_report(&schedule(DEFAULT_L1_BUDGET)?, op, cost::calibrated()?)?.frame_s)
}

fn run(cli: Cli) -> Result<String> {
    let csv = cli.csv;
    let g = build_dronet();
    Ok(match cli.cmd {
        Cmd::Infer { weights, image, tiled, l1_budget, trace_out } => {
            let w = net::load_weights(existing(&weights)?, &g).with_context(|| format!("loading {}", weights.display()))?;
            let x = net::load_image(existing(&image)?).with_context(|| format!("loading {}", image.display()))?;
            let p = infer_untiled(&g, &w, &x, Arithmetic::Q412)?;
            let mut out = if csv {
                versioned(&format!("steering,collision\n{:.4},{:.4}\n", p.steering, p.collision))
            } else {
                format!("steering {:.4}, collision {:.4}\n", p.steering, p.collision)
            };
            if tiled {
                let (o, mem) = run_tiled(&g, &w, &x, l1_budget)?;
                let audit = audit_trace(&o.trace, &mem);
                if let Some(path) = trace_out {
                    fs::write(&path, versioned(&o.trace.to_csv())).with_context(|| format!("writing {}", path.display()))?;
                }
                let same = o.prediction == p;
                if !csv {
                    out.push_str(&format!("bit-exact vs untiled: {}\n", if same { "yes" } else { "no" }));
                    out.push_str(&audit.to_text());
                }
                if !same || !audit.ok() {
                    print!("{out}");
                    bail!("tiled execution diverged from the untiled oracle or violated its memory budget");
                }
            }
            out
        }
        Cmd::Plan { l1_budget } => {
            let s = schedule(l1_budget)?;
            if csv { versioned(&s.to_csv()) } else { s.to_text() }
        }
        Cmd::Mem { single, events } => {
            let cfg = L2Config::default();
            let p = if single { plan_single_stack(&g, &cfg)? } else { plan_two_stack(&g, &cfg)? };
            match (csv, events) {
                (true, true) => versioned(&p.events_csv()),
                (true, false) => versioned(&p.to_csv()),
                _ => p.to_text(),
            }
        }
        Cmd::Cost { vdd, fc, cl, l1_budget } => {
            let r = cost::frame_report(&schedule(l1_budget)?, OpPoint::new(vdd, fc, cl), cost::calibrated()?)?;
            if csv { versioned(&r.to_csv()) } else { r.to_text() }
        }
        Cmd::Sweep { l1_budget } => {
            let pts = cost::sweep(&schedule(l1_budget)?, &cost::default_grid(), cost::calibrated()?)?;
            if csv {
                versioned(&cost::sweep_csv(&pts))
            } else {
                let mut s = String::from(" VDD   FC   CL     fps      mW   mJ/frame\n");
                for p in &pts {
                    s.push_str(&format!("{:.1} {:>4} {:>4} {:>7.2} {:>7.1} {:>10.3}\n", p.op.vdd, p.op.f_fc_mhz, p.op.f_cl_mhz, p.fps, p.soc_mw, p.energy_mj));
                }
                if let Some(b) = cost::min_energy(&pts) {
                    s.push_str(&format!("minimum energy: {:.1} V, FC {} MHz, CL {} MHz, {:.3} mJ/frame\n", b.op.vdd, b.op.f_fc_mhz, b.op.f_cl_mhz, b.energy_mj));
                }
                s
            }
        }
        Cmd::React { fps, trace, inference } => {
            let inference = match inference {
                Some(t) => t,
                None => frame_time(OpPoint::new(1.2, 250.0, 250.0))?,
            };
            let base = ReactionScenario::standard(fps.first().copied().unwrap_or(10.0), inference);
            let tr = match trace {
                Some(p) => ProbTrace::parse_csv(&read_text(&p)?)?,
                None => ProbTrace::step(base.appear, base.horizon() + 2.0, 1e-3),
            };
            let outs = ctrl::reaction_sweep(&base, &fps, &tr)?;
            if csv {
                versioned(&ctrl::outcomes_csv(&outs))
            } else {
                let mut s = format!(
                    "approach {} m/s, obstacle at {} s with {} m free, inference {:.1} ms\n",
                    base.speed, base.appear, base.free, inference * 1e3
                );
                for o in &outs {
                    match o.stop_time {
                        Some(t) => s.push_str(&format!(
                            "{:>5.1} Hz: stop command at {:.3} s, {:.2} m left, braking needs {:.2} m: {}\n",
                            o.frame_rate,
                            t,
                            o.distance_at_stop_cmd.unwrap_or(0.0),
                            o.stop_distance,
                            if o.stopped_before_obstacle { "stops in time" } else { "collision" }
                        )),
                        None => s.push_str(&format!("{:>5.1} Hz: no stop before the obstacle: collision\n", o.frame_rate)),
                    }
                }
                s
            }
        }
        Cmd::Mission { frames, compute_ms, kernel } => {
            let compute = match compute_ms {
                Some(ms) => ms / 1e3,
                None => frame_time(OpPoint::new(1.0, 50.0, 100.0))?,
            };
            let tm = Timings::with_compute(compute)?;
            let tl = run_mission(frames, &tm, &kernel)?;
            if csv {
                versioned(&tl.to_csv())
            } else {
                let mut s = String::new();
                for e in &tl.events {
                    let f = e.frame.map_or("-".to_string(), |f| f.to_string());
                    s.push_str(&format!("{:>12.6} {:>12.6}  frame {:>3}  {:<12} {}\n", e.start_ns as f64 / 1e9, e.end_ns as f64 / 1e9, f, e.actor.name(), e.step.name()));
                }
                s.push_str(&format!("{} frames, {} overlapping acquisition/compute pairs, at most {} frame buffers live\n", tl.frames(), tl.overlaps(), tl.max_live_buffers()));
                if let Some(fps) = tl.fps() {
                    s.push_str(&format!("steady state {:.2} fps (period {:.3} ms)\n", fps, tm.period_ns() as f64 / 1e6));
                }
                let problems = nanotile::offload::validate_timeline(&tl);
                if !problems.is_empty() {
                    bail!("invalid timeline: {}", problems.join("; "));
                }
                s
            }
        }
        Cmd::Eval { predictions, labels } => {
            let p = Records::parse_csv(&read_text(&predictions)?).with_context(|| predictions.display().to_string())?;
            let l = Records::parse_csv(&read_text(&labels)?).with_context(|| labels.display().to_string())?;
            let m = metrics::evaluate(&p, &l)?;
            if csv {
                versioned(&format!("eva,rmse,accuracy,f1\n{:.6},{:.6},{:.6},{:.6}\n", m.eva, m.rmse, m.accuracy, m.f1))
            } else {
                format!("EVA {:.4}\nRMSE {:.4}\nAccuracy {:.4}\nF1 {:.4}\n", m.eva, m.rmse, m.accuracy, m.f1)
            }
        }
        Cmd::GenWeights { out, seed, zeros } => {
            let w = if zeros { WeightStore::zeros(&g) } else { WeightStore::random(&g, seed) };
            net::save_weights(&w, &out).with_context(|| format!("writing {}", out.display()))?;
            format!("wrote {} ({} bytes)\n", out.display(), fs::metadata(&out)?.len())
        }
        Cmd::GenImage { out, seed, width, height } => {
            if width == 0 || height == 0 {
                bail!("image dimensions must be positive");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = GrayImage { width, height, pixels: (0..width * height).map(|_| rng.gen()).collect() };
            fs::write(&out, img.to_pgm()).with_context(|| format!("writing {}", out.display()))?;
            format!("wrote {} ({}x{})\n", out.display(), width, height)
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(s) => {
            print!("{s}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

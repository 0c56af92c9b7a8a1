//! Command-line front end: campaign sweeps, CSV/JSON output and SVG plots.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{parse_kv, parse_rate, parse_scheduler, SimConfig};
use crate::engine::{run_once, RunResult};
use crate::error::Error;
use crate::metrics::{aggregate_runs, compute_metrics, CampaignSummary, Group, SummaryCell};

pub const SUMMARY_HEADER: &str = "runs,rate_mbps,n_relays,group,sum_throughput_mbps,mean_latency_ms,ci_throughput,ci_latency";
pub const RUNS_HEADER: &str =
    "run,seed,rate_mbps,n_relays,group,sum_throughput_mbps,mean_latency_ms,delivered_packets,dropped_packets";

#[derive(Debug, Parser)]
#[command(name = "iabsim", version, about = "mmWave integrated access and backhaul simulator")]
pub struct Args {
    /// Named scenario preset.
    #[arg(long, default_value = "paper-manhattan")]
    pub preset: String,
    /// `key = value` file applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Relay counts to sweep, e.g. `0,2,4`.
    #[arg(long, value_delimiter = ',')]
    pub relays: Option<Vec<usize>>,
    /// Per-UE source rates to sweep, e.g. `28M,224M`.
    #[arg(long, value_delimiter = ',')]
    pub rate: Option<Vec<String>>,
    /// Independent runs per sweep point.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Seed of the first run; run `i` uses `seed + i`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// MAC scheduler: rr or pf.
    #[arg(long)]
    pub sched: Option<String>,
    /// Simulated seconds per run, warm-up included.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long, default_value = "iabsim-out")]
    pub out: PathBuf,
    /// Any of csv, json, plot.
    #[arg(long, value_delimiter = ',', default_value = "csv,json")]
    pub formats: Vec<String>,
}

/// Fully resolved sweep.
#[derive(Debug, Clone, Serialize)]
pub struct CampaignSpec {
    pub preset: String,
    pub base: SimConfig,
    pub relays: Vec<usize>,
    pub rates_bps: Vec<f64>,
    pub runs: usize,
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    pub formats: Formats,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Formats {
    pub csv: bool,
    pub json: bool,
    pub plot: bool,
}

enum CliError {
    Config(String),
    Sim(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Config(m),
            other => CliError::Sim(other.to_string()),
        }
    }
}

fn parse_list<T, F: Fn(&str) -> Result<T, Error>>(value: &str, f: F) -> Result<Vec<T>, Error> {
    value.split(',').map(|v| f(v.trim())).collect()
}

impl CampaignSpec {
    pub fn from_args(args: &Args) -> Result<Self, Error> {
        let mut base = SimConfig::preset(&args.preset)?;
        let mut relays = None;
        let mut rates = None;
        let mut runs = None;
        if let Some(path) = &args.config {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
            for (k, v) in parse_kv(&text)? {
                match k.as_str() {
                    "relays" => {
                        relays = Some(parse_list(&v, |x| x.parse().map_err(|_| Error::config(format!("bad relay count '{x}'"))))?)
                    }
                    "rates" => rates = Some(parse_list(&v, parse_rate)?),
                    "runs" => runs = Some(v.parse().map_err(|_| Error::config(format!("bad run count '{v}'")))?),
                    "n_relays" => {
                        base.set(&k, &v)?;
                        relays = Some(vec![base.n_relays]);
                    }
                    "rate" => {
                        base.set(&k, &v)?;
                        rates = Some(vec![base.rate_bps]);
                    }
                    _ => base.set(&k, &v)?,
                }
            }
        }
        if let Some(r) = &args.relays {
            relays = Some(r.clone());
        }
        if let Some(r) = &args.rate {
            rates = Some(r.iter().map(|x| parse_rate(x)).collect::<Result<_, _>>()?);
        }
        if let Some(n) = args.runs {
            runs = Some(n);
        }
        if let Some(s) = args.seed {
            base.seed = s;
        }
        if let Some(s) = &args.sched {
            base.mac.scheduler = parse_scheduler(s)?;
        }
        if let Some(d) = args.duration {
            base.sim_duration = d;
        }
        let relays = relays.unwrap_or_else(|| (0..=4).collect());
        let rates_bps = rates.unwrap_or_else(|| vec![28e6, 224e6]);
        let runs = runs.unwrap_or(50);
        if relays.is_empty() || rates_bps.is_empty() {
            return Err(Error::config("sweep lists must be non-empty"));
        }
        if runs == 0 {
            return Err(Error::config("--runs must be at least 1"));
        }
        let mut formats = Formats::default();
        for f in &args.formats {
            match f.trim() {
                "csv" => formats.csv = true,
                "json" => formats.json = true,
                "plot" => formats.plot = true,
                other => return Err(Error::config(format!("unknown format '{other}'"))),
            }
        }
        let spec = CampaignSpec { preset: args.preset.clone(), base, relays, rates_bps, runs, out: args.out.clone(), formats };
        for cfg in spec.configs() {
            cfg.validate()?;
            if cfg.n_relays > crate::geometry::MAX_RELAYS {
                return Err(Error::config(format!("at most {} relays supported", crate::geometry::MAX_RELAYS)));
            }
        }
        Ok(spec)
    }

    /// One configuration per (rate, relays, run), in output order.
    pub fn configs(&self) -> Vec<SimConfig> {
        let mut out = Vec::new();
        for &rate in &self.rates_bps {
            for &n in &self.relays {
                for i in 0..self.runs as u64 {
                    out.push(SimConfig { rate_bps: rate, n_relays: n, seed: self.base.seed.wrapping_add(i), ..self.base.clone() });
                }
            }
        }
        out
    }
}

/// Worker threads for a campaign: `IABSIM_THREADS` if set, else all cores.
pub fn thread_count() -> usize {
    std::env::var("IABSIM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn execute(spec: &CampaignSpec) -> crate::Result<Vec<RunResult>> {
    let configs = spec.configs();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::Structure(format!("thread pool: {e}")))?;
    pool.install(|| configs.par_iter().map(run_once).collect())
}

/// Shortest exact-enough rendering of a number for CSV cells.
fn num(x: f64) -> String {
    let s = format!("{x:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

pub fn runs_csv(spec: &CampaignSpec, results: &[RunResult]) -> String {
    let mut out = String::from(RUNS_HEADER);
    out.push('\n');
    for (i, r) in results.iter().enumerate() {
        let run = i % spec.runs;
        for m in compute_metrics(r) {
            let _ = writeln!(
                out,
                "{run},{},{},{},{},{},{},{},{}",
                r.seed,
                num(r.rate_bps / 1e6),
                r.n_relays,
                m.group,
                num(m.sum_throughput_mbps),
                m.mean_latency_ms.map(num).unwrap_or_default(),
                m.delivered_packets,
                m.dropped_packets
            );
        }
    }
    out
}

pub fn summary_csv(summary: &CampaignSummary) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for c in &summary.cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            c.runs,
            num(c.rate_mbps),
            c.n_relays,
            c.group,
            num(c.throughput_mbps.mean),
            c.latency_ms.map(|l| num(l.mean)).unwrap_or_default(),
            num(c.throughput_mbps.half_width),
            c.latency_ms.map(|l| num(l.half_width)).unwrap_or_default()
        );
    }
    out
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    campaign: &'a CampaignSpec,
    cells: &'a [SummaryCell],
}

pub fn summary_json(spec: &CampaignSpec, summary: &CampaignSummary) -> String {
    let mut s = serde_json::to_string_pretty(&SummaryJson { campaign: spec, cells: &summary.cells }).expect("serializable");
    s.push('\n');
    s
}

/// Line plot of one metric against the relay count for one rate, one line
/// per UE group, with confidence bars.
pub fn plot_svg(summary: &CampaignSummary, rate_mbps: f64, latency: bool) -> String {
    const W: f64 = 560.0;
    const H: f64 = 380.0;
    const L: f64 = 70.0;
    const R: f64 = 150.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let value = |c: &SummaryCell| if latency { c.latency_ms } else { Some(c.throughput_mbps) };
    let cells: Vec<&SummaryCell> = summary.cells.iter().filter(|c| c.rate_mbps == rate_mbps).collect();
    let xmax = cells.iter().map(|c| c.n_relays).max().unwrap_or(1).max(1) as f64;
    let ymax = cells
        .iter()
        .filter_map(|c| value(c).map(|e| e.mean + e.half_width))
        .fold(0.0_f64, f64::max)
        .max(1e-9)
        * 1.1;
    let px = |x: f64| L + x / xmax * (W - L - R);
    let py = |y: f64| H - B - y / ymax * (H - T - B);
    let (title, unit) = if latency { ("Average end-to-end latency", "ms") } else { ("Sum end-to-end throughput", "Mbit/s") };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{title}, R = {} Mbit/s</text>"#, W / 2.0, num(rate_mbps));
    let _ = writeln!(
        s,
        r#"<path d="M{L},{T} V{} H{}" fill="none" stroke="black"/>"#,
        H - B,
        W - R
    );
    for i in 0..=xmax as usize {
        let x = px(i as f64);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{i}</text>"#, H - B + 18.0);
    }
    for k in 0..=5 {
        let y = ymax * k as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.0}</text>"#, L - 6.0, py(y) + 4.0, y);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">number of IAB nodes</text>"#, (L + W - R) / 2.0, H - 12.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{unit}</text>"#, H / 2.0, H / 2.0);
    let colours = [(Group::DonorUes, "#1f77b4"), (Group::IabUes, "#d62728"), (Group::AllUes, "#2ca02c")];
    for (li, (group, colour)) in colours.iter().enumerate() {
        let pts: Vec<(f64, f64, f64)> = cells
            .iter()
            .filter(|c| c.group == *group)
            .filter_map(|c| value(c).map(|e| (c.n_relays as f64, e.mean, e.half_width)))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let line: Vec<String> = pts.iter().map(|(x, y, _)| format!("{:.1},{:.1}", px(*x), py(*y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#, line.join(" "));
        for (x, y, h) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{colour}"/>"#, px(*x), py(*y));
            if *h > 0.0 {
                let _ = writeln!(
                    s,
                    r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="{colour}"/>"#,
                    px(*x),
                    py(y - h),
                    py(y + h)
                );
            }
        }
        let ly = T + 10.0 + 20.0 * li as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/>"#, W - R + 15.0, W - R + 40.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{group}</text>"#, W - R + 46.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Sim(format!("cannot write {}: {e}", path.display())))
}

fn write_outputs(spec: &CampaignSpec, results: &[RunResult], summary: &CampaignSummary) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(&spec.out).map_err(|e| CliError::Sim(format!("cannot create {}: {e}", spec.out.display())))?;
    let mut written = Vec::new();
    let mut put = |name: String, contents: String| -> Result<(), CliError> {
        let p = spec.out.join(name);
        write(&p, &contents)?;
        written.push(p);
        Ok(())
    };
    if spec.formats.csv {
        put("summary.csv".into(), summary_csv(summary))?;
        put("runs.csv".into(), runs_csv(spec, results))?;
    }
    if spec.formats.json {
        put("summary.json".into(), summary_json(spec, summary))?;
    }
    if spec.formats.plot {
        for &rate in &spec.rates_bps {
            let r = rate / 1e6;
            put(format!("throughput_{}M.svg", num(r)), plot_svg(summary, r, false))?;
            put(format!("latency_{}M.svg", num(r)), plot_svg(summary, r, true))?;
        }
    }
    Ok(written)
}

fn print_table(summary: &CampaignSummary) {
    println!("{:>8} {:>7} {:>10} {:>16} {:>14}", "R[Mb/s]", "relays", "group", "thr[Mbit/s]", "latency[ms]");
    for c in &summary.cells {
        let lat = c.latency_ms.map_or("-".to_string(), |l| format!("{:.1}±{:.1}", l.mean, l.half_width));
        println!(
            "{:>8} {:>7} {:>10} {:>16} {:>14}",
            num(c.rate_mbps),
            c.n_relays,
            c.group.name(),
            format!("{:.1}±{:.1}", c.throughput_mbps.mean, c.throughput_mbps.half_width),
            lat
        );
    }
}

/// Parses `args`, runs the campaign and writes the requested files.
/// Returns the process exit status: 0 on success, 2 for configuration
/// errors and 1 for simulation failures.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run_args(&args) {
        Ok(()) => 0,
        Err(CliError::Config(m)) => {
            eprintln!("iabsim: configuration error: {m}");
            2
        }
        Err(CliError::Sim(m)) => {
            eprintln!("iabsim: simulation failed: {m}");
            1
        }
    }
}

fn run_args(args: &Args) -> Result<(), CliError> {
    let spec = CampaignSpec::from_args(args).map_err(|e| CliError::Config(e.to_string()))?;
    let results = execute(&spec)?;
    let summary = aggregate_runs(&results);
    print_table(&summary);
    for p in write_outputs(&spec, &results, &summary)? {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

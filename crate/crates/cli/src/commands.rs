use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use weighted_cd::action::{precompute_factorized, FactorizedTraces, TraceTimings, TRACE_CACHE_VERSION};
use weighted_cd::model::{fnv1a, ising_hamiltonian, sample_ising, AnsatzKind, IsingInstance};
use weighted_cd::oracle::{fidelity_gain, Driving, Evolver, IntegratorConfig, MAX_DENSE_SPINS};
use weighted_cd::protocol::{protocol_from_traces, uniform_grid, ProtocolTable, SolverConfig};

use crate::config::{RunConfig, MAX_K};
use crate::stats::{loglog_slope, quartiles};
use crate::CliError;

pub const CLI_SCHEMA_VERSION: u32 = 1;
/// Relative residual above which a protocol row counts as a numerical failure.
pub const RESIDUAL_CHECK: f64 = 1e-6;

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    write_text(path, &text)
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    command: &'a str,
    config_hash: String,
    config: &'a RunConfig,
    outputs: Vec<String>,
}

fn write_manifest(cfg: &RunConfig, command: &str, outputs: &[PathBuf]) -> Result<PathBuf, CliError> {
    let path = cfg.out.join("manifests").join(format!("{command}.json"));
    let m = Manifest {
        schema_version: CLI_SCHEMA_VERSION,
        command,
        config_hash: cfg.hash(),
        config: cfg,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    write_json(&path, &m)?;
    Ok(path)
}

pub fn instance_stem(cfg: &RunConfig, seed: u64) -> String {
    format!("{}_{}x{}_s{seed}", cfg.class.name(), cfg.width, cfg.height)
}

pub fn instance_path(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.out.join("instances").join(format!("{}.json", instance_stem(cfg, seed)))
}

pub fn protocol_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("protocols")
}

pub fn protocol_stem(cfg: &RunConfig, seed: u64, k: usize) -> String {
    format!("{}_{}_K{k}_g{}", instance_stem(cfg, seed), cfg.ansatz.name(), cfg.grid)
}

pub fn cache_path(cfg: &RunConfig, inst: &IsingInstance, k: usize) -> PathBuf {
    cfg.out.join("cache").join(format!("{:016x}_{}_K{k}.json", inst.fingerprint(), cfg.ansatz.name()))
}

fn instance_hash(inst: &IsingInstance) -> String {
    format!("{:016x}", inst.fingerprint())
}

fn dense_guard(cfg: &RunConfig) -> Result<(), CliError> {
    let n = cfg.nspins();
    if n > MAX_DENSE_SPINS {
        return Err(CliError::Resource(format!(
            "N = {n} exceeds the dense simulation limit of {MAX_DENSE_SPINS} spins; use a smaller lattice (e.g. --width 3 --height 3), or run `wcd coeffs`, which has no size limit"
        )));
    }
    Ok(())
}

/// Loads the instance for `seed` from the output tree, generating and saving it if absent.
pub fn ensure_instance(cfg: &RunConfig, seed: u64) -> Result<IsingInstance, CliError> {
    let path = instance_path(cfg, seed);
    if path.exists() {
        let inst = IsingInstance::load(&path)?;
        if inst.class != cfg.class || inst.width != cfg.width || inst.height != cfg.height || inst.seed != seed {
            return Err(CliError::Config(format!("{} does not match the requested class, lattice and seed", path.display())));
        }
        return Ok(inst);
    }
    let inst = sample_ising(cfg.class, cfg.width, cfg.height, seed)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    inst.save(&path)?;
    Ok(inst)
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let mut outputs = Vec::new();
    for seed in cfg.seeds() {
        let inst = sample_ising(cfg.class, cfg.width, cfg.height, seed)?;
        let path = instance_path(cfg, seed);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        inst.save(&path)?;
        outputs.push(path);
    }
    write_manifest(cfg, "gen", &outputs)?;
    eprintln!("[gen] wrote {} instance(s) to {}", outputs.len(), cfg.out.join("instances").display());
    Ok(outputs)
}

/// Stage-one traces for `inst`, from the cache when a file of sufficient degree exists.
pub fn load_or_build_traces(cfg: &RunConfig, inst: &IsingInstance) -> Result<(FactorizedTraces, bool), CliError> {
    let kmax = cfg.kmax();
    let ansatz = cfg.ansatz.build(inst);
    if cfg.cache {
        for k in kmax..=MAX_K {
            let p = cache_path(cfg, inst, k);
            if !p.exists() {
                continue;
            }
            match FactorizedTraces::load(&p) {
                Ok(ft) if ft.version == TRACE_CACHE_VERSION && ft.nspins == inst.nspins() && ft.m == ansatz.len() => {
                    eprintln!("[coeffs] cache hit: {} (stage 1 skipped)", p.display());
                    return Ok((ft, true));
                }
                _ => eprintln!("[coeffs] ignoring unusable cache file {}", p.display()),
            }
        }
    }
    let ft = precompute_factorized(&ising_hamiltonian(inst), kmax, &ansatz)?;
    if cfg.cache {
        let p = cache_path(cfg, inst, kmax);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        ft.save(&p)?;
    }
    Ok((ft, false))
}

#[derive(Clone, Debug)]
pub struct TableReport {
    pub k: usize,
    pub dir: PathBuf,
    pub stem: String,
    pub max_residual: f64,
    pub stage2_seconds: f64,
    /// `(λ, reason)` for rows that failed or missed the residual check.
    pub failures: Vec<(f64, String)>,
}

#[derive(Clone, Debug)]
pub struct CoeffsReport {
    pub seed: u64,
    pub cache_hit: bool,
    pub timings: TraceTimings,
    pub tables: Vec<TableReport>,
}

fn describe_timings(t: &TraceTimings) -> String {
    format!(
        "stage 1 {:.3}s (operators {:.3}s, commutators {:.3}s, Q {:.3}s, r {:.3}s, moments {:.3}s)",
        t.total, t.operators, t.commutators, t.q_traces, t.r_traces, t.moments
    )
}

pub fn cmd_coeffs(cfg: &RunConfig) -> Result<Vec<CoeffsReport>, CliError> {
    let grid = uniform_grid(cfg.grid)?;
    let solver = SolverConfig::default();
    let mut reports = Vec::new();
    let mut outputs = Vec::new();
    for seed in cfg.seeds() {
        let inst = ensure_instance(cfg, seed)?;
        let ansatz = cfg.ansatz.build(&inst);
        let (ft, cache_hit) = load_or_build_traces(cfg, &inst)?;
        let istem = instance_stem(cfg, seed);
        if !cache_hit {
            eprintln!("[coeffs] {istem}: {}", describe_timings(&ft.timings));
        }
        let mut tables = Vec::new();
        for &k in &cfg.k {
            let table = protocol_from_traces(&ft, &ansatz, k, &grid, &instance_hash(&inst), &solver)?;
            let stem = protocol_stem(cfg, seed, k);
            let dir = protocol_dir(cfg);
            table.save(&dir, &stem)?;
            outputs.push(dir.join(format!("{stem}.csv")));
            let mut failures = Vec::new();
            for (i, &l) in table.grid.iter().enumerate() {
                if let Some(reason) = &table.meta.failures[i] {
                    failures.push((l, reason.clone()));
                } else if table.residual[i] > RESIDUAL_CHECK {
                    failures.push((l, format!("relative residual {:.2e} above {RESIDUAL_CHECK:e}", table.residual[i])));
                }
            }
            let max_residual = table.residual.iter().copied().filter(|r| r.is_finite()).fold(0.0, f64::max);
            eprintln!("[coeffs] {istem} K={k}: stage 2 {:.3}s, max residual {max_residual:.1e}", table.meta.stage2_seconds);
            tables.push(TableReport { k, dir, stem, max_residual, stage2_seconds: table.meta.stage2_seconds, failures });
        }
        reports.push(CoeffsReport { seed, cache_hit, timings: ft.timings.clone(), tables });
    }
    write_manifest(cfg, "coeffs", &outputs)?;
    let mut detail = String::new();
    for r in &reports {
        for t in &r.tables {
            for (l, why) in &t.failures {
                let _ = writeln!(detail, "  seed {} K={} lambda={l}: {why}", r.seed, t.k);
            }
        }
    }
    if !detail.is_empty() {
        return Err(CliError::Numerical(format!("protocol rows failed:\n{detail}")));
    }
    Ok(reports)
}

/// One simulated run. `k = None` is the undriven protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub t_d: f64,
    pub k: Option<usize>,
    pub f_f: f64,
}

fn driving_label(k: Option<usize>) -> String {
    match k {
        Some(k) => format!("K{k}"),
        None => "bare".into(),
    }
}

#[derive(Clone, Debug)]
pub struct SimRow {
    pub seed: u64,
    pub t_d: f64,
    pub k: Option<usize>,
    pub f_f: f64,
    /// Relative to `K = 1`; absent when `K = 1` was not run.
    pub g_f: Option<f64>,
}

fn format_gain(g: Option<f64>) -> String {
    match g {
        Some(g) if g.is_infinite() => "inf".into(),
        Some(g) => format!("{g:?}"),
        None => String::new(),
    }
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Vec<SimRow>, CliError> {
    dense_guard(cfg)?;
    let integ = IntegratorConfig { record: true, ..Default::default() };
    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    for seed in cfg.seeds() {
        let inst = ensure_instance(cfg, seed)?;
        let ansatz = cfg.ansatz.build(&inst);
        let mut tables = Vec::new();
        for &k in &cfg.k {
            let (dir, stem) = (protocol_dir(cfg), protocol_stem(cfg, seed, k));
            let csv = dir.join(format!("{stem}.csv"));
            if !csv.exists() || !dir.join(format!("{stem}.json")).exists() {
                return Err(CliError::Config(format!(
                    "protocol table {} not found; run `wcd coeffs` with the same class, lattice, seed, ansatz, grid and K first",
                    csv.display()
                )));
            }
            let table = ProtocolTable::load(&dir, &stem)?;
            if table.meta.instance_hash != instance_hash(&inst) || table.meta.k != k || table.m() != ansatz.len() {
                return Err(CliError::Config(format!("protocol table {} does not belong to this instance and ansatz", csv.display())));
            }
            tables.push(table);
        }
        let ev = Evolver::new(&ising_hamiltonian(&inst))?;
        let jobs: Vec<(f64, Option<usize>)> = cfg.td.iter().flat_map(|&td| std::iter::once((td, None)).chain((0..tables.len()).map(move |i| (td, Some(i))))).collect();
        let results: Vec<_> = jobs
            .par_iter()
            .map(|&(td, ti)| {
                let driving = match ti {
                    Some(i) => Driving::Protocol { table: &tables[i], ansatz: &ansatz },
                    None => Driving::Bare,
                };
                ev.run(driving, td, &integ)
            })
            .collect();
        let istem = instance_stem(cfg, seed);
        let mut summary = String::from("t_d,driving,F_f,G_f\n");
        let mut done: Vec<(f64, Option<usize>, weighted_cd::oracle::EvolutionResult)> = Vec::new();
        for (&(td, ti), res) in jobs.iter().zip(results) {
            done.push((td, ti.map(|i| tables[i].meta.k), res?));
        }
        for (td, k, res) in &done {
            let reference = done.iter().find(|(t, kk, _)| t == td && *kk == Some(1)).map(|(_, _, r)| r.final_fidelity);
            let gain = reference.map(|f1| fidelity_gain(res.final_fidelity, f1));
            let base = format!("{istem}_{}_{}_td{td:?}", cfg.ansatz.name(), driving_label(*k));
            let csv = cfg.out.join("runs").join(format!("{base}.csv"));
            write_text(&csv, &res.to_csv())?;
            let mut json: serde_json::Value = serde_json::from_str(&res.summary_json(gain)?).map_err(|e| CliError::Io(e.to_string()))?;
            json["schema_version"] = CLI_SCHEMA_VERSION.into();
            json["config_hash"] = cfg.hash().into();
            json["instance_hash"] = instance_hash(&inst).into();
            write_json(&cfg.out.join("runs").join(format!("{base}.json")), &json)?;
            outputs.push(csv);
            let _ = writeln!(summary, "{td:?},{},{:?},{}", driving_label(*k), res.final_fidelity, format_gain(gain));
            rows.push(SimRow { seed, t_d: *td, k: *k, f_f: res.final_fidelity, g_f: gain });
        }
        let spath = cfg.out.join("runs").join(format!("{istem}_{}_summary.csv", cfg.ansatz.name()));
        write_text(&spath, &summary)?;
        outputs.push(spath);
    }
    write_manifest(cfg, "simulate", &outputs)?;
    Ok(rows)
}

/// Protocols for every K in `ks` from one stage-one pass, then bare and driven evolutions.
pub fn evaluate_instance(inst: &IsingInstance, kind: AnsatzKind, ks: &[usize], tds: &[f64], grid: &[f64]) -> weighted_cd::Result<Vec<RunRecord>> {
    let hf = ising_hamiltonian(inst);
    let ansatz = kind.build(inst);
    let kmax = ks.iter().copied().max().unwrap_or(1);
    let ft = precompute_factorized(&hf, kmax, &ansatz)?;
    let mut tables = Vec::new();
    for &k in ks {
        let t = protocol_from_traces(&ft, &ansatz, k, grid, &instance_hash(inst), &SolverConfig::default())?;
        if let Some((i, why)) = t.meta.failures.iter().enumerate().find_map(|(i, f)| f.as_ref().map(|w| (i, w))) {
            return Err(weighted_cd::Error::Solver(format!("K={k} lambda={}: {why}", t.grid[i])));
        }
        tables.push(t);
    }
    let ev = Evolver::new(&hf)?;
    let integ = IntegratorConfig::default();
    let mut out = Vec::new();
    for &td in tds {
        out.push(RunRecord { t_d: td, k: None, f_f: ev.run(Driving::Bare, td, &integ)?.final_fidelity });
        for t in &tables {
            let r = ev.run(Driving::Protocol { table: t, ansatz: &ansatz }, td, &integ)?;
            out.push(RunRecord { t_d: td, k: Some(t.meta.k), f_f: r.final_fidelity });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub schema_version: u32,
    /// Hash of the settings the record depends on; a mismatch forces recomputation.
    pub key: String,
    pub seed: u64,
    pub nspins: usize,
    pub runs: Vec<RunRecord>,
    pub error: Option<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatRow {
    pub nspins: usize,
    pub t_d: f64,
    pub k: Option<usize>,
    pub n: usize,
    /// `(q1, median, q3)` of `F_f`.
    pub f: (f64, f64, f64),
    /// `(q1, median, q3)` of `G_f`, when `K = 1` is part of the run.
    pub g: Option<(f64, f64, f64)>,
    pub g_above_one: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct EnsembleReport {
    pub records: Vec<InstanceRecord>,
    pub resumed: usize,
    pub computed: usize,
    pub stats: Vec<StatRow>,
    pub dir: PathBuf,
}

impl EnsembleReport {
    /// `(seed, F_f)` for one driving and duration.
    pub fn fidelities(&self, t_d: f64, k: Option<usize>) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.runs.iter().find(|x| x.t_d == t_d && x.k == k).map(|x| (r.seed, x.f_f)))
            .collect()
    }
}

fn ensemble_key(cfg: &RunConfig) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        class: &'a str,
        width: usize,
        height: usize,
        ansatz: &'a str,
        k: &'a [usize],
        td: &'a [f64],
        grid: usize,
    }
    let key = Key { class: cfg.class.name(), width: cfg.width, height: cfg.height, ansatz: cfg.ansatz.name(), k: &cfg.k, td: &cfg.td, grid: cfg.grid };
    format!("{:016x}", fnv1a(serde_json::to_string(&key).expect("plain data").as_bytes()))
}

pub fn ensemble_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("ensemble").join(format!("{}_{}x{}_{}", cfg.class.name(), cfg.width, cfg.height, cfg.ansatz.name()))
}

pub fn ensemble_stats(records: &[InstanceRecord], ks: &[usize], tds: &[f64]) -> Vec<StatRow> {
    let ok: Vec<&InstanceRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let nspins = ok.first().map(|r| r.nspins).unwrap_or(0);
    let find = |r: &InstanceRecord, td: f64, k: Option<usize>| r.runs.iter().find(|x| x.t_d == td && x.k == k).map(|x| x.f_f);
    let mut rows = Vec::new();
    for &td in tds {
        for k in std::iter::once(None).chain(ks.iter().map(|&k| Some(k))) {
            let mut fs = Vec::new();
            let mut gs = Vec::new();
            for r in &ok {
                if let Some(f) = find(r, td, k) {
                    fs.push(f);
                    if let Some(f1) = find(r, td, Some(1)) {
                        gs.push(fidelity_gain(f, f1));
                    }
                }
            }
            let Some(f) = quartiles(&fs) else { continue };
            let g = quartiles(&gs);
            let g_above_one = (!gs.is_empty()).then(|| gs.iter().filter(|&&g| g > 1.0).count() as f64 / gs.len() as f64);
            rows.push(StatRow { nspins, t_d: td, k, n: fs.len(), f, g, g_above_one });
        }
    }
    rows
}

pub fn cmd_ensemble(cfg: &RunConfig) -> Result<EnsembleReport, CliError> {
    dense_guard(cfg)?;
    let grid = uniform_grid(cfg.grid)?;
    let dir = ensemble_dir(cfg);
    let rec_dir = dir.join("records");
    fs::create_dir_all(&rec_dir)?;
    let key = ensemble_key(cfg);
    let seeds: Vec<u64> = cfg.seeds().collect();
    let results: Vec<Result<(InstanceRecord, bool), CliError>> = seeds
        .par_iter()
        .map(|&seed| {
            let path = rec_dir.join(format!("s{seed}.json"));
            if let Ok(text) = fs::read_to_string(&path) {
                if let Ok(rec) = serde_json::from_str::<InstanceRecord>(&text) {
                    if rec.key == key && rec.error.is_none() && rec.schema_version == CLI_SCHEMA_VERSION {
                        return Ok((rec, true));
                    }
                }
            }
            let inst = ensure_instance(cfg, seed)?;
            let start = Instant::now();
            let (runs, error) = match evaluate_instance(&inst, cfg.ansatz, &cfg.k, &cfg.td, &grid) {
                Ok(runs) => (runs, None),
                Err(e) => (Vec::new(), Some(e.to_string())),
            };
            let rec = InstanceRecord { schema_version: CLI_SCHEMA_VERSION, key: key.clone(), seed, nspins: inst.nspins(), runs, error, seconds: start.elapsed().as_secs_f64() };
            write_json(&path, &rec)?;
            Ok((rec, false))
        })
        .collect();
    let mut records = Vec::new();
    let mut resumed = 0;
    for r in results {
        let (rec, skipped) = r?;
        resumed += skipped as usize;
        records.push(rec);
    }
    let computed = records.len() - resumed;
    eprintln!("[ensemble] {} instance(s): {computed} computed, {resumed} resumed", records.len());

    let mut per = String::from("seed,t_d,driving,F_f,G_f\n");
    for r in records.iter().filter(|r| r.error.is_none()) {
        for run in &r.runs {
            let f1 = r.runs.iter().find(|x| x.t_d == run.t_d && x.k == Some(1)).map(|x| x.f_f);
            let g = f1.map(|f1| fidelity_gain(run.f_f, f1));
            let _ = writeln!(per, "{},{:?},{},{:?},{}", r.seed, run.t_d, driving_label(run.k), run.f_f, format_gain(g));
        }
    }
    write_text(&dir.join("instances.csv"), &per)?;

    let stats = ensemble_stats(&records, &cfg.k, &cfg.td);
    let mut s = String::from("N,t_d,driving,n,F_q1,F_median,F_q3,G_q1,G_median,G_q3,G_above_1\n");
    for row in &stats {
        let (gq1, gm, gq3) = row.g.map(|(a, b, c)| (format_gain(Some(a)), format_gain(Some(b)), format_gain(Some(c)))).unwrap_or_default();
        let above = row.g_above_one.map(|x| format!("{x:?}")).unwrap_or_default();
        let _ = writeln!(s, "{},{:?},{},{},{:?},{:?},{:?},{gq1},{gm},{gq3},{above}", row.nspins, row.t_d, driving_label(row.k), row.n, row.f.0, row.f.1, row.f.2);
    }
    write_text(&dir.join("stats.csv"), &s)?;
    write_manifest(cfg, "ensemble", &[dir.join("instances.csv"), dir.join("stats.csv")])?;

    let failed: Vec<String> = records.iter().filter_map(|r| r.error.as_ref().map(|e| format!("  seed {}: {e}", r.seed))).collect();
    if !failed.is_empty() {
        return Err(CliError::Numerical(format!("{} instance(s) failed and will be retried on the next run:\n{}", failed.len(), failed.join("\n"))));
    }
    Ok(EnsembleReport { records, resumed, computed, stats, dir })
}

/// Chain lengths timed by `bench` when no ladder is configured.
pub fn default_ladder(k: usize) -> Vec<usize> {
    match k {
        1 => vec![128, 256, 512, 1024],
        2 => vec![64, 128, 256, 512],
        3 => vec![16, 32, 64],
        4 => vec![12, 16, 20, 24],
        _ => vec![8, 10, 12, 14],
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub k: usize,
    pub n: usize,
    pub seconds: f64,
    pub timings: TraceTimings,
    pub terms: usize,
    pub q_blocks: usize,
}

#[derive(Clone, Debug)]
pub struct BenchVerdict {
    pub k: usize,
    pub slope: f64,
    pub lower: f64,
    pub upper: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub verdicts: Vec<BenchVerdict>,
}

pub const SLOPE_BAND: f64 = 0.7;
pub const BENCH_REPEATS: usize = 3;

pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport, CliError> {
    let mut rows = Vec::new();
    let mut verdicts = Vec::new();
    for &k in &cfg.k {
        let ladder = if cfg.sizes.is_empty() { default_ladder(k) } else { cfg.sizes.clone() };
        let mut pts = Vec::new();
        for &n in &ladder {
            let inst = sample_ising(cfg.class, n, 1, cfg.seed)?;
            let hf = ising_hamiltonian(&inst);
            let ansatz = cfg.ansatz.build(&inst);
            // Every size gets the same number of runs; the fastest is kept and
            // each result is dropped before the next run starts.
            let mut best: Option<BenchRow> = None;
            for _ in 0..BENCH_REPEATS {
                let t = Instant::now();
                let ft = precompute_factorized(&hf, k, &ansatz)?;
                let seconds = t.elapsed().as_secs_f64();
                if best.as_ref().is_none_or(|b| seconds < b.seconds) {
                    best = Some(BenchRow { k, n, seconds, timings: ft.timings.clone(), terms: ft.term_counts.iter().sum(), q_blocks: ft.q_blocks.len() });
                }
            }
            let row = best.expect("at least one run");
            eprintln!("[bench] K={k} N={n}: {:.3}s", row.seconds);
            pts.push((n as f64, row.seconds));
            rows.push(row);
        }
        let slope = loglog_slope(&pts).unwrap_or(f64::NAN);
        let (lower, upper) = (k as f64 - SLOPE_BAND, k as f64 + SLOPE_BAND);
        let pass = slope >= lower && slope <= upper;
        println!("[bench] K={k} slope {slope:.3} (band [{lower:.1}, {upper:.1}]): {}", if pass { "PASS" } else { "FLAG" });
        verdicts.push(BenchVerdict { k, slope, lower, upper, pass });
    }
    let dir = cfg.out.join("bench");
    let mut csv = String::from("K,N,seconds,operators,commutators,q_traces,r_traces,moments,terms,q_blocks\n");
    for r in &rows {
        let t = &r.timings;
        let _ = writeln!(csv, "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{},{}", r.k, r.n, r.seconds, t.operators, t.commutators, t.q_traces, t.r_traces, t.moments, r.terms, r.q_blocks);
    }
    write_text(&dir.join("bench.csv"), &csv)?;
    let mut v = String::from("K,slope,lower,upper,verdict\n");
    for x in &verdicts {
        let _ = writeln!(v, "{},{:?},{:?},{:?},{}", x.k, x.slope, x.lower, x.upper, if x.pass { "PASS" } else { "FLAG" });
    }
    write_text(&dir.join("verdict.csv"), &v)?;
    write_manifest(cfg, "bench", &[dir.join("bench.csv"), dir.join("verdict.csv")])?;
    Ok(BenchReport { rows, verdicts })
}

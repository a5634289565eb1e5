use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Parser;
use headbalance_core::allocate::{sha_plan, AllocationConfig};
use headbalance_core::latency::{load_model, load_samples};
use headbalance_core::profile::profile_similarity;
use headbalance_core::{
    calibrate, compare, generate_profile, load_profile, optimize_plan, save_profile, SimulationConfig, SyntheticSpec,
};
use serde_json::json;

use crate::manifest::RunManifest;
use crate::{
    CalibrateArgs, Cli, Command, CompareArgs, GenProfileArgs, OptimizeArgs, ReplayArgs, SearchArgs, SimilarityArgs,
};

pub fn run(command: Command, args: &[String]) -> Result<()> {
    match command {
        Command::GenProfile(a) => gen_profile(a, args),
        Command::Optimize(a) => optimize(a, args),
        Command::Calibrate(a) => calibrate_cmd(a, args),
        Command::Compare(a) => compare_cmd(a, args),
        Command::Similarity(a) => similarity(a),
        Command::Replay(a) => replay(a),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

impl SearchArgs {
    fn config(&self) -> AllocationConfig {
        let mut cfg = AllocationConfig::new(self.ch, self.rmax as usize);
        cfg.equal_split = !self.no_equal_split;
        cfg.node_budget = self.node_budget;
        cfg
    }

    fn to_json(&self) -> serde_json::Value {
        json!({
            "tp": self.tp,
            "ch": self.ch,
            "rmax": self.rmax,
            "equal_split": !self.no_equal_split,
            "node_budget": self.node_budget,
        })
    }
}

fn gen_profile(a: GenProfileArgs, args: &[String]) -> Result<()> {
    let spec = SyntheticSpec {
        distribution: a.dist,
        total_budget_per_layer: a.budget,
        seed: a.seed,
    };
    let mut profile = generate_profile(&spec, a.layers as usize, a.heads as usize)?;
    profile.model_name = a.name.clone();
    if let Some(kv) = a.kv_budget {
        profile.kv_budget = kv;
    }
    save_profile(&profile, &a.out)?;
    let params = json!({
        "layers": a.layers,
        "heads": a.heads,
        "dist": a.dist.to_string(),
        "budget": a.budget,
        "name": a.name,
        "kv_budget": profile.kv_budget,
        "out": a.out.display().to_string(),
    });
    RunManifest::new("gen-profile", args, params, Some(a.seed)).write_for(&a.out)?;
    println!(
        "wrote {} ({} layers x {} heads, {})",
        a.out.display(),
        profile.num_layers,
        profile.heads_per_layer,
        a.dist
    );
    Ok(())
}

fn optimize(a: OptimizeArgs, args: &[String]) -> Result<()> {
    let profile = load_profile(&a.profile)?;
    let tp = a.search.tp as usize;
    let plan = optimize_plan(&profile, tp, &a.search.config())?;
    write(&a.out, &plan.to_json())?;
    let mut params = a.search.to_json();
    params["profile"] = json!(a.profile.display().to_string());
    params["out"] = json!(a.out.display().to_string());
    RunManifest::new("optimize", args, params, None)
        .input(&a.profile)?
        .write_for(&a.out)?;

    let sha = sha_plan(&profile, tp).ok();
    println!(
        "{:>5}  {:>14}  {:>14}  {:>6}  {:>10}",
        "layer", "delta", "sha_delta", "copies", "exhaustive"
    );
    for (l, layer) in plan.layers.iter().enumerate() {
        let sha_delta = sha
            .as_ref()
            .map_or("-".to_string(), |s| format!("{:.6}", s.layers[l].delta));
        println!(
            "{l:>5}  {:>14.6}  {sha_delta:>14}  {:>6}  {:>10}",
            layer.delta,
            layer.total_copies(),
            layer.exhaustive
        );
    }
    Ok(())
}

fn calibrate_cmd(a: CalibrateArgs, args: &[String]) -> Result<()> {
    let samples = load_samples(&a.samples)?;
    let fit = calibrate(&samples)?;
    let model = fit.model.with_comm(a.comm_alpha, a.comm_beta, a.bytes_per_activation);
    model.validate()?;
    write(&a.out, &model.to_json())?;
    let params = json!({
        "samples": a.samples.display().to_string(),
        "comm_alpha": a.comm_alpha,
        "comm_beta": a.comm_beta,
        "bytes_per_activation": a.bytes_per_activation,
        "out": a.out.display().to_string(),
    });
    RunManifest::new("calibrate", args, params, None)
        .input(&a.samples)?
        .write_for(&a.out)?;
    println!("samples       {}", samples.len());
    println!("c0            {:e}", model.c0);
    println!("c1            {:e}", model.c1);
    println!("c2            {:e}", model.c2);
    println!("c3            {:e}", model.c3);
    println!("residual_rms  {:e}", fit.residual_rms);
    Ok(())
}

fn compare_cmd(a: CompareArgs, args: &[String]) -> Result<()> {
    let profile = load_profile(&a.profile)?;
    let model = load_model(&a.model)?;
    let tp = a.search.tp as usize;
    let mut simcfg = SimulationConfig::new(a.batch, a.steps, tp);
    simcfg.replica_overhead = a.replica_overhead;
    let comparison = compare(&profile, tp, &a.search.config(), &model, &simcfg)?;
    let report = &comparison.report;
    write(&a.out, &report.to_json())?;
    if let Some(table) = &a.gpu_table {
        write(table, &report.gpu_table())?;
    }

    let mut params = a.search.to_json();
    params["profile"] = json!(a.profile.display().to_string());
    params["model"] = json!(a.model.display().to_string());
    params["batch"] = json!(a.batch);
    params["steps"] = json!(a.steps);
    params["replica_overhead"] = json!(a.replica_overhead);
    params["out"] = json!(a.out.display().to_string());
    RunManifest::new("compare", args, params, None)
        .input(&a.profile)?
        .input(&a.model)?
        .write_for(&a.out)?;

    println!(
        "{:<5} {:>9} {:>14} {:>7} {:>12} {:>12} {:>12} {:>12}",
        "plan", "busy", "tokens/s", "gain", "d_idle", "d_cache", "d_comm", "d_total"
    );
    for row in &report.rows {
        let d = row.decomposition;
        println!(
            "{:<5} {:>9.4} {:>14.3} {:>7.3} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}",
            row.strategy.label(),
            row.report.mean_busy_rate,
            row.report.throughput,
            row.throughput_gain,
            d.d_idle,
            d.d_cache,
            d.d_comm,
            d.d_total
        );
    }
    if report.rows.iter().any(|r| !r.exhaustive) {
        let partial: Vec<&str> = report
            .rows
            .iter()
            .filter(|r| !r.exhaustive)
            .map(|r| r.strategy.label())
            .collect();
        println!(
            "note: search hit the node budget for {}; deltas are best found",
            partial.join(", ")
        );
    }
    Ok(())
}

fn similarity(a: SimilarityArgs) -> Result<()> {
    let pa = load_profile(&a.a)?;
    let pb = load_profile(&a.b)?;
    println!("{}", profile_similarity(&pa, &pb)?);
    Ok(())
}

fn replay(a: ReplayArgs) -> Result<()> {
    let manifest = RunManifest::load(&a.manifest)?;
    manifest.check_inputs()?;
    let argv = std::iter::once("headbalance".to_string()).chain(manifest.args.iter().cloned());
    let cli = Cli::try_parse_from(argv).context("manifest holds invalid arguments")?;
    if matches!(cli.command, Command::Replay(_)) {
        bail!("a manifest cannot replay another replay");
    }
    run(cli.command, &manifest.args)
}

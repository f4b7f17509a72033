//! Command-line workflows: simulate paths, price by Monte Carlo or by a
//! trained network, train networks, calibrate to option chains, and turn
//! calibration records into report tables and plot data.

use anyhow::{anyhow, bail, Context, Result};
use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::calibrate::{
    self, default_phi0, lm_calibrate_heston, phi_fields, scaling_search, CalibQuote,
    CalibrationResult, LmSettings,
};
use crate::ctmc::{self, SimConfig};
use crate::heston::{heston_call, HestonParams};
use crate::market::{
    self, bucket_report, filter_chain, load_chain, maturity_bucket, maturity_bucket_label,
    moneyness_bucket, moneyness_bucket_label, OptionQuote,
};
use crate::model::{parse_kv, ContractSpec, InputField, ModelParams, ModelVariant};
use crate::net::{self, NetworkWeights, RawInput};
use crate::pde::{self, train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "stickysv",
    about = "Sticky drawdown/drawup stochastic-volatility option pricing and calibration"
)]
pub struct Cli {
    /// Base RNG seed; every command accepts it, some ignore it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupMode {
    All,
    ByMaturity,
    ByMoneyness,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Smoke,
    Paper,
}

#[derive(Subcommand)]
pub enum Command {
    /// Simulate chain paths; optionally dump one path per transition.
    Simulate {
        /// Parameter file in `name = value` form.
        #[arg(long)]
        params: PathBuf,
        /// Base spatial step of the chain.
        #[arg(long, default_value_t = 0.01)]
        h: f64,
        #[arg(long, default_value_t = 1000)]
        paths: usize,
        /// Simulation horizon in years.
        #[arg(long, default_value_t = 0.3)]
        horizon: f64,
        /// Write path 0 as tab-separated records here.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Monte Carlo price of a European call.
    PriceMc {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        strike: f64,
        #[arg(long)]
        maturity: f64,
        #[arg(long, default_value_t = 0.0)]
        valuation_time: f64,
        #[arg(long, default_value_t = 0.01)]
        h: f64,
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        /// Sweep the spot as `lo:hi:n` and write a table instead.
        #[arg(long)]
        sweep_x0: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Semi-analytic Heston baseline price.
    PriceHeston {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        strike: f64,
        #[arg(long)]
        maturity: f64,
    },
    /// Train a network on the pricing-PDE residuals.
    Train {
        /// Training config in `name = value` form; overrides the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long, value_parser = parse_variant, default_value = "SVSDU")]
        variant: ModelVariant,
        #[arg(long)]
        weights_out: PathBuf,
        #[arg(long)]
        history_out: PathBuf,
    },
    /// Price with a trained network.
    PriceNet {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        strike: f64,
        #[arg(long)]
        maturity: f64,
        #[arg(long, default_value_t = 0.0)]
        valuation_time: f64,
        #[arg(long)]
        sweep_x0: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate to an option chain, day by day.
    Calibrate {
        /// Trained network weights (omit for `--variant heston`).
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_parser = parse_variant, default_value = "SVSDU")]
        variant: ModelVariant,
        #[arg(long)]
        chain: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        mode: GroupMode,
        /// Predict each day with the previous day's parameters (ratios
        /// rolled to the current spot) instead of fitting in-sample.
        #[arg(long)]
        out_of_sample: bool,
        /// Error out on malformed chain rows instead of skipping them.
        #[arg(long)]
        strict: bool,
        /// Initial scaling constant for the first day.
        #[arg(long, default_value_t = 100.0)]
        c_init: f64,
        #[arg(long)]
        records_out: PathBuf,
        #[arg(long)]
        prices_out: PathBuf,
    },
    /// Aggregate calibration records and quote-level prices into tables.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        prices: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_variant(s: &str) -> Result<ModelVariant, String> {
    ModelVariant::parse(s).map_err(|e| e.to_string())
}

fn parse_sweep(s: &str) -> Result<(f64, f64, usize)> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        bail!("sweep must be lo:hi:n, got `{s}`");
    }
    Ok((parts[0].parse()?, parts[1].parse()?, parts[2].parse()?))
}

fn read_params(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let p = ModelParams::from_kv(&text)?;
    Ok(crate::model::validate_params(p)?)
}

fn write_or_print(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, content)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{content}"),
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            params,
            h,
            paths,
            horizon,
            dump,
        } => cmd_simulate(&params, h, paths, horizon, cli.seed, dump.as_deref()),
        Command::PriceMc {
            params,
            strike,
            maturity,
            valuation_time,
            h,
            paths,
            sweep_x0,
            out,
        } => cmd_price_mc(
            &params,
            strike,
            maturity,
            valuation_time,
            h,
            paths,
            cli.seed,
            sweep_x0.as_deref(),
            out.as_deref(),
        ),
        Command::PriceHeston {
            params,
            strike,
            maturity,
        } => {
            let p = read_params(&params)?;
            let price = heston_call(&HestonParams::from(&p), strike, maturity)?;
            println!("price = {price}");
            Ok(())
        }
        Command::Train {
            config,
            preset,
            variant,
            weights_out,
            history_out,
        } => cmd_train(
            config.as_deref(),
            preset,
            variant,
            cli.seed,
            &weights_out,
            &history_out,
        ),
        Command::PriceNet {
            weights,
            params,
            strike,
            maturity,
            valuation_time,
            sweep_x0,
            out,
        } => cmd_price_net(
            &weights,
            &params,
            strike,
            maturity,
            valuation_time,
            sweep_x0.as_deref(),
            out.as_deref(),
        ),
        Command::Calibrate {
            weights,
            variant,
            chain,
            mode,
            out_of_sample,
            strict,
            c_init,
            records_out,
            prices_out,
        } => cmd_calibrate(
            weights.as_deref(),
            variant,
            &chain,
            mode,
            out_of_sample,
            strict,
            c_init,
            &records_out,
            &prices_out,
        ),
        Command::Report {
            records,
            prices,
            out_dir,
        } => cmd_report(&records, &prices, &out_dir),
    }
}

fn cmd_simulate(
    params: &Path,
    h: f64,
    paths: usize,
    horizon: f64,
    seed: u64,
    dump: Option<&Path>,
) -> Result<()> {
    let p = read_params(params)?;
    let cfg = SimConfig::new(h);
    if let Some(path) = dump {
        let mut rng = ctmc::path_rng(seed, 0);
        let (_, records) = ctmc::simulate_path_recorded(&p, horizon, &cfg, &mut rng)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "clock\tln_dd\tln_du\tv\tln_smax\tln_smin\tregime")?;
        for r in &records {
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.clock,
                r.ln_dd,
                r.ln_du,
                r.v,
                r.ln_smax,
                r.ln_smin,
                r.regime.as_str()
            )?;
        }
        println!("wrote {} transitions to {}", records.len(), path.display());
    }
    let terminals = ctmc::mc_terminals(&p, horizon, &cfg, paths, seed)?;
    let est = ctmc::mc_expectation(&terminals, 1.0, |s| s);
    let (fmax, fmin) = ctmc::occupation_fractions(&p, horizon, h, paths, seed)?;
    println!("paths = {paths}, horizon = {horizon}, h = {h}");
    println!("mean terminal value = {} (se {})", est.price, est.std_error);
    println!("occupation fraction at max = {fmax}");
    println!("occupation fraction at min = {fmin}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_price_mc(
    params: &Path,
    strike: f64,
    maturity: f64,
    valuation_time: f64,
    h: f64,
    paths: usize,
    seed: u64,
    sweep: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let p = read_params(params)?;
    let contract = ContractSpec {
        strike,
        maturity,
        valuation_time,
    };
    match sweep {
        None => {
            let est = ctmc::mc_price(&p, &contract, paths, h, seed)?;
            println!("price = {} (se {})", est.price, est.std_error);
        }
        Some(spec) => {
            let (lo, hi, n) = parse_sweep(spec)?;
            let mut table = String::from("x0\tprice\tstd_error\n");
            for i in 0..n {
                let x0 = lo + (hi - lo) * i as f64 / (n.max(2) - 1) as f64;
                let pi = ModelParams { x0, ..p.clone() };
                let est = ctmc::mc_price(&pi, &contract, paths, h, seed)?;
                table.push_str(&format!("{x0}\t{}\t{}\n", est.price, est.std_error));
            }
            write_or_print(out, &table)?;
        }
    }
    Ok(())
}

fn read_train_config(path: &Path, seed: u64) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    let map = parse_kv(&text)?;
    let mut cfg = TrainConfig::desk(ModelVariant::Svsdu, seed);
    for (key, value) in map {
        match key.as_str() {
            "variant" => cfg.variant = ModelVariant::parse(&value)?,
            "hidden_layers" => cfg.hidden_layers = value.parse()?,
            "width" => cfg.width = value.parse()?,
            "iterations" => cfg.iterations = value.parse()?,
            "batch_size" => cfg.batch_size = value.parse()?,
            "pool_size" => cfg.pool_size = value.parse()?,
            "omega_in" => cfg.omega_in = value.parse()?,
            "omega_bc" => cfg.omega_bc = value.parse()?,
            "omega_te" => cfg.omega_te = value.parse()?,
            "seed" => cfg.seed = value.parse()?,
            other => bail!("unknown training config key `{other}`"),
        }
    }
    Ok(cfg)
}

fn cmd_train(
    config: Option<&Path>,
    preset: Preset,
    variant: ModelVariant,
    seed: u64,
    weights_out: &Path,
    history_out: &Path,
) -> Result<()> {
    let cfg = match config {
        Some(path) => read_train_config(path, seed)?,
        None => match preset {
            Preset::Desk => TrainConfig::desk(variant, seed),
            Preset::Smoke => TrainConfig::smoke(variant, seed),
            Preset::Paper => TrainConfig::paper(variant, seed),
        },
    };
    eprintln!(
        "training {} net: L={} m={} iters={} batch={}",
        cfg.variant.as_str(),
        cfg.hidden_layers,
        cfg.width,
        cfg.iterations,
        cfg.batch_size
    );
    let (weights, history) = train(&cfg)?;
    weights.save(weights_out)?;
    pde::write_history(history_out, &history)?;
    let last = history.last().expect("non-empty history");
    println!(
        "trained: final loss {} (interior {}, boundary {}, terminal {})",
        last.loss, last.interior, last.boundary, last.terminal
    );
    println!("weights -> {}", weights_out.display());
    println!("history -> {}", history_out.display());
    Ok(())
}

fn cmd_price_net(
    weights: &Path,
    params: &Path,
    strike: f64,
    maturity: f64,
    valuation_time: f64,
    sweep: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let w = NetworkWeights::load(weights)?;
    let p = read_params(params)?;
    let contract = ContractSpec {
        strike,
        maturity,
        valuation_time,
    };
    let raw = RawInput::from_model(&p, &contract);
    match sweep {
        None => {
            let price = net::forward(&w, &raw)?;
            println!("price = {price}");
        }
        Some(spec) => {
            let (lo, hi, n) = parse_sweep(spec)?;
            let mut table = String::from("x0\tprice\n");
            for i in 0..n {
                let x0 = lo + (hi - lo) * i as f64 / (n.max(2) - 1) as f64;
                let price = net::forward(&w, &RawInput { x: x0, ..raw })?;
                table.push_str(&format!("{x0}\t{price}\n"));
            }
            write_or_print(out, &table)?;
        }
    }
    Ok(())
}

/// One calibration record: a day, a quote group, and the fitted state.
#[derive(Debug, Clone)]
pub struct DayRecord {
    pub date: NaiveDate,
    pub group: String,
    pub sample: String,
    pub variant: ModelVariant,
    pub c_star: f64,
    pub phi: Vec<f64>,
    pub dd: Option<f64>,
    pub du: Option<f64>,
    pub ape: f64,
    pub aae: f64,
    pub rmse: f64,
    pub status: String,
    pub n_quotes: usize,
}

impl DayRecord {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("date = {}\n", self.date));
        s.push_str(&format!("group = {}\n", self.group));
        s.push_str(&format!("sample = {}\n", self.sample));
        s.push_str(&format!("variant = {}\n", self.variant.as_str()));
        s.push_str(&format!("c_star = {}\n", self.c_star));
        for (f, v) in phi_fields(self.variant).iter().zip(self.phi.iter()) {
            s.push_str(&format!("{} = {}\n", f.name(), v));
        }
        if let Some(dd) = self.dd {
            s.push_str(&format!("dd = {dd}\n"));
        }
        if let Some(du) = self.du {
            s.push_str(&format!("du = {du}\n"));
        }
        s.push_str(&format!("ape = {}\n", self.ape));
        s.push_str(&format!("aae = {}\n", self.aae));
        s.push_str(&format!("rmse = {}\n", self.rmse));
        s.push_str(&format!("status = {}\n", self.status));
        s.push_str(&format!("n_quotes = {}\n", self.n_quotes));
        s
    }

    pub fn from_kv(text: &str) -> Result<DayRecord> {
        let map = parse_kv(text)?;
        let get = |k: &str| -> Result<&str> {
            map.iter()
                .find(|(n, _)| n == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| anyhow!("record missing `{k}`"))
        };
        let variant = ModelVariant::parse(get("variant")?)?;
        let phi = phi_fields(variant)
            .iter()
            .map(|f| Ok(get(f.name())?.parse::<f64>()?))
            .collect::<Result<Vec<f64>>>()?;
        Ok(DayRecord {
            date: NaiveDate::parse_from_str(get("date")?, "%Y-%m-%d")?,
            group: get("group")?.to_string(),
            sample: get("sample")?.to_string(),
            variant,
            c_star: get("c_star")?.parse()?,
            phi,
            dd: get("dd").ok().map(|v| v.parse()).transpose()?,
            du: get("du").ok().map(|v| v.parse()).transpose()?,
            ape: get("ape")?.parse()?,
            aae: get("aae")?.parse()?,
            rmse: get("rmse")?.parse()?,
            status: get("status")?.to_string(),
            n_quotes: get("n_quotes")?.parse()?,
        })
    }
}

pub fn write_records(path: &Path, records: &[DayRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_kv());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<DayRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.split("\n\n")
        .filter(|block| !block.trim().is_empty())
        .map(DayRecord::from_kv)
        .collect()
}

/// Quote-level output row of a calibration run; carries enough to rebuild
/// the quote for bucketing.
#[derive(Debug, Clone)]
pub struct PriceRow {
    pub date: NaiveDate,
    pub group: String,
    pub sample: String,
    pub quote: OptionQuote,
    pub model_price: f64,
}

pub fn write_prices(path: &Path, rows: &[PriceRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "date\tgroup\tsample\texpiry_date\tstrike\tbid\task\tunderlying_close\trate\tmodel_price"
    )?;
    for r in rows {
        writeln!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.date,
            r.group,
            r.sample,
            r.quote.expiry_date,
            r.quote.strike,
            r.quote.bid,
            r.quote.ask,
            r.quote.underlying_close,
            r.quote.rate,
            r.model_price
        )?;
    }
    Ok(())
}

pub fn read_prices(path: &Path) -> Result<Vec<PriceRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 10 {
            bail!("prices line {}: expected 10 fields", i + 1);
        }
        rows.push(PriceRow {
            date: NaiveDate::parse_from_str(parts[0], "%Y-%m-%d")?,
            group: parts[1].to_string(),
            sample: parts[2].to_string(),
            quote: OptionQuote {
                quote_date: NaiveDate::parse_from_str(parts[0], "%Y-%m-%d")?,
                expiry_date: NaiveDate::parse_from_str(parts[3], "%Y-%m-%d")?,
                strike: parts[4].parse()?,
                bid: parts[5].parse()?,
                ask: parts[6].parse()?,
                underlying_close: parts[7].parse()?,
                rate: parts[8].parse()?,
            },
            model_price: parts[9].parse()?,
        });
    }
    Ok(rows)
}

fn group_key(mode: GroupMode, q: &OptionQuote) -> String {
    match mode {
        GroupMode::All => "all".to_string(),
        GroupMode::ByMaturity => {
            format!("dte{}", maturity_bucket_label(maturity_bucket(q.days_to_expiry())))
        }
        GroupMode::ByMoneyness => {
            format!("mny{}", moneyness_bucket_label(moneyness_bucket(q.moneyness())))
        }
    }
}

fn to_calib_quotes(quotes: &[OptionQuote]) -> Vec<CalibQuote> {
    quotes
        .iter()
        .map(|q| CalibQuote {
            strike: q.strike,
            tau: q.tau(),
            mid: q.mid(),
            spot: q.underlying_close,
            rate: q.rate,
        })
        .collect()
}

/// Network price of one quote at a fitted parameter vector, mapped back to
/// raw price units.
fn net_price_for_quote(
    w: &NetworkWeights,
    q: &CalibQuote,
    phi: &[f64],
    l: f64,
) -> Result<f64> {
    let r = calibrate::residual_vector(w, &[*q], phi, l)?;
    Ok((r[0] + q.mid / l) * l)
}

/// Shared day-by-day calibration driver. In-sample mode fits each (day,
/// group); out-of-sample mode prices each day after the first with the
/// previous day's fit, record levels rolled to the current spot.
#[allow(clippy::too_many_arguments)]
pub fn run_calibration(
    w: Option<&NetworkWeights>,
    variant: ModelVariant,
    chain: &[OptionQuote],
    mode: GroupMode,
    out_of_sample: bool,
    c_init: f64,
) -> Result<(Vec<DayRecord>, Vec<PriceRow>)> {
    let dates = market::chain_dates(chain);
    if dates.is_empty() {
        bail!("chain has no quotes");
    }
    // group -> (previous C*, previous phi, previous spot)
    let mut carry: BTreeMap<String, (f64, Vec<f64>, f64)> = BTreeMap::new();
    let mut records = Vec::new();
    let mut prices = Vec::new();
    for date in dates {
        let day: Vec<OptionQuote> = filter_chain(chain, date);
        if day.is_empty() {
            continue;
        }
        let mut groups: BTreeMap<String, Vec<OptionQuote>> = BTreeMap::new();
        for q in &day {
            groups.entry(group_key(mode, q)).or_default().push(*q);
        }
        for (group, quotes) in groups {
            let cq = to_calib_quotes(&quotes);
            let spot = cq[0].spot;
            let prev = carry.get(&group).cloned();
            let outcome: Result<(f64, Vec<f64>, Vec<f64>, CalibrationResult)> = if out_of_sample
            {
                match prev.clone() {
                    None => {
                        // the first day has nothing to predict from; fit it
                        // in-sample to seed the carry
                        fit_group(w, variant, &cq, c_init, None).map(|(c, r)| {
                            let model = model_prices(w, variant, &cq, &r.phi, spot / c)
                                .unwrap_or_default();
                            (c, r.phi.clone(), model, r)
                        })
                    }
                    Some((c_prev, phi_prev, spot_prev)) => {
                        let mut phi = phi_prev.clone();
                        roll_phi(variant, &mut phi, spot_prev, spot)?;
                        let l = spot / c_prev;
                        let model = model_prices(w, variant, &cq, &phi, l)?;
                        let dummy = CalibrationResult {
                            phi: phi.clone(),
                            scale_c: c_prev,
                            scale_factor: l,
                            rmse_history: vec![f64::NAN],
                            status: calibrate::CalibStatus::Converged,
                            dd: dd_of(variant, &phi, spot),
                            du: du_of(variant, &phi, spot),
                        };
                        Ok((c_prev, phi, model, dummy))
                    }
                }
            } else {
                fit_group(w, variant, &cq, prev.as_ref().map(|p| p.0).unwrap_or(c_init), prev.as_ref().map(|p| p.1.as_slice()))
                    .map(|(c, r)| {
                        let model = model_prices(w, variant, &cq, &r.phi, spot / c)
                            .unwrap_or_default();
                        (c, r.phi.clone(), model, r)
                    })
            };
            let (c_star, phi, model, result) = outcome?;
            let market_mids: Vec<f64> = cq.iter().map(|q| q.mid).collect();
            let (ape, aae) = calibrate::metrics(&model, &market_mids)?;
            let sample = if out_of_sample && prev.is_some() { "out" } else { "in" };
            records.push(DayRecord {
                date,
                group: group.clone(),
                sample: sample.to_string(),
                variant,
                c_star,
                phi: phi.clone(),
                dd: result.dd,
                du: result.du,
                ape,
                aae,
                rmse: *result.rmse_history.last().unwrap(),
                status: result.status.as_str().to_string(),
                n_quotes: cq.len(),
            });
            for (q, m) in quotes.iter().zip(model.iter()) {
                prices.push(PriceRow {
                    date,
                    group: group.clone(),
                    sample: sample.to_string(),
                    quote: *q,
                    model_price: *m,
                });
            }
            // out-of-sample carries the in-sample fit of the day forward, so
            // refit when we only predicted
            let carried = if out_of_sample && prev.is_some() {
                let (c, r) = fit_group(w, variant, &cq, prev.as_ref().unwrap().0, Some(&prev.as_ref().unwrap().1))?;
                (c, r.phi, spot)
            } else {
                (c_star, phi, spot)
            };
            carry.insert(group, carried);
        }
    }
    Ok((records, prices))
}

fn fit_group(
    w: Option<&NetworkWeights>,
    variant: ModelVariant,
    cq: &[CalibQuote],
    c_init: f64,
    phi0: Option<&[f64]>,
) -> Result<(f64, CalibrationResult)> {
    match (w, variant) {
        (None, ModelVariant::Heston) => {
            let settings = LmSettings::new(vec![
                (-0.999, 0.999),
                (0.05, 8.0),
                (0.005, 1.0),
                (0.02, 2.0),
                (0.003, 0.5),
            ]);
            let start = match phi0 {
                Some(p) => p.to_vec(),
                None => default_phi0(&settings),
            };
            let r = lm_calibrate_heston(cq, &start, &settings)?;
            Ok((cq[0].spot, r))
        }
        (Some(w), _) => {
            let (c, r) = scaling_search(w, cq, phi0, c_init, 10.0, 23)?;
            Ok((c, r))
        }
        (None, _) => bail!("network variants need --weights"),
    }
}

fn model_prices(
    w: Option<&NetworkWeights>,
    variant: ModelVariant,
    cq: &[CalibQuote],
    phi: &[f64],
    l: f64,
) -> Result<Vec<f64>> {
    match (w, variant) {
        (Some(w), _) => cq
            .iter()
            .map(|q| net_price_for_quote(w, q, phi, l))
            .collect(),
        (None, ModelVariant::Heston) => cq
            .iter()
            .map(|q| {
                let p = HestonParams {
                    r: q.rate,
                    kappa: phi[1],
                    theta: phi[2],
                    sigma: phi[3],
                    rho: phi[0],
                    v0: phi[4],
                    x0: q.spot,
                };
                Ok(heston_call(&p, q.strike, q.tau)?)
            })
            .collect(),
        (None, _) => bail!("network variants need --weights"),
    }
}

fn dd_of(variant: ModelVariant, phi: &[f64], spot: f64) -> Option<f64> {
    phi_fields(variant)
        .iter()
        .position(|&f| f == InputField::RunMax)
        .map(|i| spot / phi[i])
}

fn du_of(variant: ModelVariant, phi: &[f64], spot: f64) -> Option<f64> {
    phi_fields(variant)
        .iter()
        .position(|&f| f == InputField::RunMin)
        .map(|i| spot / phi[i])
}

/// Roll the record levels in a phi vector from yesterday's spot to today's,
/// preserving the fitted drawdown/drawup ratios.
fn roll_phi(variant: ModelVariant, phi: &mut [f64], spot_prev: f64, spot_curr: f64) -> Result<()> {
    let fields = phi_fields(variant);
    let iy = fields.iter().position(|&f| f == InputField::RunMax);
    let iz = fields.iter().position(|&f| f == InputField::RunMin);
    let y_prev = iy.map(|i| phi[i]).unwrap_or(spot_prev);
    let z_prev = iz.map(|i| phi[i]).unwrap_or(spot_prev);
    let (y_new, z_new) = calibrate::roll_ratios(
        y_prev.max(spot_prev),
        z_prev.min(spot_prev),
        spot_prev,
        spot_curr,
    )?;
    if let Some(i) = iy {
        phi[i] = y_new;
    }
    if let Some(i) = iz {
        phi[i] = z_new;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_calibrate(
    weights: Option<&Path>,
    variant: ModelVariant,
    chain_path: &Path,
    mode: GroupMode,
    out_of_sample: bool,
    strict: bool,
    c_init: f64,
    records_out: &Path,
    prices_out: &Path,
) -> Result<()> {
    let w = match weights {
        Some(path) => {
            let w = NetworkWeights::load(path)?;
            if w.config.variant != variant {
                bail!(
                    "weights are for {}, requested {}",
                    w.config.variant.as_str(),
                    variant.as_str()
                );
            }
            Some(w)
        }
        None => None,
    };
    let load = load_chain(chain_path, strict)?;
    for skip in &load.skipped {
        eprintln!("skipping line {}: {}", skip.line, skip.message);
    }
    let (records, prices) =
        run_calibration(w.as_ref(), variant, &load.quotes, mode, out_of_sample, c_init)?;
    write_records(records_out, &records)?;
    write_prices(prices_out, &prices)?;
    println!(
        "calibrated {} day-groups over {} priced quotes",
        records.len(),
        prices.len()
    );
    println!("records -> {}", records_out.display());
    println!("prices -> {}", prices_out.display());
    Ok(())
}

fn cmd_report(records_path: &Path, prices_path: &Path, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let records = read_records(records_path)?;
    let prices = read_prices(prices_path)?;

    // parameter time series (plot data)
    let ts_path = out_dir.join("params_timeseries.tsv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&ts_path)?);
        writeln!(
            f,
            "date\tgroup\tsample\tc_star\tdd\tdu\tape\taae\trmse\tstatus\tn_quotes\tphi"
        )?;
        for r in &records {
            let phi = r
                .phi
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",");
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.date,
                r.group,
                r.sample,
                r.c_star,
                r.dd.map(|v| v.to_string()).unwrap_or_default(),
                r.du.map(|v| v.to_string()).unwrap_or_default(),
                r.ape,
                r.aae,
                r.rmse,
                r.status,
                r.n_quotes,
                phi
            )?;
        }
    }

    // bucket tables per sample kind
    for sample in ["in", "out"] {
        let rows: Vec<&PriceRow> = prices.iter().filter(|r| r.sample == sample).collect();
        if rows.is_empty() {
            continue;
        }
        let quotes: Vec<OptionQuote> = rows.iter().map(|r| r.quote).collect();
        let model: Vec<f64> = rows.iter().map(|r| r.model_price).collect();
        let report = bucket_report(&quotes, Some(&model))?;
        let path = out_dir.join(format!("bucket_table_{sample}.tsv"));
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(
            f,
            "moneyness\tmaturity\tcount\tmean_mid\tmean_half_spread\tape\taae"
        )?;
        for mb in 0..6 {
            for tb in 0..3 {
                let c = report.cells[mb][tb];
                writeln!(
                    f,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    moneyness_bucket_label(mb),
                    maturity_bucket_label(tb),
                    c.count,
                    c.mean_mid,
                    c.mean_half_spread,
                    c.ape.map(|v| v.to_string()).unwrap_or_default(),
                    c.aae.map(|v| v.to_string()).unwrap_or_default()
                )?;
            }
        }
    }

    // implied-volatility smile diagnostic (quote level)
    let smile_path = out_dir.join("iv_smile.tsv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&smile_path)?);
        writeln!(f, "date\tgroup\tsample\tstrike\tdte\tmarket_iv\tmodel_iv")?;
        for r in &prices {
            let q = &r.quote;
            let market_iv =
                market::implied_vol(q.mid(), q.underlying_close, q.strike, q.rate, q.tau());
            let model_iv = market::implied_vol(
                r.model_price,
                q.underlying_close,
                q.strike,
                q.rate,
                q.tau(),
            );
            if let (Ok(a), Ok(b)) = (market_iv, model_iv) {
                writeln!(
                    f,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    r.date,
                    r.group,
                    r.sample,
                    q.strike,
                    q.days_to_expiry(),
                    a,
                    b
                )?;
            }
        }
    }
    println!("report written to {}", out_dir.display());
    Ok(())
}

//! File formats: CSV batch data, flat `key = value` configs, and result
//! reports in JSON or CSV. Floats are written with 17 significant digits.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::Serialize;

use crate::algorithm::RunResult;
use crate::error::{Error, Result};
use crate::eval::{ser, AdversarySpec, ExperimentReport, Regressors, Scenario};
use crate::synth::{CovariateModel, NoiseModel};
use crate::types::{AlgoConfig, Batch, BatchCollection};

fn csv_err(e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(e.to_string()),
        _ => Error::DataFormat(e.to_string()),
    }
}

/// Writes `batch_id,x_0,…,x_{d−1},y` rows, batch ids numbered from 0.
pub fn write_batches_csv<W: Write>(coll: &BatchCollection, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = coll.dim();
    let mut header = vec!["batch_id".to_string()];
    header.extend((0..d).map(|j| format!("x_{j}")));
    header.push("y".into());
    w.write_record(&header).map_err(csv_err)?;
    let mut row = Vec::with_capacity(d + 2);
    for (b, batch) in coll.batches().iter().enumerate() {
        for s in batch.samples() {
            row.clear();
            row.push(b.to_string());
            row.extend(s.x.iter().map(|v| ser::number(*v)));
            row.push(ser::number(s.y));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the CSV batch format. Rows of one batch must be contiguous, every
/// batch must have the same number of rows, and batches keep the order in
/// which their ids first appear.
pub fn read_batches_csv<R: Read>(input: R) -> Result<BatchCollection> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[0] != "batch_id" || cols[cols.len() - 1] != "y" {
        return Err(Error::DataFormat("header must be batch_id,x_0,...,x_{d-1},y".into()));
    }
    let d = cols.len() - 2;
    for (j, name) in cols[1..=d].iter().enumerate() {
        if *name != format!("x_{j}") {
            return Err(Error::DataFormat(format!("column {} should be x_{j}, found {name}", j + 1)));
        }
    }

    let mut batches = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut current: Option<String> = None;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let flush = |xs: &mut Vec<f64>, ys: &mut Vec<f64>, batches: &mut Vec<Batch>| -> Result<()> {
        if !ys.is_empty() {
            batches.push(Batch::new(d, std::mem::take(xs), std::mem::take(ys)).map_err(|e| Error::DataFormat(e.to_string()))?);
        }
        Ok(())
    };
    for (line, record) in r.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let id = &record[0];
        if current.as_deref() != Some(id) {
            flush(&mut xs, &mut ys, &mut batches)?;
            if !seen.insert(id.to_string()) {
                return Err(Error::DataFormat(format!("rows of batch {id} are not contiguous (data row {})", line + 1)));
            }
            current = Some(id.to_string());
        }
        for (j, field) in record.iter().enumerate().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::DataFormat(format!("data row {}: cannot parse {field:?} as a number", line + 1)))?;
            if j <= d {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    flush(&mut xs, &mut ys, &mut batches)?;
    if batches.is_empty() {
        return Err(Error::DataFormat("no data rows".into()));
    }
    BatchCollection::new(batches).map_err(|e| Error::DataFormat(e.to_string()))
}

/// Everything a config file can set.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub scenario: Scenario,
    pub algo: AlgoConfig,
    pub trials: usize,
    pub seed: u64,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self { scenario: Scenario::default(), algo: AlgoConfig::default(), trials: 1, seed: 0 }
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Flat key/value rendering of a configuration, in a fixed key order.
pub fn config_entries(scenario: &Scenario, cfg: &AlgoConfig, trials: Option<usize>, seed: Option<u64>) -> Vec<(String, String)> {
    let mut e: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| e.push((k.to_string(), v));
    put("alpha", cfg.alpha.to_string());
    put("sigma", cfg.sigma.to_string());
    put("C", cfg.hypercontractivity.to_string());
    put("C_p", cfg.noise_hypercontractivity.to_string());
    put("p", cfg.noise_moment.to_string());
    put("c2", cfg.c2.to_string());
    put("c3", cfg.c3.to_string());
    put("c4", cfg.c4.to_string());
    put("stationary_tol_scale", cfg.stationary_tol_scale.to_string());
    put("power_iter_tol", cfg.power_iter_tol.to_string());
    put("power_iter_max", cfg.power_iter_max.to_string());
    if let Some(f) = cfg.max_filter_calls {
        put("max_filter_calls", f.to_string());
    }
    put("rng_seed", cfg.rng_seed.to_string());

    put("d", scenario.d.to_string());
    put("n", scenario.n.to_string());
    put("m", scenario.m.to_string());
    put("genuine_fraction", scenario.genuine_fraction.to_string());
    match &scenario.regressors {
        Regressors::Planted { k, separation } => {
            put("k", k.to_string());
            put("separation", separation.to_string());
        }
        Regressors::Explicit(ws) => {
            for (j, w) in ws.iter().enumerate() {
                put(&format!("w_star.{j}"), fmt_list(w));
            }
        }
    }
    match &scenario.covariates {
        CovariateModel::IsotropicGaussianClamped { c1 } => {
            put("covariates", "gaussian".into());
            put("c1", c1.to_string());
        }
        CovariateModel::BoundedUniform => put("covariates", "uniform".into()),
        CovariateModel::Anisotropic { condition_number, c1 } => {
            put("covariates", "anisotropic".into());
            put("condition_number", condition_number.to_string());
            put("c1", c1.to_string());
        }
    }
    match scenario.noise {
        NoiseModel::Gaussian => put("noise", "gaussian".into()),
        NoiseModel::Bounded => put("noise", "bounded".into()),
        NoiseModel::StudentT { dof } => {
            put("noise", "student_t".into());
            put("dof", dof.to_string());
        }
    }
    match &scenario.adversary {
        AdversarySpec::None => put("adversary", "none".into()),
        AdversarySpec::FixedWrongModel { w_adv, distance } => {
            put("adversary", "fixed_wrong_model".into());
            match w_adv {
                Some(w) => put("adv_w", fmt_list(w)),
                None => put("adv_distance", distance.to_string()),
            }
        }
        AdversarySpec::Mirror { scale } => {
            put("adversary", "mirror".into());
            put("adv_scale", scale.to_string());
        }
        AdversarySpec::PointMass { x0, y0 } => {
            put("adversary", "point_mass".into());
            if let Some(x) = x0 {
                put("adv_x0", fmt_list(x));
            }
            put("adv_y0", y0.to_string());
        }
        AdversarySpec::GradientAttack { shift, distance } => {
            put("adversary", "gradient_attack".into());
            match shift {
                Some(s) => put("adv_shift", fmt_list(s)),
                None => put("adv_distance", distance.to_string()),
            }
        }
    }
    put("holdout_per_component", scenario.holdout_per_component.to_string());
    if let Some(t) = trials {
        put("trials", t.to_string());
    }
    if let Some(s) = seed {
        put("seed", s.to_string());
    }
    e
}

pub fn config_to_string(cfg: &ConfigFile) -> String {
    config_entries(&cfg.scenario, &cfg.algo, Some(cfg.trials), Some(cfg.seed))
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some((line, raw)) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::DataFormat(format!("line {line}: invalid value {raw:?} for {key}"))),
        }
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.take(key) {
            None => Ok(None),
            Some((line, raw)) => raw
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| Error::DataFormat(format!("line {line}: invalid number list {raw:?} for {key}"))),
        }
    }
}

/// Parses a flat config. Blank lines and `#` comments are ignored; unknown
/// or repeated keys are errors. Unset keys keep their defaults.
pub fn parse_config(text: &str) -> Result<ConfigFile> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::DataFormat(format!("line {}: expected key = value", i + 1)))?;
        let key = k.trim().to_string();
        if map.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
            return Err(Error::DataFormat(format!("line {}: duplicate key {key}", i + 1)));
        }
    }
    let mut e = Entries { map };
    let mut out = ConfigFile::default();

    let a = &mut out.algo;
    macro_rules! set {
        ($target:expr, $key:expr) => {
            if let Some(v) = e.parse($key)? {
                $target = v;
            }
        };
    }
    set!(a.alpha, "alpha");
    set!(a.sigma, "sigma");
    set!(a.hypercontractivity, "C");
    set!(a.noise_hypercontractivity, "C_p");
    set!(a.noise_moment, "p");
    set!(a.c2, "c2");
    set!(a.c3, "c3");
    set!(a.c4, "c4");
    set!(a.stationary_tol_scale, "stationary_tol_scale");
    set!(a.power_iter_tol, "power_iter_tol");
    set!(a.power_iter_max, "power_iter_max");
    if let Some(v) = e.parse("max_filter_calls")? {
        a.max_filter_calls = Some(v);
    }
    set!(a.rng_seed, "rng_seed");

    let s = &mut out.scenario;
    s.sigma = out.algo.sigma;
    set!(s.d, "d");
    set!(s.n, "n");
    set!(s.m, "m");
    set!(s.holdout_per_component, "holdout_per_component");

    let mut explicit = BTreeMap::new();
    let star_keys: Vec<String> = e.map.keys().filter(|k| k.starts_with("w_star.")).cloned().collect();
    for key in star_keys {
        let line = e.map[&key].0;
        let j: usize = key["w_star.".len()..]
            .parse()
            .map_err(|_| Error::DataFormat(format!("line {line}: bad regressor key {key}")))?;
        explicit.insert(j, e.list(&key)?.unwrap_or_default());
    }
    let k: Option<usize> = e.parse("k")?;
    let separation: Option<f64> = e.parse("separation")?;
    if !explicit.is_empty() {
        if k.is_some() || separation.is_some() {
            return Err(Error::DataFormat("w_star.* cannot be combined with k or separation".into()));
        }
        if explicit.keys().copied().ne(0..explicit.len()) {
            return Err(Error::DataFormat("w_star.* indices must be 0, 1, 2, ...".into()));
        }
        s.regressors = Regressors::Explicit(explicit.into_values().collect());
    } else if let Regressors::Planted { k: dk, separation: ds } = &mut s.regressors {
        *dk = k.unwrap_or(*dk);
        *ds = separation.unwrap_or(*ds);
    }

    let c1: Option<f64> = e.parse("c1")?;
    let condition_number: Option<f64> = e.parse("condition_number")?;
    let covariates: Option<String> = e.parse("covariates")?;
    s.covariates = match covariates.as_deref().unwrap_or("gaussian") {
        "gaussian" => CovariateModel::IsotropicGaussianClamped { c1: c1.unwrap_or(4.0) },
        "uniform" => CovariateModel::BoundedUniform,
        "anisotropic" => CovariateModel::Anisotropic {
            condition_number: condition_number.unwrap_or(10.0),
            c1: c1.unwrap_or(4.0),
        },
        other => return Err(Error::DataFormat(format!("unknown covariate model {other:?}"))),
    };

    let dof: Option<f64> = e.parse("dof")?;
    let noise: Option<String> = e.parse("noise")?;
    s.noise = match noise.as_deref().unwrap_or("gaussian") {
        "gaussian" => NoiseModel::Gaussian,
        "bounded" => NoiseModel::Bounded,
        "student_t" => NoiseModel::StudentT { dof: dof.unwrap_or(5.0) },
        other => return Err(Error::DataFormat(format!("unknown noise model {other:?}"))),
    };

    let adversary: Option<String> = e.parse("adversary")?;
    let distance: f64 = e.parse("adv_distance")?.unwrap_or(4.0);
    let adv_w = e.list("adv_w")?;
    let adv_scale: f64 = e.parse("adv_scale")?.unwrap_or(1.0);
    let adv_x0 = e.list("adv_x0")?;
    let adv_y0: f64 = e.parse("adv_y0")?.unwrap_or(5.0);
    let adv_shift = e.list("adv_shift")?;
    s.adversary = match adversary.as_deref().unwrap_or("none") {
        "none" => AdversarySpec::None,
        "fixed_wrong_model" => AdversarySpec::FixedWrongModel { w_adv: adv_w, distance },
        "mirror" => AdversarySpec::Mirror { scale: adv_scale },
        "point_mass" => AdversarySpec::PointMass { x0: adv_x0, y0: adv_y0 },
        "gradient_attack" => AdversarySpec::GradientAttack { shift: adv_shift, distance },
        other => return Err(Error::DataFormat(format!("unknown adversary {other:?}"))),
    };
    let default_fraction = if s.adversary == AdversarySpec::None { 1.0 } else { out.algo.alpha };
    s.genuine_fraction = e.parse("genuine_fraction")?.unwrap_or(default_fraction);

    set!(out.trials, "trials");
    set!(out.seed, "seed");

    if let Some((key, (line, _))) = e.map.into_iter().next() {
        return Err(Error::DataFormat(format!("line {line}: unknown key {key}")));
    }
    out.algo.validate()?;
    Ok(out)
}

#[derive(Serialize)]
struct JsonReport<'a> {
    config: BTreeMap<&'a str, &'a str>,
    per_trial: &'a [crate::eval::Metrics],
    aggregate: &'a crate::eval::Aggregate,
}

pub fn write_report_json<W: Write>(report: &ExperimentReport, mut out: W) -> Result<()> {
    let doc = JsonReport {
        config: report.config.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect(),
        per_trial: &report.per_trial,
        aggregate: &report.aggregate,
    };
    serde_json::to_writer_pretty(&mut out, &doc).map_err(|e| Error::Io(e.to_string()))?;
    out.write_all(b"\n")?;
    Ok(())
}

/// One row per trial; per-component errors are `;`-separated.
pub fn write_report_csv<W: Write>(report: &ExperimentReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "trial",
        "seed",
        "min_list_error",
        "list_size",
        "holdout_accuracy",
        "holdout_nearest",
        "filter_calls",
        "rejected_clusters",
        "complete",
        "wall_time_ms",
        "per_component_error",
        "error",
    ])
    .map_err(csv_err)?;
    for r in &report.per_trial {
        w.write_record([
            r.trial.to_string(),
            r.seed.to_string(),
            ser::number(r.min_list_error),
            r.list_size.to_string(),
            ser::number(r.holdout_accuracy),
            ser::number(r.holdout_nearest),
            r.filter_calls.to_string(),
            r.rejected_clusters.to_string(),
            r.complete.to_string(),
            r.wall_time_ms.map(|t| t.to_string()).unwrap_or_default(),
            r.per_component_error.iter().map(|v| ser::number(*v)).collect::<Vec<_>>().join(";"),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct JsonTriplet {
    #[serde(serialize_with = "ser::f64")]
    kappa: f64,
    #[serde(serialize_with = "ser::f64")]
    cluster_weight: f64,
    support: usize,
    #[serde(serialize_with = "ser::f64_vec")]
    w: Vec<f64>,
}

#[derive(Serialize)]
struct JsonRun<'a> {
    config: BTreeMap<&'a str, &'a str>,
    list: Vec<JsonTriplet>,
    filter_calls: usize,
    rejected_clusters: usize,
    complete: bool,
}

/// Writes the list of a single run.
pub fn write_run_json<W: Write>(config: &[(String, String)], result: &RunResult, mut out: W) -> Result<()> {
    let doc = JsonRun {
        config: config.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect(),
        list: result
            .list
            .iter()
            .map(|t| JsonTriplet {
                kappa: t.kappa,
                cluster_weight: t.beta.total(),
                support: t.beta.support_size(),
                w: t.w.clone(),
            })
            .collect(),
        filter_calls: result.filter_calls,
        rejected_clusters: result.rejected_clusters,
        complete: result.complete,
    };
    serde_json::to_writer_pretty(&mut out, &doc).map_err(|e| Error::Io(e.to_string()))?;
    out.write_all(b"\n")?;
    Ok(())
}

/// One row per list element: `index,kappa,cluster_weight,support,w_0,…`.
pub fn write_run_csv<W: Write>(result: &RunResult, d: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["index", "kappa", "cluster_weight", "support"].map(String::from).to_vec();
    header.extend((0..d).map(|j| format!("w_{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, t) in result.list.iter().enumerate() {
        let mut row = vec![i.to_string(), ser::number(t.kappa), ser::number(t.beta.total()), t.beta.support_size().to_string()];
        row.extend(t.w.iter().map(|v| ser::number(*v)));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let text = "alpha = 0.1\n# comment\nsigma=0.5\nC = 2\nk = 3\nseparation = 1.5\nadversary = mirror\nadv_scale = 2\ntrials = 7\nseed = 11\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.algo.alpha, 0.1);
        assert_eq!(cfg.algo.hypercontractivity, 2.0);
        assert_eq!(cfg.scenario.sigma, 0.5);
        assert_eq!(cfg.scenario.genuine_fraction, 0.1);
        assert_eq!(cfg.scenario.regressors, Regressors::Planted { k: 3, separation: 1.5 });
        assert_eq!(cfg.scenario.adversary, AdversarySpec::Mirror { scale: 2.0 });
        assert_eq!((cfg.trials, cfg.seed), (7, 11));
        assert_eq!(parse_config(&config_to_string(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn explicit_regressors() {
        let cfg = parse_config("d = 2\nw_star.0 = 1, 0\nw_star.1 = 0,1\n").unwrap();
        assert_eq!(cfg.scenario.regressors, Regressors::Explicit(vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
        assert_eq!(parse_config(&config_to_string(&cfg)).unwrap(), cfg);
        assert!(parse_config("w_star.1 = 1,0\n").is_err());
        assert!(parse_config("w_star.0 = 1,0\nk = 2\n").is_err());
    }

    #[test]
    fn config_errors() {
        assert!(matches!(parse_config("bogus = 1\n"), Err(Error::DataFormat(_))));
        assert!(matches!(parse_config("alpha\n"), Err(Error::DataFormat(_))));
        assert!(matches!(parse_config("alpha = x\n"), Err(Error::DataFormat(_))));
        assert!(matches!(parse_config("alpha = 1\nalpha = 1\n"), Err(Error::DataFormat(_))));
        assert!(matches!(parse_config("alpha = 2\n"), Err(Error::Argument(_))));
        assert!(matches!(parse_config("noise = cauchy\n"), Err(Error::DataFormat(_))));
    }

    fn sample_collection() -> BatchCollection {
        let b = |s: f64| Batch::from_rows((0..3).map(|i| (vec![i as f64 * s, 0.1 / 3.0], s * 1e-7))).unwrap();
        BatchCollection::new(vec![b(1.0), b(-2.5), b(1.0 / 7.0)]).unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let coll = sample_collection();
        let mut buf = Vec::new();
        write_batches_csv(&coll, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("batch_id,x_0,x_1,y\n"));
        assert_eq!(read_batches_csv(buf.as_slice()).unwrap(), coll);
    }

    #[test]
    fn csv_format_errors() {
        let bad = [
            "id,x_0,y\n0,1,2\n",
            "batch_id,x_1,y\n0,1,2\n",
            "batch_id,x_0,y\n0,1,2\n1,1,2\n0,1,2\n",
            "batch_id,x_0,y\n0,1,2\n0,1,2\n1,1,2\n",
            "batch_id,x_0,y\n0,1,abc\n",
            "batch_id,x_0,y\n0,1\n",
            "batch_id,x_0,y\n",
        ];
        for text in bad {
            assert!(matches!(read_batches_csv(text.as_bytes()), Err(Error::DataFormat(_))), "{text:?}");
        }
    }
}
